//! Image comparison measures used to check reconstruction fidelity, layout
//! retention and texture similarity.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::{LatentImage, PixelImage};

fn same_size(a: &PixelImage, b: &PixelImage) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(alloc::format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`. Identical images
/// give `f64::INFINITY`.
pub fn psnr(a: &PixelImage, b: &PixelImage) -> Result<f64> {
    same_size(a, b)?;
    let n = a.data().len() as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * libm::log10(mse))
}

/// Average-pools a `channels x height x width` plane stack down to `grid x grid`.
fn pool(planes: &[f32], channels: usize, height: usize, width: usize, grid: usize) -> Result<Vec<f64>> {
    if grid == 0 || !height.is_multiple_of(grid) || !width.is_multiple_of(grid) {
        return Err(Error::BlockSize {
            block: grid,
            height,
            width,
        });
    }
    let (bh, bw) = (height / grid, width / grid);
    let mut out = vec![0.0f64; channels * grid * grid];
    for c in 0..channels {
        for y in 0..height {
            for x in 0..width {
                out[(c * grid + y / bh) * grid + x / bw] += planes[(c * height + y) * width + x] as f64;
            }
        }
    }
    let n = (bh * bw) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Pearson correlation coefficient; zero when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / libm::sqrt(va * vb)
}

/// Correlation of the `grid x grid` average-pooled luminance of two images.
pub fn image_layout_correlation(a: &PixelImage, b: &PixelImage, grid: usize) -> Result<f64> {
    same_size(a, b)?;
    let pa = pool(&a.luma(), 1, a.height(), a.width(), grid)?;
    let pb = pool(&b.luma(), 1, b.height(), b.width(), grid)?;
    Ok(pearson(&pa, &pb))
}

/// Correlation of the `grid x grid` average-pooled channels of two latents.
pub fn latent_layout_correlation(a: &LatentImage, b: &LatentImage, grid: usize) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let pa = pool(a.data(), a.channels(), a.height(), a.width(), grid)?;
    let pb = pool(b.data(), b.channels(), b.height(), b.width(), grid)?;
    Ok(pearson(&pa, &pb))
}

/// Descriptor of one square patch: mean colour, luminance contrast and
/// directional gradient energies.
fn patch_features(img: &PixelImage, luma: &[f32], y0: usize, x0: usize, size: usize) -> [f64; 7] {
    let w = img.width();
    let n = (size * size) as f64;
    let mut mean = [0.0f64; 3];
    let (mut l1, mut l2, mut gx, mut gy) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            let p = img.pixel(y, x);
            for c in 0..3 {
                mean[c] += p[c] as f64;
            }
            let l = luma[y * w + x] as f64;
            l1 += l;
            l2 += l * l;
            if x + 1 < x0 + size {
                let d = luma[y * w + x + 1] as f64 - l;
                gx += d * d;
            }
            if y + 1 < y0 + size {
                let d = luma[(y + 1) * w + x] as f64 - l;
                gy += d * d;
            }
        }
    }
    let lm = l1 / n;
    let std = libm::sqrt((l2 / n - lm * lm).max(0.0));
    let g = n - size as f64;
    [
        mean[0] / n,
        mean[1] / n,
        mean[2] / n,
        std,
        libm::sqrt(gx / g),
        libm::sqrt(gy / g),
        libm::sqrt((gx + gy) / (2.0 * g)),
    ]
}

fn patch_bank(img: &PixelImage, size: usize, stride: usize) -> Vec<[f64; 7]> {
    let luma = img.luma();
    let mut bank = Vec::new();
    let mut y = 0;
    while y + size <= img.height() {
        let mut x = 0;
        while x + size <= img.width() {
            bank.push(patch_features(img, &luma, y, x, size));
            x += stride;
        }
        y += stride;
    }
    bank
}

/// Mean distance from each patch descriptor of `output` to its nearest
/// neighbour among the patch descriptors of `reference`.
///
/// Lower values mean the output is locally closer to the reference texture.
pub fn patch_feature_distance(output: &PixelImage, reference: &PixelImage, patch: usize) -> Result<f64> {
    if patch < 2 || patch > output.height().min(output.width()) || patch > reference.height().min(reference.width()) {
        return Err(Error::Shape(alloc::format!(
            "patch size {patch} does not fit the images"
        )));
    }
    let stride = (patch / 2).max(1);
    let ours = patch_bank(output, patch, stride);
    let theirs = patch_bank(reference, patch, stride);
    let total: f64 = ours
        .iter()
        .map(|f| {
            theirs
                .iter()
                .map(|g| f.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        })
        .map(libm::sqrt)
        .sum();
    Ok(total / ours.len() as f64)
}

/// Mean squared luminance step across the seams of a `block`-pixel grid.
pub fn seam_energy(img: &PixelImage, block: usize) -> Result<f64> {
    let (h, w) = (img.height(), img.width());
    if block == 0 || !h.is_multiple_of(block) || !w.is_multiple_of(block) {
        return Err(Error::BlockSize {
            block,
            height: h,
            width: w,
        });
    }
    let luma = img.luma();
    let (mut sum, mut count) = (0.0f64, 0usize);
    for y in 0..h {
        for x in (block..w).step_by(block) {
            let d = (luma[y * w + x] - luma[y * w + x - 1]) as f64;
            sum += d * d;
            count += 1;
        }
    }
    for y in (block..h).step_by(block) {
        for x in 0..w {
            let d = (luma[y * w + x] - luma[(y - 1) * w + x]) as f64;
            sum += d * d;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}
