//! Target construction and reference augmentation.

use alloc::format;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{LatentImage, PixelImage};

/// Default block edge for image-space shuffles, in pixels.
pub const DEFAULT_IMAGE_BLOCK: usize = 64;
/// Default block edge for latent-space shuffles, in latent cells.
pub const DEFAULT_LATENT_BLOCK: usize = 8;
/// Default uniform noise amplitude added to guided layouts.
pub const DEFAULT_GUIDED_NOISE: f32 = 0.1;

/// Marks the pixels the user placed on the target canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementMask {
    height: usize,
    width: usize,
    placed: Vec<bool>,
}

impl PlacementMask {
    pub fn new(height: usize, width: usize, placed: Vec<bool>) -> Result<Self> {
        if placed.len() != height * width {
            return Err(Error::Shape(format!(
                "{} mask entries for a {height}x{width} canvas",
                placed.len()
            )));
        }
        Ok(Self { height, width, placed })
    }

    /// Values at or above one half count as placed.
    pub fn from_levels(height: usize, width: usize, levels: &[f32]) -> Result<Self> {
        Self::new(height, width, levels.iter().map(|&v| v >= 0.5).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_placed(&self, y: usize, x: usize) -> bool {
        self.placed[y * self.width + x]
    }

    pub fn placed_count(&self) -> usize {
        self.placed.iter().filter(|p| **p).count()
    }
}

/// Replaces every unplaced canvas pixel with a source pixel drawn uniformly
/// at random (with replacement).
pub fn fill_background(
    canvas: &PixelImage,
    mask: &PlacementMask,
    source: &PixelImage,
    seed: u64,
) -> Result<PixelImage> {
    if mask.height != canvas.height() || mask.width != canvas.width() {
        return Err(Error::Shape(format!(
            "mask {}x{} vs canvas {}x{}",
            mask.height,
            mask.width,
            canvas.height(),
            canvas.width()
        )));
    }
    let pool = source.height() * source.width();
    if pool == 0 {
        return Err(Error::Shape("background source image is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = canvas.clone();
    for y in 0..canvas.height() {
        for x in 0..canvas.width() {
            if !mask.is_placed(y, x) {
                let i = rng.random_range(0..pool);
                out.set_pixel(y, x, source.pixel(i / source.width(), i % source.width()));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShuffleSpec {
    /// Block edge in pixels (image space) or latent cells (latent space).
    pub block_size: usize,
    pub seed: u64,
}

/// Random permutation of the blocks of a `rows x cols` grid.
fn block_permutation(rows: usize, cols: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rows * cols).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

fn check_blocks(block: usize, height: usize, width: usize) -> Result<()> {
    if block == 0 || !height.is_multiple_of(block) || !width.is_multiple_of(block) {
        return Err(Error::BlockSize { block, height, width });
    }
    Ok(())
}

/// Rearranges non-overlapping square blocks of an image uniformly at random.
pub fn patch_shuffle(reference: &PixelImage, spec: ShuffleSpec) -> Result<PixelImage> {
    let (h, w, b) = (reference.height(), reference.width(), spec.block_size);
    check_blocks(b, h, w)?;
    let cols = w / b;
    let order = block_permutation(h / b, cols, spec.seed);
    let mut out = reference.clone();
    for (dst, &src) in order.iter().enumerate() {
        let (dy, dx) = ((dst / cols) * b, (dst % cols) * b);
        let (sy, sx) = ((src / cols) * b, (src % cols) * b);
        for y in 0..b {
            let s = ((sy + y) * w + sx) * 3;
            let d = ((dy + y) * w + dx) * 3;
            out.data_mut()[d..d + 3 * b].copy_from_slice(&reference.data()[s..s + 3 * b]);
        }
    }
    Ok(out)
}

/// Rearranges non-overlapping blocks of a latent code, moving all channels together.
pub fn latent_shuffle(z: &LatentImage, spec: ShuffleSpec) -> Result<LatentImage> {
    let (h, w, b) = (z.height(), z.width(), spec.block_size);
    check_blocks(b, h, w)?;
    let cols = w / b;
    let order = block_permutation(h / b, cols, spec.seed);
    let mut out = z.clone();
    for c in 0..z.channels() {
        for (dst, &src) in order.iter().enumerate() {
            let (dy, dx) = ((dst / cols) * b, (dst % cols) * b);
            let (sy, sx) = ((src / cols) * b, (src % cols) * b);
            for y in 0..b {
                let s = z.offset(c, sy + y, sx);
                let d = z.offset(c, dy + y, dx);
                out.data_mut()[d..d + b].copy_from_slice(&z.data()[s..s + b]);
            }
        }
    }
    Ok(out)
}

/// Supported rotation angles, counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rotation {
    Plus45,
    Minus45,
    Ninety,
}

impl Rotation {
    pub fn from_degrees(deg: i32) -> Result<Self> {
        match deg {
            45 => Ok(Rotation::Plus45),
            -45 => Ok(Rotation::Minus45),
            90 => Ok(Rotation::Ninety),
            other => Err(Error::Config {
                field: "aug",
                reason: format!("unsupported rotation angle {other}°; use 45, -45 or 90"),
            }),
        }
    }

    pub fn degrees(self) -> i32 {
        match self {
            Rotation::Plus45 => 45,
            Rotation::Minus45 => -45,
            Rotation::Ninety => 90,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    FlipHorizontal,
    FlipVertical,
    Rotate(Rotation),
}

impl FromStr for Transform {
    type Err = Error;

    /// Accepts `hflip`, `vflip` and `rot<deg>` (e.g. `rot90`, `rot-45`).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "hflip" => Ok(Transform::FlipHorizontal),
            "vflip" => Ok(Transform::FlipVertical),
            _ => {
                let deg = s
                    .strip_prefix("rot")
                    .and_then(|d| d.parse::<i32>().ok())
                    .ok_or_else(|| Error::Config {
                        field: "aug",
                        reason: format!("unknown augmentation '{s}'"),
                    })?;
                Rotation::from_degrees(deg).map(Transform::Rotate)
            }
        }
    }
}

impl core::fmt::Display for Transform {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Transform::FlipHorizontal => f.write_str("hflip"),
            Transform::FlipVertical => f.write_str("vflip"),
            Transform::Rotate(r) => write!(f, "rot{}", r.degrees()),
        }
    }
}

/// Ordered list of reference augmentations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AugmentationSet {
    pub transforms: Vec<Transform>,
}

impl AugmentationSet {
    pub fn new(transforms: Vec<Transform>) -> Self {
        Self { transforms }
    }

    /// Three rotations: +45°, -45° and 90°.
    pub fn rotations() -> Self {
        Self::new(alloc::vec![
            Transform::Rotate(Rotation::Plus45),
            Transform::Rotate(Rotation::Minus45),
            Transform::Rotate(Rotation::Ninety),
        ])
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }
}

fn bilinear(img: &PixelImage, y: f32, x: f32) -> [f32; 3] {
    let (h, w) = (img.height() as f32, img.width() as f32);
    let y = y.clamp(0.0, h - 1.0);
    let x = x.clamp(0.0, w - 1.0);
    let (y0, x0) = (libm::floorf(y) as usize, libm::floorf(x) as usize);
    let y1 = (y0 + 1).min(img.height() - 1);
    let x1 = (x0 + 1).min(img.width() - 1);
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let (a, b, c, d) = (
        img.pixel(y0, x0),
        img.pixel(y0, x1),
        img.pixel(y1, x0),
        img.pixel(y1, x1),
    );
    let mut out = [0.0; 3];
    for i in 0..3 {
        let top = a[i] + (b[i] - a[i]) * fx;
        let bottom = c[i] + (d[i] - c[i]) * fx;
        out[i] = top + (bottom - top) * fy;
    }
    out
}

/// Rotates counter-clockwise by `deg`, keeps the largest centred square that
/// lies wholly inside the rotated frame, and resamples it back to full size.
fn rotate_crop(img: &PixelImage, deg: f32) -> PixelImage {
    let (h, w) = (img.height(), img.width());
    let theta = deg.to_radians();
    let (sin, cos) = (libm::sinf(theta), libm::cosf(theta));
    let side = h.min(w) as f32 / (cos.abs() + sin.abs());
    let (cy, cx) = (h as f32 / 2.0, w as f32 / 2.0);
    PixelImage::from_fn(h, w, |y, x| {
        let u = ((x as f32 + 0.5) / w as f32 - 0.5) * side;
        let v = ((y as f32 + 0.5) / h as f32 - 0.5) * side;
        let sx = cos * u - sin * v + cx - 0.5;
        let sy = sin * u + cos * v + cy - 0.5;
        bilinear(img, sy, sx)
    })
}

pub fn apply_transform(img: &PixelImage, transform: Transform) -> PixelImage {
    let (h, w) = (img.height(), img.width());
    match transform {
        Transform::FlipHorizontal => PixelImage::from_fn(h, w, |y, x| img.pixel(y, w - 1 - x)),
        Transform::FlipVertical => PixelImage::from_fn(h, w, |y, x| img.pixel(h - 1 - y, x)),
        Transform::Rotate(Rotation::Ninety) if h == w => PixelImage::from_fn(h, w, |y, x| img.pixel(x, w - 1 - y)),
        Transform::Rotate(r) => rotate_crop(img, r.degrees() as f32),
    }
}

/// Transformed copies of `reference`, in set order.
pub fn build_augmentations(reference: &PixelImage, set: &AugmentationSet) -> Vec<PixelImage> {
    set.transforms.iter().map(|&t| apply_transform(reference, t)).collect()
}

/// Adds independent uniform noise in `[-amplitude, amplitude]` to every
/// sample of a guidance layout and clamps to `[0, 1]`.
pub fn prepare_guided_layout(layout: &PixelImage, amplitude: f32, seed: u64) -> Result<PixelImage> {
    if amplitude < 0.0 || !amplitude.is_finite() {
        return Err(Error::Config {
            field: "noise",
            reason: format!("amplitude must be a finite non-negative number, got {amplitude}"),
        });
    }
    let mut out = layout.clone();
    if amplitude == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in out.data_mut() {
        *v += rng.random_range(-amplitude..=amplitude);
    }
    out.clamp_unit();
    Ok(out)
}
