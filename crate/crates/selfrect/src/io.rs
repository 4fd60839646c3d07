//! 8-bit PNG reading and writing.

use std::path::Path;

use image::{GrayImage, RgbImage};
use selfrect_core::image::PixelImage;
use selfrect_core::prep::PlacementMask;

use crate::{Error, Result};

pub fn load_png(path: &Path) -> Result<PixelImage> {
    let img = image::open(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(PixelImage::new(h as usize, w as usize, data)?)
}

pub fn to_rgb8(img: &PixelImage) -> RgbImage {
    let raw = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    RgbImage::from_raw(img.width() as u32, img.height() as u32, raw).expect("sized buffer")
}

pub fn save_png(img: &PixelImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io(format!("{}: {e}", parent.display())))?;
    }
    to_rgb8(img)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Placement mask from a greyscale PNG: bright pixels (≥ 128) are placed.
pub fn load_mask(path: &Path) -> Result<PlacementMask> {
    let img: GrayImage = image::open(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let levels: Vec<f32> = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(PlacementMask::from_levels(h as usize, w as usize, &levels)?)
}

pub fn save_mask(mask: &PlacementMask, path: &Path) -> Result<()> {
    let raw = (0..mask.height())
        .flat_map(|y| (0..mask.width()).map(move |x| (y, x)))
        .map(|(y, x)| if mask.is_placed(y, x) { 255 } else { 0 })
        .collect();
    GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .expect("sized buffer")
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Frames side by side with a `gap`-pixel white separator.
pub fn strip(frames: &[PixelImage], gap: usize) -> PixelImage {
    grid(&[frames.iter().map(Some).collect()], gap)
}

/// Rows of equally sized cells; `None` cells are drawn as a grey cross.
pub fn grid(rows: &[Vec<Option<&PixelImage>>], gap: usize) -> PixelImage {
    let cell = rows
        .iter()
        .flatten()
        .flatten()
        .map(|i| (i.height(), i.width()))
        .next()
        .unwrap_or((8, 8));
    let ncols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let h = rows.len() * cell.0 + rows.len().saturating_sub(1) * gap;
    let w = ncols * cell.1 + ncols.saturating_sub(1) * gap;
    let mut out = PixelImage::filled(h.max(1), w.max(1), [1.0; 3]);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let (y0, x0) = (r * (cell.0 + gap), c * (cell.1 + gap));
            for y in 0..cell.0 {
                for x in 0..cell.1 {
                    let px = match img {
                        Some(i) if y < i.height() && x < i.width() => i.pixel(y, x),
                        Some(_) => [1.0; 3],
                        // failed cell
                        None if y * cell.1 / cell.0.max(1) == x || (cell.0 - 1 - y) * cell.1 / cell.0.max(1) == x => {
                            [0.8, 0.1, 0.1]
                        }
                        None => [0.6; 3],
                    };
                    out.set_pixel(y0 + y, x0 + x, px);
                }
            }
        }
    }
    out
}
