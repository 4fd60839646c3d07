use selfrect_core::image::PixelImage;
use selfrect_core::prep::{fill_background, PlacementMask};

// 0.999 quantile of chi-squared with 15 degrees of freedom (scipy.stats.chi2.ppf)
const CHI2_15_999: f64 = 37.697_298;

#[test]
fn unplaced_pixels_draw_uniformly_from_the_source() {
    // 16 distinguishable source pixels
    let source = PixelImage::from_fn(4, 4, |y, x| [(y * 4 + x) as f32 / 16.0, 0.0, 0.0]);
    let canvas = PixelImage::filled(64, 64, [1.0, 1.0, 1.0]);
    // left quarter placed, the rest filled
    let placed: Vec<bool> = (0..64 * 64).map(|i| i % 64 < 16).collect();
    let mask = PlacementMask::new(64, 64, placed).unwrap();

    let mut counts = [0u64; 16];
    for seed in 0..10 {
        let out = fill_background(&canvas, &mask, &source, seed).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let p = out.pixel(y, x);
                if x < 16 {
                    assert_eq!(p, [1.0, 1.0, 1.0]);
                } else {
                    counts[(p[0] * 16.0).round() as usize] += 1;
                }
            }
        }
    }
    let n: u64 = counts.iter().sum();
    assert_eq!(n, 10 * 64 * 48);
    let expected = n as f64 / 16.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < CHI2_15_999, "chi2 = {chi2}, counts = {counts:?}");
}

#[test]
fn seeds_change_the_fill() {
    let source = PixelImage::from_fn(8, 8, |y, x| [y as f32 / 8.0, x as f32 / 8.0, 0.0]);
    let canvas = PixelImage::filled(16, 16, [0.0; 3]);
    let mask = PlacementMask::new(16, 16, vec![false; 256]).unwrap();
    let a = fill_background(&canvas, &mask, &source, 1).unwrap();
    let b = fill_background(&canvas, &mask, &source, 1).unwrap();
    let c = fill_background(&canvas, &mask, &source, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
