//! A tiny randomly initialised backbone with the same tapping surface as a
//! real latent diffusion model.
//!
//! Latents are 4-channel at 1/8 resolution. The noise predictor projects each
//! latent cell to a token, runs a stack of residual multi-head self-attention
//! sites and projects back, so injected features at one site propagate into
//! the keys and values of every later site.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend_multihead, matmul, FeatureRows, KvRecord};
use crate::backend::{index_directives, AttentionSite, Backend, NoisePrediction, SiteShape, TapAction, TapDirective};
use crate::error::{Error, Result};
use crate::image::{LatentImage, PixelImage, LATENT_CHANNELS, LATENT_FACTOR};
use crate::scheduler::scaled_linear_alphas;

struct SiteWeights {
    query: FeatureRows,
    key: FeatureRows,
    value: FeatureRows,
    out: FeatureRows,
}

/// Deterministic stand-in backbone for exercising the injection machinery
/// without model weights.
pub struct StubBackend {
    width: usize,
    heads: usize,
    proj_in: FeatureRows,
    sites: Vec<SiteWeights>,
    proj_out: FeatureRows,
    alphas: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f32) -> FeatureRows {
    let bound = gain / libm::sqrtf(rows as f32);
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    FeatureRows::new(rows, cols, data).expect("sized buffer")
}

impl StubBackend {
    /// Two sites, width 8, two heads.
    pub fn new(seed: u64) -> Self {
        Self::with_layout(seed, 2, 8, 2)
    }

    pub fn with_layout(seed: u64, sites: usize, width: usize, heads: usize) -> Self {
        assert!(heads > 0 && width.is_multiple_of(heads) && width.is_multiple_of(2));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj_in = uniform(&mut rng, LATENT_CHANNELS, width, 1.5);
        let sites = (0..sites)
            .map(|_| SiteWeights {
                query: uniform(&mut rng, width, width, 2.0),
                key: uniform(&mut rng, width, width, 2.0),
                value: uniform(&mut rng, width, width, 1.0),
                out: uniform(&mut rng, width, width, 1.0),
            })
            .collect();
        let proj_out = uniform(&mut rng, width, LATENT_CHANNELS, 1.0);
        Self {
            width,
            heads,
            proj_in,
            sites,
            proj_out,
            alphas: scaled_linear_alphas(0.00085, 0.012, 1000),
        }
    }

    fn time_embedding(&self, timestep: usize) -> Vec<f32> {
        let half = self.width / 2;
        let mut emb = Vec::with_capacity(self.width);
        for i in 0..half {
            let freq = libm::expf(-libm::logf(10_000.0) * i as f32 / half as f32);
            emb.push(0.5 * libm::sinf(timestep as f32 * freq));
        }
        for i in 0..half {
            let freq = libm::expf(-libm::logf(10_000.0) * i as f32 / half as f32);
            emb.push(0.5 * libm::cosf(timestep as f32 * freq));
        }
        emb
    }

    fn shapes(&self) -> Vec<SiteShape> {
        (0..self.sites.len())
            .map(|_| SiteShape {
                width: self.width,
                heads: self.heads,
            })
            .collect()
    }
}

impl Backend for StubBackend {
    fn site_count(&self) -> usize {
        self.sites.len()
    }

    fn site_shape(&self, site: AttentionSite) -> Result<SiteShape> {
        if site.0 < self.sites.len() {
            Ok(SiteShape {
                width: self.width,
                heads: self.heads,
            })
        } else {
            Err(Error::UnknownSite(site))
        }
    }

    fn native_alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// Block means of each 8x8 cell: RGB mapped to `[-1, 1]` in channels
    /// 0..3, vertical luminance contrast in channel 3.
    fn encode_image(&self, img: &PixelImage) -> Result<LatentImage> {
        img.check_latent_aligned()?;
        let (h, w) = (img.height() / LATENT_FACTOR, img.width() / LATENT_FACTOR);
        let mut z = LatentImage::zeros(LATENT_CHANNELS, h, w);
        let n = (LATENT_FACTOR * LATENT_FACTOR) as f32;
        for by in 0..h {
            for bx in 0..w {
                let mut sum = [0.0f32; 3];
                let mut contrast = 0.0f32;
                for dy in 0..LATENT_FACTOR {
                    for dx in 0..LATENT_FACTOR {
                        let p = img.pixel(by * LATENT_FACTOR + dy, bx * LATENT_FACTOR + dx);
                        let luma = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
                        contrast += if dy < LATENT_FACTOR / 2 { luma } else { -luma };
                        for c in 0..3 {
                            sum[c] += p[c];
                        }
                    }
                }
                for (c, s) in sum.iter().enumerate() {
                    let i = z.offset(c, by, bx);
                    z.data_mut()[i] = 2.0 * s / n - 1.0;
                }
                let i = z.offset(3, by, bx);
                z.data_mut()[i] = 2.0 * contrast / n;
            }
        }
        Ok(z)
    }

    fn decode_latent(&self, z: &LatentImage) -> Result<PixelImage> {
        z.ensure_finite()?;
        if z.channels() != LATENT_CHANNELS {
            return Err(Error::Shape(alloc::format!(
                "stub decoder expects {LATENT_CHANNELS} channels, got {}",
                z.channels()
            )));
        }
        let (h, w) = (z.height() * LATENT_FACTOR, z.width() * LATENT_FACTOR);
        let img = PixelImage::from_fn(h, w, |y, x| {
            let (by, bx) = (y / LATENT_FACTOR, x / LATENT_FACTOR);
            let mut rgb = [0.0; 3];
            for (c, v) in rgb.iter_mut().enumerate() {
                *v = ((z.data()[z.offset(c, by, bx)] + 1.0) * 0.5).clamp(0.0, 1.0);
            }
            rgb
        });
        Ok(img)
    }

    fn predict_noise(&self, z: &LatentImage, timestep: usize, directives: &[TapDirective]) -> Result<NoisePrediction> {
        z.ensure_finite()?;
        if z.channels() != LATENT_CHANNELS {
            return Err(Error::Shape(alloc::format!(
                "stub predictor expects {LATENT_CHANNELS} channels, got {}",
                z.channels()
            )));
        }
        let plan = index_directives(directives, &self.shapes())?;
        let tokens = z.height() * z.width();
        let mut cells = Vec::with_capacity(tokens * LATENT_CHANNELS);
        for i in 0..tokens {
            for c in 0..LATENT_CHANNELS {
                cells.push(z.data()[c * tokens + i]);
            }
        }
        let x = FeatureRows::new(tokens, LATENT_CHANNELS, cells)?;
        let mut hidden = matmul(&x, &self.proj_in)?;
        let temb = self.time_embedding(timestep);
        for row in hidden.data_mut().chunks_exact_mut(self.width) {
            for (v, e) in row.iter_mut().zip(&temb) {
                *v += e;
            }
        }

        let mut captured = BTreeMap::new();
        for (index, weights) in self.sites.iter().enumerate() {
            let q = matmul(&hidden, &weights.query)?;
            let attended = match plan[index] {
                Some(TapAction::Inject(kv)) => attend_multihead(&q, kv.keys(), kv.values(), self.heads)?,
                action => {
                    let k = matmul(&hidden, &weights.key)?;
                    let v = matmul(&hidden, &weights.value)?;
                    let out = attend_multihead(&q, &k, &v, self.heads)?;
                    if matches!(action, Some(TapAction::Record)) {
                        captured.insert(AttentionSite(index), KvRecord::new(k, v, self.heads)?);
                    }
                    out
                }
            };
            let delta = matmul(&attended, &weights.out)?;
            for (h, d) in hidden.data_mut().iter_mut().zip(delta.data()) {
                *h += d;
            }
        }

        let eps_rows = matmul(&hidden, &self.proj_out)?;
        let mut eps = LatentImage::zeros(LATENT_CHANNELS, z.height(), z.width());
        for i in 0..tokens {
            for c in 0..LATENT_CHANNELS {
                eps.data_mut()[c * tokens + i] = eps_rows.data()[i * LATENT_CHANNELS + c];
            }
        }
        Ok(NoisePrediction { epsilon: eps, captured })
    }
}
