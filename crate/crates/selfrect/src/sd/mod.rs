//! Stable Diffusion v1.x on the CPU, loaded from a diffusers-layout directory
//! (`unet/`, `vae/`, `text_encoder/`, `tokenizer/`, `scheduler/`).

pub mod clip;
pub mod layers;
pub mod ops;
pub mod unet;
pub mod vae;
pub mod weights;

use std::path::{Path, PathBuf};

use selfrect_core::backend::{index_directives, AttentionSite, Backend, NoisePrediction, SiteShape, TapDirective};
use selfrect_core::image::{LatentImage, PixelImage};
use selfrect_core::scheduler::scaled_linear_alphas;
use selfrect_core::{Error, Result};
use serde_json::Value;

use clip::{ClipConfig, TextEncoder};
use ops::Map;
use unet::{Unet, UnetConfig};
use vae::{Vae, VaeConfig};
use weights::Weights;

/// Environment variable naming the weights directory.
pub const WEIGHTS_ENV: &str = "SELFRECT_WEIGHTS";

const BOS: &str = "<|startoftext|>";
const EOS: &str = "<|endoftext|>";

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Backend(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Backend(format!("{}: {e}", path.display())))
}

fn find_weights(dir: &Path) -> Result<PathBuf> {
    for name in ["diffusion_pytorch_model.safetensors", "model.safetensors"] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Backend(format!("no safetensors file in {}", dir.display())))
}

/// Weights directory from the environment, if set.
pub fn weights_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(WEIGHTS_ENV)
        .map(PathBuf::from)
        .filter(|p| !p.as_os_str().is_empty())
}

/// `ᾱ` for a diffusers scheduler config.
pub fn scheduler_alphas(v: &Value) -> Result<Vec<f64>> {
    let n = v.get("num_train_timesteps").and_then(Value::as_u64).unwrap_or(1000) as usize;
    let start = v.get("beta_start").and_then(Value::as_f64).unwrap_or(0.00085);
    let end = v.get("beta_end").and_then(Value::as_f64).unwrap_or(0.012);
    match v
        .get("beta_schedule")
        .and_then(Value::as_str)
        .unwrap_or("scaled_linear")
    {
        "scaled_linear" => Ok(scaled_linear_alphas(start, end, n)),
        "linear" => {
            let mut prod = 1.0;
            Ok((0..n)
                .map(|i| {
                    let beta = if n == 1 {
                        start
                    } else {
                        start + (end - start) * i as f64 / (n - 1) as f64
                    };
                    prod *= 1.0 - beta;
                    prod
                })
                .collect())
        }
        other => Err(Error::Backend(format!("unsupported beta schedule {other}"))),
    }
}

/// Token ids of the empty prompt: start, end, then end-padding.
pub fn empty_prompt_ids(dir: &Path, length: usize) -> Result<Vec<usize>> {
    let vocab_path = dir.join("tokenizer").join("vocab.json");
    let (bos, eos) = if vocab_path.is_file() {
        let vocab = read_json(&vocab_path)?;
        let id = |tok: &str| {
            vocab
                .get(tok)
                .and_then(Value::as_u64)
                .map(|n| n as usize)
                .ok_or_else(|| Error::Backend(format!("{tok} not in {}", vocab_path.display())))
        };
        (id(BOS)?, id(EOS)?)
    } else {
        (49406, 49407)
    };
    let mut ids = vec![eos; length];
    ids[0] = bos;
    Ok(ids)
}

pub struct SdBackend {
    unet: Unet,
    vae: Vae,
    alphas: Vec<f64>,
    steps_offset: usize,
    shapes: Vec<SiteShape>,
}

impl SdBackend {
    pub fn load(dir: &Path) -> Result<Self> {
        let unet_cfg = UnetConfig::from_json(&read_json(&dir.join("unet/config.json"))?)?;
        let vae_cfg = VaeConfig::from_json(&read_json(&dir.join("vae/config.json"))?)?;
        let sched = read_json(&dir.join("scheduler/scheduler_config.json"))?;

        let context = {
            let clip_cfg = ClipConfig::from_json(&read_json(&dir.join("text_encoder/config.json"))?)?;
            let mut ws = Weights::load(&find_weights(&dir.join("text_encoder"))?)?;
            let text = TextEncoder::load(&mut ws, &clip_cfg)?;
            let ids = empty_prompt_ids(dir, text.max_positions())?;
            (text.encode(&ids)?, ids.len())
        };

        let mut ws = Weights::load(&find_weights(&dir.join("unet"))?)?;
        let mut unet = Unet::load(&mut ws, &unet_cfg)?;
        drop(ws);
        unet.set_context(&context.0, context.1);

        let mut ws = Weights::load(&find_weights(&dir.join("vae"))?)?;
        let vae = Vae::load(&mut ws, &vae_cfg)?;
        if vae_cfg.factor() != selfrect_core::image::LATENT_FACTOR
            || vae_cfg.latent_channels != selfrect_core::image::LATENT_CHANNELS
        {
            return Err(Error::Backend(format!(
                "autoencoder must map 8x down to 4 channels, got {}x / {}",
                vae_cfg.factor(),
                vae_cfg.latent_channels
            )));
        }
        let shapes = unet.site_shapes().to_vec();
        Ok(Self {
            unet,
            vae,
            alphas: scheduler_alphas(&sched)?,
            steps_offset: sched.get("steps_offset").and_then(Value::as_u64).unwrap_or(0) as usize,
            shapes,
        })
    }

    /// Loads from the directory named by [`WEIGHTS_ENV`].
    pub fn from_env() -> Result<Self> {
        let dir = weights_dir_from_env().ok_or_else(|| Error::Backend(format!("{WEIGHTS_ENV} is not set")))?;
        Self::load(&dir)
    }

    /// The autoencoder, for codec checks.
    pub fn vae(&self) -> &Vae {
        &self.vae
    }
}

fn to_map(img: &PixelImage) -> Map {
    let (h, w) = (img.height(), img.width());
    let mut m = Map::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let p = img.pixel(y, x);
            for (c, v) in p.iter().enumerate() {
                m.data[(c * h + y) * w + x] = 2.0 * v - 1.0;
            }
        }
    }
    m
}

fn to_image(m: &Map) -> Result<PixelImage> {
    if m.c != 3 {
        return Err(Error::Backend(format!("decoder produced {} channels", m.c)));
    }
    let n = m.plane();
    Ok(PixelImage::from_fn(m.h, m.w, |y, x| {
        let i = y * m.w + x;
        let f = |c: usize| (m.data[c * n + i] / 2.0 + 0.5).clamp(0.0, 1.0);
        [f(0), f(1), f(2)]
    }))
}

impl Backend for SdBackend {
    fn site_count(&self) -> usize {
        self.shapes.len()
    }

    fn site_shape(&self, site: AttentionSite) -> Result<SiteShape> {
        self.shapes.get(site.0).copied().ok_or(Error::UnknownSite(site))
    }

    fn native_alphas(&self) -> &[f64] {
        &self.alphas
    }

    fn steps_offset(&self) -> usize {
        self.steps_offset
    }

    fn encode_image(&self, img: &PixelImage) -> Result<LatentImage> {
        img.check_latent_aligned()?;
        let z = self.vae.encode(&to_map(img))?;
        LatentImage::new(z.c, z.h, z.w, z.data)
    }

    fn decode_latent(&self, z: &LatentImage) -> Result<PixelImage> {
        z.ensure_finite()?;
        let m = Map::new(z.channels(), z.height(), z.width(), z.data().to_vec());
        to_image(&self.vae.decode(&m)?)
    }

    fn predict_noise(&self, z: &LatentImage, timestep: usize, directives: &[TapDirective]) -> Result<NoisePrediction> {
        z.ensure_finite()?;
        let taps = index_directives(directives, &self.shapes)?;
        let m = Map::new(z.channels(), z.height(), z.width(), z.data().to_vec());
        let (eps, captured) = self.unet.forward(&m, timestep as f32, &taps)?;
        Ok(NoisePrediction {
            epsilon: LatentImage::new(eps.c, eps.h, eps.w, eps.data)?,
            captured,
        })
    }
}
