//! KL autoencoder: image ↔ latent codec.

use selfrect_core::{Error, Result};
use serde_json::Value;

use super::layers::{Attention, Conv, GroupNorm, Resnet};
use super::ops::{self, Map};
use super::weights::Weights;

#[derive(Debug, Clone)]
pub struct VaeConfig {
    pub block_out_channels: Vec<usize>,
    pub layers_per_block: usize,
    pub norm_num_groups: usize,
    pub latent_channels: usize,
    pub scaling_factor: f32,
    pub mid_attention: bool,
}

impl VaeConfig {
    pub fn from_json(v: &Value) -> Result<Self> {
        let block_out_channels: Vec<usize> = v
            .get("block_out_channels")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_u64).map(|n| n as usize).collect())
            .ok_or_else(|| Error::Backend("block_out_channels missing".into()))?;
        if block_out_channels.is_empty() {
            return Err(Error::Backend("block_out_channels is empty".into()));
        }
        let u = |k: &str, d: u64| v.get(k).and_then(Value::as_u64).unwrap_or(d) as usize;
        Ok(Self {
            block_out_channels,
            layers_per_block: u("layers_per_block", 2),
            norm_num_groups: u("norm_num_groups", 32),
            latent_channels: u("latent_channels", 4),
            scaling_factor: v.get("scaling_factor").and_then(Value::as_f64).unwrap_or(0.18215) as f32,
            mid_attention: v
                .get("mid_block_add_attention")
                .and_then(Value::as_bool)
                .unwrap_or(true),
        })
    }

    /// Spatial reduction of the encoder.
    pub fn factor(&self) -> usize {
        1 << (self.block_out_channels.len() - 1)
    }
}

const EPS: f32 = 1e-6;

/// Single-head spatial self-attention with residual.
struct MidAttention {
    norm: GroupNorm,
    attn: Attention,
}

impl MidAttention {
    fn load(ws: &mut Weights, prefix: &str, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::load(ws, &format!("{prefix}.group_norm"), groups, EPS)?,
            attn: Attention::load(ws, prefix, 1)?,
        })
    }

    fn forward(&self, x: &Map) -> Result<Map> {
        let n = x.plane();
        let tokens = self.norm.forward(x).to_tokens();
        let (out, _) = self.attn.self_attend(&tokens, n, None)?;
        let mut y = Map::from_tokens(&out, x.c, x.h, x.w);
        y.add_assign(x);
        Ok(y)
    }
}

struct Mid {
    res0: Resnet,
    attn: Option<MidAttention>,
    res1: Resnet,
}

impl Mid {
    fn load(ws: &mut Weights, prefix: &str, cfg: &VaeConfig) -> Result<Self> {
        let g = cfg.norm_num_groups;
        Ok(Self {
            res0: Resnet::load(ws, &format!("{prefix}.resnets.0"), g, EPS)?,
            attn: if cfg.mid_attention {
                Some(MidAttention::load(ws, &format!("{prefix}.attentions.0"), g)?)
            } else {
                None
            },
            res1: Resnet::load(ws, &format!("{prefix}.resnets.1"), g, EPS)?,
        })
    }

    fn forward(&self, x: &Map) -> Result<Map> {
        let mut h = self.res0.forward(x, None);
        if let Some(a) = &self.attn {
            h = a.forward(&h)?;
        }
        Ok(self.res1.forward(&h, None))
    }
}

struct Level {
    resnets: Vec<Resnet>,
    resample: Option<Conv>,
}

pub struct Vae {
    enc_conv_in: Conv,
    enc_down: Vec<Level>,
    enc_mid: Mid,
    enc_norm: GroupNorm,
    enc_conv_out: Conv,
    quant_conv: Option<Conv>,
    post_quant_conv: Option<Conv>,
    dec_conv_in: Conv,
    dec_mid: Mid,
    dec_up: Vec<Level>,
    dec_norm: GroupNorm,
    dec_conv_out: Conv,
    pub config: VaeConfig,
}

impl Vae {
    pub fn load(ws: &mut Weights, cfg: &VaeConfig) -> Result<Self> {
        let g = cfg.norm_num_groups;
        let n = cfg.block_out_channels.len();
        let mut enc_down = Vec::with_capacity(n);
        for i in 0..n {
            enc_down.push(Level {
                resnets: (0..cfg.layers_per_block)
                    .map(|j| Resnet::load(ws, &format!("encoder.down_blocks.{i}.resnets.{j}"), g, EPS))
                    .collect::<Result<_>>()?,
                resample: if i + 1 < n {
                    Some(Conv::load(ws, &format!("encoder.down_blocks.{i}.downsamplers.0.conv"))?)
                } else {
                    None
                },
            });
        }
        let mut dec_up = Vec::with_capacity(n);
        for i in 0..n {
            dec_up.push(Level {
                resnets: (0..=cfg.layers_per_block)
                    .map(|j| Resnet::load(ws, &format!("decoder.up_blocks.{i}.resnets.{j}"), g, EPS))
                    .collect::<Result<_>>()?,
                resample: if i + 1 < n {
                    Some(Conv::load(ws, &format!("decoder.up_blocks.{i}.upsamplers.0.conv"))?)
                } else {
                    None
                },
            });
        }
        let optional_conv = |ws: &mut Weights, name: &str| -> Result<Option<Conv>> {
            if ws.contains(&format!("{name}.weight")) {
                Conv::load(ws, name).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(Self {
            enc_conv_in: Conv::load(ws, "encoder.conv_in")?,
            enc_down,
            enc_mid: Mid::load(ws, "encoder.mid_block", cfg)?,
            enc_norm: GroupNorm::load(ws, "encoder.conv_norm_out", g, EPS)?,
            enc_conv_out: Conv::load(ws, "encoder.conv_out")?,
            quant_conv: optional_conv(ws, "quant_conv")?,
            post_quant_conv: optional_conv(ws, "post_quant_conv")?,
            dec_conv_in: Conv::load(ws, "decoder.conv_in")?,
            dec_mid: Mid::load(ws, "decoder.mid_block", cfg)?,
            dec_up,
            dec_norm: GroupNorm::load(ws, "decoder.conv_norm_out", g, EPS)?,
            dec_conv_out: Conv::load(ws, "decoder.conv_out")?,
            config: cfg.clone(),
        })
    }

    /// Mode of the posterior, scaled: `[-1, 1]` image → latent.
    pub fn encode(&self, x: &Map) -> Result<Map> {
        let mut h = self.enc_conv_in.forward(x);
        for level in &self.enc_down {
            for r in &level.resnets {
                h = r.forward(&h, None);
            }
            if let Some(conv) = &level.resample {
                // asymmetric padding: right and bottom only
                h = conv.forward_strided(&h, 2, (0, 0, 1, 1));
            }
        }
        h = self.enc_mid.forward(&h)?;
        let mut h = self.enc_norm.forward(&h);
        ops::silu(&mut h.data);
        let mut moments = self.enc_conv_out.forward(&h);
        if let Some(q) = &self.quant_conv {
            moments = q.forward(&moments);
        }
        let c = self.config.latent_channels;
        let plane = moments.plane();
        let mean: Vec<f32> = moments.data[..c * plane]
            .iter()
            .map(|v| v * self.config.scaling_factor)
            .collect();
        Ok(Map::new(c, moments.h, moments.w, mean))
    }

    /// Scaled latent → image in roughly `[-1, 1]`.
    pub fn decode(&self, z: &Map) -> Result<Map> {
        let inv = 1.0 / self.config.scaling_factor;
        let mut h = Map::new(z.c, z.h, z.w, z.data.iter().map(|v| v * inv).collect());
        if let Some(p) = &self.post_quant_conv {
            h = p.forward(&h);
        }
        let mut h = self.dec_conv_in.forward(&h);
        h = self.dec_mid.forward(&h)?;
        for level in &self.dec_up {
            for r in &level.resnets {
                h = r.forward(&h, None);
            }
            if let Some(conv) = &level.resample {
                h = conv.forward(&ops::upsample_nearest2(&h));
            }
        }
        let mut h = self.dec_norm.forward(&h);
        ops::silu(&mut h.data);
        Ok(self.dec_conv_out.forward(&h))
    }
}
