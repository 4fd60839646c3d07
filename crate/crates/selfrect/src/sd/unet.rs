//! Conditional U-Net noise predictor with tappable self-attention.

use std::collections::BTreeMap;

use selfrect_core::attention::KvRecord;
use selfrect_core::backend::{AttentionSite, SiteShape, TapAction};
use selfrect_core::{Error, Result};
use serde_json::Value;

use super::layers::{Conv, GroupNorm, Linear, Resnet, Transformer2d};
use super::ops::{self, Map};
use super::weights::Weights;

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Backend(msg.into())
}

fn usize_list(v: &Value, key: &str, len: usize) -> Result<Vec<usize>> {
    match v.get(key) {
        Some(Value::Array(a)) => a
            .iter()
            .map(|x| {
                x.as_u64()
                    .map(|n| n as usize)
                    .ok_or_else(|| cfg_err(format!("{key}: not an integer")))
            })
            .collect(),
        Some(Value::Number(n)) => Ok(vec![n.as_u64().unwrap_or(0) as usize; len]),
        _ => Err(cfg_err(format!("{key} missing"))),
    }
}

/// The subset of the diffusers U-Net configuration this implementation reads.
#[derive(Debug, Clone)]
pub struct UnetConfig {
    pub down_block_types: Vec<String>,
    pub up_block_types: Vec<String>,
    pub block_out_channels: Vec<usize>,
    pub layers_per_block: usize,
    /// Heads per block. Older checkpoints store this under `attention_head_dim`.
    pub heads: Vec<usize>,
    pub transformer_depth: Vec<usize>,
    pub norm_num_groups: usize,
    pub norm_eps: f32,
    pub flip_sin_to_cos: bool,
    pub freq_shift: f32,
    pub cross_attention_dim: usize,
}

impl UnetConfig {
    pub fn from_json(v: &Value) -> Result<Self> {
        let strings = |key: &str| -> Result<Vec<String>> {
            v.get(key)
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(|s| s.as_str().map(String::from)).collect())
                .ok_or_else(|| cfg_err(format!("{key} missing")))
        };
        let down_block_types = strings("down_block_types")?;
        let up_block_types = strings("up_block_types")?;
        let nblocks = down_block_types.len();
        let block_out_channels = usize_list(v, "block_out_channels", nblocks)?;
        let heads = match v.get("num_attention_heads") {
            Some(x) if !x.is_null() => usize_list(v, "num_attention_heads", nblocks)?,
            _ => usize_list(v, "attention_head_dim", nblocks)?,
        };
        let transformer_depth = if v.get("transformer_layers_per_block").is_some() {
            usize_list(v, "transformer_layers_per_block", nblocks)?
        } else {
            vec![1; nblocks]
        };
        if block_out_channels.len() != nblocks || up_block_types.len() != nblocks || heads.len() != nblocks {
            return Err(cfg_err("block lists have different lengths"));
        }
        if let Some(m) = v.get("mid_block_type").and_then(Value::as_str) {
            if m != "UNetMidBlock2DCrossAttn" {
                return Err(cfg_err(format!("unsupported mid block {m}")));
            }
        }
        let get_f = |k: &str, d: f64| v.get(k).and_then(Value::as_f64).unwrap_or(d);
        Ok(Self {
            down_block_types,
            up_block_types,
            block_out_channels,
            layers_per_block: v.get("layers_per_block").and_then(Value::as_u64).unwrap_or(2) as usize,
            heads,
            transformer_depth,
            norm_num_groups: v.get("norm_num_groups").and_then(Value::as_u64).unwrap_or(32) as usize,
            norm_eps: get_f("norm_eps", 1e-5) as f32,
            flip_sin_to_cos: v.get("flip_sin_to_cos").and_then(Value::as_bool).unwrap_or(true),
            freq_shift: get_f("freq_shift", 0.0) as f32,
            cross_attention_dim: v.get("cross_attention_dim").and_then(Value::as_u64).unwrap_or(768) as usize,
        })
    }
}

struct Stage {
    resnets: Vec<Resnet>,
    attentions: Vec<Transformer2d>,
    /// Down blocks: stride-2 conv. Up blocks: nearest 2x then conv.
    resample: Option<Conv>,
}

/// Site range `[first, first + count)` of one spatial transformer.
#[derive(Debug, Clone, Copy)]
struct SiteSpan {
    first: usize,
    count: usize,
}

pub struct Unet {
    conv_in: Conv,
    time_channels: usize,
    time_1: Linear,
    time_2: Linear,
    down: Vec<Stage>,
    mid_res0: Resnet,
    mid_attn: Transformer2d,
    mid_res1: Resnet,
    up: Vec<Stage>,
    norm_out: GroupNorm,
    conv_out: Conv,
    flip_sin_to_cos: bool,
    freq_shift: f32,
    pub cross_attention_dim: usize,
    shapes: Vec<SiteShape>,
}

fn is_cross(kind: &str) -> bool {
    kind.starts_with("CrossAttn")
}

impl Unet {
    pub fn load(ws: &mut Weights, cfg: &UnetConfig) -> Result<Self> {
        let g = cfg.norm_num_groups;
        let eps = cfg.norm_eps;
        let n = cfg.block_out_channels.len();
        let conv_in = Conv::load(ws, "conv_in")?;
        let time_1 = Linear::load(ws, "time_embedding.linear_1")?;
        let time_2 = Linear::load(ws, "time_embedding.linear_2")?;
        let time_channels = cfg.block_out_channels[0];

        let mut shapes = Vec::new();
        let mut transformer = |ws: &mut Weights, prefix: &str, heads: usize, depth: usize, width: usize| {
            for _ in 0..depth {
                shapes.push(SiteShape { width, heads });
            }
            Transformer2d::load(ws, prefix, heads, g, depth)
        };

        let mut down = Vec::with_capacity(n);
        for (i, kind) in cfg.down_block_types.iter().enumerate() {
            let ch = cfg.block_out_channels[i];
            let mut resnets = Vec::new();
            let mut attentions = Vec::new();
            for j in 0..cfg.layers_per_block {
                resnets.push(Resnet::load(ws, &format!("down_blocks.{i}.resnets.{j}"), g, eps)?);
                if is_cross(kind) {
                    attentions.push(transformer(
                        ws,
                        &format!("down_blocks.{i}.attentions.{j}"),
                        cfg.heads[i],
                        cfg.transformer_depth[i],
                        ch,
                    )?);
                }
            }
            let resample = if i + 1 < n {
                Some(Conv::load(ws, &format!("down_blocks.{i}.downsamplers.0.conv"))?)
            } else {
                None
            };
            down.push(Stage {
                resnets,
                attentions,
                resample,
            });
        }

        let top = n - 1;
        let mid_res0 = Resnet::load(ws, "mid_block.resnets.0", g, eps)?;
        let mid_attn = transformer(
            ws,
            "mid_block.attentions.0",
            cfg.heads[top],
            cfg.transformer_depth[top],
            cfg.block_out_channels[top],
        )?;
        let mid_res1 = Resnet::load(ws, "mid_block.resnets.1", g, eps)?;

        let mut up = Vec::with_capacity(n);
        for (i, kind) in cfg.up_block_types.iter().enumerate() {
            let level = n - 1 - i;
            let ch = cfg.block_out_channels[level];
            let mut resnets = Vec::new();
            let mut attentions = Vec::new();
            for j in 0..=cfg.layers_per_block {
                resnets.push(Resnet::load(ws, &format!("up_blocks.{i}.resnets.{j}"), g, eps)?);
                if is_cross(kind) {
                    attentions.push(transformer(
                        ws,
                        &format!("up_blocks.{i}.attentions.{j}"),
                        cfg.heads[level],
                        cfg.transformer_depth[level],
                        ch,
                    )?);
                }
            }
            let resample = if i + 1 < n {
                Some(Conv::load(ws, &format!("up_blocks.{i}.upsamplers.0.conv"))?)
            } else {
                None
            };
            up.push(Stage {
                resnets,
                attentions,
                resample,
            });
        }

        Ok(Self {
            conv_in,
            time_channels,
            time_1,
            time_2,
            down,
            mid_res0,
            mid_attn,
            mid_res1,
            up,
            norm_out: GroupNorm::load(ws, "conv_norm_out", g, eps)?,
            conv_out: Conv::load(ws, "conv_out")?,
            flip_sin_to_cos: cfg.flip_sin_to_cos,
            freq_shift: cfg.freq_shift,
            cross_attention_dim: cfg.cross_attention_dim,
            shapes,
        })
    }

    /// Self-attention sites in execution order: encoder, middle, decoder.
    pub fn site_shapes(&self) -> &[SiteShape] {
        &self.shapes
    }

    fn transformers_mut(&mut self) -> impl Iterator<Item = &mut Transformer2d> {
        let down = self.down.iter_mut().flat_map(|s| s.attentions.iter_mut());
        let up = self.up.iter_mut().flat_map(|s| s.attentions.iter_mut());
        down.chain(std::iter::once(&mut self.mid_attn)).chain(up)
    }

    /// Fixes the prompt embedding (`n` tokens) used by every cross-attention.
    pub fn set_context(&mut self, context: &[f32], n: usize) {
        for t in self.transformers_mut() {
            for b in &mut t.blocks {
                b.set_context(context, n);
            }
        }
    }

    fn time_embedding(&self, timestep: f32) -> Vec<f32> {
        let e = ops::timestep_embedding(timestep, self.time_channels, self.flip_sin_to_cos, self.freq_shift);
        let mut h = self.time_1.forward(&e, 1);
        ops::silu(&mut h);
        let mut h = self.time_2.forward(&h, 1);
        // every resnet applies SiLU before its projection
        ops::silu(&mut h);
        h
    }

    /// Predicts noise for a `channels×h×w` latent. `taps[i]` is the action
    /// for site `i` (`None` = passthrough).
    pub fn forward(
        &self,
        z: &Map,
        timestep: f32,
        taps: &[Option<&TapAction>],
    ) -> Result<(Map, BTreeMap<AttentionSite, KvRecord>)> {
        if taps.len() != self.shapes.len() {
            return Err(Error::Backend(format!(
                "{} taps for {} sites",
                taps.len(),
                self.shapes.len()
            )));
        }
        let levels = self.down.len();
        let f = 1 << (levels - 1);
        if !z.h.is_multiple_of(f) || !z.w.is_multiple_of(f) {
            return Err(Error::Backend(format!("latent {}x{} not divisible by {f}", z.h, z.w)));
        }
        let temb = self.time_embedding(timestep);
        let mut captured = BTreeMap::new();
        let mut next_site = 0usize;
        let mut run = |t: &Transformer2d, x: &Map| -> Result<Map> {
            let span = SiteSpan {
                first: next_site,
                count: t.blocks.len(),
            };
            next_site += span.count;
            let (y, recs) = t.forward(x, &taps[span.first..span.first + span.count])?;
            for (i, r) in recs.into_iter().enumerate() {
                if let Some(r) = r {
                    captured.insert(AttentionSite(span.first + i), r);
                }
            }
            Ok(y)
        };

        let mut h = self.conv_in.forward(z);
        let mut skips = vec![h.clone()];
        for stage in &self.down {
            for (j, res) in stage.resnets.iter().enumerate() {
                h = res.forward(&h, Some(&temb));
                if let Some(t) = stage.attentions.get(j) {
                    h = run(t, &h)?;
                }
                skips.push(h.clone());
            }
            if let Some(conv) = &stage.resample {
                h = conv.forward_strided(&h, 2, (1, 1, 1, 1));
                skips.push(h.clone());
            }
        }

        h = self.mid_res0.forward(&h, Some(&temb));
        h = run(&self.mid_attn, &h)?;
        h = self.mid_res1.forward(&h, Some(&temb));

        for stage in &self.up {
            for (j, res) in stage.resnets.iter().enumerate() {
                let skip = skips
                    .pop()
                    .ok_or_else(|| Error::Backend("skip stack underflow".into()))?;
                h = res.forward(&h.concat(&skip), Some(&temb));
                if let Some(t) = stage.attentions.get(j) {
                    h = run(t, &h)?;
                }
            }
            if let Some(conv) = &stage.resample {
                h = conv.forward(&ops::upsample_nearest2(&h));
            }
        }

        let mut h = self.norm_out.forward(&h);
        ops::silu(&mut h.data);
        Ok((self.conv_out.forward(&h), captured))
    }
}
