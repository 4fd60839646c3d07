//! Building blocks shared by the U-Net, the autoencoder and the text encoder.

use selfrect_core::attention::{attend_multihead, FeatureRows, KvRecord};
use selfrect_core::backend::TapAction;
use selfrect_core::{Error, Result};

use super::ops::{self, Map};
use super::weights::{Tensor, Weights};

fn shape_err(name: &str, t: &Tensor) -> Error {
    Error::Backend(format!("{name}: unexpected shape {:?}", t.shape))
}

fn rows(rows: usize, width: usize, data: Vec<f32>) -> FeatureRows {
    FeatureRows::new(rows, width, data).expect("sized buffer")
}

pub struct Conv {
    w: Vec<f32>,
    b: Option<Vec<f32>>,
    pub out: usize,
    pub inp: usize,
    k: usize,
}

impl Conv {
    pub fn load(ws: &mut Weights, prefix: &str) -> Result<Self> {
        let name = format!("{prefix}.weight");
        let w = ws.take(&name)?;
        let [out, inp, k, k2] = w.shape[..] else {
            return Err(shape_err(&name, &w));
        };
        if k != k2 {
            return Err(shape_err(&name, &w));
        }
        let b = ws.take_opt(&format!("{prefix}.bias")).map(|t| t.data);
        Ok(Self {
            w: w.data,
            b,
            out,
            inp,
            k,
        })
    }

    /// Stride 1, "same" padding.
    pub fn forward(&self, x: &Map) -> Map {
        let p = self.k / 2;
        ops::conv2d(x, &self.w, self.b.as_deref(), self.out, self.k, 1, (p, p, p, p))
    }

    pub fn forward_strided(&self, x: &Map, stride: usize, pad: (usize, usize, usize, usize)) -> Map {
        ops::conv2d(x, &self.w, self.b.as_deref(), self.out, self.k, stride, pad)
    }
}

pub struct Linear {
    w: Vec<f32>,
    b: Option<Vec<f32>>,
    pub out: usize,
}

impl Linear {
    /// Accepts `out×in` matrices and `out×in×1×1` pointwise convolutions.
    pub fn load_any(ws: &mut Weights, prefixes: &[&str]) -> Result<Self> {
        for p in prefixes {
            if ws.contains(&format!("{p}.weight")) {
                return Self::load(ws, p);
            }
        }
        Err(Error::Backend(format!(
            "missing parameter {}.weight",
            prefixes.join(" | ")
        )))
    }

    pub fn load(ws: &mut Weights, prefix: &str) -> Result<Self> {
        let name = format!("{prefix}.weight");
        let w = ws.take(&name)?;
        let out = match w.shape[..] {
            [o, _] | [o, _, 1, 1] => o,
            _ => return Err(shape_err(&name, &w)),
        };
        let b = ws.take_opt(&format!("{prefix}.bias")).map(|t| t.data);
        Ok(Self { w: w.data, b, out })
    }

    pub fn forward(&self, x: &[f32], n: usize) -> Vec<f32> {
        ops::linear(x, n, &self.w, self.b.as_deref(), self.out)
    }
}

pub struct GroupNorm {
    gamma: Vec<f32>,
    beta: Vec<f32>,
    groups: usize,
    eps: f32,
}

impl GroupNorm {
    pub fn load(ws: &mut Weights, prefix: &str, groups: usize, eps: f32) -> Result<Self> {
        Ok(Self {
            gamma: ws.take(&format!("{prefix}.weight"))?.data,
            beta: ws.take(&format!("{prefix}.bias"))?.data,
            groups,
            eps,
        })
    }

    pub fn forward(&self, x: &Map) -> Map {
        let mut y = x.clone();
        ops::group_norm(&mut y, self.groups, &self.gamma, &self.beta, self.eps);
        y
    }
}

pub struct LayerNorm {
    gamma: Vec<f32>,
    beta: Vec<f32>,
    eps: f32,
}

impl LayerNorm {
    pub fn load(ws: &mut Weights, prefix: &str, eps: f32) -> Result<Self> {
        Ok(Self {
            gamma: ws.take(&format!("{prefix}.weight"))?.data,
            beta: ws.take(&format!("{prefix}.bias"))?.data,
            eps,
        })
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let mut y = x.to_vec();
        ops::layer_norm(&mut y, self.gamma.len(), &self.gamma, &self.beta, self.eps);
        y
    }
}

pub struct Resnet {
    norm1: GroupNorm,
    conv1: Conv,
    time_emb_proj: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv,
    shortcut: Option<Conv>,
}

impl Resnet {
    pub fn load(ws: &mut Weights, prefix: &str, groups: usize, eps: f32) -> Result<Self> {
        let time = format!("{prefix}.time_emb_proj.weight");
        Ok(Self {
            norm1: GroupNorm::load(ws, &format!("{prefix}.norm1"), groups, eps)?,
            conv1: Conv::load(ws, &format!("{prefix}.conv1"))?,
            time_emb_proj: if ws.contains(&time) {
                Some(Linear::load(ws, &format!("{prefix}.time_emb_proj"))?)
            } else {
                None
            },
            norm2: GroupNorm::load(ws, &format!("{prefix}.norm2"), groups, eps)?,
            conv2: Conv::load(ws, &format!("{prefix}.conv2"))?,
            shortcut: if ws.contains(&format!("{prefix}.conv_shortcut.weight")) {
                Some(Conv::load(ws, &format!("{prefix}.conv_shortcut"))?)
            } else {
                None
            },
        })
    }

    /// `temb` must already have gone through the SiLU.
    pub fn forward(&self, x: &Map, temb: Option<&[f32]>) -> Map {
        let mut h = self.norm1.forward(x);
        ops::silu(&mut h.data);
        let mut h = self.conv1.forward(&h);
        if let (Some(proj), Some(t)) = (&self.time_emb_proj, temb) {
            let bias = proj.forward(t, 1);
            let n = h.plane();
            for (c, b) in bias.iter().enumerate() {
                h.data[c * n..(c + 1) * n].iter_mut().for_each(|v| *v += b);
            }
        }
        let mut h = self.norm2.forward(&h);
        ops::silu(&mut h.data);
        let mut h = self.conv2.forward(&h);
        match &self.shortcut {
            Some(s) => h.add_assign(&s.forward(x)),
            None => h.add_assign(x),
        }
        h
    }
}

/// Query/key/value/output projections with a fixed head count.
pub struct Attention {
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn load(ws: &mut Weights, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            to_q: Linear::load_any(ws, &[&format!("{prefix}.to_q"), &format!("{prefix}.query")])?,
            to_k: Linear::load_any(ws, &[&format!("{prefix}.to_k"), &format!("{prefix}.key")])?,
            to_v: Linear::load_any(ws, &[&format!("{prefix}.to_v"), &format!("{prefix}.value")])?,
            to_out: Linear::load_any(ws, &[&format!("{prefix}.to_out.0"), &format!("{prefix}.proj_attn")])?,
            heads,
        })
    }

    pub fn width(&self) -> usize {
        self.to_q.out
    }

    pub fn key_value(&self, context: &[f32], n: usize) -> (FeatureRows, FeatureRows) {
        let w = self.width();
        (
            rows(n, w, self.to_k.forward(context, n)),
            rows(n, w, self.to_v.forward(context, n)),
        )
    }

    /// Self-attention over `x` (`n` tokens) with an optional tap.
    pub fn self_attend(&self, x: &[f32], n: usize, tap: Option<&TapAction>) -> Result<(Vec<f32>, Option<KvRecord>)> {
        let q = rows(n, self.width(), self.to_q.forward(x, n));
        let (out, captured) = match tap {
            Some(TapAction::Inject(kv)) => (attend_multihead(&q, kv.keys(), kv.values(), self.heads)?, None),
            Some(TapAction::Record) => {
                let (k, v) = self.key_value(x, n);
                let out = attend_multihead(&q, &k, &v, self.heads)?;
                (out, Some(KvRecord::new(k, v, self.heads)?))
            }
            Some(TapAction::Passthrough) | None => {
                let (k, v) = self.key_value(x, n);
                (attend_multihead(&q, &k, &v, self.heads)?, None)
            }
        };
        Ok((self.to_out.forward(out.data(), n), captured))
    }

    /// Attention of `x` over precomputed keys and values.
    pub fn attend_to(&self, x: &[f32], n: usize, k: &FeatureRows, v: &FeatureRows) -> Result<Vec<f32>> {
        let q = rows(n, self.width(), self.to_q.forward(x, n));
        let out = attend_multihead(&q, k, v, self.heads)?;
        Ok(self.to_out.forward(out.data(), n))
    }
}

/// One transformer layer: self-attention (the tapped site), cross-attention
/// over the fixed prompt embedding, gated feed-forward.
pub struct TransformerBlock {
    norm1: LayerNorm,
    pub attn1: Attention,
    norm2: LayerNorm,
    attn2: Attention,
    /// Keys and values of the prompt embedding, fixed once the prompt is known.
    context_kv: Option<(FeatureRows, FeatureRows)>,
    norm3: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl TransformerBlock {
    pub fn load(ws: &mut Weights, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::load(ws, &format!("{prefix}.norm1"), 1e-5)?,
            attn1: Attention::load(ws, &format!("{prefix}.attn1"), heads)?,
            norm2: LayerNorm::load(ws, &format!("{prefix}.norm2"), 1e-5)?,
            attn2: Attention::load(ws, &format!("{prefix}.attn2"), heads)?,
            context_kv: None,
            norm3: LayerNorm::load(ws, &format!("{prefix}.norm3"), 1e-5)?,
            ff_in: Linear::load(ws, &format!("{prefix}.ff.net.0.proj"))?,
            ff_out: Linear::load(ws, &format!("{prefix}.ff.net.2"))?,
        })
    }

    pub fn set_context(&mut self, context: &[f32], n: usize) {
        self.context_kv = Some(self.attn2.key_value(context, n));
    }

    pub fn forward(&self, x: &mut [f32], n: usize, tap: Option<&TapAction>) -> Result<Option<KvRecord>> {
        let (a, captured) = self.attn1.self_attend(&self.norm1.forward(x), n, tap)?;
        x.iter_mut().zip(&a).for_each(|(x, a)| *x += a);

        let (k, v) = self
            .context_kv
            .as_ref()
            .ok_or_else(|| Error::Backend("prompt embedding not set".into()))?;
        let a = self.attn2.attend_to(&self.norm2.forward(x), n, k, v)?;
        x.iter_mut().zip(&a).for_each(|(x, a)| *x += a);

        let proj = self.ff_in.forward(&self.norm3.forward(x), n);
        let inner = self.ff_in.out / 2;
        let mut gated = vec![0.0f32; n * inner];
        for r in 0..n {
            let row = &proj[r * 2 * inner..(r + 1) * 2 * inner];
            for i in 0..inner {
                gated[r * inner + i] = row[i] * ops::gelu(row[inner + i]);
            }
        }
        let f = self.ff_out.forward(&gated, n);
        x.iter_mut().zip(&f).for_each(|(x, a)| *x += a);
        Ok(captured)
    }
}

/// Spatial transformer: group norm, projection to tokens, transformer
/// layers, projection back, residual.
pub struct Transformer2d {
    norm: GroupNorm,
    proj_in: Linear,
    pub blocks: Vec<TransformerBlock>,
    proj_out: Linear,
}

impl Transformer2d {
    pub fn load(ws: &mut Weights, prefix: &str, heads: usize, groups: usize, depth: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::load(ws, &format!("{prefix}.norm"), groups, 1e-6)?,
            proj_in: Linear::load(ws, &format!("{prefix}.proj_in"))?,
            blocks: (0..depth)
                .map(|i| TransformerBlock::load(ws, &format!("{prefix}.transformer_blocks.{i}"), heads))
                .collect::<Result<_>>()?,
            proj_out: Linear::load(ws, &format!("{prefix}.proj_out"))?,
        })
    }

    /// Runs the layers; `taps` has one entry per layer.
    pub fn forward(&self, x: &Map, taps: &[Option<&TapAction>]) -> Result<(Map, Vec<Option<KvRecord>>)> {
        let n = x.plane();
        let tokens = self.norm.forward(x).to_tokens();
        let mut h = self.proj_in.forward(&tokens, n);
        let mut captured = Vec::with_capacity(self.blocks.len());
        for (block, tap) in self.blocks.iter().zip(taps) {
            captured.push(block.forward(&mut h, n, *tap)?);
        }
        let out = self.proj_out.forward(&h, n);
        let mut y = Map::from_tokens(&out, x.c, x.h, x.w);
        y.add_assign(x);
        Ok((y, captured))
    }
}
