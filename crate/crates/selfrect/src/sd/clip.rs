//! CLIP text transformer, used once to embed the empty prompt.

use selfrect_core::{Error, Result};
use serde_json::Value;

use super::layers::{LayerNorm, Linear};
use super::ops;
use super::weights::Weights;

#[derive(Debug, Clone)]
pub struct ClipConfig {
    pub hidden_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub quick_gelu: bool,
    pub eps: f32,
}

impl ClipConfig {
    pub fn from_json(v: &Value) -> Result<Self> {
        let u = |k: &str| {
            v.get(k)
                .and_then(Value::as_u64)
                .map(|n| n as usize)
                .ok_or_else(|| Error::Backend(format!("text encoder config: {k} missing")))
        };
        let act = v.get("hidden_act").and_then(Value::as_str).unwrap_or("quick_gelu");
        let quick_gelu = match act {
            "quick_gelu" => true,
            "gelu" => false,
            other => return Err(Error::Backend(format!("unsupported activation {other}"))),
        };
        Ok(Self {
            hidden_size: u("hidden_size")?,
            layers: u("num_hidden_layers")?,
            heads: u("num_attention_heads")?,
            max_positions: u("max_position_embeddings")?,
            quick_gelu,
            eps: v.get("layer_norm_eps").and_then(Value::as_f64).unwrap_or(1e-5) as f32,
        })
    }
}

struct Layer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

pub struct TextEncoder {
    token_embedding: Vec<f32>,
    vocab: usize,
    position_embedding: Vec<f32>,
    layers: Vec<Layer>,
    final_ln: LayerNorm,
    cfg: ClipConfig,
}

impl TextEncoder {
    pub fn load(ws: &mut Weights, cfg: &ClipConfig) -> Result<Self> {
        // older exports nest everything under `text_model.`
        let p = if ws.contains("text_model.embeddings.token_embedding.weight") {
            "text_model."
        } else {
            ""
        };
        let tok = ws.take(&format!("{p}embeddings.token_embedding.weight"))?;
        let pos = ws.take(&format!("{p}embeddings.position_embedding.weight"))?;
        if tok.shape.len() != 2 || tok.shape[1] != cfg.hidden_size || pos.shape != [cfg.max_positions, cfg.hidden_size]
        {
            return Err(Error::Backend(format!(
                "embedding shapes {:?} / {:?} disagree with the config",
                tok.shape, pos.shape
            )));
        }
        let layers = (0..cfg.layers)
            .map(|i| {
                let l = format!("{p}encoder.layers.{i}");
                Ok(Layer {
                    ln1: LayerNorm::load(ws, &format!("{l}.layer_norm1"), cfg.eps)?,
                    q: Linear::load(ws, &format!("{l}.self_attn.q_proj"))?,
                    k: Linear::load(ws, &format!("{l}.self_attn.k_proj"))?,
                    v: Linear::load(ws, &format!("{l}.self_attn.v_proj"))?,
                    out: Linear::load(ws, &format!("{l}.self_attn.out_proj"))?,
                    ln2: LayerNorm::load(ws, &format!("{l}.layer_norm2"), cfg.eps)?,
                    fc1: Linear::load(ws, &format!("{l}.mlp.fc1"))?,
                    fc2: Linear::load(ws, &format!("{l}.mlp.fc2"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            vocab: tok.shape[0],
            token_embedding: tok.data,
            position_embedding: pos.data,
            layers,
            final_ln: LayerNorm::load(ws, &format!("{p}final_layer_norm"), cfg.eps)?,
            cfg: cfg.clone(),
        })
    }

    pub fn max_positions(&self) -> usize {
        self.cfg.max_positions
    }

    /// Last hidden state (after the final layer norm) for `ids`.
    pub fn encode(&self, ids: &[usize]) -> Result<Vec<f32>> {
        let d = self.cfg.hidden_size;
        let n = ids.len();
        if n == 0 || n > self.cfg.max_positions {
            return Err(Error::Backend(format!(
                "{n} tokens, at most {}",
                self.cfg.max_positions
            )));
        }
        let mut x = vec![0.0f32; n * d];
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.vocab {
                return Err(Error::Backend(format!(
                    "token id {id} outside vocabulary of {}",
                    self.vocab
                )));
            }
            for j in 0..d {
                x[i * d + j] = self.token_embedding[id * d + j] + self.position_embedding[i * d + j];
            }
        }
        for layer in &self.layers {
            let h = layer.ln1.forward(&x);
            let a = causal_attention(
                &layer.q.forward(&h, n),
                &layer.k.forward(&h, n),
                &layer.v.forward(&h, n),
                n,
                d,
                self.cfg.heads,
            );
            let a = layer.out.forward(&a, n);
            x.iter_mut().zip(&a).for_each(|(x, a)| *x += a);
            let h = layer.ln2.forward(&x);
            let mut h = layer.fc1.forward(&h, n);
            for v in &mut h {
                *v = if self.cfg.quick_gelu {
                    ops::quick_gelu(*v)
                } else {
                    ops::gelu(*v)
                };
            }
            let h = layer.fc2.forward(&h, n);
            x.iter_mut().zip(&h).for_each(|(x, a)| *x += a);
        }
        Ok(self.final_ln.forward(&x))
    }
}

fn causal_attention(q: &[f32], k: &[f32], v: &[f32], n: usize, d: usize, heads: usize) -> Vec<f32> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = vec![0.0f32; n * d];
    let mut s = vec![0.0f32; n];
    for h in 0..heads {
        let c = h * dh;
        for i in 0..n {
            let qi = &q[i * d + c..i * d + c + dh];
            let mut max = f32::NEG_INFINITY;
            for j in 0..=i {
                let kj = &k[j * d + c..j * d + c + dh];
                s[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                max = max.max(s[j]);
            }
            let mut sum = 0.0;
            for sj in &mut s[..=i] {
                *sj = (*sj - max).exp();
                sum += *sj;
            }
            let o = &mut out[i * d + c..i * d + c + dh];
            for j in 0..=i {
                let w = s[j] / sum;
                for (o, vv) in o.iter_mut().zip(&v[j * d + c..j * d + c + dh]) {
                    *o += w * vv;
                }
            }
        }
    }
    out
}
