//! Safetensors loading into f32 buffers.

use std::collections::HashMap;
use std::fs::File;
use std::path::Path;

use memmap2::Mmap;
use safetensors::{Dtype, SafeTensors};
use selfrect_core::{Error, Result};

#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named parameters of one model component.
#[derive(Debug, Default)]
pub struct Weights {
    tensors: HashMap<String, Tensor>,
}

fn backend_err(msg: impl Into<String>) -> Error {
    Error::Backend(msg.into())
}

fn to_f32(dtype: Dtype, bytes: &[u8]) -> Result<Vec<f32>> {
    let out = match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|b| half::f16::from_le_bytes([b[0], b[1]]).to_f32())
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|b| half::bf16::from_le_bytes([b[0], b[1]]).to_f32())
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")) as f32)
            .collect(),
        other => return Err(backend_err(format!("unsupported tensor dtype {other:?}"))),
    };
    Ok(out)
}

impl Weights {
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| backend_err(format!("{}: {e}", path.display())))?;
        // SAFETY: the mapping is read-only and dropped before returning.
        let mmap = unsafe { Mmap::map(&file) }.map_err(|e| backend_err(format!("{}: {e}", path.display())))?;
        let st = SafeTensors::deserialize(&mmap).map_err(|e| backend_err(format!("{}: {e}", path.display())))?;
        let mut tensors = HashMap::new();
        for (name, view) in st.tensors() {
            let data = to_f32(view.dtype(), view.data())?;
            tensors.insert(
                name,
                Tensor {
                    shape: view.shape().to_vec(),
                    data,
                },
            );
        }
        Ok(Self { tensors })
    }

    pub fn from_map(tensors: HashMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Removes a parameter, trying each name in turn (for renamed checkpoints).
    pub fn take_any(&mut self, names: &[&str]) -> Result<Tensor> {
        for n in names {
            if let Some(t) = self.tensors.remove(*n) {
                return Ok(t);
            }
        }
        Err(backend_err(format!("missing parameter {}", names.join(" | "))))
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.take_any(&[name])
    }

    pub fn take_opt(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    /// Names left after a model has taken everything it uses.
    pub fn remaining(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.tensors.keys().map(String::as_str).collect();
        v.sort_unstable();
        v
    }
}
