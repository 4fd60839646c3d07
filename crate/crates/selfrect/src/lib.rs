//! Self-rectified texture synthesis on Stable Diffusion: model loading,
//! file handling, run orchestration and sweeps on top of `selfrect-core`.

pub mod config;
mod error;
pub mod io;
pub mod run;
pub mod sd;
pub mod spill;
pub mod sweep;

pub use error::{Error, Result};
pub use selfrect_core as core;
