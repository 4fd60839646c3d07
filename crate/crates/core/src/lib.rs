//! Self-rectification of crudely edited textures on a latent diffusion backbone.
//!
//! The crate is `no_std` and needs only `alloc`. Model weights, image files and
//! the command line live in the `selfrect` companion crate.
#![no_std]

extern crate alloc;

pub mod attention;
pub mod backend;
pub mod error;
pub mod image;
pub mod metrics;
pub mod prep;
pub mod rectify;
pub mod scheduler;
pub mod stub;

pub use error::{Error, Result};
