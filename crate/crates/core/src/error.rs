use alloc::string::String;

use crate::backend::AttentionSite;

/// Errors produced by the rectification core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("image dimensions {height}x{width} are not multiples of {factor}")]
    Dimensions { height: usize, width: usize, factor: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("timestep {t} has no {direction} in a grid of {steps} steps")]
    GridEdge {
        t: usize,
        steps: usize,
        direction: &'static str,
    },

    #[error("attention site {0} does not exist in the backbone")]
    UnknownSite(AttentionSite),

    #[error("more than one directive addresses site {0}")]
    DuplicateDirective(AttentionSite),

    #[error("injected features at site {site} have width {got}, expected {expected}")]
    InjectedWidth {
        site: AttentionSite,
        got: usize,
        expected: usize,
    },

    #[error("attention operands: {0}")]
    Attention(String),

    #[error("cache '{label}' has no entry for site {site} at step {t}")]
    CacheMiss {
        label: String,
        site: AttentionSite,
        t: usize,
    },

    #[error("cache '{0}' is sealed; writes after recording are rejected")]
    CacheSealed(String),

    #[error("cache storage: {0}")]
    Storage(String),

    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("block size {block} does not divide {height}x{width}")]
    BlockSize { block: usize, height: usize, width: usize },

    #[error("{0}")]
    Backend(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
