//! The contract a latent diffusion backbone must satisfy to be driven by the
//! rectification procedures: image/latent codecs plus a noise predictor whose
//! self-attention layers can be tapped or overridden.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::attention::KvRecord;
use crate::error::{Error, Result};
use crate::image::{LatentImage, PixelImage};

/// A self-attention layer, numbered 0-based in network depth order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AttentionSite(pub usize);

impl fmt::Display for AttentionSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Native layout of the keys and values at one site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiteShape {
    /// Feature width `d` of K and V (all heads together).
    pub width: usize,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub enum TapAction {
    /// Run natively and hand back the site's keys and values.
    Record,
    /// Replace the site's keys and values with the supplied ones.
    Inject(Arc<KvRecord>),
    Passthrough,
}

#[derive(Debug, Clone)]
pub struct TapDirective {
    pub site: AttentionSite,
    pub action: TapAction,
}

impl TapDirective {
    pub fn record(site: AttentionSite) -> Self {
        Self {
            site,
            action: TapAction::Record,
        }
    }

    pub fn inject(site: AttentionSite, kv: Arc<KvRecord>) -> Self {
        Self {
            site,
            action: TapAction::Inject(kv),
        }
    }

    pub fn passthrough(site: AttentionSite) -> Self {
        Self {
            site,
            action: TapAction::Passthrough,
        }
    }
}

/// Output of one noise-predictor evaluation.
#[derive(Debug, Clone)]
pub struct NoisePrediction {
    pub epsilon: LatentImage,
    /// Keys and values of every site whose directive was [`TapAction::Record`].
    pub captured: BTreeMap<AttentionSite, KvRecord>,
}

/// A pre-trained latent diffusion model.
///
/// Implementations evaluate the unconditional (empty-prompt) prediction
/// without classifier-free guidance.
pub trait Backend {
    /// Number of self-attention sites the noise predictor exposes.
    fn site_count(&self) -> usize;

    fn site_shape(&self, site: AttentionSite) -> Result<SiteShape>;

    /// `ᾱ` over the native training timesteps.
    fn native_alphas(&self) -> &[f64];

    /// Offset added to every grid timestep (checkpoint scheduler convention).
    fn steps_offset(&self) -> usize {
        0
    }

    fn encode_image(&self, img: &PixelImage) -> Result<LatentImage>;

    fn decode_latent(&self, z: &LatentImage) -> Result<PixelImage>;

    /// Predicts the noise in `z` at native training timestep `timestep`.
    fn predict_noise(&self, z: &LatentImage, timestep: usize, directives: &[TapDirective]) -> Result<NoisePrediction>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn site_count(&self) -> usize {
        (**self).site_count()
    }
    fn site_shape(&self, site: AttentionSite) -> Result<SiteShape> {
        (**self).site_shape(site)
    }
    fn native_alphas(&self) -> &[f64] {
        (**self).native_alphas()
    }
    fn steps_offset(&self) -> usize {
        (**self).steps_offset()
    }
    fn encode_image(&self, img: &PixelImage) -> Result<LatentImage> {
        (**self).encode_image(img)
    }
    fn decode_latent(&self, z: &LatentImage) -> Result<PixelImage> {
        (**self).decode_latent(z)
    }
    fn predict_noise(&self, z: &LatentImage, timestep: usize, directives: &[TapDirective]) -> Result<NoisePrediction> {
        (**self).predict_noise(z, timestep, directives)
    }
}

/// Validates `directives` against the backbone's sites and lays them out by
/// site index. Sites without a directive pass through.
pub fn index_directives<'a>(
    directives: &'a [TapDirective],
    shapes: &[SiteShape],
) -> Result<Vec<Option<&'a TapAction>>> {
    let mut by_site: Vec<Option<&TapAction>> = vec![None; shapes.len()];
    for d in directives {
        let shape = shapes.get(d.site.0).ok_or(Error::UnknownSite(d.site))?;
        let slot = &mut by_site[d.site.0];
        if slot.is_some() {
            return Err(Error::DuplicateDirective(d.site));
        }
        if let TapAction::Inject(kv) = &d.action {
            if kv.width() != shape.width {
                return Err(Error::InjectedWidth {
                    site: d.site,
                    got: kv.width(),
                    expected: shape.width,
                });
            }
            if kv.heads() != shape.heads {
                return Err(Error::Attention(alloc::format!(
                    "injected features at site {} carry {} heads, site has {}",
                    d.site,
                    kv.heads(),
                    shape.heads
                )));
            }
        }
        *slot = Some(&d.action);
    }
    Ok(by_site)
}

/// Record directives for every site in `sites`.
pub fn record_all(sites: &[AttentionSite]) -> Vec<TapDirective> {
    sites.iter().copied().map(TapDirective::record).collect()
}
