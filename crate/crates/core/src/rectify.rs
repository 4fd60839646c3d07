//! Self-rectification: structure-preserving inversion of the target followed
//! by fine texture sampling against the reference, run coarse then fine.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::attention::{resolve_injection, CacheStorage, IndexMap, InjectionPolicy, KvStore, Phase};
use crate::backend::{record_all, AttentionSite, Backend, TapDirective};
use crate::error::{Error, Result};
use crate::image::{LatentImage, PixelImage};
use crate::prep::{build_augmentations, latent_shuffle, AugmentationSet, ShuffleSpec};
use crate::scheduler::{build_schedule_with_offset, invert_step, sample_step, NoiseSchedule};

/// Label of the recorded pass over the inversion reference.
pub const IR_LABEL: &str = "IR-inversion";

/// Latents `z_0 … z_T` of one DDIM inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    latents: Vec<LatentImage>,
}

impl Trajectory {
    pub fn new(latents: Vec<LatentImage>) -> Result<Self> {
        if latents.len() < 2 {
            return Err(Error::Shape(format!(
                "a trajectory needs at least two latents, got {}",
                latents.len()
            )));
        }
        Ok(Self { latents })
    }

    pub fn latents(&self) -> &[LatentImage] {
        &self.latents
    }

    pub fn get(&self, t: usize) -> Option<&LatentImage> {
        self.latents.get(t)
    }

    pub fn steps(&self) -> usize {
        self.latents.len() - 1
    }

    pub fn start(&self) -> &LatentImage {
        &self.latents[0]
    }

    pub fn end(&self) -> &LatentImage {
        &self.latents[self.latents.len() - 1]
    }
}

/// A recorded inversion: its trajectory plus the attention features captured
/// at every step.
#[derive(Clone)]
pub struct RecordedPass {
    pub trajectory: Trajectory,
    pub cache: Arc<dyn KvStore>,
}

impl core::fmt::Debug for RecordedPass {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("RecordedPass")
            .field("label", &self.cache.label())
            .field("steps", &self.trajectory.steps())
            .field("entries", &self.cache.len())
            .finish()
    }
}

/// How the inversion reference's features are obtained during
/// structure-preserving inversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IrEvalMode {
    /// Re-evaluate the predictor on `z^IR_{T-t}` conditioned on the current step `t`.
    #[default]
    Literal,
    /// Reuse the features recorded while inverting the reference, i.e. at
    /// `(z^IR_{T-t}, T-t)`.
    NativeCache,
}

impl core::str::FromStr for IrEvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(IrEvalMode::Literal),
            "native-cache" => Ok(IrEvalMode::NativeCache),
            other => Err(Error::Config {
                field: "ir_eval",
                reason: format!("expected 'literal' or 'native-cache', got '{other}'"),
            }),
        }
    }
}

impl core::fmt::Display for IrEvalMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            IrEvalMode::Literal => "literal",
            IrEvalMode::NativeCache => "native-cache",
        })
    }
}

/// Full configuration of a two-round rectification run.
#[derive(Debug, Clone, PartialEq)]
pub struct RectifyConfig {
    /// Number of DDIM steps `T`.
    pub steps: usize,
    pub p1: usize,
    pub p2: usize,
    pub s1: usize,
    pub s2: usize,
    pub sites: Vec<AttentionSite>,
    pub ir_eval_mode: IrEvalMode,
    /// Source-step mapping during structure-preserving inversion.
    pub inversion_map: IndexMap,
    pub augmentations: AugmentationSet,
    pub seed: u64,
    /// Latent block size for shuffling the round-one start code.
    pub start_shuffle: Option<usize>,
}

impl Default for RectifyConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            p1: 20,
            p2: 5,
            s1: 20,
            s2: 5,
            sites: (10..=15).map(AttentionSite).collect(),
            ir_eval_mode: IrEvalMode::Literal,
            inversion_map: IndexMap::Reverse,
            augmentations: AugmentationSet::default(),
            seed: 0,
            start_shuffle: None,
        }
    }
}

impl RectifyConfig {
    /// Checks bounds against `T` and the backbone's site count.
    pub fn validate(&self, site_count: usize) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config {
                field: "steps",
                reason: "must be at least 1".into(),
            });
        }
        for (field, v) in [("p1", self.p1), ("p2", self.p2), ("s1", self.s1), ("s2", self.s2)] {
            if v > self.steps {
                return Err(Error::Config {
                    field,
                    reason: format!("{v} exceeds step count {}", self.steps),
                });
            }
        }
        let mut seen = Vec::with_capacity(self.sites.len());
        for s in &self.sites {
            if s.0 >= site_count {
                return Err(Error::Config {
                    field: "sites",
                    reason: format!("site {} outside the backbone's {site_count} sites", s.0),
                });
            }
            if seen.contains(s) {
                return Err(Error::Config {
                    field: "sites",
                    reason: format!("site {} listed twice", s.0),
                });
            }
            seen.push(*s);
        }
        if self.start_shuffle == Some(0) {
            return Err(Error::Config {
                field: "start_shuffle",
                reason: "block size must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Receives progress from the rectification loops.
pub trait Observer {
    /// Called once at the start of each round (1-based).
    fn round(&mut self, _round: usize) {}

    /// Latent `z_t` at grid index `t` of a phase, before the step leaving it
    /// and once more at the phase's final index.
    fn latent(&mut self, _phase: Phase, _t: usize, _z: &LatentImage) {}

    /// One DDIM step was taken; `injected_rows` is the row count of the
    /// injected keys at the first active site, if any were injected.
    fn step(&mut self, _phase: Phase, _t: usize, _injected_rows: Option<usize>) {}
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoObserver;

impl Observer for NoObserver {}

pub fn schedule_for<B: Backend + ?Sized>(backend: &B, steps: usize) -> Result<NoiseSchedule> {
    build_schedule_with_offset(steps, backend.native_alphas(), backend.steps_offset())
}

fn check_sites<B: Backend + ?Sized>(backend: &B, sites: &[AttentionSite]) -> Result<()> {
    for &s in sites {
        backend.site_shape(s)?;
    }
    Ok(())
}

fn epsilon_for<B: Backend + ?Sized>(
    backend: &B,
    z: &LatentImage,
    t: usize,
    sched: &NoiseSchedule,
    directives: &[TapDirective],
) -> Result<crate::backend::NoisePrediction> {
    backend.predict_noise(z, sched.model_timestep(t), directives)
}

/// Standard DDIM inversion of `z0` recording the keys and values of `sites`
/// at every latent `z_0 … z_T`.
///
/// Steps `t < T` record while predicting the noise that moves `z_t` forward;
/// the terminal latent `z_T` gets one extra record-only evaluation so that
/// every grid index has features.
pub fn invert_latent_and_record<B: Backend + ?Sized>(
    backend: &B,
    z0: LatentImage,
    sched: &NoiseSchedule,
    sites: &[AttentionSite],
    storage: &dyn CacheStorage,
    label: &str,
    observer: &mut dyn Observer,
) -> Result<RecordedPass> {
    check_sites(backend, sites)?;
    z0.ensure_finite()?;
    let steps = sched.steps();
    let directives = record_all(sites);
    let mut recorder = storage.create(label)?;
    let mut latents = Vec::with_capacity(steps + 1);
    let mut z = z0;
    for t in 0..steps {
        observer.latent(Phase::Inversion, t, &z);
        let pred = epsilon_for(backend, &z, t, sched, &directives)?;
        for (site, kv) in pred.captured {
            recorder.put(site, t, kv)?;
        }
        let next = invert_step(&z, &pred.epsilon, t, sched)?;
        observer.step(Phase::Inversion, t, None);
        latents.push(core::mem::replace(&mut z, next));
    }
    observer.latent(Phase::Inversion, steps, &z);
    if !sites.is_empty() {
        let pred = epsilon_for(backend, &z, steps, sched, &directives)?;
        for (site, kv) in pred.captured {
            recorder.put(site, steps, kv)?;
        }
    }
    latents.push(z);
    Ok(RecordedPass {
        trajectory: Trajectory::new(latents)?,
        cache: recorder.seal()?,
    })
}

/// Encodes `img` and runs [`invert_latent_and_record`].
pub fn invert_and_record<B: Backend + ?Sized>(
    backend: &B,
    img: &PixelImage,
    sched: &NoiseSchedule,
    sites: &[AttentionSite],
    storage: &dyn CacheStorage,
    label: &str,
) -> Result<RecordedPass> {
    let z0 = backend.encode_image(img)?;
    invert_latent_and_record(backend, z0, sched, sites, storage, label, &mut NoObserver)
}

/// Options for [`structure_preserving_invert`].
#[derive(Debug, Clone, Copy)]
pub struct InversionOptions {
    pub mode: IrEvalMode,
    pub index_map: IndexMap,
}

impl Default for InversionOptions {
    fn default() -> Self {
        Self {
            mode: IrEvalMode::Literal,
            index_map: IndexMap::Reverse,
        }
    }
}

/// Inverts `target_z0` while, for the first `p` steps, every active site
/// attends over the inversion reference's keys and values taken from the
/// mapped step (reverse order by default). Returns `z_T`.
#[allow(clippy::too_many_arguments)]
pub fn structure_preserving_invert<B: Backend + ?Sized>(
    backend: &B,
    target_z0: &LatentImage,
    ir: &RecordedPass,
    p: usize,
    sites: &[AttentionSite],
    sched: &NoiseSchedule,
    options: InversionOptions,
    observer: &mut dyn Observer,
) -> Result<LatentImage> {
    let steps = sched.steps();
    if ir.trajectory.steps() != steps {
        return Err(Error::Shape(format!(
            "inversion reference has {} steps, schedule has {steps}",
            ir.trajectory.steps()
        )));
    }
    target_z0.ensure_same_shape(ir.trajectory.start())?;
    check_sites(backend, sites)?;
    let policy = InjectionPolicy::inversion(
        p,
        steps,
        sites.to_vec(),
        options.index_map,
        alloc::vec![ir.cache.clone()],
    )?;
    let mut z = target_z0.clone();
    for t in 0..steps {
        observer.latent(Phase::Inversion, t, &z);
        let directives = match policy.source_index(t) {
            Some(src) if !sites.is_empty() => match options.mode {
                IrEvalMode::Literal => {
                    let z_ir = ir.trajectory.get(src).ok_or_else(|| Error::CacheMiss {
                        label: String::from(ir.cache.label()),
                        site: sites[0],
                        t: src,
                    })?;
                    let donor = epsilon_for(backend, z_ir, t, sched, &record_all(sites))?;
                    donor
                        .captured
                        .into_iter()
                        .map(|(site, kv)| TapDirective::inject(site, Arc::new(kv)))
                        .collect::<Vec<_>>()
                }
                IrEvalMode::NativeCache => sites
                    .iter()
                    .map(|&site| {
                        resolve_injection(&policy, site, t)
                            .map(|kv| TapDirective::inject(site, kv.expect("active step")))
                    })
                    .collect::<Result<Vec<_>>>()?,
            },
            _ => Vec::new(),
        };
        let rows = first_injected_rows(&directives);
        let pred = epsilon_for(backend, &z, t, sched, &directives)?;
        z = invert_step(&z, &pred.epsilon, t, sched)?;
        observer.step(Phase::Inversion, t, rows);
    }
    observer.latent(Phase::Inversion, steps, &z);
    Ok(z)
}

fn first_injected_rows(directives: &[TapDirective]) -> Option<usize> {
    directives.iter().find_map(|d| match &d.action {
        crate::backend::TapAction::Inject(kv) => Some(kv.rows()),
        _ => None,
    })
}

/// DDIM sampling from `start`: the first `s` steps run plainly, the rest
/// attend over the concatenated keys and values of every reference pass at
/// the same step. Returns `z_0`.
pub fn fine_texture_sample<B: Backend + ?Sized>(
    backend: &B,
    start: &LatentImage,
    refs: &[RecordedPass],
    s: usize,
    sites: &[AttentionSite],
    sched: &NoiseSchedule,
    observer: &mut dyn Observer,
) -> Result<LatentImage> {
    let steps = sched.steps();
    check_sites(backend, sites)?;
    for r in refs {
        if r.trajectory.steps() != steps {
            return Err(Error::Shape(format!(
                "reference pass '{}' has {} steps, schedule has {steps}",
                r.cache.label(),
                r.trajectory.steps()
            )));
        }
    }
    let sources = refs.iter().map(|r| r.cache.clone()).collect();
    let policy = InjectionPolicy::sampling(s, steps, sites.to_vec(), sources)?;
    let mut z = start.clone();
    for t in (1..=steps).rev() {
        observer.latent(Phase::Sampling, t, &z);
        let mut directives = Vec::new();
        for &site in sites {
            if let Some(kv) = resolve_injection(&policy, site, t)? {
                directives.push(TapDirective::inject(site, kv));
            }
        }
        let rows = first_injected_rows(&directives);
        let pred = epsilon_for(backend, &z, t, sched, &directives)?;
        z = sample_step(&z, &pred.epsilon, t, sched)?;
        observer.step(Phase::Sampling, t, rows);
    }
    observer.latent(Phase::Sampling, 0, &z);
    Ok(z)
}

/// Inverts the reference and each augmented copy, recording at `sites`.
/// Pass `i` is labelled `ref-inversion-i`; pass 0 is the unaugmented reference.
pub fn record_references<B: Backend + ?Sized>(
    backend: &B,
    reference: &PixelImage,
    augmentations: &AugmentationSet,
    sched: &NoiseSchedule,
    sites: &[AttentionSite],
    storage: &dyn CacheStorage,
) -> Result<Vec<RecordedPass>> {
    let mut images = alloc::vec![reference.clone()];
    images.extend(build_augmentations(reference, augmentations));
    images
        .iter()
        .enumerate()
        .map(|(i, img)| invert_and_record(backend, img, sched, sites, storage, &format!("ref-inversion-{i}")))
        .collect()
}

/// Records the inversion reference. Features are only kept when the
/// structure-preserving inversion will read them from the cache.
pub fn record_inversion_reference<B: Backend + ?Sized>(
    backend: &B,
    ir: &PixelImage,
    sched: &NoiseSchedule,
    sites: &[AttentionSite],
    mode: IrEvalMode,
    storage: &dyn CacheStorage,
) -> Result<RecordedPass> {
    let recorded: &[AttentionSite] = match mode {
        IrEvalMode::Literal => &[],
        IrEvalMode::NativeCache => sites,
    };
    invert_and_record(backend, ir, sched, recorded, storage, IR_LABEL)
}

fn check_same_size(images: &[(&str, &PixelImage)]) -> Result<()> {
    let (_, first) = images[0];
    for (name, img) in images {
        img.check_latent_aligned()?;
        if img.height() != first.height() || img.width() != first.width() {
            return Err(Error::Shape(format!(
                "{name} is {}x{}, expected {}x{}",
                img.height(),
                img.width(),
                first.height(),
                first.width()
            )));
        }
    }
    Ok(())
}

/// Recorded passes a run reads from: the inversion reference and the
/// reference with its augmentations. They only depend on the two images and
/// on `steps`, `sites`, `ir_eval_mode` and `augmentations`, so runs that
/// differ in `p`, `s`, the index map or the seed can share one recording.
#[derive(Debug)]
pub struct SharedPasses {
    sched: NoiseSchedule,
    ir: RecordedPass,
    refs: Vec<RecordedPass>,
    sites: Vec<AttentionSite>,
    ir_eval_mode: IrEvalMode,
    augmentations: AugmentationSet,
}

impl SharedPasses {
    /// Validates `cfg` and records every pass. `target` doubles as the
    /// inversion reference.
    pub fn record<B: Backend + ?Sized>(
        backend: &B,
        reference: &PixelImage,
        target: &PixelImage,
        cfg: &RectifyConfig,
        storage: &dyn CacheStorage,
    ) -> Result<Self> {
        check_same_size(&[("reference", reference), ("target", target)])?;
        cfg.validate(backend.site_count())?;
        let sched = schedule_for(backend, cfg.steps)?;
        Ok(Self {
            ir: record_inversion_reference(backend, target, &sched, &cfg.sites, cfg.ir_eval_mode, storage)?,
            refs: record_references(backend, reference, &cfg.augmentations, &sched, &cfg.sites, storage)?,
            sched,
            sites: cfg.sites.clone(),
            ir_eval_mode: cfg.ir_eval_mode,
            augmentations: cfg.augmentations.clone(),
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    /// Entry counts of every recorded pass, by label.
    pub fn cache_entries(&self) -> BTreeMap<String, usize> {
        core::iter::once(&self.ir)
            .chain(&self.refs)
            .map(|r| (String::from(r.cache.label()), r.cache.len()))
            .collect()
    }

    fn check(&self, cfg: &RectifyConfig) -> Result<()> {
        let mismatch = |field: &'static str| Error::Config {
            field,
            reason: "differs from the setting the shared passes were recorded with".into(),
        };
        if cfg.steps != self.sched.steps() {
            return Err(mismatch("steps"));
        }
        if cfg.sites != self.sites {
            return Err(mismatch("sites"));
        }
        if cfg.ir_eval_mode != self.ir_eval_mode {
            return Err(mismatch("ir_eval_mode"));
        }
        if cfg.augmentations != self.augmentations {
            return Err(mismatch("augmentations"));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn round<B: Backend + ?Sized>(
        &self,
        backend: &B,
        cfg: &RectifyConfig,
        target_z0: &LatentImage,
        p: usize,
        s: usize,
        shuffle: Option<ShuffleSpec>,
        observer: &mut dyn Observer,
    ) -> Result<LatentImage> {
        let options = InversionOptions {
            mode: cfg.ir_eval_mode,
            index_map: cfg.inversion_map,
        };
        let mut start = structure_preserving_invert(
            backend,
            target_z0,
            &self.ir,
            p,
            &cfg.sites,
            &self.sched,
            options,
            observer,
        )?;
        if let Some(spec) = shuffle {
            start = latent_shuffle(&start, spec)?;
        }
        fine_texture_sample(backend, &start, &self.refs, s, &cfg.sites, &self.sched, observer)
    }
}

/// One self-rectification round from scratch: records the inversion
/// reference and the (augmented) reference, then inverts `target` with
/// structure preservation and samples with reference features.
#[allow(clippy::too_many_arguments)]
pub fn self_rectify<B: Backend + ?Sized>(
    backend: &B,
    target: &PixelImage,
    ir: &PixelImage,
    reference: &PixelImage,
    p: usize,
    s: usize,
    cfg: &RectifyConfig,
    storage: &dyn CacheStorage,
    observer: &mut dyn Observer,
) -> Result<PixelImage> {
    check_same_size(&[
        ("target", target),
        ("inversion reference", ir),
        ("reference", reference),
    ])?;
    let cfg = RectifyConfig {
        p1: p,
        s1: s,
        ..cfg.clone()
    };
    cfg.validate(backend.site_count())?;
    let passes = SharedPasses::record(backend, reference, ir, &cfg, storage)?;
    let z0 = backend.encode_image(target)?;
    let out = passes.round(backend, &cfg, &z0, p, s, None, observer)?;
    backend.decode_latent(&out)
}

/// Result of [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub coarse: PixelImage,
    pub image: PixelImage,
    /// Entry counts of every recorded pass, by label.
    pub cache_entries: BTreeMap<String, usize>,
}

/// Two-round coarse-to-fine rectification.
///
/// Round one rectifies the user target with `(p1, s1)`; round two rectifies
/// the coarse output with `(p2, s2)`. Both rounds use the initial target as
/// inversion reference, and the recorded passes are shared between them.
pub fn run_pipeline<B: Backend + ?Sized>(
    backend: &B,
    reference: &PixelImage,
    target: &PixelImage,
    cfg: &RectifyConfig,
    storage: &dyn CacheStorage,
    observer: &mut dyn Observer,
) -> Result<PipelineOutput> {
    let passes = SharedPasses::record(backend, reference, target, cfg, storage)?;
    run_rounds(backend, &passes, cfg, observer)
}

/// Both rounds of [`run_pipeline`] on passes recorded beforehand. `cfg` must
/// agree with the recording on `steps`, `sites`, `ir_eval_mode` and
/// `augmentations`.
pub fn run_rounds<B: Backend + ?Sized>(
    backend: &B,
    passes: &SharedPasses,
    cfg: &RectifyConfig,
    observer: &mut dyn Observer,
) -> Result<PipelineOutput> {
    cfg.validate(backend.site_count())?;
    passes.check(cfg)?;

    observer.round(1);
    let target_z0 = passes.ir.trajectory.start().clone();
    let shuffle = cfg.start_shuffle.map(|block_size| ShuffleSpec {
        block_size,
        seed: cfg.seed,
    });
    let coarse_z = passes.round(backend, cfg, &target_z0, cfg.p1, cfg.s1, shuffle, observer)?;
    let coarse = backend.decode_latent(&coarse_z)?;

    observer.round(2);
    let coarse_z0 = backend.encode_image(&coarse)?;
    let fine_z = passes.round(backend, cfg, &coarse_z0, cfg.p2, cfg.s2, None, observer)?;
    let image = backend.decode_latent(&fine_z)?;
    Ok(PipelineOutput {
        coarse,
        image,
        cache_entries: passes.cache_entries(),
    })
}
