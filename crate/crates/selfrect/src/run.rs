//! One end-to-end run: inputs, backend, pipeline, outputs and the run record.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use selfrect_core::attention::Phase;
use selfrect_core::backend::Backend;
use selfrect_core::image::{LatentImage, PixelImage};
use selfrect_core::prep::{fill_background, patch_shuffle, prepare_guided_layout, ShuffleSpec};
use selfrect_core::rectify::{run_rounds, Observer, PipelineOutput, SharedPasses};
use selfrect_core::stub::StubBackend;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{BackendKind, CachePolicy, Mode, RunConfig};
use crate::io::{load_mask, load_png, save_png, strip, to_rgb8};
use crate::sd::{weights_dir_from_env, SdBackend, WEIGHTS_ENV};
use crate::spill::{available_memory, Residency, SpillStorage};
use crate::{Error, Result};

pub const RECORD_FORMAT: u32 = 1;
pub const RECORD_FILE: &str = "run.json";
pub const OUTPUT_FILE: &str = "output.png";

/// Grid indices between saved intermediate frames.
pub const INTERMEDIATE_INTERVAL: usize = 10;

/// Seed of the random stub backbone.
const STUB_SEED: u64 = 0;

pub type DynBackend = Box<dyn Backend + Send + Sync>;

/// Reference and prepared target, ready for the pipeline.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub reference: PixelImage,
    pub target: PixelImage,
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("{what}: not set")))
}

/// Loads the images and builds the target the chosen mode asks for.
pub fn prepare_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let reference = load_png(required(&cfg.reference, "reference")?)?;
    let seed = cfg.rectify.seed;
    let target = match cfg.mode {
        Mode::Nonstationary => {
            let canvas = load_png(required(&cfg.target, "target")?)?;
            let mask = load_mask(required(&cfg.mask, "mask")?)?;
            fill_background(&canvas, &mask, &reference, seed)?
        }
        Mode::PatchShuffle => patch_shuffle(
            &reference,
            ShuffleSpec {
                block_size: cfg.patch_block,
                seed,
            },
        )?,
        Mode::LatentShuffle => reference.clone(),
        Mode::Guided => prepare_guided_layout(&load_png(required(&cfg.target, "target")?)?, cfg.guided_noise, seed)?,
        Mode::ImageEdit => {
            let target = load_png(required(&cfg.target, "target")?)?;
            let mask = load_mask(required(&cfg.mask, "mask")?)?;
            if (mask.height(), mask.width()) != (target.height(), target.width()) {
                return Err(Error::Config(format!(
                    "mask: {}x{} does not match the {}x{} target",
                    mask.height(),
                    mask.width(),
                    target.height(),
                    target.width()
                )));
            }
            if mask.placed_count() == 0 {
                return Err(Error::Config("mask: marks no edited region".into()));
            }
            target
        }
    };
    Ok(Inputs { reference, target })
}

pub fn load_backend(cfg: &RunConfig) -> Result<DynBackend> {
    match cfg.backend {
        BackendKind::Stub => Ok(Box::new(StubBackend::new(STUB_SEED))),
        BackendKind::StableDiffusion => {
            let dir = cfg
                .weights
                .clone()
                .or_else(weights_dir_from_env)
                .ok_or_else(|| Error::Config(format!("weights: pass --weights or set {WEIGHTS_ENV}")))?;
            log::info!("loading Stable Diffusion from {}", dir.display());
            Ok(Box::new(SdBackend::load(&dir)?))
        }
    }
}

/// Feature storage under `dir` following the cache policy.
pub fn storage_for(cfg: &RunConfig, dir: &Path) -> SpillStorage {
    let residency = match cfg.cache {
        CachePolicy::Memory => Residency::Memory,
        CachePolicy::Disk => Residency::Disk,
        CachePolicy::Auto => Residency::Auto {
            budget_bytes: cfg
                .cache_budget_mb
                .map(|mb| mb << 20)
                // leave room for the model and the working set
                .unwrap_or_else(|| available_memory().map_or(2 << 30, |m| m / 2)),
        },
    };
    SpillStorage::new(dir, residency)
}

/// Hex SHA-256 of the 8-bit RGB pixels.
pub fn image_digest(img: &PixelImage) -> String {
    format!("{:x}", Sha256::digest(to_rgb8(img).as_raw()))
}

/// Logs progress and optionally keeps decoded latents every
/// [`INTERMEDIATE_INTERVAL`] grid indices.
pub struct Progress<'a> {
    backend: &'a dyn Backend,
    steps: usize,
    keep: bool,
    round: usize,
    /// Frames per (round, phase) in visiting order.
    pub frames: BTreeMap<(usize, Phase), Vec<PixelImage>>,
    pub error: Option<Error>,
}

impl<'a> Progress<'a> {
    pub fn new(backend: &'a dyn Backend, steps: usize, keep: bool) -> Self {
        Self {
            backend,
            steps,
            keep,
            round: 0,
            frames: BTreeMap::new(),
            error: None,
        }
    }

    /// Writes one strip per (round, phase) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for ((round, phase), frames) in &self.frames {
            let name = match phase {
                Phase::Inversion => "inversion",
                Phase::Sampling => "sampling",
            };
            let path = dir.join(format!("round{round}-{name}.png"));
            save_png(&strip(frames, 4), &path)?;
            written.push(path);
        }
        Ok(written)
    }
}

impl Observer for Progress<'_> {
    fn round(&mut self, round: usize) {
        self.round = round;
        log::info!("round {round}");
    }

    fn latent(&mut self, phase: Phase, t: usize, z: &LatentImage) {
        if !self.keep || self.error.is_some() || !(t.is_multiple_of(INTERMEDIATE_INTERVAL) || t == self.steps) {
            return;
        }
        match self.backend.decode_latent(z) {
            Ok(img) => self.frames.entry((self.round, phase)).or_default().push(img),
            Err(e) => self.error = Some(e.into()),
        }
    }

    fn step(&mut self, phase: Phase, t: usize, injected_rows: Option<usize>) {
        log::debug!("round {} {phase:?} t={t} injected rows {injected_rows:?}", self.round);
    }
}

/// Machine-readable account of a run, sufficient to repeat it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format: u32,
    pub tool_version: String,
    pub started_unix: u64,
    /// Every configuration key; feeding these back reproduces the run.
    pub config: BTreeMap<String, String>,
    pub weights: Option<String>,
    pub threads: usize,
    pub timings_s: BTreeMap<String, f64>,
    pub cache_entries: BTreeMap<String, usize>,
    pub cache_resident_bytes: usize,
    pub cache_spilled: bool,
    pub output_sha256: String,
    pub outputs: Vec<String>,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let record: Self = serde_json::from_str(&text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        if record.format != RECORD_FORMAT {
            return Err(Error::Config(format!(
                "{}: record format {} (expected {RECORD_FORMAT})",
                path.display(),
                record.format
            )));
        }
        Ok(record)
    }

    pub fn to_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (k, v) in &self.config {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

fn absolute(p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if let Ok(abs) = std::fs::canonicalize(&*path) {
            *path = abs;
        }
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Checks the configuration, loads the backend and runs.
pub fn run(cfg: &RunConfig) -> Result<RunRecord> {
    // bounds that do not depend on the backbone first, so typos fail fast
    cfg.validate(usize::MAX)?;
    let t = Instant::now();
    let backend = load_backend(cfg)?;
    let load = t.elapsed().as_secs_f64();
    run_with_backend(cfg, backend.as_ref(), load)
}

/// Runs on an already loaded backend. `load_s` is recorded as the load time.
pub fn run_with_backend(cfg: &RunConfig, backend: &(dyn Backend + Send + Sync), load_s: f64) -> Result<RunRecord> {
    let mut cfg = cfg.clone();
    cfg.validate(backend.site_count())?;
    absolute(&mut cfg.reference);
    absolute(&mut cfg.target);
    absolute(&mut cfg.mask);
    if cfg.backend == BackendKind::StableDiffusion && cfg.weights.is_none() {
        cfg.weights = weights_dir_from_env();
    }
    absolute(&mut cfg.weights);
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());

    let out = cfg.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;

    let t = Instant::now();
    let inputs = prepare_inputs(&cfg)?;
    let prepare = t.elapsed().as_secs_f64();
    let mut outputs = vec![save(&inputs.target, &out, "target.png")?];

    if cfg.sweep.is_some() {
        let cache_dir = out.join("cache");
        let storage = storage_for(&cfg, &cache_dir);
        let t = Instant::now();
        let report = crate::sweep::run_sweep(&cfg, backend, &inputs, &storage)?;
        let elapsed = t.elapsed().as_secs_f64();
        let _ = std::fs::remove_dir_all(&cache_dir);
        outputs.extend(report.outputs.iter().map(|p| p.display().to_string()));
        let record = RunRecord {
            format: RECORD_FORMAT,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started_unix,
            config: cfg.to_pairs().into_iter().collect(),
            weights: cfg.weights.as_ref().map(|p| p.display().to_string()),
            threads: cfg.jobs,
            timings_s: BTreeMap::from([
                ("load".into(), load_s),
                ("prepare".into(), prepare),
                ("sweep".into(), elapsed),
                ("total".into(), load_s + started.elapsed().as_secs_f64()),
            ]),
            cache_entries: report.cache_entries.clone(),
            cache_resident_bytes: storage.resident_bytes(),
            cache_spilled: storage.spilled(),
            output_sha256: image_digest(&report.contact_sheet),
            outputs,
        };
        write_json(&record, &out.join(RECORD_FILE))?;
        return if report.failures() > 0 {
            Err(Error::Config(format!(
                "{} of {} sweep cells failed; see {}",
                report.failures(),
                report.cells.len(),
                out.join("sweep").join(crate::sweep::SWEEP_FILE).display()
            )))
        } else {
            Ok(record)
        };
    }

    let cache_dir = out.join("cache");
    let storage = storage_for(&cfg, &cache_dir);
    let rectify = cfg.effective_rectify();
    let mut progress = Progress::new(backend, rectify.steps, cfg.save_intermediates);

    let t = Instant::now();
    let passes = SharedPasses::record(backend, &inputs.reference, &inputs.target, &rectify, &storage)?;
    let record_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let result: PipelineOutput = run_rounds(backend, &passes, &rectify, &mut progress)?;
    let rounds_s = t.elapsed().as_secs_f64();
    drop(passes);
    let _ = std::fs::remove_dir_all(&cache_dir);

    if let Some(e) = progress.error.take() {
        return Err(e);
    }
    outputs.push(save(&result.coarse, &out, "coarse.png")?);
    outputs.push(save(&result.image, &out, OUTPUT_FILE)?);
    for p in progress.save(&out.join("intermediates"))? {
        outputs.push(p.display().to_string());
    }

    let record = RunRecord {
        format: RECORD_FORMAT,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        started_unix,
        config: cfg.to_pairs().into_iter().collect(),
        weights: cfg.weights.as_ref().map(|p| p.display().to_string()),
        threads: 1,
        timings_s: BTreeMap::from([
            ("load".into(), load_s),
            ("prepare".into(), prepare),
            ("record".into(), record_s),
            ("rounds".into(), rounds_s),
            ("total".into(), load_s + started.elapsed().as_secs_f64()),
        ]),
        cache_entries: result.cache_entries.clone(),
        cache_resident_bytes: storage.resident_bytes(),
        cache_spilled: storage.spilled(),
        output_sha256: image_digest(&result.image),
        outputs,
    };
    write_json(&record, &out.join(RECORD_FILE))?;
    log::info!("wrote {}", out.join(OUTPUT_FILE).display());
    Ok(record)
}

fn save(img: &PixelImage, dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    save_png(img, &path)?;
    Ok(path.display().to_string())
}

/// Repeats the run described by a record, writing into `out` (or the
/// recorded directory). Returns the new record and whether the output
/// matches the recorded digest.
pub fn replay(record_path: &Path, out: Option<PathBuf>) -> Result<(RunRecord, bool)> {
    let old = RunRecord::load(record_path)?;
    let mut cfg = old.to_config()?;
    if let Some(out) = out {
        cfg.out = out;
    }
    let new = run(&cfg)?;
    let same = new.output_sha256 == old.output_sha256;
    Ok((new, same))
}
