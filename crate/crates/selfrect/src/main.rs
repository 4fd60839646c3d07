use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use selfrect::config::RunConfig;
use selfrect::run;

/// Self-rectified texture synthesis with Stable Diffusion.
///
/// Settings come from defaults, then `--config`, then the flags below.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    /// key = value file with any of the settings below.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Repeat the run described by a run.json record and compare outputs.
    #[arg(long, conflicts_with = "config")]
    replay: Option<PathBuf>,

    /// nonstationary, patch-shuffle, latent-shuffle, guided or image-edit.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Collage, layout or edited image, depending on the mode.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Greyscale PNG; bright pixels mark placed (or edited) content.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    save_intermediates: bool,

    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    p1: Option<usize>,
    #[arg(long)]
    p2: Option<usize>,
    #[arg(long)]
    s1: Option<usize>,
    #[arg(long)]
    s2: Option<usize>,
    /// Attention sites, e.g. `10-15` or `0,1`.
    #[arg(long)]
    sites: Option<String>,
    /// Reference augmentations: `rotations`, or a list like `hflip,rot90`.
    #[arg(long)]
    aug: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Block edge in pixels for patch-shuffle.
    #[arg(long)]
    patch_block: Option<usize>,
    /// Block edge in latent cells for latent-shuffle.
    #[arg(long)]
    latent_block: Option<usize>,
    /// Uniform noise amplitude added to a guided layout.
    #[arg(long)]
    guided_noise: Option<f32>,
    /// literal or native-cache.
    #[arg(long)]
    ir_eval: Option<String>,
    /// Source-step mapping for the structure-preserving inversion:
    /// reverse, same, or an integer offset.
    #[arg(long, allow_hyphen_values = true)]
    offset: Option<String>,

    /// Grid such as `p1=0,10,20,30` or `s1=50,20,10,0/s2=5,0`.
    #[arg(long)]
    sweep: Option<String>,
    /// Sweep cells run in parallel.
    #[arg(long)]
    jobs: Option<usize>,

    /// sd or stub.
    #[arg(long)]
    backend: Option<String>,
    /// Diffusers-layout model directory (default: $SELFRECT_WEIGHTS).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// auto, memory or disk.
    #[arg(long)]
    cache: Option<String>,
    #[arg(long)]
    cache_budget_mb: Option<usize>,
}

impl Cli {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let num = |v: Option<usize>| v.map(|v| v.to_string());
        [
            ("mode", self.mode.clone()),
            ("reference", path(&self.reference)),
            ("target", path(&self.target)),
            ("mask", path(&self.mask)),
            ("out", path(&self.out)),
            (
                "save-intermediates",
                self.save_intermediates.then(|| "true".to_string()),
            ),
            ("steps", num(self.steps)),
            ("p1", num(self.p1)),
            ("p2", num(self.p2)),
            ("s1", num(self.s1)),
            ("s2", num(self.s2)),
            ("sites", self.sites.clone()),
            ("aug", self.aug.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("patch-block", num(self.patch_block)),
            ("latent-block", num(self.latent_block)),
            ("guided-noise", self.guided_noise.map(|v| v.to_string())),
            ("ir-eval", self.ir_eval.clone()),
            ("offset", self.offset.clone()),
            ("sweep", self.sweep.clone()),
            ("jobs", num(self.jobs)),
            ("backend", self.backend.clone()),
            ("weights", path(&self.weights)),
            ("cache", self.cache.clone()),
            ("cache-budget-mb", num(self.cache_budget_mb)),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    if let Some(record) = &cli.replay {
        let (new, same) =
            run::replay(record, cli.out.clone()).with_context(|| format!("replaying {}", record.display()))?;
        println!("output sha256 {}", new.output_sha256);
        if !same {
            anyhow::bail!("replayed output differs from the recorded one");
        }
        println!("replay matches the record");
        return Ok(());
    }

    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)
            .with_context(|| format!("reading {}", path.display()))?;
    }
    for (k, v) in cli.overrides() {
        cfg.set(k, &v)?;
    }
    let record = run::run(&cfg)?;
    println!(
        "done in {:.1} s, output sha256 {}",
        record.timings_s.get("total").copied().unwrap_or_default(),
        record.output_sha256
    );
    Ok(())
}
