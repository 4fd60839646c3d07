//! Run configuration: a flat `key = value` file, command-line overrides and
//! the validated manifest a run is started from.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use selfrect_core::attention::IndexMap;
use selfrect_core::backend::AttentionSite;
use selfrect_core::prep::{
    AugmentationSet, Transform, DEFAULT_GUIDED_NOISE, DEFAULT_IMAGE_BLOCK, DEFAULT_LATENT_BLOCK,
};
use selfrect_core::rectify::{IrEvalMode, RectifyConfig};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// User collage plus placement mask; the background is filled from the reference.
    Nonstationary,
    /// Target is a block shuffle of the reference.
    PatchShuffle,
    /// Target is the reference; its round-one start code is block shuffled.
    LatentShuffle,
    /// Target is a coarse layout image, lightly noised.
    Guided,
    /// Target is an edited photograph used as is.
    ImageEdit,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "nonstationary" => Mode::Nonstationary,
            "patch-shuffle" => Mode::PatchShuffle,
            "latent-shuffle" => Mode::LatentShuffle,
            "guided" => Mode::Guided,
            "image-edit" => Mode::ImageEdit,
            other => return Err(Error::Config(format!("mode: unknown mode '{other}'"))),
        })
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Nonstationary => "nonstationary",
            Mode::PatchShuffle => "patch-shuffle",
            Mode::LatentShuffle => "latent-shuffle",
            Mode::Guided => "guided",
            Mode::ImageEdit => "image-edit",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    StableDiffusion,
    /// Random miniature backbone; for trying the plumbing without weights.
    Stub,
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sd" => Ok(BackendKind::StableDiffusion),
            "stub" => Ok(BackendKind::Stub),
            other => Err(Error::Config(format!(
                "backend: expected 'sd' or 'stub', got '{other}'"
            ))),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::StableDiffusion => "sd",
            BackendKind::Stub => "stub",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CachePolicy {
    Auto,
    Memory,
    Disk,
}

impl FromStr for CachePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(CachePolicy::Auto),
            "memory" => Ok(CachePolicy::Memory),
            "disk" => Ok(CachePolicy::Disk),
            other => Err(Error::Config(format!(
                "cache: expected auto, memory or disk, got '{other}'"
            ))),
        }
    }
}

impl fmt::Display for CachePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CachePolicy::Auto => "auto",
            CachePolicy::Memory => "memory",
            CachePolicy::Disk => "disk",
        })
    }
}

/// Parameter swept along one axis of a sweep grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    P1,
    P2,
    S1,
    S2,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::P1 => "p1",
            SweepAxis::P2 => "p2",
            SweepAxis::S1 => "s1",
            SweepAxis::S2 => "s2",
        }
    }

    pub fn apply(self, cfg: &mut RectifyConfig, v: usize) {
        match self {
            SweepAxis::P1 => cfg.p1 = v,
            SweepAxis::P2 => cfg.p2 = v,
            SweepAxis::S1 => cfg.s1 = v,
            SweepAxis::S2 => cfg.s2 = v,
        }
    }
}

/// One cell of a sweep: row, column and the parameter values it sets.
pub type SweepCell = (usize, usize, Vec<(SweepAxis, usize)>);

/// `p1=0,10,20/p2=0,5`: rows over the first axis, columns over the second.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepSpec {
    pub rows: (SweepAxis, Vec<usize>),
    pub cols: Option<(SweepAxis, Vec<usize>)>,
}

impl SweepSpec {
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::new();
        for (r, &rv) in self.rows.1.iter().enumerate() {
            match &self.cols {
                Some((axis, cols)) => {
                    for (c, &cv) in cols.iter().enumerate() {
                        out.push((r, c, vec![(self.rows.0, rv), (*axis, cv)]));
                    }
                }
                None => out.push((r, 0, vec![(self.rows.0, rv)])),
            }
        }
        out
    }
}

impl FromStr for SweepSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let axis = |part: &str| -> Result<(SweepAxis, Vec<usize>)> {
            let (name, values) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("sweep: expected axis=v1,v2,... in '{part}'")))?;
            let axis = match name.trim() {
                "p1" => SweepAxis::P1,
                "p2" => SweepAxis::P2,
                "s1" => SweepAxis::S1,
                "s2" => SweepAxis::S2,
                other => return Err(Error::Config(format!("sweep: unknown axis '{other}'"))),
            };
            let values = values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("sweep: bad value '{v}'")))
                })
                .collect::<Result<Vec<_>>>()?;
            if values.is_empty() {
                return Err(Error::Config("sweep: empty axis".into()));
            }
            Ok((axis, values))
        };
        let mut parts = s.split('/');
        let rows = axis(parts.next().unwrap_or(""))?;
        let cols = parts.next().map(axis).transpose()?;
        if parts.next().is_some() {
            return Err(Error::Config("sweep: at most two axes".into()));
        }
        if let Some((c, _)) = &cols {
            if *c == rows.0 {
                return Err(Error::Config("sweep: both axes are the same parameter".into()));
            }
        }
        Ok(Self { rows, cols })
    }
}

impl fmt::Display for SweepSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let axis = |(a, v): &(SweepAxis, Vec<usize>)| {
            format!(
                "{}={}",
                a.name(),
                v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
            )
        };
        write!(f, "{}", axis(&self.rows))?;
        if let Some(c) = &self.cols {
            write!(f, "/{}", axis(c))?;
        }
        Ok(())
    }
}

/// Everything a run needs. Built from defaults, then a config file, then flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub reference: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub out: PathBuf,
    pub save_intermediates: bool,
    pub rectify: RectifyConfig,
    pub patch_block: usize,
    pub latent_block: usize,
    pub guided_noise: f32,
    pub backend: BackendKind,
    pub weights: Option<PathBuf>,
    pub cache: CachePolicy,
    pub cache_budget_mb: Option<usize>,
    pub sweep: Option<SweepSpec>,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Nonstationary,
            reference: None,
            target: None,
            mask: None,
            out: PathBuf::from("out"),
            save_intermediates: false,
            rectify: RectifyConfig::default(),
            patch_block: DEFAULT_IMAGE_BLOCK,
            latent_block: DEFAULT_LATENT_BLOCK,
            guided_noise: DEFAULT_GUIDED_NOISE,
            backend: BackendKind::StableDiffusion,
            weights: None,
            cache: CachePolicy::Auto,
            cache_budget_mb: None,
            sweep: None,
            jobs: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected a boolean, got '{other}'"))),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

/// `10-15`, `10,11,12` or a mix such as `0,10-15`.
pub fn parse_sites(value: &str) -> Result<Vec<AttentionSite>> {
    let mut out = Vec::new();
    for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (parse("sites", a)?, parse("sites", b)?);
                if a > b {
                    return Err(Error::Config(format!("sites: empty range '{part}'")));
                }
                out.extend((a..=b).map(AttentionSite));
            }
            None => out.push(AttentionSite(parse("sites", part)?)),
        }
    }
    Ok(out)
}

pub fn format_sites(sites: &[AttentionSite]) -> String {
    sites.iter().map(|s| s.0.to_string()).collect::<Vec<_>>().join(",")
}

pub fn parse_augmentations(value: &str) -> Result<AugmentationSet> {
    let transforms = value
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty() && *p != "none")
        .map(|p| {
            if p == "rotations" {
                Ok(AugmentationSet::rotations().transforms)
            } else {
                p.parse::<Transform>()
                    .map(|t| vec![t])
                    .map_err(|e| Error::Config(format!("aug: {e}")))
            }
        })
        .collect::<Result<Vec<_>>>()?
        .concat();
    Ok(AugmentationSet::new(transforms))
}

impl RunConfig {
    /// Sets one field by its config-file key (dashes and underscores are interchangeable).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        let r = &mut self.rectify;
        match key.as_str() {
            "mode" => self.mode = parse(&key, value)?,
            "reference" => self.reference = optional_path(value),
            "target" => self.target = optional_path(value),
            "mask" => self.mask = optional_path(value),
            "out" => self.out = PathBuf::from(value.trim()),
            "save-intermediates" => self.save_intermediates = parse_bool(&key, value)?,
            "steps" => r.steps = parse(&key, value)?,
            "p1" => r.p1 = parse(&key, value)?,
            "p2" => r.p2 = parse(&key, value)?,
            "s1" => r.s1 = parse(&key, value)?,
            "s2" => r.s2 = parse(&key, value)?,
            "sites" => r.sites = parse_sites(value)?,
            "ir-eval" => {
                r.ir_eval_mode = value
                    .trim()
                    .parse::<IrEvalMode>()
                    .map_err(|e| Error::Config(e.to_string()))?
            }
            "offset" => {
                r.inversion_map = match value.trim() {
                    "" | "none" | "reverse" => IndexMap::Reverse,
                    "same" => IndexMap::Same,
                    v => IndexMap::Offset(parse(&key, v)?),
                }
            }
            "aug" => r.augmentations = parse_augmentations(value)?,
            "seed" => r.seed = parse(&key, value)?,
            "patch-block" => self.patch_block = parse(&key, value)?,
            "latent-block" => self.latent_block = parse(&key, value)?,
            "guided-noise" => self.guided_noise = parse(&key, value)?,
            "backend" => self.backend = parse(&key, value)?,
            "weights" => self.weights = optional_path(value),
            "cache" => self.cache = parse(&key, value)?,
            "cache-budget-mb" => {
                self.cache_budget_mb = match value.trim() {
                    "" | "auto" => None,
                    v => Some(parse(&key, v)?),
                }
            }
            "sweep" => {
                self.sweep = match value.trim() {
                    "" | "none" => None,
                    v => Some(v.parse()?),
                }
            }
            "jobs" => self.jobs = parse(&key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies a `key = value` document. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Every field as `(key, value)`, in a form [`RunConfig::set`] reads back.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let r = &self.rectify;
        let offset = match r.inversion_map {
            IndexMap::Reverse => "reverse".to_string(),
            IndexMap::Same => "same".to_string(),
            IndexMap::Offset(k) => k.to_string(),
        };
        let aug = r
            .augmentations
            .transforms
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",");
        [
            ("mode", self.mode.to_string()),
            ("reference", path(&self.reference)),
            ("target", path(&self.target)),
            ("mask", path(&self.mask)),
            ("out", self.out.display().to_string()),
            ("save-intermediates", self.save_intermediates.to_string()),
            ("steps", r.steps.to_string()),
            ("p1", r.p1.to_string()),
            ("p2", r.p2.to_string()),
            ("s1", r.s1.to_string()),
            ("s2", r.s2.to_string()),
            ("sites", format_sites(&r.sites)),
            ("ir-eval", r.ir_eval_mode.to_string()),
            ("offset", offset),
            ("aug", if aug.is_empty() { "none".into() } else { aug }),
            ("seed", r.seed.to_string()),
            ("patch-block", self.patch_block.to_string()),
            ("latent-block", self.latent_block.to_string()),
            ("guided-noise", self.guided_noise.to_string()),
            ("backend", self.backend.to_string()),
            ("weights", path(&self.weights)),
            ("cache", self.cache.to_string()),
            (
                "cache-budget-mb",
                self.cache_budget_mb
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| "auto".into()),
            ),
            (
                "sweep",
                self.sweep
                    .as_ref()
                    .map(ToString::to_string)
                    .unwrap_or_else(|| "none".into()),
            ),
            ("jobs", self.jobs.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// The rectification settings actually used, including mode-implied ones.
    pub fn effective_rectify(&self) -> RectifyConfig {
        let mut r = self.rectify.clone();
        if self.mode == Mode::LatentShuffle {
            r.start_shuffle = Some(self.latent_block);
        }
        r
    }

    /// Checks everything that does not need the model: required inputs per
    /// mode, file existence and parameter bounds.
    pub fn validate(&self, site_count: usize) -> Result<()> {
        let need = |p: &Option<PathBuf>, what: &str| -> Result<()> {
            match p {
                None => Err(Error::Config(format!("{what}: required in {} mode", self.mode))),
                Some(p) if !p.is_file() => Err(Error::Config(format!("{what}: {} does not exist", p.display()))),
                Some(_) => Ok(()),
            }
        };
        need(&self.reference, "reference")?;
        match self.mode {
            Mode::Nonstationary | Mode::ImageEdit => {
                need(&self.target, "target")?;
                need(&self.mask, "mask")?;
            }
            Mode::Guided => need(&self.target, "target")?,
            Mode::PatchShuffle | Mode::LatentShuffle => {}
        }
        if self.patch_block == 0 || self.latent_block == 0 {
            return Err(Error::Config("patch-block / latent-block: must be positive".into()));
        }
        if self.guided_noise.is_nan() || self.guided_noise < 0.0 {
            return Err(Error::Config("guided-noise: must be non-negative".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs: must be at least 1".into()));
        }
        if let Some(s) = &self.sweep {
            for (axis, values) in std::iter::once(&s.rows).chain(s.cols.as_ref()) {
                if let Some(v) = values.iter().find(|v| **v > self.rectify.steps) {
                    return Err(Error::Config(format!(
                        "sweep: {}={v} exceeds step count {}",
                        axis.name(),
                        self.rectify.steps
                    )));
                }
            }
        }
        self.effective_rectify().validate(site_count).map_err(Error::from)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text(
            "# comment\nmode = latent-shuffle\nreference = a.png\np1 = 30\nsites = 8-9,12\naug = hflip, rot-45\n\
             offset = -2\nsweep = s1=50,20/s2=5,0\ncache_budget_mb = 512\n",
        )
        .unwrap();
        assert_eq!(c.rectify.p1, 30);
        assert_eq!(
            c.rectify.sites,
            vec![AttentionSite(8), AttentionSite(9), AttentionSite(12)]
        );
        assert_eq!(c.rectify.inversion_map, IndexMap::Offset(-2));
        assert_eq!(c.rectify.augmentations.len(), 2);
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors_name_the_key_and_line() {
        let mut c = RunConfig::default();
        let e = c.apply_text("steps = 50\np1 = many\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("p1"), "{e}");
        assert!(c.set("colour", "red").is_err());
    }

    #[test]
    fn sweep_cells_cover_the_grid() {
        let s: SweepSpec = "p1=0,20,30/p2=0,5".parse().unwrap();
        let cells = s.cells();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[5], (2, 1, vec![(SweepAxis::P1, 30), (SweepAxis::P2, 5)]));
        assert!("p1=1/p1=2".parse::<SweepSpec>().is_err());
        assert!("q=1".parse::<SweepSpec>().is_err());
    }

    #[test]
    fn rotations_shorthand() {
        assert_eq!(parse_augmentations("rotations").unwrap(), AugmentationSet::rotations());
        assert!(parse_augmentations("none").unwrap().is_empty());
    }
}
