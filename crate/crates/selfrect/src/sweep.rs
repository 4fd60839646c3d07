//! Parameter sweeps over one or two of `p1`, `p2`, `s1`, `s2`.
//!
//! The recorded passes are shared by every cell. Each cell is a pure function
//! of its parameters, so the result does not depend on `jobs` or the order in
//! which cells finish.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use selfrect_core::backend::Backend;
use selfrect_core::image::PixelImage;
use selfrect_core::rectify::{run_rounds, NoObserver, SharedPasses};
use serde::Serialize;

use crate::config::{RunConfig, SweepAxis};
use crate::io::{grid, save_png};
use crate::run::Inputs;
use crate::spill::SpillStorage;
use crate::{Error, Result};

pub const SWEEP_FILE: &str = "sweep.json";
pub const CONTACT_SHEET: &str = "contact.png";

#[derive(Debug, Clone)]
pub struct CellResult {
    pub row: usize,
    pub col: usize,
    pub params: Vec<(SweepAxis, usize)>,
    pub image: std::result::Result<PixelImage, String>,
}

impl CellResult {
    pub fn name(&self) -> String {
        self.params
            .iter()
            .map(|(a, v)| format!("{}-{v}", a.name()))
            .collect::<Vec<_>>()
            .join("_")
    }
}

#[derive(Debug)]
pub struct SweepReport {
    /// Row-major.
    pub cells: Vec<CellResult>,
    pub contact_sheet: PixelImage,
    pub cache_entries: BTreeMap<String, usize>,
    pub outputs: Vec<PathBuf>,
}

impl SweepReport {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.image.is_err()).count()
    }
}

#[derive(Serialize)]
struct CellSummary {
    row: usize,
    col: usize,
    params: BTreeMap<&'static str, usize>,
    file: Option<String>,
    error: Option<String>,
}

/// Runs every cell of `cfg.sweep` on up to `cfg.jobs` threads and writes
/// per-cell images, a contact sheet and a summary into `cfg.out/sweep`.
pub fn run_sweep(
    cfg: &RunConfig,
    backend: &(dyn Backend + Send + Sync),
    inputs: &Inputs,
    storage: &SpillStorage,
) -> Result<SweepReport> {
    let spec = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("sweep: not set".into()))?;
    let base = cfg.effective_rectify();
    let passes = SharedPasses::record(backend, &inputs.reference, &inputs.target, &base, storage)?;

    let cells = spec.cells();
    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; cells.len()]);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some((row, col, params)) = cells.get(i) else { break };
        let mut rc = base.clone();
        for &(axis, v) in params {
            axis.apply(&mut rc, v);
        }
        log::info!("sweep cell {} of {}", i + 1, cells.len());
        let image = run_rounds(backend, &passes, &rc, &mut NoObserver)
            .map(|o| o.image)
            .map_err(|e| e.to_string());
        if let Err(e) = &image {
            log::warn!("sweep cell {params:?} failed: {e}");
        }
        done.lock().expect("no panics while holding the lock")[i] = Some(CellResult {
            row: *row,
            col: *col,
            params: params.clone(),
            image,
        });
    };
    let jobs = cfg.jobs.clamp(1, cells.len().max(1));
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }
    let cells: Vec<CellResult> = done
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|c| c.expect("every cell visited"))
        .collect();

    let dir = cfg.out.join("sweep");
    let mut outputs = Vec::new();
    let mut summary = Vec::new();
    for c in &cells {
        let file = match &c.image {
            Ok(img) => {
                let path = dir.join(format!("{}.png", c.name()));
                save_png(img, &path)?;
                outputs.push(path.clone());
                Some(path.display().to_string())
            }
            Err(_) => None,
        };
        summary.push(CellSummary {
            row: c.row,
            col: c.col,
            params: c.params.iter().map(|(a, v)| (a.name(), *v)).collect(),
            file,
            error: c.image.as_ref().err().cloned(),
        });
    }
    let nrows = cells.iter().map(|c| c.row + 1).max().unwrap_or(0);
    let ncols = cells.iter().map(|c| c.col + 1).max().unwrap_or(0);
    let mut rows: Vec<Vec<Option<&PixelImage>>> = vec![vec![None; ncols]; nrows];
    for c in &cells {
        rows[c.row][c.col] = c.image.as_ref().ok();
    }
    let contact_sheet = grid(&rows, 8);
    let sheet = dir.join(CONTACT_SHEET);
    save_png(&contact_sheet, &sheet)?;
    outputs.push(sheet);
    let path = dir.join(SWEEP_FILE);
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    outputs.push(path);

    Ok(SweepReport {
        cells,
        contact_sheet,
        cache_entries: passes.cache_entries(),
        outputs,
    })
}
