use std::path::{Path, PathBuf};
use std::process::Command;

use selfrect::config::{CachePolicy, Mode, RunConfig};
use selfrect::core::image::PixelImage;
use selfrect::core::prep::PlacementMask;
use selfrect::io::{load_png, save_mask, save_png};
use selfrect::run::{self, RunRecord, OUTPUT_FILE, RECORD_FILE};
use selfrect::sweep::CONTACT_SHEET;
use tempfile::TempDir;

const N: usize = 64;

fn texture() -> PixelImage {
    PixelImage::from_fn(N, N, |y, x| {
        let v = 0.5 + 0.4 * ((x as f32 * 0.4).sin() * (y as f32 * 0.25).cos());
        [v, 0.5 * v + 0.3, 1.0 - v]
    })
}

fn collage() -> PixelImage {
    PixelImage::from_fn(N, N, |y, x| {
        if (16..48).contains(&y) && x < 32 {
            [0.9, 0.2, 0.2]
        } else {
            [0.0; 3]
        }
    })
}

fn mask(h: usize, w: usize) -> PlacementMask {
    let placed = (0..h * w).map(|i| (16..48).contains(&(i / w)) && i % w < 32).collect();
    PlacementMask::new(h, w, placed).unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        save_png(&texture(), &dir.path().join("ref.png")).unwrap();
        save_png(&collage(), &dir.path().join("collage.png")).unwrap();
        save_mask(&mask(N, N), &dir.path().join("mask.png")).unwrap();
        save_mask(&mask(32, 32), &dir.path().join("small-mask.png")).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Stub-backed configuration writing to `out`.
    fn config(&self, out: &str) -> RunConfig {
        let mut c = RunConfig::default();
        c.apply_text(&format!(
            "backend = stub\nsites = 0,1\nsteps = 10\np1 = 4\np2 = 2\ns1 = 4\ns2 = 2\n\
             reference = {}\ntarget = {}\nmask = {}\nout = {}\n",
            self.path("ref.png").display(),
            self.path("collage.png").display(),
            self.path("mask.png").display(),
            self.path(out).display()
        ))
        .unwrap();
        c
    }
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_selfrect"));
    c.env("RUST_LOG", "warn").env_remove("SELFRECT_WEIGHTS");
    c
}

fn png_size(p: &Path) -> (usize, usize) {
    let img = load_png(p).unwrap();
    (img.height(), img.width())
}

#[test]
fn nonstationary_run_writes_outputs_and_record() {
    let f = Fixture::new();
    let mut cfg = f.config("run");
    cfg.rectify.steps = 50;
    cfg.save_intermediates = true;
    let record = run::run(&cfg).unwrap();
    let out = f.path("run");
    for name in ["target.png", "coarse.png", OUTPUT_FILE, RECORD_FILE] {
        assert!(out.join(name).is_file(), "{name}");
    }
    assert!(!out.join("cache").exists(), "scratch cache left behind");
    // frames at t = 0, 10, ..., 50 per round and phase
    let strip_width = 6 * N + 5 * 4;
    for name in [
        "round1-inversion",
        "round1-sampling",
        "round2-inversion",
        "round2-sampling",
    ] {
        assert_eq!(
            png_size(&out.join("intermediates").join(format!("{name}.png"))),
            (N, strip_width)
        );
    }
    assert_eq!(RunRecord::load(&out.join(RECORD_FILE)).unwrap(), record);
    assert_eq!(
        record.output_sha256,
        run::image_digest(&load_png(&out.join(OUTPUT_FILE)).unwrap())
    );
    assert_eq!(record.cache_entries["ref-inversion-0"], 2 * 51);
    for key in ["load", "prepare", "record", "rounds", "total"] {
        assert!(record.timings_s.contains_key(key), "{key}");
    }
    // the placed region of the target keeps the collage
    let target = load_png(&out.join("target.png")).unwrap();
    assert_eq!(
        target.pixel(20, 10),
        [0.9f32, 0.2, 0.2].map(|v| (v * 255.0).round() / 255.0)
    );
}

#[test]
fn replay_reproduces_the_output() {
    let f = Fixture::new();
    let mut cfg = f.config("first");
    cfg.mode = Mode::LatentShuffle;
    cfg.rectify.seed = 3;
    let record = run::run(&cfg).unwrap();

    let status = bin()
        .arg("--replay")
        .arg(f.path("first").join(RECORD_FILE))
        .arg("--out")
        .arg(f.path("second"))
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(String::from_utf8_lossy(&status.stdout).contains("replay matches"));
    let again = RunRecord::load(&f.path("second").join(RECORD_FILE)).unwrap();
    assert_eq!(again.output_sha256, record.output_sha256);
    assert_eq!(again.config["mode"], "latent-shuffle");
}

#[test]
fn cli_flags_override_the_config_file() {
    let f = Fixture::new();
    let cfg = f.config("from-file");
    std::fs::write(f.path("run.conf"), cfg.to_text()).unwrap();
    let out = bin()
        .arg("--config")
        .arg(f.path("run.conf"))
        .args([
            "--mode",
            "patch-shuffle",
            "--p1",
            "3",
            "--offset",
            "-1",
            "--cache",
            "disk",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let record = RunRecord::load(&f.path("from-file").join(RECORD_FILE)).unwrap();
    assert_eq!(record.config["mode"], "patch-shuffle");
    assert_eq!(record.config["p1"], "3");
    assert_eq!(record.config["p2"], "2");
    assert_eq!(record.config["offset"], "-1");
    assert!(record.cache_spilled);
    assert_eq!(record.cache_resident_bytes, 0);
}

#[test]
fn bad_parameters_fail_before_loading_a_model() {
    let f = Fixture::new();
    // the default backend needs weights that are not there; the error must
    // still be about p1
    let out = bin()
        .arg("--reference")
        .arg(f.path("ref.png"))
        .args(["--mode", "patch-shuffle", "--steps", "50", "--p1", "60"])
        .arg("--out")
        .arg(f.path("never"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("p1"), "{err}");
    assert!(!err.contains("weights"), "{err}");
    assert!(!f.path("never").exists());

    let out = bin().args(["--mode", "collage"]).output().unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("mode"));
}

#[test]
fn missing_inputs_are_named() {
    let f = Fixture::new();
    let mut cfg = f.config("x");
    cfg.mask = None;
    let err = run::run(&cfg).unwrap_err().to_string();
    assert!(err.contains("mask") && err.contains("nonstationary"), "{err}");
    cfg.mask = Some(f.path("nope.png"));
    let err = run::run(&cfg).unwrap_err().to_string();
    assert!(err.contains("does not exist"), "{err}");
    cfg.mode = Mode::Guided;
    cfg.target = None;
    assert!(run::run(&cfg).unwrap_err().to_string().contains("target"));
}

#[test]
fn image_edit_checks_the_mask() {
    let f = Fixture::new();
    let mut cfg = f.config("edit");
    cfg.mode = Mode::ImageEdit;
    cfg.mask = Some(f.path("small-mask.png"));
    let err = run::run(&cfg).unwrap_err().to_string();
    assert!(err.contains("mask") && err.contains("32x32"), "{err}");
    cfg.mask = Some(f.path("mask.png"));
    run::run(&cfg).unwrap();
    // the edited photograph is used unchanged
    assert_eq!(
        load_png(&f.path("edit/target.png")).unwrap(),
        load_png(&f.path("collage.png")).unwrap()
    );
}

#[test]
fn sweep_results_do_not_depend_on_jobs() {
    let f = Fixture::new();
    let mut serial = f.config("serial");
    serial.sweep = Some("p1=0,5,10/s1=10,0".parse().unwrap());
    let a = run::run(&serial).unwrap();
    let mut parallel = serial.clone();
    parallel.out = f.path("parallel");
    parallel.jobs = 3;
    let b = run::run(&parallel).unwrap();
    assert_eq!(a.output_sha256, b.output_sha256);
    for cell in ["p1-0_s1-10", "p1-5_s1-0", "p1-10_s1-10"] {
        let name = format!("{cell}.png");
        assert_eq!(
            load_png(&f.path("serial/sweep").join(&name)).unwrap(),
            load_png(&f.path("parallel/sweep").join(&name)).unwrap()
        );
    }
    assert_eq!(
        png_size(&f.path("serial/sweep").join(CONTACT_SHEET)),
        (3 * N + 2 * 8, 2 * N + 8)
    );
    // each sweep cell equals a single run with those parameters
    let mut single = f.config("single");
    single.rectify.p1 = 5;
    single.rectify.s1 = 0;
    run::run(&single).unwrap();
    assert_eq!(
        load_png(&f.path("single").join(OUTPUT_FILE)).unwrap(),
        load_png(&f.path("serial/sweep/p1-5_s1-0.png")).unwrap()
    );
}

#[test]
fn cache_policies_agree() {
    let f = Fixture::new();
    let mut digests = Vec::new();
    for (i, (policy, budget)) in [
        (CachePolicy::Memory, None),
        (CachePolicy::Disk, None),
        (CachePolicy::Auto, Some(0)),
    ]
    .into_iter()
    .enumerate()
    {
        let mut cfg = f.config(&format!("cache{i}"));
        cfg.cache = policy;
        cfg.cache_budget_mb = budget;
        digests.push(run::run(&cfg).unwrap().output_sha256);
    }
    assert!(digests.windows(2).all(|w| w[0] == w[1]), "{digests:?}");
}
