use std::collections::BTreeMap;
use std::sync::Arc;

use selfrect_core::attention::{InMemoryStorage, IndexMap, KvStore, Phase};
use selfrect_core::backend::{AttentionSite, Backend};
use selfrect_core::image::{LatentImage, PixelImage};
use selfrect_core::prep::AugmentationSet;
use selfrect_core::rectify::{
    fine_texture_sample, invert_and_record, invert_latent_and_record, record_inversion_reference, record_references,
    run_pipeline, run_rounds, schedule_for, self_rectify, structure_preserving_invert, InversionOptions, IrEvalMode,
    NoObserver, Observer, RecordedPass, RectifyConfig, SharedPasses,
};
use selfrect_core::scheduler::{invert_step, NoiseSchedule};
use selfrect_core::stub::StubBackend;
use selfrect_core::Error;

const T: usize = 10;

fn sites() -> Vec<AttentionSite> {
    vec![AttentionSite(0), AttentionSite(1)]
}

fn stripes(n: usize, phase: f32) -> PixelImage {
    PixelImage::from_fn(n, n, |y, x| {
        let v = 0.5 + 0.4 * ((x as f32 * 0.3 + y as f32 * 0.1 + phase).sin());
        [v, 0.6 * v + 0.2, 1.0 - v]
    })
}

fn blobs(n: usize) -> PixelImage {
    PixelImage::from_fn(n, n, |y, x| {
        let d = ((y as f32 - 20.0).powi(2) + (x as f32 - 40.0).powi(2)).sqrt();
        let v = if d < 18.0 { 0.85 } else { 0.15 };
        [v, 0.3, 1.0 - v]
    })
}

fn config() -> RectifyConfig {
    RectifyConfig {
        steps: T,
        p1: 4,
        p2: 2,
        s1: 4,
        s2: 2,
        sites: sites(),
        ..RectifyConfig::default()
    }
}

#[derive(Default)]
struct Counter {
    rounds: Vec<usize>,
    steps: BTreeMap<Phase, (usize, usize)>,
    rows: Vec<(Phase, usize, usize)>,
    latents: usize,
}

impl Observer for Counter {
    fn round(&mut self, r: usize) {
        self.rounds.push(r);
    }
    fn latent(&mut self, _: Phase, _: usize, _: &LatentImage) {
        self.latents += 1;
    }
    fn step(&mut self, phase: Phase, t: usize, rows: Option<usize>) {
        let e = self.steps.entry(phase).or_default();
        e.0 += 1;
        if let Some(r) = rows {
            e.1 += 1;
            self.rows.push((phase, t, r));
        }
    }
}

struct Fixture {
    backend: StubBackend,
    sched: NoiseSchedule,
    ir_literal: RecordedPass,
    ir_native: RecordedPass,
    refs: Vec<RecordedPass>,
    target: LatentImage,
}

fn fixture() -> Fixture {
    let backend = StubBackend::new(7);
    let sched = schedule_for(&backend, T).unwrap();
    let target_img = blobs(64);
    let ir_literal = record_inversion_reference(
        &backend,
        &target_img,
        &sched,
        &sites(),
        IrEvalMode::Literal,
        &InMemoryStorage,
    )
    .unwrap();
    let ir_native = record_inversion_reference(
        &backend,
        &target_img,
        &sched,
        &sites(),
        IrEvalMode::NativeCache,
        &InMemoryStorage,
    )
    .unwrap();
    let refs = record_references(
        &backend,
        &stripes(64, 0.0),
        &AugmentationSet::default(),
        &sched,
        &sites(),
        &InMemoryStorage,
    )
    .unwrap();
    let target = backend.encode_image(&target_img).unwrap();
    Fixture {
        backend,
        sched,
        ir_literal,
        ir_native,
        refs,
        target,
    }
}

#[test]
fn recording_covers_every_grid_index() {
    let f = fixture();
    assert_eq!(f.ir_native.cache.len(), sites().len() * (T + 1));
    assert_eq!(f.ir_literal.cache.len(), 0);
    assert_eq!(f.refs[0].cache.label(), "ref-inversion-0");
    for t in 0..=T {
        for s in sites() {
            f.refs[0].cache.fetch(s, t).unwrap();
        }
    }
    assert!(matches!(
        f.refs[0].cache.fetch(AttentionSite(0), T + 1),
        Err(Error::CacheMiss { .. })
    ));
    // latents 64/8 = 8x8 cells
    assert_eq!(f.refs[0].cache.fetch(AttentionSite(1), 3).unwrap().rows(), 64);
}

#[test]
fn recorded_trajectory_is_plain_inversion() {
    let f = fixture();
    let mut z = f.target.clone();
    for t in 0..T {
        assert_eq!(f.ir_native.trajectory.get(t).unwrap(), &z);
        let eps = f
            .backend
            .predict_noise(&z, f.sched.model_timestep(t), &[])
            .unwrap()
            .epsilon;
        z = invert_step(&z, &eps, t, &f.sched).unwrap();
    }
    assert_eq!(f.ir_native.trajectory.end(), &z);
}

#[test]
fn zero_p_is_standard_inversion() {
    let f = fixture();
    for (mode, ir) in [
        (IrEvalMode::Literal, &f.ir_literal),
        (IrEvalMode::NativeCache, &f.ir_native),
    ] {
        let opts = InversionOptions {
            mode,
            index_map: IndexMap::Reverse,
        };
        let z = structure_preserving_invert(&f.backend, &f.target, ir, 0, &sites(), &f.sched, opts, &mut NoObserver)
            .unwrap();
        assert_eq!(&z, f.ir_native.trajectory.end());
    }
}

#[test]
fn injection_changes_the_inverted_code() {
    let f = fixture();
    let other = f.backend.encode_image(&stripes(64, 1.0)).unwrap();
    let plain = invert_latent_and_record(
        &f.backend,
        other.clone(),
        &f.sched,
        &[],
        &InMemoryStorage,
        "x",
        &mut NoObserver,
    )
    .unwrap();
    let opts = InversionOptions::default();
    let z = structure_preserving_invert(
        &f.backend,
        &other,
        &f.ir_literal,
        5,
        &sites(),
        &f.sched,
        opts,
        &mut NoObserver,
    )
    .unwrap();
    assert_ne!(&z, plain.trajectory.end());
}

#[test]
fn self_donor_in_native_mode_leaves_inversion_unchanged() {
    // Reverse injection of the target's own features at T - t differs from the
    // plain path; the `Same` map re-injects exactly what the target computes.
    let f = fixture();
    let opts = InversionOptions {
        mode: IrEvalMode::NativeCache,
        index_map: IndexMap::Same,
    };
    let z = structure_preserving_invert(
        &f.backend,
        &f.target,
        &f.ir_native,
        T,
        &sites(),
        &f.sched,
        opts,
        &mut NoObserver,
    )
    .unwrap();
    assert_eq!(&z, f.ir_native.trajectory.end());
}

#[test]
fn full_s_is_plain_sampling() {
    let f = fixture();
    let start = f.ir_native.trajectory.end();
    let a = fine_texture_sample(&f.backend, start, &f.refs, T, &sites(), &f.sched, &mut NoObserver).unwrap();
    let b = fine_texture_sample(&f.backend, start, &[], T, &sites(), &f.sched, &mut NoObserver).unwrap();
    assert_eq!(a, b);
    let c = fine_texture_sample(&f.backend, start, &f.refs, 0, &sites(), &f.sched, &mut NoObserver).unwrap();
    assert_ne!(a, c);
}

#[test]
fn step_accounting_matches_p_and_s() {
    let f = fixture();
    for (p, s) in [(0, 0), (3, 7), (10, 10), (6, 1)] {
        let mut obs = Counter::default();
        let opts = InversionOptions::default();
        let z = structure_preserving_invert(
            &f.backend,
            &f.target,
            &f.ir_literal,
            p,
            &sites(),
            &f.sched,
            opts,
            &mut obs,
        )
        .unwrap();
        fine_texture_sample(&f.backend, &z, &f.refs, s, &sites(), &f.sched, &mut obs).unwrap();
        assert_eq!(obs.steps[&Phase::Inversion], (T, p));
        assert_eq!(obs.steps[&Phase::Sampling], (T, T - s));
        assert_eq!(obs.latents, 2 * (T + 1));
        for (phase, t, _) in &obs.rows {
            match phase {
                Phase::Inversion => assert!(*t < p),
                Phase::Sampling => assert!(*t >= 1 && *t <= T - s),
            }
        }
    }
}

#[test]
fn exhaustive_p_s_grid_has_no_cache_misses() {
    let f = fixture();
    let mut runs = 0;
    for (mode, ir) in [
        (IrEvalMode::Literal, &f.ir_literal),
        (IrEvalMode::NativeCache, &f.ir_native),
    ] {
        for p in 0..=T {
            let opts = InversionOptions {
                mode,
                index_map: IndexMap::Reverse,
            };
            let z =
                structure_preserving_invert(&f.backend, &f.target, ir, p, &sites(), &f.sched, opts, &mut NoObserver)
                    .unwrap();
            for s in 0..=T {
                fine_texture_sample(&f.backend, &z, &f.refs, s, &sites(), &f.sched, &mut NoObserver).unwrap();
                runs += 1;
            }
        }
    }
    assert_eq!(runs, 2 * 121);
}

#[test]
fn offset_map_stays_inside_the_grid() {
    let f = fixture();
    for k in [-15i64, -1, 3, 40] {
        let opts = InversionOptions {
            mode: IrEvalMode::NativeCache,
            index_map: IndexMap::Offset(k),
        };
        structure_preserving_invert(
            &f.backend,
            &f.target,
            &f.ir_native,
            T,
            &sites(),
            &f.sched,
            opts,
            &mut NoObserver,
        )
        .unwrap();
    }
}

#[test]
fn missing_entries_are_reported_not_skipped() {
    let f = fixture();
    // a literal-mode IR has no features to serve the native path
    let opts = InversionOptions {
        mode: IrEvalMode::NativeCache,
        index_map: IndexMap::Reverse,
    };
    let err = structure_preserving_invert(
        &f.backend,
        &f.target,
        &f.ir_literal,
        1,
        &sites(),
        &f.sched,
        opts,
        &mut NoObserver,
    )
    .unwrap_err();
    match err {
        Error::CacheMiss { label, t, .. } => {
            assert_eq!(label, "IR-inversion");
            assert_eq!(t, T);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn rotations_quadruple_injected_rows() {
    let f = fixture();
    let augmented = record_references(
        &f.backend,
        &stripes(64, 0.0),
        &AugmentationSet::rotations(),
        &f.sched,
        &sites(),
        &InMemoryStorage,
    )
    .unwrap();
    assert_eq!(augmented.len(), 4);
    let start = f.ir_native.trajectory.end();
    let mut single = Counter::default();
    fine_texture_sample(&f.backend, start, &f.refs, 3, &sites(), &f.sched, &mut single).unwrap();
    let mut quad = Counter::default();
    fine_texture_sample(&f.backend, start, &augmented, 3, &sites(), &f.sched, &mut quad).unwrap();
    assert_eq!(single.rows.len(), T - 3);
    assert_eq!(quad.rows.len(), T - 3);
    for (a, b) in single.rows.iter().zip(&quad.rows) {
        assert_eq!(a.1, b.1);
        assert_eq!(b.2, 4 * a.2);
    }
}

#[test]
fn pipeline_runs_two_rounds_and_is_deterministic() {
    let backend = StubBackend::new(3);
    let cfg = RectifyConfig {
        augmentations: AugmentationSet::rotations(),
        start_shuffle: Some(2),
        seed: 9,
        ..config()
    };
    let mut obs = Counter::default();
    let a = run_pipeline(
        &backend,
        &stripes(64, 0.0),
        &blobs(64),
        &cfg,
        &InMemoryStorage,
        &mut obs,
    )
    .unwrap();
    let b = run_pipeline(
        &backend,
        &stripes(64, 0.0),
        &blobs(64),
        &cfg,
        &InMemoryStorage,
        &mut NoObserver,
    )
    .unwrap();
    assert_eq!(obs.rounds, vec![1, 2]);
    assert_eq!(obs.steps[&Phase::Inversion], (2 * T, cfg.p1 + cfg.p2));
    assert_eq!(obs.steps[&Phase::Sampling], (2 * T, 2 * T - cfg.s1 - cfg.s2));
    assert_eq!(a.image, b.image);
    assert_eq!(a.coarse, b.coarse);
    assert_eq!(a.cache_entries["IR-inversion"], 0);
    assert_eq!(a.cache_entries["ref-inversion-3"], 2 * (T + 1));
    assert_eq!(a.image.height(), 64);
}

#[test]
fn single_round_matches_first_pipeline_round() {
    let backend = StubBackend::new(5);
    let cfg = config();
    let target = blobs(64);
    let reference = stripes(64, 0.0);
    let one = self_rectify(
        &backend,
        &target,
        &target,
        &reference,
        cfg.p1,
        cfg.s1,
        &cfg,
        &InMemoryStorage,
        &mut NoObserver,
    )
    .unwrap();
    let two = run_pipeline(&backend, &reference, &target, &cfg, &InMemoryStorage, &mut NoObserver).unwrap();
    assert_eq!(one, two.coarse);
}

#[test]
fn config_validation_names_the_field() {
    let backend = StubBackend::new(0);
    let bad = RectifyConfig { p1: T + 1, ..config() };
    let err = run_pipeline(
        &backend,
        &blobs(64),
        &blobs(64),
        &bad,
        &InMemoryStorage,
        &mut NoObserver,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config { field: "p1", .. }));
    let err = run_pipeline(
        &backend,
        &blobs(64),
        &blobs(64),
        &RectifyConfig::default(),
        &InMemoryStorage,
        &mut NoObserver,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config { field: "sites", .. }));
    let err = run_pipeline(
        &backend,
        &blobs(64),
        &blobs(32),
        &config(),
        &InMemoryStorage,
        &mut NoObserver,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
}

#[test]
fn recorded_pass_can_be_shared() {
    let backend = StubBackend::new(1);
    let sched = schedule_for(&backend, 4).unwrap();
    let pass = invert_and_record(&backend, &blobs(32), &sched, &sites(), &InMemoryStorage, "r").unwrap();
    let shared: Arc<dyn KvStore> = pass.cache.clone();
    assert_eq!(shared.len(), 2 * 5);
    assert!(format!("{pass:?}").contains("entries: 10"));
}

#[test]
fn shared_passes_serve_several_parameter_sets() {
    let backend = StubBackend::new(8);
    let (reference, target) = (stripes(64, 0.5), blobs(64));
    let base = config();
    let passes = SharedPasses::record(&backend, &reference, &target, &base, &InMemoryStorage).unwrap();
    for (p1, s1) in [(0, 0), (3, 7), (T, T)] {
        let cfg = RectifyConfig { p1, s1, ..base.clone() };
        let reused = run_rounds(&backend, &passes, &cfg, &mut NoObserver).unwrap();
        let fresh = run_pipeline(&backend, &reference, &target, &cfg, &InMemoryStorage, &mut NoObserver).unwrap();
        assert_eq!(reused.image, fresh.image, "p1={p1} s1={s1}");
    }
    let other_sites = RectifyConfig {
        sites: vec![AttentionSite(1)],
        ..base.clone()
    };
    let err = run_rounds(&backend, &passes, &other_sites, &mut NoObserver).unwrap_err();
    assert!(matches!(err, Error::Config { field: "sites", .. }));
    let other_steps = RectifyConfig {
        steps: T - 1,
        p1: 1,
        p2: 1,
        s1: 1,
        s2: 1,
        ..base
    };
    let err = run_rounds(&backend, &passes, &other_steps, &mut NoObserver).unwrap_err();
    assert!(matches!(err, Error::Config { field: "steps", .. }));
}
