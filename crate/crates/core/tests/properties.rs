use proptest::prelude::*;
use selfrect_core::attention::{attend_multihead, attention_probs, concat_kv, FeatureRows, KvRecord};
use selfrect_core::image::{LatentImage, PixelImage};
use selfrect_core::prep::{latent_shuffle, patch_shuffle, ShuffleSpec};
use selfrect_core::scheduler::{
    build_schedule_with_offset, invert_step, predict_x0, sample_step, scaled_linear_alphas,
};

fn sd_alphas() -> Vec<f64> {
    scaled_linear_alphas(0.00085, 0.012, 1000)
}

fn latent(vals: Vec<f32>) -> LatentImage {
    LatentImage::new(4, 2, 2, vals).unwrap()
}

fn rel_err(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    let den: f64 = b.iter().map(|y| (*y as f64).powi(2)).sum();
    (num / den.max(1e-12)).sqrt()
}

fn sorted(mut v: Vec<f32>) -> Vec<f32> {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

proptest! {
    #[test]
    fn sample_undoes_invert_with_shared_noise(
        z in prop::collection::vec(-3.0f32..3.0, 16),
        e in prop::collection::vec(-3.0f32..3.0, 16),
        steps in 1usize..=100,
        pick in 0usize..100,
        offset in 0usize..=1,
    ) {
        let sched = build_schedule_with_offset(steps, &sd_alphas(), offset).unwrap();
        let t = pick % steps;
        let (z, e) = (latent(z), latent(e));
        let up = invert_step(&z, &e, t, &sched).unwrap();
        let back = sample_step(&up, &e, t + 1, &sched).unwrap();
        prop_assert!(rel_err(back.data(), z.data()) <= 1e-5);
        let down = sample_step(&up, &e, t + 1, &sched).unwrap();
        let again = invert_step(&down, &e, t, &sched).unwrap();
        prop_assert!(rel_err(again.data(), up.data()) <= 1e-5);
    }

    #[test]
    fn predict_x0_is_linear(
        z1 in prop::collection::vec(-3.0f32..3.0, 16),
        z2 in prop::collection::vec(-3.0f32..3.0, 16),
        e1 in prop::collection::vec(-3.0f32..3.0, 16),
        e2 in prop::collection::vec(-3.0f32..3.0, 16),
        a in -2.0f32..2.0,
        b in -2.0f32..2.0,
        t in 0usize..=20,
    ) {
        let sched = build_schedule_with_offset(20, &sd_alphas(), 1).unwrap();
        let (z1, z2, e1, e2) = (latent(z1), latent(z2), latent(e1), latent(e2));
        let zc = z1.axpby(a, &z2, b).unwrap();
        let ec = e1.axpby(a, &e2, b).unwrap();
        let lhs = predict_x0(&zc, &ec, t, &sched).unwrap();
        let rhs = predict_x0(&z1, &e1, t, &sched)
            .unwrap()
            .axpby(a, &predict_x0(&z2, &e2, t, &sched).unwrap(), b)
            .unwrap();
        let scale = rhs.data().iter().map(|v| v.abs()).fold(1.0f32, f32::max) as f64;
        let worst = lhs.data().iter().zip(rhs.data()).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max);
        prop_assert!(worst / scale <= 1e-5);
    }

    #[test]
    fn subgrid_alphas_strictly_decrease(steps in 1usize..=1000, offset in 0usize..=1) {
        let alphas = sd_alphas();
        let Ok(sched) = build_schedule_with_offset(steps, &alphas, offset) else {
            // the last offset grid can overrun the native range
            prop_assert!(offset == 1);
            return Ok(());
        };
        prop_assert_eq!(sched.alpha_bar(0), 1.0);
        for w in sched.alpha_bars().windows(2) {
            prop_assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one(
        q in prop::collection::vec(-4.0f32..4.0, 3 * 4),
        k in prop::collection::vec(-4.0f32..4.0, 5 * 4),
    ) {
        let p = attention_probs(
            &FeatureRows::new(3, 4, q).unwrap(),
            &FeatureRows::new(5, 4, k).unwrap(),
        ).unwrap();
        for r in 0..3 {
            let s: f32 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
            prop_assert!(p.row(r).iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn attention_ignores_key_order(
        q in prop::collection::vec(-2.0f32..2.0, 3 * 8),
        k in prop::collection::vec(-2.0f32..2.0, 6 * 8),
        v in prop::collection::vec(-2.0f32..2.0, 6 * 8),
        seed in any::<u64>(),
    ) {
        use rand::{seq::SliceRandom, SeedableRng};
        let q = FeatureRows::new(3, 8, q).unwrap();
        let k = FeatureRows::new(6, 8, k).unwrap();
        let v = FeatureRows::new(6, 8, v).unwrap();
        let mut order: Vec<usize> = (0..6).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = attend_multihead(&q, &k, &v, 2).unwrap();
        let b = attend_multihead(&q, &k.permuted(&order), &v.permuted(&order), 2).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn concat_order_does_not_change_attention(
        q in prop::collection::vec(-2.0f32..2.0, 2 * 4),
        k1 in prop::collection::vec(-2.0f32..2.0, 3 * 4),
        k2 in prop::collection::vec(-2.0f32..2.0, 2 * 4),
        v1 in prop::collection::vec(-2.0f32..2.0, 3 * 4),
        v2 in prop::collection::vec(-2.0f32..2.0, 2 * 4),
    ) {
        let r1 = KvRecord::new(FeatureRows::new(3, 4, k1).unwrap(), FeatureRows::new(3, 4, v1).unwrap(), 1).unwrap();
        let r2 = KvRecord::new(FeatureRows::new(2, 4, k2).unwrap(), FeatureRows::new(2, 4, v2).unwrap(), 1).unwrap();
        let q = FeatureRows::new(2, 4, q).unwrap();
        let ab = concat_kv(&[&r1, &r2]).unwrap();
        let ba = concat_kv(&[&r2, &r1]).unwrap();
        prop_assert_eq!(ab.rows(), 5);
        let x = attend_multihead(&q, ab.keys(), ab.values(), 1).unwrap();
        let y = attend_multihead(&q, ba.keys(), ba.values(), 1).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn patch_shuffle_permutes_pixels(seed in any::<u64>(), block in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let img = PixelImage::from_fn(16, 16, |y, x| [y as f32 / 16.0, x as f32 / 16.0, 0.5]);
        let out = patch_shuffle(&img, ShuffleSpec { block_size: block, seed }).unwrap();
        prop_assert_eq!(sorted(out.data().to_vec()), sorted(img.data().to_vec()));
        // every output block is some intact input block
        for by in (0..16).step_by(block) {
            for bx in (0..16).step_by(block) {
                let p = out.pixel(by, bx);
                let (sy, sx) = ((p[0] * 16.0).round() as usize, (p[1] * 16.0).round() as usize);
                prop_assert_eq!(sy % block, 0);
                prop_assert_eq!(sx % block, 0);
                for dy in 0..block {
                    for dx in 0..block {
                        prop_assert_eq!(out.pixel(by + dy, bx + dx), img.pixel(sy + dy, sx + dx));
                    }
                }
            }
        }
    }

    #[test]
    fn latent_shuffle_keeps_channel_contents(seed in any::<u64>(), block in prop::sample::select(vec![1usize, 2, 4])) {
        let data: Vec<f32> = (0..4 * 8 * 8).map(|i| i as f32).collect();
        let z = LatentImage::new(4, 8, 8, data).unwrap();
        let out = latent_shuffle(&z, ShuffleSpec { block_size: block, seed }).unwrap();
        for c in 0..4 {
            let plane = |l: &LatentImage| sorted(l.data()[c * 64..(c + 1) * 64].to_vec());
            prop_assert_eq!(plane(&out), plane(&z));
        }
    }
}

#[test]
fn shuffles_reject_misaligned_blocks() {
    let img = PixelImage::filled(16, 16, [0.0; 3]);
    assert!(patch_shuffle(&img, ShuffleSpec { block_size: 5, seed: 0 }).is_err());
    assert!(patch_shuffle(&img, ShuffleSpec { block_size: 0, seed: 0 }).is_err());
    let z = LatentImage::zeros(4, 8, 8);
    assert!(latent_shuffle(&z, ShuffleSpec { block_size: 3, seed: 0 }).is_err());
}
