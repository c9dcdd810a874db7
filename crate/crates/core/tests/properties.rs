use proptest::prelude::*;
use qv2x_core::codebook::{assign, reconstruct, Codebook, MessagePayload};
use qv2x_core::comms::{WireError, WireMessage, HEADER_BYTES};
use qv2x_core::pipeline::{eval_ap, fuse, DetectionGrid, ModelConfig, ModelParams};
use qv2x_core::quant::{fake_quant, init_maxmin, Granularity};
use qv2x_core::scene::gen_scenario;
use qv2x_core::{FeatureGrid, RngStream};

fn random_codebook(n_l: usize, dim: usize, n_r: usize, seed: u64) -> Codebook {
    let mut rng = RngStream::new(seed);
    let codes = (0..n_l * dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let alpha = (0..n_r).map(|r| 1.0 / (r + 1) as f64).collect();
    Codebook::new(n_l, dim, codes, alpha).unwrap()
}

fn random_grid(h: usize, w: usize, c: usize, seed: u64) -> FeatureGrid {
    let mut rng = RngStream::new(seed);
    FeatureGrid::new(h, w, c, (0..h * w * c).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wire_round_trip_and_truncation(
        h in 1usize..8,
        w in 1usize..8,
        n_l in 2usize..600,
        n_r in 1usize..4,
        seed in any::<u64>(),
        sender in any::<u32>(),
        ts in any::<u64>(),
    ) {
        let cb = random_codebook(n_l, 3, 3, seed);
        let mut rng = RngStream::new(seed ^ 1);
        let indices = (0..h * w * n_r).map(|_| rng.below(n_l) as u32).collect();
        let msg = MessagePayload::new(h, w, n_r, indices).unwrap();
        let bytes = WireMessage::encode(sender, ts, [1.5, -2.0, 0.25], &msg, &cb).unwrap().to_bytes();
        let back = WireMessage::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.header.sender_id, sender);
        prop_assert_eq!(back.header.frame_timestamp_ms, ts);
        prop_assert_eq!(back.decode(&cb).unwrap(), msg);
        for cut in [0, HEADER_BYTES - 1, HEADER_BYTES, bytes.len() - 1] {
            prop_assert!(WireMessage::from_bytes(&bytes[..cut]).is_err());
        }
        let mut longer = bytes.clone();
        longer.push(0);
        let rejected = matches!(WireMessage::from_bytes(&longer), Err(WireError::LengthMismatch { .. }));
        prop_assert!(rejected);
    }

    #[test]
    fn fake_quant_error_is_at_most_half_a_step(
        xs in prop::collection::vec(-50.0f64..50.0, 1..200),
        bits in 2u32..=16,
    ) {
        let qp = init_maxmin(&xs, bits, Granularity::PerTensor).unwrap();
        let fq = fake_quant(&xs, &qp);
        let s = qp.scale[0];
        for (x, y) in xs.iter().zip(&fq) {
            prop_assert!((x - y).abs() <= s / 2.0 + 1e-9 * s.max(1.0), "x={} y={} s={}", x, y, s);
        }
        let twice = fake_quant(&fq, &qp);
        for (a, b) in fq.iter().zip(&twice) {
            prop_assert!((a - b).abs() <= 1e-9 * s.max(1.0));
        }
    }

    #[test]
    fn ap_is_invariant_to_monotone_score_transforms(
        scores in prop::collection::vec(-5.0f64..5.0, 16),
        labels in prop::collection::vec(any::<bool>(), 16),
        a in 0.1f64..10.0,
        b in -3.0f64..3.0,
    ) {
        let lab = FeatureGrid::new(4, 4, 1, labels.iter().map(|&l| l as u8 as f64).collect()).unwrap();
        let det = |f: &dyn Fn(f64) -> f64| {
            let mut g = FeatureGrid::zeros(4, 4, 3);
            for (cell, s) in scores.iter().enumerate() {
                g.cell_mut(cell)[0] = f(*s);
            }
            DetectionGrid::from_grid(g).unwrap()
        };
        let base = eval_ap(&[det(&|s| s)], &[lab.clone()], &[]).unwrap();
        let moved = eval_ap(&[det(&|s| a * s + b)], &[lab.clone()], &[]).unwrap();
        prop_assert!((base - moved).abs() < 1e-12, "{} vs {}", base, moved);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn fusion_is_invariant_to_agent_order(seed in any::<u64>(), n in 2usize..5, rot in 1usize..4) {
        let cfg = ModelConfig { channels: 4, hidden: 4, compress_ratio: None };
        let params = ModelParams::init(cfg, seed).unwrap();
        let feats: Vec<FeatureGrid> = (0..n).map(|i| random_grid(3, 3, 4, seed.wrapping_add(i as u64))).collect();
        let mut perm = feats.clone();
        perm.rotate_left(rot % n);
        let a = fuse(&feats, &params).unwrap();
        let b = fuse(&perm, &params).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn single_rank_assignment_picks_the_nearest_scaled_code(
        seed in any::<u64>(),
        n_l in 2usize..40,
        dim in 1usize..6,
    ) {
        let cb = random_codebook(n_l, dim, 1, seed);
        let f = random_grid(2, 3, dim, seed ^ 7);
        let msg = assign(&f, &cb, 1).unwrap();
        for cell in 0..f.cells() {
            let dist = |l: usize| -> f64 {
                f.cell(cell).iter().zip(cb.code(l)).map(|(x, c)| (x - cb.alpha()[0] * c).powi(2)).sum()
            };
            let chosen = msg.indices_at(cell)[0] as usize;
            for l in 0..n_l {
                prop_assert!(dist(chosen) <= dist(l));
            }
        }
        let rec = reconstruct(&msg, &cb).unwrap();
        prop_assert_eq!(rec.shape(), f.shape());
    }
}

#[test]
fn scenario_generation_is_seeded() {
    let a = gen_scenario(42, 3, 8, 4, 100.0).unwrap();
    let b = gen_scenario(42, 3, 8, 4, 100.0).unwrap();
    let c = gen_scenario(43, 3, 8, 4, 100.0).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
