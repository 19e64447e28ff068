//! Property-based round trips and invariances.

use anomamba_core::metrics::{auroc, average_precision, f1_max};
use anomamba_core::pyramid;
use anomamba_core::ssm::{discretize_zoh, SsmParams};
use anomamba_core::{Graph, ScanDirection, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

proptest! {
    #[test]
    fn split_then_cat_is_identity(
        b in 1usize..=2,
        c in 1usize..=3,
        hh in 1usize..=4,
        ww in 1usize..=4,
        seed in any::<u64>(),
    ) {
        let t = rand_tensor(seed, &[b, c, hh * 2, ww * 2]);
        let mut g = Graph::inference();
        let x = g.input(&t);
        let quads = pyramid::split(&mut g, x).unwrap();
        let back = pyramid::cat(&mut g, &quads).unwrap();
        prop_assert_eq!(g.value(back).data(), t.data());
    }

    #[test]
    fn traversal_round_trip_is_identity(
        b in 1usize..=2,
        c in 1usize..=3,
        h in 1usize..=4,
        w in 1usize..=4,
        dir_idx in 0usize..4,
        seed in any::<u64>(),
    ) {
        let dir = ScanDirection::ALL[dir_idx];
        let t = rand_tensor(seed, &[b, c, h, w]);
        let mut g = Graph::inference();
        let x = g.input(&t);
        let seq = g.seq_from_map(x, dir).unwrap();
        let back = g.map_from_seq(seq, dir, h, w).unwrap();
        prop_assert_eq!(g.value(back).data(), t.data());
    }

    #[test]
    fn concat_then_narrow_recovers_operands(
        b in 1usize..=2,
        c1 in 1usize..=3,
        c2 in 1usize..=3,
        h in 1usize..=3,
        w in 1usize..=3,
        seed in any::<u64>(),
    ) {
        let t1 = rand_tensor(seed, &[b, c1, h, w]);
        let t2 = rand_tensor(seed ^ 0x9e37_79b9, &[b, c2, h, w]);
        let mut g = Graph::inference();
        let x1 = g.input(&t1);
        let x2 = g.input(&t2);
        let joined = g.concat(&[x1, x2], 1).unwrap();
        let r1 = g.narrow(joined, 1, 0, c1).unwrap();
        let r2 = g.narrow(joined, 1, c1, c2).unwrap();
        prop_assert_eq!(g.value(r1).data(), t1.data());
        prop_assert_eq!(g.value(r2).data(), t2.data());
    }

    #[test]
    fn zoh_is_a_contraction(
        a in -5.0f32..-0.01,
        delta in 0.01f32..2.0,
        b in -3.0f32..3.0,
    ) {
        let p = SsmParams {
            a: Tensor::new(&[1, 1], vec![a]).unwrap(),
            b: Tensor::new(&[1, 1], vec![b]).unwrap(),
            c_out: Tensor::new(&[1, 1], vec![1.0]).unwrap(),
            delta: Tensor::new(&[1], vec![delta]).unwrap(),
        };
        let d = discretize_zoh(&p).unwrap();
        let a_bar = d.a_bar.data()[0];
        let b_bar = d.b_bar.data()[0];
        // decay stays strictly inside the unit interval
        prop_assert!(a_bar > 0.0 && a_bar < 1.0, "a_bar {a_bar}");
        // the effective input gain keeps the sign of b and is bounded by
        // the Euler step delta * b
        prop_assert!(b_bar * b >= 0.0, "sign flip: b {b} b_bar {b_bar}");
        prop_assert!(
            b_bar.abs() <= delta * b.abs() + 1e-6,
            "overshoot: |b_bar| {} vs delta*|b| {}",
            b_bar.abs(),
            delta * b.abs()
        );
    }

    // Scores on a dyadic grid so the affine transform below is exact in
    // f32 and cannot merge or split tie groups.
    #[test]
    fn ranking_metrics_ignore_monotone_transforms(
        pairs in proptest::collection::vec((-16i32..=16, any::<bool>()), 2..40),
        slope_idx in 0usize..4,
        intercept in -8i32..=8,
    ) {
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let scores: Vec<f32> = pairs.iter().map(|p| p.0 as f32 / 8.0).collect();
        let slope = [0.5f32, 1.0, 2.0, 4.0][slope_idx];
        let shift = intercept as f32 / 4.0;
        let mapped: Vec<f32> = scores.iter().map(|s| slope * s + shift).collect();
        prop_assert_eq!(
            auroc(&scores, &labels).unwrap(),
            auroc(&mapped, &labels).unwrap()
        );
        prop_assert_eq!(
            average_precision(&scores, &labels).unwrap(),
            average_precision(&mapped, &labels).unwrap()
        );
        prop_assert_eq!(
            f1_max(&scores, &labels).unwrap(),
            f1_max(&mapped, &labels).unwrap()
        );
    }

    #[test]
    fn auroc_of_flipped_labels_is_complement(
        pairs in proptest::collection::vec((-16i32..=16, any::<bool>()), 2..40),
    ) {
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let scores: Vec<f32> = pairs.iter().map(|p| p.0 as f32 / 8.0).collect();
        let flipped: Vec<bool> = labels.iter().map(|&l| !l).collect();
        let fwd = auroc(&scores, &labels).unwrap();
        let rev = auroc(&scores, &flipped).unwrap();
        prop_assert!((fwd + rev - 1.0).abs() < 1e-12, "fwd {fwd} rev {rev}");
    }
}
