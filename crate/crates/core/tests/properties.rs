//! Property tests for the weight arithmetic, resampling guarantees, metric
//! symmetries, and serialization round trips.

use almcflow_core::ensemble::{
    ess, normalize_log_weights, read_ensemble_csv, resample, write_ensemble_csv, Ensemble,
    ResampleMethod,
};
use almcflow_core::flow::estimate_velocity;
use almcflow_core::metrics::{energy_distance, mmd_rbf, sliced_wasserstein};
use almcflow_core::rng::{derive_rng, purpose};
use almcflow_core::InterpolantSchedule;
use proptest::prelude::*;

fn finite_log_weights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-40.0..40.0f64, 1..64)
}

proptest! {
    #[test]
    fn normalize_sums_to_one_and_is_idempotent(lw in finite_log_weights()) {
        let n1 = normalize_log_weights(&lw).unwrap();
        let total: f64 = n1.iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let n2 = normalize_log_weights(&n1).unwrap();
        for (a, b) in n1.iter().zip(&n2) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_shift_invariant(lw in finite_log_weights(), c in -200.0..200.0f64) {
        let shifted: Vec<f64> = lw.iter().map(|v| v + c).collect();
        let a = normalize_log_weights(&lw).unwrap();
        let b = normalize_log_weights(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn ess_bounds_and_shift_invariance(lw in finite_log_weights(), c in -100.0..100.0f64) {
        let n = lw.len() as f64;
        let e = ess(&lw).unwrap();
        prop_assert!(e >= 1.0 - 1e-9 && e <= n + 1e-9);
        let shifted: Vec<f64> = lw.iter().map(|v| v + c).collect();
        let e2 = ess(&shifted).unwrap();
        prop_assert!((e - e2).abs() < 1e-6 * n);
    }

    #[test]
    fn systematic_resample_copy_counts(
        raw in prop::collection::vec(0.01..5.0f64, 2..32),
        seed in 0u64..1000,
    ) {
        let n = raw.len();
        let total: f64 = raw.iter().sum();
        let lw: Vec<f64> = raw.iter().map(|w| (w / total).ln()).collect();
        let positions: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let e = Ensemble::new(positions, lw.clone(), 1, 0).unwrap();
        let mut rng = derive_rng(seed, purpose::RESAMPLE, 0, 0);
        let r = resample(&e, &mut rng, ResampleMethod::Systematic).unwrap();
        let mut counts = vec![0usize; n];
        for &p in r.positions() {
            counts[p as usize] += 1;
        }
        for i in 0..n {
            let expect = n as f64 * raw[i] / total;
            prop_assert!(
                (counts[i] as f64 - expect).abs() < 1.0 + 1e-9,
                "count {} vs n*W {}", counts[i], expect
            );
        }
    }

    #[test]
    fn ensemble_csv_round_trip(
        rows in prop::collection::vec(prop::collection::vec(-1e6..1e6f64, 3), 1..16),
        step in 0usize..100,
    ) {
        let n = rows.len();
        let positions: Vec<f64> = rows.iter().flat_map(|r| r[..2].to_vec()).collect();
        let lw: Vec<f64> = rows.iter().map(|r| r[2].min(50.0)).collect();
        let e = Ensemble::new(positions, lw, 2, step).unwrap();
        let dir = std::env::temp_dir().join("almcflow_prop_csv");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("e{n}_{step}.csv"));
        write_ensemble_csv(&e, &path, 1).unwrap();
        let (back, _) = read_ensemble_csv(&path).unwrap();
        prop_assert_eq!(back, e);
    }

    #[test]
    fn two_sample_metrics_symmetric_bitwise(
        x in prop::collection::vec(-3.0..3.0f64, 8..40),
        y in prop::collection::vec(-3.0..3.0f64, 8..40),
        seed in 0u64..100,
    ) {
        let x = &x[..x.len() / 2 * 2];
        let y = &y[..y.len() / 2 * 2];
        let e1 = energy_distance(x, y, 2).unwrap();
        let e2 = energy_distance(y, x, 2).unwrap();
        prop_assert_eq!(e1.to_bits(), e2.to_bits());
        prop_assert!(e1 >= -1e-12);
        if let (Ok(m1), Ok(m2)) = (mmd_rbf(x, y, 2), mmd_rbf(y, x, 2)) {
            prop_assert_eq!(m1.to_bits(), m2.to_bits());
        }
        let s1 = sliced_wasserstein(x, y, 2, 8, seed).unwrap();
        let s2 = sliced_wasserstein(y, x, 2, 8, seed).unwrap();
        prop_assert_eq!(s1.to_bits(), s2.to_bits());
    }

    // Integer log-weights plus an integer shift are exact in floating point,
    // and the estimator canonicalizes by the max, so scaling every weight by
    // a common factor leaves the velocity bit-identical.
    #[test]
    fn velocity_weight_scaling_bit_identical(
        pos in prop::collection::vec(-4.0..4.0f64, 6..40),
        wi in prop::collection::vec(-20i32..0, 3..20),
        shift in -100i32..100,
        t_idx in 1usize..10,
    ) {
        let n = wi.len().min(pos.len() / 2);
        let positions = pos[..n * 2].to_vec();
        let lw: Vec<f64> = wi[..n].iter().map(|&v| v as f64).collect();
        let shifted: Vec<f64> = wi[..n].iter().map(|&v| (v + shift) as f64).collect();
        let t = t_idx as f64 / 10.0;
        let e1 = Ensemble::new(positions.clone(), lw, 2, 0).unwrap();
        let e2 = Ensemble::new(positions, shifted, 2, 0).unwrap();
        let x = [0.37, -0.81];
        let v1 = estimate_velocity(InterpolantSchedule::Follmer, t, &x, &e1).unwrap();
        let v2 = estimate_velocity(InterpolantSchedule::Follmer, t, &x, &e2).unwrap();
        prop_assert_eq!(v1[0].to_bits(), v2[0].to_bits());
        prop_assert_eq!(v1[1].to_bits(), v2[1].to_bits());
    }
}
