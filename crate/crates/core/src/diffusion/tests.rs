use super::*;
use crate::schedule::ScheduleKind;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sino(values: Vec<f32>) -> Sinogram {
    let n = values.len();
    Sinogram::from_vec(1, n, values).unwrap()
}

fn field(values: Vec<f32>) -> ResidualField {
    let n = values.len();
    ResidualField::from_vec(1, n, values).unwrap()
}

fn linear(t_max: usize, beta: f64) -> ResidualSchedule {
    ResidualSchedule::new(t_max, ScheduleKind::Linear, beta).unwrap()
}

fn random_sino(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Sinogram {
    let v = (0..rows * cols).map(|_| rng.random_range(0.0..1.0)).collect();
    Sinogram::from_vec(rows, cols, v).unwrap()
}

#[test]
fn residual_cases() {
    let f = sino(vec![0.2, 1.0]);
    assert!(residual(&f, &f).unwrap().values.iter().all(|&v| v == 0.0));
    let r = residual(&sino(vec![0.6]), &sino(vec![0.2])).unwrap();
    assert!((r.values[0] - 0.4).abs() < 1e-7);
    assert!(residual(&sino(vec![0.6]), &sino(vec![0.2, 0.3])).is_err());
}

#[test]
fn forward_sample_endpoints_and_midpoint() {
    let s = linear(10, 1.0);
    let (f, l) = (sino(vec![0.2, 0.7]), sino(vec![0.6, 0.1]));
    assert_eq!(forward_sample(&f, &l, &s, 0.0).unwrap().x.values, f.values);
    assert_eq!(forward_sample(&f, &l, &s, 10.0).unwrap().x.values, l.values);
    let mid = forward_sample(&f, &l, &s, 5.0).unwrap();
    assert!((mid.x.values[0] - 0.4).abs() < 1e-7);
    assert!(forward_sample(&f, &l, &s, 10.5).is_err());
    assert!(forward_sample(&f, &l, &s, -0.1).is_err());
}

#[test]
fn reverse_step_cases() {
    let s = linear(4, 1.0);
    let state = DiffusionState {
        x: sino(vec![0.4]),
        t: 2.0,
    };
    let same = reverse_step(&state, &field(vec![0.0]), 1.0, &s).unwrap();
    assert_eq!(same.x.values, state.x.values);
    // x_F = 0.2, eps = 0.4, alpha 0.5 -> 0.25
    let next = reverse_step(&state, &field(vec![0.4]), 1.0, &s).unwrap();
    assert!((next.x.values[0] - 0.3).abs() < 1e-7);
    assert!(reverse_step(&state, &field(vec![0.4]), 2.0, &s).is_err());
}

#[test]
fn chained_steps_telescope() {
    let s = linear(500, 1.0);
    let eps = field(vec![0.37, -0.2, 0.05]);
    let start = DiffusionState {
        x: sino(vec![0.9, 0.1, 0.5]),
        t: 500.0,
    };
    let one = reverse_step(&start, &eps, 120.0, &s).unwrap();
    let mut chained = start.clone();
    for tgt in [430.0, 333.3, 250.0, 120.0] {
        chained = reverse_step(&chained, &eps, tgt, &s).unwrap();
    }
    for (a, b) in one.x.values.iter().zip(&chained.x.values) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn drift_matches_telescoped_error_sum() {
    // Oracle: run the exact trajectory with eps and a predicted trajectory
    // with eps + delta_i, recording each weighted delta independently.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let s = linear(500, 1.0);
    let grid = TimeGrid::new(30, 500).unwrap();
    let x_f = random_sino(&mut rng, 6, 7);
    let x_l = random_sino(&mut rng, 6, 7);
    let eps = residual(&x_l, &x_f).unwrap();
    let mut truth = forward_sample(&x_f, &x_l, &s, 500.0).unwrap();
    let mut pred = truth.clone();
    let mut record = DriftRecord::new(6, 7);
    for (t, next) in grid.steps() {
        let delta: Vec<f32> = (0..42).map(|_| rng.random_range(-0.05..0.05)).collect();
        let eps_hat: Vec<f32> = eps.values.iter().zip(&delta).map(|(e, d)| e + d).collect();
        pred = reverse_step(&pred, &field_shaped(&eps_hat, 6, 7), next, &s).unwrap();
        truth = reverse_step(&truth, &eps, next, &s).unwrap();
        record
            .push(s.alpha(t) - s.alpha(next), field_shaped(&delta, 6, 7))
            .unwrap();
        let gamma = compute_drift(&truth, &pred).unwrap();
        for (g, r) in gamma.values.iter().zip(&record.gamma.values) {
            assert!((g - r).abs() < 1e-5, "t={next}: {g} vs {r}");
        }
    }
}

fn field_shaped(v: &[f32], r: usize, c: usize) -> ResidualField {
    ResidualField::from_vec(r, c, v.to_vec()).unwrap()
}

#[test]
fn drift_rejects_time_mismatch() {
    let a = DiffusionState {
        x: sino(vec![0.3]),
        t: 4.0,
    };
    let b = DiffusionState {
        x: sino(vec![0.28]),
        t: 4.0,
    };
    assert!((compute_drift(&a, &b).unwrap().values[0] - 0.02).abs() < 1e-7);
    assert!(compute_drift(&a, &a).unwrap().values.iter().all(|&v| v == 0.0));
    let c = DiffusionState { t: 3.0, ..b };
    assert!(compute_drift(&a, &c).is_err());
}

#[test]
fn correction_cases() {
    let truth = DiffusionState {
        x: sino(vec![0.3, 0.5]),
        t: 10.0,
    };
    let x_hat = DiffusionState {
        x: sino(vec![0.28, 0.55]),
        t: 10.0,
    };
    let gamma = compute_drift(&truth, &x_hat).unwrap();
    let none = apply_correction(&x_hat, &gamma, &linear(20, 0.0), CorrectionSign::Plus).unwrap();
    assert_eq!(none, x_hat);
    let full = apply_correction(&x_hat, &gamma, &linear(20, 1.0), CorrectionSign::Plus).unwrap();
    for (a, b) in full.x.values.iter().zip(&truth.x.values) {
        assert!((a - b).abs() < 1e-6);
    }
    let half = apply_correction(&x_hat, &gamma, &linear(20, 0.5), CorrectionSign::Plus).unwrap();
    let left = compute_drift(&truth, &half).unwrap().norm();
    assert!((left - 0.5 * gamma.norm()).abs() < 1e-6);
    let flipped = apply_correction(&x_hat, &gamma, &linear(20, 1.0), CorrectionSign::Minus).unwrap();
    assert!((flipped.x.values[0] - 0.26).abs() < 1e-6);
}

#[test]
fn oracle_reverse_recovers_full_dose() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = linear(500, 0.0);
    let x_f = random_sino(&mut rng, 12, 10);
    let x_l = random_sino(&mut rng, 12, 10);
    let oracle = ConstantResidual(residual(&x_l, &x_f).unwrap());
    for t_s in [1, 7, 30, 500] {
        let grid = TimeGrid::new(t_s, 500).unwrap();
        let out = reconstruct(&x_l, &oracle, None, &s, &grid).unwrap();
        for (a, b) in out.values.iter().zip(&x_f.values) {
            assert!((a - b).abs() <= 1e-4, "t_s={t_s}");
        }
    }
}

#[test]
fn one_shot_grid() {
    let s = linear(500, 0.0);
    let x_l = sino(vec![1.0, 2.0]);
    let eps = field(vec![0.25, -0.5]);
    let out = reconstruct(&x_l, &ConstantResidual(eps), None, &s, &TimeGrid::new(1, 500).unwrap()).unwrap();
    assert_eq!(out.values, vec![0.75, 2.5]);
}

#[test]
fn reconstruct_reports_bad_prediction_shape() {
    let s = linear(10, 1.0);
    let bad = ConstantResidual(field(vec![0.0; 3]));
    let r = reconstruct(&sino(vec![1.0, 2.0]), &bad, None, &s, &TimeGrid::new(2, 10).unwrap());
    assert!(matches!(r, Err(RedError::ShapeMismatch { .. })));
}

#[test]
fn reconstruct_is_repeatable_and_calls_drift_estimator() {
    let s = linear(100, 0.7);
    let grid = TimeGrid::new(9, 100).unwrap();
    let x_l = sino(vec![0.5, 0.25, 0.125]);
    let ren = |x: &Sinogram, t: f64| {
        ResidualField::from_vec(1, 3, x.values.iter().map(|v| v * (t as f32) * 1e-3).collect())
    };
    let dcn = |x: &Sinogram, _t: f64| ResidualField::from_vec(1, 3, x.values.iter().map(|v| -0.01 * v).collect());
    let a = reconstruct(&x_l, &ren, Some(&dcn), &s, &grid).unwrap();
    let b = reconstruct(&x_l, &ren, Some(&dcn), &s, &grid).unwrap();
    assert_eq!(a, b);
    let plain = reconstruct(&x_l, &ren, None, &s, &grid).unwrap();
    assert_ne!(a, plain);
    let mut seen = 0;
    reconstruct_with(&x_l, &ren, Some(&dcn), &s, &grid, ReverseOptions::default(), |k, st| {
        assert_eq!(st.t, grid.times[k]);
        seen += 1;
    })
    .unwrap();
    assert_eq!(seen, 10);
}

#[test]
fn mixed_sampling_cases() {
    let s = linear(10, 1.0);
    let (f, l) = (sino(vec![0.2, 0.4, 0.9]), sino(vec![0.5, 0.1, 0.9]));
    let (plain, _) = mixed_forward_sample(&f, &l, &s, 6.0, 0.0, 3, MixedMode::Supervised).unwrap();
    assert_eq!(plain, forward_sample(&f, &l, &s, 6.0).unwrap());
    for mode in [MixedMode::Supervised, MixedMode::Unsupervised] {
        let (st, _) = mixed_forward_sample(&f, &l, &s, 0.0, 0.3, 3, mode).unwrap();
        assert_eq!(st.x.values, f.values);
    }
    assert!(mixed_forward_sample(&f, &l, &s, 6.0, -1.0, 3, MixedMode::Supervised).is_err());
    let (st, eps) = mixed_forward_sample(&f, &l, &s, 10.0, 0.2, 3, MixedMode::Supervised).unwrap();
    // at t_max the state is the noisy low-dose input x_F + eps
    for i in 0..3 {
        assert!((st.x.values[i] - (f.values[i] + eps.values[i])).abs() < 1e-6);
    }
}

#[test]
fn unsupervised_noise_is_zero_mean() {
    let s = linear(10, 1.0);
    let f = sino(vec![0.3]);
    let n = 10_000;
    let sigma = 0.05;
    let mean = (0..n)
        .map(|seed| {
            mixed_forward_sample(&f, &f, &s, 5.0, sigma, seed, MixedMode::Unsupervised)
                .unwrap()
                .0
                .x
                .values[0] as f64
        })
        .sum::<f64>()
        / n as f64;
    let se = 0.5 * sigma / (n as f64).sqrt();
    assert!((mean - 0.3).abs() < 4.0 * se, "mean {mean}");
}

proptest! {
    #[test]
    fn forward_sample_stays_in_hull(
        pairs in prop::collection::vec((0.0f32..1.0, 0.0f32..1.0), 1..32),
        t in 0.0f64..=50.0,
        cos in any::<bool>(),
    ) {
        let kind = if cos { ScheduleKind::Cosine } else { ScheduleKind::Linear };
        let s = ResidualSchedule::new(50, kind, 1.0).unwrap();
        let f = sino(pairs.iter().map(|p| p.0).collect());
        let l = sino(pairs.iter().map(|p| p.1).collect());
        let st = forward_sample(&f, &l, &s, t).unwrap();
        for (i, &x) in st.x.values.iter().enumerate() {
            let (lo, hi) = (f.values[i].min(l.values[i]), f.values[i].max(l.values[i]));
            prop_assert!(lo <= x && x <= hi);
        }
    }

    #[test]
    fn oracle_reverse_inverts_every_grid(t_s in 1usize..=200, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = linear(200, 0.0);
        let x_f = random_sino(&mut rng, 3, 4);
        let x_l = random_sino(&mut rng, 3, 4);
        let oracle = ConstantResidual(residual(&x_l, &x_f).unwrap());
        let out = reconstruct(&x_l, &oracle, None, &s, &TimeGrid::new(t_s, 200).unwrap()).unwrap();
        for (a, b) in out.values.iter().zip(&x_f.values) {
            prop_assert!((a - b).abs() <= 1e-4);
        }
    }
}
