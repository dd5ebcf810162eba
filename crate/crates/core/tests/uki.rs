use std::convert::Infallible;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use opinv::linear_theory::{solve_fixed_point, LinearModel};
use opinv::uki::{run_uki, uki_step, GaussianState, UkiConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gauss(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = gauss(rng, n, n);
    &a * a.transpose() + DMatrix::identity(n, n) * 0.5
}

/// Textbook Kalman analysis for `y = A m + b`, using an explicit inverse.
fn kalman_oracle(
    state: &GaussianState,
    cfg: &UkiConfig,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    y: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let r_hat = &state.r * cfg.alpha + &cfg.r0 * (1.0 - cfg.alpha);
    let c_hat = &state.c * cfg.alpha.powi(2) + &cfg.sigma_omega;
    let s = a * &c_hat * a.transpose() + &cfg.sigma_eta;
    let k = &c_hat * a.transpose() * s.try_inverse().unwrap();
    let r = &r_hat + &k * (y - (a * &r_hat + b));
    let c = &c_hat - &k * a * &c_hat;
    (r, c)
}

#[test]
fn affine_models_match_the_kalman_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..25 {
        let nm = rng.random_range(1..=5);
        let ny = rng.random_range(1..=6);
        let a = gauss(&mut rng, ny, nm) * 2.0;
        let b = DVector::from_fn(ny, |_, _| rng.random_range(-1.0..1.0));
        let state = GaussianState::new(DVector::from_fn(nm, |_, _| rng.random_range(-1.0..1.0)), spd(&mut rng, nm)).unwrap();
        let cfg = UkiConfig {
            alpha: rng.random_range(0.1..=1.0),
            sigma_omega: spd(&mut rng, nm),
            sigma_eta: spd(&mut rng, ny),
            r0: DVector::from_fn(nm, |_, _| rng.random_range(-1.0..1.0)),
            iterations: 1,
        };
        let y = DVector::from_fn(ny, |_, _| rng.random_range(-2.0..2.0));
        let fwd = |m: &[f64]| -> Result<Vec<f64>, Infallible> {
            Ok((&a * DVector::from_column_slice(m) + &b).as_slice().to_vec())
        };
        let next = uki_step(&state, &fwd, &y, &cfg).unwrap();
        let (r, c) = kalman_oracle(&state, &cfg, &a, &b, &y);
        assert!((&next.r - r).amax() < 1e-10);
        assert!((&next.c - c).amax() < 1e-10);
    }
}

#[test]
fn run_counts_forward_calls_and_matches_single_steps() {
    let calls = AtomicUsize::new(0);
    let fwd = |m: &[f64]| -> Result<Vec<f64>, Infallible> {
        calls.fetch_add(1, Ordering::Relaxed);
        Ok(vec![m[0] + m[1] * m[1], m[2].sin(), m[0] * m[2]])
    };
    let state0 = GaussianState::new(DVector::from_vec(vec![0.1, 0.2, 0.3]), DMatrix::identity(3, 3) * 0.5).unwrap();
    let y = DVector::from_vec(vec![1.0, 0.5, -0.2]);
    let mut cfg = UkiConfig::with_defaults(0.7, &DMatrix::identity(3, 3), DMatrix::identity(3, 3) * 0.01, DVector::zeros(3), 6);
    let run = run_uki(&state0, &fwd, &y, &cfg).unwrap();
    assert_eq!(run.states.len(), 6);
    assert_eq!(calls.load(Ordering::Relaxed), 6 * 7);

    cfg.iterations = 1;
    let one = run_uki(&state0, &fwd, &y, &cfg).unwrap();
    assert_eq!(one.states[0], uki_step(&state0, &fwd, &y, &cfg).unwrap());
}

#[test]
fn scalar_fixture_reaches_the_linear_fixed_point() {
    let y = 1.7;
    let model = LinearModel {
        g: DMatrix::from_element(1, 1, 1.0),
        sigma_eta: DMatrix::from_element(1, 1, 1.0),
        sigma_omega: DMatrix::from_element(1, 1, 1.0),
        alpha: 1.0,
        r0: DVector::zeros(1),
        y: DVector::from_element(1, y),
    };
    let fp = solve_fixed_point(&model, 1e-15, 10_000).unwrap();
    let cfg = UkiConfig {
        alpha: 1.0,
        sigma_omega: model.sigma_omega.clone(),
        sigma_eta: model.sigma_eta.clone(),
        r0: model.r0.clone(),
        iterations: 30,
    };
    let fwd = |m: &[f64]| -> Result<Vec<f64>, Infallible> { Ok(m.to_vec()) };
    let state0 = GaussianState::new(DVector::zeros(1), DMatrix::from_element(1, 1, 1.0)).unwrap();
    let run = run_uki(&state0, &fwd, &model.y, &cfg).unwrap();
    let last = run.states.last().unwrap();
    assert!((last.r[0] - fp.r_inf[0]).abs() < 1e-6);
    assert!((last.c[(0, 0)] - fp.c_inf[(0, 0)]).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn analysis_never_inflates_the_predicted_covariance(seed in 0u64..10_000, nm in 1usize..5, ny in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gauss(&mut rng, ny, nm);
        let state = GaussianState::new(DVector::zeros(nm), spd(&mut rng, nm)).unwrap();
        let cfg = UkiConfig {
            alpha: rng.random_range(0.1..=1.0),
            sigma_omega: spd(&mut rng, nm),
            sigma_eta: spd(&mut rng, ny),
            r0: DVector::zeros(nm),
            iterations: 1,
        };
        let fwd = |m: &[f64]| -> Result<Vec<f64>, Infallible> {
            let v = &a * DVector::from_column_slice(m);
            Ok(v.iter().map(|x| x + 0.1 * x.powi(3)).collect())
        };
        let y = DVector::from_element(ny, 0.3);
        let next = uki_step(&state, &fwd, &y, &cfg).unwrap();
        prop_assert!((&next.c - next.c.transpose()).amax() < 1e-12);
        prop_assert!(next.c.clone().cholesky().is_some());
        let c_hat = &state.c * cfg.alpha.powi(2) + &cfg.sigma_omega;
        let gap = (c_hat - &next.c).symmetric_eigenvalues();
        prop_assert!(gap.min() > -1e-9);
    }
}
