use std::convert::Infallible;

use nalgebra::{DMatrix, DVector};
use opinv::linear_theory::{fixed_point_errors, solve_fixed_point, unit_direction, verify_error_bound, LinearModel};
use opinv::uki::{run_uki, GaussianState, UkiConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scalar(y: f64) -> LinearModel {
    let one = DMatrix::from_element(1, 1, 1.0);
    LinearModel {
        g: one.clone(),
        sigma_eta: one.clone(),
        sigma_omega: one,
        alpha: 1.0,
        r0: DVector::zeros(1),
        y: DVector::from_element(1, y),
    }
}

proptest! {
    #[test]
    fn scalar_fixed_point_is_the_golden_ratio(y in -50.0f64..50.0) {
        let fp = solve_fixed_point(&scalar(y), 1e-15, 10_000).unwrap();
        // C(C + 1) = 1
        let golden = (5f64.sqrt() - 1.0) / 2.0;
        prop_assert!((fp.c_inf[(0, 0)] - golden).abs() < 1e-8);
        prop_assert!((fp.r_inf[0] - y).abs() < 1e-8 * y.abs().max(1.0));
    }
}

#[test]
fn uki_trajectories_converge_to_the_fixed_point() {
    for seed in 0..5 {
        let model = LinearModel::random(4, 3, if seed % 2 == 0 { 1.0 } else { 0.6 }, seed);
        let fp = solve_fixed_point(&model, 1e-12, 100_000).unwrap();
        let cfg = UkiConfig {
            alpha: model.alpha,
            sigma_omega: model.sigma_omega.clone(),
            sigma_eta: model.sigma_eta.clone(),
            r0: model.r0.clone(),
            iterations: 100,
        };
        let g = model.g.clone();
        let fwd = move |m: &[f64]| -> Result<Vec<f64>, Infallible> { Ok((&g * DVector::from_column_slice(m)).as_slice().to_vec()) };
        let state0 = GaussianState::new(DVector::from_element(3, 2.0), DMatrix::identity(3, 3)).unwrap();
        let run = run_uki(&state0, &fwd, &model.y, &cfg).unwrap();
        let last = run.states.last().unwrap();
        assert!((&last.r - &fp.r_inf).amax() < 1e-6, "seed {seed}");
        assert!((&last.c - &fp.c_inf).amax() < 1e-6, "seed {seed}");
    }
}

#[test]
fn halving_the_perturbation_halves_the_mean_error() {
    let model = LinearModel::random(4, 4, 1.0, 11);
    let fp = solve_fixed_point(&model, 1e-15, 100_000).unwrap();
    let e = unit_direction(4, 4, 5);
    let coarse = fixed_point_errors(&model, &fp, &e, 1e-2).unwrap();
    let fine = fixed_point_errors(&model, &fp, &e, 5e-3).unwrap();
    let ratio = coarse.mean_error / fine.mean_error;
    assert!((1.5..=2.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn errors_are_invariant_under_orthogonal_changes_of_parameter_basis() {
    let model = LinearModel::random(4, 4, 0.8, 3);
    let e = unit_direction(4, 4, 9);
    let q = DMatrix::from_vec(4, 4, opinv::grf::standard_normal_vec(16, &mut ChaCha8Rng::seed_from_u64(1)))
        .qr()
        .q();
    let rotated = LinearModel {
        g: &model.g * &q,
        sigma_omega: q.transpose() * &model.sigma_omega * &q,
        r0: q.transpose() * &model.r0,
        ..model.clone()
    };
    let eps = 1e-2;
    let base = fixed_point_errors(&model, &solve_fixed_point(&model, 1e-15, 100_000).unwrap(), &e, eps).unwrap();
    let rot = fixed_point_errors(&rotated, &solve_fixed_point(&rotated, 1e-15, 100_000).unwrap(), &(&e * &q), eps).unwrap();
    assert!((base.mean_error - rot.mean_error).abs() < 1e-8 * base.mean_error.max(1.0));
    assert!((base.precision_error - rot.precision_error).abs() < 1e-8 * base.precision_error.max(1.0));
}

#[test]
fn error_scaling_is_first_order_on_random_models() {
    for seed in 0..5 {
        let model = LinearModel::random(4, 4, 1.0, seed);
        let report = verify_error_bound(&model, &[1e-1, 1e-2, 1e-3, 1e-4], seed).unwrap();
        assert!(report.passed, "seed {seed}: {} {}", report.mean_slope, report.precision_slope);
    }
}
