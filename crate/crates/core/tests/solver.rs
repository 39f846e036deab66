mod common;

use common::*;
use ptreg::constraints::count_nonzero;
use ptreg::solver::{fit, SolverConfig, SolverWorkspace};
use ptreg::tensor::ObservationMask;
use ptreg::{CpModel, Error, RegressionDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALPHA_FLOOR: f64 = 1e-8;

/// Small random problem with a random start of the same rank.
fn small_problem(seed: u64) -> (RegressionDataset, CpModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let dims = [rng.random_range(2..=4), rng.random_range(2..=3), 2];
    let q = rng.random_range(1..=3);
    let n = rng.random_range(q + 2..=6);
    let rank = rng.random_range(1..=2);
    let inst = random_instance(seed, &dims, q, n, rank, 0.7, 0.5);
    (inst.data, random_start(seed + 1000, &dims, q, rank))
}

fn tol(reference: &[f64]) -> f64 {
    1e-8 * reference.iter().fold(1.0f64, |m, v| m.max(v.abs()))
}

#[test]
fn factor_update_matches_least_squares_oracle() {
    for seed in 0..60 {
        let (data, start) = small_problem(seed);
        let raw = RawModel::from_model(&start);
        let mut ws = SolverWorkspace::new(&data, &start, ALPHA_FLOOR).unwrap();
        for k in 0..start.rank() {
            for j in 0..3 {
                let got = ws.update_factor_elementwise(k, j).unwrap();
                let want = oracle_factor(&data, &raw, k, j);
                assert!(
                    max_abs_diff(&got, &want) < tol(&want),
                    "seed {seed} k {k} j {j}: {got:?} vs {want:?}"
                );
            }
        }
    }
}

#[test]
fn weight_update_matches_scalar_oracle() {
    for seed in 0..60 {
        let (data, start) = small_problem(seed);
        let raw = RawModel::from_model(&start);
        let k = start.rank() - 1;
        let want = oracle_weight(&data, &raw, k);
        let mut ws = SolverWorkspace::new(&data, &start, ALPHA_FLOOR).unwrap();
        let got = ws.update_weight(k).unwrap();
        assert!(
            (got - want.abs()).abs() < tol(&[want]),
            "seed {seed}: {got} vs {want}"
        );
        let sign = if want < 0.0 { -1.0 } else { 1.0 };
        let expected_b1: Vec<f64> = start.factor(k, 0).iter().map(|v| sign * v).collect();
        assert_eq!(ws.factor(k, 0), expected_b1.as_slice());
    }
}

#[test]
fn covariate_update_matches_oracle() {
    for seed in 0..60 {
        let (data, start) = small_problem(seed);
        let raw = RawModel::from_model(&start);
        let k = 0;
        let want = oracle_covariate(&data, &raw, k);
        let mut ws = SolverWorkspace::new(&data, &start, ALPHA_FLOOR).unwrap();
        let c = ws.update_covariate_factor(k).unwrap();
        let w = ws.weights()[k];
        let got: Vec<f64> = c.iter().map(|v| v * w).collect();
        assert!(
            max_abs_diff(&got, &want) < tol(&want),
            "seed {seed}: {got:?} vs {want:?}"
        );
        assert!((c.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-14);
        let alpha: Vec<f64> = data
            .covariates()
            .iter()
            .map(|x| c.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        assert!(max_abs_diff(ws.alpha(k), &alpha) < 1e-15);
    }
}

#[test]
fn factor_update_is_coordinatewise_optimal() {
    for seed in 0..30 {
        let (data, start) = small_problem(seed);
        let mut ws = SolverWorkspace::new(&data, &start, ALPHA_FLOOR).unwrap();
        for j in 0..3 {
            let update = ws.update_factor_elementwise(0, j).unwrap();
            let mut at = RawModel::from_model(&start);
            at.factors[0][j] = update.clone();
            let base = loss(&data, &at);
            for t in 0..update.len() {
                for delta in [1e-3, -1e-3] {
                    let mut moved = at.clone();
                    moved.factors[0][j][t] += delta;
                    assert!(
                        loss(&data, &moved) >= base - 1e-12,
                        "seed {seed} j {j} t {t}"
                    );
                }
            }
        }
    }
}

#[test]
fn norm_absorption_preserves_predictions() {
    for seed in 0..20 {
        let (data, start) = small_problem(seed);
        let mut ws = SolverWorkspace::new(&data, &start, ALPHA_FLOOR).unwrap();
        let k = 0;
        ws.update_weight(k).unwrap();
        let v = oracle_covariate(&data, &RawModel::from_model(&ws.model().unwrap()), k);
        ws.update_covariate_factor(k).unwrap();
        let model = ws.model().unwrap();
        let mut raw = RawModel::from_model(&model);
        raw.factors[k][3] = v;
        raw.weights[k] = 1.0;
        for x in data.covariates() {
            let pred = model.predict(x).unwrap();
            for (idx, got) in indices(data.response_dims()).iter().zip(pred.data()) {
                let want = prediction_entry(&raw, x, idx);
                assert!(
                    (got - want).abs() <= 1e-10 * want.abs().max(1.0),
                    "seed {seed}"
                );
            }
        }
    }
}

#[test]
fn one_sweep_matches_dense_reference_sweep() {
    let dims = [4, 3, 2];
    for seed in 0..5 {
        let inst = random_instance(seed, &dims, 2, 5, 1, 1.0, 0.3);
        let start = random_start(seed + 77, &dims, 2, 1);
        let mut config = SolverConfig::unconstrained(1, &dims);
        config.max_iterations = 1;
        let report = fit(&inst.data, &config, &start).unwrap();
        assert_eq!(report.iterations, 1);
        let reference = oracle_sweep(&inst.data, &RawModel::from_model(&start));
        let reference = CpModel::new(dims.to_vec(), 2, reference.weights, reference.factors)
            .unwrap()
            .canonicalized();
        let got = &report.model;
        assert!((got.weights()[0] - reference.weights()[0]).abs() < 1e-12 * reference.weights()[0]);
        for j in 0..4 {
            assert!(
                max_abs_diff(got.factor(0, j), reference.factor(0, j)) < 1e-12,
                "seed {seed} mode {j}"
            );
        }
    }
}

#[test]
fn two_component_sweep_matches_reference() {
    let dims = [4, 3, 2];
    let inst = random_instance(9, &dims, 3, 6, 2, 0.8, 0.2);
    let start = random_start(10, &dims, 3, 2);
    let mut config = SolverConfig::unconstrained(2, &dims);
    config.max_iterations = 1;
    let report = fit(&inst.data, &config, &start).unwrap();
    let reference = oracle_sweep(&inst.data, &RawModel::from_model(&start));
    let reference = CpModel::new(dims.to_vec(), 3, reference.weights, reference.factors).unwrap();
    assert!(coefficient_gap(&report.model, &reference) < 1e-9);
}

#[test]
fn unconstrained_trace_is_monotone() {
    for seed in 0..10 {
        let inst = random_instance(seed, &[5, 4, 3], 2, 8, 2, 0.6, 0.5);
        let start = random_start(seed + 3, &[5, 4, 3], 2, 2);
        let report = fit(
            &inst.data,
            &SolverConfig::unconstrained(2, &[5, 4, 3]),
            &start,
        )
        .unwrap();
        for w in report.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "seed {seed}: {:?}", report.trace);
        }
        let direct = loss(&inst.data, &RawModel::from_model(&report.model));
        assert!((direct - report.final_loss()).abs() < 1e-10 * direct.max(1.0));
    }
}

#[test]
fn truth_is_a_fixed_point_on_noiseless_data() {
    let dims = [5, 4, 3];
    let inst = random_instance(21, &dims, 2, 10, 2, 0.8, 0.0);
    let report = fit(
        &inst.data,
        &SolverConfig::unconstrained(2, &dims),
        &inst.model,
    )
    .unwrap();
    assert!(report.converged);
    assert_eq!(report.iterations, 1);
    assert!(report.final_loss() < 1e-20);
    assert!(coefficient_gap(&report.model, &inst.model) < 1e-10);
}

#[test]
fn fit_is_invariant_to_sample_order() {
    let dims = [5, 4, 3];
    let inst = random_instance(31, &dims, 2, 9, 2, 0.7, 0.3);
    let start = random_start(32, &dims, 2, 2);
    let config = SolverConfig::new(2, vec![4, 3, 3], vec![3, 4, 2]);
    let a = fit(&inst.data, &config, &start).unwrap();
    let mut order: Vec<usize> = (0..inst.data.n()).collect();
    order.reverse();
    order.swap(1, 4);
    let b = fit(&inst.data.permuted(&order).unwrap(), &config, &start).unwrap();
    assert_eq!(a.iterations, b.iterations);
    assert!(coefficient_gap(&a.model, &b.model) < 1e-9);
    for (fa, fb) in a
        .model
        .factors()
        .iter()
        .flatten()
        .zip(b.model.factors().iter().flatten())
    {
        assert!(max_abs_diff(fa, fb) < 1e-9);
    }
}

#[test]
fn constrained_fit_respects_levels() {
    let dims = [10, 8, 6];
    let inst = random_instance(41, &dims, 3, 20, 2, 0.6, 0.5);
    let start = random_start(42, &dims, 3, 2);
    let config = SolverConfig::new(2, vec![4, 3, 6], vec![3, 2, 2]);
    let report = fit(&inst.data, &config, &start).unwrap();
    for comp in report.model.factors() {
        for (j, f) in comp.iter().enumerate() {
            assert!((f.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
            if j < 3 {
                assert!(count_nonzero(f) <= config.sparsity[j]);
            }
        }
    }
    let again = fit(&inst.data, &config, &start).unwrap();
    assert_eq!(report.model, again.model);
    assert_eq!(report.trace, again.trace);
}

#[test]
fn exact_recovery_from_noiseless_full_data() {
    let dims = [6, 5, 4];
    let inst = random_instance(51, &dims, 2, 30, 1, 1.0, 0.0);
    let start = random_start(52, &dims, 2, 1);
    let mut config = SolverConfig::unconstrained(1, &dims);
    config.convergence_tol = 1e-12;
    let report = fit(&inst.data, &config, &start).unwrap();
    assert!(coefficient_gap(&report.model, &inst.model) < 1e-8);
}

#[test]
fn empty_masks_are_degenerate() {
    let dims = vec![3, 2, 2];
    let data = RegressionDataset::new(
        vec![vec![1.0, 0.5]; 3],
        vec![ptreg::DenseTensor::zeros(dims.clone()).unwrap(); 3],
        vec![ObservationMask::empty(dims.clone()).unwrap(); 3],
    )
    .unwrap();
    let start = random_start(1, &dims, 2, 1);
    let err = fit(&data, &SolverConfig::unconstrained(1, &dims), &start).unwrap_err();
    assert!(matches!(err, Error::DegenerateUpdate { .. }), "{err:?}");
}

#[test]
fn invalid_configurations_are_rejected() {
    let dims = [3, 3, 2];
    let inst = random_instance(61, &dims, 2, 4, 1, 1.0, 0.1);
    let start = random_start(62, &dims, 2, 1);
    let bad = [
        SolverConfig::new(1, vec![4, 3, 2], vec![3, 3, 2]),
        SolverConfig::new(1, vec![0, 3, 2], vec![3, 3, 2]),
        SolverConfig::new(1, vec![3, 3], vec![3, 3]),
        SolverConfig::new(2, vec![3, 3, 2], vec![3, 3, 2]),
    ];
    for config in bad {
        assert!(fit(&inst.data, &config, &start).is_err(), "{config:?}");
    }
    let mut zero_iters = SolverConfig::unconstrained(1, &dims);
    zero_iters.max_iterations = 0;
    assert!(fit(&inst.data, &zero_iters, &start).is_err());
}
