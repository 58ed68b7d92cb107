//! Simulation oracles for the risk statistics.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use plasma_profiles::design::{AdditiveModelSpec, Constraint, DesignSystem, Regressor, TermBlock, TermSpec};
use plasma_profiles::risk::{gcv, sigma2_cw};
use plasma_profiles::selection::{optimize_lambdas, Criterion, LambdaGrid};
use plasma_profiles::solver::solve;

fn unpenalized_blocks(p: usize) -> Vec<TermBlock> {
    (0..p)
        .map(|i| TermBlock {
            label: format!("c{i}"),
            term: TermSpec::new(Regressor::Intercept, Constraint::Constant),
            cols: i..i + 1,
            penalty: DMatrix::zeros(1, 1),
        })
        .collect()
}

fn noise(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

#[test]
fn variance_estimate_tracks_truth() {
    let (n, p, sd) = (200, 10, 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = DMatrix::from_fn(n, p, |_, _| noise(&mut rng));
    let mut estimates = vec![];
    for _ in 0..100 {
        let y = DVector::from_fn(n, |i, _| x[(i, 0)] + sd * noise(&mut rng));
        let sys = DesignSystem::from_parts(x.clone(), y, DVector::from_element(n, 1.0), unpenalized_blocks(p)).unwrap();
        let fit = solve(&sys, &vec![0.0; p]).unwrap();
        estimates.push(sigma2_cw(&fit, sys.k_matrix(), n).unwrap());
    }
    estimates.sort_by(f64::total_cmp);
    let median = 0.5 * (estimates[49] + estimates[50]);
    assert!((median / (sd * sd) - 1.0).abs() < 0.2, "{median}");
}

#[test]
fn gcv_approaches_mean_square_residual() {
    let (n, p) = (10_000, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = DMatrix::from_fn(n, p, |_, _| noise(&mut rng));
    let y = DVector::from_fn(n, |_, _| noise(&mut rng));
    let sys = DesignSystem::from_parts(x, y, DVector::from_element(n, 1.0), unpenalized_blocks(p)).unwrap();
    let fit = solve(&sys, &vec![0.0; p]).unwrap();
    let g = gcv(&fit, sys.k_matrix(), n).unwrap();
    let limit = fit.rss_weighted / n as f64;
    assert!((g / limit - 1.0).abs() < 0.01);
}

/// Pure-noise data: the straight line is the right model, a free spline the
/// richer alternative.
fn nested_systems(rng: &mut ChaCha8Rng) -> (DesignSystem, DesignSystem) {
    let basis = AdditiveModelSpec::default_basis();
    let k = basis.len();
    let n = 60;
    let psi: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / n as f64).collect();
    let y = DVector::from_fn(n, |_, _| noise(rng));
    let w = DVector::from_element(n, 1.0);
    let line = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { psi[i] });
    let small = DesignSystem::from_parts(line, y.clone(), w.clone(), unpenalized_blocks(2)).unwrap();
    let x = DMatrix::from_fn(n, k, |i, j| basis.eval(psi[i]).unwrap()[j]);
    let block = TermBlock {
        label: "f".into(),
        term: TermSpec::intercept(),
        cols: 0..k,
        penalty: basis.penalty_matrix(),
    };
    let large = DesignSystem::from_parts(x, y, w, vec![block]).unwrap();
    (small, large)
}

#[test]
fn rice_is_at_least_as_selective_as_gcv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = LambdaGrid::default();
    let (mut rice_small, mut gcv_small) = (0, 0);
    for _ in 0..200 {
        let (small, large) = nested_systems(&mut rng);
        let base = solve(&small, &[0.0, 0.0]).unwrap();
        for (criterion, count) in [(Criterion::Rice, &mut rice_small), (Criterion::Gcv, &mut gcv_small)] {
            let small_value = criterion.value(base.rss_weighted, base.trace_kg, small.n_measured);
            let large_value = optimize_lambdas(&large, criterion, &grid).ok().map(|o| o.value);
            match (small_value, large_value) {
                (Some(s), Some(l)) if s <= l => *count += 1,
                (Some(_), None) => *count += 1,
                _ => {}
            }
        }
    }
    assert!(rice_small >= gcv_small, "rice {rice_small} gcv {gcv_small}");
    assert!(rice_small > 100);
}
