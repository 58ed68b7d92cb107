//! Simulation oracles for the symmetry, constant-reduction and forward
//! selection procedures.

use plasma_profiles::dataset::{Covariate, ProfileSet};
use plasma_profiles::design::{AdditiveModelSpec, Constraint, Regressor, TermSpec};
use plasma_profiles::error::Error;
use plasma_profiles::model::FittedModel;
use plasma_profiles::selection::{forward_select, reduce_to_constant, test_symmetry, SelectionOptions, StopReason};
use plasma_profiles::synthetic::{simulate_profiles, table3_model, table_psi, tabulated_model, SimulationConfig};

/// Table intercept plus one current term with the given radial shape.
fn current_model(f_ip: impl Fn(f64) -> f64, constraint: Constraint) -> FittedModel {
    let truth = table3_model();
    let psi = table_psi();
    let f0: Vec<f64> = psi.iter().map(|p| truth.term_value(0, *p).unwrap()).collect();
    let fi: Vec<f64> = psi.iter().map(|p| f_ip(*p)).collect();
    tabulated_model(
        AdditiveModelSpec::default_basis(),
        &psi,
        vec![
            (TermSpec::intercept(), f0),
            (TermSpec::new(Regressor::Covariate(Covariate::Ip), constraint), fi),
        ],
        truth.normalization.clone(),
    )
    .unwrap()
}

fn simulate(model: &FittedModel, seed: u64) -> ProfileSet {
    let records = simulate_profiles(model, &SimulationConfig { seed, ..Default::default() }).unwrap();
    ProfileSet::new(records).unwrap().with_normalization(model.normalization.clone())
}

fn ip_spec(constraint: Constraint) -> AdditiveModelSpec {
    AdditiveModelSpec::new(
        vec![TermSpec::intercept(), TermSpec::new(Regressor::Covariate(Covariate::Ip), constraint)],
        AdditiveModelSpec::default_basis(),
    )
    .unwrap()
}

#[test]
fn symmetric_truth_prefers_symmetric_term() {
    // The free variant always gains the unpenalized odd mode `psi`, so it wins
    // by chance about as often as chi2(dtr) > 2 dtr for the extra effective
    // parameters dtr; a sharp symmetric feature keeps dtr large enough.
    let truth = current_model(|p| 0.3 + 1.5 * (-p * p / 0.05).exp(), Constraint::Free);
    let ip = Regressor::Covariate(Covariate::Ip);
    let opts = SelectionOptions::default();
    let wins = (0..100)
        .filter(|&seed| {
            let r = test_symmetry(&simulate(&truth, seed), &ip_spec(Constraint::Free), ip, &opts).unwrap();
            r.recommended == Constraint::Symmetric
        })
        .count();
    assert!(wins >= 90, "{wins}");
}

#[test]
fn asymmetric_intercept_stays_free() {
    let truth = table3_model();
    let opts = SelectionOptions::default();
    for seed in 0..3 {
        let r = test_symmetry(&simulate(&truth, seed), &truth.spec(), Regressor::Intercept, &opts).unwrap();
        assert_eq!(r.recommended, Constraint::Free);
        assert!(r.symmetric_mae > r.free_mae);
    }
}

#[test]
fn symmetry_test_requires_a_free_term() {
    let truth = current_model(|_| 0.5, Constraint::Free);
    let set = simulate(&truth, 0);
    let ip = Regressor::Covariate(Covariate::Ip);
    let r = test_symmetry(&set, &ip_spec(Constraint::Symmetric), ip, &SelectionOptions::default());
    assert!(matches!(r, Err(Error::Argument(_))));
}

#[test]
fn constant_truth_prefers_constant_term() {
    let truth = current_model(|_| 0.69, Constraint::Constant);
    let ip = Regressor::Covariate(Covariate::Ip);
    let opts = SelectionOptions::default();
    let mut wins = 0;
    for seed in 0..30 {
        let r = reduce_to_constant(&simulate(&truth, seed), &ip_spec(Constraint::Free), ip, &opts).unwrap();
        if r.recommended == Constraint::Constant {
            wins += 1;
        }
        assert!((r.constant - 0.69).abs() < 4.0 * r.std_error, "{} +/- {}", r.constant, r.std_error);
    }
    // the spline keeps at least two extra unpenalized modes, which win by
    // chance in roughly one case out of seven
    assert!(wins >= 20, "{wins}/30");
}

#[test]
fn shaped_field_term_stays_a_spline() {
    let truth = table3_model();
    let bt = Regressor::Covariate(Covariate::Bt);
    let opts = SelectionOptions::default();
    for seed in 0..3 {
        let r = reduce_to_constant(&simulate(&truth, seed), &truth.spec(), bt, &opts).unwrap();
        assert_eq!(r.recommended, Constraint::Free);
        assert!(r.constant_mae > r.spline_mae);
    }
}

#[test]
fn selection_is_deterministic_nested_and_monotone() {
    let set = simulate(&table3_model(), 5);
    let candidates = [Covariate::Ip, Covariate::Bt, Covariate::Nbar, Covariate::Zeff, Covariate::Time];
    let opts = SelectionOptions::default();
    let a = forward_select(&set, &candidates, 5, &opts).unwrap();
    let b = forward_select(&set, &candidates, 5, &opts).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    let mut best = a.baseline;
    for (s, stage) in a.stages.iter().enumerate() {
        assert_eq!(stage.seeds, a.selected[..s.min(a.selected.len())].to_vec());
        if let Some(c) = stage.chosen {
            let v = stage.best_value.unwrap();
            assert!(v <= best);
            best = v;
            assert!(stage.results.iter().any(|r| r.covariate == c && r.value == Some(v)));
        }
    }
    assert!(a.selected.starts_with(&[Covariate::Ip]) || a.selected.contains(&Covariate::Ip));
}

#[test]
fn single_candidate_and_time_warning() {
    let truth = current_model(|p| 0.5 + 0.2 * p, Constraint::Free);
    let set = simulate(&truth, 8);
    let opts = SelectionOptions::default();
    let t = forward_select(&set, &[Covariate::Ip], 3, &opts).unwrap();
    assert_eq!(t.selected, vec![Covariate::Ip]);
    assert!(t.stages.len() <= 2);
    assert!(t.warnings.is_empty());
    // nothing but the intercept is active here
    let flat = simulate(&current_model(|_| 0.0, Constraint::Free), 8);
    let noise = forward_select(&flat, &[Covariate::Zeff], 3, &opts).unwrap();
    assert!(noise.selected.is_empty());
    assert_eq!(noise.stop_reason, StopReason::NoImprovement);
    let forced = SelectionOptions {
        tolerance: -1.0,
        ..SelectionOptions::default()
    };
    let timed = forward_select(&set, &[Covariate::Time], 1, &forced).unwrap();
    assert_eq!(timed.selected, vec![Covariate::Time]);
    assert_eq!(timed.warnings.len(), 1);
    assert!(matches!(forward_select(&set, &[], 1, &opts), Err(Error::Argument(_))));
}
