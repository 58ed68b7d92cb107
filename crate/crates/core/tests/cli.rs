use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use plasma_profiles::dataset::{write_profiles, ProfileRecord};
use plasma_profiles::diffusivity::{forward_temperature, synthetic_conditions, write_conditions, ChiModel};
use plasma_profiles::synthetic::{interpolate, table1_ranges};
use plasma_profiles::{design::TermSpec, diffusivity::chi_basis, model::FittedModel};

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plasma-profiles"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(&o));
    o
}

#[test]
fn fit_reports_every_metric() {
    let dir = tempfile::tempdir().unwrap();
    ok(run(&["simulate", "--model", "builtin:table3", "--seed", "4", "--out", "sim.ndjson"], dir.path()));
    let o = ok(run(&["fit", "--input", "sim.ndjson", "--spec", "full", "--out", "model.json"], dir.path()));
    let text = stdout(&o);
    for key in ["mae_ev\t", "mae_percent\t", "log_rmse\t", "rice\t", "dof_effective\t"] {
        let line = text.lines().find(|l| l.starts_with(key)).unwrap_or_else(|| panic!("missing {key}"));
        let v: f64 = line[key.len()..].parse().unwrap();
        assert!(v.is_finite() && v > 0.0, "{line}");
    }
    let model = FittedModel::load(dir.path().join("model.json")).unwrap();
    assert_eq!(model.terms.len(), 5);
    assert!(model.metrics.is_some() && model.risk.is_some());
}

#[test]
fn noiseless_fit_then_tabulate_reproduces_table() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(run(&["simulate", "--model", "builtin:table3", "--noise", "0", "--seed", "1", "--out", "sim.ndjson"], p));
    ok(run(
        &["fit", "--input", "sim.ndjson", "--raw", "--normalization", "builtin:table3", "--out", "m.json"],
        p,
    ));
    let fitted = stdout(&ok(run(&["tabulate", "--model", "m.json"], p)));
    let table = stdout(&ok(run(&["tabulate", "--model", "builtin:table3"], p)));
    let rows = |t: &str| -> Vec<Vec<f64>> {
        t.lines()
            .skip(1)
            .map(|l| l.split('\t').map(|v| v.parse().unwrap()).collect())
            .collect()
    };
    let (a, b) = (rows(&fitted), rows(&table));
    assert_eq!(a.len(), 21);
    assert_eq!(fitted.lines().next(), table.lines().next());
    for (ra, rb) in a.iter().zip(&b) {
        for (x, y) in ra.iter().zip(rb) {
            assert!((x - y).abs() <= 1e-3, "{ra:?} vs {rb:?}");
        }
    }
}

#[test]
fn tabulate_matches_published_rows() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&ok(run(&["tabulate", "--model", "builtin:table3"], dir.path())));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "psi\tf_0\tf_Ip\tf_Bt\tf_nbar\tf_qgeo");
    assert_eq!(lines[1], "-1.0\t0.2376\t0.5057\t0.0776\t-0.3013\t-0.3879");
    assert_eq!(lines[11], "0.0\t2.0271\t0.4838\t0.9820\t-0.5261\t-0.1179");
    let reduced = stdout(&ok(run(&["tabulate", "--model", "builtin:table4"], dir.path())));
    assert_eq!(reduced.lines().next(), Some("psi\tf_0\tf_q95\tf_Ip\tf_Bt\tf_nbar"));
    let ip: Vec<&str> = reduced.lines().skip(1).map(|l| l.split('\t').nth(3).unwrap()).collect();
    assert!(ip.iter().all(|v| *v == "0.6868"), "{ip:?}");
}

#[test]
fn exit_codes_classify_failures() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let missing = run(&["fit", "--input", "nope.ndjson"], p);
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("nope.ndjson"));

    let bad_step = run(&["tabulate", "--model", "builtin:table3", "--step", "0.3"], p);
    assert_eq!(bad_step.status.code(), Some(2));
    let bad_spec = run(&["tabulate", "--model", "builtin:nothing"], p);
    assert_eq!(bad_spec.status.code(), Some(2));

    // one four-point profile cannot support a 24-function spline
    let rec = ProfileRecord::new(
        "tiny",
        vec![-0.5, -0.1, 0.2, 0.6],
        vec![1000.0, 1500.0, 1400.0, 900.0],
        vec![50.0; 4],
        BTreeMap::new(),
    );
    write_profiles(p.join("tiny.ndjson"), &[rec]).unwrap();
    let rich = run(&["fit", "--input", "tiny.ndjson", "--raw", "--spec", "intercept"], p);
    assert_eq!(rich.status.code(), Some(3), "{}", stderr(&rich));
    assert!(stderr(&rich).contains("over-parameterized"));
}

#[test]
fn simulation_is_seeded_and_within_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let a = ok(run(&["simulate", "--model", "builtin:table3", "--seed", "9"], p)).stdout;
    let b = ok(run(&["simulate", "--model", "builtin:table3", "--seed", "9"], p)).stdout;
    let c = ok(run(&["simulate", "--model", "builtin:table3", "--seed", "10"], p)).stdout;
    assert_eq!(a, b);
    assert_ne!(a, c);
    let ranges = table1_ranges();
    let text = String::from_utf8(a).unwrap();
    let records: Vec<ProfileRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 43);
    for r in &records {
        assert_eq!(r.psi.len(), 50);
        for (cov, range) in &ranges {
            let v = r.covariates[cov.name()];
            assert!(v >= range.lo && v <= range.hi);
        }
    }
}

#[test]
fn predict_on_grid_and_at_points() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let grid = stdout(&ok(run(
        &["predict", "--model", "builtin:table3", "--at", "Ip=2.552,Bt=2.710,nbar=2.171,q95=4.150"],
        p,
    )));
    assert_eq!(grid.lines().count(), 22);
    // at the reference covariates the prediction is exp(f_0)
    let centre: f64 = grid.lines().nth(11).unwrap().split('\t').nth(1).unwrap().parse().unwrap();
    let q = 4.150 * 2.552 / 2.710;
    let expected = (2.0271 - 0.1179 * (q / 4.150f64).ln()).exp();
    assert!((centre - expected).abs() / expected < 2e-3, "{centre} {expected}");
    ok(run(&["simulate", "--model", "builtin:table3", "--n-profiles", "2", "--out", "s.ndjson"], p));
    let pts = stdout(&ok(run(&["predict", "--model", "builtin:table3", "--input", "s.ndjson"], p)));
    assert_eq!(pts.lines().count(), 101);
    assert!(run(&["predict", "--model", "builtin:table3"], p).status.code() == Some(2));
}

#[test]
fn select_prints_trace_and_stop_reason() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(run(&["simulate", "--model", "builtin:table3", "--n-profiles", "20", "--out", "s.ndjson"], p));
    let o = ok(run(
        &["select", "--input", "s.ndjson", "--candidates", "Ip,Zeff", "--max-stages", "2", "--out", "t.json"],
        p,
    ));
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.starts_with("stop\t")), "{text}");
    let trace: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("t.json")).unwrap()).unwrap();
    assert_eq!(trace["selected"][0], "Ip");
}

#[test]
fn chi_fit_writes_a_positive_diffusivity() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let basis = chi_basis(9).unwrap();
    let x: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let y: Vec<f64> = x.iter().map(|r| (0.8 + r * r).ln()).collect();
    let truth: ChiModel =
        FittedModel::from_coefficients(basis.clone(), vec![(TermSpec::intercept(), interpolate(&basis, &x, &y).unwrap())], BTreeMap::new())
            .unwrap();
    let mut records = vec![];
    let mut conds = vec![];
    for d in 0..3 {
        let cond = synthetic_conditions(&format!("d{d}"), 41, 3.0, 2e5 * (1.0 + d as f64), 0.4, 90.0, 1.0);
        let prof = forward_temperature(&truth, &cond, 201).unwrap();
        let psi: Vec<f64> = (0..30).map(|j| -0.95 + j as f64 * 1.9 / 29.0).collect();
        let temp: Vec<f64> = psi.iter().map(|v| prof.at(v.abs())).collect();
        let sigma = temp.iter().map(|t| 0.02 * t).collect();
        records.push(ProfileRecord::new(cond.id.clone(), psi, temp, sigma, BTreeMap::new()));
        conds.push(cond);
    }
    write_profiles(p.join("p.ndjson"), &records).unwrap();
    write_conditions(p.join("c.ndjson"), &conds).unwrap();
    let o = ok(run(
        &["chi-fit", "--input", "p.ndjson", "--raw", "--conditions", "c.ndjson", "--lambda", "1e-6", "--out", "chi.json"],
        p,
    ));
    assert!(stdout(&o).contains("iterations\t"));
    let fit = FittedModel::load(p.join("chi.json")).unwrap();
    for i in 1..10 {
        let r = i as f64 / 10.0;
        let g = fit.term_value(0, r).unwrap();
        assert!((g - (0.8 + r * r).ln()).abs() < 0.05, "rho={r}: {g}");
    }
    let missing = run(&["chi-fit", "--input", "p.ndjson", "--conditions", "none.ndjson"], p);
    assert_eq!(missing.status.code(), Some(1));
}
