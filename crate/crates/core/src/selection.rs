//! Smoothing-parameter optimization and sequential forward selection.
//!
//! A coordinate step varies one `λ_l` with the others fixed. Writing
//! `A_0 = C + sum_{m != l} λ_m S_m = L L^T` and `L^{-1} S_l L^{-T} = U Λ U^T`,
//! the whole grid for that coordinate costs one eigendecomposition:
//! `(A_0 + λ S_l)^{-1} = Q^T (I + λ Λ)^{-1} Q` with `Q = U^T L^{-1}`.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Covariate, ProfileSet};
use crate::design::{build_design, AdditiveModelSpec, Constraint, DesignSystem, Regressor, TermSpec};
use crate::error::{Error, Result};
use crate::model::{fit_model, FitOptions, FittedModel, LambdaMode};
use crate::risk::{gcv_from_parts, rice_from_parts, CorrelationModel};
use crate::solver::{solve, FitResult};
use crate::spline::SplineBasis;

/// Relative criterion improvement below which selection stops.
pub const DEFAULT_STOP_TOLERANCE: f64 = 0.01;

/// Coordinate passes before giving up on a fixed point.
const MAX_PASSES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    #[default]
    Rice,
    Gcv,
}

impl Criterion {
    /// Criterion value, or `None` when its denominator is not positive.
    pub fn value(self, rss: f64, trace_kg: f64, n: usize) -> Option<f64> {
        match self {
            Criterion::Rice => rice_from_parts(rss, trace_kg, n).ok(),
            Criterion::Gcv => gcv_from_parts(rss, trace_kg, n).ok(),
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Rice => "rice",
            Criterion::Gcv => "gcv",
        })
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rice" => Ok(Criterion::Rice),
            "gcv" => Ok(Criterion::Gcv),
            _ => Err(Error::Argument(format!("unknown criterion `{s}` (expected rice or gcv)"))),
        }
    }
}

/// Geometric grid of multipliers on the per-term scale `tr(C_l) / tr(S_l)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Default for LambdaGrid {
    fn default() -> Self {
        Self {
            lo: 1e-6,
            hi: 1e6,
            n: 25,
        }
    }
}

impl LambdaGrid {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Argument("lambda grid must be nonempty".into()));
        }
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Argument(format!("invalid lambda grid range {lo}:{hi}")));
        }
        if n == 1 && hi != lo {
            return Err(Error::Argument("a one-point lambda grid needs lo == hi".into()));
        }
        Ok(Self { lo, hi, n })
    }

    pub fn multipliers(&self) -> Vec<f64> {
        if self.n == 1 {
            return vec![self.lo];
        }
        let (a, b) = (self.lo.ln(), self.hi.ln());
        (0..self.n)
            .map(|i| (a + (b - a) * i as f64 / (self.n - 1) as f64).exp())
            .collect()
    }

    pub fn middle(&self) -> usize {
        self.n / 2
    }
}

impl FromStr for LambdaGrid {
    type Err = Error;

    /// `lo:hi:n`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Argument(format!("lambda grid `{s}` is not lo:hi:n"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
        Self::new(lo, hi, n)
    }
}

/// Result of a smoothing-parameter search.
#[derive(Debug, Clone)]
pub struct LambdaOptimum {
    pub lambdas: Vec<f64>,
    /// Grid index per term (`None` for unpenalized terms).
    pub indices: Vec<Option<usize>>,
    pub value: f64,
    pub fit: FitResult,
}

pub fn optimize_lambdas(system: &DesignSystem, criterion: Criterion, grid: &LambdaGrid) -> Result<LambdaOptimum> {
    optimize_lambdas_from(system, criterion, grid, &[])
}

/// Coordinate descent over the grid, starting from `start` indices where
/// given and from the grid middle otherwise. Ties keep the earliest grid
/// point and a coordinate only moves on strict improvement.
pub fn optimize_lambdas_from(
    system: &DesignSystem,
    criterion: Criterion,
    grid: &LambdaGrid,
    start: &[Option<usize>],
) -> Result<LambdaOptimum> {
    let mult = grid.multipliers();
    let m = system.blocks.len();
    let scales: Vec<f64> = (0..m).map(|l| system.lambda_scale(l)).collect();
    let penalized: Vec<usize> = (0..m).filter(|&l| system.blocks[l].is_penalized() && scales[l] > 0.0).collect();
    let mut idx: Vec<Option<usize>> = (0..m)
        .map(|l| {
            penalized
                .contains(&l)
                .then(|| start.get(l).copied().flatten().unwrap_or(grid.middle()).min(grid.n - 1))
        })
        .collect();
    let lambdas_of = |idx: &[Option<usize>]| -> Vec<f64> {
        idx.iter()
            .enumerate()
            .map(|(l, i)| i.map_or(0.0, |i| scales[l] * mult[i]))
            .collect()
    };

    for _ in 0..MAX_PASSES {
        if penalized.is_empty() {
            break;
        }
        let mut changed = false;
        for &l in &penalized {
            let mut lambdas = lambdas_of(&idx);
            let values: Vec<f64> = mult.iter().map(|v| scales[l] * v).collect();
            let scan = scan_coordinate(system, &mut lambdas, l, &values, criterion);
            let here = idx[l].unwrap();
            let mut best = (here, scan[here]);
            for (i, v) in scan.iter().enumerate() {
                if let Some(v) = v {
                    if best.1.is_none_or(|b| *v < b) {
                        best = (i, Some(*v));
                    }
                }
            }
            if best.0 != here && better(best.1, scan[here]) {
                idx[l] = Some(best.0);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let lambdas = lambdas_of(&idx);
    let fit = solve(system, &lambdas)?;
    let value = criterion
        .value(fit.rss_weighted, fit.trace_kg, system.n_measured)
        .ok_or(Error::OverParameterized {
            denominator: system.n_measured as f64 - 2.0 * fit.trace_kg,
        })?;
    Ok(LambdaOptimum {
        lambdas,
        indices: idx,
        value,
        fit,
    })
}

fn better(candidate: Option<f64>, incumbent: Option<f64>) -> bool {
    match (candidate, incumbent) {
        (Some(c), Some(i)) => c < i,
        (Some(_), None) => true,
        _ => false,
    }
}

/// Criterion along one coordinate for every grid value.
fn scan_coordinate(
    system: &DesignSystem,
    lambdas: &mut [f64],
    l: usize,
    values: &[f64],
    criterion: Criterion,
) -> Vec<Option<f64>> {
    let n = system.n_measured;
    lambdas[l] = 0.0;
    let a0 = system.gram() + system.penalty(lambdas);
    let Some(chol) = a0.cholesky() else {
        return values
            .iter()
            .map(|&v| {
                lambdas[l] = v;
                solve(system, lambdas)
                    .ok()
                    .and_then(|f| criterion.value(f.rss_weighted, f.trace_kg, n))
            })
            .collect();
    };
    let p = system.num_params();
    let winv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(p, p))
        .expect("Cholesky factor has a positive diagonal");
    let block = &system.blocks[l];
    let wr = winv.columns(block.cols.start, block.cols.len());
    let mut m = &wr * &block.penalty * wr.transpose();
    m = (&m + m.transpose()) * 0.5;
    let eig = m.symmetric_eigen();
    let q = eig.eigenvectors.transpose() * &winv;
    let qb = &q * system.rhs();
    let qk = &q * system.k_matrix();
    let dk: Vec<f64> = (0..p).map(|i| qk.row(i).dot(&q.row(i))).collect();
    let xq = &system.x * q.transpose();
    values
        .iter()
        .map(|&lam| {
            let d: Vec<f64> = eig.eigenvalues.iter().map(|e| 1.0 / (1.0 + lam * e.max(0.0))).collect();
            let gamma = DVector::from_fn(p, |i, _| d[i] * qb[i]);
            let fitted = &xq * gamma;
            let rss = system.rss_measured(&fitted);
            let trace: f64 = d.iter().zip(&dk).map(|(a, b)| a * b).sum();
            criterion.value(rss, trace, n)
        })
        .collect()
}

/// Options shared by the selection procedures.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOptions {
    pub criterion: Criterion,
    pub grid: LambdaGrid,
    pub correlation: CorrelationModel,
    pub basis: SplineBasis,
    pub tolerance: f64,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self {
            criterion: Criterion::Rice,
            grid: LambdaGrid::default(),
            correlation: CorrelationModel::Independent,
            basis: AdditiveModelSpec::default_basis(),
            tolerance: DEFAULT_STOP_TOLERANCE,
        }
    }
}

impl SelectionOptions {
    fn fit_options(&self) -> FitOptions {
        FitOptions {
            lambda: LambdaMode::Optimize {
                criterion: self.criterion,
                grid: self.grid,
            },
            correlation: self.correlation,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    NoImprovement,
    MaxTerms,
    AllInadmissible,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::NoImprovement => "no-improvement",
            StopReason::MaxTerms => "max-terms",
            StopReason::AllInadmissible => "all-inadmissible",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub covariate: Covariate,
    /// `None` when the model is inadmissible.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub seeds: Vec<Covariate>,
    pub results: Vec<CandidateResult>,
    /// Winner, if it improved enough to be kept.
    pub chosen: Option<Covariate>,
    pub best_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub criterion: Criterion,
    /// Criterion of the intercept-only model.
    pub baseline: f64,
    pub stages: Vec<Stage>,
    pub selected: Vec<Covariate>,
    pub stop_reason: StopReason,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl SelectionTrace {
    /// Stage-by-candidate text matrix: values with the winner starred, `seed`
    /// for variables already in the model.
    pub fn render(&self) -> String {
        let mut cands: Vec<Covariate> = vec![];
        for s in &self.stages {
            for r in &s.results {
                if !cands.contains(&r.covariate) {
                    cands.push(r.covariate);
                }
            }
        }
        let mut out = String::from("variable");
        for i in 0..self.stages.len() {
            write!(out, "\t{} var", i + 1).unwrap();
        }
        out.push('\n');
        for c in cands {
            out.push_str(c.name());
            for s in &self.stages {
                let cell = if s.seeds.contains(&c) {
                    "seed".to_string()
                } else {
                    match s.results.iter().find(|r| r.covariate == c) {
                        Some(CandidateResult { value: Some(v), .. }) => {
                            let star = if s.chosen == Some(c) { "*" } else { "" };
                            format!("{v:.4}{star}")
                        }
                        Some(_) => "inadmissible".to_string(),
                        None => "-".to_string(),
                    }
                };
                write!(out, "\t{cell}").unwrap();
            }
            out.push('\n');
        }
        writeln!(out, "baseline\t{:.4}", self.baseline).unwrap();
        writeln!(out, "selected\t{}", join(&self.selected)).unwrap();
        writeln!(out, "stop\t{}", self.stop_reason).unwrap();
        for w in &self.warnings {
            writeln!(out, "warning\t{w}").unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("traces always serialize")
    }
}

fn join(c: &[Covariate]) -> String {
    c.iter().map(|c| c.name()).collect::<Vec<_>>().join(",")
}

/// Variables that may be selected but are physically unsuitable as controls.
const DISCOURAGED: [Covariate; 1] = [Covariate::Time];

fn free_spec(seeds: &[Covariate], basis: &SplineBasis) -> Result<AdditiveModelSpec> {
    let mut terms = vec![TermSpec::intercept()];
    terms.extend(seeds.iter().map(|&c| TermSpec::free(c)));
    AdditiveModelSpec::new(terms, basis.clone())
}

/// Sequential forward selection: each stage adds the candidate that most
/// lowers the criterion, until the relative gain drops below the tolerance.
pub fn forward_select(
    set: &ProfileSet,
    candidates: &[Covariate],
    max_stages: usize,
    options: &SelectionOptions,
) -> Result<SelectionTrace> {
    if candidates.is_empty() {
        return Err(Error::Argument("candidate list is empty".into()));
    }
    for (i, c) in candidates.iter().enumerate() {
        if candidates[..i].contains(c) {
            return Err(Error::Argument(format!("duplicate candidate `{c}`")));
        }
        for r in &set.records {
            c.raw(r)?;
        }
    }
    let base_sys = build_design(set, &free_spec(&[], &options.basis)?)?.with_correlation(options.correlation);
    let base = optimize_lambdas(&base_sys, options.criterion, &options.grid)?;
    let mut best = base.value;
    let mut seed_idx = base.indices.clone();
    let mut seeds: Vec<Covariate> = vec![];
    let mut stages = vec![];
    let mut stop = StopReason::MaxTerms;

    for _ in 0..max_stages {
        let remaining: Vec<Covariate> = candidates.iter().copied().filter(|c| !seeds.contains(c)).collect();
        if remaining.is_empty() {
            break;
        }
        let outcomes: Vec<Option<(f64, Vec<Option<usize>>)>> = remaining
            .par_iter()
            .map(|&c| {
                let mut vars = seeds.clone();
                vars.push(c);
                let spec = free_spec(&vars, &options.basis).ok()?;
                let sys = build_design(set, &spec).ok()?.with_correlation(options.correlation);
                let mut start = seed_idx.clone();
                start.push(None);
                optimize_lambdas_from(&sys, options.criterion, &options.grid, &start)
                    .ok()
                    .map(|o| (o.value, o.indices))
            })
            .collect();
        let results: Vec<CandidateResult> = remaining
            .iter()
            .zip(&outcomes)
            .map(|(&c, o)| CandidateResult {
                covariate: c,
                value: o.as_ref().map(|o| o.0),
            })
            .collect();
        let winner = outcomes
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.as_ref().map(|o| (i, o)))
            .fold(None::<(usize, &(f64, Vec<Option<usize>>))>, |acc, (i, o)| match acc {
                Some((_, b)) if b.0 <= o.0 => acc,
                _ => Some((i, o)),
            });
        let mut stage = Stage {
            seeds: seeds.clone(),
            results,
            chosen: None,
            best_value: winner.map(|w| w.1 .0),
        };
        let Some((wi, (value, indices))) = winner else {
            stages.push(stage);
            stop = StopReason::AllInadmissible;
            break;
        };
        if (best - value) / best.abs() < options.tolerance {
            stages.push(stage);
            stop = StopReason::NoImprovement;
            break;
        }
        let c = remaining[wi];
        stage.chosen = Some(c);
        stages.push(stage);
        seeds.push(c);
        seed_idx = indices.clone();
        best = *value;
    }
    let warnings = seeds
        .iter()
        .filter(|c| DISCOURAGED.contains(c))
        .map(|c| format!("`{c}` was selected but is rejected as a control variable on physical grounds"))
        .collect();
    Ok(SelectionTrace {
        criterion: options.criterion,
        baseline: base.value,
        stages,
        selected: seeds,
        stop_reason: stop,
        warnings,
    })
}

fn criterion_of(model: &FittedModel, criterion: Criterion) -> Option<f64> {
    let r = model.risk.as_ref()?;
    match criterion {
        Criterion::Rice => r.rice,
        Criterion::Gcv => r.gcv,
    }
}

fn fit_variant(set: &ProfileSet, spec: &AdditiveModelSpec, options: &SelectionOptions) -> Result<(FittedModel, f64)> {
    let model = fit_model(set, spec, &options.fit_options())?;
    let mae = model.metrics.map_or(f64::NAN, |m| m.mae);
    Ok((model, mae))
}

/// Free-versus-symmetric comparison for one term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetryReport {
    pub term: Regressor,
    pub free_value: Option<f64>,
    pub symmetric_value: Option<f64>,
    pub free_mae: f64,
    pub symmetric_mae: f64,
    pub recommended: Constraint,
}

pub fn test_symmetry(
    set: &ProfileSet,
    spec: &AdditiveModelSpec,
    term: Regressor,
    options: &SelectionOptions,
) -> Result<SymmetryReport> {
    let l = spec
        .position(term)
        .ok_or_else(|| Error::Argument(format!("term `{term}` not in model")))?;
    if spec.terms[l].constraint != Constraint::Free {
        return Err(Error::Argument(format!("term `{term}` is not a free spline term")));
    }
    let sym = spec.with_constraint(term, Constraint::Symmetric)?;
    let (free_model, free_mae) = fit_variant(set, spec, options)?;
    let (sym_model, symmetric_mae) = fit_variant(set, &sym, options)?;
    let free_value = criterion_of(&free_model, options.criterion);
    let symmetric_value = criterion_of(&sym_model, options.criterion);
    let recommended = if better(symmetric_value, free_value) {
        Constraint::Symmetric
    } else {
        Constraint::Free
    };
    Ok(SymmetryReport {
        term,
        free_value,
        symmetric_value,
        free_mae,
        symmetric_mae,
        recommended,
    })
}

/// Spline-versus-constant comparison for one term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantReport {
    pub term: Regressor,
    pub spline_value: Option<f64>,
    pub constant_value: Option<f64>,
    pub spline_mae: f64,
    pub constant_mae: f64,
    pub constant: f64,
    pub std_error: f64,
    pub recommended: Constraint,
}

pub fn reduce_to_constant(
    set: &ProfileSet,
    spec: &AdditiveModelSpec,
    term: Regressor,
    options: &SelectionOptions,
) -> Result<ConstantReport> {
    let l = spec
        .position(term)
        .ok_or_else(|| Error::Argument(format!("term `{term}` not in model")))?;
    let spline = spec.terms[l].constraint;
    if spline == Constraint::Constant {
        return Err(Error::Argument(format!("term `{term}` is already constant")));
    }
    let reduced = spec.with_constraint(term, Constraint::Constant)?;
    let (spline_model, spline_mae) = fit_variant(set, spec, options)?;
    let (const_model, constant_mae) = fit_variant(set, &reduced, options)?;
    let t = &const_model.terms[l];
    let spline_value = criterion_of(&spline_model, options.criterion);
    let constant_value = criterion_of(&const_model, options.criterion);
    Ok(ConstantReport {
        term,
        spline_value,
        constant_value,
        spline_mae,
        constant_mae,
        constant: t.coefficients[0],
        std_error: t.std_errors[0],
        recommended: if better(constant_value, spline_value) {
            Constraint::Constant
        } else {
            spline
        },
    })
}
