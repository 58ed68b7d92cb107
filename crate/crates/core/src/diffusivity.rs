//! Log-additive heat diffusivity `chi = exp(sum_l g_l(rho) h_l(u))` fitted
//! through a steady-state cylindrical transport model.
//!
//! For each discharge the temperature solves
//! `(1/r) d/dr (r n chi dT/dr) = -S` with `dT/dr(0) = 0` and `T(a) = T_edge`.
//! The flux `q(r) = (1/r) int_0^r S r' dr'` does not depend on `chi`, so the
//! temperature is `T(r) = T_edge + int_r^a q / (n chi) dr'`, both integrals by
//! the trapezoid rule on a uniform grid. Density is in `1e19 m^-3`,
//! temperature in eV, source in W/m^3 and `chi` in m^2/s.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ProfileRecord, ProfileSet};
use crate::design::{AdditiveModelSpec, Constraint, FitScale};
use crate::error::{Error, Result};
use crate::model::{mae_percent, FitMetrics, FittedModel, FittedTerm};
use crate::risk::{trace_product, CorrelationModel, RiskReport};
use crate::spline::SplineBasis;

/// Energy density of `1e19 m^-3` particles at 1 eV, in J/m^3.
pub const PRESSURE_UNIT: f64 = 1e19 * 1.602_176_634e-19;

pub const MIN_GRID: usize = 16;
pub const DEFAULT_GRID: usize = 201;
pub const DEFAULT_CHI_KNOTS: usize = 9;
const MAX_HALVINGS: usize = 30;

/// Diffusivity model: same layout as a profile model, on `rho = |psi|`.
pub type ChiModel = FittedModel;

/// Uniform cubic basis on `[0, 1]` for diffusivity terms.
pub fn chi_basis(n_interior: usize) -> Result<SplineBasis> {
    SplineBasis::uniform(n_interior, 0.0, 1.0)
}

/// Fixed inputs of one discharge, tabulated on `psi_grid` (values of `rho`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DischargeConditions {
    pub id: String,
    pub psi_grid: Vec<f64>,
    pub density: Vec<f64>,
    #[serde(rename = "source_w_m3")]
    pub source: Vec<f64>,
    #[serde(rename = "edge_temp_ev")]
    pub edge_temp: f64,
    #[serde(rename = "minor_radius_m")]
    pub minor_radius: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub covariates: BTreeMap<String, f64>,
}

impl DischargeConditions {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Error::Validation {
            id: self.id.clone(),
            field: field.into(),
            message,
        };
        let n = self.psi_grid.len();
        if n < 2 || self.density.len() != n || self.source.len() != n {
            return Err(bad("psi_grid", "grid, density and source need equal length >= 2".into()));
        }
        if !self.psi_grid.windows(2).all(|w| w[0] < w[1]) || self.psi_grid[0] > 0.0 || self.psi_grid[n - 1] < 1.0 {
            return Err(bad("psi_grid", "grid must increase strictly and cover [0, 1]".into()));
        }
        if self.density.iter().any(|v| !(*v >= 0.0)) {
            return Err(bad("density", "density must be nonnegative".into()));
        }
        if self.source.iter().any(|v| !(*v >= 0.0)) {
            return Err(bad("source_w_m3", "source must be nonnegative".into()));
        }
        if !(self.edge_temp > 0.0) {
            return Err(bad("edge_temp_ev", "edge temperature must be positive".into()));
        }
        if !(self.minor_radius > 0.0) {
            return Err(bad("minor_radius_m", "minor radius must be positive".into()));
        }
        Ok(())
    }

    fn interp(&self, values: &[f64], rho: f64) -> f64 {
        interp_linear(&self.psi_grid, values, rho)
    }
}

fn interp_linear(x: &[f64], y: &[f64], t: f64) -> f64 {
    let n = x.len();
    if t <= x[0] {
        return y[0];
    }
    if t >= x[n - 1] {
        return y[n - 1];
    }
    let i = x.partition_point(|v| *v <= t).clamp(1, n - 1);
    let w = (t - x[i - 1]) / (x[i] - x[i - 1]);
    y[i - 1] + w * (y[i] - y[i - 1])
}

pub fn load_conditions(path: impl AsRef<Path>) -> Result<Vec<DischargeConditions>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let c: DischargeConditions = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        c.validate()?;
        out.push(c);
    }
    Ok(out)
}

pub fn write_conditions(path: impl AsRef<Path>, conditions: &[DischargeConditions]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for c in conditions {
        let line = serde_json::to_string(c).expect("conditions always serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Temperature on a uniform `rho` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureProfile {
    pub rho: Vec<f64>,
    pub temp: Vec<f64>,
}

impl TemperatureProfile {
    pub fn at(&self, rho: f64) -> f64 {
        interp_linear(&self.rho, &self.temp, rho)
    }
}

/// Everything about one discharge that does not depend on `chi`.
#[derive(Debug, Clone)]
struct Transport {
    rho: Vec<f64>,
    h: f64,
    /// `q / (n * PRESSURE_UNIT)`, the temperature gradient times `chi`.
    drive: Vec<f64>,
    edge_temp: f64,
}

impl Transport {
    fn new(cond: &DischargeConditions, n_grid: usize) -> Result<Self> {
        if n_grid < MIN_GRID {
            return Err(Error::Argument(format!("grid needs at least {MIN_GRID} points, got {n_grid}")));
        }
        cond.validate()?;
        let a = cond.minor_radius;
        let rho: Vec<f64> = (0..n_grid).map(|i| i as f64 / (n_grid - 1) as f64).collect();
        let h = a / (n_grid - 1) as f64;
        let mut integral = 0.0;
        let mut prev = 0.0;
        let mut drive = vec![0.0; n_grid];
        for i in 0..n_grid {
            let r = a * rho[i];
            let sr = cond.interp(&cond.source, rho[i]) * r;
            if i > 0 {
                integral += 0.5 * h * (prev + sr);
            }
            prev = sr;
            let n = cond.interp(&cond.density, rho[i]);
            if !(n > 0.0) {
                return Err(Error::SingularConductivity { radius: rho[i] });
            }
            drive[i] = if i == 0 { 0.0 } else { integral / r } / (n * PRESSURE_UNIT);
        }
        Ok(Self {
            rho,
            h,
            drive,
            edge_temp: cond.edge_temp,
        })
    }

    /// Temperature for `log chi` on the grid.
    fn temperature(&self, log_chi: &[f64]) -> Result<Vec<f64>> {
        let g = self.gradient(log_chi)?;
        Ok(self.integrate_from_edge(&g, self.edge_temp))
    }

    /// `-dT/dr = q / (n chi)`.
    fn gradient(&self, log_chi: &[f64]) -> Result<Vec<f64>> {
        self.drive
            .iter()
            .zip(log_chi)
            .zip(&self.rho)
            .map(|((d, lc), rho)| {
                let chi = lc.exp();
                if !(chi > 0.0) || !chi.is_finite() {
                    return Err(Error::SingularConductivity { radius: *rho });
                }
                Ok(d / chi)
            })
            .collect()
    }

    fn integrate_from_edge(&self, g: &[f64], edge: f64) -> Vec<f64> {
        let n = g.len();
        let mut t = vec![0.0; n];
        t[n - 1] = edge;
        for i in (0..n - 1).rev() {
            t[i] = t[i + 1] + 0.5 * self.h * (g[i] + g[i + 1]);
        }
        t
    }
}

/// `log chi` on `rho` grid for a model and raw covariates.
fn log_chi_on(model: &ChiModel, rho: &[f64], raw: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
    let h: Vec<f64> = model
        .terms
        .iter()
        .map(|t| model.regressor_value(t.term, raw))
        .collect::<Result<_>>()?;
    rho.iter()
        .map(|&r| {
            let mut s = 0.0;
            for (l, hl) in h.iter().enumerate() {
                s += model.term_value(l, r)? * hl;
            }
            Ok(s)
        })
        .collect()
}

/// Diffusivity at `rho` for raw covariates.
pub fn chi_value(model: &ChiModel, rho: f64, raw: &BTreeMap<String, f64>) -> Result<f64> {
    Ok(log_chi_on(model, &[rho], raw)?[0].exp())
}

/// Steady-state temperature on `n_grid` uniform points of `[0, 1]`, with
/// covariates taken from the conditions.
pub fn forward_temperature(chi: &ChiModel, cond: &DischargeConditions, n_grid: usize) -> Result<TemperatureProfile> {
    let tr = Transport::new(cond, n_grid)?;
    let lc = log_chi_on(chi, &tr.rho, &cond.covariates)?;
    Ok(TemperatureProfile {
        temp: tr.temperature(&lc)?,
        rho: tr.rho,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChiFitOptions {
    pub n_grid: usize,
    pub max_iterations: usize,
    /// Relative objective decrease that counts as converged.
    pub tolerance: f64,
    /// Folded starting parameters; defaults to a constant matched to the data.
    pub initial: Option<Vec<f64>>,
}

impl Default for ChiFitOptions {
    fn default() -> Self {
        Self {
            n_grid: DEFAULT_GRID,
            max_iterations: 100,
            tolerance: 1e-8,
            initial: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChiFit {
    pub model: ChiModel,
    pub risk: RiskReport,
    pub iterations: usize,
    /// Penalized objective after each accepted step, starting value first.
    pub objectives: Vec<f64>,
}

/// One discharge prepared for fitting.
struct Case {
    transport: Transport,
    /// Regressor values `h_l(u)`.
    h: Vec<f64>,
    /// Basis values on the grid, `(first, local)`.
    basis_grid: Vec<(usize, Vec<f64>)>,
    /// Measured radii, temperatures and weights.
    rho: Vec<f64>,
    temp: Vec<f64>,
    weight: Vec<f64>,
}

/// Layout of the folded parameter vector.
struct Layout {
    cols: Vec<std::ops::Range<usize>>,
    constraints: Vec<Constraint>,
    k: usize,
}

impl Layout {
    fn new(spec: &AdditiveModelSpec) -> Result<Self> {
        let k = spec.basis.len();
        let mut cols = vec![];
        let mut start = 0;
        for t in &spec.terms {
            if t.constraint == Constraint::Symmetric {
                return Err(Error::Spec(format!(
                    "diffusivity term `{}` cannot be symmetric: it is already a function of |psi|",
                    t.regressor
                )));
            }
            let c = t.columns(k);
            cols.push(start..start + c);
            start += c;
        }
        Ok(Self {
            cols,
            constraints: spec.terms.iter().map(|t| t.constraint).collect(),
            k,
        })
    }

    fn len(&self) -> usize {
        self.cols.last().map_or(0, |c| c.end)
    }

    fn expand(&self, theta: &[f64], l: usize) -> Vec<f64> {
        let c = &self.cols[l];
        match self.constraints[l] {
            Constraint::Constant => vec![theta[c.start]; self.k],
            _ => theta[c.clone()].to_vec(),
        }
    }

    /// `log chi` at grid point `i` of `case`.
    fn log_chi(&self, case: &Case, theta: &[f64], i: usize) -> f64 {
        let (first, local) = &case.basis_grid[i];
        let mut s = 0.0;
        for (l, c) in self.cols.iter().enumerate() {
            let f = match self.constraints[l] {
                Constraint::Constant => theta[c.start],
                _ => local.iter().enumerate().map(|(o, b)| b * theta[c.start + first + o]).sum(),
            };
            s += f * case.h[l];
        }
        s
    }

    /// `d log chi_i / d theta` as (column, value) pairs.
    fn log_chi_gradient(&self, case: &Case, i: usize) -> Vec<(usize, f64)> {
        let (first, local) = &case.basis_grid[i];
        let mut out = vec![];
        for (l, c) in self.cols.iter().enumerate() {
            match self.constraints[l] {
                Constraint::Constant => out.push((c.start, case.h[l])),
                _ => {
                    for (o, b) in local.iter().enumerate() {
                        out.push((c.start + first + o, b * case.h[l]));
                    }
                }
            }
        }
        out
    }
}

/// Model temperatures at the measured radii and, optionally, their Jacobian.
fn evaluate_case(layout: &Layout, case: &Case, theta: &[f64], jacobian: bool) -> Result<(Vec<f64>, Option<DMatrix<f64>>)> {
    let tr = &case.transport;
    let n = tr.rho.len();
    let lc: Vec<f64> = (0..n).map(|i| layout.log_chi(case, theta, i)).collect();
    let g = tr.gradient(&lc)?;
    let t = tr.integrate_from_edge(&g, tr.edge_temp);
    let at = |v: &[f64], r: f64| interp_linear(&tr.rho, v, r);
    let pred: Vec<f64> = case.rho.iter().map(|&r| at(&t, r)).collect();
    if !jacobian {
        return Ok((pred, None));
    }
    // dT/dtheta_p = int_r^a (-g) d(log chi)/dtheta_p, accumulated from the edge
    let p = layout.len();
    let mut dg = DMatrix::<f64>::zeros(n, p);
    for i in 0..n {
        for (c, v) in layout.log_chi_gradient(case, i) {
            dg[(i, c)] -= g[i] * v;
        }
    }
    let mut dt = DMatrix::<f64>::zeros(n, p);
    for i in (0..n - 1).rev() {
        for c in 0..p {
            dt[(i, c)] = dt[(i + 1, c)] + 0.5 * tr.h * (dg[(i, c)] + dg[(i + 1, c)]);
        }
    }
    let mut jac = DMatrix::zeros(case.rho.len(), p);
    for (j, &r) in case.rho.iter().enumerate() {
        let hi = tr.rho.partition_point(|v| *v <= r).clamp(1, n - 1);
        let w = ((r - tr.rho[hi - 1]) / (tr.rho[hi] - tr.rho[hi - 1])).clamp(0.0, 1.0);
        for c in 0..p {
            jac[(j, c)] = (1.0 - w) * dt[(hi - 1, c)] + w * dt[(hi, c)];
        }
    }
    Ok((pred, Some(jac)))
}

fn prepare(
    set: &ProfileSet,
    conditions: &[DischargeConditions],
    model: &ChiModel,
    n_grid: usize,
) -> Result<Vec<Case>> {
    set.records
        .iter()
        .map(|rec| {
            let cond = conditions.iter().find(|c| c.id == rec.id).ok_or_else(|| Error::Validation {
                id: rec.id.clone(),
                field: "conditions".into(),
                message: "no discharge conditions for this record".into(),
            })?;
            let transport = Transport::new(cond, n_grid)?;
            let basis_grid = transport
                .rho
                .iter()
                .map(|&r| model.basis.eval_local(r))
                .collect::<Result<_>>()?;
            let h = model
                .terms
                .iter()
                .map(|t| model.regressor_value(t.term, &rec.covariates))
                .collect::<Result<_>>()?;
            let (mut rho, mut temp, mut weight) = (vec![], vec![], vec![]);
            for j in measured(rec) {
                rho.push(rec.psi[j].abs());
                temp.push(rec.temp[j]);
                weight.push(rec.sigma[j].powi(-2));
            }
            Ok(Case {
                transport,
                h,
                basis_grid,
                rho,
                temp,
                weight,
            })
        })
        .collect()
}

fn measured(rec: &ProfileRecord) -> impl Iterator<Item = usize> + '_ {
    (0..rec.len()).filter(|&j| !rec.is_augmented(j))
}

/// Block-diagonal penalty over the folded parameters.
fn penalty(layout: &Layout, basis: &SplineBasis, lambdas: &[f64]) -> DMatrix<f64> {
    let p = layout.len();
    let s = basis.penalty_matrix();
    let mut out = DMatrix::zeros(p, p);
    for (l, c) in layout.cols.iter().enumerate() {
        if layout.constraints[l] != Constraint::Constant && lambdas[l] != 0.0 {
            let mut v = out.view_mut((c.start, c.start), (c.len(), c.len()));
            v += &s * lambdas[l];
        }
    }
    out
}

struct Evaluation {
    rss: f64,
    objective: f64,
    pred: Vec<Vec<f64>>,
    jac: Option<Vec<DMatrix<f64>>>,
}

fn evaluate(layout: &Layout, cases: &[Case], pen: &DMatrix<f64>, theta: &DVector<f64>, jacobian: bool) -> Result<Evaluation> {
    let results: Vec<(Vec<f64>, Option<DMatrix<f64>>)> = cases
        .par_iter()
        .map(|c| evaluate_case(layout, c, theta.as_slice(), jacobian))
        .collect::<Result<_>>()?;
    let mut rss = 0.0;
    for (c, (pred, _)) in cases.iter().zip(&results) {
        for j in 0..pred.len() {
            rss += c.weight[j] * (c.temp[j] - pred[j]).powi(2);
        }
    }
    let objective = rss + (theta.transpose() * pen * theta)[(0, 0)];
    let (pred, jac): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(Evaluation {
        rss,
        objective,
        pred,
        jac: if jacobian { Some(jac.into_iter().map(Option::unwrap).collect()) } else { None },
    })
}

/// Normal equations `J^T W J` and `J^T W r` summed over discharges.
fn normal_equations(cases: &[Case], ev: &Evaluation, p: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut c = DMatrix::zeros(p, p);
    let mut g = DVector::zeros(p);
    for ((case, pred), jac) in cases.iter().zip(&ev.pred).zip(ev.jac.as_ref().unwrap()) {
        let mut wj = jac.clone();
        for (j, mut row) in wj.row_iter_mut().enumerate() {
            row *= case.weight[j];
        }
        c += jac.tr_mul(&wj);
        let r = DVector::from_fn(pred.len(), |j, _| case.temp[j] - pred[j]);
        g += wj.tr_mul(&r);
    }
    (c, g)
}

/// Starting point: every coefficient zero except a constant intercept equal
/// to the log of the diffusivity that reproduces the volume-averaged
/// temperature rise above the edge, averaged over discharges.
fn initial_theta(layout: &Layout, cases: &[Case]) -> Result<DVector<f64>> {
    let mut theta = DVector::zeros(layout.len());
    let mut logs = vec![];
    for case in cases {
        let unit = case.transport.temperature(&vec![0.0; case.transport.rho.len()])?;
        let (mut num, mut den) = (0.0, 0.0);
        for (j, &r) in case.rho.iter().enumerate() {
            // volume element of a cylinder
            num += r * (interp_linear(&case.transport.rho, &unit, r) - case.transport.edge_temp);
            den += r * (case.temp[j] - case.transport.edge_temp);
        }
        if num > 0.0 && den > 0.0 {
            logs.push((num / den).ln());
        }
    }
    let g0 = if logs.is_empty() { 0.0 } else { logs.iter().sum::<f64>() / logs.len() as f64 };
    for i in layout.cols[0].clone() {
        theta[i] = g0;
    }
    Ok(theta)
}

/// Penalized Gauss–Newton fit of a log-additive diffusivity to measured
/// temperatures. `lambdas` weigh the third-derivative penalty of each term.
pub fn fit_chi(
    set: &ProfileSet,
    conditions: &[DischargeConditions],
    spec: &AdditiveModelSpec,
    lambdas: &[f64],
    options: &ChiFitOptions,
) -> Result<ChiFit> {
    if set.records.is_empty() {
        return Err(Error::EmptySet);
    }
    spec.validate()?;
    if lambdas.len() != spec.terms.len() || lambdas.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::Argument(format!(
            "expected {} nonnegative smoothing parameters",
            spec.terms.len()
        )));
    }
    let layout = Layout::new(spec)?;
    let p = layout.len();
    let mut model = FittedModel::from_coefficients(
        spec.basis.clone(),
        spec.terms.iter().map(|t| (*t, vec![0.0; layout.k])).collect(),
        set.normalization.clone(),
    )?;
    let cases = prepare(set, conditions, &model, options.n_grid)?;
    let pen = penalty(&layout, &spec.basis, lambdas);
    let mut theta = match &options.initial {
        Some(v) if v.len() == p => DVector::from_column_slice(v),
        Some(v) => {
            return Err(Error::Argument(format!("initial vector has {} entries, expected {p}", v.len())));
        }
        None => initial_theta(&layout, &cases)?,
    };

    let mut ev = evaluate(&layout, &cases, &pen, &theta, true)?;
    let mut objectives = vec![ev.objective];
    let mut iterations = 0;
    let mut info = None;
    while iterations < options.max_iterations {
        iterations += 1;
        let (c, g) = normal_equations(&cases, &ev, p);
        let grad = &g - &pen * &theta;
        let a = &c + &pen;
        let Some(chol) = a.clone().cholesky() else {
            return Err(Error::RankDeficient {
                term: spec.terms[0].regressor.to_string(),
            });
        };
        let step = chol.solve(&grad);
        info = Some((c, chol.inverse()));
        // predicted decrease of the quadratic model
        let predicted = step.dot(&grad);
        if !(predicted > 1e-14 * ev.objective) || step.amax() < 1e-12 * (1.0 + theta.amax()) {
            break;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial = &theta + &step * t;
            if let Ok(e) = evaluate(&layout, &cases, &pen, &trial, true) {
                if e.objective <= ev.objective {
                    accepted = Some((trial, e));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((next, next_ev)) = accepted else {
            return Err(Error::NonConvergence {
                iterations,
                objective: ev.objective,
                iterate: theta.iter().copied().collect(),
            });
        };
        let decrease = (ev.objective - next_ev.objective) / ev.objective.max(f64::MIN_POSITIVE);
        theta = next;
        ev = next_ev;
        objectives.push(ev.objective);
        if decrease < options.tolerance {
            break;
        }
    }

    // linearized hat-matrix traces at the solution
    let (c, g_inv) = match info {
        Some(v) => v,
        None => {
            let (c, _) = normal_equations(&cases, &ev, p);
            let inv = (&c + &pen).cholesky().map(|ch| ch.inverse()).unwrap_or_else(|| DMatrix::zeros(p, p));
            (c, inv)
        }
    };
    let tr = trace_product(&c, &g_inv);
    let n: usize = cases.iter().map(|c| c.rho.len()).sum();
    let risk = RiskReport::from_parts(ev.rss, tr, tr, n);
    let cov = &g_inv * &c * &g_inv;

    for (l, term) in model.terms.iter_mut().enumerate() {
        let cols = layout.cols[l].clone();
        *term = FittedTerm {
            term: term.term,
            constraint: term.constraint,
            coefficients: layout.expand(theta.as_slice(), l),
            lambda: if term.constraint == Constraint::Constant { 0.0 } else { lambdas[l] },
            std_errors: cols.map(|i| cov[(i, i)].max(0.0).sqrt()).collect(),
        };
    }
    let (mut abs, mut sq) = (0.0, 0.0);
    for (case, pred) in cases.iter().zip(&ev.pred) {
        for j in 0..pred.len() {
            abs += (case.temp[j] - pred[j]).abs();
            sq += (case.temp[j].ln() - pred[j].max(f64::MIN_POSITIVE).ln()).powi(2);
        }
    }
    let mean_line_average = set.mean_line_average_temperature();
    let mae = abs / n.max(1) as f64;
    model.scale = FitScale::Linear;
    model.correlation = CorrelationModel::Independent;
    model.metrics = Some(FitMetrics {
        mae,
        mae_percent: mae_percent(mae, mean_line_average),
        log_rmse: (sq / n.max(1) as f64).sqrt(),
        mean_line_average,
    });
    model.risk = Some(risk.clone());
    model.covariance = cov.row_iter().map(|r| r.iter().copied().collect()).collect();
    Ok(ChiFit {
        model,
        risk,
        iterations,
        objectives,
    })
}

/// Model temperatures at a record's measured radii.
pub fn predict_record(model: &ChiModel, record: &ProfileRecord, cond: &DischargeConditions, n_grid: usize) -> Result<Vec<f64>> {
    let mut c = cond.clone();
    c.covariates = record.covariates.clone();
    let prof = forward_temperature(model, &c, n_grid)?;
    Ok(measured(record).map(|j| prof.at(record.psi[j].abs())).collect())
}

/// Folded parameter vector of a diffusivity model: spline coefficients for
/// free terms, one value for constant terms.
pub fn folded_parameters(model: &ChiModel) -> Vec<f64> {
    model
        .terms
        .iter()
        .flat_map(|t| match t.constraint {
            Constraint::Constant => vec![t.coefficients[0]],
            _ => t.coefficients.clone(),
        })
        .collect()
}

/// Copy of `model` with its folded parameters replaced.
pub fn with_folded_parameters(model: &ChiModel, theta: &[f64]) -> Result<ChiModel> {
    let layout = Layout::new(&model.spec())?;
    if theta.len() != layout.len() {
        return Err(Error::Argument(format!("expected {} parameters, got {}", layout.len(), theta.len())));
    }
    let mut out = model.clone();
    for (l, t) in out.terms.iter_mut().enumerate() {
        t.coefficients = layout.expand(theta, l);
    }
    Ok(out)
}

/// Model temperatures at each record's measured radii together with their
/// derivatives with respect to the folded parameters.
pub fn sensitivities(
    model: &ChiModel,
    set: &ProfileSet,
    conditions: &[DischargeConditions],
    n_grid: usize,
) -> Result<Vec<(Vec<f64>, DMatrix<f64>)>> {
    let layout = Layout::new(&model.spec())?;
    let theta = folded_parameters(model);
    prepare(set, conditions, model, n_grid)?
        .iter()
        .map(|c| evaluate_case(&layout, c, &theta, true).map(|(t, j)| (t, j.expect("requested"))))
        .collect()
}

/// Smooth conditions for synthetic studies: peaked density and a centrally
/// deposited Gaussian source of width `source_width` in `rho`.
pub fn synthetic_conditions(
    id: &str,
    n_points: usize,
    central_density: f64,
    peak_source: f64,
    source_width: f64,
    edge_temp: f64,
    minor_radius: f64,
) -> DischargeConditions {
    let psi_grid: Vec<f64> = (0..n_points).map(|i| i as f64 / (n_points - 1) as f64).collect();
    DischargeConditions {
        id: id.to_string(),
        density: psi_grid.iter().map(|r| central_density * (1.0 - 0.5 * r * r)).collect(),
        source: psi_grid
            .iter()
            .map(|r| peak_source * (-(r / source_width).powi(2)).exp())
            .collect(),
        psi_grid,
        edge_temp,
        minor_radius,
        covariates: BTreeMap::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Covariate, Normalization};
    use crate::design::{Regressor, TermSpec};
    use crate::synthetic::interpolate;

    fn constant_cond(n: f64, s: f64) -> DischargeConditions {
        DischargeConditions {
            id: "c".into(),
            psi_grid: vec![0.0, 1.0],
            density: vec![n, n],
            source: vec![s, s],
            edge_temp: 100.0,
            minor_radius: 1.2,
            covariates: BTreeMap::new(),
        }
    }

    fn chi_of(f: impl Fn(f64) -> f64) -> ChiModel {
        let basis = chi_basis(DEFAULT_CHI_KNOTS).unwrap();
        let x: Vec<f64> = (0..=200).map(|i| i as f64 / 200.0).collect();
        let y: Vec<f64> = x.iter().map(|r| f(*r)).collect();
        let c = interpolate(&basis, &x, &y).unwrap();
        FittedModel::from_coefficients(basis, vec![(TermSpec::intercept(), c)], Normalization::new()).unwrap()
    }

    #[test]
    fn constant_case_is_exact() {
        let (n, s, chi0): (f64, f64, f64) = (3.0, 2e5, 1.5);
        let m = chi_of(|_| chi0.ln());
        let cond = constant_cond(n, s);
        let prof = forward_temperature(&m, &cond, 256).unwrap();
        let a = cond.minor_radius;
        for (r, t) in prof.rho.iter().zip(&prof.temp) {
            let exact = 100.0 + s * a * a * (1.0 - r * r) / (4.0 * n * chi0 * PRESSURE_UNIT);
            assert!(((t - exact) / exact).abs() < 1e-8);
        }
    }

    #[test]
    fn no_source_gives_flat_profile() {
        let m = chi_of(|r| r * r);
        let prof = forward_temperature(&m, &constant_cond(2.0, 0.0), 64).unwrap();
        assert!(prof.temp.iter().all(|t| *t == 100.0));
    }

    #[test]
    fn second_order_convergence() {
        // chi = chi0 exp(c rho^2) has T - T_edge = S a^2 (e^{-c rho^2} - e^{-c}) / (4 n chi0 c)
        let (n, s, chi0, c): (f64, f64, f64, f64) = (2.0, 1e5, 0.8, 1.7);
        let m = chi_of(|r| chi0.ln() + c * r * r);
        let cond = constant_cond(n, s);
        let a = cond.minor_radius;
        let err = |grid: usize| {
            let p = forward_temperature(&m, &cond, grid).unwrap();
            p.rho
                .iter()
                .zip(&p.temp)
                .map(|(r, t)| {
                    let exact = 100.0 + s * a * a * ((-c * r * r).exp() - (-c).exp()) / (4.0 * n * chi0 * c * PRESSURE_UNIT);
                    (t - exact).abs()
                })
                .fold(0.0, f64::max)
        };
        let (e64, e128) = (err(64), err(128));
        let order = (e64 / e128).log2();
        assert!(order >= 1.9, "order {order}");
    }

    #[test]
    fn vanishing_density_is_singular() {
        let m = chi_of(|_| 0.0);
        let mut cond = constant_cond(1.0, 1e5);
        cond.density = vec![1.0, 0.0];
        assert!(matches!(
            forward_temperature(&m, &cond, 32),
            Err(Error::SingularConductivity { .. })
        ));
        assert!(matches!(forward_temperature(&m, &constant_cond(1.0, 1.0), 8), Err(Error::Argument(_))));
    }

    #[test]
    fn source_shape_changes_temperature_shape() {
        let m = chi_of(|r| (0.5 + 2.0 * r * r).ln());
        let narrow = synthetic_conditions("n", 101, 3.0, 3e5, 0.3, 100.0, 1.1);
        let broad = synthetic_conditions("b", 101, 3.0, 3e5, 0.8, 100.0, 1.1);
        let shape = |c: &DischargeConditions| {
            let p = forward_temperature(&m, c, 201).unwrap();
            p.temp.iter().map(|t| t / p.temp[0]).collect::<Vec<_>>()
        };
        let (a, b) = (shape(&narrow), shape(&broad));
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff > 0.05, "{diff}");
    }

    #[test]
    fn covariate_terms_scale_chi() {
        let basis = chi_basis(4).unwrap();
        let k = basis.len();
        let mut norm = Normalization::new();
        norm.insert(Covariate::Ip, 2.0);
        let m = FittedModel::from_coefficients(
            basis,
            vec![
                (TermSpec::intercept(), vec![0.0; k]),
                (TermSpec::new(Regressor::Covariate(Covariate::Ip), Constraint::Constant), vec![-1.0; k]),
            ],
            norm,
        )
        .unwrap();
        let mut u = BTreeMap::new();
        u.insert("Ip".to_string(), 4.0);
        assert!((chi_value(&m, 0.5, &u).unwrap() - 0.5).abs() < 1e-14);
    }

    /// Noiseless measurements of `truth` for discharges differing in source
    /// strength and width.
    fn synthetic_data(truth: &ChiModel) -> (ProfileSet, Vec<DischargeConditions>) {
        let mut records = vec![];
        let mut conds = vec![];
        for d in 0..4 {
            let id = format!("d{d}");
            let cond = synthetic_conditions(&id, 81, 2.5 + 0.5 * d as f64, 1.5e5 * (1.0 + d as f64), 0.35 + 0.1 * d as f64, 80.0, 1.1);
            let prof = forward_temperature(truth, &cond, 401).unwrap();
            let psi: Vec<f64> = (0..40).map(|j| -0.975 + j as f64 * 0.05).collect();
            let temp: Vec<f64> = psi.iter().map(|p| prof.at(p.abs())).collect();
            let sigma = temp.iter().map(|t| 0.01 * t).collect();
            records.push(ProfileRecord::new(id, psi, temp, sigma, BTreeMap::new()));
            conds.push(cond);
        }
        (ProfileSet::new(records).unwrap(), conds)
    }

    fn intercept_spec() -> AdditiveModelSpec {
        AdditiveModelSpec::new(vec![TermSpec::intercept()], chi_basis(DEFAULT_CHI_KNOTS).unwrap()).unwrap()
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let truth = chi_of(|r| (0.6 + 1.5 * r * r).ln());
        let (set, conds) = synthetic_data(&truth);
        let spec = intercept_spec();
        let layout = Layout::new(&spec).unwrap();
        let cases = prepare(&set, &conds, &truth, 101).unwrap();
        let theta: Vec<f64> = (0..layout.len()).map(|i| -0.3 + 0.07 * i as f64).collect();
        for case in &cases {
            let (_, jac) = evaluate_case(&layout, case, &theta, true).unwrap();
            let jac = jac.unwrap();
            for p in 0..layout.len() {
                let h = 1e-6;
                let (mut up, mut dn) = (theta.clone(), theta.clone());
                up[p] += h;
                dn[p] -= h;
                let (tu, _) = evaluate_case(&layout, case, &up, false).unwrap();
                let (td, _) = evaluate_case(&layout, case, &dn, false).unwrap();
                let scale = jac.column(p).amax().max(1e-3);
                for j in 0..tu.len() {
                    let fd = (tu[j] - td[j]) / (2.0 * h);
                    assert!((fd - jac[(j, p)]).abs() / scale < 1e-5, "p={p} j={j}");
                }
            }
        }
    }

    #[test]
    fn recovers_constant_diffusivity() {
        let truth = chi_of(|_| 1.3f64.ln());
        let (set, conds) = synthetic_data(&truth);
        let fit = fit_chi(&set, &conds, &intercept_spec(), &[1e-8], &ChiFitOptions::default()).unwrap();
        for i in 0..=20 {
            let r = i as f64 / 20.0;
            let g = fit.model.term_value(0, r).unwrap();
            assert!((g - 1.3f64.ln()).abs() < 1e-2, "rho={r} g={g}");
        }
        assert!(fit.objectives.windows(2).all(|w| w[1] <= w[0]));
        let rel = fit.model.metrics.as_ref().unwrap().mae_percent;
        assert!(rel < 0.1, "{rel}");
    }

    #[test]
    fn recovers_flat_core_with_parabolic_rise() {
        let shape = |r: f64| 0.4f64.ln() + 6.0 * (r - 0.6).max(0.0).powi(2);
        let truth = chi_of(shape);
        let (set, conds) = synthetic_data(&truth);
        let fit = fit_chi(&set, &conds, &intercept_spec(), &[1e-6], &ChiFitOptions::default()).unwrap();
        for i in 2..=18 {
            let r = i as f64 / 20.0;
            let g = fit.model.term_value(0, r).unwrap();
            assert!((g - shape(r)).abs() < 0.05, "rho={r} g={g} truth={}", shape(r));
            assert!(chi_value(&fit.model, r, &BTreeMap::new()).unwrap() > 0.0);
        }
        assert!(fit.risk.trace_kg > 0.0 && fit.risk.trace_kg <= 13.0 + 1e-9);
    }

    #[test]
    fn missing_conditions_and_bad_lambdas_are_rejected() {
        let truth = chi_of(|_| 0.0);
        let (set, conds) = synthetic_data(&truth);
        let spec = intercept_spec();
        let opts = ChiFitOptions::default();
        assert!(matches!(fit_chi(&set, &conds[..2], &spec, &[1.0], &opts), Err(Error::Validation { .. })));
        assert!(matches!(fit_chi(&set, &conds, &spec, &[-1.0], &opts), Err(Error::Argument(_))));
        let sym = AdditiveModelSpec::new(
            vec![TermSpec::new(Regressor::Intercept, Constraint::Symmetric)],
            SplineBasis::uniform(8, -1.0, 1.0).unwrap(),
        )
        .unwrap();
        assert!(matches!(fit_chi(&set, &conds, &sym, &[1.0], &opts), Err(Error::Spec(_))));
    }

    #[test]
    fn conditions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ndjson");
        let c = vec![synthetic_conditions("x", 11, 3.0, 1e5, 0.4, 90.0, 1.0)];
        write_conditions(&path, &c).unwrap();
        assert_eq!(load_conditions(&path).unwrap(), c);
    }
}
