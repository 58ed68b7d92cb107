//! Fitted additive models: estimation pipeline, prediction, tabulation and
//! the JSON form written by the CLI.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dataset::{transform_value, Normalization, ProfileSet};
use crate::design::{
    build_design, expand_coefficients, AdditiveModelSpec, Constraint, DesignSystem, FitScale,
    Regressor, TermSpec,
};
use crate::error::{Error, Result};
use crate::risk::{CorrelationModel, RiskReport};
use crate::selection::{optimize_lambdas, Criterion, LambdaGrid};
use crate::solver::{coefficient_covariance, solve, solve_linear_scale, FitResult};
use crate::spline::SplineBasis;

/// Gauss–Newton iterations for linear-scale fits.
const LINEAR_SCALE_ITERATIONS: usize = 50;

/// How smoothing parameters are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaMode {
    /// One value per term; ignored for constant terms.
    Fixed(Vec<f64>),
    /// The same value for every spline term.
    Shared(f64),
    Optimize { criterion: Criterion, grid: LambdaGrid },
}

impl Default for LambdaMode {
    fn default() -> Self {
        LambdaMode::Optimize {
            criterion: Criterion::Rice,
            grid: LambdaGrid::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub scale: FitScale,
    pub lambda: LambdaMode,
    pub correlation: CorrelationModel,
}

/// Goodness-of-fit summaries over measured points, in data units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    pub mae: f64,
    pub mae_percent: f64,
    pub log_rmse: f64,
    pub mean_line_average: f64,
}

/// Mean absolute error as a percentage of a typical temperature.
pub fn mae_percent(mae: f64, typical_temperature: f64) -> f64 {
    100.0 * mae / typical_temperature
}

/// `mean |T - exp(fitted)|` over measured rows.
pub fn mean_absolute_error(system: &DesignSystem, fitted_log: &DVector<f64>) -> f64 {
    let (s, n) = (0..system.num_rows())
        .filter(|&i| system.measured[i])
        .fold((0.0, 0usize), |(s, n), i| {
            (s + (system.temp[i] - fitted_log[i].exp()).abs(), n + 1)
        });
    s / n.max(1) as f64
}

/// Root mean square residual of `ln T` over measured rows, unweighted.
pub fn log_rmse(system: &DesignSystem, fitted_log: &DVector<f64>) -> f64 {
    let (s, n) = (0..system.num_rows())
        .filter(|&i| system.measured[i])
        .fold((0.0, 0usize), |(s, n), i| {
            (s + (system.temp[i].ln() - fitted_log[i]).powi(2), n + 1)
        });
    (s / n.max(1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedTerm {
    pub term: Regressor,
    pub constraint: Constraint,
    /// One coefficient per basis function, after undoing the constraint.
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    /// Standard errors of the folded block parameters.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub std_errors: Vec<f64>,
}

impl FittedTerm {
    pub fn name(&self) -> String {
        match self.term {
            Regressor::Intercept => "f_0".into(),
            r => format!("f_{r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub basis: SplineBasis,
    pub n_interior_knots: usize,
    pub n_basis: usize,
    pub scale: FitScale,
    pub terms: Vec<FittedTerm>,
    pub normalization: Normalization,
    #[serde(default)]
    pub correlation: CorrelationModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk: Option<RiskReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<FitMetrics>,
    /// `G K G` over the folded parameters.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub covariance: Vec<Vec<f64>>,
}

impl FittedModel {
    /// Model with given expanded coefficients and no fit statistics.
    pub fn from_coefficients(
        basis: SplineBasis,
        terms: Vec<(TermSpec, Vec<f64>)>,
        normalization: Normalization,
    ) -> Result<Self> {
        let k = basis.len();
        let spec = AdditiveModelSpec::new(terms.iter().map(|(t, _)| *t).collect(), basis.clone())?;
        let terms = spec
            .terms
            .iter()
            .zip(terms)
            .map(|(t, (_, c))| {
                if c.len() != k {
                    return Err(Error::Spec(format!(
                        "term `{}` has {} coefficients, basis has {k}",
                        t.regressor,
                        c.len()
                    )));
                }
                Ok(FittedTerm {
                    term: t.regressor,
                    constraint: t.constraint,
                    coefficients: c,
                    lambda: 0.0,
                    std_errors: vec![],
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            n_interior_knots: basis.interior_knots().len(),
            n_basis: k,
            basis,
            scale: FitScale::Log,
            terms,
            normalization,
            correlation: CorrelationModel::Independent,
            risk: None,
            metrics: None,
            covariance: vec![],
        })
    }

    pub fn spec(&self) -> AdditiveModelSpec {
        AdditiveModelSpec {
            terms: self
                .terms
                .iter()
                .map(|t| TermSpec::new(t.term, t.constraint))
                .collect(),
            basis: self.basis.clone(),
        }
    }

    pub fn term(&self, regressor: Regressor) -> Option<&FittedTerm> {
        self.terms.iter().find(|t| t.term == regressor)
    }

    /// `f_l(psi)` for term index `l`.
    pub fn term_value(&self, l: usize, psi: f64) -> Result<f64> {
        self.basis.evaluate(&self.terms[l].coefficients, psi)
    }

    /// Centered regressor `h_l(u)` for raw covariates.
    pub fn regressor_value(&self, regressor: Regressor, raw: &BTreeMap<String, f64>) -> Result<f64> {
        let one = |c| transform_value(c, c.raw_from_map(raw, "<input>")?, &self.normalization, "<input>");
        match regressor {
            Regressor::Intercept => Ok(1.0),
            Regressor::Covariate(c) => one(c),
            Regressor::Product(a, b) => Ok(one(a)? * one(b)?),
        }
    }

    /// `ln T` at `psi` for raw covariates.
    pub fn predict_log(&self, psi: f64, raw: &BTreeMap<String, f64>) -> Result<f64> {
        let mut s = 0.0;
        for (l, t) in self.terms.iter().enumerate() {
            s += self.term_value(l, psi)? * self.regressor_value(t.term, raw)?;
        }
        Ok(s)
    }

    /// Temperature in the units of the training data.
    pub fn predict(&self, psi: f64, raw: &BTreeMap<String, f64>) -> Result<f64> {
        Ok(self.predict_log(psi, raw)?.exp())
    }

    /// TSV of every term on `psi = -1, -1 + step, ..., 1` with 4 decimals.
    pub fn tabulate(&self, step: f64) -> Result<String> {
        let n = tabulation_intervals(step)?;
        let decimals = (0..=6)
            .find(|d| {
                let s = step * 10f64.powi(*d);
                (s - s.round()).abs() < 1e-9
            })
            .unwrap_or(6)
            .max(1) as usize;
        let mut out = String::from("psi");
        for t in &self.terms {
            write!(out, "\t{}", t.name()).unwrap();
        }
        out.push('\n');
        for i in 0..=n {
            let psi = (-1.0 + 2.0 * i as f64 / n as f64).clamp(-1.0, 1.0);
            out.push_str(&fixed(psi, decimals));
            for l in 0..self.terms.len() {
                out.push('\t');
                out.push_str(&fixed(self.term_value(l, psi)?, 4));
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("models always serialize")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        model.spec().validate()?;
        if model.terms.iter().any(|t| t.coefficients.len() != model.basis.len()) {
            return Err(Error::Spec("coefficient count does not match basis".into()));
        }
        Ok(model)
    }
}

fn tabulation_intervals(step: f64) -> Result<usize> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Argument(format!("tabulation step {step} must be positive")));
    }
    let n = (2.0 / step).round();
    if n < 1.0 || (n * step - 2.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("tabulation step {step} does not divide 2.0")));
    }
    Ok(n as usize)
}

/// Fixed-point formatting without a negative zero.
fn fixed(v: f64, decimals: usize) -> String {
    let s = format!("{v:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

/// Resolve a lambda mode into one value per term.
fn resolve_lambdas(system: &DesignSystem, mode: &LambdaMode) -> Result<Vec<f64>> {
    let m = system.blocks.len();
    match mode {
        LambdaMode::Fixed(v) => {
            if v.len() != m {
                return Err(Error::Argument(format!(
                    "expected {m} smoothing parameters, got {}",
                    v.len()
                )));
            }
            Ok(v.clone())
        }
        LambdaMode::Shared(l) => Ok(vec![*l; m]),
        LambdaMode::Optimize { criterion, grid } => {
            Ok(optimize_lambdas(system, *criterion, grid)?.lambdas)
        }
    }
}

/// Estimate an additive model and package it with its risk report, metrics
/// and coefficient covariance. On the linear scale, smoothing parameters are
/// chosen on the log-scale system and then held fixed.
pub fn fit_model(set: &ProfileSet, spec: &AdditiveModelSpec, options: &FitOptions) -> Result<FittedModel> {
    let system = build_design(set, spec)?.with_correlation(options.correlation);
    let lambdas = resolve_lambdas(&system, &options.lambda)?;
    let (system, fit) = match options.scale {
        FitScale::Log => {
            let fit = solve(&system, &lambdas)?;
            (system, fit)
        }
        FitScale::Linear => solve_linear_scale(&system, &lambdas, LINEAR_SCALE_ITERATIONS)?,
    };
    Ok(package(set, spec, options, &system, &fit))
}

pub(crate) fn package(
    set: &ProfileSet,
    spec: &AdditiveModelSpec,
    options: &FitOptions,
    system: &DesignSystem,
    fit: &FitResult,
) -> FittedModel {
    let k = spec.basis.len();
    let cov = coefficient_covariance(fit, system);
    let terms = system
        .blocks
        .iter()
        .zip(&fit.lambdas)
        .map(|(b, &lambda)| {
            let folded: Vec<f64> = b.cols.clone().map(|i| fit.alpha[i]).collect();
            FittedTerm {
                term: b.term.regressor,
                constraint: b.term.constraint,
                coefficients: expand_coefficients(b.term.constraint, &folded, k),
                lambda: if b.is_penalized() { lambda } else { 0.0 },
                std_errors: b.cols.clone().map(|i| cov[(i, i)].max(0.0).sqrt()).collect(),
            }
        })
        .collect();
    let mean_line_average = set.mean_line_average_temperature();
    let mae = mean_absolute_error(system, &fit.fitted);
    FittedModel {
        n_interior_knots: spec.basis.interior_knots().len(),
        n_basis: k,
        basis: spec.basis.clone(),
        scale: options.scale,
        terms,
        normalization: set.normalization.clone(),
        correlation: options.correlation,
        risk: Some(RiskReport::for_fit(fit, system.k_matrix(), system.n_measured)),
        metrics: Some(FitMetrics {
            mae,
            mae_percent: mae_percent(mae, mean_line_average),
            log_rmse: log_rmse(system, &fit.fitted),
            mean_line_average,
        }),
        covariance: cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Covariate, ProfileRecord};

    fn reference_model() -> FittedModel {
        let basis = AdditiveModelSpec::default_basis();
        let k = basis.len();
        let f0: Vec<f64> = (0..k).map(|i| 2.0 - 0.01 * i as f64).collect();
        let fi = vec![0.5; k];
        let mut norm = Normalization::new();
        norm.insert(Covariate::Ip, 2.0);
        FittedModel::from_coefficients(
            basis,
            vec![
                (TermSpec::intercept(), f0),
                (TermSpec::new(Regressor::Covariate(Covariate::Ip), Constraint::Constant), fi),
            ],
            norm,
        )
        .unwrap()
    }

    #[test]
    fn metric_arithmetic() {
        assert!((mae_percent(152.0, 1454.0) - 10.45).abs() < 0.005);
        assert!((152.0_f64 / 1454.0 - 0.1045).abs() < 5e-5);
    }

    #[test]
    fn predict_scales_with_covariate() {
        let m = reference_model();
        let mut u = BTreeMap::new();
        u.insert("Ip".to_string(), 2.0);
        let base = m.predict(0.3, &u).unwrap();
        assert!((base.ln() - m.term_value(0, 0.3).unwrap()).abs() < 1e-14);
        u.insert("Ip".to_string(), 2.0 * std::f64::consts::E);
        let up = m.predict(0.3, &u).unwrap();
        assert!((up / base - 0.5f64.exp()).abs() < 1e-12);
        assert!(matches!(m.predict(1.2, &u), Err(Error::Domain(_))));
        assert!(matches!(m.predict(0.0, &BTreeMap::new()), Err(Error::MissingCovariate { .. })));
    }

    #[test]
    fn tabulate_layout() {
        let m = reference_model();
        let t = m.tabulate(0.1).unwrap();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "psi\tf_0\tf_Ip");
        assert_eq!(lines.len(), 22);
        assert!(lines[1].starts_with("-1.0\t"));
        assert!(lines[11].starts_with("0.0\t"));
        assert!(lines[21].starts_with("1.0\t"));
        for l in &lines[1..] {
            assert!(l.ends_with("\t0.5000"));
        }
        assert!(matches!(m.tabulate(0.3), Err(Error::Argument(_))));
        assert!(matches!(m.tabulate(0.0), Err(Error::Argument(_))));
        assert_eq!(m.tabulate(0.25).unwrap().lines().nth(2).unwrap().split('\t').next(), Some("-0.75"));
    }

    #[test]
    fn no_negative_zero() {
        assert_eq!(fixed(-0.00001, 4), "0.0000");
        assert_eq!(fixed(-0.5, 4), "-0.5000");
    }

    #[test]
    fn json_round_trip() {
        let m = reference_model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(FittedModel::load(&p).unwrap(), m);
    }

    #[test]
    fn noiseless_fit_recovers_model() {
        let m = reference_model();
        let mut records = Vec::new();
        for (i, ip) in [1.0, 1.5, 2.0, 3.0, 4.0].iter().enumerate() {
            let mut u = BTreeMap::new();
            u.insert("Ip".to_string(), *ip);
            let psi: Vec<f64> = (0..60).map(|j| -0.995 + 1.99 * j as f64 / 59.0).collect();
            let temp: Vec<f64> = psi.iter().map(|p| m.predict(*p, &u).unwrap()).collect();
            let sigma = temp.iter().map(|t| 0.01 * t).collect();
            records.push(ProfileRecord::new(format!("r{i}"), psi, temp, sigma, u));
        }
        let set = ProfileSet::new(records).unwrap().with_normalization(m.normalization.clone());
        let opts = FitOptions {
            lambda: LambdaMode::Shared(0.0),
            ..Default::default()
        };
        let fit = fit_model(&set, &m.spec(), &opts).unwrap();
        for (a, b) in fit.terms.iter().zip(&m.terms) {
            for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        let metrics = fit.metrics.unwrap();
        assert!(metrics.mae < 1e-9 && metrics.log_rmse < 1e-9);
        let risk = fit.risk.unwrap();
        assert!((risk.trace_cg - 25.0).abs() < 1e-6);
        // the linear-scale fit agrees on exact data
        let lin = fit_model(&set, &m.spec(), &FitOptions { scale: FitScale::Linear, ..opts }).unwrap();
        assert!((lin.terms[1].coefficients[0] - 0.5).abs() < 1e-6);
    }
}
