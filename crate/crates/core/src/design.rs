//! Assembly of the additive log-linear model into one penalized linear
//! system over all profiles at once.
//!
//! Term `l` contributes `f_l(psi) * h_l(u)` to the log temperature, with
//! `f_l` expanded in the shared spline basis. Constraints fold the spline
//! columns: a symmetric term ties coefficient `k` to `K-1-k`, a constant
//! term ties all of them (the basis is a partition of unity, so the column
//! reduces to `h_l(u)` itself).

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{covariate_value, Covariate, Normalization, ProfileRecord, ProfileSet};
use crate::error::{Error, Result};
use crate::risk::{self, CorrelationModel};
use crate::spline::{SplineBasis, DEFAULT_EDGE_THINNING, DEFAULT_INTERIOR_KNOTS};

/// The multiplier `h_l(u)` of a term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regressor {
    Intercept,
    Covariate(Covariate),
    /// Cross-term `h_a(u) * h_b(u)`.
    Product(Covariate, Covariate),
}

impl Regressor {
    pub fn value(&self, record: &ProfileRecord, normalization: &Normalization) -> Result<f64> {
        match *self {
            Regressor::Intercept => Ok(1.0),
            Regressor::Covariate(c) => covariate_value(record, c, normalization),
            Regressor::Product(a, b) => Ok(covariate_value(record, a, normalization)?
                * covariate_value(record, b, normalization)?),
        }
    }

    pub fn covariates(&self) -> Vec<Covariate> {
        match *self {
            Regressor::Intercept => vec![],
            Regressor::Covariate(c) => vec![c],
            Regressor::Product(a, b) => vec![a, b],
        }
    }
}

impl fmt::Display for Regressor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regressor::Intercept => f.write_str("INTERCEPT"),
            Regressor::Covariate(c) => write!(f, "{c}"),
            Regressor::Product(a, b) => write!(f, "{a}*{b}"),
        }
    }
}

impl FromStr for Regressor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("intercept") || s == "1" {
            return Ok(Regressor::Intercept);
        }
        match s.split_once('*') {
            Some((a, b)) => Ok(Regressor::Product(a.trim().parse()?, b.trim().parse()?)),
            None => Ok(Regressor::Covariate(s.parse()?)),
        }
    }
}

impl Serialize for Regressor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Regressor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Constraint {
    Free,
    Symmetric,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermSpec {
    #[serde(rename = "term")]
    pub regressor: Regressor,
    pub constraint: Constraint,
}

impl TermSpec {
    pub fn new(regressor: Regressor, constraint: Constraint) -> Self {
        Self {
            regressor,
            constraint,
        }
    }

    pub fn free(c: Covariate) -> Self {
        Self::new(Regressor::Covariate(c), Constraint::Free)
    }

    pub fn constant(c: Covariate) -> Self {
        Self::new(Regressor::Covariate(c), Constraint::Constant)
    }

    pub fn intercept() -> Self {
        Self::new(Regressor::Intercept, Constraint::Free)
    }

    /// Number of design columns the term occupies for a basis of size `k`.
    pub fn columns(&self, k: usize) -> usize {
        match self.constraint {
            Constraint::Free => k,
            Constraint::Symmetric => k.div_ceil(2),
            Constraint::Constant => 1,
        }
    }
}

/// Which functions enter the additive model, and the basis they share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveModelSpec {
    pub terms: Vec<TermSpec>,
    pub basis: SplineBasis,
}

impl AdditiveModelSpec {
    pub fn new(terms: Vec<TermSpec>, basis: SplineBasis) -> Result<Self> {
        let spec = Self { terms, basis };
        spec.validate()?;
        Ok(spec)
    }

    /// Default radial basis: 20 interior knots thinned toward the edge.
    pub fn default_basis() -> SplineBasis {
        SplineBasis::radial(DEFAULT_INTERIOR_KNOTS, DEFAULT_EDGE_THINNING)
            .expect("default knot layout is valid")
    }

    pub fn validate(&self) -> Result<()> {
        match self.terms.first() {
            Some(t) if t.regressor == Regressor::Intercept => {}
            _ => return Err(Error::Spec("first term must be INTERCEPT".into())),
        }
        for (i, t) in self.terms.iter().enumerate() {
            if self.terms[..i].iter().any(|u| u.regressor == t.regressor) {
                return Err(Error::Spec(format!("duplicate term `{}`", t.regressor)));
            }
            if t.constraint == Constraint::Symmetric && !self.basis.is_symmetric() {
                return Err(Error::Spec(format!(
                    "term `{}` is symmetric but the knot layout is not",
                    t.regressor
                )));
            }
        }
        Ok(())
    }

    pub fn num_columns(&self) -> usize {
        let k = self.basis.len();
        self.terms.iter().map(|t| t.columns(k)).sum()
    }

    pub fn position(&self, regressor: Regressor) -> Option<usize> {
        self.terms.iter().position(|t| t.regressor == regressor)
    }

    pub fn with_constraint(&self, regressor: Regressor, constraint: Constraint) -> Result<Self> {
        let idx = self
            .position(regressor)
            .ok_or_else(|| Error::Argument(format!("term `{regressor}` not in model")))?;
        let mut out = self.clone();
        out.terms[idx].constraint = constraint;
        out.validate()?;
        Ok(out)
    }

    /// Covariates needed by every record.
    pub fn required_covariates(&self) -> Vec<Covariate> {
        let mut v: Vec<Covariate> = self
            .terms
            .iter()
            .flat_map(|t| t.regressor.covariates())
            .collect();
        v.sort();
        v.dedup();
        v
    }
}

/// Shape-plus-shift model: free intercept shape, every covariate a constant.
pub fn profile_consistency_spec(
    covariates: &[Covariate],
    basis: SplineBasis,
) -> Result<AdditiveModelSpec> {
    let mut terms = vec![TermSpec::intercept()];
    terms.extend(covariates.iter().map(|&c| TermSpec::constant(c)));
    AdditiveModelSpec::new(terms, basis)
}

/// Scale on which residuals are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitScale {
    /// Residuals on `ln T` with `sigma / T` as the error.
    #[default]
    Log,
    /// Residuals on `T` itself; the log-linear predictor is then nonlinear.
    Linear,
}

/// Column range and folded penalty of one model term.
#[derive(Debug, Clone)]
pub struct TermBlock {
    pub label: String,
    pub term: TermSpec,
    pub cols: Range<usize>,
    /// Folded roughness penalty for the block (zero for constants).
    pub penalty: DMatrix<f64>,
}

impl TermBlock {
    pub fn is_penalized(&self) -> bool {
        self.penalty.amax() > 0.0
    }
}

/// Expand folded block coefficients to one coefficient per basis function.
pub fn expand_coefficients(constraint: Constraint, folded: &[f64], k: usize) -> Vec<f64> {
    match constraint {
        Constraint::Free => folded.to_vec(),
        Constraint::Symmetric | Constraint::Constant => {
            (0..k).map(|i| folded[fold_index(constraint, i, k)]).collect()
        }
    }
}

fn fold_index(constraint: Constraint, i: usize, k: usize) -> usize {
    match constraint {
        Constraint::Free => i,
        Constraint::Symmetric => i.min(k - 1 - i),
        Constraint::Constant => 0,
    }
}

/// Map from the folded block parameters to `k` spline coefficients.
fn fold_matrix(constraint: Constraint, k: usize) -> DMatrix<f64> {
    let cols = TermSpec::new(Regressor::Intercept, constraint).columns(k);
    let mut f = DMatrix::zeros(k, cols);
    for i in 0..k {
        f[(i, fold_index(constraint, i, k))] = 1.0;
    }
    f
}

/// The penalized weighted least-squares system for one model and data set.
#[derive(Debug, Clone)]
pub struct DesignSystem {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Diagonal of `D`: inverse error variances on the fitting scale.
    pub weights: DVector<f64>,
    /// False for reflected rows; only measured rows count toward N.
    pub measured: Vec<bool>,
    /// Profile index of every row; the error covariance is block-diagonal by profile.
    pub profile: Vec<usize>,
    pub psi: Vec<f64>,
    /// Measured temperature and its error, in data units.
    pub temp: Vec<f64>,
    pub sigma: Vec<f64>,
    pub blocks: Vec<TermBlock>,
    pub n_measured: usize,
    pub correlation: CorrelationModel,
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
    gram_measured: DMatrix<f64>,
    rhs_measured: DVector<f64>,
    yy_measured: f64,
    k: DMatrix<f64>,
}

impl DesignSystem {
    /// Assemble a system from explicit matrices. Rows default to measured
    /// and to one profile each.
    pub fn from_parts(
        x: DMatrix<f64>,
        y: DVector<f64>,
        weights: DVector<f64>,
        blocks: Vec<TermBlock>,
    ) -> Result<Self> {
        let n = x.nrows();
        Self::assemble(
            x,
            y,
            weights,
            vec![true; n],
            (0..n).collect(),
            vec![0.0; n],
            vec![1.0; n],
            vec![1.0; n],
            blocks,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        x: DMatrix<f64>,
        y: DVector<f64>,
        weights: DVector<f64>,
        measured: Vec<bool>,
        profile: Vec<usize>,
        psi: Vec<f64>,
        temp: Vec<f64>,
        sigma: Vec<f64>,
        blocks: Vec<TermBlock>,
    ) -> Result<Self> {
        let n = x.nrows();
        if y.len() != n || weights.len() != n || measured.len() != n || profile.len() != n {
            return Err(Error::Argument("design row counts disagree".into()));
        }
        let p = x.ncols();
        let covered: usize = blocks.iter().map(|b| b.cols.len()).sum();
        if covered != p {
            return Err(Error::Argument(format!(
                "term blocks cover {covered} of {p} design columns"
            )));
        }
        let n_measured = measured.iter().filter(|m| **m).count();
        let mut sys = Self {
            gram: DMatrix::zeros(p, p),
            rhs: DVector::zeros(p),
            gram_measured: DMatrix::zeros(p, p),
            rhs_measured: DVector::zeros(p),
            yy_measured: 0.0,
            k: DMatrix::zeros(p, p),
            x,
            y,
            weights,
            measured,
            profile,
            psi,
            temp,
            sigma,
            blocks,
            n_measured,
            correlation: CorrelationModel::Independent,
        };
        sys.refresh();
        Ok(sys)
    }

    fn refresh(&mut self) {
        let sqrt_w = self.weights.map(f64::sqrt);
        let mut xw = self.x.clone();
        for (i, mut row) in xw.row_iter_mut().enumerate() {
            row *= sqrt_w[i];
        }
        let yw = self.y.component_mul(&sqrt_w);
        self.gram = xw.tr_mul(&xw);
        self.rhs = xw.tr_mul(&yw);
        if self.measured.iter().all(|m| *m) {
            self.gram_measured = self.gram.clone();
            self.rhs_measured = self.rhs.clone();
            self.yy_measured = yw.norm_squared();
        } else {
            for i in 0..xw.nrows() {
                if !self.measured[i] {
                    xw.row_mut(i).fill(0.0);
                }
            }
            let yw: DVector<f64> =
                DVector::from_fn(yw.len(), |i, _| if self.measured[i] { yw[i] } else { 0.0 });
            self.gram_measured = xw.tr_mul(&xw);
            self.rhs_measured = xw.tr_mul(&yw);
            self.yy_measured = yw.norm_squared();
        }
        self.k = risk::autocorr_k(self, &self.correlation.clone());
    }

    /// Block-diagonal orthogonal eigenbasis `U` of the penalties and the
    /// eigenvalue belonging to each column; null-space eigenvalues are
    /// exactly 0. Solving in this basis keeps heavy penalties on the
    /// diagonal, where Cholesky stays accurate however large `λ` gets.
    pub(crate) fn penalty_eigenbasis(&self) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.num_params();
        let mut rotation = DMatrix::identity(p, p);
        let mut spectrum = DVector::zeros(p);
        for b in self.blocks.iter().filter(|b| b.is_penalized()) {
            let eig = b.penalty.clone().symmetric_eigen();
            let top = eig.eigenvalues.amax();
            let r = b.cols.start;
            let m = b.cols.len();
            rotation.view_mut((r, r), (m, m)).copy_from(&eig.eigenvectors);
            for (i, v) in eig.eigenvalues.iter().enumerate() {
                spectrum[r + i] = if *v > NULL_EIGENVALUE * top { *v } else { 0.0 };
            }
        }
        (rotation, spectrum)
    }

    /// Replace the error-correlation model used for `K`.
    pub fn with_correlation(mut self, correlation: CorrelationModel) -> Self {
        self.correlation = correlation;
        self.k = risk::autocorr_k(&self, &self.correlation.clone());
        self
    }

    /// Same design with a new response and weights (used by iterative fits).
    pub fn reweighted(&self, y: DVector<f64>, weights: DVector<f64>) -> Self {
        let mut out = self.clone();
        out.y = y;
        out.weights = weights;
        out.refresh();
        out
    }

    pub fn num_params(&self) -> usize {
        self.x.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.x.nrows()
    }

    /// `C = X^T D X` over all rows.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// `X^T D y` over all rows.
    pub fn rhs(&self) -> &DVector<f64> {
        &self.rhs
    }

    /// `X^T D X` restricted to measured rows.
    pub fn gram_measured(&self) -> &DMatrix<f64> {
        &self.gram_measured
    }

    pub fn rhs_measured(&self) -> &DVector<f64> {
        &self.rhs_measured
    }

    pub fn yy_measured(&self) -> f64 {
        self.yy_measured
    }

    /// `K = X^T D Sigma D X` over measured rows under the current correlation model.
    pub fn k_matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    /// Block-diagonal penalty `sum_l lambda_l S_l` embedded in `P x P`.
    pub fn penalty(&self, lambdas: &[f64]) -> DMatrix<f64> {
        let p = self.num_params();
        let mut s = DMatrix::zeros(p, p);
        for (b, &lam) in self.blocks.iter().zip(lambdas) {
            if lam != 0.0 && b.is_penalized() {
                let r = b.cols.clone();
                let mut view = s.view_mut((r.start, r.start), (r.len(), r.len()));
                view += &b.penalty * lam;
            }
        }
        s
    }

    /// Weighted residual sum of squares over measured rows.
    pub fn rss_measured(&self, fitted: &DVector<f64>) -> f64 {
        (0..self.num_rows())
            .filter(|&i| self.measured[i])
            .map(|i| self.weights[i] * (self.y[i] - fitted[i]).powi(2))
            .sum()
    }

    /// `tr(C_block) / tr(S_block)` for scale-free smoothing grids.
    pub fn lambda_scale(&self, block: usize) -> f64 {
        let b = &self.blocks[block];
        let ts = b.penalty.trace();
        if ts <= 0.0 {
            return 0.0;
        }
        let r = b.cols.clone();
        let tc: f64 = r.map(|i| self.gram[(i, i)]).sum();
        tc / ts
    }
}

/// Eigenvalues below this fraction of a block's largest are null space.
const NULL_EIGENVALUE: f64 = 1e-12;

/// Build the stacked design for all profiles.
///
/// On the log scale the response is `ln T` and the weight is `(T/sigma)^2`
/// (delta-method error of the logarithm). On the linear scale the initial
/// system is the same; the solver iterates it toward the linear-scale
/// objective.
pub fn build_design(set: &ProfileSet, spec: &AdditiveModelSpec) -> Result<DesignSystem> {
    spec.validate()?;
    let basis = &spec.basis;
    let k = basis.len();
    let order = basis.order();
    let penalty = basis.penalty_matrix();

    let mut blocks = Vec::with_capacity(spec.terms.len());
    let mut start = 0;
    for t in &spec.terms {
        let cols = t.columns(k);
        let fold = fold_matrix(t.constraint, k);
        let folded_penalty = match t.constraint {
            Constraint::Constant => DMatrix::zeros(1, 1),
            _ => fold.transpose() * &penalty * &fold,
        };
        blocks.push(TermBlock {
            label: t.regressor.to_string(),
            term: *t,
            cols: start..start + cols,
            penalty: folded_penalty,
        });
        start += cols;
    }
    let p = start;

    let n_rows: usize = set.records.iter().map(|r| r.len()).sum();
    let mut x = DMatrix::zeros(n_rows, p);
    let mut y = DVector::zeros(n_rows);
    let mut w = DVector::zeros(n_rows);
    let mut measured = Vec::with_capacity(n_rows);
    let mut profile = Vec::with_capacity(n_rows);
    let mut psi = Vec::with_capacity(n_rows);
    let mut temp = Vec::with_capacity(n_rows);
    let mut sigma = Vec::with_capacity(n_rows);

    let mut row = 0;
    for (pi, rec) in set.records.iter().enumerate() {
        let h: Vec<f64> = spec
            .terms
            .iter()
            .map(|t| t.regressor.value(rec, &set.normalization))
            .collect::<Result<_>>()?;
        for j in 0..rec.len() {
            let (first, local) = basis.eval_local(rec.psi[j])?;
            for (ti, t) in spec.terms.iter().enumerate() {
                let cols = &blocks[ti].cols;
                match t.constraint {
                    Constraint::Constant => x[(row, cols.start)] = h[ti],
                    _ => {
                        for (o, b) in local.iter().enumerate().take(order) {
                            let c = fold_index(t.constraint, first + o, k);
                            x[(row, cols.start + c)] += b * h[ti];
                        }
                    }
                }
            }
            let rel = rec.sigma[j] / rec.temp[j];
            y[row] = rec.temp[j].ln();
            w[row] = 1.0 / (rel * rel);
            measured.push(!rec.is_augmented(j));
            profile.push(pi);
            psi.push(rec.psi[j]);
            temp.push(rec.temp[j]);
            sigma.push(rec.sigma[j]);
            row += 1;
        }
    }
    DesignSystem::assemble(x, y, w, measured, profile, psi, temp, sigma, blocks)
}
