//! Penalized weighted least squares and the hat-matrix algebra behind the
//! risk estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::design::DesignSystem;
use crate::error::{Error, Result};
use crate::risk::trace_product;

/// Jitter added once to the diagonal when the penalized Gram matrix is not
/// numerically positive definite, relative to `tr(C)/P`.
const JITTER: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct FitResult {
    pub alpha: DVector<f64>,
    pub lambdas: Vec<f64>,
    /// `G = (X^T D X + sum λ_l S_l)^{-1}`.
    pub g: DMatrix<f64>,
    pub trace_cg: f64,
    pub trace_kg: f64,
    /// `||y - X alpha||_D^2` over measured rows.
    pub rss_weighted: f64,
    /// `X alpha` for every row.
    pub fitted: DVector<f64>,
}

/// Smallest admissible pivot `L_ii^2 / C_ii`; below it the column is
/// numerically a combination of earlier columns.
const MIN_PIVOT: f64 = 1e-8;

/// Cholesky factor of a penalized Gram matrix `a` whose unpenalized diagonal
/// is `diag`, with one jittered retry. A rank-deficient system is an error
/// naming the term that owns the first collapsed pivot.
pub(crate) fn factor(system: &DesignSystem, a: DMatrix<f64>, diag: &[f64]) -> Result<Cholesky<f64, Dyn>> {
    let p = a.nrows();
    let chol = match a.clone().cholesky() {
        Some(ch) => Some(ch),
        None => {
            let eps = JITTER * system.gram().trace().max(f64::MIN_POSITIVE) / p as f64;
            let mut jittered = a;
            for i in 0..p {
                jittered[(i, i)] += eps;
            }
            jittered.cholesky()
        }
    };
    let collapsed = match &chol {
        Some(ch) => {
            let l = ch.l_dirty();
            (0..p).find(|&i| !(l[(i, i)] * l[(i, i)] > MIN_PIVOT * diag[i]))
        }
        None => Some(p.saturating_sub(1)),
    };
    match (chol, collapsed) {
        (Some(ch), None) => Ok(ch),
        (_, Some(i)) => Err(Error::RankDeficient {
            term: system
                .blocks
                .iter()
                .find(|b| b.cols.contains(&i))
                .or(system.blocks.last())
                .map(|b| b.label.clone())
                .unwrap_or_default(),
        }),
        (None, None) => unreachable!(),
    }
}

/// Minimize `(y - X a)^T D (y - X a) + sum_l λ_l a_l^T S_l a_l`.
pub fn solve(system: &DesignSystem, lambdas: &[f64]) -> Result<FitResult> {
    if lambdas.len() != system.blocks.len() {
        return Err(Error::Argument(format!(
            "expected {} smoothing parameters, got {}",
            system.blocks.len(),
            lambdas.len()
        )));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
        return Err(Error::Argument(format!("smoothing parameter {l} must be finite and >= 0")));
    }
    // work in the penalty eigenbasis, where A = U (U^T C U + diag(λ s)) U^T
    let (u, spectrum) = system.penalty_eigenbasis();
    let rotated = u.tr_mul(&(system.gram() * &u));
    let mut a = rotated.clone();
    for (b, block) in system.blocks.iter().enumerate() {
        for i in block.cols.clone() {
            a[(i, i)] += lambdas[b] * spectrum[i];
        }
    }
    let diag: Vec<f64> = (0..a.nrows()).map(|i| rotated[(i, i)]).collect();
    let chol = factor(system, a, &diag)?;
    let g = &u * chol.inverse() * u.transpose();
    let alpha = &u * chol.solve(&u.tr_mul(system.rhs()));
    let fitted = &system.x * &alpha;
    let rss_weighted = system.rss_measured(&fitted);
    Ok(FitResult {
        trace_cg: trace_product(system.gram(), &g),
        trace_kg: trace_product(system.k_matrix(), &g),
        alpha,
        lambdas: lambdas.to_vec(),
        g,
        rss_weighted,
        fitted,
    })
}

/// `Cov[alpha] = G K G`.
pub fn coefficient_covariance(fit: &FitResult, system: &DesignSystem) -> DMatrix<f64> {
    &fit.g * system.k_matrix() * &fit.g
}

/// The penalized objective at an arbitrary coefficient vector.
pub fn objective(system: &DesignSystem, lambdas: &[f64], alpha: &DVector<f64>) -> f64 {
    let r = &system.y - &system.x * alpha;
    let data: f64 = r
        .iter()
        .zip(system.weights.iter())
        .map(|(r, w)| w * r * r)
        .sum();
    let s = system.penalty(lambdas);
    data + (alpha.transpose() * s * alpha)[(0, 0)]
}

/// Fit on the linear temperature scale: minimize `sum ((T - exp(X a)) / sigma)^2`
/// plus the penalty, by Gauss–Newton iterations on the log-linear predictor
/// started from the log-scale fit. Returns the final working system, whose
/// weighted residuals are exactly the linear-scale residuals.
pub fn solve_linear_scale(
    system: &DesignSystem,
    lambdas: &[f64],
    max_iter: usize,
) -> Result<(DesignSystem, FitResult)> {
    let mut fit = solve(system, lambdas)?;
    for _ in 0..max_iter {
        let n = system.num_rows();
        let mut z = DVector::zeros(n);
        let mut w = DVector::zeros(n);
        for i in 0..n {
            let mu = fit.fitted[i].exp();
            z[i] = fit.fitted[i] + (system.temp[i] - mu) / mu;
            w[i] = (mu / system.sigma[i]).powi(2);
        }
        let next = solve(&system.reweighted(z, w), lambdas)?;
        let step = (&next.alpha - &fit.alpha).amax();
        fit = next;
        if step < 1e-10 * (1.0 + fit.alpha.amax()) {
            break;
        }
    }
    // residuals at the converged predictor
    let n = system.num_rows();
    let mut z = DVector::zeros(n);
    let mut w = DVector::zeros(n);
    for i in 0..n {
        let mu = fit.fitted[i].exp();
        z[i] = fit.fitted[i] + (system.temp[i] - mu) / mu;
        w[i] = (mu / system.sigma[i]).powi(2);
    }
    let working = system.reweighted(z, w);
    fit.rss_weighted = working.rss_measured(&fit.fitted);
    fit.trace_cg = trace_product(working.gram(), &fit.g);
    fit.trace_kg = trace_product(working.k_matrix(), &fit.g);
    Ok((working, fit))
}
