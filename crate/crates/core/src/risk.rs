//! Risk estimators for penalized fits: the Craven–Wahba estimate of the
//! expected average square error, its variance estimate, GCV, the Rice
//! criterion and the χ² statistic.
//!
//! All of them depend on the fit only through the weighted residual sum of
//! squares over measured rows, the measured count `N`, and `tr[K G]`, where
//! `G = (X^T D X + sum λ S)^{-1}` and `K = X^T D Σ D X`. With independent
//! errors `K` equals `C = X^T D X` and the traces are the usual effective
//! parameter counts; a radially correlated `Σ` inflates them.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::DesignSystem;
use crate::error::{Error, Result};
use crate::solver::FitResult;

/// Denominators within this fraction of `N` of zero count as nonpositive.
const DENOMINATOR_TOL: f64 = 1e-9;

fn admissible(denominator: f64, n: usize) -> bool {
    denominator > DENOMINATOR_TOL * n as f64
}

/// Default correlation length in psi for the radial kernel.
pub const DEFAULT_LENGTH_SCALE: f64 = 0.05;

/// Error correlation within a profile. Profiles are always uncorrelated.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CorrelationModel {
    #[default]
    Independent,
    /// `corr(j, k) = rho^(|psi_j - psi_k| / length_scale)`.
    RadialAr1 { rho: f64, length_scale: f64 },
}

impl CorrelationModel {
    pub fn radial(rho: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::Argument(format!("rho must lie in [0, 1), got {rho}")));
        }
        Ok(if rho == 0.0 {
            CorrelationModel::Independent
        } else {
            CorrelationModel::RadialAr1 {
                rho,
                length_scale: DEFAULT_LENGTH_SCALE,
            }
        })
    }

    pub fn is_correlated(&self) -> bool {
        matches!(self, CorrelationModel::RadialAr1 { rho, .. } if *rho != 0.0)
    }

    fn correlation(&self, dpsi: f64) -> f64 {
        match *self {
            CorrelationModel::Independent => {
                if dpsi == 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            CorrelationModel::RadialAr1 { rho, length_scale } => {
                if rho == 0.0 {
                    if dpsi == 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    rho.powf(dpsi.abs() / length_scale)
                }
            }
        }
    }
}

/// `K = X^T D Σ D X` over measured rows, with `Σ_jk = σ_j σ_k corr(j, k)`
/// inside each profile and zero across profiles.
pub fn autocorr_k(system: &DesignSystem, corr: &CorrelationModel) -> DMatrix<f64> {
    if !corr.is_correlated() {
        return system.gram_measured().clone();
    }
    let p = system.num_params();
    let n = system.num_rows();
    // rows of A = D^{1/2} X, since D Σ D = D^{1/2} R D^{1/2} with R the correlation
    let mut a = DMatrix::zeros(n, p);
    for i in 0..n {
        if system.measured[i] {
            let s = system.weights[i].sqrt();
            for j in 0..p {
                a[(i, j)] = system.x[(i, j)] * s;
            }
        }
    }
    let mut k = a.tr_mul(&a);
    // add off-diagonal correlation contributions profile by profile
    let mut start = 0;
    while start < n {
        let pid = system.profile[start];
        let mut end = start;
        while end < n && system.profile[end] == pid {
            end += 1;
        }
        let rows: Vec<usize> = (start..end).filter(|&i| system.measured[i]).collect();
        let m = rows.len();
        if m > 1 {
            let mut r = DMatrix::zeros(m, m);
            for (u, &i) in rows.iter().enumerate() {
                for (v, &j) in rows.iter().enumerate() {
                    if u != v {
                        r[(u, v)] = corr.correlation(system.psi[i] - system.psi[j]);
                    }
                }
            }
            let ab = a.select_rows(&rows);
            k += ab.tr_mul(&(r * &ab));
        }
        start = end;
    }
    k
}

/// `tr(A B)` for symmetric `A`, `B`.
pub fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn trace_kg(fit: &FitResult, k: &DMatrix<f64>) -> f64 {
    trace_product(k, &fit.g)
}

/// Craven–Wahba estimate of the EASE: `rss - (N - 2 tr[KG])`. May be negative.
pub fn ease_estimate(fit: &FitResult, k: &DMatrix<f64>, n: usize) -> f64 {
    ease_from_parts(fit.rss_weighted, trace_kg(fit, k), n)
}

pub fn ease_from_parts(rss: f64, trace: f64, n: usize) -> f64 {
    rss - (n as f64 - 2.0 * trace)
}

/// Craven–Wahba variance estimate `rss / (N - tr[KG])`.
pub fn sigma2_cw(fit: &FitResult, k: &DMatrix<f64>, n: usize) -> Result<f64> {
    sigma2_from_parts(fit.rss_weighted, trace_kg(fit, k), n)
}

pub fn sigma2_from_parts(rss: f64, trace: f64, n: usize) -> Result<f64> {
    let dof = n as f64 - trace;
    if !admissible(dof, n) {
        return Err(Error::Saturated { dof });
    }
    Ok(rss / dof)
}

/// Generalized cross-validation `N rss / (N - tr[KG])^2`.
pub fn gcv(fit: &FitResult, k: &DMatrix<f64>, n: usize) -> Result<f64> {
    gcv_from_parts(fit.rss_weighted, trace_kg(fit, k), n)
}

pub fn gcv_from_parts(rss: f64, trace: f64, n: usize) -> Result<f64> {
    let dof = n as f64 - trace;
    if !admissible(dof, n) {
        return Err(Error::Saturated { dof });
    }
    Ok(n as f64 * rss / (dof * dof))
}

/// Rice criterion `rss / (N - 2 tr[KG])`.
pub fn rice(fit: &FitResult, k: &DMatrix<f64>, n: usize) -> Result<f64> {
    rice_from_parts(fit.rss_weighted, trace_kg(fit, k), n)
}

pub fn rice_from_parts(rss: f64, trace: f64, n: usize) -> Result<f64> {
    let denominator = n as f64 - 2.0 * trace;
    if !admissible(denominator, n) {
        return Err(Error::OverParameterized { denominator });
    }
    Ok(rss / denominator)
}

/// Mean square error per effective degree of freedom.
pub fn chi2_stat(fit: &FitResult, k: &DMatrix<f64>, n: usize) -> Result<f64> {
    sigma2_cw(fit, k, n)
}

/// Every risk statistic for one fit. Statistics whose denominator is not
/// positive are reported as `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub ease_cw: f64,
    pub gcv: Option<f64>,
    pub rice: Option<f64>,
    pub chi2: Option<f64>,
    pub sigma2_cw: Option<f64>,
    pub dof_effective: f64,
    pub n_measured: usize,
    pub rss_weighted: f64,
    pub trace_kg: f64,
    pub trace_cg: f64,
}

impl RiskReport {
    pub fn from_parts(rss: f64, trace_kg: f64, trace_cg: f64, n: usize) -> Self {
        Self {
            ease_cw: ease_from_parts(rss, trace_kg, n),
            gcv: gcv_from_parts(rss, trace_kg, n).ok(),
            rice: rice_from_parts(rss, trace_kg, n).ok(),
            chi2: sigma2_from_parts(rss, trace_kg, n).ok(),
            sigma2_cw: sigma2_from_parts(rss, trace_kg, n).ok(),
            dof_effective: n as f64 - trace_kg,
            n_measured: n,
            rss_weighted: rss,
            trace_kg,
            trace_cg,
        }
    }

    pub fn for_fit(fit: &FitResult, k: &DMatrix<f64>, n: usize) -> Self {
        Self::from_parts(fit.rss_weighted, trace_kg(fit, k), fit.trace_cg, n)
    }

    /// Fixed-order text table.
    pub fn render(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("inadmissible".to_string(), |v| format!("{v:.6}"));
        format!(
            "n_measured\t{}\nrss_weighted\t{:.6}\ntrace_cg\t{:.6}\ntrace_kg\t{:.6}\ndof_effective\t{:.6}\nease_cw\t{:.6}\nsigma2_cw\t{}\ngcv\t{}\nrice\t{}\nchi2\t{}\n",
            self.n_measured,
            self.rss_weighted,
            self.trace_cg,
            self.trace_kg,
            self.dof_effective,
            self.ease_cw,
            opt(self.sigma2_cw),
            opt(self.gcv),
            opt(self.rice),
            opt(self.chi2),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{Constraint, Regressor, TermBlock, TermSpec};
    use crate::solver::solve;
    use nalgebra::DVector;

    fn mean_block() -> Vec<TermBlock> {
        vec![TermBlock {
            label: "INTERCEPT".into(),
            term: TermSpec::new(Regressor::Intercept, Constraint::Constant),
            cols: 0..1,
            penalty: DMatrix::zeros(1, 1),
        }]
    }

    fn mean_model(y: &[f64]) -> (DesignSystem, FitResult) {
        let n = y.len();
        let sys = DesignSystem::from_parts(
            DMatrix::from_element(n, 1, 1.0),
            DVector::from_column_slice(y),
            DVector::from_element(n, 1.0),
            mean_block(),
        )
        .unwrap();
        let fit = solve(&sys, &[0.0]).unwrap();
        (sys, fit)
    }

    #[test]
    fn mean_model_toy_values() {
        let (sys, fit) = mean_model(&[1.0, 3.0]);
        let k = sys.k_matrix();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(fit.rss_weighted, 2.0));
        assert!(close(ease_estimate(&fit, k, 2), 2.0));
        assert!(close(sigma2_cw(&fit, k, 2).unwrap(), 2.0));
        assert!(close(gcv(&fit, k, 2).unwrap(), 4.0));
        assert!(close(chi2_stat(&fit, k, 2).unwrap(), 2.0));
        assert!(matches!(rice(&fit, k, 2), Err(Error::OverParameterized { .. })));
    }

    #[test]
    fn four_point_rice() {
        let (sys, fit) = mean_model(&[1.0, 3.0, 1.0, 3.0]);
        assert!((fit.rss_weighted - 4.0).abs() < 1e-12);
        assert!((rice(&fit, sys.k_matrix(), 4).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_fit_ease() {
        assert_eq!(ease_from_parts(0.0, 3.0, 10), -(10.0 - 6.0));
        assert_eq!(gcv_from_parts(0.0, 3.0, 10).unwrap(), 0.0);
    }

    #[test]
    fn saturation_errors() {
        assert!(matches!(sigma2_from_parts(1.0, 5.0, 5), Err(Error::Saturated { .. })));
        assert!(matches!(gcv_from_parts(1.0, 6.0, 5), Err(Error::Saturated { .. })));
    }

    #[test]
    fn two_point_correlated_k() {
        // rho^(dpsi / h) = 0.5 with dpsi = h
        let mut sys = DesignSystem::from_parts(
            DMatrix::from_element(2, 1, 1.0),
            DVector::from_column_slice(&[1.0, 2.0]),
            DVector::from_element(2, 1.0),
            mean_block(),
        )
        .unwrap();
        sys.profile = vec![0, 0];
        sys.psi = vec![0.0, DEFAULT_LENGTH_SCALE];
        let corr = CorrelationModel::radial(0.5).unwrap();
        let k = autocorr_k(&sys, &corr);
        assert!((k[(0, 0)] - 3.0).abs() < 1e-14);
        let indep = autocorr_k(&sys, &CorrelationModel::Independent);
        assert_eq!(indep[(0, 0)], 2.0);
        let zero = autocorr_k(&sys, &CorrelationModel::RadialAr1 { rho: 0.0, length_scale: 0.05 });
        assert_eq!(zero, indep);
    }

    #[test]
    fn statistic_identities_share_rss() {
        let (rss, tr, n) = (37.5, 4.25, 120usize);
        let nf = n as f64;
        let c_r = rice_from_parts(rss, tr, n).unwrap();
        let g = gcv_from_parts(rss, tr, n).unwrap();
        let chi = sigma2_from_parts(rss, tr, n).unwrap();
        assert!((c_r * (nf - 2.0 * tr) - rss).abs() < 1e-12);
        assert!((g * (nf - tr).powi(2) / nf - rss).abs() < 1e-12);
        assert!(chi <= c_r);
    }

    #[test]
    fn gcv_and_rice_agree_to_first_order() {
        let (n, tr) = (1000usize, 5.0);
        let rss = 1000.0;
        let g = gcv_from_parts(rss, tr, n).unwrap();
        let c_r = rice_from_parts(rss, tr, n).unwrap();
        assert!(((g - c_r) / c_r).abs() < 2.0 * tr / n as f64);
        // large N at fixed trace: GCV -> rss/N
        let n = 10_000usize;
        let rss = 10_000.0;
        let g = gcv_from_parts(rss, tr, n).unwrap();
        assert!((g / (rss / n as f64) - 1.0).abs() < 0.01);
    }

    #[test]
    fn rejects_bad_rho() {
        assert!(CorrelationModel::radial(1.0).is_err());
        assert!(CorrelationModel::radial(-0.1).is_err());
    }
}
