//! Published coefficient tables as ready-made models, and a seeded
//! generator of synthetic profile sets drawn from any fitted model.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Covariate, Normalization, ProfileRecord};
use crate::design::{AdditiveModelSpec, Constraint, Regressor, TermSpec};
use crate::error::{Error, Result};
use crate::model::FittedModel;
use crate::spline::SplineBasis;

/// Radii at which the tables are given: -1.0, -0.9, ..., 1.0.
pub fn table_psi() -> Vec<f64> {
    (0..21).map(|i| -1.0 + 0.1 * i as f64).collect()
}

/// Five-function model: f_0, f_I, f_B, f_n, f_qgeo.
pub const TABLE3: [[f64; 5]; 21] = [
    [0.2376, 0.5057, 0.0776, -0.3013, -0.3879],
    [0.4267, 0.6679, 0.0900, -0.2332, -0.3755],
    [0.7972, 0.7728, 0.1320, -0.2710, -0.3370],
    [1.1884, 0.8231, 0.2037, -0.3479, -0.2902],
    [1.4813, 0.8236, 0.3046, -0.3746, -0.2484],
    [1.7071, 0.7827, 0.4317, -0.3449, -0.2161],
    [1.8869, 0.7131, 0.5771, -0.3294, -0.1891],
    [1.9517, 0.6316, 0.7261, -0.3658, -0.1631],
    [1.9528, 0.5561, 0.8577, -0.4384, -0.1397],
    [1.9785, 0.5029, 0.9491, -0.5021, -0.1236],
    [2.0271, 0.4838, 0.9820, -0.5261, -0.1179],
    [2.0257, 0.5029, 0.9491, -0.5021, -0.1236],
    [1.9588, 0.5561, 0.8577, -0.4384, -0.1397],
    [1.8611, 0.6316, 0.7261, -0.3658, -0.1631],
    [1.7285, 0.7131, 0.5771, -0.3294, -0.1891],
    [1.5236, 0.7827, 0.4317, -0.3449, -0.2161],
    [1.2578, 0.8236, 0.3046, -0.3746, -0.2484],
    [0.9711, 0.8231, 0.2037, -0.3479, -0.2902],
    [0.6821, 0.7728, 0.1320, -0.2710, -0.3370],
    [0.4173, 0.6679, 0.0900, -0.2332, -0.3755],
    [0.2243, 0.5057, 0.0776, -0.3013, -0.3879],
];

/// Reference values of the five-function model.
pub const TABLE3_REFERENCES: [(Covariate, f64); 4] = [
    (Covariate::Ip, 2.552),
    (Covariate::Bt, 2.710),
    (Covariate::Nbar, 2.171),
    (Covariate::Qgeo, 4.150),
];

/// Reduced model: f_0 and f_q on q95; I_p, B_t, n constants follow.
pub const TABLE4: [[f64; 2]; 21] = [
    [0.2326, -0.3729],
    [0.4279, -0.3364],
    [0.8015, -0.2822],
    [1.1914, -0.2298],
    [1.4827, -0.1951],
    [1.7092, -0.1836],
    [1.8890, -0.1885],
    [1.9514, -0.1995],
    [1.9505, -0.2105],
    [1.9750, -0.2186],
    [2.0194, -0.2215],
    [2.0154, -0.2186],
    [1.9511, -0.2105],
    [1.8579, -0.1995],
    [1.7298, -0.1885],
    [1.5275, -0.1836],
    [1.2613, -0.1951],
    [0.9729, -0.2298],
    [0.6841, -0.2822],
    [0.4194, -0.3364],
    [0.2208, -0.3729],
];

/// Constants `c_I, c_B, c_n` of the reduced model.
pub const TABLE4_CONSTANTS: [(Covariate, f64); 3] = [
    (Covariate::Ip, 0.6868),
    (Covariate::Bt, 0.49),
    (Covariate::Nbar, -0.3652),
];

pub const TABLE4_Q95_REFERENCE: f64 = 4.537;

/// Relative penalty used to turn 21 samples into 24 spline coefficients.
const INTERPOLATION_PENALTY: f64 = 1e-9;

/// Spline coefficients that pass through `values` at `psi` up to a vanishing
/// roughness penalty, which selects the smoothest near-interpolant.
pub fn interpolate(basis: &SplineBasis, psi: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    if psi.len() != values.len() {
        return Err(Error::Argument("psi and values differ in length".into()));
    }
    let k = basis.len();
    let mut b = DMatrix::zeros(psi.len(), k);
    for (i, &p) in psi.iter().enumerate() {
        let row = basis.eval(p)?;
        for j in 0..k {
            b[(i, j)] = row[j];
        }
    }
    let s = basis.penalty_matrix();
    let c = b.tr_mul(&b);
    let lam = INTERPOLATION_PENALTY * c.trace() / s.trace();
    let a = c + s * lam;
    let rhs = b.tr_mul(&DVector::from_column_slice(values));
    let coef = a
        .cholesky()
        .ok_or_else(|| Error::RankDeficient { term: "interpolant".into() })?
        .solve(&rhs);
    Ok(coef.iter().copied().collect())
}

/// Build a model from functions tabulated at `psi`. Constant terms take the
/// mean of their column.
pub fn tabulated_model(
    basis: SplineBasis,
    psi: &[f64],
    terms: Vec<(TermSpec, Vec<f64>)>,
    normalization: Normalization,
) -> Result<FittedModel> {
    let k = basis.len();
    let expanded = terms
        .into_iter()
        .map(|(t, v)| {
            let c = match t.constraint {
                Constraint::Constant => vec![v.iter().sum::<f64>() / v.len() as f64; k],
                _ => interpolate(&basis, psi, &v)?,
            };
            Ok((t, c))
        })
        .collect::<Result<Vec<_>>>()?;
    FittedModel::from_coefficients(basis, expanded, normalization)
}

fn column<const W: usize>(table: &[[f64; W]; 21], j: usize) -> Vec<f64> {
    table.iter().map(|r| r[j]).collect()
}

/// The five-function model of the coefficient table, on the default basis.
pub fn table3_model() -> FittedModel {
    let regs = [
        Regressor::Intercept,
        Regressor::Covariate(Covariate::Ip),
        Regressor::Covariate(Covariate::Bt),
        Regressor::Covariate(Covariate::Nbar),
        Regressor::Covariate(Covariate::Qgeo),
    ];
    let terms = regs
        .iter()
        .enumerate()
        .map(|(j, &r)| (TermSpec::new(r, Constraint::Free), column(&TABLE3, j)))
        .collect();
    tabulated_model(
        AdditiveModelSpec::default_basis(),
        &table_psi(),
        terms,
        TABLE3_REFERENCES.into_iter().collect(),
    )
    .expect("tabulated model is well formed")
}

/// The reduced model: free f_0 and f_q on q95, constant I_p, B_t, n.
pub fn table4_model() -> FittedModel {
    let mut terms = vec![
        (TermSpec::intercept(), column(&TABLE4, 0)),
        (TermSpec::free(Covariate::Q95), column(&TABLE4, 1)),
    ];
    for (c, v) in TABLE4_CONSTANTS {
        terms.push((TermSpec::constant(c), vec![v; 21]));
    }
    let mut norm: Normalization = TABLE3_REFERENCES[..3].iter().copied().collect();
    norm.insert(Covariate::Q95, TABLE4_Q95_REFERENCE);
    tabulated_model(AdditiveModelSpec::default_basis(), &table_psi(), terms, norm)
        .expect("tabulated model is well formed")
}

/// Look up a built-in model by name (`table3`, `table4`).
pub fn builtin_model(name: &str) -> Result<FittedModel> {
    match name.to_ascii_lowercase().as_str() {
        "table3" => Ok(table3_model()),
        "table4" => Ok(table4_model()),
        _ => Err(Error::Argument(format!("unknown built-in model `{name}`"))),
    }
}

/// Sampling range of one covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateRange {
    pub lo: f64,
    pub hi: f64,
    /// Uniform in the logarithm; needs a positive range.
    pub log_uniform: bool,
}

impl CovariateRange {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self {
            lo,
            hi,
            log_uniform: lo > 0.0,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi <= self.lo {
            return self.lo;
        }
        if self.log_uniform {
            rng.random_range(self.lo.ln()..self.hi.ln()).exp().clamp(self.lo, self.hi)
        } else {
            rng.random_range(self.lo..self.hi)
        }
    }
}

/// Database extremes of the engineering variables. `li` and `time` are not
/// tabulated and get nominal ranges.
pub fn table1_ranges() -> BTreeMap<Covariate, CovariateRange> {
    use Covariate::*;
    [
        (Nbar, 1.32, 3.90),
        (Q95, 2.88, 12.6),
        (Ip, 0.97, 5.25),
        (Bt, 1.30, 3.22),
        (Kappa, 1.30, 1.75),
        (A, 1.05, 1.19),
        (R, 2.83, 3.01),
        (Vloop, -1.12, 0.914),
        (Zeff, 1.07, 3.10),
        (Li, 0.8, 1.4),
        (Time, 45.0, 65.0),
    ]
    .into_iter()
    .map(|(c, lo, hi)| (c, CovariateRange::new(lo, hi)))
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub n_profiles: usize,
    pub points_per_profile: usize,
    /// Standard deviation of the multiplicative log-normal noise.
    pub noise_rel: f64,
    pub ranges: BTreeMap<Covariate, CovariateRange>,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_profiles: 43,
            points_per_profile: 50,
            noise_rel: 0.10,
            ranges: table1_ranges(),
            seed: 0,
        }
    }
}

/// Nominal relative error reported for noiseless profiles.
const NOISELESS_SIGMA_REL: f64 = 0.01;

/// Draw profiles from `model`: covariates independently within their
/// ranges, radii stratified over `[-1, 1]` with one jittered point per
/// stratum, and `T = prediction * exp(noise_rel * z)`.
pub fn simulate_profiles(model: &FittedModel, config: &SimulationConfig) -> Result<Vec<ProfileRecord>> {
    if !(config.noise_rel >= 0.0) || !config.noise_rel.is_finite() {
        return Err(Error::Argument(format!("noise_rel must be >= 0, got {}", config.noise_rel)));
    }
    if config.points_per_profile < 4 {
        return Err(Error::Argument("at least 4 points per profile are required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let m = config.points_per_profile;
    let width = 2.0 / m as f64;
    let sigma_rel = if config.noise_rel > 0.0 {
        config.noise_rel
    } else {
        NOISELESS_SIGMA_REL
    };
    let mut records = Vec::with_capacity(config.n_profiles);
    for i in 0..config.n_profiles {
        let mut cov = BTreeMap::new();
        for (c, r) in &config.ranges {
            cov.insert(c.name().to_string(), r.sample(&mut rng));
        }
        let mut psi = Vec::with_capacity(m);
        let mut temp = Vec::with_capacity(m);
        let mut sigma = Vec::with_capacity(m);
        for j in 0..m {
            let p = (-1.0 + width * (j as f64 + rng.random_range(0.1..0.9))).clamp(-1.0, 1.0);
            let eps: f64 = normal.sample(&mut rng);
            let t = model.predict(p, &cov)? * (config.noise_rel * eps).exp();
            psi.push(p);
            temp.push(t);
            sigma.push(sigma_rel * t);
        }
        records.push(ProfileRecord::new(format!("sim-{i:04}"), psi, temp, sigma, cov));
    }
    Ok(records)
}
