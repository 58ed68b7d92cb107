//! Additive spline models of tokamak temperature profiles.
//!
//! `ln T(psi, u) = sum_l f_l(psi) h_l(u)` is fitted by penalized weighted
//! least squares on a cubic B-spline basis, with smoothing parameters and
//! covariates chosen by risk minimization. A one-dimensional transport solver
//! turns a diffusivity model into temperature profiles for the inverse
//! problem.

pub mod cli;
pub mod dataset;
pub mod design;
pub mod diffusivity;
pub mod error;
pub mod model;
pub mod risk;
pub mod selection;
pub mod solver;
pub mod spline;
pub mod synthetic;

pub use dataset::{load_profiles, Covariate, ProfileRecord, ProfileSet};
pub use design::{AdditiveModelSpec, Constraint, FitScale, Regressor, TermSpec};
pub use diffusivity::{fit_chi, forward_temperature, ChiModel, DischargeConditions};
pub use error::{Error, Result};
pub use model::{fit_model, FitOptions, FittedModel, LambdaMode};
pub use risk::{CorrelationModel, RiskReport};
pub use selection::{forward_select, Criterion, LambdaGrid, SelectionOptions};
pub use spline::SplineBasis;
pub use synthetic::{simulate_profiles, SimulationConfig};
