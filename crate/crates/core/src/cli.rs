//! Command-line front end. Every command is a pure function of its flags:
//! stochastic steps draw from a generator seeded by `--seed`, and outputs use
//! fixed formatting so reruns are byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::dataset::{load_profiles, Covariate, ProfileSet, EDGE_THRESHOLD, REFLECTION_THRESHOLD};
use crate::design::{AdditiveModelSpec, FitScale, TermSpec};
use crate::diffusivity::{chi_basis, fit_chi, load_conditions, ChiFitOptions, DEFAULT_CHI_KNOTS, DEFAULT_GRID};
use crate::error::{Error, Result};
use crate::model::{fit_model, FitOptions, FittedModel, LambdaMode};
use crate::risk::CorrelationModel;
use crate::selection::{forward_select, Criterion, LambdaGrid, SelectionOptions, DEFAULT_STOP_TOLERANCE};
use crate::spline::{SplineBasis, DEFAULT_EDGE_THINNING};
use crate::synthetic::{builtin_model, simulate_profiles, table1_ranges, CovariateRange, SimulationConfig};

#[derive(Debug, Parser)]
#[command(name = "plasma-profiles", version, about = "Penalized additive models of plasma temperature profiles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit an additive model and write it as JSON.
    Fit(FitArgs),
    /// Forward stepwise selection of covariates.
    Select(SelectArgs),
    /// Evaluate a model at measured points or on a radial grid.
    Predict(PredictArgs),
    /// Print the term functions on a uniform radial grid.
    Tabulate(TabulateArgs),
    /// Draw synthetic profiles from a model.
    Simulate(SimulateArgs),
    /// Fit a log-additive diffusivity through the transport model.
    ChiFit(ChiFitArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CriterionArg {
    Rice,
    Gcv,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Rice => Criterion::Rice,
            CriterionArg::Gcv => Criterion::Gcv,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScaleArg {
    Log,
    Linear,
}

/// Input loading and preprocessing shared by the fitting commands.
#[derive(Debug, Args)]
pub struct InputArgs {
    /// Profiles, one JSON record per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Skip edge-rise deletion and inboard reflection.
    #[arg(long)]
    pub raw: bool,
    #[arg(long, default_value_t = EDGE_THRESHOLD)]
    pub edge_threshold: f64,
    /// Mirror outboard points beyond this |psi| to the inboard side.
    #[arg(long, default_value_t = REFLECTION_THRESHOLD)]
    pub reflect: f64,
    #[arg(long)]
    pub no_reflect: bool,
    /// Take covariate reference values from this model instead of the data.
    #[arg(long)]
    pub normalization: Option<String>,
}

/// Smoothing and risk options shared by the fitting commands.
#[derive(Debug, Args)]
pub struct RiskArgs {
    #[arg(long, value_enum, default_value = "rice")]
    pub criterion: CriterionArg,
    /// Error autocorrelation between neighbouring radii of one profile.
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    /// Smoothing grid as `lo:hi:n`, multiples of each term's scale.
    #[arg(long, default_value = "1e-6:1e6:25")]
    pub lambda_grid: String,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Preset (`full`, `reduced`, `intercept`), inline JSON or a JSON file.
    #[arg(long, default_value = "full")]
    pub spec: String,
    #[command(flatten)]
    pub risk: RiskArgs,
    /// Fixed smoothing parameters, comma separated, one per term.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "log")]
    pub scale: ScaleArg,
    /// Accepted for uniformity; fitting is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model JSON destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Candidate covariates, comma separated; defaults to every covariate.
    #[arg(long, value_delimiter = ',')]
    pub candidates: Option<Vec<String>>,
    #[arg(long, default_value_t = 5)]
    pub max_stages: usize,
    /// Relative improvement below which selection stops.
    #[arg(long, default_value_t = DEFAULT_STOP_TOLERANCE)]
    pub tolerance: f64,
    #[command(flatten)]
    pub risk: RiskArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Selection trace JSON destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model file or `builtin:table3` / `builtin:table4`.
    #[arg(long)]
    pub model: String,
    /// Predict at every point of these profiles.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Covariates for grid prediction, as `Ip=2.5,Bt=2.7,...`.
    #[arg(long, value_delimiter = ',')]
    pub at: Option<Vec<String>>,
    #[arg(long, default_value_t = 0.1)]
    pub step: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TabulateArgs {
    /// Model file or `builtin:table3` / `builtin:table4`.
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value_t = 0.1)]
    pub step: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Model file or `builtin:table3` / `builtin:table4`.
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value_t = 43)]
    pub n_profiles: usize,
    #[arg(long, default_value_t = 50)]
    pub points: usize,
    /// Standard deviation of the multiplicative log-normal noise.
    #[arg(long, default_value_t = 0.10)]
    pub noise: f64,
    /// JSON map of covariate to `[lo, hi]` overriding the default ranges.
    #[arg(long)]
    pub ranges: Option<String>,
    /// Sample covariates uniformly instead of log-uniformly.
    #[arg(long)]
    pub linear_sampling: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ChiFitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Discharge conditions, one JSON record per line.
    #[arg(long)]
    pub conditions: PathBuf,
    /// Preset (`intercept`), inline JSON or a JSON file; basis defaults to `[0, 1]`.
    #[arg(long, default_value = "intercept")]
    pub spec: String,
    /// Penalty weights, comma separated, one per term.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_GRID)]
    pub grid: usize,
    #[arg(long, default_value_t = 100)]
    pub max_iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Spec file layout: terms plus an optional basis or knot count.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    terms: Vec<TermSpec>,
    #[serde(default)]
    basis: Option<SplineBasis>,
    #[serde(default)]
    knots: Option<usize>,
}

fn five_term() -> Vec<TermSpec> {
    vec![
        TermSpec::intercept(),
        TermSpec::free(Covariate::Ip),
        TermSpec::free(Covariate::Bt),
        TermSpec::free(Covariate::Nbar),
        TermSpec::free(Covariate::Qgeo),
    ]
}

fn reduced() -> Vec<TermSpec> {
    vec![
        TermSpec::intercept(),
        TermSpec::constant(Covariate::Ip),
        TermSpec::constant(Covariate::Bt),
        TermSpec::constant(Covariate::Nbar),
        TermSpec::free(Covariate::Qgeo),
    ]
}

/// Resolve `--spec`. `chi` selects the `[0, 1]` basis used for diffusivity.
pub fn parse_spec(text: &str, chi: bool) -> Result<AdditiveModelSpec> {
    let default_basis = |knots: Option<usize>| -> Result<SplineBasis> {
        match (chi, knots) {
            (true, k) => chi_basis(k.unwrap_or(DEFAULT_CHI_KNOTS)),
            (false, None) => Ok(AdditiveModelSpec::default_basis()),
            (false, Some(k)) => SplineBasis::radial(k, DEFAULT_EDGE_THINNING),
        }
    };
    let terms = match text.trim() {
        "full" => Some(five_term()),
        "reduced" => Some(reduced()),
        "intercept" => Some(vec![TermSpec::intercept()]),
        _ => None,
    };
    if let Some(terms) = terms {
        return AdditiveModelSpec::new(terms, default_basis(None)?);
    }
    let json = if text.trim_start().starts_with('{') {
        text.to_string()
    } else {
        fs::read_to_string(text).map_err(|e| Error::io(text, e))?
    };
    let file: SpecFile = serde_json::from_str(&json).map_err(|e| Error::Spec(e.to_string()))?;
    let basis = match file.basis {
        Some(b) => b,
        None => default_basis(file.knots)?,
    };
    AdditiveModelSpec::new(file.terms, basis)
}

/// A model file path or `builtin:<name>`.
pub fn load_model(source: &str) -> Result<FittedModel> {
    match source.strip_prefix("builtin:") {
        Some(name) => builtin_model(name),
        None => FittedModel::load(source),
    }
}

fn load_input(args: &InputArgs) -> Result<ProfileSet> {
    let mut set = load_profiles(&args.input)?;
    if !args.raw {
        let reflect = (!args.no_reflect).then_some(args.reflect);
        set = set.preprocess(args.edge_threshold, reflect)?;
    }
    if let Some(source) = &args.normalization {
        set = set.with_normalization(load_model(source)?.normalization);
    }
    Ok(set)
}

fn risk_options(args: &RiskArgs) -> Result<(Criterion, LambdaGrid, CorrelationModel)> {
    let grid: LambdaGrid = args.lambda_grid.parse()?;
    let corr = if args.rho == 0.0 {
        CorrelationModel::Independent
    } else {
        CorrelationModel::radial(args.rho)?
    };
    Ok((args.criterion.into(), grid, corr))
}

fn emit(out: &Option<PathBuf>, text: &str, stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(p) => write_file(p, text),
        None => stdout.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn say(stdout: &mut dyn Write, text: &str) -> Result<()> {
    stdout.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn summary(model: &FittedModel) -> String {
    let mut s = String::new();
    if let Some(m) = &model.metrics {
        s += &format!(
            "mae_ev\t{:.4}\nmae_percent\t{:.4}\nlog_rmse\t{:.6}\n",
            m.mae, m.mae_percent, m.log_rmse
        );
    }
    if let Some(r) = &model.risk {
        let rice = r.rice.map_or("inadmissible".to_string(), |v| format!("{v:.6}"));
        s += &format!("rice\t{rice}\ndof_effective\t{:.6}\ntrace_kg\t{:.6}\n", r.dof_effective, r.trace_kg);
    }
    for t in &model.terms {
        s += &format!("lambda_{}\t{:.6e}\n", t.name(), t.lambda);
    }
    s
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Fit(a) => cmd_fit(a, stdout),
        Command::Select(a) => cmd_select(a, stdout),
        Command::Predict(a) => cmd_predict(a, stdout),
        Command::Tabulate(a) => cmd_tabulate(a, stdout),
        Command::Simulate(a) => cmd_simulate(a, stdout),
        Command::ChiFit(a) => cmd_chi_fit(a, stdout),
    }
}

fn cmd_fit(args: FitArgs, stdout: &mut dyn Write) -> Result<()> {
    let set = load_input(&args.input)?;
    let spec = parse_spec(&args.spec, false)?;
    let (criterion, grid, correlation) = risk_options(&args.risk)?;
    let lambda = match args.lambda {
        Some(v) => LambdaMode::Fixed(v),
        None => LambdaMode::Optimize { criterion, grid },
    };
    let options = FitOptions {
        scale: match args.scale {
            ScaleArg::Log => FitScale::Log,
            ScaleArg::Linear => FitScale::Linear,
        },
        lambda,
        correlation,
    };
    let model = fit_model(&set, &spec, &options)?;
    if let Some(p) = &args.out {
        model.save(p)?;
    }
    say(stdout, &summary(&model))
}

fn cmd_select(args: SelectArgs, stdout: &mut dyn Write) -> Result<()> {
    let set = load_input(&args.input)?;
    let candidates: Vec<Covariate> = match &args.candidates {
        Some(list) => list.iter().map(|s| s.parse()).collect::<Result<_>>()?,
        None => Covariate::ALL.to_vec(),
    };
    let (criterion, grid, correlation) = risk_options(&args.risk)?;
    let options = SelectionOptions {
        criterion,
        grid,
        correlation,
        tolerance: args.tolerance,
        ..SelectionOptions::default()
    };
    let trace = forward_select(&set, &candidates, args.max_stages, &options)?;
    if let Some(p) = &args.out {
        write_file(p, &trace.to_json())?;
    }
    let mut text = trace.render();
    text += &format!("stop\t{}\n", trace.stop_reason);
    for w in &trace.warnings {
        text += &format!("warning\t{w}\n");
    }
    say(stdout, &text)
}

fn parse_assignments(items: &[String]) -> Result<BTreeMap<String, f64>> {
    items
        .iter()
        .map(|item| {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Argument(format!("expected name=value, got `{item}`")))?;
            let c: Covariate = k.trim().parse()?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Argument(format!("invalid number in `{item}`")))?;
            Ok((c.name().to_string(), v))
        })
        .collect()
}

fn cmd_predict(args: PredictArgs, stdout: &mut dyn Write) -> Result<()> {
    let model = load_model(&args.model)?;
    let mut text = String::new();
    match (&args.input, &args.at) {
        (Some(input), None) => {
            let set = load_profiles(input)?;
            text += "id\tpsi\ttemp_ev\tpredicted_ev\n";
            for r in &set.records {
                for j in 0..r.len() {
                    let p = model.predict(r.psi[j], &r.covariates)?;
                    text += &format!("{}\t{:.4}\t{:.4}\t{:.4}\n", r.id, r.psi[j], r.temp[j], p);
                }
            }
        }
        (None, Some(at)) => {
            let cov = parse_assignments(at)?;
            let n = grid_steps(args.step)?;
            text += "psi\tpredicted_ev\n";
            for i in 0..=n {
                let psi = -1.0 + 2.0 * i as f64 / n as f64;
                text += &format!("{:.4}\t{:.4}\n", psi, model.predict(psi, &cov)?);
            }
        }
        _ => return Err(Error::Argument("give exactly one of --input or --at".into())),
    }
    emit(&args.out, &text, stdout)
}

/// Number of intervals of `step` in `[-1, 1]`.
fn grid_steps(step: f64) -> Result<usize> {
    let n = (2.0 / step).round();
    if !(step > 0.0) || (n * step - 2.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("step {step} does not divide 2.0")));
    }
    Ok(n as usize)
}

fn cmd_tabulate(args: TabulateArgs, stdout: &mut dyn Write) -> Result<()> {
    let model = load_model(&args.model)?;
    emit(&args.out, &model.tabulate(args.step)?, stdout)
}

fn cmd_simulate(args: SimulateArgs, stdout: &mut dyn Write) -> Result<()> {
    let model = load_model(&args.model)?;
    let mut ranges = table1_ranges();
    if let Some(text) = &args.ranges {
        let json = if text.trim_start().starts_with('{') {
            text.clone()
        } else {
            fs::read_to_string(text).map_err(|e| Error::io(text, e))?
        };
        let map: BTreeMap<String, [f64; 2]> =
            serde_json::from_str(&json).map_err(|e| Error::Argument(format!("invalid --ranges: {e}")))?;
        for (k, [lo, hi]) in map {
            ranges.insert(k.parse()?, CovariateRange::new(lo, hi));
        }
    }
    if args.linear_sampling {
        for r in ranges.values_mut() {
            r.log_uniform = false;
        }
    }
    // derived covariates are computed from their inputs, never sampled
    for c in Covariate::ALL.iter().filter(|c| c.is_derived()) {
        ranges.remove(c);
    }
    let config = SimulationConfig {
        n_profiles: args.n_profiles,
        points_per_profile: args.points,
        noise_rel: args.noise,
        ranges,
        seed: args.seed,
    };
    let records = simulate_profiles(&model, &config)?;
    let mut text = String::new();
    for r in &records {
        text += &serde_json::to_string(r).expect("records always serialize");
        text.push('\n');
    }
    emit(&args.out, &text, stdout)
}

fn cmd_chi_fit(args: ChiFitArgs, stdout: &mut dyn Write) -> Result<()> {
    let set = load_input(&args.input)?;
    let conditions = load_conditions(&args.conditions)?;
    let spec = parse_spec(&args.spec, true)?;
    let lambdas = match args.lambda {
        Some(v) => v,
        None => vec![1.0; spec.terms.len()],
    };
    let options = ChiFitOptions {
        n_grid: args.grid,
        max_iterations: args.max_iterations,
        ..ChiFitOptions::default()
    };
    let fit = fit_chi(&set, &conditions, &spec, &lambdas, &options)?;
    if let Some(p) = &args.out {
        fit.model.save(p)?;
    }
    let mut text = format!("iterations\t{}\nobjective\t{:.6e}\n", fit.iterations, fit.objectives.last().copied().unwrap_or(f64::NAN));
    text += &fit.risk.render();
    say(stdout, &text)
}
