//! Command-line front end: TOML configuration, subcommand dispatch and plain
//! text run reports.
//!
//! Exit status is 0 on success, 1 when the input (arguments or config) is
//! invalid and 2 when a run fails after validation.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use thiserror::Error;

use crate::estimators::{mle_continuous, mle_discrete, EstimateError, NumeratorMode};
use crate::experiments::{
    replication_id, run_experiment_with_threads, write_outputs, EstimatorChoice, ExperimentConfig, ExperimentError,
    ExperimentKind, ExperimentOutput, SweepPoint, DEFAULT_OVERSAMPLE, DEFAULT_REPLICATIONS,
};
use crate::simulator::{simulate_ensemble, simulate_observations, subsample, ObservationMatrix, SimError, SimGrid};
use crate::spectral::{build_eigensequence, ModelParams, SpectralError};

/// Environment variable naming the output directory when neither `--out` nor
/// `[output] dir` is given.
pub const OUTPUT_DIR_ENV: &str = "SPDELAB_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "results";
pub const DEFAULT_DUMP_NAME: &str = "observations.bin";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot read config {path}: {source}")]
    ConfigRead { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: unknown key `{key}`")]
    UnknownKey { path: PathBuf, key: String },
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("cannot access {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_)
            | Self::ConfigRead { .. }
            | Self::Parse { .. }
            | Self::UnknownKey { .. }
            | Self::Invalid { .. }
            | Self::Experiment(ExperimentError::Invalid { .. })
            | Self::Spectral(
                SpectralError::UnsupportedDimension(_)
                | SpectralError::EmptyCount
                | SpectralError::InvalidParameter { .. }
                | SpectralError::EnumerationOverflow { .. },
            ) => 1,
            _ => 2,
        }
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> CliError {
    CliError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Parser)]
#[command(name = "spdelab", version, about = "Drift estimation for the fractional stochastic heat equation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the first eigenvalues of the Dirichlet Laplacian on (0,π)^d
    Eigs {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        count: usize,
    },
    /// Simulate one replication and write its observation dump
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// File name of the dump inside the output directory
        #[arg(long, default_value = DEFAULT_DUMP_NAME)]
        name: String,
    },
    /// Estimate θ from a dump, or from a fresh simulation
    Estimate {
        #[command(flatten)]
        run: RunArgs,
        /// Observation dump to read instead of simulating
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Run a Monte Carlo study and write records and summary
    Experiment {
        /// normality, consistency, consistency_fixed_MT, rates or fisher
        kind: String,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sweep point used by simulate and estimate
    #[arg(long, default_value_t = 0)]
    pub point: usize,
    #[arg(long, default_value_t = 0)]
    pub replication: usize,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub kind: Option<ExperimentKind>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self, kind: Option<ExperimentKind>) -> Overrides {
        Overrides {
            kind,
            seed: self.seed,
            threads: self.threads,
            out: self.out.clone(),
        }
    }
}

/// A validated configuration ready to run.
#[derive(Debug, Clone)]
pub struct CliConfig {
    pub experiment: ExperimentConfig,
    /// Worker threads; `None` uses all available cores.
    pub threads: Option<usize>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    model: ModelSection,
    grid: GridSection,
    #[serde(default)]
    experiment: ExperimentSection,
    #[serde(default)]
    output: OutputSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    theta0: f64,
    beta: f64,
    gamma: f64,
    sigma: f64,
    #[serde(alias = "d")]
    dimension: usize,
    initial_modes: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSection {
    sweep: Vec<SweepPoint>,
    #[serde(default)]
    ladder: Vec<usize>,
    oversample: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentSection {
    id: Option<String>,
    kind: Option<ExperimentKind>,
    replications: Option<usize>,
    seed: Option<u64>,
    estimator: Option<EstimatorChoice>,
    numerator: Option<NumeratorMode>,
    threads: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    dir: Option<PathBuf>,
}

const SECTION_KEYS: &[(&str, &[&str])] = &[
    ("model", &["theta0", "beta", "gamma", "sigma", "dimension", "d", "initial_modes"]),
    ("grid", &["sweep", "ladder", "oversample"]),
    ("experiment", &["id", "kind", "replications", "seed", "estimator", "numerator", "threads"]),
    ("output", &["dir"]),
];
const SWEEP_KEYS: &[&str] = &["N", "M", "T"];

/// First key outside the schema, as a dotted path.
fn unknown_key(root: &toml::Table) -> Option<String> {
    for (section, value) in root {
        let Some(&(_, allowed)) = SECTION_KEYS.iter().find(|(name, _)| name == section) else {
            return Some(section.clone());
        };
        let Some(table) = value.as_table() else { continue };
        for (key, value) in table {
            if !allowed.contains(&key.as_str()) {
                return Some(format!("{section}.{key}"));
            }
            if section == "grid" && key == "sweep" {
                for (i, point) in value.as_array().into_iter().flatten().enumerate() {
                    for k in point.as_table().into_iter().flat_map(|t| t.keys()) {
                        if !SWEEP_KEYS.contains(&k.as_str()) {
                            return Some(format!("grid.sweep[{i}].{k}"));
                        }
                    }
                }
            }
        }
    }
    None
}

fn parse_error(path: &Path, text: &str, err: &toml::de::Error) -> CliError {
    let offset = err.span().map_or(0, |s| s.start).min(text.len());
    CliError::Parse {
        path: path.to_path_buf(),
        line: text[..offset].matches('\n').count() + 1,
        message: err.message().trim().to_string(),
    }
}

fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR), PathBuf::from)
}

/// Reads, merges and validates a config file. Overrides win over file values;
/// the output directory falls back to `$SPDELAB_OUTPUT_DIR`, then `results`.
pub fn parse_config(path: &Path, overrides: &Overrides) -> Result<CliConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::ConfigRead {
        path: path.to_path_buf(),
        source,
    })?;
    let root: toml::Table = toml::from_str(&text).map_err(|e| parse_error(path, &text, &e))?;
    if let Some(key) = unknown_key(&root) {
        return Err(CliError::UnknownKey {
            path: path.to_path_buf(),
            key,
        });
    }
    let file: FileConfig = toml::from_str(&text).map_err(|e| parse_error(path, &text, &e))?;

    let kind = match (overrides.kind, file.experiment.kind) {
        (Some(cli), Some(f)) if cli != f => {
            return Err(invalid(
                "experiment.kind",
                format!("config declares {f:?} but {cli:?} was requested"),
            ))
        }
        (cli, f) => cli.or(f).unwrap_or(ExperimentKind::Normality),
    };
    let m = file.model;
    let mut model = ModelParams::new(m.theta0, m.beta, m.gamma, m.sigma, m.dimension);
    if let Some(values) = m.initial_modes {
        model = model.with_initial_modes(values);
    }
    let e = file.experiment;
    let id = e.id.unwrap_or_else(|| kind_name(kind).to_string());
    let mut experiment = ExperimentConfig::new(id, kind, model, file.grid.sweep);
    experiment.ladder = file.grid.ladder;
    experiment.oversample = file.grid.oversample.unwrap_or(DEFAULT_OVERSAMPLE);
    experiment.replications = e.replications.unwrap_or(DEFAULT_REPLICATIONS);
    experiment.master_seed = overrides.seed.or(e.seed).unwrap_or(0);
    experiment.estimator = e.estimator.unwrap_or_default();
    experiment.numerator = e.numerator.unwrap_or_default();
    experiment.output_dir = overrides
        .out
        .clone()
        .or(file.output.dir)
        .unwrap_or_else(default_output_dir);

    let threads = overrides.threads.or(e.threads);
    if threads == Some(0) {
        return Err(invalid("experiment.threads", "must be at least 1"));
    }
    let warnings = experiment.validate()?;
    Ok(CliConfig {
        experiment,
        threads,
        warnings,
    })
}

fn kind_name(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::Normality => "normality",
        ExperimentKind::Consistency => "consistency",
        ExperimentKind::ConsistencyFixedMt => "consistency_fixed_MT",
        ExperimentKind::Rates => "rates",
        ExperimentKind::Fisher => "fisher",
    }
}

/// Joins a bare file name onto the output directory, rejecting anything that
/// would escape it.
pub fn confined_path(dir: &Path, name: &str) -> Result<PathBuf, CliError> {
    let mut parts = Path::new(name).components();
    match (parts.next(), parts.next()) {
        (Some(std::path::Component::Normal(file)), None) if !name.contains(['/', '\\']) => Ok(dir.join(file)),
        _ => Err(invalid("name", format!("`{name}` must be a plain file name"))),
    }
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| CliError::Experiment(ExperimentError::ThreadPool(e)))
}

fn load(run: &RunArgs, kind: Option<ExperimentKind>) -> Result<CliConfig, CliError> {
    let config = parse_config(&run.config, &run.overrides(kind))?;
    for w in &config.warnings {
        log::warn!("{w}");
    }
    Ok(config)
}

fn selected_point(config: &ExperimentConfig, index: usize) -> Result<SweepPoint, CliError> {
    config.sweep.get(index).copied().ok_or_else(|| {
        invalid(
            "point",
            format!("index {index} is outside the sweep of {} points", config.sweep.len()),
        )
    })
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Runs one parsed command, writing its report to `out`.
pub fn dispatch(command: &Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Eigs { dim, count } => eigs(*dim, *count, out),
        Command::Simulate { run, name } => simulate(run, name, out),
        Command::Estimate { run, dump } => estimate(run, dump.as_deref(), out),
        Command::Experiment { kind, run } => {
            let kind = ExperimentKind::parse(kind).ok_or_else(|| {
                CliError::Usage(format!(
                    "unknown experiment `{kind}`; expected normality, consistency, consistency_fixed_MT, rates or fisher"
                ))
            })?;
            experiment(run, kind, out)
        }
    }
}

fn report(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> Result<(), CliError> {
    out.write_fmt(text).map_err(io_err(Path::new("<stdout>")))
}

fn eigs(dim: usize, count: usize, out: &mut dyn Write) -> Result<(), CliError> {
    let seq = build_eigensequence(dim, count)?;
    report(out, format_args!("{:>8}  {:>12}\n", "k", "lambda_k"))?;
    for (k, lambda) in seq.lambdas().iter().enumerate() {
        report(out, format_args!("{:>8}  {:>12.5}\n", k + 1, lambda))?;
    }
    let ratio = seq.weyl_ratio(count).unwrap_or(f64::NAN);
    report(
        out,
        format_args!(
            "Weyl ratio lambda_N^2 N^(-2/d) = {ratio:.5} (limit {:.5}, relative gap {:+.3})\n",
            seq.varpi(),
            ratio / seq.varpi() - 1.0
        ),
    )
}

fn simulate(run: &RunArgs, name: &str, out: &mut dyn Write) -> Result<(), CliError> {
    let config = load(run, None)?;
    let target = confined_path(&config.experiment.output_dir, name)?;
    let cfg = &config.experiment;
    let point = selected_point(cfg, run.point)?;
    let grid = SimGrid::new(point.horizon, point.observations, cfg.oversample)?;
    let eigs = build_eigensequence(cfg.model.dimension, point.modes)?;
    let rep = replication_id(run.point, run.replication);
    // one mode of fine path in memory at a time
    let obs = thread_pool(config.threads)?
        .install(|| simulate_observations(&cfg.model, &eigs, &grid, point.modes, cfg.master_seed, rep))?;
    fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    let file = fs::File::create(&target).map_err(io_err(&target))?;
    obs.write_to(io::BufWriter::new(file)).map_err(io_err(&target))?;
    report(
        out,
        format_args!(
            "wrote {} (N={}, M={}, T={}, seed={}, replication={})\n",
            target.display(),
            obs.modes(),
            obs.observations(),
            obs.horizon(),
            cfg.master_seed,
            rep
        ),
    )
}

fn estimate(run: &RunArgs, dump: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let config = load(run, None)?;
    let cfg = &config.experiment;
    let print = |out: &mut dyn Write, label: &str, theta: f64, z: f64| {
        report(out, format_args!("{label:<24} theta = {theta:.6}  z = {z:+.4}\n"))
    };
    if let Some(path) = dump {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let obs = ObservationMatrix::read_from(io::BufReader::new(file))?;
        let eigs = build_eigensequence(cfg.model.dimension, obs.modes())?;
        let est = mle_discrete(&obs, &cfg.model, &eigs)?;
        report(
            out,
            format_args!("N={} M={} T={}\n", obs.modes(), obs.observations(), obs.horizon()),
        )?;
        return print(out, "discrete (theta tilde)", est.theta_hat, est.z_score);
    }
    let point = selected_point(cfg, run.point)?;
    let grid = SimGrid::new(point.horizon, point.observations, cfg.oversample)?;
    let eigs = build_eigensequence(cfg.model.dimension, point.modes)?;
    let rep = replication_id(run.point, run.replication);
    let ensemble = thread_pool(config.threads)?
        .install(|| simulate_ensemble(&cfg.model, &eigs, &grid, point.modes, cfg.master_seed, rep))?;
    let discrete = mle_discrete(&subsample(&ensemble), &cfg.model, &eigs)?;
    let continuous = mle_continuous(&ensemble, &cfg.model, &eigs, cfg.numerator)?;
    report(
        out,
        format_args!(
            "N={} M={} T={} F={} seed={} replication={}\n",
            point.modes, point.observations, point.horizon, cfg.oversample, cfg.master_seed, rep
        ),
    )?;
    print(out, "discrete (theta tilde)", discrete.theta_hat, discrete.z_score)?;
    print(out, "continuous (theta hat)", continuous.theta_hat, continuous.z_score)
}

fn experiment(run: &RunArgs, kind: ExperimentKind, out: &mut dyn Write) -> Result<(), CliError> {
    let config = load(run, Some(kind))?;
    let cfg = &config.experiment;
    log::info!(
        "running {} with {} replications per point",
        cfg.id,
        cfg.replications
    );
    let output = run_experiment_with_threads(cfg, config.threads)?;
    let (records, summary) = write_outputs(&output.records, &output.summary, &cfg.output_dir)?;
    write_report(&output, out)?;
    report(
        out,
        format_args!("records: {}\nsummary: {}\n", records.display(), summary.display()),
    )
}

fn write_report(output: &ExperimentOutput, out: &mut dyn Write) -> Result<(), CliError> {
    let s = &output.summary;
    report(
        out,
        format_args!(
            "{} ({}) seed={} R={} threads={}\n",
            s.experiment_id,
            kind_name(s.kind),
            s.master_seed,
            s.replications,
            s.threads
        ),
    )?;
    for w in &s.warnings {
        report(out, format_args!("warning: {w}\n"))?;
    }
    if !s.points.is_empty() {
        report(
            out,
            format_args!(
                "{:>6} {:>8} {:>7} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8} {:>9}\n",
                "N", "M", "T", "estimator", "mean", "bias", "rmse", "z_mean", "z_std", "ks_p"
            ),
        )?;
    }
    for p in &s.points {
        let ks = p.ks.map_or_else(
            || p.ks_note.clone().unwrap_or_else(|| "-".into()),
            |k| format!("{:.3e}", k.p_value),
        );
        report(
            out,
            format_args!(
                "{:>6} {:>8} {:>7} {:>10} {:>10.6} {:>+10.6} {:>10.6} {:>+8.4} {:>8.4} {:>9}{}\n",
                p.modes,
                p.observations,
                p.horizon,
                p.estimator.to_string(),
                p.mean,
                p.bias,
                p.rmse,
                p.z_mean,
                p.z_std,
                ks,
                if p.low_precision { " (low precision)" } else { "" }
            ),
        )?;
        if s.kind == ExperimentKind::Fisher {
            report(
                out,
                format_args!(
                    "       Fisher information {:.4}, Var x I = {:.4}\n",
                    p.fisher_information, p.variance_fisher_product
                ),
            )?;
        }
    }
    for r in &s.rates {
        report(
            out,
            format_args!("rates at N={} T={} fine steps={}\n", r.modes, r.horizon, r.fine_steps),
        )?;
        for (name, fit) in [("Y", &r.y), ("I", &r.i), ("V", &r.v)] {
            match (&fit.fit, &fit.skipped) {
                (Some(f), _) => report(
                    out,
                    format_args!(
                        "  {name}: slope {:+.3} (bound {:+.1}), r^2 {:.4}\n",
                        f.slope, fit.bound_exponent, f.r_squared
                    ),
                )?,
                (None, reason) => report(
                    out,
                    format_args!("  {name}: skipped ({})\n", reason.as_deref().unwrap_or("no fit")),
                )?,
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return 1;
            }
            let _ = write!(out, "{}", e.render());
            return 0;
        }
    };
    match dispatch(&cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
