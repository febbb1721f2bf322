//! Batch command-line front end.
//!
//! Exit codes: 0 success, 2 configuration or usage, 3 sampler or model
//! failure, 4 data problems or mismatched inputs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{derive_seed, EpsilonMode, ModelVariant, PointwiseUnit, RunConfig, RNG_ALGORITHM};
use crate::diagnostics::ParamDiagnostics;
use crate::error::{DataError, Error, EvalError};
use crate::evaluation::{self, ElpdReport, LogLikMatrix};
use crate::model::{check_gradients, PosteriorTarget};
use crate::params::Block;
use crate::sampler::{self, DrawMatrix};
use crate::simulator;
use crate::summaries::{self, SummaryRow};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

const STAT_COLUMNS: [&str; 7] =
    ["lp__", "accept_stat__", "stepsize__", "treedepth__", "n_leapfrog__", "divergent__", "energy__"];

#[derive(Debug, Parser)]
#[command(name = "multimorb", version, about = "Spatio-temporal multimorbidity model: simulate, fit, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Quantity {
    /// Morbidity curves over age for one profile.
    Curve,
    /// Local odds ratios `exp(beta)` for one predictor.
    Or,
    /// Odds ratio between consecutive cohorts.
    CohortOr,
    /// Symmetric table of `gamma gamma^T`.
    Comorbidity,
    /// National effects `B0`.
    Effects,
    /// Kernel correlations and mixture weights.
    Theta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EpsilonArg {
    Prior,
    Posterior,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate locations, respondents and truth.json from the config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run NUTS on a dataset and write draws, pointwise log-likelihood and diagnostics.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `model.variant`.
        #[arg(long, value_enum)]
        model: Option<ModelVariant>,
    },
    /// PSIS-LOO from a fit directory.
    Loo {
        #[arg(long)]
        run: PathBuf,
    },
    /// WAIC from a fit directory.
    Waic {
        #[arg(long)]
        run: PathBuf,
    },
    /// Rank fits of the same dataset by LOO with LOO-IC and WAIC differences.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Posterior predictive prevalence per (location, disease).
    Ppc {
        #[arg(long)]
        run: PathBuf,
        /// Overrides `evaluation.ppc_epsilon`.
        #[arg(long, value_enum)]
        epsilon: Option<EpsilonArg>,
    },
    /// Posterior summaries of derived quantities as long-format CSV.
    Predict {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        quantity: Quantity,
        /// Covariate profile for curves, e.g. `--profile sex=1 --profile smoke=0`.
        #[arg(long = "profile", value_name = "KEY=VALUE")]
        profile: Vec<String>,
        #[arg(long, default_value_t = 0)]
        disease: usize,
        /// Predictor name for `or` and `cohort-or`.
        #[arg(long, default_value = "intercept")]
        predictor: String,
        /// Cohort index for `or`.
        #[arg(long, default_value_t = 0)]
        cohort: usize,
        /// Number of ages on the curve grid.
        #[arg(long, default_value_t = 12)]
        ages: usize,
        /// Output CSV (default: `<run>/predict_<quantity>.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the analytic gradient with central finite differences.
    CheckGradients {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; simulated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        model: Option<ModelVariant>,
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 1.5)]
        radius: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Age slope by survey year versus by birth cohort on simulated data.
    BiasDemo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

/// Exit code for an engine error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Sim(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Json(_) => 4,
        Error::Model(crate::error::ModelError::Dimension { .. }) => 4,
        Error::Model(_) | Error::Kernel(_) | Error::Sampler(_) => 3,
        Error::Eval(EvalError::UnknownProfileField(_) | EvalError::InvalidQuery(_)) => 2,
        Error::Eval(EvalError::MismatchedPoints) => 4,
        Error::Eval(_) => 3,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self::new(exit_code(&e), e.to_string())
    }
}

macro_rules! impl_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Error::from(e).into()
            }
        }
    )*};
}
impl_from!(DataError, EvalError, crate::error::ModelError, crate::error::SamplerError, crate::error::SimError);

type CliResult<T> = std::result::Result<T, CliError>;

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub engine_version: String,
    pub config_sha256: Option<String>,
    pub seed: Option<u64>,
    pub rng_algorithm: String,
    pub layout: Vec<Block>,
    /// Input file name to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub warnings: Vec<String>,
    /// Wall-clock timings live here, outside the digested outputs.
    pub timing_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub chain: usize,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub mean_accept_stat: f64,
}

/// What later commands need to rebuild the posterior of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub variant: String,
    pub data_dir: String,
    pub data_digests: BTreeMap<String, String>,
    pub pointwise_unit: PointwiseUnit,
    pub num_points: usize,
    pub num_draws: usize,
    pub names: Vec<String>,
    pub chains: Vec<ChainMeta>,
    pub jitter_events: u64,
    /// Largest R-hat over [`summaries::identified_names`].
    pub max_rhat_identified: Option<f64>,
    pub rng_algorithm: String,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::new(4, format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn sha256_str(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

fn io_fail(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(4, format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| io_fail(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::new(4, e.to_string()))?;
    write_file(path, &(text + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_fail(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::new(4, format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    RunConfig::load(path).map_err(|e| CliError::new(2, format!("{}: {e}", path.display())))
}

fn data_files(cfg: &RunConfig) -> Vec<String> {
    let mut files = vec!["respondents.csv".to_string(), "locations.csv".into(), "adjacency.csv".into()];
    files.extend((0..cfg.model.num_distance_kernels()).map(|m| format!("distance_{m}.csv")));
    files
}

fn digest_files(dir: &Path, files: &[String]) -> CliResult<BTreeMap<String, String>> {
    files.iter().map(|f| Ok((f.clone(), sha256_file(&dir.join(f))?))).collect()
}

fn build_target(cfg: &RunConfig, data: &Path) -> CliResult<PosteriorTarget> {
    Ok(PosteriorTarget::load(cfg, data)?)
}

fn finish(
    dir: &Path,
    prefix: &str,
    mut manifest: RunManifest,
    outputs: &[String],
    started: Instant,
) -> CliResult<()> {
    manifest.outputs = digest_files(dir, outputs)?;
    let timing = format!("{prefix}timing.json");
    manifest.timing_file = timing.clone();
    write_json(&dir.join(format!("{prefix}manifest.json")), &manifest)?;
    write_json(
        &dir.join(&timing),
        &serde_json::json!({ "command": manifest.command, "seconds": started.elapsed().as_secs_f64() }),
    )
}

fn manifest(command: &str, cfg: Option<&RunConfig>) -> RunManifest {
    RunManifest {
        command: command.into(),
        engine_version: ENGINE_VERSION.into(),
        config_sha256: cfg.map(|c| sha256_str(&c.to_toml_string())),
        seed: cfg.map(|c| c.seed),
        rng_algorithm: RNG_ALGORITHM.into(),
        layout: Vec::new(),
        inputs: BTreeMap::new(),
        outputs: BTreeMap::new(),
        warnings: Vec::new(),
        timing_file: String::new(),
    }
}

fn cmd_simulate(config: &Path, out: &Path) -> CliResult<()> {
    let started = Instant::now();
    let cfg = load_config(config)?;
    create_dir(out)?;
    let data = simulator::simulate(&cfg.simulation, &cfg.model, &cfg.priors)?;
    data.write(out, &cfg.model)?;
    write_file(&out.join("config.toml"), &cfg.to_toml_string())?;
    let mut m = manifest("simulate", Some(&cfg));
    let dims = crate::params::Dims::new(
        &cfg.model,
        data.locations.num_locations(),
        data.locations.num_regions(),
        data.records.len(),
    );
    m.layout = crate::params::ParamLayout::new(dims).blocks();
    m.inputs.insert("config".into(), sha256_file(config)?);
    if let Some(t) = &cfg.simulation.truth {
        m.inputs.insert("truth".into(), sha256_file(Path::new(t))?);
    }
    let mut outputs = data_files(&cfg);
    outputs.extend(["truth.json".to_string(), "config.toml".into()]);
    finish(out, "", m, &outputs, started)
}

fn point_ids(target: &PosteriorTarget) -> Vec<String> {
    let nd = target.dims().num_diseases;
    match target.pointwise_unit() {
        PointwiseUnit::Respondent => target.records().iter().map(|r| r.id.clone()).collect(),
        PointwiseUnit::Observation => {
            target.records().iter().flat_map(|r| (1..=nd).map(move |j| format!("{}:y_{j}", r.id))).collect()
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::new(4, format!("{}: {e}", path.display())))
}

fn csv_fail(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::new(4, format!("{}: {e}", path.display()))
}

fn write_draws(out: &Path, fit: &DrawMatrix, names: &[String]) -> CliResult<Vec<String>> {
    let mut files = Vec::new();
    for c in &fit.chains {
        let name = format!("draws_chain{}.csv", c.chain);
        let path = out.join(&name);
        let mut w = csv_writer(&path)?;
        let header: Vec<&str> = STAT_COLUMNS.iter().copied().chain(names.iter().map(String::as_str)).collect();
        w.write_record(&header).map_err(csv_fail(&path))?;
        for (st, d) in c.stats.iter().zip(&c.draws) {
            let mut row = vec![
                st.lp.to_string(),
                st.accept_stat.to_string(),
                st.step_size.to_string(),
                st.tree_depth.to_string(),
                st.n_leapfrog.to_string(),
                u8::from(st.divergent).to_string(),
                st.energy.to_string(),
            ];
            row.extend(d.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_fail(&path))?;
        }
        w.flush().map_err(|e| io_fail(&path, e))?;
        files.push(name);
    }
    Ok(files)
}

fn write_loglik(path: &Path, ids: &[String], rows: &[Vec<f64>]) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    w.write_record(ids).map_err(csv_fail(path))?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string())).map_err(csv_fail(path))?;
    }
    w.flush().map_err(|e| io_fail(path, e))
}

fn write_diagnostics(path: &Path, names: &[String], diags: &[ParamDiagnostics]) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["parameter", "mean", "sd", "rhat", "ess_bulk", "mcse_mean"]).map_err(csv_fail(path))?;
    for (n, d) in names.iter().zip(diags) {
        w.write_record([
            n.clone(),
            d.mean.to_string(),
            d.sd.to_string(),
            fmt_opt(d.rhat),
            fmt_opt(d.ess_bulk),
            fmt_opt(d.mcse_mean),
        ])
        .map_err(csv_fail(path))?;
    }
    w.flush().map_err(|e| io_fail(path, e))
}

/// Diagnostics of `B0`, `gamma`, scales and kernel parameters per chain.
fn identified_diagnostics(target: &PosteriorTarget, fit: &DrawMatrix) -> CliResult<Vec<ParamDiagnostics>> {
    let per_chain: Vec<Vec<Vec<f64>>> = fit
        .chains
        .iter()
        .map(|c| c.draws.iter().map(|x| summaries::identified_values(target.layout(), x)).collect())
        .collect::<Result<_, _>>()?;
    let n = per_chain.first().map(|c| c.len()).unwrap_or(0);
    if n < 8 {
        return Ok(Vec::new());
    }
    let k = per_chain[0][0].len();
    (0..k)
        .map(|i| {
            let cols: Vec<Vec<f64>> = per_chain.iter().map(|c| c.iter().map(|v| v[i]).collect()).collect();
            let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
            Ok(crate::diagnostics::summarize(&refs)?)
        })
        .collect()
}

fn cmd_fit(config: &Path, data: &Path, out: &Path, model: Option<ModelVariant>) -> CliResult<()> {
    let started = Instant::now();
    let mut cfg = load_config(config)?;
    if let Some(v) = model {
        cfg.model.variant = v;
    }
    let digests = digest_files(data, &data_files(&cfg))?;
    let target = build_target(&cfg, data)?;
    create_dir(out)?;
    let fit = sampler::run(&target, &cfg.sampler)?;
    let names = target.layout().names();
    let mut outputs = write_draws(out, &fit, &names)?;
    write_loglik(&out.join("loglik.csv"), &point_ids(&target), &fit.pointwise())?;
    write_diagnostics(&out.join("diagnostics.csv"), &names, &fit.diagnostics)?;
    let id_names = summaries::identified_names(target.layout());
    let id_diags = identified_diagnostics(&target, &fit)?;
    write_diagnostics(&out.join("diagnostics_identified.csv"), &id_names, &id_diags)?;
    let max_rhat = id_diags.iter().filter_map(|d| d.rhat).fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))));
    write_file(&out.join("config.toml"), &cfg.to_toml_string())?;
    let data_dir = std::fs::canonicalize(data).map_err(|e| io_fail(data, e))?;
    let meta = FitMetadata {
        variant: cfg.model.variant.name().into(),
        data_dir: data_dir.to_string_lossy().into_owned(),
        data_digests: digests.clone(),
        pointwise_unit: cfg.evaluation.pointwise,
        num_points: target.num_pointwise(),
        num_draws: fit.chains.iter().map(|c| c.draws.len()).sum(),
        names: names.clone(),
        chains: fit
            .chains
            .iter()
            .map(|c| ChainMeta {
                chain: c.chain,
                step_size: c.step_size,
                inv_metric: c.inv_metric.clone(),
                divergences: c.divergences(),
                warmup_divergences: c.warmup_divergences(),
                mean_accept_stat: c.mean_accept_stat(),
            })
            .collect(),
        jitter_events: target.jitter_events(),
        max_rhat_identified: max_rhat,
        rng_algorithm: RNG_ALGORITHM.into(),
    };
    write_json(&out.join("metadata.json"), &meta)?;
    outputs.extend(
        ["loglik.csv", "diagnostics.csv", "diagnostics_identified.csv", "config.toml", "metadata.json"]
            .map(String::from),
    );

    let mut m = manifest("fit", Some(&cfg));
    m.layout = target.layout().blocks();
    m.inputs.insert("config".into(), sha256_file(config)?);
    m.inputs.extend(digests);
    let div = fit.total_divergences();
    if div > 0 {
        m.warnings.push(format!("{div} divergent transitions out of {}", fit.total_iterations()));
    }
    if let Some(r) = max_rhat.filter(|r| *r > 1.01) {
        m.warnings.push(format!("max R-hat {r:.4} over identified quantities exceeds 1.01"));
    }
    if meta.jitter_events > 0 {
        m.warnings.push(format!("{} evaluations needed diagonal jitter", meta.jitter_events));
    }
    finish(out, "", m, &outputs, started)
}

fn read_loglik(run: &Path) -> CliResult<LogLikMatrix> {
    let path = run.join("loglik.csv");
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| CliError::new(4, format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::new(4, format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::new(4, format!("{}: {e}", path.display())))?;
        rows.push(row);
    }
    Ok(LogLikMatrix::from_rows(&rows)?)
}

fn read_draws(run: &Path, meta: &FitMetadata) -> CliResult<Vec<Vec<f64>>> {
    let mut draws = Vec::with_capacity(meta.num_draws);
    for c in &meta.chains {
        let path = run.join(format!("draws_chain{}.csv", c.chain));
        let mut rdr =
            csv::Reader::from_path(&path).map_err(|e| CliError::new(4, format!("{}: {e}", path.display())))?;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| CliError::new(4, format!("{}: {e}", path.display())))?;
            let row = rec
                .iter()
                .skip(STAT_COLUMNS.len())
                .map(|v| v.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::new(4, format!("{}: {e}", path.display())))?;
            if row.len() != meta.names.len() {
                return Err(CliError::new(4, format!("{}: wrong number of columns", path.display())));
            }
            draws.push(row);
        }
    }
    Ok(draws)
}

struct LoadedRun {
    cfg: RunConfig,
    meta: FitMetadata,
}

fn load_run(run: &Path) -> CliResult<LoadedRun> {
    let cfg = load_config(&run.join("config.toml"))?;
    let meta: FitMetadata = read_json(&run.join("metadata.json"))?;
    Ok(LoadedRun { cfg, meta })
}

/// Rebuilds the target of a fit after checking the dataset is unchanged.
fn rebuild(run: &LoadedRun) -> CliResult<PosteriorTarget> {
    let data = Path::new(&run.meta.data_dir);
    let files: Vec<String> = run.meta.data_digests.keys().cloned().collect();
    if digest_files(data, &files)? != run.meta.data_digests {
        return Err(CliError::new(4, format!("dataset in {} changed since the fit", data.display())));
    }
    let target = build_target(&run.cfg, data)?;
    if target.layout().names() != run.meta.names {
        return Err(CliError::new(4, "parameter layout differs from the fit"));
    }
    Ok(target)
}

fn criterion_outputs(run: &Path, kind: &str) -> CliResult<()> {
    let started = Instant::now();
    let loaded = load_run(run)?;
    let ll = read_loglik(run)?;
    let report = match kind {
        "loo" => evaluation::psis_loo(&ll)?,
        _ => evaluation::waic(&ll)?,
    };
    write_json(&run.join(format!("{kind}.json")), &report)?;
    let mut s = String::from("point,elpd,p_eff,pareto_k\n");
    for i in 0..report.per_point.len() {
        let k = report.pareto_k.as_ref().map(|k| k[i]);
        s.push_str(&format!("{i},{},{},{}\n", report.per_point[i], report.p_point[i], fmt_opt(k)));
    }
    write_file(&run.join(format!("{kind}_pointwise.csv")), &s)?;
    let mut m = manifest(kind, Some(&loaded.cfg));
    m.inputs.insert("loglik.csv".into(), sha256_file(&run.join("loglik.csv"))?);
    if report.k_above_0_7 > 0 {
        m.warnings.push(format!("{} points with Pareto k above 0.7", report.k_above_0_7));
    }
    println!(
        "{}: elpd {:.3} (se {:.3}), p_eff {:.3}, ic {:.3} (se {:.3})",
        report.criterion, report.elpd, report.se, report.p_eff, report.ic, report.ic_se
    );
    finish(run, &format!("{kind}_"), m, &[format!("{kind}.json"), format!("{kind}_pointwise.csv")], started)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareLine {
    pub model: String,
    pub run: String,
    pub elpd_loo: f64,
    pub se_elpd_loo: f64,
    /// `elpd_loo - elpd_loo_best`, never positive.
    pub delta_elpd_loo: f64,
    pub se_delta_elpd_loo: f64,
    pub p_loo: f64,
    pub looic: f64,
    pub delta_looic: f64,
    pub se_delta_looic: f64,
    pub elpd_waic: f64,
    pub p_waic: f64,
    pub waic: f64,
    pub delta_waic: f64,
    pub se_delta_waic: f64,
}

fn cmd_compare(runs: &[PathBuf], out: &Path) -> CliResult<()> {
    let started = Instant::now();
    let mut loaded = Vec::new();
    for r in runs {
        loaded.push((r.clone(), load_run(r)?, read_loglik(r)?));
    }
    let first = &loaded[0].1.meta;
    for (r, l, ll) in &loaded {
        if l.meta.data_digests != first.data_digests || ll.points() != first.num_points {
            return Err(CliError::new(4, format!("{} was fitted to a different dataset", r.display())));
        }
    }
    let mut names: Vec<String> = loaded.iter().map(|(_, l, _)| l.meta.variant.clone()).collect();
    for i in 0..names.len() {
        if names.iter().filter(|n| **n == names[i]).count() > 1 {
            names[i] = format!("{} ({})", names[i], runs[i].display());
        }
    }
    let mut loo = Vec::new();
    let mut waic: Vec<ElpdReport> = Vec::new();
    for ((_, _, ll), n) in loaded.iter().zip(&names) {
        loo.push((n.clone(), evaluation::psis_loo(ll)?));
        waic.push(evaluation::waic(ll)?);
    }
    let rows = evaluation::compare(&loo)?;
    let best = names.iter().position(|n| *n == rows[0].model).expect("best model is listed");
    let mut lines = Vec::new();
    for row in &rows {
        let i = names.iter().position(|n| *n == row.model).expect("model is listed");
        let (d, se) = evaluation::paired_difference(&waic[i], &waic[best])?;
        lines.push(CompareLine {
            model: row.model.clone(),
            run: runs[i].display().to_string(),
            elpd_loo: row.elpd,
            se_elpd_loo: row.se,
            delta_elpd_loo: row.elpd_diff,
            se_delta_elpd_loo: row.se_diff,
            p_loo: loo[i].1.p_eff,
            looic: row.ic,
            delta_looic: row.ic_diff,
            se_delta_looic: row.ic_se_diff,
            elpd_waic: waic[i].elpd,
            p_waic: waic[i].p_eff,
            waic: waic[i].ic,
            delta_waic: 0.0 - 2.0 * d,
            se_delta_waic: 2.0 * se,
        });
    }
    let mut w = csv::Writer::from_path(out).map_err(|e| CliError::new(4, format!("{}: {e}", out.display())))?;
    for l in &lines {
        w.serialize(l).map_err(|e| CliError::new(4, e.to_string()))?;
        println!(
            "{:<12} delta LOO-IC {:>9.2} ({:.2})  delta WAIC {:>9.2} ({:.2})",
            l.model, l.delta_looic, l.se_delta_looic, l.delta_waic, l.se_delta_waic
        );
    }
    w.flush().map_err(|e| io_fail(out, e))?;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "compare".into());
    let mut m = manifest("compare", None);
    for (r, _, _) in &loaded {
        m.inputs.insert(format!("{}/loglik.csv", r.display()), sha256_file(&r.join("loglik.csv"))?);
    }
    let file = out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    finish(dir, &format!("{stem}_"), m, &[file], started)
}

fn write_rows(path: &Path, rows: &[SummaryRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::new(4, format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::new(4, e.to_string()))?;
    }
    w.flush().map_err(|e| io_fail(path, e))
}

fn cmd_ppc(run: &Path, epsilon: Option<EpsilonArg>) -> CliResult<()> {
    let started = Instant::now();
    let loaded = load_run(run)?;
    let target = rebuild(&loaded)?;
    let draws = read_draws(run, &loaded.meta)?;
    let mode = match epsilon {
        Some(EpsilonArg::Prior) => EpsilonMode::Prior,
        Some(EpsilonArg::Posterior) => EpsilonMode::Posterior,
        None => loaded.cfg.evaluation.ppc_epsilon,
    };
    let checks = evaluation::posterior_predictive_prevalence(&target, &draws, mode, derive_seed(loaded.cfg.seed, 3))?;
    let path = run.join("ppc.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::new(4, format!("{}: {e}", path.display())))?;
    for c in &checks {
        w.serialize(c).map_err(|e| CliError::new(4, e.to_string()))?;
    }
    w.flush().map_err(|e| io_fail(&path, e))?;
    let inside = checks.iter().filter(|c| c.p_value > 0.05 && c.p_value < 0.95).count();
    let frac = inside as f64 / checks.len().max(1) as f64;
    println!("ppc: {inside}/{} Bayesian p-values in (0.05, 0.95) ({:.1}%)", checks.len(), 100.0 * frac);
    let mut m = manifest("ppc", Some(&loaded.cfg));
    m.inputs.extend(loaded.meta.data_digests.clone());
    let small = checks.len() - inside;
    if small > 0 {
        m.warnings.push(format!("{small} extreme Bayesian p-values"));
    }
    finish(run, "ppc_", m, &["ppc.csv".to_string()], started)
}

fn parse_pairs(profile: &[String]) -> CliResult<Vec<(String, String)>> {
    profile
        .iter()
        .map(|p| {
            p.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::new(2, format!("profile entry `{p}` is not KEY=VALUE")))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_predict(
    run: &Path,
    quantity: Quantity,
    profile: &[String],
    disease: usize,
    predictor: &str,
    cohort: usize,
    ages: usize,
    out: Option<&Path>,
) -> CliResult<()> {
    let started = Instant::now();
    let pairs = parse_pairs(profile)?;
    let raw = summaries::parse_profile(&pairs)?;
    let loaded = load_run(run)?;
    let target = rebuild(&loaded)?;
    let draws = read_draws(run, &loaded.meta)?;
    let model = &loaded.cfg.model;
    let h = || -> CliResult<usize> {
        model
            .covariates
            .iter()
            .position(|c| c.name() == predictor)
            .ok_or_else(|| CliError::new(2, format!("unknown predictor `{predictor}`")))
    };
    let dims = target.dims();
    let rows = match quantity {
        Quantity::Curve => {
            let n = ages.max(2);
            let grid: Vec<f64> =
                (0..n).map(|i| model.age_min + model.age_span * i as f64 / (n - 1) as f64).collect();
            let locs: Vec<usize> = (0..dims.num_locations).collect();
            let cohorts: Vec<usize> = (0..dims.num_cohorts).collect();
            summaries::morbidity_curves(&target, &draws, &raw, disease, &locs, &cohorts, &grid)?
        }
        Quantity::Or => summaries::local_odds_ratios(&target, &draws, disease, h()?, cohort)?,
        Quantity::CohortOr => summaries::cohort_step_odds_ratios(&target, &draws, disease, h()?)?,
        Quantity::Comorbidity => summaries::comorbidity(&target, &draws)?,
        Quantity::Effects => summaries::national_effects(&target, &draws)?,
        Quantity::Theta => summaries::kernel_parameters(&target, &draws)?,
    };
    let name = quantity.to_possible_value().expect("named").get_name().to_string();
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| run.join(format!("predict_{name}.csv")));
    write_rows(&path, &rows)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    let file = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut m = manifest("predict", Some(&loaded.cfg));
    m.inputs.extend(loaded.meta.data_digests.clone());
    println!("predict: {} rows -> {}", rows.len(), path.display());
    finish(&dir, &format!("predict_{name}_"), m, &[file], started)
}

#[allow(clippy::too_many_arguments)]
fn cmd_check_gradients(
    config: &Path,
    data: Option<&Path>,
    model: Option<ModelVariant>,
    points: usize,
    radius: f64,
    step: f64,
    tolerance: f64,
    out: Option<&Path>,
) -> CliResult<()> {
    let started = Instant::now();
    let mut cfg = load_config(config)?;
    if let Some(v) = model {
        cfg.model.variant = v;
    }
    let target = match data {
        Some(d) => build_target(&cfg, d)?,
        None => {
            let sim = simulator::simulate(&cfg.simulation, &cfg.model, &cfg.priors)?;
            PosteriorTarget::new(&cfg.model, &cfg.priors, sim.records, sim.locations, cfg.evaluation.pointwise)?
        }
    };
    let report = check_gradients(&target, points, radius, step, derive_seed(cfg.seed, 4))?;
    let seconds = started.elapsed().as_secs_f64();
    let pass = report.max_relative_error < tolerance;
    let json = serde_json::json!({
        "variant": cfg.model.variant.name(),
        "dim": target.dim(),
        "report": report,
        "tolerance": tolerance,
        "pass": pass,
    });
    println!(
        "check-gradients: max relative error {:.3e} at {} over {} points (dim {}), {} [{seconds:.2} s]",
        report.max_relative_error,
        report.worst_parameter,
        report.points,
        target.dim(),
        if pass { "PASS" } else { "FAIL" }
    );
    if let Some(p) = out {
        write_json(p, &json)?;
    }
    Ok(())
}

fn cmd_bias_demo(config: &Path, out: &Path) -> CliResult<()> {
    let started = Instant::now();
    let cfg = load_config(config)?;
    let demo = simulator::bias_demo(&cfg.simulation, &cfg.model)?;
    write_json(out, &demo)?;
    println!(
        "bias-demo: slope by survey year {:.4} ({:.4}), by cohort {:.4} ({:.4}), difference {:.4} ({:.4})",
        demo.slope_by_survey_year.estimate,
        demo.slope_by_survey_year.se,
        demo.slope_by_cohort.estimate,
        demo.slope_by_cohort.se,
        demo.difference,
        demo.combined_se
    );
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "bias".into());
    let file = out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut m = manifest("bias-demo", Some(&cfg));
    m.inputs.insert("config".into(), sha256_file(config)?);
    finish(dir, &format!("{stem}_"), m, &[file], started)
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate { config, out } => cmd_simulate(&config, &out),
        Command::Fit { config, data, out, model } => cmd_fit(&config, &data, &out, model),
        Command::Loo { run } => criterion_outputs(&run, "loo"),
        Command::Waic { run } => criterion_outputs(&run, "waic"),
        Command::Compare { runs, out } => cmd_compare(&runs, &out),
        Command::Ppc { run, epsilon } => cmd_ppc(&run, epsilon),
        Command::Predict { run, quantity, profile, disease, predictor, cohort, ages, out } => {
            cmd_predict(&run, quantity, &profile, disease, &predictor, cohort, ages, out.as_deref())
        }
        Command::CheckGradients { config, data, model, points, radius, step, tolerance, out } => {
            cmd_check_gradients(&config, data.as_deref(), model, points, radius, step, tolerance, out.as_deref())
        }
        Command::BiasDemo { config, out } => cmd_bias_demo(&config, &out),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
