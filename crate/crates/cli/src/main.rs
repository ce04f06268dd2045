//! `somala`: simulate data, tune sampler steps, fit models, run replicated
//! simulation studies and score saved estimates.

mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use somala::estimators::{fit_importance_density, is_log_marginal};
use somala::harness::{self, block_label, AlgoSpec, ReplicateSpec, TuneSpec};
use somala::io;
use somala::model::simulate::{
    initial_values, simulate_dataset, InitMode, SimSetting, SETTING_NAMES,
};
use somala::model::{Layout, ParamFile};
use somala::optimizer::{Checkpoint, StopReason};
use somala::rng::{derive_seed, Purpose};
use somala::{
    Algorithm, Dataset, Error, LatentModel, LatentState, ModelKind, OptimizerConfig, ParamVector,
    Result,
};

use config::ConfigFile;
use manifest::{digest, now, FileDigest, RunManifest};

#[derive(Debug, Parser)]
#[command(
    name = "somala",
    version,
    about = "Stochastic optimisation for latent variable models"
)]
struct Cli {
    /// Master seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: available parallelism). Results do not
    /// depend on this value.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset with its true parameters and latent values.
    Simulate(SimulateArgs),
    /// Pick a sampler step by short runs over a candidate grid.
    Tune(TuneArgs),
    /// Fit a model.
    Fit(FitArgs),
    /// Run a replicated simulation study.
    Replicate(ReplicateArgs),
    /// Absolute errors of a saved estimate against true parameters.
    Evaluate(EvaluateArgs),
    /// Replay the command recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
struct SettingArgs {
    /// Built-in design: multilevel-k5, multilevel-k10, m2pl-k5, m2pl-k10.
    #[arg(long, conflicts_with = "setting_file")]
    setting: Option<String>,
    /// JSON file describing a custom design.
    #[arg(long)]
    setting_file: Option<PathBuf>,
    /// Override the number of observations.
    #[arg(long)]
    n_obs: Option<usize>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    setting: SettingArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelArg {
    M2pl,
    Multilevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InitArg {
    /// `--init-params` if given, else simulation mode if true latents are
    /// available, else sum scores.
    Auto,
    File,
    Simulation,
    Sumscore,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Directory written by `simulate`.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Multilevel long-format CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// M2PL response matrix CSV.
    #[arg(long)]
    responses: Option<PathBuf>,
    /// M2PL Q-matrix CSV.
    #[arg(long)]
    q_matrix: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "auto")]
    init: InitArg,
    /// Initial parameters (JSON) for `--init file`.
    #[arg(long)]
    init_params: Option<PathBuf>,
    /// Initial latent values (CSV) for `--init file`; zeros when absent.
    #[arg(long)]
    init_latent: Option<PathBuf>,
    /// True latent values (CSV) for `--init simulation`.
    #[arg(long)]
    true_latent: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Optimiser settings (JSON); flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    algo: Option<String>,
    /// Minibatch size.
    #[arg(long)]
    n: Option<usize>,
    /// MALA step size.
    #[arg(long)]
    h: Option<f64>,
    /// Random-walk proposal variance.
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    averaging_start: Option<usize>,
    #[arg(long)]
    gamma_exponent: Option<f64>,
    #[arg(long)]
    gamma_scale: Option<f64>,
    /// Disable the DIFF_MAX stopping rule.
    #[arg(long)]
    no_stop: bool,
}

impl ConfigArgs {
    fn flags(&self) -> Result<ConfigFile> {
        let algorithm = self
            .algo
            .as_deref()
            .map(|a| Algorithm::parse(a).ok_or_else(|| usage(format!("unknown algorithm '{a}'"))))
            .transpose()?;
        if self.h.is_some() && self.sigma2.is_some() {
            return Err(usage("give either --h or --sigma2, not both"));
        }
        Ok(ConfigFile {
            algorithm,
            step: self.h.or(self.sigma2),
            batch_size: self.n,
            max_epochs: self.max_epochs,
            averaging_start_epoch: self.averaging_start,
            gamma_exponent: self.gamma_exponent,
            gamma_scale: self.gamma_scale,
            stop: self.no_stop.then_some(false),
            ..Default::default()
        })
    }

    fn merged(&self) -> Result<ConfigFile> {
        let base = match &self.config {
            Some(p) => ConfigFile::read(p)?,
            None => ConfigFile::default(),
        };
        let merged = base.overlay(&self.flags()?);
        if let (Some(_), Some(a)) = (self.h, merged.algorithm) {
            if a.sampler_kind() != somala::SamplerKind::Mala {
                return Err(usage(format!("--h applies to MALA algorithms, not {a}")));
            }
        }
        if let (Some(_), a) = (self.sigma2, merged.algorithm()) {
            if a.sampler_kind() != somala::SamplerKind::Rwmh {
                return Err(usage(format!(
                    "--sigma2 applies to random-walk algorithms, not {a}"
                )));
            }
        }
        Ok(merged)
    }
}

#[derive(Debug, Args)]
struct TuneArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Candidate steps (default: the grid for the algorithm's sampler).
    #[arg(long, value_delimiter = ',')]
    candidates: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    tune_epochs: usize,
    #[arg(long, default_value_t = 50)]
    tail_epochs: usize,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Accumulate the observed information matrix.
    #[arg(long)]
    info: bool,
    /// Estimate the marginal log-likelihood by importance sampling with T
    /// draws per observation.
    #[arg(long, value_name = "T")]
    logml: Option<usize>,
    /// Variance inflation of the importance density.
    #[arg(long, default_value_t = 2.0)]
    inflation: f64,
    /// Latent snapshots kept for the importance density.
    #[arg(long, default_value_t = 500)]
    retain: usize,
}

#[derive(Debug, Args)]
struct ReplicateArgs {
    #[command(flatten)]
    setting: SettingArgs,
    /// JSON list of algorithm configurations.
    #[arg(long)]
    algos: Option<PathBuf>,
    /// Comma-separated algorithm names sharing `--n/--h/--sigma2`.
    #[arg(long, value_delimiter = ',')]
    algo: Vec<String>,
    /// The six-algorithm comparison set.
    #[arg(long)]
    comparison_set: bool,
    #[arg(long, default_value_t = 250)]
    n: usize,
    #[arg(long, default_value_t = 0.1)]
    h: f64,
    #[arg(long, default_value_t = 0.3)]
    sigma2: f64,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    averaging_start: Option<usize>,
    /// Spacing (seconds) of the interpolated time table in `report.json`.
    #[arg(long, default_value_t = 1.0)]
    time_step: f64,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Estimated parameters (JSON).
    #[arg(long)]
    estimate: PathBuf,
    /// True parameters (JSON).
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Debug, Args)]
struct RerunArgs {
    manifest: PathBuf,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_) | Error::LayoutMismatch(_) => 2,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => 4,
        _ => 3,
    }
}

/// Per-invocation bookkeeping shared by the commands.
struct Ctx {
    seed: u64,
    out: PathBuf,
    inputs: Vec<FileDigest>,
    outputs: Vec<PathBuf>,
    config: serde_json::Value,
}

impl Ctx {
    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(digest(path)?);
        Ok(())
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    run_cli(cli, argv)
}

fn run_cli(cli: Cli, argv: Vec<String>) -> ExitCode {
    if let Command::Rerun(r) = &cli.command {
        return match rerun(r, &cli) {
            Ok(code) => code,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(exit_code(&e))
            }
        };
    }
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .try_init()
        .ok();
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
    {
        log::warn!("worker pool already initialised: {e}");
    }
    let name = match &cli.command {
        Command::Simulate(_) => "simulate",
        Command::Tune(_) => "tune",
        Command::Fit(_) => "fit",
        Command::Replicate(_) => "replicate",
        Command::Evaluate(_) => "evaluate",
        Command::Rerun(_) => "rerun",
    };
    let mut manifest = RunManifest {
        command: name.to_string(),
        argv,
        seed: cli.seed,
        workers,
        version: env!("CARGO_PKG_VERSION").to_string(),
        started: now(),
        finished: None,
        inputs: Vec::new(),
        config: serde_json::Value::Null,
        outputs: Vec::new(),
        status: "running".into(),
        error: None,
        exit_code: 0,
    };
    let mut ctx = Ctx {
        seed: cli.seed,
        out: cli.out.clone(),
        inputs: Vec::new(),
        outputs: Vec::new(),
        config: serde_json::Value::Null,
    };
    let result = std::fs::create_dir_all(&cli.out)
        .map_err(Error::from)
        .and_then(|_| match &cli.command {
            Command::Simulate(a) => cmd_simulate(a, &mut ctx),
            Command::Tune(a) => cmd_tune(a, &mut ctx),
            Command::Fit(a) => cmd_fit(a, &mut ctx),
            Command::Replicate(a) => cmd_replicate(a, &mut ctx),
            Command::Evaluate(a) => cmd_evaluate(a, &mut ctx),
            Command::Rerun(_) => unreachable!("handled above"),
        });
    let code = match &result {
        Ok(()) => 0,
        Err(e) => exit_code(e),
    };
    manifest.finished = Some(now());
    manifest.inputs = ctx.inputs;
    manifest.config = ctx.config;
    manifest.outputs = ctx.outputs.iter().filter_map(|p| digest(p).ok()).collect();
    manifest.status = if result.is_ok() { "ok" } else { "error" }.into();
    manifest.error = result.as_ref().err().map(|e| e.to_string());
    manifest.exit_code = code as i32;
    if let Err(e) = io::write_json(&manifest, &cli.out.join("manifest.json")) {
        eprintln!("error: could not write the manifest: {e}");
    }
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(code)
}

fn rerun(args: &RerunArgs, outer: &Cli) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&args.manifest)?;
    let m: RunManifest = serde_json::from_str(&text)?;
    let mut argv = vec!["somala".to_string()];
    argv.extend(m.argv.iter().cloned());
    let mut cli =
        Cli::try_parse_from(&argv).map_err(|e| usage(format!("manifest arguments: {e}")))?;
    if matches!(cli.command, Command::Rerun(_)) {
        return Err(usage("a manifest cannot replay another rerun"));
    }
    if outer.workers.is_some() {
        cli.workers = outer.workers;
    }
    let out_given = std::env::args().any(|a| a == "--out" || a.starts_with("--out="));
    if out_given {
        cli.out = outer.out.clone();
    }
    cli.verbose |= outer.verbose;
    let mut replay = m.argv.clone();
    strip_flag(&mut replay, "--workers");
    strip_flag(&mut replay, "--out");
    replay.push("--out".into());
    replay.push(cli.out.display().to_string());
    if let Some(w) = cli.workers {
        replay.push("--workers".into());
        replay.push(w.to_string());
    }
    Ok(run_cli(cli, replay))
}

fn strip_flag(argv: &mut Vec<String>, flag: &str) {
    let mut out = Vec::with_capacity(argv.len());
    let mut skip = false;
    for a in argv.drain(..) {
        if skip {
            skip = false;
            continue;
        }
        if a == flag {
            skip = true;
            continue;
        }
        if a.starts_with(&format!("{flag}=")) {
            continue;
        }
        out.push(a);
    }
    *argv = out;
}

// ------------------------------------------------------------------ simulate

fn resolve_setting(a: &SettingArgs, ctx: &mut Ctx) -> Result<SimSetting> {
    let s = match (&a.setting, &a.setting_file) {
        (Some(name), None) => SimSetting::named(name).ok_or_else(|| {
            usage(format!(
                "unknown setting '{name}'; expected one of {}",
                SETTING_NAMES.join(", ")
            ))
        })?,
        (None, Some(p)) => {
            ctx.input(p)?;
            serde_json::from_str(&std::fs::read_to_string(p)?)
                .map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        _ => return Err(usage("give exactly one of --setting or --setting-file")),
    };
    Ok(match a.n_obs {
        Some(n) => s.with_n_obs(n),
        None => s,
    })
}

fn cmd_simulate(a: &SimulateArgs, ctx: &mut Ctx) -> Result<()> {
    let setting = resolve_setting(&a.setting, ctx)?;
    ctx.config = serde_json::to_value(&setting)?;
    let (ds, truth, xi) = simulate_dataset(&setting, ctx.seed)?;
    match &ds {
        Dataset::M2pl(m) => {
            let (r, q) = (ctx.path("responses.csv"), ctx.path("q_matrix.csv"));
            io::write_m2pl(m, &r, &q)?;
        }
        Dataset::Multilevel(m) => {
            let p = ctx.path("data.csv");
            io::write_multilevel(m, &p)?;
        }
    }
    let p = ctx.path("truth.json");
    io::write_params(&truth, &p)?;
    let p = ctx.path("latent.csv");
    io::write_latent(&xi, &p)?;
    let p = ctx.path("setting.json");
    io::write_json(&setting, &p)?;
    println!(
        "simulated {} observations, K = {} ({} parameters) into {}",
        ds.n_obs(),
        ds.latent_dim(),
        ds.n_params(),
        ctx.out.display()
    );
    Ok(())
}

// ------------------------------------------------------------------ data

fn load_data(a: &DataArgs, ctx: &mut Ctx) -> Result<(Dataset, ParamVector, LatentState)> {
    let mut true_latent = a.true_latent.clone();
    let ds = if let Some(dir) = &a.data_dir {
        if a.data.is_some() || a.responses.is_some() || a.q_matrix.is_some() {
            return Err(usage(
                "--data-dir cannot be combined with explicit data files",
            ));
        }
        if true_latent.is_none() && dir.join("latent.csv").exists() {
            true_latent = Some(dir.join("latent.csv"));
        }
        let (r, q, d) = (
            dir.join("responses.csv"),
            dir.join("q_matrix.csv"),
            dir.join("data.csv"),
        );
        if r.exists() && q.exists() {
            ctx.input(&r)?;
            ctx.input(&q)?;
            Dataset::M2pl(io::read_m2pl(&r, &q)?)
        } else if d.exists() {
            ctx.input(&d)?;
            Dataset::Multilevel(io::read_multilevel(&d)?)
        } else {
            return Err(usage(format!("{} holds no dataset", dir.display())));
        }
    } else {
        match (a.model, &a.data, &a.responses, &a.q_matrix) {
            (Some(ModelArg::Multilevel) | None, Some(d), None, None) => {
                ctx.input(d)?;
                Dataset::Multilevel(io::read_multilevel(d)?)
            }
            (Some(ModelArg::M2pl) | None, None, Some(r), Some(q)) => {
                ctx.input(r)?;
                ctx.input(q)?;
                Dataset::M2pl(io::read_m2pl(r, q)?)
            }
            _ => {
                return Err(usage(
                    "give --data-dir, or --data for multilevel data, or --responses and --q-matrix for M2PL data",
                ))
            }
        }
    };
    let init_seed = derive_seed(ctx.seed, Purpose::Init, 0, 0);
    let mode = match a.init {
        InitArg::Auto if a.init_params.is_some() => InitArg::File,
        InitArg::Auto if true_latent.is_some() => InitArg::Simulation,
        InitArg::Auto => InitArg::Sumscore,
        m => m,
    };
    let (beta, xi) = match mode {
        InitArg::File => {
            let p = a
                .init_params
                .as_ref()
                .ok_or_else(|| usage("--init file needs --init-params"))?;
            ctx.input(p)?;
            let beta = io::read_params(p, ds.layout().clone())?;
            let xi = match &a.init_latent {
                Some(l) => {
                    ctx.input(l)?;
                    io::read_latent(l)?
                }
                None => LatentState::zeros(ds.n_obs(), ds.latent_dim()),
            };
            (beta, xi)
        }
        InitArg::Simulation => {
            let p = true_latent.ok_or_else(|| usage("--init simulation needs --true-latent"))?;
            ctx.input(&p)?;
            let truth = io::read_latent(&p)?;
            initial_values(&ds, init_seed, InitMode::Simulation { true_xi: &truth })?
        }
        InitArg::Sumscore => initial_values(&ds, init_seed, InitMode::SumScore)?,
        InitArg::Auto => unreachable!("resolved above"),
    };
    if xi.n_obs() != ds.n_obs() || xi.dim() != ds.latent_dim() {
        return Err(usage("initial latent values do not match the dataset"));
    }
    Ok((ds, beta, xi))
}

// ------------------------------------------------------------------ tune

fn cmd_tune(a: &TuneArgs, ctx: &mut Ctx) -> Result<()> {
    let (ds, beta, xi) = load_data(&a.data, ctx)?;
    let merged = a.config.merged()?;
    let cfg = merged.resolve(ds.kind(), ds.n_obs(), ctx.seed)?;
    let mut spec = TuneSpec::defaults(cfg.sampler.kind, a.tune_epochs);
    spec.tail_epochs = a.tail_epochs;
    if !a.candidates.is_empty() {
        spec.candidates = a.candidates.clone();
    }
    ctx.config = serde_json::json!({ "optimizer": cfg, "tune": spec });
    let report = harness::tune(&ds, &beta, &xi, &cfg, &spec)?;
    println!("{:>10}  {:>24}", "step", "mean neg. complete loglik");
    for r in &report.rows {
        match r.mean_neg_loglik {
            Some(v) => println!("{:>10}  {:>24.6}", r.step, v),
            None => println!("{:>10}  {:>24}", r.step, "diverged"),
        }
    }
    println!("chosen: {}", report.chosen);
    let p = ctx.path("tune.json");
    io::write_json(&report, &p)
}

// ------------------------------------------------------------------ fit

#[derive(Serialize)]
struct FitSummary<'a> {
    algorithm: Algorithm,
    config: &'a OptimizerConfig,
    stop_reason: StopReason,
    epochs: usize,
    updates: u64,
    averaged_updates: u64,
    mean_acceptance: f64,
    sign_flip: bool,
    diff_max_trace: &'a [f64],
    beta_init: ParamFile,
    beta_final: ParamFile,
    beta_pr: ParamFile,
    /// Wall-clock seconds at each checkpoint.
    seconds: Vec<f64>,
}

#[derive(Serialize)]
struct DivergenceReport<'a> {
    message: String,
    last_checkpoint: Option<&'a Checkpoint>,
}

fn cmd_fit(a: &FitArgs, ctx: &mut Ctx) -> Result<()> {
    let (ds, beta0, xi0) = load_data(&a.data, ctx)?;
    let mut merged = a.config.merged()?;
    if a.info {
        merged.information = Some(true);
    }
    if a.logml.is_some() {
        merged.retain_latents = Some(a.retain);
    }
    let cfg = merged.resolve(ds.kind(), ds.n_obs(), ctx.seed)?;
    ctx.config = serde_json::json!({
        "optimizer": cfg,
        "logml_draws": a.logml,
        "inflation": a.inflation,
    });
    let fit = match somala::run(&ds, &beta0, &xi0, &cfg) {
        Ok(f) => f,
        Err(Error::Divergence {
            message,
            last_checkpoint,
        }) => {
            let p = ctx.path("divergence.json");
            io::write_json(
                &DivergenceReport {
                    message: message.clone(),
                    last_checkpoint: last_checkpoint.as_deref(),
                },
                &p,
            )?;
            return Err(Error::Divergence {
                message,
                last_checkpoint,
            });
        }
        Err(e) => return Err(e),
    };
    let names = ds.layout().coordinate_names();
    let p = ctx.path("checkpoints.csv");
    io::write_checkpoints(&fit.checkpoints, &names, &p)?;
    let p = ctx.path("estimate.json");
    io::write_params(&fit.beta_pr, &p)?;
    let p = ctx.path("latent.csv");
    io::write_latent(&fit.xi_final, &p)?;
    let summary = FitSummary {
        algorithm: fit.algorithm,
        config: &fit.config,
        stop_reason: fit.stop_reason,
        epochs: fit.epochs,
        updates: fit.updates,
        averaged_updates: fit.averaged_updates,
        mean_acceptance: fit.mean_acceptance,
        sign_flip: fit.sign_flip,
        diff_max_trace: &fit.diff_max_trace,
        beta_init: fit.beta_init.to_file(),
        beta_final: fit.beta_final.to_file(),
        beta_pr: fit.beta_pr.to_file(),
        seconds: fit.checkpoints.iter().map(|c| c.seconds).collect(),
    };
    let p = ctx.path("fit.json");
    io::write_json(&summary, &p)?;
    if let Some(info) = &fit.information {
        let p = ctx.path("information.csv");
        io::write_square_matrix(&info.matrix, &names, &p)?;
        if let Err(e) = info.check() {
            log::warn!("observed information: {e}");
        }
    }
    if let Some(t) = a.logml {
        if fit.retained.is_empty() {
            return Err(usage(format!(
                "--logml needs latent draws from the averaging phase; the run stopped at epoch {} \
                 but averaging starts after epoch {} (see --averaging-start)",
                fit.epochs, fit.config.averaging_start_epoch
            )));
        }
        let density = fit_importance_density(&fit.retained, a.inflation)?;
        let seed = derive_seed(ctx.seed, Purpose::Importance, 0, 0);
        let est = is_log_marginal(&ds, &fit.beta_pr, &density, t, seed)?;
        println!(
            "log marginal likelihood (IS, T = {t}): {:.4} (min ESS {:.1})",
            est.total,
            est.min_ess()
        );
        let p = ctx.path("logml.json");
        io::write_json(&est, &p)?;
    }
    println!(
        "{}: {} epochs, {} updates, mean acceptance {:.3}, stop {:?}",
        fit.algorithm, fit.epochs, fit.updates, fit.mean_acceptance, fit.stop_reason
    );
    if fit.sign_flip {
        log::warn!("a Cholesky diagonal entry changed sign during the run");
    }
    Ok(())
}

// ------------------------------------------------------------------ replicate

#[derive(Serialize)]
struct ReplicateReport<'a> {
    setting: &'a SimSetting,
    labels: &'a [String],
    configs: Vec<&'a OptimizerConfig>,
    replications: usize,
    succeeded: &'a [usize],
    failures: &'a [harness::Failure],
    final_mae_average: Vec<f64>,
    time_grid: Vec<f64>,
    /// Block-averaged MAE interpolated on wall-clock time, per algorithm.
    time_mae_average: Vec<Vec<f64>>,
}

fn cmd_replicate(a: &ReplicateArgs, ctx: &mut Ctx) -> Result<()> {
    let setting = resolve_setting(&a.setting, ctx)?;
    let n_obs = setting.n_obs();
    let kind = match setting {
        SimSetting::Multilevel { .. } => ModelKind::Multilevel,
        SimSetting::M2pl { .. } => ModelKind::M2pl,
    };
    let overrides = ConfigFile {
        max_epochs: a.max_epochs,
        averaging_start_epoch: a.averaging_start,
        ..Default::default()
    };
    let mut entries: Vec<ConfigFile> = Vec::new();
    if let Some(p) = &a.algos {
        ctx.input(p)?;
        entries.extend(ConfigFile::read_list(p)?);
    }
    let table: Vec<Algorithm> = if a.comparison_set {
        harness::comparison_algorithms(kind, n_obs, a.n, a.h, a.sigma2, 1)
            .iter()
            .map(|s| s.config.algorithm(n_obs))
            .collect()
    } else {
        Vec::new()
    };
    for name in a.algo.iter().map(String::as_str) {
        let algo =
            Algorithm::parse(name).ok_or_else(|| usage(format!("unknown algorithm '{name}'")))?;
        entries.push(entry_for(algo, a));
    }
    for algo in table {
        entries.push(entry_for(algo, a));
    }
    if entries.is_empty() {
        return Err(usage("give --algos, --algo or --comparison-set"));
    }
    let algorithms = entries
        .iter()
        .map(|e| {
            let e = e.clone().overlay(&overrides);
            let mut cfg = e.resolve(kind, n_obs, ctx.seed)?;
            if e.stop.is_none() && e.stop_rule.is_none() {
                cfg.stop = None;
            }
            let mut spec = AlgoSpec::new(cfg, n_obs);
            if let Some(l) = &e.label {
                spec.label = l.clone();
            }
            Ok(spec)
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = ReplicateSpec {
        setting: setting.clone(),
        algorithms,
        replications: a.reps,
        seed: ctx.seed,
    };
    ctx.config = serde_json::to_value(&spec)?;
    let report = harness::replicate(&spec)?;
    report.write_csvs(&ctx.out)?;
    for b in &report.blocks {
        ctx.outputs
            .push(ctx.out.join(format!("mae_{}.csv", block_label(*b))));
    }
    ctx.outputs.push(ctx.out.join("mae_average.csv"));
    ctx.outputs.push(ctx.out.join("ae_runs.csv"));

    let max_secs = report
        .runs
        .iter()
        .flatten()
        .flatten()
        .filter_map(|r| r.seconds.last().copied())
        .fold(0.0, f64::max);
    let step = if a.time_step > 0.0 { a.time_step } else { 1.0 };
    let grid: Vec<f64> = (0..=((max_secs / step).ceil() as usize))
        .map(|g| g as f64 * step)
        .collect();
    let out = ReplicateReport {
        setting: &setting,
        labels: &report.labels,
        configs: spec.algorithms.iter().map(|s| &s.config).collect(),
        replications: report.replications,
        succeeded: &report.succeeded,
        failures: &report.failures,
        final_mae_average: report
            .mae_average
            .iter()
            .map(|m| m.last().copied().unwrap_or(f64::NAN))
            .collect(),
        time_mae_average: report.time_table(&grid),
        time_grid: grid,
    };
    let p = ctx.path("report.json");
    io::write_json(&out, &p)?;

    println!("{:<16} {:>9} {:>12}", "algorithm", "succeeded", "final MAE");
    for (l, (s, m)) in report
        .labels
        .iter()
        .zip(report.succeeded.iter().zip(&out.final_mae_average))
    {
        println!("{l:<16} {s:>9} {m:>12.5}");
    }
    if report.succeeded.iter().all(|s| *s == 0) {
        return Err(Error::Divergence {
            message: "every replication failed".into(),
            last_checkpoint: None,
        });
    }
    if !report.failures.is_empty() {
        log::warn!("{} runs failed; see report.json", report.failures.len());
    }
    Ok(())
}

fn entry_for(algo: Algorithm, a: &ReplicateArgs) -> ConfigFile {
    ConfigFile {
        algorithm: Some(algo),
        step: Some(match algo.sampler_kind() {
            somala::SamplerKind::Mala => a.h,
            somala::SamplerKind::Rwmh => a.sigma2,
        }),
        batch_size: algo.minibatch().then_some(a.n),
        ..Default::default()
    }
}

// ------------------------------------------------------------------ evaluate

fn layout_of(file: &ParamFile) -> Result<Arc<Layout>> {
    let len = |b: &str| {
        file.blocks
            .get(b)
            .map(Vec::len)
            .ok_or_else(|| usage(format!("parameter file lacks block '{b}'")))
    };
    Ok(Arc::new(match file.model {
        ModelKind::Multilevel => Layout::multilevel(file.latent_dim),
        ModelKind::M2pl => Layout::m2pl(len("d")?, len("a")?, file.latent_dim),
    }))
}

#[derive(Serialize)]
struct Evaluation {
    blocks: Vec<(String, f64)>,
    average: f64,
}

fn cmd_evaluate(a: &EvaluateArgs, ctx: &mut Ctx) -> Result<()> {
    ctx.input(&a.estimate)?;
    ctx.input(&a.truth)?;
    let truth_file = io::read_param_file(&a.truth)?;
    let layout = layout_of(&truth_file)?;
    let truth = ParamVector::from_file(layout.clone(), &truth_file)?;
    let hat = io::read_params(&a.estimate, layout)?;
    let ae = harness::ae_all(&hat, &truth)?;
    let ev = Evaluation {
        blocks: ae
            .iter()
            .map(|(b, v)| (block_label(*b).to_string(), *v))
            .collect(),
        average: harness::block_average(&ae),
    };
    for (b, v) in &ev.blocks {
        println!("AE_{b:<6} {v:.6}");
    }
    println!("average  {:.6}", ev.average);
    let p = ctx.path("evaluation.json");
    io::write_json(&ev, &p)
}
