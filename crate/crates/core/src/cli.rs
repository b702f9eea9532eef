//! Command-line surface. Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | a simulation check did not pass |
//! | 2 | principle initialization failed |
//! | 3 | configuration or input error (flags, config file, task, manifest, endpoint) |
//! | 4 | report could not be written, or an internal error |

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::aggregation::Decision;
use crate::config::{load_file_config, FlagOverrides, RunConfig};
use crate::evolution::EvolutionError;
use crate::grounding::{load_grounding_set_with_warnings, DEFAULT_MAX_OBJECTS};
use crate::pipeline::{build_dispatcher, route_lengths, run_pipeline, RunHistory};
use crate::rational::parse_rational;
use crate::routing::{DispatchMode, Task};
use crate::scheduler::CostReport;
use crate::simulation::{run_experiment, Experiment, SynthSpace, TrialConfig, DEFAULT_SPACE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    CheckFailed = 1,
    InitFailed = 2,
    Input = 3,
    Internal = 4,
}

#[derive(Debug, Parser)]
#[command(name = "sap", version, about = "Evolutionary principle search for vision-language questions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the search on one task and write the run history.
    Run(RunArgs),
    /// Run a synthetic-space experiment and write its report.
    Simulate(SimulateArgs),
    /// Attention-cost comparison from a run history or explicit numbers.
    CostReport(CostArgs),
    /// Check a grounding manifest.
    ValidateManifest(ManifestArgs),
}

#[derive(Debug, Args)]
pub struct SearchFlags {
    #[arg(long)]
    pub mu: Option<usize>,
    #[arg(long)]
    pub lambda: Option<usize>,
    #[arg(long)]
    pub tau: Option<usize>,
    /// Number of evaluated generations.
    #[arg(long, alias = "T")]
    pub generations: Option<usize>,
    /// Fitness weights `c,d,e,u`.
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long, value_enum)]
    pub dispatch_mode: Option<DispatchMode>,
    #[arg(long, value_enum)]
    pub decision: Option<Decision>,
    #[arg(long)]
    pub no_route_cache: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_objects: Option<usize>,
    /// Chat-completions URL, or `mock://`. Repeat for several endpoints.
    #[arg(long = "endpoint")]
    pub endpoints: Vec<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub max_concurrency: Option<usize>,
    #[arg(long)]
    pub serial: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl SearchFlags {
    fn overrides(&self) -> FlagOverrides {
        FlagOverrides {
            mu: self.mu,
            lambda: self.lambda,
            tau: self.tau,
            generations: self.generations,
            weights: self.weights.clone(),
            dispatch_mode: self.dispatch_mode,
            decision: self.decision,
            no_route_cache: self.no_route_cache,
            seed: self.seed,
            max_objects: self.max_objects,
            endpoints: self.endpoints.clone(),
            model: self.model.clone(),
            max_concurrency: self.max_concurrency,
            serial: self.serial,
            out: self.out.clone(),
        }
    }

    pub fn resolve(&self) -> Result<RunConfig, String> {
        let file = match &self.config {
            Some(p) => Some(load_file_config(p).map_err(|e| e.to_string())?),
            None => None,
        };
        RunConfig::resolve(file.as_ref(), &self.overrides()).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON task file: `{"prompt": str, "images": [path-or-URI]}`.
    #[arg(long)]
    pub task: PathBuf,
    /// Grounding manifest JSON.
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub flags: SearchFlags,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub experiment: Experiment,
    /// Target probability; integer, fraction or decimal.
    #[arg(long)]
    pub q: Option<String>,
    #[arg(long, default_value_t = 20_000)]
    pub trials: u64,
    #[arg(long, default_value_t = 2)]
    pub mu: usize,
    #[arg(long, default_value_t = 2)]
    pub lambda: usize,
    #[arg(long, alias = "T", default_value_t = 10)]
    pub generations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_SPACE_SIZE)]
    pub space_size: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// Run history to read population, τ and route lengths from.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub mu: usize,
    #[arg(long, default_value_t = 2)]
    pub lambda: usize,
    #[arg(long, default_value_t = 2)]
    pub tau: usize,
    #[arg(long)]
    pub mean_route_length: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ManifestArgs {
    pub manifest: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_OBJECTS)]
    pub max_objects: usize,
}

fn default_q(experiment: Experiment) -> &'static str {
    match experiment {
        Experiment::Monotone | Experiment::Improvement => "1/5",
        Experiment::Coverage | Experiment::Corollary => "1/20",
        Experiment::Linearization => "1/100",
    }
}

struct Failure(ExitCode, String);

fn input(msg: impl Into<String>) -> Failure {
    Failure(ExitCode::Input, msg.into())
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    let res = match out {
        Some(p) => std::fs::write(p, text),
        None => std::io::stdout().lock().write_all(text.as_bytes()),
    };
    res.map_err(|e| Failure(ExitCode::Internal, format!("cannot write report: {e}")))
}

fn pretty(v: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

fn read(path: &Path, what: &str) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| input(format!("cannot read {what} {}: {e}", path.display())))
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode, Failure> {
    let cfg = args.flags.resolve().map_err(input)?;
    if cfg.endpoints.is_empty() {
        return Err(input("`run` needs at least one --endpoint (or endpoints in the config file)"));
    }
    let task: Task = serde_json::from_slice(&read(&args.task, "task file")?)
        .map_err(|e| input(format!("invalid task file {}: {e}", args.task.display())))?;
    if task.prompt.trim().is_empty() {
        return Err(input("task prompt must not be empty"));
    }
    let (gs, manifest_warnings) = load_grounding_set_with_warnings(&read(&args.manifest, "manifest")?, cfg.max_objects)
        .map_err(|e| input(format!("invalid manifest: {e}")))?;
    let dispatcher = build_dispatcher(&cfg).map_err(input)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure(ExitCode::Internal, e.to_string()))?;
    let mut history: RunHistory = runtime
        .block_on(run_pipeline(&cfg, &task, &gs, &dispatcher, None))
        .map_err(|e| match e {
            EvolutionError::Init(_) => Failure(ExitCode::InitFailed, e.to_string()),
            EvolutionError::Config(..) => input(e.to_string()),
        })?;
    history.warnings = manifest_warnings
        .iter()
        .map(|w| format!("manifest image {}: {}", w.image_index, w.message))
        .collect();
    emit(&history.to_json(), cfg.out.as_deref())?;
    Ok(ExitCode::Ok)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<ExitCode, Failure> {
    let raw_q = args.q.as_deref().unwrap_or(default_q(args.experiment));
    let q = parse_rational(raw_q).map_err(|e| input(format!("invalid value for `q`: {e}")))?;
    let space = SynthSpace::new(args.space_size, q).map_err(|e| input(e.to_string()))?;
    let cfg = TrialConfig {
        mu: args.mu,
        lambda: args.lambda,
        generations: args.generations,
        trials: args.trials,
        seed: args.seed,
    };
    let report = run_experiment(args.experiment, &space, &cfg).map_err(|e| input(e.to_string()))?;
    emit(&pretty(&json!({ "simulation": report })), args.out.as_deref())?;
    Ok(if report.pass() { ExitCode::Ok } else { ExitCode::CheckFailed })
}

fn cmd_cost(args: &CostArgs) -> Result<ExitCode, Failure> {
    let report = match &args.history {
        Some(path) => {
            let h: RunHistory = serde_json::from_slice(&read(path, "run history")?)
                .map_err(|e| input(format!("invalid run history: {e}")))?;
            let population = (h.config.mu + h.config.lambda) as u64;
            CostReport::from_route_lengths(population, h.config.tau as u64, &route_lengths(&h.generations))
        }
        None => {
            let mean = args
                .mean_route_length
                .ok_or_else(|| input("give --history or --mean-route-length"))?;
            for (name, v) in [("mu", args.mu), ("lambda", args.lambda), ("tau", args.tau)] {
                if v == 0 {
                    return Err(input(format!("invalid value for `{name}`: must be at least 1")));
                }
            }
            CostReport::from_mean(((args.mu + args.lambda) * args.tau) as u64, mean)
        }
    };
    emit(&pretty(&report), args.out.as_deref())?;
    Ok(ExitCode::Ok)
}

fn cmd_validate_manifest(args: &ManifestArgs) -> Result<ExitCode, Failure> {
    let bytes = read(&args.manifest, "manifest")?;
    match load_grounding_set_with_warnings(&bytes, args.max_objects) {
        Ok((gs, warnings)) => {
            let doc = json!({
                "valid": true,
                "images": gs.images().len(),
                "objects": gs.objects().len(),
                "warnings": warnings.iter().map(|w| json!({"image_index": w.image_index, "message": w.message})).collect::<Vec<_>>(),
            });
            emit(&pretty(&doc), None)?;
            Ok(ExitCode::Ok)
        }
        Err(e) => {
            emit(&pretty(&json!({ "valid": false, "error": e.to_string() })), None)?;
            Ok(ExitCode::Input)
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::Input as i32 } else { ExitCode::Ok as i32 };
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::CostReport(a) => cmd_cost(a),
        Command::ValidateManifest(a) => cmd_validate_manifest(a),
    };
    match result {
        Ok(code) => code as i32,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            code as i32
        }
    }
}
