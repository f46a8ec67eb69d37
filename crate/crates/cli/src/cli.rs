//! Argument parsing and the `calibrate`, `oc`, `replay`, `run` and `serve`
//! commands.

use std::ffi::OsString;
use std::fmt;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use seqaudit_core::io::{self as sio, OcExport, ReplayExport, RunManifest, SessionExport};
use seqaudit_core::seed::{replication_seed, stream};
use seqaudit_core::{
    calibrate, expected_tau_peak, new_session, oc_curve, replay, synth_population, validate_grid, BoundarySchedule,
    ConfigError, DesignConfig, DeviationPath, Error as CoreError, FinitePopulation, Region, Status,
};

use crate::parse_grid;
use crate::service::{self, AppState};

/// Exit status for invalid input of any kind.
pub const EXIT_INVALID: i32 = 1;
/// Exit status for a truncated design that cannot meet its lower error bound.
pub const EXIT_INFEASIBLE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "seqaudit",
    version,
    about = "Sequential audit sampling for finite populations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate count boundaries for a design.
    Calibrate(CalibrateArgs),
    /// Estimate operating characteristics over a grid of deviation counts.
    Oc(OcArgs),
    /// Replay a schedule over random inspection orders of one population.
    Replay(ReplayArgs),
    /// Run a schedule over a single inspection order of a population file.
    Run(RunArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

/// Design parameters, from a config file and/or inline flags. Inline flags
/// override the file.
#[derive(Debug, Default, Args)]
pub struct DesignArgs {
    /// JSON or TOML design config.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<u32>,
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub theta_h: Option<f64>,
    #[arg(long)]
    pub theta_k: Option<f64>,
    /// two_sided, one_sided, one_sided_power, two_stage or truncated.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub t0: Option<u32>,
    /// Truncation stage.
    #[arg(long = "T", value_name = "T")]
    pub truncation: Option<u32>,
    #[arg(long)]
    pub m_reps: Option<u32>,
    /// monte_carlo or exact.
    #[arg(long)]
    pub backend: Option<String>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub design: DesignArgs,
    /// Calibration master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Schedule JSON path; a CSV table and a run manifest are written next
    /// to it. Prints the schedule when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

/// A saved schedule, or a design to calibrate on the fly.
#[derive(Debug, Args)]
pub struct ScheduleSource {
    #[arg(long, value_name = "PATH")]
    pub schedule: Option<PathBuf>,
    #[command(flatten)]
    pub design: DesignArgs,
    /// Calibration seed when calibrating on the fly.
    #[arg(long)]
    pub calibration_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct OcArgs {
    #[command(flatten)]
    pub source: ScheduleSource,
    /// `all` or a comma list of counts and ranges, e.g. `0-15,25,30-40`.
    #[arg(long, default_value = "all")]
    pub grid: String,
    #[arg(long, default_value_t = 10_000)]
    pub reps: u32,
    /// Evaluation seed; defaults to the calibration seed plus one.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub source: ScheduleSource,
    /// Population CSV.
    #[arg(long, value_name = "PATH", conflicts_with = "synth")]
    pub data: Option<PathBuf>,
    /// Column holding the 0/1 indicator when the file has several.
    #[arg(long, requires = "data")]
    pub column: Option<String>,
    /// Synthetic population `n,m`.
    #[arg(long, value_name = "N,M")]
    pub synth: Option<String>,
    #[arg(long, default_value_t = 1_000)]
    pub reps: u32,
    /// Replay seed; defaults to the calibration seed plus one.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub source: ScheduleSource,
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    #[arg(long)]
    pub column: Option<String>,
    /// Shuffle the population with this seed; file order when omitted.
    #[arg(long)]
    pub order_seed: Option<u64>,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Directory for designs and session event logs; in-memory when omitted.
    #[arg(long, value_name = "PATH")]
    pub state_dir: Option<PathBuf>,
}

/// A failed command: message for stderr plus exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn invalid(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn flag_name(key: &str) -> String {
    match key {
        "T" => "--T".into(),
        k => format!("--{}", k.replace('_', "-")),
    }
}

fn config_failure(e: &ConfigError) -> Failure {
    match e.key() {
        Some(key) => Failure::invalid(format!("{}: {e}", flag_name(key))),
        None => Failure::invalid(e.to_string()),
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        match &e {
            CoreError::Config(c) => config_failure(c),
            _ => Failure::invalid(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

impl DesignArgs {
    fn is_empty(&self) -> bool {
        self.config.is_none()
            && self.n.is_none()
            && self.r.is_none()
            && self.alpha.is_none()
            && self.beta.is_none()
            && self.theta_h.is_none()
            && self.theta_k.is_none()
            && self.variant.is_none()
            && self.t0.is_none()
            && self.truncation.is_none()
            && self.m_reps.is_none()
            && self.backend.is_none()
    }

    /// Merges the config file with the inline flags and validates.
    pub fn resolve(&self, seed: Option<u64>) -> Result<DesignConfig, Failure> {
        let mut map = Map::new();
        if let Some(path) = &self.config {
            let file = sio::load_config(path).map_err(|e| match e {
                CoreError::Config(c) => {
                    Failure::invalid(format!("--config {}: {}", path.display(), config_failure(&c)))
                }
                other => Failure::invalid(format!("--config: {other}")),
            })?;
            let Value::Object(m) = serde_json::to_value(&file).map_err(CoreError::from)? else {
                unreachable!("configs serialize as objects");
            };
            map = m;
            // T follows n unless the file truncates.
            if file.truncation == file.n {
                map.remove("T");
            }
        }
        let mut set = |key: &str, v: Option<Value>| {
            if let Some(v) = v {
                map.insert(key.to_string(), v);
            }
        };
        set("n", self.n.map(Value::from));
        set("r", self.r.map(Value::from));
        set("alpha", self.alpha.map(Value::from));
        set("beta", self.beta.map(Value::from));
        set("theta_h", self.theta_h.map(Value::from));
        set("theta_k", self.theta_k.map(Value::from));
        set("variant", self.variant.clone().map(Value::from));
        set("t0", self.t0.map(Value::from));
        set("T", self.truncation.map(Value::from));
        set("m_reps", self.m_reps.map(Value::from));
        set("backend", self.backend.clone().map(Value::from));
        set("seed", seed.map(Value::from));
        DesignConfig::from_json_value(&Value::Object(map)).map_err(|e| config_failure(&e))
    }
}

impl ScheduleSource {
    fn load(&self) -> Result<BoundarySchedule, Failure> {
        match &self.schedule {
            Some(path) => {
                if !self.design.is_empty() || self.calibration_seed.is_some() {
                    return Err(Failure::invalid("--schedule: cannot be combined with design flags"));
                }
                sio::load_schedule(path).map_err(|e| Failure::invalid(format!("--schedule: {e}")))
            }
            None => {
                if self.design.is_empty() {
                    return Err(Failure::invalid(
                        "--schedule: pass a schedule file or a design (--config or --n ...)",
                    ));
                }
                Ok(calibrate(&self.design.resolve(self.calibration_seed)?)?)
            }
        }
    }
}

/// `(json, csv)` output paths for an `--out` argument.
fn output_paths(out: &Path) -> (PathBuf, PathBuf) {
    if out.extension().is_some_and(|e| e == "csv") {
        (out.with_extension("json"), out.to_path_buf())
    } else {
        (out.to_path_buf(), out.with_extension("csv"))
    }
}

fn print_artifact<T: sio::Artifact>(artifact: &T) -> CmdResult {
    print!("{}", sio::artifact_to_string(artifact)?);
    Ok(())
}

fn evaluation_seed(schedule: &BoundarySchedule, seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| schedule.config.seed.wrapping_add(1))
}

fn cmd_calibrate(args: &CalibrateArgs) -> CmdResult {
    let config = args.design.resolve(args.seed)?;
    let schedule = calibrate(&config)?;
    match &args.out {
        Some(out) => {
            let (json, csv) = output_paths(out);
            sio::save_schedule(&json, &schedule)?;
            sio::save_csv(&csv, |w| sio::write_schedule_csv(&schedule, w))?;
            let manifest = RunManifest::new(&config)
                .with_artifact("schedule", json.display().to_string())
                .with_artifact("schedule_csv", csv.display().to_string());
            sio::save_artifact(&json.with_extension("manifest.json"), &manifest)?;
            eprintln!(
                "calibrated n = {} ({} stages) -> {}",
                config.n,
                schedule.rule.lower.len(),
                json.display()
            );
        }
        None => print_artifact(&schedule)?,
    }
    if let Some(ms) = &schedule.min_sample {
        if !ms.feasible {
            log::warn!("no minimum sample size reaches power {}; t_min = n", 1.0 - config.beta);
        }
    }
    if let Some(report) = &schedule.truncation {
        if !report.feasible {
            return Err(Failure {
                code: EXIT_INFEASIBLE,
                message: format!(
                    "--T: truncated design is infeasible: wrong-H probability {:.4} at m_K* exceeds beta = {}",
                    report.lower_error, config.beta
                ),
            });
        }
    }
    Ok(())
}

fn cmd_oc(args: &OcArgs) -> CmdResult {
    let schedule = args.source.load()?;
    let grid = parse_grid(&args.grid, schedule.n()).map_err(|e| Failure::invalid(format!("--grid: {e}")))?;
    let seed = evaluation_seed(&schedule, args.seed);
    if args.reps == 0 {
        return Err(Failure::invalid("--reps: must be at least 1"));
    }
    if seed == schedule.config.seed {
        return Err(Failure::invalid(format!("--seed: {}", CoreError::SeedReuse(seed))));
    }
    let points = oc_curve(&schedule, &grid, args.reps, seed)?;
    let report = validate_grid(&schedule, &grid, args.reps, seed)?;
    let max_err = |region: Region| {
        points
            .iter()
            .filter(|p| p.region == region)
            .map(|p| p.error_prob)
            .fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.max(e))))
    };
    eprintln!(
        "max error: H region {}, K region {}; E[tau] peaks at m = {}; {} flagged point(s)",
        max_err(Region::H).map_or("-".into(), |e| format!("{e:.4}")),
        max_err(Region::K).map_or("-".into(), |e| format!("{e:.4}")),
        expected_tau_peak(&points)?,
        report.flags.len()
    );
    let export = OcExport::new(&schedule, seed, args.reps, points);
    match &args.out {
        Some(out) => {
            let (json, csv) = output_paths(out);
            sio::save_artifact(&json, &export)?;
            sio::save_csv(&csv, |w| sio::write_oc_csv(&export.points, w))?;
        }
        None => print_artifact(&export)?,
    }
    Ok(())
}

fn parse_synth(spec: &str) -> Result<FinitePopulation, Failure> {
    let bad = || Failure::invalid(format!("--synth: expected `n,m`, got `{spec}`"));
    let (n, m) = spec.split_once(',').ok_or_else(bad)?;
    let n: u32 = n.trim().parse().map_err(|_| bad())?;
    let m: u32 = m.trim().parse().map_err(|_| bad())?;
    synth_population(n, m).map_err(|e| Failure::invalid(format!("--synth: {e}")))
}

fn load_data(path: &Path, column: Option<&str>) -> Result<FinitePopulation, Failure> {
    sio::load_population_csv(path, column).map_err(|e| Failure::invalid(format!("--data: {e}")))
}

fn cmd_replay(args: &ReplayArgs) -> CmdResult {
    let schedule = args.source.load()?;
    let pop = match (&args.data, &args.synth) {
        (Some(path), _) => load_data(path, args.column.as_deref())?,
        (None, Some(spec)) => parse_synth(spec)?,
        (None, None) => return Err(Failure::invalid("--data: pass a population file or --synth n,m")),
    };
    if pop.size() != schedule.n() {
        return Err(Failure::invalid(format!(
            "--data: population has {} items but the schedule was calibrated for n = {}",
            pop.size(),
            schedule.n()
        )));
    }
    let seed = evaluation_seed(&schedule, args.seed);
    if seed == schedule.config.seed {
        return Err(Failure::invalid(format!("--seed: {}", CoreError::SeedReuse(seed))));
    }
    if args.reps == 0 {
        return Err(Failure::invalid("--reps: must be at least 1"));
    }
    let summary = replay(&pop, &schedule, args.reps, seed)?;
    eprintln!(
        "n = {}, m = {}: mean tau {:.1}, median {}, incorrect {:.1}%, inspected {:.1}%",
        summary.n, summary.m, summary.mean_tau, summary.median_tau, summary.incorrect_pct, summary.inspected_pct
    );
    let export = ReplayExport::new(&schedule, seed, summary);
    match &args.out {
        Some(out) => {
            let (json, csv) = output_paths(out);
            sio::save_artifact(&json, &export)?;
            sio::save_csv(&csv, |w| sio::write_histogram_csv(&export.summary, w))?;
        }
        None => print_artifact(&export)?,
    }
    Ok(())
}

fn label<T: serde::Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(Value::String(s)) => s,
        _ => String::new(),
    }
}

fn cmd_run(args: &RunArgs) -> CmdResult {
    let schedule = args.source.load()?;
    let pop = load_data(&args.data, args.column.as_deref())?;
    if pop.size() != schedule.n() {
        return Err(Failure::invalid(format!(
            "--data: population has {} items but the schedule was calibrated for n = {}",
            pop.size(),
            schedule.n()
        )));
    }
    let path = match args.order_seed {
        Some(seed) => seqaudit_core::sample_path(&pop, replication_seed(seed, stream::ORDER, 0)),
        None => DeviationPath::from_items(pop.items(), 0),
    };
    let mut session = new_session(&schedule, schedule.config.variant)?;
    for x in path.increments() {
        if session.observe(x)? != Status::Continue {
            break;
        }
    }
    let outcome = session.outcome().expect("a full path always reaches a decision");
    eprintln!(
        "{} at tau = {} ({}); {} deviation(s) observed",
        label(&session.status()),
        outcome.tau,
        label(&outcome.source),
        session.count()
    );
    let export = SessionExport::new(&schedule, &session);
    match &args.out {
        Some(out) => sio::save_artifact(out, &export)?,
        None => print_artifact(&export)?,
    }
    Ok(())
}

fn cmd_serve(args: &ServeArgs) -> CmdResult {
    let state = match &args.state_dir {
        Some(dir) => AppState::open(dir).map_err(|e| Failure::invalid(format!("--state-dir: {e}")))?,
        None => AppState::ephemeral(),
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::invalid(e.to_string()))?;
    runtime
        .block_on(service::serve(SocketAddr::new(args.host, args.port), state))
        .map_err(|e| Failure::invalid(format!("--port: {e}")))
}

/// Runs a parsed command.
pub fn execute(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Oc(a) => cmd_oc(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Run(a) => cmd_run(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}
