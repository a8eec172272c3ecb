//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 solver or simulation error, 2 usage error,
//! 3 I/O error, 4 invalid scenario.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use thiserror::Error;

use crate::cave::{cave_run, StepSchedule};
use crate::cop::{cop_run, write_placement_csv, PlacementState};
use crate::model::{generate_scenario, validate, Endpoint, Scenario, ScenarioParams, SCENARIO_FORMAT};
use crate::oracle::{brute_force_cavecop, OracleError, SmallInstance};
use crate::sim::{cav_placement, run_policy, summarize_tail, write_metrics_csv, PolicyKind, SimRun};

const OVERRIDE_HELP: &str = "\
Overrides (--set KEY=VALUE, repeatable; lists are comma-separated):
  videos                  int    number of videos                  [generate]
  bitrates_mbps           list   per-level bitrates                [generate]
  video_duration_s        float  video length in seconds           [generate]
  zipf_shape              float  popularity exponent               [generate]
  fanouts                 list   children per node per tier        [generate]
  tier_storage_videos     list   storage per tier, in whole videos [generate]
  users_per_edge          int    users under each edge cache       [generate]
  device_weights          list   smartphone,laptop,tv weights      [generate]
  seed                    int    scenario seed
  storage_videos          float  every non-root budget, in whole videos
  access_capacity_mbps    float  every user access link
  backbone_capacity_mbps  float  every cache-to-cache link
  stall_utility           float  U(0) for every user
  duration_ticks          int    simulated ticks
  tick_seconds            float  tick length
  cop_period_ticks        int    ticks between placement rounds
  placement_apply_tick    int    tick at which placement is applied
  averaging_window        int    primal averaging window
  cave_h0, cave_gamma     float  selection step h0 / (1+t)^gamma
  cop_h0, cop_gamma       float  placement step h0 / (1+t)^gamma

Exit codes: 0 ok, 1 solver error, 2 usage, 3 I/O, 4 invalid scenario.";

/// Keys accepted by `--set`. Keys marked `true` apply only when generating.
const OVERRIDE_KEYS: &[(&str, bool)] = &[
    ("videos", true),
    ("bitrates_mbps", true),
    ("video_duration_s", true),
    ("zipf_shape", true),
    ("fanouts", true),
    ("tier_storage_videos", true),
    ("users_per_edge", true),
    ("device_weights", true),
    ("seed", false),
    ("storage_videos", false),
    ("access_capacity_mbps", false),
    ("backbone_capacity_mbps", false),
    ("stall_utility", false),
    ("duration_ticks", false),
    ("tick_seconds", false),
    ("cop_period_ticks", false),
    ("placement_apply_tick", false),
    ("averaging_window", false),
    ("cave_h0", false),
    ("cave_gamma", false),
    ("cop_h0", false),
    ("cop_gamma", false),
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Module(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Module(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Invalid(_) => 4,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        source: io::Error::other(e),
    }
}

#[derive(Parser, Debug)]
#[command(name = "cavecop", version, about = "Cache-version selection and content placement solver and simulator")]
#[command(after_help = OVERRIDE_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug, Default)]
struct SetArgs {
    /// Scenario parameter override, KEY=VALUE.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a scenario file.
    #[command(after_help = OVERRIDE_HELP)]
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        videos: Option<usize>,
        /// Scenario JSON to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        set: SetArgs,
    },
    /// Run the selection solver on a fixed placement.
    #[command(after_help = OVERRIDE_HELP)]
    SolveCave {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        iterations: usize,
        #[arg(long, value_enum, default_value_t = BaselinePlacement::Root)]
        placement: BaselinePlacement,
        #[command(flatten)]
        set: SetArgs,
    },
    /// Run the placement solver and round its result.
    #[command(after_help = OVERRIDE_HELP)]
    SolveCop {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        #[command(flatten)]
        set: SetArgs,
    },
    /// Simulate one policy.
    #[command(after_help = OVERRIDE_HELP)]
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// cavecop, cavecav or greedycop.
        #[arg(long, value_parser = parse_policy)]
        policy: PolicyKind,
        #[arg(long)]
        out: PathBuf,
        /// Add per-link price columns to the metrics CSV.
        #[arg(long)]
        dump_lambda: bool,
        #[command(flatten)]
        set: SetArgs,
    },
    /// Simulate every policy on the same scenario.
    #[command(after_help = OVERRIDE_HELP)]
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_lambda: bool,
        #[command(flatten)]
        set: SetArgs,
    },
    /// Exhaustive optimum of a small scenario.
    #[command(after_help = OVERRIDE_HELP)]
    Oracle {
        #[arg(long)]
        scenario: PathBuf,
        #[command(flatten)]
        set: SetArgs,
    },
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    s.parse().map_err(|e: crate::sim::SimError| e.to_string())
}

/// Fixed placement used by `solve-cave`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BaselinePlacement {
    /// Only the root stores content.
    Root,
    /// Most popular videos, all versions, per cache budget.
    Cav,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommandKind {
    Generate,
    SolveCave,
    SolveCop,
    Simulate,
    Compare,
    Oracle,
}

impl CommandKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CommandKind::Generate => "generate",
            CommandKind::SolveCave => "solve-cave",
            CommandKind::SolveCop => "solve-cop",
            CommandKind::Simulate => "simulate",
            CommandKind::Compare => "compare",
            CommandKind::Oracle => "oracle",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: CommandKind,
    pub scenario_path: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Output directory, or the scenario file for `generate`.
    pub output: Option<PathBuf>,
    pub overrides: BTreeMap<String, String>,
    pub iterations: Option<usize>,
    pub policy: Option<PolicyKind>,
    pub placement: BaselinePlacement,
    pub dump_lambda: bool,
}

/// Outcome of parsing: either a run or text to print before exiting 0.
#[derive(Debug)]
pub enum Parsed {
    Run(RunConfig),
    Info(String),
}

pub fn parse_args<I, T>(argv: I) -> Result<Parsed, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => Ok(Parsed::Info(e.render().to_string())),
                _ => Err(CliError::Usage(e.render().to_string())),
            };
        }
    };
    let mut config = RunConfig {
        command: CommandKind::Generate,
        scenario_path: None,
        seed: None,
        output: None,
        overrides: BTreeMap::new(),
        iterations: None,
        policy: None,
        placement: BaselinePlacement::Root,
        dump_lambda: false,
    };
    let set = match cli.command {
        Cmd::Generate { seed, videos, out, set } => {
            config.seed = Some(seed);
            config.output = Some(out);
            if let Some(n) = videos {
                config.overrides.insert("videos".into(), n.to_string());
            }
            set
        }
        Cmd::SolveCave {
            scenario,
            out,
            iterations,
            placement,
            set,
        } => {
            config.command = CommandKind::SolveCave;
            config.scenario_path = Some(scenario);
            config.output = Some(out);
            config.iterations = Some(iterations);
            config.placement = placement;
            set
        }
        Cmd::SolveCop {
            scenario,
            out,
            iterations,
            set,
        } => {
            config.command = CommandKind::SolveCop;
            config.scenario_path = Some(scenario);
            config.output = Some(out);
            config.iterations = Some(iterations);
            set
        }
        Cmd::Simulate {
            scenario,
            policy,
            out,
            dump_lambda,
            set,
        } => {
            config.command = CommandKind::Simulate;
            config.scenario_path = Some(scenario);
            config.output = Some(out);
            config.policy = Some(policy);
            config.dump_lambda = dump_lambda;
            set
        }
        Cmd::Compare {
            scenario,
            out,
            dump_lambda,
            set,
        } => {
            config.command = CommandKind::Compare;
            config.scenario_path = Some(scenario);
            config.output = Some(out);
            config.dump_lambda = dump_lambda;
            set
        }
        Cmd::Oracle { scenario, set } => {
            config.command = CommandKind::Oracle;
            config.scenario_path = Some(scenario);
            set
        }
    };
    for item in set.set {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{item}` is not KEY=VALUE")))?;
        let key = key.trim();
        let Some(&(_, generate_only)) = OVERRIDE_KEYS.iter().find(|(k, _)| *k == key) else {
            return Err(CliError::Usage(format!("unknown override key `{key}` (see --help)")));
        };
        if generate_only && config.command != CommandKind::Generate {
            return Err(CliError::Usage(format!("override `{key}` only applies to generate")));
        }
        config.overrides.insert(key.to_string(), value.trim().to_string());
    }
    Ok(Parsed::Run(config))
}

fn bad_value(key: &str, value: &str) -> CliError {
    CliError::Usage(format!("invalid value `{value}` for override `{key}`"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| bad_value(key, value))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    value.split(',').map(|x| num(key, x.trim())).collect()
}

fn apply_schedule(schedule: &mut crate::model::Schedule, key: &str, value: &str) -> Result<bool, CliError> {
    let step = |s: &StepSchedule, h0: Option<f64>, gamma: Option<f64>| StepSchedule {
        h0: h0.unwrap_or(s.h0),
        gamma: gamma.unwrap_or(s.gamma),
    };
    match key {
        "duration_ticks" => schedule.duration_ticks = num(key, value)?,
        "tick_seconds" => schedule.tick_seconds = num(key, value)?,
        "cop_period_ticks" => schedule.cop_period_ticks = num(key, value)?,
        "placement_apply_tick" => schedule.placement_apply_tick = num(key, value)?,
        "averaging_window" => schedule.averaging_window = num(key, value)?,
        "cave_h0" => schedule.cave_step = step(&schedule.cave_step, Some(num(key, value)?), None),
        "cave_gamma" => schedule.cave_step = step(&schedule.cave_step, None, Some(num(key, value)?)),
        "cop_h0" => schedule.cop_step = step(&schedule.cop_step, Some(num(key, value)?), None),
        "cop_gamma" => schedule.cop_step = step(&schedule.cop_step, None, Some(num(key, value)?)),
        _ => return Ok(false),
    }
    Ok(true)
}

fn apply_to_params(params: &mut ScenarioParams, key: &str, value: &str) -> Result<(), CliError> {
    if apply_schedule(&mut params.schedule, key, value)? {
        return Ok(());
    }
    match key {
        "videos" => params.videos = num(key, value)?,
        "bitrates_mbps" => params.bitrates_mbps = list(key, value)?,
        "video_duration_s" => params.video_duration_s = num(key, value)?,
        "zipf_shape" => params.zipf_shape = num(key, value)?,
        "fanouts" => params.fanouts = list(key, value)?,
        "tier_storage_videos" => params.tier_storage_videos = list(key, value)?,
        "storage_videos" => {
            let m: f64 = num(key, value)?;
            params.tier_storage_videos = vec![m; params.fanouts.len()];
        }
        "users_per_edge" => params.users_per_edge = num(key, value)?,
        "device_weights" => {
            let w: Vec<f64> = list(key, value)?;
            params.device_weights = w.try_into().map_err(|_| bad_value(key, value))?;
        }
        "access_capacity_mbps" => params.access_capacity_mbps = num(key, value)?,
        "backbone_capacity_mbps" => params.backbone_capacity_mbps = num(key, value)?,
        "stall_utility" => params.stall_utility = num(key, value)?,
        "seed" => {}
        _ => unreachable!("keys are checked while parsing"),
    }
    Ok(())
}

fn apply_to_scenario(scenario: &mut Scenario, key: &str, value: &str) -> Result<(), CliError> {
    if apply_schedule(&mut scenario.schedule, key, value)? {
        return Ok(());
    }
    let root = scenario.topology.root();
    match key {
        "seed" => scenario.rng_seed = num(key, value)?,
        "storage_videos" => {
            let m: f64 = num(key, value)?;
            let size = scenario.catalog.real_versions().iter().map(|v| v.file_size_mb).sum::<f64>()
                / scenario.catalog.videos.max(1) as f64;
            for cache in scenario.topology.caches.iter_mut().filter(|c| Some(c.id) != root) {
                cache.storage_budget_mb = m * size;
            }
        }
        "access_capacity_mbps" | "backbone_capacity_mbps" => {
            let r: f64 = num(key, value)?;
            let access = key == "access_capacity_mbps";
            for link in &mut scenario.topology.links {
                let is_access = matches!(link.to, Endpoint::User(_)) || matches!(link.from, Endpoint::User(_));
                if is_access == access {
                    link.capacity_mbps = r;
                }
            }
        }
        "stall_utility" => {
            let u: f64 = num(key, value)?;
            for p in &mut scenario.users {
                p.stall_utility = u;
            }
        }
        _ => unreachable!("generate-only keys are rejected while parsing"),
    }
    Ok(())
}

fn load_scenario(config: &RunConfig) -> Result<Scenario, CliError> {
    let path = config
        .scenario_path
        .as_deref()
        .ok_or_else(|| CliError::Usage("--scenario is required".into()))?;
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut scenario =
        Scenario::from_json(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    for (k, v) in &config.overrides {
        apply_to_scenario(&mut scenario, k, v)?;
    }
    let violations = validate(&scenario);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(CliError::Invalid(format!("{}: {}", path.display(), list.join("; "))));
    }
    Ok(scenario)
}

fn output_dir(config: &RunConfig) -> Result<&Path, CliError> {
    let dir = config
        .output
        .as_deref()
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    Ok(dir)
}

fn write_manifest(dir: &Path, config: &RunConfig, scenario: &Scenario, outputs: &[String]) -> Result<(), CliError> {
    let manifest = json!({
        "format": SCENARIO_FORMAT,
        "tool": format!("cavecop {}", env!("CARGO_PKG_VERSION")),
        "command": config.command.as_str(),
        "scenario_path": config.scenario_path.as_ref().map(|p| p.display().to_string()),
        "scenario_seed": scenario.rng_seed,
        "overrides": config.overrides,
        "iterations": config.iterations,
        "policy": config.policy.map(|p| p.slug()),
        "placement": (config.command == CommandKind::SolveCave)
            .then(|| format!("{:?}", config.placement).to_lowercase()),
        "dump_lambda": config.dump_lambda,
        "schedule": scenario.schedule,
        "outputs": outputs,
    });
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&path, text).map_err(io_err(&path))
}

fn write_csv_rows<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(io::BufWriter::new(file));
    for row in rows {
        w.serialize(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_metrics(dir: &Path, run: &SimRun, dump_lambda: bool) -> Result<String, CliError> {
    let name = format!("metrics_{}.csv", run.policy.slug());
    let path = dir.join(&name);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    write_metrics_csv(io::BufWriter::new(file), run, dump_lambda).map_err(csv_err(&path))?;
    Ok(name)
}

/// Runs a parsed command and returns its stdout summary.
pub fn execute(config: &RunConfig) -> Result<String, CliError> {
    match config.command {
        CommandKind::Generate => {
            let mut params = ScenarioParams::default();
            for (k, v) in &config.overrides {
                apply_to_params(&mut params, k, v)?;
            }
            let seed = match config.overrides.get("seed") {
                Some(v) => num("seed", v)?,
                None => config.seed.unwrap_or(0),
            };
            let scenario = generate_scenario(&params, seed).map_err(|e| CliError::Invalid(e.to_string()))?;
            let path = config
                .output
                .as_deref()
                .ok_or_else(|| CliError::Usage("--out is required".into()))?;
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            fs::write(path, scenario.to_json()).map_err(io_err(path))?;
            Ok(format!(
                "wrote {}: {} caches, {} users, {} links, {} versions",
                path.display(),
                scenario.topology.caches.len(),
                scenario.users.len(),
                scenario.topology.links.len(),
                scenario.catalog.versions.len()
            ))
        }
        CommandKind::SolveCave => {
            let scenario = load_scenario(config)?;
            let dir = output_dir(config)?;
            let placement = match config.placement {
                BaselinePlacement::Root => PlacementState::root_only(&scenario.topology, &scenario.catalog),
                BaselinePlacement::Cav => cav_placement(&scenario),
            };
            let run = cave_run(&scenario, &placement, config.iterations.unwrap_or(2000))
                .map_err(|e| CliError::Module(e.to_string()))?;
            write_csv_rows(&dir.join("cave_trace.csv"), &run.trace)?;
            write_manifest(dir, config, &scenario, &["cave_trace.csv".into()])?;
            let last = run.trace.last().expect("at least one iteration");
            Ok(format!(
                "D_lambda={:.6} averaged_utility={:.6} last_utility={:.6} max_link_overload={:.6}",
                run.final_dual_value,
                run.average.utility(&scenario.users, &scenario.catalog),
                last.utility,
                last.max_link_overload
            ))
        }
        CommandKind::SolveCop => {
            let scenario = load_scenario(config)?;
            let dir = output_dir(config)?;
            let run = cop_run(&scenario, config.iterations.unwrap_or(100)).map_err(|e| CliError::Module(e.to_string()))?;
            write_csv_rows(&dir.join("cop_trace.csv"), &run.trace)?;
            let path = dir.join("placement.csv");
            let file = fs::File::create(&path).map_err(io_err(&path))?;
            write_placement_csv(io::BufWriter::new(file), &run.solver.pseudo, &run.placement, &scenario)
                .map_err(csv_err(&path))?;
            write_manifest(dir, config, &scenario, &["cop_trace.csv".into(), "placement.csv".into()])?;
            let stored: usize = scenario
                .topology
                .cache_ids()
                .filter(|&c| c != scenario.root())
                .map(|c| run.placement.stored_versions(c).count())
                .sum();
            let fractional = scenario
                .topology
                .cache_ids()
                .map(|c| run.solver.pseudo.fractional_count(c))
                .max()
                .unwrap_or(0);
            Ok(format!(
                "D_prime={:.6} fractional_utility={:.6} stored_versions={stored} max_fractional_per_cache={fractional}",
                run.final_dual_value,
                run.average.utility(&scenario.users, &scenario.catalog)
            ))
        }
        CommandKind::Simulate => {
            let scenario = load_scenario(config)?;
            let dir = output_dir(config)?;
            let policy = config.policy.ok_or_else(|| CliError::Usage("--policy is required".into()))?;
            let run = run_policy(&scenario, policy).map_err(|e| CliError::Module(e.to_string()))?;
            let name = write_metrics(dir, &run, config.dump_lambda)?;
            write_manifest(dir, config, &scenario, &[name])?;
            let last = run.rows.last().ok_or_else(|| CliError::Module("no ticks simulated".into()))?;
            Ok(format!(
                "policy={} final_utility={:.6} final_pct_stall={:.6}",
                policy.slug(),
                last.total_utility,
                last.pct_stall
            ))
        }
        CommandKind::Compare => {
            let scenario = load_scenario(config)?;
            let dir = output_dir(config)?;
            let runs: Vec<Result<SimRun, _>> = std::thread::scope(|scope| {
                let handles: Vec<_> = PolicyKind::ALL
                    .into_iter()
                    .map(|p| {
                        let scenario = &scenario;
                        scope.spawn(move || run_policy(scenario, p))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("policy run panicked")).collect()
            });
            let quarter = (scenario.schedule.duration_ticks / 4).max(1);
            let mut outputs = Vec::new();
            let mut lines = vec![format!("{:<10} {:>18} {:>14}", "policy", "mean_utility", "mean_pct_stall")];
            let mut summary = Vec::new();
            for run in runs {
                let run = run.map_err(|e| CliError::Module(e.to_string()))?;
                outputs.push(write_metrics(dir, &run, config.dump_lambda)?);
                let s = summarize_tail(&run, quarter);
                lines.push(format!(
                    "{:<10} {:>18.6} {:>14.6}",
                    s.policy.slug(),
                    s.mean_total_utility,
                    s.mean_pct_stall
                ));
                summary.push(json!({
                    "policy": s.policy.slug(),
                    "mean_total_utility": s.mean_total_utility,
                    "mean_pct_stall": s.mean_pct_stall,
                }));
            }
            let path = dir.join("summary.json");
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
            fs::write(&path, text).map_err(io_err(&path))?;
            outputs.push("summary.json".into());
            write_manifest(dir, config, &scenario, &outputs)?;
            Ok(lines.join("\n"))
        }
        CommandKind::Oracle => {
            let scenario = load_scenario(config)?;
            let instance = SmallInstance::new(scenario).map_err(|e| match e {
                OracleError::TooLarge(_) | OracleError::Invalid(_) => CliError::Invalid(e.to_string()),
                OracleError::Lp(_) => CliError::Module(e.to_string()),
            })?;
            let opt = brute_force_cavecop(&instance).map_err(|e| CliError::Module(e.to_string()))?;
            Ok(format!("integer_optimum={:.6} lp_bound={:.6}", opt.utility, opt.lp_bound))
        }
    }
}

/// Parses, executes and prints; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let result = parse_args(argv).and_then(|parsed| match parsed {
        Parsed::Info(text) => Ok(text.trim_end().to_string()),
        Parsed::Run(config) => execute(&config),
    });
    match result {
        Ok(summary) => {
            let mut out = io::stdout().lock();
            let _ = writeln!(out, "{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {}", e.to_string().trim_end());
            e.exit_code()
        }
    }
}
