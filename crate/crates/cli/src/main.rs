//! Command-line front end for the planner/simulator: run a scenario, sweep
//! communication-failure rates, validate a config, or re-count collisions
//! from a recorded trajectory log.
//!
//! Exit codes are scriptable: 0 = success, 1 = the simulation ran but faulted
//! (the record is still written, flagged `incomplete: true`), 2 = the
//! invocation or an input file was bad (parse errors carry line/column).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gbp_nav::metrics::{
    read_trajectories_csv, write_records_csv, write_trajectories_csv,
};
use gbp_nav::scenario::{self, write_aggregates_csv};
use gbp_nav::{
    Environment, MetricsRecord, RunOptions, ScenarioError, ScenarioSpec, TrajectoryRow, Vec2,
};

/// Seed fallback consulted when neither `--seed` nor the scenario file sets
/// one.
const SEED_ENV_VAR: &str = "GBP_SIM_SEED";

#[derive(Parser)]
#[command(
    name = "gbp-nav",
    version,
    about = "Multi-robot navigation: distributed belief-propagation planning over factor graphs"
)]
struct Cli {
    /// Worker threads for simulation (default: all cores). Results are
    /// identical for any thread count.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario; write its metrics record and trajectory log.
    Run {
        /// Scenario file (JSON).
        scenario: PathBuf,
        /// Output directory (created if absent).
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Seed override; wins over the scenario file and GBP_SIM_SEED.
        #[arg(long)]
        seed: Option<u64>,
        /// json writes record.json only; csv also writes record.csv.
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        /// Force global-path simplification on, whatever the scenario says.
        #[arg(long)]
        simplify: bool,
        /// Score deviation against the literal planned polyline even where a
        /// run would normally substitute the straight start-goal chord.
        #[arg(long)]
        ppd_literal: bool,
    },
    /// Run a communication-failure sweep: every gamma x runs-per-gamma grid
    /// cell, plus a per-gamma aggregate table.
    Sweep {
        /// Scenario file (JSON); its own gamma value is ignored.
        scenario: PathBuf,
        /// Output directory (created if absent).
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Comma-separated failure rates, e.g. 0,0.2,0.4.
        #[arg(long, value_delimiter = ',', value_name = "LIST")]
        gammas: Vec<f64>,
        /// Independent runs per gamma value.
        #[arg(long, default_value_t = 3, value_name = "N")]
        runs: usize,
        /// Base-seed override; per-run seeds are derived from it.
        #[arg(long)]
        seed: Option<u64>,
        /// Score deviation against the literal planned polyline.
        #[arg(long)]
        ppd_literal: bool,
    },
    /// Parse a scenario, resolve every knob, and load its map; print the
    /// resolved configuration as JSON.
    Validate {
        /// Scenario file (JSON).
        scenario: PathBuf,
    },
    /// Re-count collisions from a recorded run by brute-force replay of its
    /// trajectory log, and compare against the stored record.
    ReplayMetrics {
        /// Directory holding record.json and trajectories.csv from `run`.
        dir: PathBuf,
        /// Environment file; defaults to the record's environment path
        /// resolved against the current directory.
        #[arg(long, value_name = "FILE")]
        env: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: failed to size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }

    let outcome = match cli.command {
        Command::Run {
            scenario,
            out,
            seed,
            format,
            simplify,
            ppd_literal,
        } => cmd_run(&scenario, &out, seed, format, simplify, ppd_literal),
        Command::Sweep {
            scenario,
            out,
            gammas,
            runs,
            seed,
            ppd_literal,
        } => cmd_sweep(&scenario, &out, &gammas, runs, seed, ppd_literal),
        Command::Validate { scenario } => cmd_validate(&scenario),
        Command::ReplayMetrics { dir, env } => cmd_replay(&dir, env.as_deref()),
    };

    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", diagnose(&e));
            ExitCode::from(2)
        }
    }
}

/// Renders an error chain without repeating causes that a layer above already
/// embedded in its own message, and guarantees line/column diagnostics for
/// JSON parse failures.
fn diagnose(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if out.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    if let Some(json) = err.chain().find_map(|c| c.downcast_ref::<serde_json::Error>()) {
        if !out.contains("line ") {
            out.push_str(&format!(" (line {}, column {})", json.line(), json.column()));
        }
    }
    out
}

/// Seed precedence: `--seed` flag, then the scenario's own seed, then the
/// GBP_SIM_SEED environment variable, then the default of 0.
fn seed_override(flag: Option<u64>, spec: &ScenarioSpec) -> anyhow::Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    if spec.seed.is_some() {
        return Ok(None); // let the scenario's seed stand
    }
    match std::env::var(SEED_ENV_VAR) {
        Ok(raw) => {
            let seed = raw.trim().parse::<u64>().map_err(|_| {
                anyhow::anyhow!("{SEED_ENV_VAR} must be an unsigned integer, got {raw:?}")
            })?;
            Ok(Some(seed))
        }
        Err(_) => Ok(None),
    }
}

fn load_spec(path: &Path) -> anyhow::Result<ScenarioSpec> {
    ScenarioSpec::from_file(path)
        .map_err(|e| anyhow::Error::new(e).context(format!("cannot load {}", path.display())))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Writes a file without ever leaving a partial artifact behind: the bytes go
/// to a temp file in the same directory, then an atomic rename claims the
/// final name.
fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let dir = dir.unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| anyhow::anyhow!("output path {} has no file name", path.display()))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = fs::write(&tmp, bytes).and_then(|()| fs::rename(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| anyhow::anyhow!("cannot write {}: {e}", path.display()))
}

fn record_json(record: &MetricsRecord) -> anyhow::Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(record)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn cmd_run(
    scenario_path: &Path,
    out: &Path,
    seed: Option<u64>,
    format: Format,
    simplify: bool,
    ppd_literal: bool,
) -> anyhow::Result<u8> {
    let spec = load_spec(scenario_path)?;
    let opts = RunOptions {
        seed_override: seed_override(seed, &spec)?,
        simplify_override: if simplify { Some(true) } else { None },
        record_trajectories: true,
        ppd_literal,
    };
    let output = scenario::run_scenario(&spec, &base_dir(scenario_path), &opts)
        .map_err(anyhow::Error::new)?;

    fs::create_dir_all(out)
        .map_err(|e| anyhow::anyhow!("cannot create {}: {e}", out.display()))?;
    write_atomic(&out.join("record.json"), &record_json(&output.record)?)?;
    if format == Format::Csv {
        let mut csv = Vec::new();
        write_records_csv(std::slice::from_ref(&output.record), &mut csv)?;
        write_atomic(&out.join("record.csv"), &csv)?;
    }
    let rows = output.trajectories.unwrap_or_default();
    let mut traj = Vec::new();
    write_trajectories_csv(&rows, &mut traj)?;
    write_atomic(&out.join("trajectories.csv"), &traj)?;

    let r = &output.record;
    println!(
        "{}: {} robots spawned, {} finished, {} faulted, {} planning failures",
        r.scenario, r.spawned_robots, r.finished_robots, r.faulted_robots, r.planning_failures
    );
    println!(
        "collisions inter-robot {} environment {}; deviation rmse {:.4} +/- {:.4}",
        r.inter_robot_collisions, r.environment_collisions, r.ppd_rmse_mean, r.ppd_rmse_std
    );
    println!("wrote {}", out.join("record.json").display());
    if r.incomplete {
        eprintln!("simulation incomplete: see record.json");
        return Ok(1);
    }
    Ok(0)
}

fn cmd_sweep(
    scenario_path: &Path,
    out: &Path,
    gammas: &[f64],
    runs: usize,
    seed: Option<u64>,
    ppd_literal: bool,
) -> anyhow::Result<u8> {
    let spec = load_spec(scenario_path)?;
    let opts = RunOptions {
        seed_override: seed_override(seed, &spec)?,
        simplify_override: None,
        record_trajectories: false,
        ppd_literal,
    };
    let sweep = scenario::failure_sweep(&spec, &base_dir(scenario_path), gammas, runs, &opts)
        .map_err(anyhow::Error::new)?;

    fs::create_dir_all(out)
        .map_err(|e| anyhow::anyhow!("cannot create {}: {e}", out.display()))?;

    let mut succeeded = Vec::new();
    for run in &sweep.runs {
        match &run.result {
            Ok(record) => {
                let name = format!("record_g{}_r{}.json", run.gamma_index, run.run_index);
                write_atomic(&out.join(name), &record_json(record)?)?;
                succeeded.push(record.clone());
            }
            Err(message) => {
                eprintln!(
                    "run failed (gamma {} run {}): {message}",
                    run.gamma, run.run_index
                );
            }
        }
    }

    let mut runs_csv = Vec::new();
    write_records_csv(&succeeded, &mut runs_csv)?;
    write_atomic(&out.join("runs.csv"), &runs_csv)?;

    let mut agg_csv = Vec::new();
    write_aggregates_csv(&sweep.aggregates, &mut agg_csv)?;
    write_atomic(&out.join("aggregate.csv"), &agg_csv)?;

    for a in &sweep.aggregates {
        println!(
            "gamma {:.2}: inter-robot {:.2} +/- {:.2}, environment {:.2} +/- {:.2}, deviation {:.4} +/- {:.4} ({} runs, {} failed)",
            a.gamma,
            a.inter_robot_mean,
            a.inter_robot_std,
            a.environment_mean,
            a.environment_std,
            a.ppd_mean,
            a.ppd_std,
            a.runs,
            a.failed_runs,
        );
    }
    println!("wrote {}", out.join("aggregate.csv").display());

    if succeeded.is_empty() {
        eprintln!("every run failed");
        return Ok(1);
    }
    Ok(0)
}

fn cmd_validate(scenario_path: &Path) -> anyhow::Result<u8> {
    let spec = load_spec(scenario_path)?;
    let resolved = scenario::resolve(&spec, &RunOptions::default()).map_err(anyhow::Error::new)?;
    let env_path = base_dir(scenario_path).join(&resolved.environment);
    let env = Environment::from_file(&env_path, resolved.sdf_cell)
        .map_err(|e| anyhow::Error::new(ScenarioError::Env(e)))?;
    println!("{}", serde_json::to_string_pretty(&resolved)?);
    eprintln!(
        "ok: {} ({} obstacles, {} robots planned)",
        spec.name,
        env.obstacles.len(),
        spec.spawn.robot_count()
    );
    Ok(0)
}

fn cmd_replay(dir: &Path, env_flag: Option<&Path>) -> anyhow::Result<u8> {
    let record_path = dir.join("record.json");
    let record_text = fs::read_to_string(&record_path)
        .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", record_path.display()))?;
    let record: MetricsRecord = serde_json::from_str(&record_text)
        .map_err(|e| anyhow::Error::new(e).context(format!("bad record {}", record_path.display())))?;

    let traj_path = dir.join("trajectories.csv");
    let traj_text = fs::read_to_string(&traj_path)
        .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", traj_path.display()))?;
    let rows = read_trajectories_csv(&traj_text)
        .map_err(|e| anyhow::Error::new(e).context(format!("bad log {}", traj_path.display())))?;

    let env_path = env_flag
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&record.config.environment));
    let env = Environment::from_file(&env_path, record.config.sdf_cell)
        .map_err(|e| anyhow::Error::new(ScenarioError::Env(e)))?;

    let (inter, environment) = replay_collisions(&rows, &env, record.config.robot_radius);
    println!(
        "replayed collisions: inter-robot {inter} (recorded {}), environment {environment} (recorded {})",
        record.inter_robot_collisions, record.environment_collisions
    );
    if inter == record.inter_robot_collisions && environment == record.environment_collisions {
        println!("record matches the trajectory log");
        Ok(0)
    } else {
        eprintln!("MISMATCH between record and trajectory log");
        Ok(1)
    }
}

/// Brute-force edge-triggered collision recount over a trajectory log.
///
/// Rows are grouped into frames by timestamp; within each frame every robot
/// pair and every robot-obstacle pair is tested and a collision is counted on
/// each clear-to-contact transition, mirroring how the simulator counts.
fn replay_collisions(rows: &[TrajectoryRow], env: &Environment, radius: f64) -> (u64, u64) {
    use std::collections::HashMap;

    let mut inter = 0u64;
    let mut environment = 0u64;
    let mut pair_contact: HashMap<(usize, usize), bool> = HashMap::new();
    let mut env_contact: HashMap<(usize, usize), bool> = HashMap::new();

    let mut start = 0;
    for i in 1..=rows.len() {
        if i != rows.len() && rows[i].t == rows[start].t {
            continue;
        }
        let frame = &rows[start..i];
        start = i;
        for (a_idx, a) in frame.iter().enumerate() {
            let a_pos = Vec2::new(a.x, a.y);
            for b in &frame[a_idx + 1..] {
                let key = (a.robot_id.min(b.robot_id), a.robot_id.max(b.robot_id));
                let hit = (a_pos - Vec2::new(b.x, b.y)).norm() < 2.0 * radius;
                let was = pair_contact.insert(key, hit).unwrap_or(false);
                if hit && !was {
                    inter += 1;
                }
            }
            for (k, obstacle) in env.obstacles.iter().enumerate() {
                let hit = obstacle.signed_distance(a_pos) < radius;
                let was = env_contact.insert((a.robot_id, k), hit).unwrap_or(false);
                if hit && !was {
                    environment += 1;
                }
            }
        }
    }
    (inter, environment)
}
