//! `pricelab`: train pricing agents, evaluate checkpoints and print market
//! benchmarks.

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pricelab::checkpoint::{self, CheckpointError};
use pricelab::evalkit::{
    equilibrium_gain_correlation, find_fixed_points, gain_table, impulse_response_stats, percentile, phase_portrait,
    AgentPolicy, DeviationConfig, DeviationPrice, DeviationResult, PricingPolicy, BOOTSTRAP_RESAMPLES,
};
use pricelab::market::Market;
use pricelab::orchestrator::{
    convergence_verdict, csv_header, diagnostics_json, Checkpoint, DiagRecord, Precision, Session, SessionConfig,
    SessionError, SessionSink, StepRecord,
};
use pricelab::Scalar;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ConfigError;

const MANIFEST_SCHEMA: u32 = 1;
const REPORT_SCHEMA: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{failed} of {total} seeds failed; see the manifest")]
    Partial { failed: usize, total: usize },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Partial { .. } => 3,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(
    name = "pricelab",
    version,
    about = "Average-reward soft actor-critic agents in a repeated Bertrand market"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one session per seed.
    Train(TrainArgs),
    /// Deviation experiments on saved checkpoints.
    Evaluate(EvaluateArgs),
    /// Phase portraits of the joint mean-policy map (duopolies only).
    Phase(PhaseArgs),
    /// Print Nash and monopoly benchmarks of a market.
    Benchmarks(BenchmarksArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat TOML config file; defaults apply when omitted.
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lambda_actor=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, steps: Option<u64>) -> Result<SessionConfig, CliError> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut overrides = self
            .overrides
            .iter()
            .map(|o| config::parse_override(o))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(s) = steps {
            overrides.push(("steps".into(), toml::Value::Integer(s as i64)));
        }
        Ok(config::build(&text, &overrides)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Seeds: `0..4` (inclusive), `1,5,9` or a single number.
    #[arg(long, default_value = "0")]
    seeds: String,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Run length, overriding the config.
    #[arg(long)]
    steps: Option<u64>,
    /// Sessions trained concurrently (0: one per core).
    #[arg(long, env = "PRICELAB_JOBS", default_value_t = 0)]
    jobs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Filter {
    /// Every session.
    All,
    /// Only sessions in which no agent has a profitable deviation.
    Nash,
}

#[derive(Args)]
struct EvaluateArgs {
    run_dir: PathBuf,
    /// Checkpoint step; every saved step when omitted.
    #[arg(long)]
    checkpoint: Option<u64>,
    /// `best-response` or a fixed price forced on the deviator.
    #[arg(long, default_value = "best-response", value_parser = parse_deviation_price)]
    deviation_price: DeviationPrice,
    #[arg(long, value_enum, default_value_t = Filter::All)]
    filter: Filter,
    /// Report directory (default `<RUN_DIR>/eval`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "PRICELAB_JOBS", default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct PhaseArgs {
    run_dir: PathBuf,
    /// Checkpoint step; the last saved step when omitted.
    #[arg(long)]
    checkpoint: Option<u64>,
    #[arg(long, default_value_t = 30)]
    grid: usize,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    /// Convergence threshold on the step magnitude, also the fixed-point tolerance.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Report directory (default `<RUN_DIR>/phase`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchmarksArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

fn parse_deviation_price(s: &str) -> Result<DeviationPrice, String> {
    if s == "best-response" {
        return Ok(DeviationPrice::BestResponse);
    }
    match s.parse::<f64>() {
        Ok(p) if p.is_finite() => Ok(DeviationPrice::Fixed(p)),
        _ => Err(format!("expected 'best-response' or a price, got '{s}'")),
    }
}

/// `a..b` is inclusive at both ends.
fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Usage(format!("cannot parse seeds '{s}'; use 0..4, 1,5,9 or 7"));
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|x| x.trim().parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?
    };
    let mut unique = seeds.clone();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() != seeds.len() {
        return Err(CliError::Usage(format!("duplicate seeds in '{s}'")));
    }
    Ok(seeds)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(runtime)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------- train

#[derive(Debug, Serialize, Deserialize)]
struct FailedSeed {
    seed: u64,
    error: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SeedTiming {
    seed: u64,
    wall_seconds: f64,
    ms_per_step: f64,
}

/// Record of a training run. Timings are the only fields that vary
/// between identical reruns.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    schema_version: u32,
    tool_version: String,
    config: SessionConfig,
    config_hash: String,
    seeds: Vec<u64>,
    artifacts: Vec<String>,
    failed_seeds: Vec<FailedSeed>,
    timings: Vec<SeedTiming>,
}

/// Streams a session to disk: checkpoints as they occur, the CSV log and
/// diagnostics at the end.
struct DiskSink {
    dir: PathBuf,
    seed_dir: String,
    csv: String,
    diagnostics: Vec<DiagRecord>,
    artifacts: Vec<String>,
}

impl<S: Scalar> SessionSink<S> for DiskSink {
    fn on_step(&mut self, record: &StepRecord<S>, session: &Session<S>) -> Result<(), SessionError> {
        self.csv.push_str(&record.csv_row());
        self.diagnostics.extend(session.diag_records(record));
        Ok(())
    }

    fn on_checkpoint(&mut self, ckpt: Checkpoint<S>) -> Result<(), SessionError> {
        let name = format!("checkpoint_{}.bin", ckpt.step);
        fs::write(self.dir.join(&name), checkpoint::encode(&ckpt))?;
        self.artifacts.push(format!("{}/{name}", self.seed_dir));
        Ok(())
    }
}

fn train_seed<S: Scalar>(config: SessionConfig, out: &Path) -> Result<Vec<String>, SessionError> {
    let seed_dir = format!("seed_{}", config.seed);
    let dir = out.join(&seed_dir);
    fs::create_dir_all(&dir)?;
    let mut session = Session::<S>::new(config)?;
    let mut sink = DiskSink {
        dir: dir.clone(),
        seed_dir: seed_dir.clone(),
        csv: csv_header(session.n()),
        diagnostics: Vec::new(),
        artifacts: Vec::new(),
    };
    let end = session.config.total_steps;
    session.run_until(end, &mut sink)?;
    fs::write(dir.join("log.csv"), &sink.csv)?;
    fs::write(dir.join("diagnostics.json"), diagnostics_json(&sink.diagnostics))?;
    let mut artifacts = vec![format!("{seed_dir}/log.csv"), format!("{seed_dir}/diagnostics.json")];
    artifacts.extend(sink.artifacts);
    Ok(artifacts)
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let config = args.config.load(args.steps)?;
    let seeds = parse_seeds(&args.seeds)?;
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    eprintln!(
        "training {} session(s) of {} steps into {}",
        seeds.len(),
        config.total_steps,
        args.out.display()
    );
    let outcomes: Vec<(u64, Result<Vec<String>, String>, f64)> = pool(args.jobs)?.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let cfg = SessionConfig { seed, ..config.clone() };
                let start = Instant::now();
                let res = match cfg.precision {
                    Precision::F32 => train_seed::<f32>(cfg, &args.out),
                    Precision::F64 => train_seed::<f64>(cfg, &args.out),
                };
                let secs = start.elapsed().as_secs_f64();
                match &res {
                    Ok(_) => eprintln!("seed {seed}: done in {secs:.1}s"),
                    Err(e) => eprintln!("seed {seed}: failed: {e}"),
                }
                (seed, res.map_err(|e| e.to_string()), secs)
            })
            .collect()
    });
    let mut manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.hash(),
        config: config.clone(),
        seeds: seeds.clone(),
        artifacts: Vec::new(),
        failed_seeds: Vec::new(),
        timings: Vec::new(),
    };
    for (seed, res, secs) in outcomes {
        match res {
            Ok(files) => manifest.artifacts.extend(files),
            Err(error) => manifest.failed_seeds.push(FailedSeed { seed, error }),
        }
        manifest.timings.push(SeedTiming {
            seed,
            wall_seconds: secs,
            ms_per_step: 1e3 * secs / config.total_steps.max(1) as f64,
        });
    }
    let json = serde_json::to_string_pretty(&manifest).map_err(runtime)?;
    write_file(&args.out.join(MANIFEST), json + "\n")?;
    match manifest.failed_seeds.len() {
        0 => Ok(()),
        f if f == seeds.len() => Err(CliError::Runtime(format!("all {f} seeds failed; see the manifest"))),
        failed => Err(CliError::Partial {
            failed,
            total: seeds.len(),
        }),
    }
}

// ----------------------------------------------------------- checkpoints

fn read_manifest(run_dir: &Path) -> Result<RunManifest, CliError> {
    let path = run_dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == MANIFEST_SCHEMA as u64 => {}
        other => {
            return Err(CliError::Runtime(format!(
                "{}: unsupported manifest schema {other:?}",
                path.display()
            )))
        }
    }
    serde_json::from_value(value).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// Saved steps of each successful seed, from the files on disk.
fn available_steps(run_dir: &Path, seed: u64) -> Result<Vec<u64>, CliError> {
    let dir = run_dir.join(format!("seed_{seed}"));
    let mut steps: Vec<u64> = fs::read_dir(&dir)
        .map_err(|e| io_err(&dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("checkpoint_")?.strip_suffix(".bin")?.parse().ok()
        })
        .collect();
    steps.sort_unstable();
    Ok(steps)
}

fn checkpoint_path(run_dir: &Path, seed: u64, step: u64) -> PathBuf {
    run_dir
        .join(format!("seed_{seed}"))
        .join(format!("checkpoint_{step}.bin"))
}

fn trained_seeds(manifest: &RunManifest) -> Vec<u64> {
    manifest
        .seeds
        .iter()
        .copied()
        .filter(|s| !manifest.failed_seeds.iter().any(|f| f.seed == *s))
        .collect()
}

/// Steps to evaluate: the requested one (which must exist for every seed)
/// or every step common to all seeds.
fn select_steps(run_dir: &Path, seeds: &[u64], requested: Option<u64>) -> Result<Vec<u64>, CliError> {
    let mut common: Option<Vec<u64>> = None;
    for &seed in seeds {
        let steps = available_steps(run_dir, seed)?;
        common = Some(match common {
            None => steps,
            Some(c) => c.into_iter().filter(|s| steps.contains(s)).collect(),
        });
    }
    let common = common.unwrap_or_default();
    let list = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(", ");
    match requested {
        Some(step) if common.contains(&step) => Ok(vec![step]),
        Some(step) => Err(CliError::Usage(format!(
            "no checkpoint at step {step}; available steps: {}",
            if common.is_empty() {
                "none".into()
            } else {
                list(&common)
            }
        ))),
        None if common.is_empty() => Err(CliError::Usage(format!("no checkpoints in {}", run_dir.display()))),
        None => Ok(common),
    }
}

fn load<S: Scalar>(path: &Path) -> Result<Checkpoint<S>, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    checkpoint::decode::<S>(&bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn scalar_bytes(path: &Path) -> Result<usize, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let header =
        checkpoint::peek_header(&bytes).map_err(|e: CheckpointError| runtime(format!("{}: {e}", path.display())))?;
    Ok(header.scalar_bytes)
}

// ------------------------------------------------------------- evaluate

/// Evaluation of one session at one checkpoint, in double precision.
struct SessionEval {
    seed: u64,
    step: u64,
    recent_gain: f64,
    nash_convergent: bool,
    results: Vec<DeviationResult<f64>>,
}

fn widen<S: Scalar>(rows: &[Vec<S>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().map(|x| x.as_f64()).collect()).collect()
}

fn widen_result<S: Scalar>(r: &DeviationResult<S>) -> DeviationResult<f64> {
    DeviationResult {
        deviator: r.deviator,
        settle_path: widen(&r.settle_path),
        pre_prices: r.pre_prices.iter().map(|x| x.as_f64()).collect(),
        deviation_path: widen(&r.deviation_path),
        deviation_profits: widen(&r.deviation_profits),
        baseline_path: widen(&r.baseline_path),
        baseline_profits: widen(&r.baseline_profits),
        gain: r.gain,
        profitable: r.profitable,
    }
}

fn evaluate_typed<S: Scalar>(path: &Path, seed: u64, cfg: &DeviationConfig) -> Result<SessionEval, CliError> {
    let ckpt = load::<S>(path)?;
    let verdict = convergence_verdict(&ckpt, cfg).map_err(|e| runtime(format!("seed {seed}: {e}")))?;
    Ok(SessionEval {
        seed,
        step: ckpt.step,
        recent_gain: ckpt.recent_gain(),
        nash_convergent: verdict.nash_convergent,
        results: verdict.results.iter().map(widen_result).collect(),
    })
}

fn evaluate_one(path: &Path, seed: u64, cfg: &DeviationConfig) -> Result<SessionEval, CliError> {
    match scalar_bytes(path)? {
        4 => evaluate_typed::<f32>(path, seed, cfg),
        8 => evaluate_typed::<f64>(path, seed, cfg),
        b => Err(runtime(format!("{}: unsupported {b}-byte scalars", path.display()))),
    }
}

fn quartiles(values: &[f64]) -> serde_json::Value {
    if values.is_empty() {
        return serde_json::Value::Null;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    serde_json::json!({
        "count": v.len(),
        "mean": v.iter().sum::<f64>() / v.len() as f64,
        "p5": percentile(&v, 0.05),
        "p25": percentile(&v, 0.25),
        "p50": percentile(&v, 0.5),
        "p75": percentile(&v, 0.75),
        "p95": percentile(&v, 0.95),
    })
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let manifest = read_manifest(&args.run_dir)?;
    let seeds = trained_seeds(&manifest);
    let steps = select_steps(&args.run_dir, &seeds, args.checkpoint)?;
    let cfg = DeviationConfig {
        price: args.deviation_price,
        ..DeviationConfig::default()
    };
    let jobs: Vec<(u64, u64)> = steps.iter().flat_map(|&t| seeds.iter().map(move |&s| (t, s))).collect();
    let evals: Vec<SessionEval> = pool(args.jobs)?.install(|| {
        jobs.par_iter()
            .map(|&(step, seed)| evaluate_one(&checkpoint_path(&args.run_dir, seed, step), seed, &cfg))
            .collect::<Result<_, _>>()
    })?;

    let out = args.out.clone().unwrap_or_else(|| args.run_dir.join("eval"));
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let kept: Vec<&SessionEval> = evals
        .iter()
        .filter(|e| args.filter == Filter::All || e.nash_convergent)
        .collect();

    let mut gains_csv = String::from("session,agent,checkpoint,gain,profitable\n");
    let mut groups: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for e in &kept {
        for r in &e.results {
            let _ = writeln!(
                gains_csv,
                "{},{},{},{},{}",
                e.seed, r.deviator, e.step, r.gain, r.profitable
            );
            groups.entry(e.step).or_default().push(r.gain);
        }
    }
    write_file(&out.join("gains.csv"), &gains_csv)?;

    let mut impulse_csv = String::from("checkpoint,role,step,count,p5,p25,p50,p75,p95\n");
    let mut impulse_empty = BTreeMap::new();
    for &step in &steps {
        let pooled: Vec<DeviationResult<f64>> = kept
            .iter()
            .filter(|e| e.step == step)
            .flat_map(|e| e.results.iter().cloned())
            .collect();
        let report = impulse_response_stats(&pooled);
        impulse_empty.insert(step, report.empty);
        for row in &report.rows {
            let role = serde_json::to_value(row.role).map_err(runtime)?;
            let _ = writeln!(
                impulse_csv,
                "{step},{},{},{},{},{},{},{},{}",
                role.as_str().unwrap_or_default(),
                row.step,
                row.count,
                row.p5,
                row.p25,
                row.p50,
                row.p75,
                row.p95
            );
        }
    }
    write_file(&out.join("impulse.csv"), &impulse_csv)?;

    let table = gain_table(&groups, BOOTSTRAP_RESAMPLES, manifest.config.seed).ok();
    let mut per_checkpoint = Vec::new();
    for &step in &steps {
        let at: Vec<&SessionEval> = evals.iter().filter(|e| e.step == step).collect();
        let nash = at.iter().filter(|e| e.nash_convergent).count();
        let delta: Vec<f64> = at.iter().map(|e| e.recent_gain).collect();
        let pairs: Vec<(bool, f64)> = at.iter().map(|e| (e.nash_convergent, e.recent_gain)).collect();
        per_checkpoint.push(serde_json::json!({
            "checkpoint": step,
            "sessions": at.len(),
            "nash_convergent": nash,
            "nash_share": nash as f64 / at.len().max(1) as f64,
            "delta": quartiles(&delta),
            "equilibrium_gain_correlation": equilibrium_gain_correlation(&pairs).ok(),
            "sessions_kept": kept.iter().filter(|e| e.step == step).count(),
            "impulse_empty": impulse_empty.get(&step),
        }));
    }
    let summary = serde_json::json!({
        "schema_version": REPORT_SCHEMA,
        "config_hash": manifest.config_hash,
        "filter": args.filter,
        "deviation_price": args.deviation_price,
        "checkpoints": per_checkpoint,
        "gain_table": table.map(|t| t.rows),
    });
    write_file(
        &out.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(runtime)? + "\n",
    )?;
    eprintln!("wrote gains.csv, impulse.csv and summary.json to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------- phase

fn phase_typed<S: Scalar>(path: &Path, seed: u64, args: &PhaseArgs) -> Result<serde_json::Value, CliError> {
    let ckpt = load::<S>(path)?;
    let market = Market {
        params: ckpt.config.market.cast::<S>(),
        bench: ckpt.bench.clone(),
    };
    let bounds = market.bounds();
    let policies: Vec<AgentPolicy<'_, S>> = ckpt.agents.iter().map(|agent| AgentPolicy { agent, bounds }).collect();
    let dyn_policies: Vec<&dyn PricingPolicy<S>> = policies.iter().map(|p| p as &dyn PricingPolicy<S>).collect();
    let mut portrait = phase_portrait(&market, &dyn_policies, args.grid, args.max_iters, args.tol)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    portrait.fixed_points = find_fixed_points(&portrait, args.tol, &market.bench);
    let cycles: BTreeMap<usize, usize> =
        portrait
            .trajectories
            .iter()
            .filter_map(|t| t.cycle)
            .fold(BTreeMap::new(), |mut m, p| {
                *m.entry(p).or_default() += 1;
                m
            });
    Ok(serde_json::json!({
        "schema_version": REPORT_SCHEMA,
        "seed": seed,
        "checkpoint": ckpt.step,
        "grid": args.grid,
        "tol": args.tol,
        "p_nash": market.bench.p_nash.iter().map(|x| x.as_f64()).collect::<Vec<_>>(),
        "p_mono": market.bench.p_mono.iter().map(|x| x.as_f64()).collect::<Vec<_>>(),
        "cycles": cycles,
        "portrait": portrait,
    }))
}

fn cmd_phase(args: &PhaseArgs) -> Result<(), CliError> {
    if args.grid < 2 {
        return Err(CliError::Usage("--grid must be at least 2".into()));
    }
    let manifest = read_manifest(&args.run_dir)?;
    if manifest.config.market.n != 2 {
        return Err(CliError::Usage(format!(
            "full phase portraits need two firms, this run has {}",
            manifest.config.market.n
        )));
    }
    let seeds = trained_seeds(&manifest);
    let step = match args.checkpoint {
        Some(s) => select_steps(&args.run_dir, &seeds, Some(s))?[0],
        None => *select_steps(&args.run_dir, &seeds, None)?.last().expect("non-empty"),
    };
    let out = args.out.clone().unwrap_or_else(|| args.run_dir.join("phase"));
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    for seed in seeds {
        let path = checkpoint_path(&args.run_dir, seed, step);
        let report = match scalar_bytes(&path)? {
            4 => phase_typed::<f32>(&path, seed, args)?,
            8 => phase_typed::<f64>(&path, seed, args)?,
            b => return Err(runtime(format!("{}: unsupported {b}-byte scalars", path.display()))),
        };
        let file = out.join(format!("portrait_seed_{seed}_step_{step}.json"));
        write_file(&file, serde_json::to_string(&report).map_err(runtime)? + "\n")?;
        eprintln!("wrote {}", file.display());
    }
    Ok(())
}

// ----------------------------------------------------------- benchmarks

fn cmd_benchmarks(args: &BenchmarksArgs) -> Result<(), CliError> {
    let config = args.config.load(None)?;
    let market = Market::<f64>::new(config.market).map_err(runtime)?;
    let b = &market.bench;
    let row = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ");
    println!("p_nash   {}", row(&b.p_nash));
    println!("p_mono   {}", row(&b.p_mono));
    println!("pi_nash  {}", row(&b.pi_nash));
    println!("pi_mono  {}", row(&b.pi_mono));
    println!("p_low    {:.6}", b.p_low);
    println!("p_high   {:.6}", b.p_high);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Phase(a) => cmd_phase(a),
        Command::Benchmarks(a) => cmd_benchmarks(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
