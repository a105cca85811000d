//! `rial`: training, evaluation, demonstrations, teleop serving and
//! diagnostics for the planar visuomotor stack.
//!
//! Exit codes: 0 success, 1 user error, 2 internal fault.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rial_core::config::KvMap;
use rial_core::demos::{build_dataset, replay, DatasetSource, DemoDataset};
use rial_core::diagnostics::{gradcheck_suite, table};
use rial_core::eval::{evaluate, EvalConfig};
use rial_core::experiments::{run_experiment, Experiment, Scale};
use rial_core::sim2d::{RealityGapConfig, TaskSpec};
use rial_core::train::{checkpoint_config, finetune_action_drop, load_policy, read_metrics, run_training, RunConfig, RunPaths};
use rial_nnkit::{Checkpoint, NnError};
use rial_teleop::{bind, ServerConfig, TeleopError};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] rial_core::Error),
    #[error(transparent)]
    Teleop(#[from] TeleopError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Fault(String),
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        CliError::Core(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) | CliError::Teleop(TeleopError::Core(e)) => e.exit_code() as u8,
            CliError::Teleop(_) | CliError::Usage(_) => 1,
            CliError::Fault(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "rial", version, about = "Hybrid imitation and reinforcement learning on a planar arm")]
struct Cli {
    /// Log filter, for example `info` or `rial_core=debug`.
    #[arg(long, global = true, env = "RIAL_LOG", default_value = "info")]
    log: String,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy from a configuration file.
    Train(TrainArgs),
    /// Evaluate a checkpoint from random starts.
    Eval(EvalArgs),
    /// Continue a trained checkpoint with random action dropping.
    FinetuneDrop(FinetuneArgs),
    /// Build a demonstration dataset with the scripted expert or by teleop.
    RecordDemos(RecordArgs),
    /// Serve teleop sessions that record demonstrations.
    TeleopServe(ServeArgs),
    /// Step the simulator through a demonstration file and verify it.
    Replay(ReplayArgs),
    /// Finite-difference gradient checks of every layer and network.
    Gradcheck(GradcheckArgs),
    /// Emit learning curves of one or more runs as CSV.
    Plot(PlotArgs),
    /// Run a desk-scale learning experiment over several seeds.
    Experiment(ExperimentArgs),
}

/// Configuration sources shared by commands that build a run.
#[derive(Args)]
struct ConfigArgs {
    /// Key-value configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Master seed; overrides the file.
    #[arg(long, env = "RIAL_SEED")]
    seed: Option<u64>,
    /// Rollout worker count; overrides the file.
    #[arg(long, env = "RIAL_WORKERS")]
    workers: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<KvMap> {
        let mut kv = match &self.config {
            Some(p) => KvMap::load(p)?,
            None => KvMap::new(),
        };
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{s}`")))?;
            kv.set(k.trim(), v.trim());
        }
        if let Some(s) = self.seed {
            kv.set("seed", s);
        }
        if let Some(w) = self.workers {
            kv.set("ppo.n_workers", w);
        }
        Ok(kv)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory; defaults to `runs/<config name>`.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Continue from the directory's latest checkpoint.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct GapArgs {
    /// Observation-rate holding and noise at their default rates.
    #[arg(long)]
    reality_gap: bool,
    /// Probability of repeating the previous action instead of the new one.
    #[arg(long, value_name = "P")]
    action_drop: Option<f64>,
    #[arg(long)]
    visual_randomization: bool,
    #[arg(long)]
    dynamics_randomization: bool,
}

impl GapArgs {
    fn build(&self) -> Result<RealityGapConfig> {
        let mut g = if self.reality_gap {
            RealityGapConfig::default()
        } else {
            RealityGapConfig::off()
        };
        if let Some(p) = self.action_drop {
            g.action_drop_prob = p;
        }
        g.visual_randomization |= self.visual_randomization;
        g.dynamics_randomization |= self.dynamics_randomization;
        g.validate()?;
        Ok(g)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task to evaluate on; defaults to the checkpoint's.
    #[arg(long)]
    task: Option<String>,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0, env = "RIAL_SEED")]
    seed: u64,
    /// Sample actions instead of taking the mean.
    #[arg(long)]
    stochastic: bool,
    #[command(flatten)]
    gap: GapArgs,
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    iterations: u64,
    #[arg(long, default_value_t = 0.5)]
    drop_prob: f64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DemoSourceArg {
    Scripted,
    Teleop,
}

#[derive(Args)]
struct TaskArgs {
    /// Task name; ignored when a config file sets one.
    #[arg(long, default_value = "lifting")]
    task: String,
    /// Configuration file for start and arm settings.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

impl TaskArgs {
    fn build(&self) -> Result<TaskSpec> {
        let mut kv = KvMap::new();
        kv.set("task", &self.task);
        if let Some(p) = &self.config {
            kv.merge(&KvMap::load(p)?);
        }
        Ok(TaskSpec::from_config(&kv)?)
    }
}

#[derive(Args)]
struct RecordArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, short, default_value_t = 30)]
    n: usize,
    #[arg(long, value_enum, default_value = "scripted")]
    source: DemoSourceArg,
    /// First expert seed; failed episodes move on to the next seed.
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    /// Dataset file for scripted demos, directory for teleop.
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    serve: ServeOpts,
}

#[derive(Args)]
struct ServeOpts {
    #[arg(long, default_value = "127.0.0.1:8765")]
    listen: String,
    /// Shared secret clients must present.
    #[arg(long, env = "RIAL_TELEOP_TOKEN")]
    token: Option<String>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value = "demos")]
    demo_dir: PathBuf,
    #[arg(long, default_value_t = 0, env = "RIAL_SEED")]
    seed: u64,
    #[command(flatten)]
    serve: ServeOpts,
}

#[derive(Args)]
struct ReplayArgs {
    file: PathBuf,
    /// Configuration the dataset was recorded under, when it changed the arm.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Random cases per layer.
    #[arg(long, default_value_t = 5)]
    cases: usize,
}

#[derive(Args)]
struct PlotArgs {
    /// Run directories holding `metrics.csv`.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// `lifting`, `stacking_baselines`, `curriculum`, `lambda_sweep`, `action_drop` or `all`.
    name: String,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, short, default_value = "runs/experiments")]
    out: PathBuf,
    /// Tiny budgets that only exercise the pipeline.
    #[arg(long)]
    smoke: bool,
    /// Number of seeds, counting from 0.
    #[arg(long)]
    seeds: Option<u64>,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

// unreadable input files are the caller's problem, whatever the cause
fn load_checkpoint(p: &Path) -> Result<Checkpoint> {
    Checkpoint::load(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
}

fn load_dataset(p: &Path) -> Result<DemoDataset> {
    DemoDataset::load(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
}

fn train(a: &TrainArgs) -> Result<()> {
    let kv = a.config.load()?;
    let cfg = RunConfig::from_kv(&kv)?;
    let out = match (&a.out, &a.config.config) {
        (Some(o), _) => o.clone(),
        (None, Some(c)) => Path::new("runs").join(c.file_stem().unwrap_or_default()),
        (None, None) => PathBuf::from("runs/default"),
    };
    let rows = run_training(cfg, &out, a.resume)?;
    match rows.last() {
        Some(m) => println!(
            "iteration {}  env steps {}  task return {:.3}  success {:.3}  -> {}",
            m.iteration,
            m.env_steps,
            m.mean_task_return,
            m.success_rate,
            out.display()
        ),
        None => println!("nothing to do; {} is already at its iteration count", out.display()),
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut kv = checkpoint_config(&ck)?;
    if let Some(t) = &a.task {
        kv.set("task", t);
    }
    let task = TaskSpec::from_config(&kv)?;
    let policy = load_policy(&ck, &task)?;
    let cfg = EvalConfig {
        n_episodes: a.episodes,
        seed: a.seed,
        stochastic: a.stochastic,
        gap: a.gap.build()?,
    };
    let report = evaluate(&task, &policy, &cfg)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Fault(e.to_string()))?);
    } else {
        print!("{}", report.table());
    }
    Ok(())
}

fn finetune(a: &FinetuneArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let rows = finetune_action_drop(&ck, a.iterations, a.drop_prob, &a.out)?;
    let steps: u64 = rows.iter().map(|m| m.env_steps).max().unwrap_or(0);
    let drops: u64 = rows.iter().map(|m| m.drop_events).sum();
    println!(
        "{} iterations with drop probability {}  {} drop events  env steps {}  -> {}",
        rows.len(),
        a.drop_prob,
        drops,
        steps,
        RunPaths::new(&a.out).latest().display()
    );
    Ok(())
}

fn serve(task: TaskSpec, demo_dir: PathBuf, seed: u64, o: &ServeOpts) -> Result<()> {
    std::fs::create_dir_all(&demo_dir)?;
    let server = bind(
        o.listen.as_str(),
        ServerConfig {
            task,
            demo_dir: demo_dir.clone(),
            token: o.token.clone(),
            seed,
        },
    )?;
    println!(
        "teleop server on ws://{}  saving to {}",
        server.local_addr()?,
        demo_dir.display()
    );
    server.run()?;
    Ok(())
}

fn record(a: &RecordArgs) -> Result<()> {
    let task = a.task.build()?;
    match a.source {
        DemoSourceArg::Scripted => {
            let ds = build_dataset(
                &task,
                a.n,
                DatasetSource::Scripted {
                    first_seed: a.first_seed,
                    max_attempts: a.n * 4 + 10,
                },
                now_unix(),
            )?;
            if let Some(d) = replay(&task, &ds)? {
                return Err(CliError::Fault(format!("fresh dataset diverges on replay: {d:?}")));
            }
            if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            ds.save(&a.out)?;
            let steps: usize = ds.episodes.iter().map(|e| e.n_actions()).sum();
            println!(
                "{} successful {} episodes, {steps} steps -> {}",
                ds.episodes.len(),
                task.name(),
                a.out.display()
            );
            Ok(())
        }
        DemoSourceArg::Teleop => serve(task, a.out.clone(), a.first_seed, &a.serve),
    }
}

fn replay_cmd(a: &ReplayArgs) -> Result<()> {
    let ds = load_dataset(&a.file)?;
    let mut kv = match &a.config {
        Some(p) => KvMap::load(p)?,
        None => KvMap::new(),
    };
    kv.set("task", &ds.task);
    let task = TaskSpec::from_config(&kv)?;
    ds.check_task(&task)?;
    let steps: usize = ds.episodes.iter().map(|e| e.n_actions()).sum();
    match replay(&task, &ds)? {
        None => {
            println!("{} episodes, {steps} steps replayed, zero divergences", ds.episodes.len());
            Ok(())
        }
        Some(d) => Err(CliError::Core(rial_core::Error::Divergence {
            step: d.step,
            field: format!("episode {} {}", d.episode, d.field),
        })),
    }
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let rows = gradcheck_suite(a.seed, a.cases)?;
    print!("{}", table(&rows));
    let failed: Vec<_> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Fault(format!("gradient check failed: {}", failed.join(", "))))
    }
}

const PLOT_COLUMNS: &str =
    "run,iteration,env_steps,mean_task_return,mean_gail_return,mean_hybrid_return,success_rate,frac_random_starts,kl,beta,aborted";

fn plot(a: &PlotArgs) -> Result<()> {
    let mut out = String::from(PLOT_COLUMNS);
    out.push('\n');
    for dir in &a.runs {
        let name = dir.display().to_string().replace(',', "_");
        for m in read_metrics(&RunPaths::new(dir).metrics())? {
            out.push_str(&format!(
                "{name},{},{},{},{},{},{},{},{},{},{}\n",
                m.iteration,
                m.env_steps,
                m.mean_task_return,
                m.mean_gail_return,
                m.mean_hybrid_return,
                m.success_rate,
                m.frac_random_starts,
                m.kl,
                m.beta,
                m.aborted
            ));
        }
    }
    match &a.out {
        Some(p) => std::fs::write(p, out)?,
        None => print!("{out}"),
    }
    Ok(())
}

fn experiment(a: &ExperimentArgs) -> Result<()> {
    let base = a.config.load()?;
    let mut scale = if a.smoke { Scale::smoke() } else { Scale::desk() };
    if let Some(n) = a.seeds {
        scale.seeds = (0..n).collect();
    }
    let which: Vec<Experiment> = if a.name == "all" {
        Experiment::ALL.to_vec()
    } else {
        vec![Experiment::parse(&a.name)?]
    };
    for exp in which {
        let r = run_experiment(exp, &base, &scale, &a.out)?;
        print!("{}", r.detail);
        println!("{} {}", if r.passed { "PASS" } else { "FAIL" }, exp.name());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::FinetuneDrop(a) => finetune(a),
        Command::RecordDemos(a) => record(a),
        Command::TeleopServe(a) => serve(a.task.build()?, a.demo_dir.clone(), a.seed, &a.serve),
        Command::Replay(a) => replay_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Plot(a) => plot(a),
        Command::Experiment(a) => experiment(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_new(&cli.log).unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
