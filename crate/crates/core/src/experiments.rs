//! Desk-scale learning experiments: multi-seed training runs with a
//! pass/fail verdict each. Runs live under one output directory and resume
//! where they stopped.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rial_nnkit::Checkpoint;

use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig};
use crate::sim2d::gap::RealityGapConfig;
use crate::sim2d::task::TaskSpec;
use crate::train::{finetune_action_drop, load_policy, read_metrics, run_training, IterMetrics, RunConfig, RunPaths};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    /// Full model on lifting reaches the success threshold within the step budget.
    LiftingSuccess,
    /// Full model beats both single-reward baselines on stacking.
    StackingBaselines,
    /// The curriculum shortens the time to a return threshold for rl_only.
    Curriculum,
    /// Returns stay close to the λ = 0.5 return across λ ∈ {0.3, 0.7}.
    LambdaSweep,
    /// Action-drop fine-tuning improves success under dropping.
    ActionDrop,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::LiftingSuccess,
        Experiment::StackingBaselines,
        Experiment::Curriculum,
        Experiment::LambdaSweep,
        Experiment::ActionDrop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::LiftingSuccess => "lifting",
            Experiment::StackingBaselines => "stacking_baselines",
            Experiment::Curriculum => "curriculum",
            Experiment::LambdaSweep => "lambda_sweep",
            Experiment::ActionDrop => "action_drop",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct Scale {
    pub seeds: Vec<u64>,
    /// Environment step budget of the lifting runs.
    pub lifting_env_steps: u64,
    pub stacking_iterations: u64,
    /// Checkpoint cadence; checkpoints are evaluated after training.
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub success_threshold: f64,
    /// Evaluation return that counts as reached in the curriculum comparison.
    pub return_threshold: f64,
    pub finetune_iterations: u64,
    pub drop_eval_episodes: usize,
    /// Applied on top of every run's configuration.
    pub overrides: KvMap,
}

impl Scale {
    /// Budgets of the desk-scale acceptance runs.
    pub fn desk() -> Self {
        Self {
            seeds: (0..5).collect(),
            lifting_env_steps: 2_000_000,
            stacking_iterations: 1500,
            eval_every: 50,
            eval_episodes: 50,
            success_threshold: 0.9,
            return_threshold: 25.0,
            finetune_iterations: 250,
            drop_eval_episodes: 200,
            overrides: KvMap::new(),
        }
    }

    /// Minutes-long budgets that exercise every code path.
    pub fn smoke() -> Self {
        let overrides = KvMap::parse_str(
            "demos.n = 4
ppo.n_workers = 2
ppo.n_policy_updates = 1
ppo.n_value_updates = 1
ppo.n_aux_updates = 1
ppo.n_disc_updates = 1",
        )
        .expect("static text");
        Self {
            seeds: vec![0],
            lifting_env_steps: 400,
            stacking_iterations: 2,
            eval_every: 1,
            eval_episodes: 2,
            success_threshold: 0.9,
            return_threshold: 25.0,
            finetune_iterations: 1,
            drop_eval_episodes: 2,
            overrides,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Report {
    pub experiment: Experiment,
    pub passed: bool,
    /// One line with the measured quantities and the rule applied.
    pub verdict: String,
    /// Per-run detail.
    pub detail: String,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v.sqrt())
}

struct Runner<'a> {
    base: &'a KvMap,
    scale: &'a Scale,
    out: PathBuf,
    detail: String,
}

struct Run {
    dir: PathBuf,
    task: TaskSpec,
    rows: Vec<IterMetrics>,
}

impl Run {
    fn checkpoint(&self, iteration: Option<u64>) -> Result<Checkpoint> {
        let p = RunPaths::new(&self.dir);
        Checkpoint::load(&match iteration {
            Some(i) => p.periodic(i),
            None => p.latest(),
        })
        .map_err(Into::into)
    }

    /// Iterations with a periodic checkpoint, ascending.
    fn checkpointed(&self, every: u64) -> Vec<u64> {
        let last = self.rows.last().map_or(0, |r| r.iteration + 1);
        (1..=last / every).map(|k| k * every).collect()
    }
}

impl Runner<'_> {
    fn config(&self, variant: &str, seed: u64, iterations: u64) -> Result<KvMap> {
        let mut kv = self.base.clone();
        for line in variant.split(';').map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("variant `{line}`")))?;
            kv.set(k.trim(), v.trim());
        }
        kv.merge(&self.scale.overrides);
        kv.set("seed", seed);
        kv.set("iterations", iterations);
        kv.set("checkpoint_every", self.scale.eval_every);
        Ok(kv)
    }

    fn train(&mut self, label: &str, variant: &str, seed: u64, iterations: u64) -> Result<Run> {
        let cfg = RunConfig::from_kv(&self.config(variant, seed, iterations)?)?;
        let dir = self.out.join(label).join(format!("seed_{seed}"));
        let resume = RunPaths::new(&dir).latest().exists();
        tracing::info!(run = label, seed, iterations, resume, "experiment run");
        let task = cfg.task.clone();
        run_training(cfg, &dir, resume)?;
        let rows = read_metrics(&RunPaths::new(&dir).metrics())?;
        Ok(Run { dir, task, rows })
    }

    fn eval(&self, task: &TaskSpec, ck: &Checkpoint, episodes: usize, seed: u64, gap: RealityGapConfig) -> Result<(f64, f64)> {
        let policy = load_policy(ck, task)?;
        let r = evaluate(
            task,
            &policy,
            &EvalConfig {
                n_episodes: episodes,
                seed: 1_000_003 + seed,
                stochastic: false,
                gap,
            },
        )?;
        Ok((r.success_rate, r.mean_return))
    }

    fn note(&mut self, line: impl AsRef<str>) {
        self.detail.push_str(line.as_ref());
        self.detail.push('\n');
    }

    fn final_return(&mut self, label: &str, variant: &str, seed: u64) -> Result<f64> {
        let run = self.train(label, variant, seed, self.scale.stacking_iterations)?;
        let (_, ret) = self.eval(&run.task, &run.checkpoint(None)?, self.scale.eval_episodes, seed, RealityGapConfig::off())?;
        self.note(format!("{label} seed {seed}: final evaluation return {ret:.3}"));
        Ok(ret)
    }

    fn lifting_success(&mut self) -> Result<(bool, String)> {
        let lifting = TaskSpec::new(crate::sim2d::task::TaskKind::Lifting);
        let per_iter = self.base_workers()? * lifting.episode_length as u64;
        let iterations = self.scale.lifting_env_steps.div_ceil(per_iter);
        let mut best = Vec::new();
        for &seed in &self.scale.seeds.clone() {
            let run = self.train("lifting_full", "task = lifting; mode = full; lambda = 0.5", seed, iterations)?;
            let mut top = 0.0f64;
            for it in run.checkpointed(self.scale.eval_every) {
                let steps = run.rows[it as usize - 1].env_steps;
                if steps > self.scale.lifting_env_steps {
                    break;
                }
                let (s, _) = self.eval(&run.task, &run.checkpoint(Some(it))?, self.scale.eval_episodes, seed, RealityGapConfig::off())?;
                self.note(format!("lifting seed {seed}: iteration {it}, {steps} steps, success {s:.3}"));
                top = top.max(s);
                if s >= self.scale.success_threshold {
                    break;
                }
            }
            best.push(top);
        }
        let (m, _) = mean_sd(&best);
        Ok((
            m >= self.scale.success_threshold,
            format!(
                "mean best success within {} steps {m:.3} (need >= {})",
                self.scale.lifting_env_steps, self.scale.success_threshold
            ),
        ))
    }

    fn base_workers(&self) -> Result<u64> {
        let kv = self.config("task = lifting", 0, 1)?;
        Ok(kv.get_u64("ppo.n_workers", crate::ppo::PpoConfig::default().n_workers as u64)?)
    }

    fn stacking_baselines(&mut self) -> Result<(bool, String)> {
        let mut stats = Vec::new();
        for (label, v) in [
            ("stacking_full", "task = stacking; mode = full; lambda = 0.5"),
            ("stacking_rl_only", "task = stacking; mode = rl_only; lambda = 0"),
            ("stacking_gail_only", "task = stacking; mode = gail_only; lambda = 1"),
        ] {
            let mut xs = Vec::new();
            for &seed in &self.scale.seeds.clone() {
                xs.push(self.final_return(label, v, seed)?);
            }
            stats.push(mean_sd(&xs));
        }
        let [(fm, fs), (rm, rs), (gm, gs)] = [stats[0], stats[1], stats[2]];
        let pass = fm - fs > rm + rs && fm - fs > gm + gs;
        Ok((
            pass,
            format!("full {fm:.3} ± {fs:.3}, rl_only {rm:.3} ± {rs:.3}, gail_only {gm:.3} ± {gs:.3} (bands must not overlap)"),
        ))
    }

    /// First checkpoint iteration whose evaluation return reaches the threshold.
    fn iterations_to_threshold(&mut self, label: &str, variant: &str, seed: u64) -> Result<Option<u64>> {
        let run = self.train(label, variant, seed, self.scale.stacking_iterations)?;
        for it in run.checkpointed(self.scale.eval_every) {
            let (_, ret) = self.eval(&run.task, &run.checkpoint(Some(it))?, self.scale.eval_episodes, seed, RealityGapConfig::off())?;
            if ret >= self.scale.return_threshold {
                self.note(format!("{label} seed {seed}: return {ret:.3} at iteration {it}"));
                return Ok(Some(it));
            }
        }
        self.note(format!("{label} seed {seed}: threshold not reached"));
        Ok(None)
    }

    fn curriculum(&mut self) -> Result<(bool, String)> {
        let mut wins = 0;
        for &seed in &self.scale.seeds.clone() {
            let with = self.iterations_to_threshold("curriculum_on", "task = stacking; mode = rl_only; lambda = 0", seed)?;
            let without = self.iterations_to_threshold(
                "curriculum_off",
                "task = stacking; mode = rl_only; lambda = 0; ablation.no_curriculum = true",
                seed,
            )?;
            // unreached counts as infinitely late
            let faster = match (with, without) {
                (Some(a), Some(b)) => a < b,
                (Some(_), None) => true,
                _ => false,
            };
            wins += faster as usize;
        }
        let n = self.scale.seeds.len();
        Ok((
            wins == n,
            format!(
                "curriculum reached return {} first in {wins}/{n} seeds (need {n}/{n})",
                self.scale.return_threshold
            ),
        ))
    }

    fn lambda_sweep(&mut self) -> Result<(bool, String)> {
        let mut means = Vec::new();
        for l in [0.3, 0.5, 0.7] {
            let mut xs = Vec::new();
            for &seed in &self.scale.seeds.clone() {
                let label = format!("lambda_{l}");
                xs.push(self.final_return(&label, &format!("task = stacking; mode = full; lambda = {l}"), seed)?);
            }
            means.push(mean_sd(&xs).0);
        }
        let reference = means[1];
        let pass = reference > 0.0 && means.iter().all(|&m| m >= 0.8 * reference);
        Ok((
            pass,
            format!(
                "mean final return λ=0.3 {:.3}, λ=0.5 {:.3}, λ=0.7 {:.3} (need each >= {:.3})",
                means[0],
                means[1],
                means[2],
                0.8 * reference
            ),
        ))
    }

    fn action_drop(&mut self) -> Result<(bool, String)> {
        let lifting = TaskSpec::new(crate::sim2d::task::TaskKind::Lifting);
        let per_iter = self.base_workers()? * lifting.episode_length as u64;
        let iterations = self.scale.lifting_env_steps.div_ceil(per_iter);
        let drop = RealityGapConfig {
            action_drop_prob: 0.5,
            ..RealityGapConfig::off()
        };
        let (mut before, mut after) = (Vec::new(), Vec::new());
        for &seed in &self.scale.seeds.clone() {
            let run = self.train("lifting_full", "task = lifting; mode = full; lambda = 0.5", seed, iterations)?;
            let ck = run.checkpoint(None)?;
            let ft_dir = self.out.join("lifting_drop_finetune").join(format!("seed_{seed}"));
            let ft_latest = RunPaths::new(&ft_dir).latest();
            if !ft_latest.exists() {
                finetune_action_drop(&ck, self.scale.finetune_iterations, 0.5, &ft_dir)?;
            }
            let ft = Checkpoint::load(&ft_latest)?;
            let n = self.scale.drop_eval_episodes;
            let (b, _) = self.eval(&run.task, &ck, n, seed, drop.clone())?;
            let (a, _) = self.eval(&run.task, &ft, n, seed, drop.clone())?;
            self.note(format!("action drop seed {seed}: success {b:.3} before, {a:.3} after fine-tuning"));
            before.push(b);
            after.push(a);
        }
        let (b, a) = (mean_sd(&before).0, mean_sd(&after).0);
        Ok((
            a - b >= 0.10,
            format!("success under dropping {b:.3} -> {a:.3} after fine-tuning (need +0.100)"),
        ))
    }
}

/// Runs `exp` with configurations built from `base`, writing every run
/// under `out`.
pub fn run_experiment(exp: Experiment, base: &KvMap, scale: &Scale, out: &Path) -> Result<Report> {
    if scale.seeds.is_empty() {
        return Err(Error::Config("experiments need at least one seed".into()));
    }
    let mut r = Runner {
        base,
        scale,
        out: out.to_path_buf(),
        detail: String::new(),
    };
    let (passed, verdict) = match exp {
        Experiment::LiftingSuccess => r.lifting_success()?,
        Experiment::StackingBaselines => r.stacking_baselines()?,
        Experiment::Curriculum => r.curriculum()?,
        Experiment::LambdaSweep => r.lambda_sweep()?,
        Experiment::ActionDrop => r.action_drop()?,
    };
    let mut detail = r.detail;
    let _ = writeln!(detail, "{}: {verdict}", exp.name());
    Ok(Report {
        experiment: exp,
        passed,
        verdict,
        detail,
    })
}
