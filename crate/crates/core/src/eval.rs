//! Policy evaluation on the deployable interface: episodes from random
//! starts, observations only, privileged state access switched off.

use rayon::prelude::*;
use rial_nnkit::DiagGaussian;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nets::VisuomotorPolicy;
use crate::rng::{derive, rng_at, STREAM_POLICY};
use crate::sim2d::env::{Env, SimEnv};
use crate::sim2d::gap::{GapEnv, RealityGapConfig};
use crate::sim2d::task::TaskSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub seed: u64,
    /// Sample actions instead of taking the mean.
    pub stochastic: bool,
    pub gap: RealityGapConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_episodes: 100,
            seed: 0,
            stochastic: false,
            gap: RealityGapConfig::off(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub seed: u64,
    pub task_return: f64,
    pub max_stage: usize,
    pub dropped: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub n_episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    /// `stage_attainment[k]`: fraction of episodes that reached stage `k`.
    pub stage_attainment: Vec<f64>,
    pub stage_names: Vec<String>,
    pub episodes: Vec<EpisodeOutcome>,
}

pub fn eval_seed(seed: u64, episode: u64) -> u64 {
    derive(seed, &[0xE7A1, episode])
}

/// Runs one evaluation episode. The environment refuses state reads for
/// the whole episode, so the policy is driven purely by observations.
pub fn run_eval_episode(task: &TaskSpec, policy: &VisuomotorPolicy, cfg: &EvalConfig, seed: u64) -> Result<EpisodeOutcome> {
    let mut env = GapEnv::new(SimEnv::new(task.clone()), cfg.gap.clone())?;
    let mut obs = env.reset(seed, None)?;
    env.set_privileged_access(false);
    let mut h = policy.initial_state();
    let (mut ret, mut max_stage) = (0.0, 0);
    for t in 0..task.episode_length {
        let step = policy.act(&obs, &h)?;
        let a = if cfg.stochastic {
            DiagGaussian::new(step.mean, step.log_std)?.sample(&mut rng_at(seed, STREAM_POLICY, t as u64))
        } else {
            step.mean
        };
        h = step.state;
        let r = env.step(&a)?;
        ret += r.reward;
        max_stage = max_stage.max(r.stage);
        obs = r.obs;
        if r.done {
            break;
        }
    }
    Ok(EpisodeOutcome {
        seed,
        task_return: ret,
        max_stage,
        dropped: env.drop_counts().0,
    })
}

pub fn evaluate(task: &TaskSpec, policy: &VisuomotorPolicy, cfg: &EvalConfig) -> Result<EvalReport> {
    let episodes: Vec<EpisodeOutcome> = (0..cfg.n_episodes as u64)
        .into_par_iter()
        .map(|i| run_eval_episode(task, policy, cfg, eval_seed(cfg.seed, i)))
        .collect::<Result<_>>()?;
    Ok(summarize(task, episodes))
}

pub fn summarize(task: &TaskSpec, episodes: Vec<EpisodeOutcome>) -> EvalReport {
    let n = episodes.len().max(1) as f64;
    let fin = task.final_stage();
    let stage_attainment = (0..=fin)
        .map(|k| episodes.iter().filter(|e| e.max_stage >= k).count() as f64 / n)
        .collect();
    EvalReport {
        task: task.name().to_string(),
        n_episodes: episodes.len(),
        success_rate: episodes.iter().filter(|e| e.max_stage == fin).count() as f64 / n,
        mean_return: episodes.iter().map(|e| e.task_return).sum::<f64>() / n,
        stage_attainment,
        stage_names: task.stages.iter().map(|s| s.name.to_string()).collect(),
        episodes,
    }
}

impl EvalReport {
    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "task {}  episodes {}  success {:.3}  mean return {:.3}\n",
            self.task, self.n_episodes, self.success_rate, self.mean_return
        );
        for (k, (name, r)) in self.stage_names.iter().zip(&self.stage_attainment).enumerate() {
            s.push_str(&format!("  stage {k} {name:<48} {r:.3}\n"));
        }
        s
    }
}
