//! Rollouts, K-step advantages, adaptive-KL PPO and the synchronous
//! gradient step shared by every worker.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use rial_nnkit::{AdamState, DiagGaussian, Graph, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::config::KvMap;
use crate::demos::{CurriculumClusters, DemoDataset, StartChoice};
use crate::error::{Error, Result};
use crate::imitation::{gail_reward, hybrid_reward, DiscInput, HybridRewardConfig, RunningNorm};
use crate::nets::policy::{aux_head, forward, scale_pixels, trunk, SeqInput};
use crate::nets::{DiscriminatorNet, PolicyConfig, ValueNet, VisuomotorPolicy};
use crate::rng::{derive, rng_at, STREAM_CURRICULUM, STREAM_POLICY};
use crate::sim2d::env::{Env, SimEnv};
use crate::sim2d::gap::{GapEnv, RealityGapConfig};
use crate::sim2d::render::IMAGE_LEN;
use crate::sim2d::task::TaskSpec;

/// Coefficient on the value loss when it shares the policy update.
pub const PIXEL_VALUE_COEF: f64 = 0.5;
const MAX_EPISODE_ATTEMPTS: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub gamma: f64,
    pub k: usize,
    pub kl_target: f64,
    pub beta_init: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub n_policy_updates: usize,
    pub n_value_updates: usize,
    pub n_disc_updates: usize,
    pub n_aux_updates: usize,
    pub n_workers: usize,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub aux_lr: f64,
    pub disc_lr: f64,
    /// Bootstrap with `gamma^(K-1)` as printed instead of `gamma^K`.
    pub printed_bootstrap: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.995,
            k: 50,
            kl_target: 0.01,
            beta_init: 1.0,
            beta_min: 1e-4,
            beta_max: 10.0,
            n_policy_updates: 50,
            n_value_updates: 50,
            n_disc_updates: 5,
            n_aux_updates: 5,
            n_workers: 8,
            policy_lr: 1e-4,
            value_lr: 1e-3,
            aux_lr: 1e-4,
            disc_lr: 1e-4,
            printed_bootstrap: false,
        }
    }
}

impl PpoConfig {
    pub fn from_config(kv: &KvMap) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            gamma: kv.get_f64("ppo.gamma", d.gamma)?,
            k: kv.get_usize("ppo.k", d.k)?,
            kl_target: kv.get_f64("ppo.kl_target", d.kl_target)?,
            beta_init: kv.get_f64("ppo.beta_init", d.beta_init)?,
            beta_min: kv.get_f64("ppo.beta_min", d.beta_min)?,
            beta_max: kv.get_f64("ppo.beta_max", d.beta_max)?,
            n_policy_updates: kv.get_usize("ppo.n_policy_updates", d.n_policy_updates)?,
            n_value_updates: kv.get_usize("ppo.n_value_updates", d.n_value_updates)?,
            n_disc_updates: kv.get_usize("ppo.n_disc_updates", d.n_disc_updates)?,
            n_aux_updates: kv.get_usize("ppo.n_aux_updates", d.n_aux_updates)?,
            n_workers: kv.get_usize("ppo.n_workers", d.n_workers)?,
            policy_lr: kv.get_f64("ppo.policy_lr", d.policy_lr)?,
            value_lr: kv.get_f64("ppo.value_lr", d.value_lr)?,
            aux_lr: kv.get_f64("ppo.aux_lr", d.aux_lr)?,
            disc_lr: kv.get_f64("ppo.disc_lr", d.disc_lr)?,
            printed_bootstrap: kv.get_bool("ppo.printed_bootstrap", d.printed_bootstrap)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ppo: {m}")));
        if self.k == 0 {
            return bad("K must be at least 1");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.n_workers == 0 {
            return bad("at least one worker is required");
        }
        if !(self.kl_target > 0.0) {
            return bad("kl_target must be positive");
        }
        if !(0.0 < self.beta_min && self.beta_min <= self.beta_init && self.beta_init <= self.beta_max) {
            return bad("need 0 < beta_min <= beta_init <= beta_max");
        }
        for lr in [self.policy_lr, self.value_lr, self.aux_lr, self.disc_lr] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("learning rates must be positive");
            }
        }
        Ok(())
    }
}

/// K-step advantages and value targets for one episode.
///
/// `rewards[t]` follows action `t`, `values[t]` estimates the state it was
/// taken in, and `bootstrap` is the value after the last reward (0 at a
/// terminal). Windows running past the end are shortened and bootstrap from
/// `bootstrap` with the matching power of `gamma`.
pub fn kstep_advantage(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    gamma: f64,
    k: usize,
    printed_bootstrap: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t_len = rewards.len();
    if values.len() != t_len {
        return Err(Error::Shape(format!("{t_len} rewards but {} values", values.len())));
    }
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let mut adv = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let n = k.min(t_len - t);
        let mut g = 0.0;
        let mut disc = 1.0;
        for r in &rewards[t..t + n] {
            g += disc * r;
            disc *= gamma;
        }
        let boot = if t + n < t_len { values[t + n] } else { bootstrap };
        let power = if printed_bootstrap { disc / gamma } else { disc };
        adv.push(g + power * boot - values[t]);
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

/// Adaptive KL coefficient: doubles above twice the target, halves below
/// half of it, clamped to `[beta_min, beta_max]`.
pub fn adapt_beta(beta: f64, kl: f64, cfg: &PpoConfig) -> f64 {
    let b = if kl > 2.0 * cfg.kl_target {
        beta * 2.0
    } else if kl < cfg.kl_target / 2.0 {
        beta * 0.5
    } else {
        beta
    };
    b.clamp(cfg.beta_min, cfg.beta_max)
}

/// Rescales to zero mean and unit (population) standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for a in adv.iter_mut() {
        *a -= mean;
        if sd > 1e-8 {
            *a /= sd;
        }
    }
}

/// Averages worker gradients in index order (accumulating in f64), installs
/// them on `store` and applies one Adam step.
pub fn sync_gradient_step(
    grads: &[BTreeMap<String, Vec<f32>>],
    store: &mut ParamStore<f32>,
    adam: &mut AdamState<f32>,
) -> Result<BTreeMap<String, Vec<f32>>> {
    let avg = average_gradients(grads)?;
    store.clear_grads();
    for name in adam.param_names().map(str::to_string).collect::<Vec<_>>() {
        let g = avg
            .get(&name)
            .cloned()
            .unwrap_or_else(|| vec![0.0; store.get(&name).map(|t| t.len()).unwrap_or(0)]);
        store.get_mut(&name)?.set_grad(g)?;
    }
    adam.update(store)?;
    store.clear_grads();
    Ok(avg)
}

pub fn average_gradients(grads: &[BTreeMap<String, Vec<f32>>]) -> Result<BTreeMap<String, Vec<f32>>> {
    let Some(first) = grads.first() else {
        return Err(Error::Invalid("no worker gradients".into()));
    };
    let mut sums: BTreeMap<String, Vec<f64>> = first
        .iter()
        .map(|(k, v)| (k.clone(), vec![0.0; v.len()]))
        .collect();
    for (w, g) in grads.iter().enumerate() {
        if g.len() != sums.len() {
            return Err(Error::Shape(format!("worker {w} reports {} gradients, worker 0 {}", g.len(), sums.len())));
        }
        for (name, v) in g {
            let s = sums
                .get_mut(name)
                .ok_or_else(|| Error::Shape(format!("worker {w} reports unknown gradient `{name}`")))?;
            if s.len() != v.len() {
                return Err(Error::Shape(format!("worker {w}: `{name}` has {} values, expected {}", v.len(), s.len())));
            }
            for (a, &b) in s.iter_mut().zip(v) {
                *a += b as f64;
            }
        }
    }
    let n = grads.len() as f64;
    Ok(sums
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(|x| (x / n) as f32).collect()))
        .collect())
}

/// One full episode from one worker.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub start: StartChoice,
    pub len: usize,
    /// Observation before each action: `len * IMAGE_LEN` bytes.
    pub pixels: Vec<u8>,
    pub proprio: Vec<f64>,
    /// Privileged features of the state each action was taken in.
    pub privileged: Vec<f64>,
    /// Discriminator input rows for the state reached by each action.
    pub disc_rows: Vec<f64>,
    pub aux_targets: Vec<f64>,
    pub actions: Vec<f64>,
    pub logp: Vec<f64>,
    pub r_task: Vec<f64>,
    pub r_gail: Vec<f64>,
    /// Stage after each action.
    pub stages: Vec<usize>,
    /// Recurrent state at the start of each K-step segment.
    pub seg_h: Vec<f32>,
    pub seg_c: Vec<f32>,
    /// Value-head estimates, when the policy carries one.
    pub pixel_values: Vec<f64>,
    /// Environment faults that forced a resample.
    pub faults: u32,
    /// Actions replaced by the previous one under action dropping.
    pub dropped: u64,
}

impl Trajectory {
    pub fn task_return(&self) -> f64 {
        self.r_task.iter().sum()
    }

    pub fn max_stage(&self) -> usize {
        self.stages.iter().copied().max().unwrap_or(0)
    }

    pub fn segment_lens(&self, k: usize) -> Vec<usize> {
        (0..self.len).step_by(k).map(|s| k.min(self.len - s)).collect()
    }
}

/// Immutable discriminator view used for reward labeling.
#[derive(Clone, Copy)]
pub struct DiscSnapshot<'a> {
    pub net: &'a DiscriminatorNet,
    pub norm: &'a RunningNorm,
    pub clip: f64,
}

#[derive(Clone, Copy)]
pub struct RolloutSpec<'a> {
    pub task: &'a TaskSpec,
    pub gap: &'a RealityGapConfig,
    pub policy: &'a VisuomotorPolicy,
    pub disc: Option<DiscSnapshot<'a>>,
    pub disc_input: DiscInput,
    pub disc_actions: bool,
    /// Curriculum and its dataset; random starts only when absent.
    pub curriculum: Option<(&'a CurriculumClusters, &'a DemoDataset)>,
    pub k: usize,
}

/// Seed of worker `w` in iteration `iter`.
pub fn episode_seed(master: u64, iter: u64, worker: u64) -> u64 {
    derive(master, &[iter, worker])
}

/// Runs one episode per seed in parallel; results are in seed order.
/// An episode whose environment faults is resampled with a derived seed.
pub fn collect_rollouts(spec: &RolloutSpec<'_>, seeds: &[u64]) -> Result<Vec<Trajectory>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let mut faults = 0u32;
            for attempt in 0..MAX_EPISODE_ATTEMPTS {
                let s = if attempt == 0 { seed } else { derive(seed, &[attempt]) };
                match run_episode(spec, s) {
                    Ok(mut t) => {
                        t.faults = faults;
                        return Ok(t);
                    }
                    Err(e @ (Error::State(_) | Error::Action(_) | Error::Decode(_))) => {
                        tracing::warn!(seed = s, error = %e, "environment fault, resampling episode");
                        faults += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(Error::Invalid(format!(
                "episode for seed {seed} faulted {MAX_EPISODE_ATTEMPTS} times"
            )))
        })
        .collect()
}

pub fn run_episode(spec: &RolloutSpec<'_>, seed: u64) -> Result<Trajectory> {
    let task = spec.task;
    let policy = spec.policy;
    let start = match spec.curriculum {
        Some((c, _)) => c.sample_start(&mut rng_at(seed, STREAM_CURRICULUM, 0)),
        None => StartChoice::Random,
    };
    let start_state = match (start, spec.curriculum) {
        (StartChoice::Demo { state, .. }, Some((c, ds))) => Some(c.resolve(ds, state)?.clone()),
        _ => None,
    };
    let mut env = GapEnv::new(SimEnv::new(task.clone()), spec.gap.clone())?;
    let mut obs = env.reset(seed, start_state.as_ref())?;
    let t_len = task.episode_length;
    let a_dim = policy.cfg.action_dim;
    let mut tr = Trajectory {
        seed,
        start,
        len: t_len,
        pixels: Vec::with_capacity(t_len * IMAGE_LEN),
        proprio: Vec::with_capacity(t_len * policy.cfg.proprio_dim),
        privileged: Vec::with_capacity(t_len * task.privileged_dim()),
        disc_rows: Vec::new(),
        aux_targets: Vec::with_capacity(t_len * task.aux_dim()),
        actions: Vec::with_capacity(t_len * a_dim),
        logp: Vec::with_capacity(t_len),
        r_task: Vec::with_capacity(t_len),
        r_gail: Vec::with_capacity(t_len),
        stages: Vec::with_capacity(t_len),
        seg_h: Vec::new(),
        seg_c: Vec::new(),
        pixel_values: Vec::new(),
        faults: 0,
        dropped: 0,
    };
    let mut h = policy.initial_state();
    for t in 0..t_len {
        if t % spec.k == 0 {
            tr.seg_h.extend_from_slice(&h.h);
            tr.seg_c.extend_from_slice(&h.c);
        }
        let s = env.state()?;
        tr.privileged.extend(task.privileged_features(s));
        tr.aux_targets.extend(task.aux_targets(s));
        let step = policy.act(&obs, &h)?;
        let dist = DiagGaussian::new(step.mean, step.log_std)?;
        let a = dist.sample(&mut rng_at(seed, STREAM_POLICY, t as u64));
        tr.logp.push(dist.log_prob(&a)?[0]);
        if let Some(v) = step.value {
            tr.pixel_values.push(v);
        }
        h = step.state;
        tr.pixels.extend_from_slice(&obs.pixels);
        tr.proprio.extend_from_slice(&obs.proprio);
        let r = env.step(&a)?;
        if spec.disc.is_some() {
            let s2 = env.state()?;
            tr.disc_rows.extend(spec.disc_input.features(task, s2));
            if spec.disc_actions {
                tr.disc_rows.extend(a.iter().map(|v| v.clamp(-1.0, 1.0)));
            }
        }
        tr.actions.extend(a);
        tr.r_task.push(r.reward);
        tr.stages.push(r.stage);
        obs = r.obs;
        if r.done {
            break;
        }
    }
    tr.len = tr.r_task.len();
    tr.dropped = env.drop_counts().0;
    tr.r_gail = match spec.disc {
        Some(d) => d
            .net
            .predict(&d.norm.normalize(&tr.disc_rows))?
            .into_iter()
            .map(|(_, p)| gail_reward(p, d.clip))
            .collect::<Result<_>>()?,
        None => vec![0.0; tr.len],
    };
    Ok(tr)
}

/// Hybrid per-step rewards of a trajectory.
pub fn hybrid_rewards(tr: &Trajectory, cfg: &HybridRewardConfig) -> Vec<f64> {
    tr.r_gail
        .iter()
        .zip(&tr.r_task)
        .map(|(&g, &r)| hybrid_reward(cfg, g, r))
        .collect()
}

/// Per-worker tensors reused across the update loop.
pub struct WorkerBatch {
    pub pixels: Vec<f32>,
    pub proprio: Vec<f32>,
    pub actions: Vec<f32>,
    pub seg_lens: Vec<usize>,
    pub h0: Vec<f32>,
    pub c0: Vec<f32>,
    pub adv: Vec<f32>,
    pub value_targets: Vec<f32>,
    pub aux_targets: Vec<f32>,
}

impl WorkerBatch {
    pub fn new(tr: &Trajectory, k: usize, adv: &[f64], value_targets: &[f64]) -> Self {
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        Self {
            pixels: scale_pixels(&tr.pixels),
            proprio: f(&tr.proprio),
            actions: f(&tr.actions),
            seg_lens: tr.segment_lens(k),
            h0: tr.seg_h.clone(),
            c0: tr.seg_c.clone(),
            adv: f(adv),
            value_targets: f(value_targets),
            aux_targets: f(&tr.aux_targets),
        }
    }

    fn input(&self) -> SeqInput<'_, f32> {
        SeqInput {
            pixels: &self.pixels,
            proprio: &self.proprio,
            seg_lens: &self.seg_lens,
            h0: &self.h0,
            c0: &self.c0,
        }
    }
}

/// Action distribution of the pre-update policy on a worker's batch.
pub struct OldPolicy {
    pub mean: Vec<f32>,
    pub log_std: Vec<f32>,
    pub logp: Vec<f32>,
}

pub fn old_policy(cfg: &PolicyConfig, store: &ParamStore<f32>, b: &WorkerBatch) -> Result<OldPolicy> {
    let mut g = Graph::new();
    let out = forward(cfg, &mut g, store, &b.input())?;
    let lp = g.gaussian_log_prob(out.mean, out.log_std, &b.actions)?;
    Ok(OldPolicy {
        mean: g.value(out.mean).to_vec(),
        log_std: g.value(out.log_std).to_vec(),
        logp: g.value(lp).to_vec(),
    })
}

/// Scalars from one worker's policy loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PolicyLossParts {
    pub loss: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub pixel_value_loss: f64,
}

/// `-mean(ratio * adv) + beta * mean KL(old || new)`, plus the value loss
/// when the policy carries a value head.
pub fn policy_loss(
    cfg: &PolicyConfig,
    g: &mut Graph<f32>,
    store: &ParamStore<f32>,
    b: &WorkerBatch,
    old: &OldPolicy,
    beta: f64,
) -> Result<(Var, PolicyLossParts)> {
    let out = forward(cfg, g, store, &b.input())?;
    let lp = g.gaussian_log_prob(out.mean, out.log_std, &b.actions)?;
    let neg_old: Vec<f32> = old.logp.iter().map(|v| -v).collect();
    let diff = g.add_const(lp, &neg_old)?;
    let ratio = g.exp(diff);
    let weighted = g.mul_const(ratio, b.adv.clone())?;
    let surr = g.mean(weighted);
    let kl = g.gaussian_kl(&old.mean, &old.log_std, out.mean, out.log_std)?;
    let kl = g.mean(kl);
    let neg = g.scale(surr, -1.0);
    let pen = g.scale(kl, beta as f32);
    let mut loss = g.add(neg, pen)?;
    let mut parts = PolicyLossParts {
        surrogate: g.scalar(surr) as f64,
        kl: g.scalar(kl) as f64,
        ..Default::default()
    };
    if let Some(v) = out.value {
        let v = g.reshape(v, &[b.value_targets.len()])?;
        let neg_t: Vec<f32> = b.value_targets.iter().map(|x| -x).collect();
        let e = g.add_const(v, &neg_t)?;
        let e2 = g.square(e);
        let vl = g.mean(e2);
        parts.pixel_value_loss = g.scalar(vl) as f64;
        let vl = g.scale(vl, PIXEL_VALUE_COEF as f32);
        loss = g.add(loss, vl)?;
    }
    parts.loss = g.scalar(loss) as f64;
    Ok((loss, parts))
}

fn finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub aux_loss: f64,
    pub kl: f64,
    pub beta: f64,
}

/// `n_policy_updates` synchronous steps on the PPO objective; returns the
/// metrics and the KL of the final policy from the rollout policy.
pub fn policy_phase(
    policy: &mut VisuomotorPolicy,
    adam: &mut AdamState<f32>,
    batches: &[WorkerBatch],
    beta: f64,
    n_updates: usize,
) -> Result<(PolicyLossParts, f64)> {
    let cfg = policy.cfg.clone();
    let olds: Vec<OldPolicy> = batches
        .par_iter()
        .map(|b| old_policy(&cfg, &policy.store, b))
        .collect::<Result<_>>()?;
    let mut first = PolicyLossParts::default();
    for u in 0..n_updates {
        let store = &policy.store;
        let results: Vec<(BTreeMap<String, Vec<f32>>, PolicyLossParts)> = batches
            .par_iter()
            .zip(&olds)
            .map(|(b, old)| {
                let mut g = Graph::new();
                let (loss, parts) = policy_loss(&cfg, &mut g, store, b, old, beta)?;
                finite("policy loss", parts.loss)?;
                Ok((g.backward(loss)?.params(&g), parts))
            })
            .collect::<Result<_>>()?;
        if u == 0 {
            first = mean_parts(results.iter().map(|r| r.1));
        }
        let grads: Vec<_> = results
            .into_iter()
            .map(|(mut g, _)| {
                g.retain(|k, _| !k.starts_with("aux"));
                g
            })
            .collect();
        sync_gradient_step(&grads, &mut policy.store, adam)?;
        if !policy.store.all_finite() {
            return Err(Error::NonFinite("policy parameters".into()));
        }
    }
    let store = &policy.store;
    let kls: Vec<f64> = batches
        .par_iter()
        .zip(&olds)
        .map(|(b, old)| {
            let mut g = Graph::new();
            let out = forward(&cfg, &mut g, store, &b.input())?;
            let kl = g.gaussian_kl(&old.mean, &old.log_std, out.mean, out.log_std)?;
            let kl = g.mean(kl);
            Ok(g.scalar(kl) as f64)
        })
        .collect::<Result<_>>()?;
    let kl = finite("policy KL", kls.iter().sum::<f64>() / kls.len().max(1) as f64)?;
    Ok((first, kl.max(0.0)))
}

fn mean_parts(it: impl Iterator<Item = PolicyLossParts>) -> PolicyLossParts {
    let v: Vec<_> = it.collect();
    let n = v.len().max(1) as f64;
    PolicyLossParts {
        loss: v.iter().map(|p| p.loss).sum::<f64>() / n,
        surrogate: v.iter().map(|p| p.surrogate).sum::<f64>() / n,
        kl: v.iter().map(|p| p.kl).sum::<f64>() / n,
        pixel_value_loss: v.iter().map(|p| p.pixel_value_loss).sum::<f64>() / n,
    }
}

/// Full-batch MSE regression of the value net; returns the loss before the
/// first step.
pub fn value_phase(
    value: &mut ValueNet,
    adam: &mut AdamState<f32>,
    feats: &[f32],
    targets: &[f32],
    n_updates: usize,
) -> Result<f64> {
    let mut first = f64::NAN;
    let neg_t: Vec<f32> = targets.iter().map(|x| -x).collect();
    for u in 0..n_updates {
        let mut g = Graph::new();
        let v = ValueNet::forward(value.input_dim, &mut g, &value.store, feats)?;
        let v = g.reshape(v, &[targets.len()])?;
        let e = g.add_const(v, &neg_t)?;
        let e2 = g.square(e);
        let l = g.mean(e2);
        let lv = finite("value loss", g.scalar(l) as f64)?;
        if u == 0 {
            first = lv;
        }
        let grads = g.backward(l)?.params(&g);
        sync_gradient_step(&[grads], &mut value.store, adam)?;
    }
    Ok(first)
}

/// Auxiliary regression of object coordinates through the shared trunk.
pub fn aux_phase(
    policy: &mut VisuomotorPolicy,
    adam: &mut AdamState<f32>,
    batches: &[WorkerBatch],
    n_updates: usize,
) -> Result<f64> {
    if !policy.cfg.aux_head {
        return Ok(0.0);
    }
    let mut first = f64::NAN;
    for u in 0..n_updates {
        let store = &policy.store;
        let results: Vec<(BTreeMap<String, Vec<f32>>, f64)> = batches
            .par_iter()
            .map(|b| {
                let mut g = Graph::new();
                let tr = trunk(&mut g, store, &b.pixels)?;
                let pred = aux_head(&mut g, store, tr)?;
                let neg: Vec<f32> = b.aux_targets.iter().map(|x| -x).collect();
                let e = g.add_const(pred, &neg)?;
                let e2 = g.square(e);
                let l = g.mean(e2);
                let lv = finite("auxiliary loss", g.scalar(l) as f64)?;
                Ok((g.backward(l)?.params(&g), lv))
            })
            .collect::<Result<_>>()?;
        if u == 0 {
            first = results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64;
        }
        let grads: Vec<_> = results.into_iter().map(|r| r.0).collect();
        sync_gradient_step(&grads, &mut policy.store, adam)?;
    }
    Ok(first)
}

/// Advantages, value targets and normalized per-worker batches.
pub fn prepare_batches(
    trajs: &[Trajectory],
    values: &[Vec<f64>],
    hybrid: &HybridRewardConfig,
    cfg: &PpoConfig,
) -> Result<(Vec<WorkerBatch>, Vec<Vec<f64>>)> {
    let mut advs = Vec::with_capacity(trajs.len());
    let mut targets = Vec::with_capacity(trajs.len());
    for (tr, v) in trajs.iter().zip(values) {
        let r = hybrid_rewards(tr, hybrid);
        let (a, t) = kstep_advantage(&r, v, 0.0, cfg.gamma, cfg.k, cfg.printed_bootstrap)?;
        advs.push(a);
        targets.push(t);
    }
    let mut flat: Vec<f64> = advs.iter().flatten().copied().collect();
    normalize_advantages(&mut flat);
    let mut off = 0;
    let batches = trajs
        .iter()
        .zip(&targets)
        .map(|(tr, t)| {
            let n = tr.len;
            let b = WorkerBatch::new(tr, cfg.k, &flat[off..off + n], t);
            off += n;
            b
        })
        .collect();
    Ok((batches, targets))
}

/// Uniform sampling with replacement of `n` rows from `pool`.
pub fn sample_rows<R: Rng + ?Sized>(pool: &[f64], dim: usize, n: usize, rng: &mut R) -> Vec<f64> {
    let rows = pool.len() / dim;
    let mut out = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let r = rng.random_range(0..rows);
        out.extend_from_slice(&pool[r * dim..(r + 1) * dim]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantage_examples() {
        let (a, _) = kstep_advantage(&[0.0; 5], &[3.0; 5], 3.0, 1.0, 2, false).unwrap();
        assert!(a.iter().all(|&x| x == 0.0));
        let (a, _) = kstep_advantage(&[1.0, 1.0], &[0.0, 0.0], 0.0, 0.9, 2, false).unwrap();
        assert!((a[0] - 1.9).abs() < 1e-12);
        let (a, t) = kstep_advantage(&[1.0, 1.0], &[0.5, 0.0], 2.0, 0.9, 2, false).unwrap();
        assert!((a[0] - 3.02).abs() < 1e-12);
        assert!((t[0] - 3.52).abs() < 1e-12);
        let (a, _) = kstep_advantage(&[1.0, 1.0], &[0.5, 0.0], 2.0, 0.9, 2, true).unwrap();
        assert!((a[0] - (1.9 + 0.9 * 2.0 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn beta_rule() {
        let c = PpoConfig::default();
        assert_eq!(adapt_beta(1.0, 0.05, &c), 2.0);
        assert_eq!(adapt_beta(1.0, 0.001, &c), 0.5);
        assert_eq!(adapt_beta(1.0, 0.01, &c), 1.0);
        assert_eq!(adapt_beta(8.0, 1.0, &c), 10.0);
        assert_eq!(adapt_beta(1.5e-4, 0.0, &c), 1e-4);
    }

    #[test]
    fn gradient_average_rules() {
        let g = |v: f32| BTreeMap::from([("w".to_string(), vec![v, 2.0 * v])]);
        let avg = average_gradients(&[g(0.5), g(0.5), g(0.5)]).unwrap();
        assert_eq!(avg["w"], vec![0.5, 1.0]);
        let avg = average_gradients(&[g(0.3), g(-0.3)]).unwrap();
        assert_eq!(avg["w"], vec![0.0, 0.0]);
        let bad = BTreeMap::from([("w".to_string(), vec![1.0])]);
        assert!(average_gradients(&[g(1.0), bad]).is_err());
    }
}
