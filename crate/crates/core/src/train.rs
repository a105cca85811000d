//! Run configuration and the bulk-synchronous training loop: collect,
//! label hybrid rewards, update policy/value/auxiliary heads, then the
//! discriminator.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rial_nnkit::{AdamConfig, AdamState, Checkpoint};
use serde::{Deserialize, Serialize};

use crate::config::KvMap;
use crate::demos::{build_dataset, cluster_by_stage, CurriculumClusters, DatasetSource, DemoDataset, StartChoice, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::imitation::{discriminator_update, DiscInput, DiscriminatorBatch, HybridRewardConfig, RunningNorm, DEFAULT_GAIL_CLIP};
use crate::nets::{DiscriminatorNet, PolicyConfig, ValueNet, VisuomotorPolicy};
use crate::ppo::{
    adapt_beta, aux_phase, collect_rollouts, episode_seed, hybrid_rewards, policy_phase, prepare_batches,
    sample_rows, value_phase, DiscSnapshot, PpoConfig, RolloutSpec, Trajectory,
};
use crate::rng::{rng_at, STREAM_EXPERT_BATCH, STREAM_INIT};
use crate::sim2d::gap::RealityGapConfig;
use crate::sim2d::task::TaskSpec;

pub const CHECKPOINT_KIND: &str = "rial-trainer-1";
pub const DEFAULT_SCRIPTED_SEED: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Full,
    /// Task reward only; no discriminator is built.
    RlOnly,
    /// Imitation reward only.
    GailOnly,
}

impl Mode {
    pub fn parse(s: &str) -> Result<(Self, bool)> {
        Ok(match s {
            "full" => (Mode::Full, false),
            "rl_only" => (Mode::RlOnly, false),
            "gail_only" => (Mode::GailOnly, false),
            // the curriculum baseline is a flag, accepted here for convenience
            "no_curriculum" => (Mode::Full, true),
            _ => return Err(Error::Config(format!("unknown mode `{s}`"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::RlOnly => "rl_only",
            Mode::GailOnly => "gail_only",
        }
    }

    fn forced_lambda(self) -> Option<f64> {
        match self {
            Mode::Full => None,
            Mode::RlOnly => Some(0.0),
            Mode::GailOnly => Some(1.0),
        }
    }
}

/// Single-component removals; all of them compose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    pub no_curriculum: bool,
    pub value_from_pixels: bool,
    pub no_disc_mask: bool,
    pub disc_with_actions: bool,
    pub no_aux: bool,
    pub no_lstm: bool,
}

impl Ablations {
    const KEYS: [&'static str; 6] = [
        "no_curriculum",
        "value_from_pixels",
        "no_disc_mask",
        "disc_with_actions",
        "no_aux",
        "no_lstm",
    ];

    fn flags(&self) -> [bool; 6] {
        [
            self.no_curriculum,
            self.value_from_pixels,
            self.no_disc_mask,
            self.disc_with_actions,
            self.no_aux,
            self.no_lstm,
        ]
    }

    /// Names of the enabled flags, for logs.
    pub fn enabled(&self) -> Vec<&'static str> {
        Self::KEYS
            .iter()
            .zip(self.flags())
            .filter(|(_, on)| *on)
            .map(|(k, _)| *k)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DemoSpec {
    None,
    /// Generate with the scripted expert from this seed on.
    Scripted { first_seed: u64 },
    /// A saved dataset file or a directory of them.
    Path(PathBuf),
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub mode: Mode,
    pub ablations: Ablations,
    pub ppo: PpoConfig,
    pub hybrid: HybridRewardConfig,
    pub gap: RealityGapConfig,
    pub epsilon: f64,
    pub seed: u64,
    pub iterations: u64,
    pub checkpoint_every: u64,
    pub demos: DemoSpec,
    pub n_demos: usize,
    /// Consecutive aborted iterations tolerated before giving up.
    pub max_aborts: u32,
    /// Input keys, kept for the frozen copy.
    pub source: KvMap,
}

const KNOWN_KEYS: &[&str] = &[
    "task",
    "mode",
    "lambda",
    "gail_reward_clip",
    "ablation.*",
    "curriculum.epsilon",
    "seed",
    "iterations",
    "checkpoint_every",
    "demos",
    "demos.n",
    "max_aborts",
    "ppo.*",
    "gap.*",
    "start.*",
    "arm.*",
];

impl RunConfig {
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        kv.check_known(KNOWN_KEYS)?;
        let task = TaskSpec::from_config(kv)?;
        let (mode, mode_no_curr) = Mode::parse(kv.get_str("mode").unwrap_or("full"))?;
        let mut ab = Ablations::default();
        for (k, slot) in Ablations::KEYS.iter().zip([
            &mut ab.no_curriculum,
            &mut ab.value_from_pixels,
            &mut ab.no_disc_mask,
            &mut ab.disc_with_actions,
            &mut ab.no_aux,
            &mut ab.no_lstm,
        ]) {
            *slot = kv.get_bool(&format!("ablation.{k}"), false)?;
        }
        ab.no_curriculum |= mode_no_curr;
        let mut hybrid = HybridRewardConfig {
            lambda: kv.get_f64("lambda", 0.5)?,
            gail_reward_clip: kv.get_f64("gail_reward_clip", DEFAULT_GAIL_CLIP)?,
        };
        if let Some(l) = mode.forced_lambda() {
            if kv.contains("lambda") && hybrid.lambda != l {
                return Err(Error::Config(format!(
                    "mode {} fixes lambda = {l}, config sets {}",
                    mode.name(),
                    hybrid.lambda
                )));
            }
            hybrid.lambda = l;
        }
        hybrid.validate()?;
        let demos = match kv.get_str("demos") {
            None | Some("") | Some("none") => DemoSpec::None,
            Some("scripted") => DemoSpec::Scripted {
                first_seed: DEFAULT_SCRIPTED_SEED,
            },
            Some(p) => DemoSpec::Path(PathBuf::from(p)),
        };
        let c = Self {
            task,
            mode,
            ablations: ab,
            ppo: PpoConfig::from_config(kv)?,
            hybrid,
            gap: RealityGapConfig::from_config(kv, RealityGapConfig::off())?,
            epsilon: kv.get_f64("curriculum.epsilon", DEFAULT_EPSILON)?,
            seed: kv.get_u64("seed", 0)?,
            iterations: kv.get_u64("iterations", 100)?,
            checkpoint_every: kv.get_u64("checkpoint_every", 10)?,
            demos,
            n_demos: kv.get_usize("demos.n", 30)?,
            max_aborts: kv.get_u64("max_aborts", 5)? as u32,
            source: kv.clone(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("curriculum epsilon {} outside [0, 1]", self.epsilon)));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        if self.needs_demos() && self.demos == DemoSpec::None {
            return Err(Error::Config(format!(
                "mode {} with flags [{}] needs demonstrations; set `demos`",
                self.mode.name(),
                self.ablations.enabled().join(", ")
            )));
        }
        if self.ablations.disc_with_actions && self.mode == Mode::RlOnly {
            tracing::warn!("disc_with_actions has no effect without a discriminator");
        }
        Ok(())
    }

    pub fn uses_discriminator(&self) -> bool {
        self.mode != Mode::RlOnly
    }

    pub fn uses_curriculum(&self) -> bool {
        !self.ablations.no_curriculum
    }

    pub fn needs_demos(&self) -> bool {
        self.uses_discriminator() || self.uses_curriculum()
    }

    pub fn disc_input(&self) -> DiscInput {
        if self.ablations.no_disc_mask {
            DiscInput::Privileged
        } else {
            DiscInput::ObjectCentric
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            lstm: !self.ablations.no_lstm,
            aux_head: !self.ablations.no_aux,
            value_head: self.ablations.value_from_pixels,
            ..PolicyConfig::for_task(&self.task)
        }
    }

    /// Input keys plus every resolved run-level value.
    pub fn resolved(&self) -> KvMap {
        let mut kv = self.source.clone();
        let p = &self.ppo;
        kv.set("task", self.task.name());
        kv.set("mode", self.mode.name());
        kv.set("lambda", self.hybrid.lambda);
        kv.set("gail_reward_clip", self.hybrid.gail_reward_clip);
        for (k, on) in Ablations::KEYS.iter().zip(self.ablations.flags()) {
            kv.set(&format!("ablation.{k}"), on);
        }
        kv.set("curriculum.epsilon", self.epsilon);
        kv.set("seed", self.seed);
        kv.set("iterations", self.iterations);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set("demos.n", self.n_demos);
        kv.set("max_aborts", self.max_aborts);
        match &self.demos {
            DemoSpec::None => kv.set("demos", "none"),
            DemoSpec::Scripted { .. } => kv.set("demos", "scripted"),
            DemoSpec::Path(p) => kv.set("demos", p.display()),
        }
        kv.set("ppo.gamma", p.gamma);
        kv.set("ppo.k", p.k);
        kv.set("ppo.kl_target", p.kl_target);
        kv.set("ppo.beta_init", p.beta_init);
        kv.set("ppo.beta_min", p.beta_min);
        kv.set("ppo.beta_max", p.beta_max);
        kv.set("ppo.n_policy_updates", p.n_policy_updates);
        kv.set("ppo.n_value_updates", p.n_value_updates);
        kv.set("ppo.n_disc_updates", p.n_disc_updates);
        kv.set("ppo.n_aux_updates", p.n_aux_updates);
        kv.set("ppo.n_workers", p.n_workers);
        kv.set("ppo.policy_lr", p.policy_lr);
        kv.set("ppo.value_lr", p.value_lr);
        kv.set("ppo.aux_lr", p.aux_lr);
        kv.set("ppo.disc_lr", p.disc_lr);
        kv.set("ppo.printed_bootstrap", p.printed_bootstrap);
        let g = &self.gap;
        kv.set("gap.pixel_obs_hz", g.pixel_obs_hz);
        kv.set("gap.proprio_obs_hz", g.proprio_obs_hz);
        kv.set("gap.proprio_noise_sigma", g.proprio_noise_sigma);
        kv.set("gap.pixel_noise_range", g.pixel_noise_range);
        kv.set("gap.action_drop_prob", g.action_drop_prob);
        kv.set("gap.visual_randomization", g.visual_randomization);
        kv.set("gap.dynamics_randomization", g.dynamics_randomization);
        kv.set("gap.dynamics_range", g.dynamics_range);
        kv
    }

    pub fn load_demos(&self) -> Result<Option<DemoDataset>> {
        let ds = match &self.demos {
            DemoSpec::None => return Ok(None),
            DemoSpec::Scripted { first_seed } => build_dataset(
                &self.task,
                self.n_demos,
                DatasetSource::Scripted {
                    first_seed: *first_seed,
                    max_attempts: self.n_demos * 4 + 10,
                },
                0,
            )?,
            DemoSpec::Path(p) if p.is_dir() => build_dataset(&self.task, self.n_demos, DatasetSource::Directory(p), 0)?,
            DemoSpec::Path(p) => {
                if !p.exists() {
                    return Err(Error::Dataset(format!("demonstration file {} not found", p.display())));
                }
                let ds = DemoDataset::load(p)?;
                ds.check_task(&self.task)?;
                ds
            }
        };
        if ds.episodes.is_empty() {
            return Err(Error::Dataset("demonstration dataset is empty".into()));
        }
        if self.uses_discriminator() && self.ablations.disc_with_actions && !ds.has_actions() {
            return Err(Error::Dataset("disc_with_actions needs demonstrator actions".into()));
        }
        Ok(Some(ds))
    }
}

/// One metrics row per iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterMetrics {
    pub iteration: u64,
    pub env_steps: u64,
    pub mean_task_return: f64,
    pub mean_gail_return: f64,
    pub mean_hybrid_return: f64,
    pub success_rate: f64,
    pub frac_random_starts: f64,
    pub kl: f64,
    pub beta: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub aux_loss: f64,
    pub disc_loss: f64,
    pub drop_events: u64,
    pub faults: u32,
    pub aborted: bool,
    pub wall_clock: f64,
}

impl IterMetrics {
    /// Every column except wall-clock time, as bit patterns.
    pub fn fingerprint(&self) -> Vec<u64> {
        vec![
            self.iteration,
            self.env_steps,
            self.mean_task_return.to_bits(),
            self.mean_gail_return.to_bits(),
            self.mean_hybrid_return.to_bits(),
            self.success_rate.to_bits(),
            self.frac_random_starts.to_bits(),
            self.kl.to_bits(),
            self.beta.to_bits(),
            self.policy_loss.to_bits(),
            self.value_loss.to_bits(),
            self.aux_loss.to_bits(),
            self.disc_loss.to_bits(),
            self.drop_events,
            self.faults as u64,
            self.aborted as u64,
        ]
    }
}

pub struct DiscState {
    pub net: DiscriminatorNet,
    pub adam: AdamState<f32>,
    pub norm: RunningNorm,
    /// Expert rows built from demonstration states reached by an action.
    pub expert_pool: Vec<f64>,
}

#[derive(Clone)]
struct Snapshot {
    policy: rial_nnkit::ParamStore<f32>,
    policy_adam: AdamState<f32>,
    aux_adam: Option<AdamState<f32>>,
    value: Option<(rial_nnkit::ParamStore<f32>, AdamState<f32>)>,
    disc: Option<(rial_nnkit::ParamStore<f32>, AdamState<f32>, RunningNorm)>,
    beta: f64,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub policy: VisuomotorPolicy,
    pub policy_adam: AdamState<f32>,
    pub aux_adam: Option<AdamState<f32>>,
    pub value: Option<(ValueNet, AdamState<f32>)>,
    pub disc: Option<DiscState>,
    pub demos: Option<DemoDataset>,
    pub curriculum: Option<CurriculumClusters>,
    pub beta: f64,
    /// Next iteration to run.
    pub iteration: u64,
    pub env_steps: u64,
    pub best_return: f64,
    consecutive_aborts: u32,
}

/// Discriminator input rows for every demonstrated transition.
pub fn expert_rows(task: &TaskSpec, ds: &DemoDataset, input: DiscInput, with_actions: bool) -> Result<Vec<f64>> {
    let mut rows = Vec::new();
    for ep in &ds.episodes {
        for t in 0..ep.steps.len().saturating_sub(1) {
            rows.extend(input.features(task, &ep.steps[t + 1].state));
            if with_actions {
                let a = ep.steps[t]
                    .action
                    .as_ref()
                    .ok_or_else(|| Error::Dataset("demonstration step without an action".into()))?;
                rows.extend(a.iter().map(|v| v.clamp(-1.0, 1.0)));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Dataset("demonstrations contain no transitions".into()));
    }
    Ok(rows)
}

impl Trainer {
    /// Builds fresh networks. Demonstrations are loaded and validated here,
    /// before any network is constructed.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let demos = cfg.load_demos()?;
        let task = &cfg.task;
        let curriculum = match (&demos, cfg.uses_curriculum()) {
            (Some(ds), true) => Some(cluster_by_stage(task, ds, cfg.epsilon)?),
            _ => None,
        };
        let pcfg = cfg.policy_config();
        let policy = VisuomotorPolicy::new(pcfg.clone(), &mut rng_at(cfg.seed, STREAM_INIT, 0))?;
        let pnames = pcfg.policy_param_names(&policy.store);
        let pnames: Vec<&str> = pnames.iter().map(String::as_str).collect();
        let policy_adam = AdamState::for_params(&policy.store, &pnames, AdamConfig::with_lr(cfg.ppo.policy_lr))?;
        let aux_adam = if pcfg.aux_head {
            let names = pcfg.aux_param_names();
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            Some(AdamState::for_params(&policy.store, &names, AdamConfig::with_lr(cfg.ppo.aux_lr))?)
        } else {
            None
        };
        let value = if pcfg.value_head {
            None
        } else {
            let v = ValueNet::new(task.privileged_dim(), &mut rng_at(cfg.seed, STREAM_INIT, 1))?;
            let a = AdamState::new(&v.store, AdamConfig::with_lr(cfg.ppo.value_lr));
            Some((v, a))
        };
        let disc = match (&demos, cfg.uses_discriminator()) {
            (Some(ds), true) => {
                let input = cfg.disc_input();
                let with_a = cfg.ablations.disc_with_actions;
                let adim = if with_a { task.arm.action_dim() } else { 0 };
                let net = DiscriminatorNet::new(input.dim(task), adim, &mut rng_at(cfg.seed, STREAM_INIT, 2))?;
                let adam = AdamState::new(&net.store, AdamConfig::with_lr(cfg.ppo.disc_lr));
                let expert_pool = expert_rows(task, ds, input, with_a)?;
                let mut norm = RunningNorm::new(net.input_dim());
                norm.update(&expert_pool);
                Some(DiscState {
                    net,
                    adam,
                    norm,
                    expert_pool,
                })
            }
            _ => None,
        };
        Ok(Self {
            beta: cfg.ppo.beta_init,
            cfg,
            policy,
            policy_adam,
            aux_adam,
            value,
            disc,
            demos,
            curriculum,
            iteration: 0,
            env_steps: 0,
            best_return: f64::NEG_INFINITY,
            consecutive_aborts: 0,
        })
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            policy: self.policy.store.clone(),
            policy_adam: self.policy_adam.clone(),
            aux_adam: self.aux_adam.clone(),
            value: self.value.as_ref().map(|(v, a)| (v.store.clone(), a.clone())),
            disc: self.disc.as_ref().map(|d| (d.net.store.clone(), d.adam.clone(), d.norm.clone())),
            beta: self.beta,
        }
    }

    fn restore(&mut self, s: Snapshot) {
        self.policy.store = s.policy;
        self.policy_adam = s.policy_adam;
        self.aux_adam = s.aux_adam;
        if let (Some((v, a)), Some((vs, va))) = (self.value.as_mut(), s.value) {
            v.store = vs;
            *a = va;
        }
        if let (Some(d), Some((ds, da, dn))) = (self.disc.as_mut(), s.disc) {
            d.net.store = ds;
            d.adam = da;
            d.norm = dn;
        }
        self.beta = s.beta;
    }

    /// Seeds of this iteration's episodes, one per worker.
    pub fn episode_seeds(&self, iteration: u64) -> Vec<u64> {
        (0..self.cfg.ppo.n_workers as u64)
            .map(|w| episode_seed(self.cfg.seed, iteration, w))
            .collect()
    }

    pub fn collect(&self, iteration: u64) -> Result<Vec<Trajectory>> {
        let spec = RolloutSpec {
            task: &self.cfg.task,
            gap: &self.cfg.gap,
            policy: &self.policy,
            disc: self.disc.as_ref().map(|d| DiscSnapshot {
                net: &d.net,
                norm: &d.norm,
                clip: self.cfg.hybrid.gail_reward_clip,
            }),
            disc_input: self.cfg.disc_input(),
            disc_actions: self.cfg.ablations.disc_with_actions,
            curriculum: match (&self.curriculum, &self.demos) {
                (Some(c), Some(d)) => Some((c, d)),
                _ => None,
            },
            k: self.cfg.ppo.k,
        };
        collect_rollouts(&spec, &self.episode_seeds(iteration))
    }

    /// Runs one iteration. A non-finite quantity during the updates restores
    /// the pre-iteration networks and marks the row as aborted.
    pub fn iterate(&mut self) -> Result<IterMetrics> {
        let t0 = Instant::now();
        let it = self.iteration;
        let trajs = self.collect(it)?;
        let mut m = self.rollout_metrics(&trajs);
        let snap = self.snapshot();
        match self.update(it, &trajs, &mut m) {
            Ok(()) => self.consecutive_aborts = 0,
            Err(Error::NonFinite(what)) => {
                tracing::error!(iteration = it, %what, "non-finite value, iteration aborted and networks restored");
                self.restore(snap);
                self.consecutive_aborts += 1;
                m.aborted = true;
                if self.consecutive_aborts > self.cfg.max_aborts {
                    return Err(Error::NonFinite(format!(
                        "{what}; {} consecutive iterations aborted",
                        self.consecutive_aborts
                    )));
                }
            }
            Err(e) => return Err(e),
        }
        self.env_steps += trajs.iter().map(|t| t.len as u64).sum::<u64>();
        m.env_steps = self.env_steps;
        m.beta = self.beta;
        m.wall_clock = t0.elapsed().as_secs_f64();
        self.iteration += 1;
        Ok(m)
    }

    fn rollout_metrics(&self, trajs: &[Trajectory]) -> IterMetrics {
        let n = trajs.len().max(1) as f64;
        let fin = self.cfg.task.final_stage();
        let mean = |f: &dyn Fn(&Trajectory) -> f64| trajs.iter().map(f).sum::<f64>() / n;
        IterMetrics {
            iteration: self.iteration,
            env_steps: 0,
            mean_task_return: mean(&|t| t.task_return()),
            mean_gail_return: mean(&|t| t.r_gail.iter().sum()),
            mean_hybrid_return: mean(&|t| hybrid_rewards(t, &self.cfg.hybrid).iter().sum()),
            success_rate: mean(&|t| (t.max_stage() == fin) as u8 as f64),
            frac_random_starts: mean(&|t| (t.start == StartChoice::Random) as u8 as f64),
            kl: f64::NAN,
            beta: self.beta,
            policy_loss: f64::NAN,
            value_loss: f64::NAN,
            aux_loss: f64::NAN,
            disc_loss: f64::NAN,
            drop_events: trajs.iter().map(|t| t.dropped).sum(),
            faults: trajs.iter().map(|t| t.faults).sum(),
            aborted: false,
            wall_clock: 0.0,
        }
    }

    fn update(&mut self, it: u64, trajs: &[Trajectory], m: &mut IterMetrics) -> Result<()> {
        let ppo = self.cfg.ppo.clone();
        let values: Vec<Vec<f64>> = match &self.value {
            Some((v, _)) => trajs.iter().map(|t| v.predict(&t.privileged)).collect::<Result<_>>()?,
            None => trajs.iter().map(|t| t.pixel_values.clone()).collect(),
        };
        let (batches, targets) = prepare_batches(trajs, &values, &self.cfg.hybrid, &ppo)?;
        let (parts, kl) = policy_phase(&mut self.policy, &mut self.policy_adam, &batches, self.beta, ppo.n_policy_updates)?;
        m.policy_loss = parts.loss;
        m.kl = kl;
        self.beta = adapt_beta(self.beta, kl, &ppo);
        m.value_loss = match self.value.as_mut() {
            Some((v, adam)) => {
                let feats: Vec<f32> = trajs.iter().flat_map(|t| t.privileged.iter().map(|&x| x as f32)).collect();
                let tg: Vec<f32> = targets.iter().flatten().map(|&x| x as f32).collect();
                value_phase(v, adam, &feats, &tg, ppo.n_value_updates)?
            }
            None => parts.pixel_value_loss,
        };
        m.aux_loss = match self.aux_adam.as_mut() {
            Some(adam) => aux_phase(&mut self.policy, adam, &batches, ppo.n_aux_updates)?,
            None => 0.0,
        };
        m.disc_loss = match self.disc.as_mut() {
            Some(d) => {
                let dim = d.net.input_dim();
                let policy_rows: Vec<f64> = trajs.iter().flat_map(|t| t.disc_rows.iter().copied()).collect();
                let n = policy_rows.len() / dim;
                let mut rng = rng_at(self.cfg.seed, STREAM_EXPERT_BATCH, it);
                let batch = DiscriminatorBatch {
                    dim,
                    expert: sample_rows(&d.expert_pool, dim, n, &mut rng),
                    policy: policy_rows,
                };
                let trace = discriminator_update(&mut d.net, &mut d.adam, &batch, &d.norm, ppo.n_disc_updates)?;
                d.norm.update(&batch.policy);
                trace.first().copied().unwrap_or(f64::NAN)
            }
            None => 0.0,
        };
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", CHECKPOINT_KIND);
        ck.set_meta("task", self.cfg.task.name());
        ck.set_meta("config", self.cfg.resolved().to_text());
        ck.set_meta(
            "policy_config",
            serde_json::to_string(&self.policy.cfg).expect("plain struct"),
        );
        ck.set_meta("policy_arch", self.policy.cfg.arch());
        ck.set_meta("iteration", self.iteration);
        ck.set_meta("env_steps", self.env_steps);
        ck.set_meta("beta", self.beta.to_bits());
        ck.set_meta("best_return", self.best_return.to_bits());
        ck.put_store("policy", &self.policy.store);
        ck.put_adam("adam.policy", &self.policy_adam);
        if let Some(a) = &self.aux_adam {
            ck.put_adam("adam.aux", a);
        }
        if let Some((v, a)) = &self.value {
            ck.set_meta("value_arch", v.arch());
            ck.put_store("value", &v.store);
            ck.put_adam("adam.value", a);
        }
        if let Some(d) = &self.disc {
            ck.set_meta("disc_arch", d.net.arch());
            ck.set_meta("disc_norm", serde_json::to_string(&d.norm.to_vec()).expect("numbers"));
            ck.put_store("disc", &d.net.store);
            ck.put_adam("adam.disc", &d.adam);
        }
        ck
    }

    /// Rebuilds a trainer for `cfg` and loads the networks, optimizer moments
    /// and counters saved in `ck`.
    pub fn from_checkpoint(cfg: RunConfig, ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != CHECKPOINT_KIND {
            return Err(Error::Config("not a trainer checkpoint".into()));
        }
        let mut t = Self::new(cfg)?;
        let arch = ck.meta("policy_arch")?;
        if arch != t.policy.cfg.arch() {
            return Err(Error::Config(format!(
                "checkpoint policy `{arch}` does not match configured `{}`",
                t.policy.cfg.arch()
            )));
        }
        ck.load_store("policy", &mut t.policy.store)?;
        ck.load_adam("adam.policy", &mut t.policy_adam)?;
        if let Some(a) = t.aux_adam.as_mut() {
            ck.load_adam("adam.aux", a)?;
        }
        if let Some((v, a)) = t.value.as_mut() {
            if ck.meta("value_arch")? != v.arch() {
                return Err(Error::Config("checkpoint value network does not match".into()));
            }
            ck.load_store("value", &mut v.store)?;
            ck.load_adam("adam.value", a)?;
        }
        match (t.disc.as_mut(), ck.meta.contains_key("disc_arch")) {
            (Some(d), true) => {
                if ck.meta("disc_arch")? != d.net.arch() {
                    return Err(Error::Config("checkpoint discriminator does not match".into()));
                }
                ck.load_store("disc", &mut d.net.store)?;
                ck.load_adam("adam.disc", &mut d.adam)?;
                let v: Vec<f64> = serde_json::from_str(ck.meta("disc_norm")?)
                    .map_err(|e| Error::Decode(format!("discriminator normalizer: {e}")))?;
                d.norm = RunningNorm::from_vec(d.net.input_dim(), &v)?;
            }
            (None, false) => {}
            _ => return Err(Error::Config("checkpoint and configuration disagree on the discriminator".into())),
        }
        let num = |k: &str| -> Result<u64> {
            ck.meta(k)?
                .parse()
                .map_err(|_| Error::Decode(format!("checkpoint metadata `{k}`")))
        };
        t.iteration = num("iteration")?;
        t.env_steps = num("env_steps")?;
        t.beta = f64::from_bits(num("beta")?);
        t.best_return = f64::from_bits(num("best_return")?);
        Ok(t)
    }
}

/// Run configuration stored in a checkpoint.
pub fn checkpoint_config(ck: &Checkpoint) -> Result<KvMap> {
    KvMap::parse_str(ck.meta("config")?)
}

/// Loads the deployable policy from any trainer checkpoint and checks it
/// against `task`.
pub fn load_policy(ck: &Checkpoint, task: &TaskSpec) -> Result<VisuomotorPolicy> {
    let pcfg: PolicyConfig = serde_json::from_str(ck.meta("policy_config")?)
        .map_err(|e| Error::Decode(format!("policy configuration: {e}")))?;
    let expect = PolicyConfig::for_task(task);
    if ck.meta("task")? != task.name()
        || pcfg.action_dim != expect.action_dim
        || pcfg.proprio_dim != expect.proprio_dim
        || pcfg.aux_dim != expect.aux_dim
    {
        return Err(Error::Config(format!(
            "checkpoint `{}` ({}) does not fit task {}",
            ck.meta("policy_arch")?,
            ck.meta("task")?,
            task.name()
        )));
    }
    let mut store = rial_nnkit::ParamStore::new();
    pcfg.register(&mut store, &mut rng_at(0, STREAM_INIT, 0))?;
    ck.load_store("policy", &mut store)?;
    Ok(VisuomotorPolicy { cfg: pcfg, store })
}

/// Exclusive claim on an output directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is in use by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.resolved")
    }
    pub fn latest(&self) -> PathBuf {
        self.dir.join("latest.ck")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ck")
    }
    pub fn periodic(&self, iteration: u64) -> PathBuf {
        self.dir.join("checkpoints").join(format!("iter_{iteration:06}.ck"))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<IterMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Decode(format!("{}: {e}", path.display()))))
        .collect()
}

fn write_metrics(path: &Path, rows: &[IterMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Decode(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Decode(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

struct MetricsLog {
    w: csv::Writer<File>,
}

impl MetricsLog {
    fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        let w = csv::WriterBuilder::new().has_headers(fresh).from_writer(f);
        Ok(Self { w })
    }

    fn push(&mut self, m: &IterMetrics) -> Result<()> {
        self.w.serialize(m).map_err(|e| Error::Decode(e.to_string()))?;
        self.w.flush()?;
        Ok(())
    }
}

/// Trains into `dir` until `cfg.iterations`, optionally resuming from the
/// directory's latest checkpoint. Returns the rows written by this call.
pub fn run_training(cfg: RunConfig, dir: &Path, resume: bool) -> Result<Vec<IterMetrics>> {
    let paths = RunPaths::new(dir);
    let _lock = RunLock::acquire(dir)?;
    let mut trainer = if resume && paths.latest().exists() {
        let ck = Checkpoint::load(&paths.latest())?;
        let t = Trainer::from_checkpoint(cfg, &ck)?;
        if paths.metrics().exists() {
            let rows: Vec<_> = read_metrics(&paths.metrics())?
                .into_iter()
                .filter(|r| r.iteration < t.iteration)
                .collect();
            write_metrics(&paths.metrics(), &rows)?;
        }
        tracing::info!(iteration = t.iteration, "resumed");
        t
    } else {
        if paths.metrics().exists() || paths.latest().exists() {
            return Err(Error::Config(format!(
                "{} already holds a run; pass resume or choose another directory",
                dir.display()
            )));
        }
        Trainer::new(cfg)?
    };
    continue_training(&mut trainer, &paths)
}

/// Runs `trainer` to its configured iteration count, writing metrics and
/// checkpoints under `paths`.
pub fn continue_training(trainer: &mut Trainer, paths: &RunPaths) -> Result<Vec<IterMetrics>> {
    std::fs::create_dir_all(paths.dir.join("checkpoints"))?;
    std::fs::write(paths.config(), trainer.cfg.resolved().to_text())?;
    let mut log = MetricsLog::open(&paths.metrics())?;
    let mut rows = Vec::new();
    tracing::info!(
        task = trainer.cfg.task.name(),
        mode = trainer.cfg.mode.name(),
        flags = ?trainer.cfg.ablations.enabled(),
        "training"
    );
    while trainer.iteration < trainer.cfg.iterations {
        let m = trainer.iterate()?;
        log.push(&m)?;
        tracing::info!(
            iteration = m.iteration,
            task_return = m.mean_task_return,
            success = m.success_rate,
            kl = m.kl,
            beta = m.beta,
            "iteration"
        );
        if !m.aborted && m.mean_task_return > trainer.best_return {
            trainer.best_return = m.mean_task_return;
            trainer.checkpoint().save(&paths.best())?;
        }
        if trainer.iteration % trainer.cfg.checkpoint_every == 0 {
            let ck = trainer.checkpoint();
            ck.save(&paths.periodic(trainer.iteration))?;
            ck.save(&paths.latest())?;
        }
        rows.push(m);
    }
    trainer.checkpoint().save(&paths.latest())?;
    Ok(rows)
}

/// Continues a trained checkpoint with action dropping at `drop_prob` for
/// `iterations` more iterations.
pub fn finetune_action_drop(ck: &Checkpoint, iterations: u64, drop_prob: f64, dir: &Path) -> Result<Vec<IterMetrics>> {
    let mut kv = checkpoint_config(ck)?;
    let start: u64 = ck
        .meta("iteration")?
        .parse()
        .map_err(|_| Error::Decode("checkpoint iteration".into()))?;
    kv.set("gap.action_drop_prob", drop_prob);
    kv.set("iterations", start + iterations);
    let cfg = RunConfig::from_kv(&kv)?;
    let _lock = RunLock::acquire(dir)?;
    let paths = RunPaths::new(dir);
    if paths.metrics().exists() {
        return Err(Error::Config(format!("{} already holds a run", dir.display())));
    }
    let mut t = Trainer::from_checkpoint(cfg, ck)?;
    continue_training(&mut t, &paths)
}
