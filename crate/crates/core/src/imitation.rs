//! GAIL reward, hybrid reward mixing, discriminator training and the
//! behavior-cloning baseline.
//!
//! Label convention: the discriminator is trained towards 1 on expert data
//! and 0 on policy data, so `-ln(1 - D)` rewards policy samples it takes for
//! expert ones.

use rial_nnkit::{AdamState, Graph};
use serde::{Deserialize, Serialize};

use crate::demos::DemoDataset;
use crate::error::{Error, Result};
use crate::nets::policy::{forward, scale_pixels, SeqInput};
use crate::nets::{DiscriminatorNet, VisuomotorPolicy};
use crate::sim2d::state::PhysState;
use crate::sim2d::task::TaskSpec;

pub const DEFAULT_GAIL_CLIP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridRewardConfig {
    pub lambda: f64,
    pub gail_reward_clip: f64,
}

impl Default for HybridRewardConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            gail_reward_clip: DEFAULT_GAIL_CLIP,
        }
    }
}

impl HybridRewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.gail_reward_clip > 0.0) {
            return Err(Error::Config("GAIL reward clip must be positive".into()));
        }
        Ok(())
    }
}

/// `min(-ln(1 - prob), clip)`.
pub fn gail_reward(prob: f64, clip: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::Invalid(format!("discriminator probability {prob} outside [0, 1]")));
    }
    let r = -(-prob).ln_1p();
    Ok(if r.is_nan() { clip } else { r.min(clip) })
}

/// `lambda * r_gail + (1 - lambda) * r_task`.
pub fn hybrid_reward(cfg: &HybridRewardConfig, r_gail: f64, r_task: f64) -> f64 {
    cfg.lambda * r_gail + (1.0 - cfg.lambda) * r_task
}

/// Which state features the discriminator sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiscInput {
    /// Object poses and gripper-relative displacements, arm state masked.
    ObjectCentric,
    /// Full privileged layout including joint state.
    Privileged,
}

impl DiscInput {
    pub fn dim(self, task: &TaskSpec) -> usize {
        match self {
            DiscInput::ObjectCentric => task.object_centric_dim(),
            DiscInput::Privileged => task.privileged_dim(),
        }
    }

    pub fn features(self, task: &TaskSpec, s: &PhysState) -> Vec<f64> {
        match self {
            DiscInput::ObjectCentric => task.object_centric_features(s),
            DiscInput::Privileged => task.privileged_features(s),
        }
    }
}

/// Per-dimension running mean and variance (Welford). Normalization uses
/// whatever statistics the caller froze for the iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningNorm {
    pub count: f64,
    pub mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, rows: &[f64]) {
        let d = self.dim();
        for row in rows.chunks_exact(d) {
            self.count += 1.0;
            for (i, &x) in row.iter().enumerate() {
                let delta = x - self.mean[i];
                self.mean[i] += delta / self.count;
                self.m2[i] += delta * (x - self.mean[i]);
            }
        }
    }

    pub fn var(&self) -> Vec<f64> {
        if self.count < 2.0 {
            return vec![1.0; self.dim()];
        }
        self.m2.iter().map(|m| m / self.count).collect()
    }

    pub fn normalize(&self, rows: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let inv: Vec<f64> = self.var().iter().map(|v| 1.0 / (v + 1e-8).sqrt()).collect();
        rows.chunks_exact(d)
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(i, &x)| (x - self.mean[i]) * inv[i])
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Serialized as `count, mean.., m2..` for checkpoints.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.count];
        v.extend(&self.mean);
        v.extend(&self.m2);
        v
    }

    pub fn from_vec(dim: usize, v: &[f64]) -> Result<Self> {
        if v.len() != 1 + 2 * dim {
            return Err(Error::Shape(format!("normalizer of dim {dim} from {} values", v.len())));
        }
        Ok(Self {
            count: v[0],
            mean: v[1..1 + dim].to_vec(),
            m2: v[1 + dim..].to_vec(),
        })
    }
}

/// Flat rows of discriminator inputs, expert and policy sides.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorBatch {
    pub dim: usize,
    pub expert: Vec<f64>,
    pub policy: Vec<f64>,
}

impl DiscriminatorBatch {
    pub fn validate(&self) -> Result<()> {
        if self.expert.is_empty() || self.policy.is_empty() {
            return Err(Error::Invalid("discriminator batch needs expert and policy samples".into()));
        }
        if self.dim == 0 || self.expert.len() % self.dim != 0 || self.policy.len() % self.dim != 0 {
            return Err(Error::Shape(format!("discriminator rows are not {}-wide", self.dim)));
        }
        Ok(())
    }

    pub fn n_expert(&self) -> usize {
        self.expert.len() / self.dim
    }

    pub fn n_policy(&self) -> usize {
        self.policy.len() / self.dim
    }

    /// Normalized inputs with expert rows first, and their labels.
    fn stacked(&self, norm: &RunningNorm) -> (Vec<f32>, Vec<f32>) {
        let mut rows = norm.normalize(&self.expert);
        rows.extend(norm.normalize(&self.policy));
        let mut labels = vec![1.0f32; self.n_expert()];
        labels.resize(self.n_expert() + self.n_policy(), 0.0);
        (rows.into_iter().map(|v| v as f32).collect(), labels)
    }
}

/// Mean binary cross-entropy of the discriminator on `batch`.
pub fn discriminator_loss(net: &DiscriminatorNet, batch: &DiscriminatorBatch, norm: &RunningNorm) -> Result<f64> {
    batch.validate()?;
    let (rows, labels) = batch.stacked(norm);
    let mut g = Graph::new();
    let z = DiscriminatorNet::forward(net.input_dim(), &mut g, &net.store, &rows)?;
    let l = g.bce_with_logits(z, &labels)?;
    let l = g.mean(l);
    Ok(g.scalar(l) as f64)
}

/// `n_updates` full-batch Adam steps on the cross-entropy; returns the loss
/// before each step.
pub fn discriminator_update(
    net: &mut DiscriminatorNet,
    adam: &mut AdamState<f32>,
    batch: &DiscriminatorBatch,
    norm: &RunningNorm,
    n_updates: usize,
) -> Result<Vec<f64>> {
    batch.validate()?;
    if batch.dim != net.input_dim() {
        return Err(Error::Shape(format!(
            "batch rows are {}-wide, discriminator takes {}",
            batch.dim,
            net.input_dim()
        )));
    }
    let (rows, labels) = batch.stacked(norm);
    let mut trace = Vec::with_capacity(n_updates);
    for _ in 0..n_updates {
        let mut g = Graph::new();
        let z = DiscriminatorNet::forward(net.input_dim(), &mut g, &net.store, &rows)?;
        let l = g.bce_with_logits(z, &labels)?;
        let l = g.mean(l);
        let loss = g.scalar(l) as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("discriminator loss".into()));
        }
        trace.push(loss);
        let grads = g.backward(l)?.params(&g);
        net.store.clear_grads();
        net.store.accumulate_grads(&grads)?;
        adam.update(&mut net.store)?;
    }
    Ok(trace)
}

/// Fraction of rows classified on the correct side of 0.5.
pub fn discriminator_accuracy(net: &DiscriminatorNet, batch: &DiscriminatorBatch, norm: &RunningNorm) -> Result<f64> {
    batch.validate()?;
    let e = net.predict(&norm.normalize(&batch.expert))?;
    let p = net.predict(&norm.normalize(&batch.policy))?;
    let ok = e.iter().filter(|(_, d)| *d > 0.5).count() + p.iter().filter(|(_, d)| *d <= 0.5).count();
    Ok(ok as f64 / (e.len() + p.len()) as f64)
}

/// Mean negative log-likelihood of the demonstrated actions, each episode
/// unrolled as one sequence from a zero recurrent state.
pub fn behavior_clone_loss(policy: &VisuomotorPolicy, ds: &DemoDataset) -> Result<(Graph<f32>, rial_nnkit::Var)> {
    if !ds.has_actions() {
        return Err(Error::Dataset("behavior cloning needs demonstrator actions".into()));
    }
    let cfg = &policy.cfg;
    let (mut px, mut pr, mut acts, mut lens) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for ep in &ds.episodes {
        let n = ep.steps.len() - 1;
        for s in &ep.steps[..n] {
            let a = s.action.as_ref().expect("checked by has_actions");
            if a.len() != cfg.action_dim {
                return Err(Error::Shape(format!("demo action of length {}", a.len())));
            }
            px.extend(scale_pixels::<f32>(&s.obs.pixels));
            pr.extend(s.obs.proprio.iter().map(|&v| v as f32));
            acts.extend(a.iter().map(|&v| v as f32));
        }
        lens.push(n);
    }
    let hw = cfg.state_width();
    let zeros = vec![0.0f32; lens.len() * hw];
    let mut g = Graph::new();
    let out = forward(
        cfg,
        &mut g,
        &policy.store,
        &SeqInput {
            pixels: &px,
            proprio: &pr,
            seg_lens: &lens,
            h0: &zeros,
            c0: &zeros,
        },
    )?;
    let lp = g.gaussian_log_prob(out.mean, out.log_std, &acts)?;
    let m = g.mean(lp);
    let loss = g.scale(m, -1.0);
    Ok((g, loss))
}

/// Full-batch maximum-likelihood training on the demonstrations; returns
/// the loss before each epoch.
pub fn behavior_clone(
    policy: &mut VisuomotorPolicy,
    adam: &mut AdamState<f32>,
    ds: &DemoDataset,
    epochs: usize,
) -> Result<Vec<f64>> {
    let mut trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let (g, loss) = behavior_clone_loss(policy, ds)?;
        let l = g.scalar(loss) as f64;
        if !l.is_finite() {
            return Err(Error::NonFinite("behavior cloning loss".into()));
        }
        trace.push(l);
        let grads = g.backward(loss)?.params(&g);
        policy.store.clear_grads();
        policy.store.accumulate_grads(&grads)?;
        // the optimizer may own a subset; drop gradients it does not use
        adam.update(&mut policy.store)?;
        policy.store.clear_grads();
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_examples() {
        assert_eq!(gail_reward(0.0, 10.0).unwrap(), 0.0);
        assert!((gail_reward(0.5, 10.0).unwrap() - 0.693_147_180_56).abs() < 1e-10);
        assert_eq!(gail_reward(1.0 - 1e-9, 10.0).unwrap(), 10.0);
        assert_eq!(gail_reward(1.0, 10.0).unwrap(), 10.0);
        assert!(gail_reward(1.5, 10.0).is_err());
        assert!(gail_reward(f64::NAN, 10.0).is_err());
        let cfg = HybridRewardConfig::default();
        assert!((hybrid_reward(&cfg, 0.6931, 1.0) - 0.84655).abs() < 1e-12);
    }

    #[test]
    fn normalizer_matches_batch_moments() {
        let mut n = RunningNorm::new(2);
        n.update(&[1.0, 10.0, 3.0, 30.0, 5.0, 20.0]);
        assert!((n.mean[0] - 3.0).abs() < 1e-12 && (n.mean[1] - 20.0).abs() < 1e-12);
        let v = n.var();
        assert!((v[0] - 8.0 / 3.0).abs() < 1e-12);
        let back = RunningNorm::from_vec(2, &n.to_vec()).unwrap();
        assert_eq!(back, n);
    }
}
