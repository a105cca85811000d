//! Reality-gap wrapper: slower observation rates, sensor noise, per-episode
//! visual and dynamics randomization, and stochastic action dropping.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::env::{Env, Observation, SimEnv, StepResult};
use super::physics::{sanitize_action, CONTROL_HZ};
use super::render::{VisualParams, VisualRanges};
use super::state::PhysState;
use super::task::TaskSpec;
use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::rng::{
    rng_at, STREAM_ACTION_DROP, STREAM_DYNAMICS, STREAM_PIXEL_NOISE, STREAM_PROPRIO_NOISE,
    STREAM_VISUAL,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealityGapConfig {
    pub pixel_obs_hz: u32,
    pub proprio_obs_hz: u32,
    pub control_hz: u32,
    pub proprio_noise_sigma: f64,
    /// Pixel noise is uniform over `[-pixel_noise_range, pixel_noise_range]`.
    pub pixel_noise_range: u8,
    pub action_drop_prob: f64,
    pub visual_randomization: bool,
    pub visual_ranges: VisualRanges,
    pub dynamics_randomization: bool,
    /// Multiplicative half-range for friction, damping, armature and gain.
    pub dynamics_range: f64,
}

impl Default for RealityGapConfig {
    fn default() -> Self {
        Self {
            pixel_obs_hz: 5,
            proprio_obs_hz: 10,
            control_hz: CONTROL_HZ,
            proprio_noise_sigma: 0.01,
            pixel_noise_range: 5,
            action_drop_prob: 0.0,
            visual_randomization: true,
            visual_ranges: VisualRanges::default(),
            dynamics_randomization: false,
            dynamics_range: 0.3,
        }
    }
}

impl RealityGapConfig {
    /// Every perturbation disabled; the wrapper is then the identity.
    pub fn off() -> Self {
        Self {
            pixel_obs_hz: CONTROL_HZ,
            proprio_obs_hz: CONTROL_HZ,
            proprio_noise_sigma: 0.0,
            pixel_noise_range: 0,
            action_drop_prob: 0.0,
            visual_randomization: false,
            dynamics_randomization: false,
            ..Self::default()
        }
    }

    /// Reads `gap.*` keys over `base`.
    pub fn from_config(kv: &KvMap, base: Self) -> Result<Self> {
        let mut c = base;
        c.pixel_obs_hz = kv.get_u64("gap.pixel_obs_hz", c.pixel_obs_hz as u64)? as u32;
        c.proprio_obs_hz = kv.get_u64("gap.proprio_obs_hz", c.proprio_obs_hz as u64)? as u32;
        c.proprio_noise_sigma = kv.get_f64("gap.proprio_noise_sigma", c.proprio_noise_sigma)?;
        c.pixel_noise_range = kv.get_u64("gap.pixel_noise_range", c.pixel_noise_range as u64)? as u8;
        c.action_drop_prob = kv.get_f64("gap.action_drop_prob", c.action_drop_prob)?;
        c.visual_randomization = kv.get_bool("gap.visual_randomization", c.visual_randomization)?;
        c.dynamics_randomization = kv.get_bool("gap.dynamics_randomization", c.dynamics_randomization)?;
        c.dynamics_range = kv.get_f64("gap.dynamics_range", c.dynamics_range)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("reality gap: {m}")));
        if self.control_hz != CONTROL_HZ {
            return bad(format!("control rate is fixed at {CONTROL_HZ} Hz"));
        }
        for (name, hz) in [("pixel", self.pixel_obs_hz), ("proprio", self.proprio_obs_hz)] {
            if hz == 0 || self.control_hz % hz != 0 {
                return bad(format!("{name} rate {hz} Hz must divide {}", self.control_hz));
            }
        }
        if !(self.pixel_obs_hz <= self.proprio_obs_hz && self.proprio_obs_hz <= self.control_hz) {
            return bad("rates must satisfy pixel <= proprio <= control".into());
        }
        if !(0.0..=1.0).contains(&self.action_drop_prob) {
            return bad(format!("drop probability {}", self.action_drop_prob));
        }
        if !(self.proprio_noise_sigma >= 0.0) {
            return bad("proprio noise must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.dynamics_range) {
            return bad("dynamics range must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn pixel_period(&self) -> usize {
        (self.control_hz / self.pixel_obs_hz) as usize
    }

    pub fn proprio_period(&self) -> usize {
        (self.control_hz / self.proprio_obs_hz) as usize
    }
}

#[derive(Clone, Debug)]
pub struct GapEnv {
    inner: SimEnv,
    cfg: RealityGapConfig,
    base_visual: VisualParams,
    base_dynamics: super::arm::Dynamics,
    seed: u64,
    held: Option<Observation>,
    last_executed: Vec<f64>,
    last_dropped: bool,
    drops: u64,
    decisions: u64,
}

impl GapEnv {
    pub fn new(inner: SimEnv, cfg: RealityGapConfig) -> Result<Self> {
        cfg.validate()?;
        let n = inner.arm.action_dim();
        Ok(Self {
            base_visual: inner.visual.clone(),
            base_dynamics: inner.arm.dynamics,
            inner,
            cfg,
            seed: 0,
            held: None,
            last_executed: vec![0.0; n],
            last_dropped: false,
            drops: 0,
            decisions: 0,
        })
    }

    pub fn config(&self) -> &RealityGapConfig {
        &self.cfg
    }

    pub fn set_action_drop_prob(&mut self, p: f64) -> Result<()> {
        let mut c = self.cfg.clone();
        c.action_drop_prob = p;
        c.validate()?;
        self.cfg = c;
        Ok(())
    }

    pub fn inner(&self) -> &SimEnv {
        &self.inner
    }

    /// Action executed on the latest step.
    pub fn last_executed(&self) -> &[f64] {
        &self.last_executed
    }

    pub fn last_dropped(&self) -> bool {
        self.last_dropped
    }

    /// `(dropped, decided)` action counts since construction.
    pub fn drop_counts(&self) -> (u64, u64) {
        (self.drops, self.decisions)
    }

    fn counter(&self) -> Result<u64> {
        Ok(self.inner.raw_state()?.rng_counter)
    }

    fn noisy_proprio(&self, mut p: Vec<f64>) -> Result<Vec<f64>> {
        if self.cfg.proprio_noise_sigma > 0.0 {
            let mut rng = rng_at(self.seed, STREAM_PROPRIO_NOISE, self.counter()?);
            let n = Normal::new(0.0, self.cfg.proprio_noise_sigma)
                .map_err(|e| Error::Config(e.to_string()))?;
            for v in &mut p {
                *v += n.sample(&mut rng);
            }
        }
        Ok(p)
    }

    fn noisy_pixels(&self, mut px: Vec<u8>) -> Result<Vec<u8>> {
        let r = self.cfg.pixel_noise_range as i16;
        if r > 0 {
            let mut rng = rng_at(self.seed, STREAM_PIXEL_NOISE, self.counter()?);
            for v in &mut px {
                *v = (*v as i16 + rng.random_range(-r..=r)).clamp(0, 255) as u8;
            }
        }
        Ok(px)
    }
}

impl Env for GapEnv {
    fn task(&self) -> &TaskSpec {
        self.inner.task()
    }

    fn reset(&mut self, seed: u64, start: Option<&PhysState>) -> Result<Observation> {
        self.seed = seed;
        self.inner.visual = if self.cfg.visual_randomization {
            self.cfg.visual_ranges.sample(&mut rng_at(seed, STREAM_VISUAL, 0))
        } else {
            self.base_visual.clone()
        };
        self.inner.arm.dynamics = if self.cfg.dynamics_randomization {
            let mut rng = rng_at(seed, STREAM_DYNAMICS, 0);
            let h = self.cfg.dynamics_range;
            let f = [(); 4].map(|_| if h > 0.0 { 1.0 + rng.random_range(-h..=h) } else { 1.0 });
            self.base_dynamics.scaled(f)
        } else {
            self.base_dynamics
        };
        let obs = self.inner.reset(seed, start)?;
        let obs = Observation {
            pixels: self.noisy_pixels(obs.pixels)?,
            proprio: self.noisy_proprio(obs.proprio)?,
        };
        self.held = Some(obs.clone());
        self.last_executed = vec![0.0; self.inner.arm.action_dim()];
        self.last_dropped = false;
        Ok(obs)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let a = sanitize_action(action, self.inner.arm.action_dim())?;
        let p = self.cfg.action_drop_prob;
        self.last_dropped = if p > 0.0 {
            self.decisions += 1;
            rng_at(self.seed, STREAM_ACTION_DROP, self.counter()?).random::<f64>() < p
        } else {
            false
        };
        if self.last_dropped {
            self.drops += 1;
        } else {
            self.last_executed = a;
        }
        let exec = self.last_executed.clone();
        let r = self.inner.step(&exec)?;
        let t = self.inner.steps();
        let held = self
            .held
            .take()
            .ok_or_else(|| Error::Invalid("environment not reset".into()))?;
        let pixels = if t % self.cfg.pixel_period() == 0 {
            self.noisy_pixels(r.obs.pixels)?
        } else {
            held.pixels
        };
        let proprio = if t % self.cfg.proprio_period() == 0 {
            self.noisy_proprio(r.obs.proprio)?
        } else {
            held.proprio
        };
        let obs = Observation { pixels, proprio };
        self.held = Some(obs.clone());
        Ok(StepResult { obs, ..r })
    }

    fn state(&self) -> Result<&PhysState> {
        self.inner.state()
    }

    fn set_privileged_access(&mut self, on: bool) {
        self.inner.set_privileged_access(on);
    }

    fn visual(&self) -> &VisualParams {
        self.inner.visual()
    }

    fn steps(&self) -> usize {
        self.inner.steps()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim2d::task::TaskKind;

    #[test]
    fn rates_must_divide_control() {
        let mut c = RealityGapConfig::default();
        c.pixel_obs_hz = 3;
        assert!(c.validate().is_err());
        c.pixel_obs_hz = 10;
        c.proprio_obs_hz = 5;
        assert!(c.validate().is_err());
        assert_eq!(RealityGapConfig::default().pixel_period(), 4);
        assert_eq!(RealityGapConfig::default().proprio_period(), 2);
    }

    #[test]
    fn default_visuals_randomized_per_episode() {
        let task = TaskSpec::new(TaskKind::Lifting);
        let mut env = GapEnv::new(SimEnv::new(task), RealityGapConfig::default()).unwrap();
        env.reset(1, None).unwrap();
        let a = env.visual().clone();
        env.reset(2, None).unwrap();
        assert_ne!(&a, env.visual());
        env.reset(1, None).unwrap();
        assert_eq!(&a, env.visual());
    }
}
