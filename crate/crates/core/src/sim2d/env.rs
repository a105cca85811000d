use serde::{Deserialize, Serialize};

use super::arm::ArmModel;
use super::physics::{step, DT};
use super::render::{render, VisualParams};
use super::state::PhysState;
use super::task::TaskSpec;
use crate::error::{Error, Result};

/// Everything a deployed policy may see.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// 64x64x3 row-major RGB.
    pub pixels: Vec<u8>,
    pub proprio: Vec<f64>,
}

/// `[sin q_i, cos q_i]` per joint, then joint velocities, then aperture.
pub fn proprio(s: &PhysState) -> Vec<f64> {
    let mut p = Vec::with_capacity(3 * s.joint_angles.len() + 1);
    for &q in &s.joint_angles {
        p.push(q.sin());
        p.push(q.cos());
    }
    p.extend_from_slice(&s.joint_velocities);
    p.push(s.finger_aperture);
    p
}

pub fn proprio_dim(arm: &ArmModel) -> usize {
    3 * arm.n_joints() + 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Observation,
    /// Task reward of the state reached.
    pub reward: f64,
    pub stage: usize,
    pub done: bool,
}

pub trait Env: Send {
    fn task(&self) -> &TaskSpec;
    fn reset(&mut self, seed: u64, start: Option<&PhysState>) -> Result<Observation>;
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
    /// Privileged simulator state; fails once access is disabled.
    fn state(&self) -> Result<&PhysState>;
    fn set_privileged_access(&mut self, on: bool);
    fn visual(&self) -> &VisualParams;
    /// Steps taken in the current episode.
    fn steps(&self) -> usize;
}

#[derive(Clone, Debug)]
pub struct SimEnv {
    pub(crate) task: TaskSpec,
    pub(crate) arm: ArmModel,
    pub(crate) visual: VisualParams,
    state: Option<PhysState>,
    t: usize,
    privileged: bool,
}

impl SimEnv {
    pub fn new(task: TaskSpec) -> Self {
        let arm = task.arm.clone();
        Self {
            task,
            arm,
            visual: VisualParams::default(),
            state: None,
            t: 0,
            privileged: true,
        }
    }

    pub fn with_visual(mut self, v: VisualParams) -> Self {
        self.visual = v;
        self
    }

    pub fn set_visual(&mut self, v: VisualParams) {
        self.visual = v;
    }

    /// Arm model in effect, possibly with randomized dynamics.
    pub fn arm(&self) -> &ArmModel {
        &self.arm
    }

    pub(crate) fn raw_state(&self) -> Result<&PhysState> {
        self.state
            .as_ref()
            .ok_or_else(|| Error::Invalid("environment not reset".into()))
    }

    pub fn observe(&self) -> Result<Observation> {
        let s = self.raw_state()?;
        Ok(Observation {
            pixels: render(&self.arm, s, &self.visual),
            proprio: proprio(s),
        })
    }
}

impl Env for SimEnv {
    fn task(&self) -> &TaskSpec {
        &self.task
    }

    fn reset(&mut self, seed: u64, start: Option<&PhysState>) -> Result<Observation> {
        self.state = Some(self.task.reset(seed, start)?);
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let s = step(self.raw_state()?, action, &self.arm, DT)?;
        let stage = self.task.stage_of(&s);
        let reward = self.task.stages[stage].reward;
        self.state = Some(s);
        self.t += 1;
        Ok(StepResult {
            obs: self.observe()?,
            reward,
            stage,
            done: self.t >= self.task.episode_length,
        })
    }

    fn state(&self) -> Result<&PhysState> {
        if !self.privileged {
            return Err(Error::PrivilegedDisabled);
        }
        self.raw_state()
    }

    fn set_privileged_access(&mut self, on: bool) {
        self.privileged = on;
    }

    fn visual(&self) -> &VisualParams {
        &self.visual
    }

    fn steps(&self) -> usize {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim2d::task::TaskKind;

    #[test]
    fn proprio_encoding() {
        let s = PhysState::at_rest(vec![0.0, std::f64::consts::FRAC_PI_2, 0.0], 0.03, vec![]);
        let p = proprio(&s);
        assert_eq!(p.len(), 10);
        assert_eq!(proprio_dim(&ArmModel::default()), 10);
        assert_eq!(&p[..2], &[0.0, 1.0]);
        assert!((p[2] - 1.0).abs() < 1e-15 && p[3].abs() < 1e-15);
        assert_eq!(p[9], 0.03);
    }

    #[test]
    fn episode_ends_at_length() {
        let mut env = SimEnv::new(TaskSpec::new(TaskKind::Lifting));
        env.reset(4, None).unwrap();
        let mut done = false;
        for t in 0..100 {
            let r = env.step(&[0.0; 4]).unwrap();
            done = r.done;
            assert_eq!(done, t == 99);
        }
        assert!(done);
    }

    #[test]
    fn privileged_access_can_be_disabled() {
        let mut env = SimEnv::new(TaskSpec::new(TaskKind::Lifting));
        env.reset(0, None).unwrap();
        assert!(env.state().is_ok());
        env.set_privileged_access(false);
        assert!(matches!(env.state(), Err(Error::PrivilegedDisabled)));
        assert!(env.step(&[0.0; 4]).is_ok());
    }
}
