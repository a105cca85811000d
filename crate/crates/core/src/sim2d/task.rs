//! Task definitions: stages and rewards, start distributions and the
//! feature layouts used by the value function, discriminator and auxiliary
//! head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::arm::ArmModel;
use super::kinematics::gripper_pose;
use super::state::{ObjectBody, PhysState};
use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::rng::{rng_at, STREAM_RESET};

pub const REACH_RADIUS: f64 = 0.05;
pub const LIFT_HEIGHT: f64 = 0.10;
pub const STACK_CONTACT_TOL: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    Lifting,
    Stacking,
    ClearingBlocks,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Lifting => "lifting",
            TaskKind::Stacking => "stacking",
            TaskKind::ClearingBlocks => "clearing-blocks",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lifting" => Ok(TaskKind::Lifting),
            "stacking" => Ok(TaskKind::Stacking),
            "clearing-blocks" | "clearing" => Ok(TaskKind::ClearingBlocks),
            _ => Err(Error::Config(format!(
                "unknown task `{s}` (expected lifting, stacking or clearing-blocks)"
            ))),
        }
    }
}

pub type Predicate = fn(&ArmModel, &PhysState) -> bool;

#[derive(Clone, Debug)]
pub struct StageSpec {
    pub name: &'static str,
    pub predicate: Predicate,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartDistribution {
    pub joint_ranges: Vec<(f64, f64)>,
    /// Center x of each block, sampled independently.
    pub block_x: (f64, f64),
    /// Minimum center distance between blocks.
    pub min_separation: f64,
    /// Multiplicative jitter on block size.
    pub size_jitter: f64,
    pub mass: (f64, f64),
    /// Per-channel color jitter, in 8-bit levels.
    pub color_jitter: u8,
}

impl Default for StartDistribution {
    fn default() -> Self {
        Self {
            joint_ranges: vec![(1.3, 1.8), (-1.6, -1.0), (-1.4, -0.8)],
            block_x: (0.18, 0.42),
            min_separation: 0.1,
            size_jitter: 0.1,
            mass: (0.05, 0.2),
            color_jitter: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BlockTemplate {
    half_extents: (f64, f64),
    color: [u8; 3],
}

const RED: BlockTemplate = BlockTemplate {
    half_extents: (0.02, 0.02),
    color: [200, 40, 40],
};
const ORANGE: BlockTemplate = BlockTemplate {
    half_extents: (0.02, 0.02),
    color: [245, 140, 30],
};
const PINK: BlockTemplate = BlockTemplate {
    half_extents: (0.032, 0.02),
    color: [235, 120, 190],
};

#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub arm: ArmModel,
    pub stages: Vec<StageSpec>,
    pub episode_length: usize,
    pub n_objects: usize,
    pub start: StartDistribution,
}

fn pad_distance(arm: &ArmModel, s: &PhysState, k: usize) -> f64 {
    let g = gripper_pose(arm, &s.joint_angles);
    let o = &s.objects[k];
    (o.x() - g.x).hypot(o.y() - g.y)
}

fn always(_: &ArmModel, _: &PhysState) -> bool {
    true
}

fn reach_0(arm: &ArmModel, s: &PhysState) -> bool {
    pad_distance(arm, s, 0) <= REACH_RADIUS
}

fn lifted(s: &PhysState, k: usize) -> bool {
    let o = &s.objects[k];
    o.attached && o.y() > LIFT_HEIGHT
}

fn lift_0(_: &ArmModel, s: &PhysState) -> bool {
    lifted(s, 0)
}

/// Object `top` resting on `base`: horizontal center inside the base's
/// half-width and vertical contact within tolerance.
pub fn resting_on(s: &PhysState, top: usize, base: usize) -> bool {
    let (t, b) = (&s.objects[top], &s.objects[base]);
    !t.attached
        && (t.x() - b.x()).abs() <= b.half_extents.0
        && (t.bottom() - b.top()).abs() <= STACK_CONTACT_TOL
}

fn stacked(_: &ArmModel, s: &PhysState) -> bool {
    resting_on(s, 0, 1)
}

fn both_lifted(_: &ArmModel, s: &PhysState) -> bool {
    lifted(s, 1) && resting_on(s, 0, 1)
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        let st = |name, predicate: Predicate, reward| StageSpec {
            name,
            predicate,
            reward,
        };
        let (stages, episode_length, n_objects) = match kind {
            TaskKind::Lifting => (
                vec![
                    st("initial", always, 0.0),
                    st("reaching the block", reach_0, 0.125),
                    st("lifting the block", lift_0, 1.0),
                ],
                100,
                1,
            ),
            TaskKind::Stacking => (
                vec![
                    st("initial", always, 0.0),
                    st("reaching the orange block", reach_0, 0.125),
                    st("lifting the orange block", lift_0, 0.25),
                    st("stacking the orange block onto the pink block", stacked, 1.0),
                ],
                500,
                2,
            ),
            TaskKind::ClearingBlocks => (
                vec![
                    st("initial", always, 0.0),
                    st("reaching the orange block", reach_0, 0.125),
                    st("lifting the orange block", lift_0, 0.25),
                    st("stacking the orange block onto the pink block", stacked, 1.0),
                    st("lifting both blocks off the ground", both_lifted, 2.0),
                ],
                1000,
                2,
            ),
        };
        Self {
            kind,
            arm: ArmModel::default(),
            stages,
            episode_length,
            n_objects,
            start: StartDistribution::default(),
        }
    }

    /// Applies `task` and `start.*` / `arm.*` keys from a key-value config.
    pub fn from_config(kv: &KvMap) -> Result<Self> {
        let kind = TaskKind::parse(kv.get_str("task").unwrap_or("lifting"))?;
        let mut t = Self::new(kind);
        let s = &mut t.start;
        s.block_x = kv.get_pair("start.block_x", s.block_x)?;
        s.min_separation = kv.get_f64("start.min_separation", s.min_separation)?;
        s.size_jitter = kv.get_f64("start.size_jitter", s.size_jitter)?;
        s.mass = kv.get_pair("start.mass", s.mass)?;
        s.color_jitter = kv.get_f64("start.color_jitter", s.color_jitter as f64)? as u8;
        for (i, r) in s.joint_ranges.iter_mut().enumerate() {
            *r = kv.get_pair(&format!("start.joint{i}"), *r)?;
        }
        let d = &mut t.arm.dynamics;
        d.friction_coeff = kv.get_f64("arm.friction", d.friction_coeff)?;
        d.damping = kv.get_f64("arm.damping", d.damping)?;
        d.armature = kv.get_f64("arm.armature", d.armature)?;
        d.gain = kv.get_f64("arm.gain", d.gain)?;
        t.arm.max_joint_speed = kv.get_f64("arm.max_joint_speed", t.arm.max_joint_speed)?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        self.arm.validate()?;
        if ![100, 500, 1000].contains(&self.episode_length) {
            return Err(Error::Config(format!("episode length {}", self.episode_length)));
        }
        if self.stages.windows(2).any(|w| w[1].reward < w[0].reward) {
            return Err(Error::Config("stage rewards must be nondecreasing".into()));
        }
        let s = &self.start;
        if s.joint_ranges.len() != self.arm.n_joints() {
            return Err(Error::Config("one start range per joint".into()));
        }
        for (i, (&(lo, hi), &(llo, lhi))) in s.joint_ranges.iter().zip(&self.arm.joint_limits).enumerate() {
            if !(lo <= hi && lo >= llo && hi <= lhi) {
                return Err(Error::Config(format!("start range of joint {i} outside limits")));
            }
        }
        if !(s.block_x.0 <= s.block_x.1) || !(s.mass.0 <= s.mass.1 && s.mass.0 > 0.0) {
            return Err(Error::Config("start ranges must be ordered".into()));
        }
        if !(0.0..0.5).contains(&s.size_jitter) {
            return Err(Error::Config("size jitter must lie in [0, 0.5)".into()));
        }
        if self.n_objects == 2 && s.block_x.1 - s.block_x.0 < 2.0 * s.min_separation {
            return Err(Error::Config("block range too narrow for the separation".into()));
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn final_stage(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn stage_of(&self, s: &PhysState) -> usize {
        self.stages
            .iter()
            .rposition(|st| (st.predicate)(&self.arm, s))
            .unwrap_or(0)
    }

    pub fn task_reward(&self, s: &PhysState) -> f64 {
        self.stages[self.stage_of(s)].reward
    }

    pub fn reward_table(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.reward).collect()
    }

    fn templates(&self) -> Vec<BlockTemplate> {
        match self.kind {
            TaskKind::Lifting => vec![RED],
            _ => vec![ORANGE, PINK],
        }
    }

    /// Samples a start state from the task distribution, or validates and
    /// returns `override_state` unchanged.
    pub fn reset(&self, seed: u64, override_state: Option<&PhysState>) -> Result<PhysState> {
        if let Some(s) = override_state {
            self.check_compatible(s)?;
            return Ok(s.clone());
        }
        let mut rng = rng_at(seed, STREAM_RESET, 0);
        let st = &self.start;
        let q: Vec<f64> = st
            .joint_ranges
            .iter()
            .map(|&(lo, hi)| if lo < hi { rng.random_range(lo..hi) } else { lo })
            .collect();
        let mut objects = Vec::with_capacity(self.n_objects);
        let mut xs: Vec<f64> = Vec::new();
        for (id, tpl) in self.templates().into_iter().enumerate() {
            let x = loop {
                let x = rng.random_range(st.block_x.0..=st.block_x.1);
                if xs.iter().all(|&o| (o - x).abs() >= st.min_separation) {
                    break x;
                }
            };
            xs.push(x);
            let j = 1.0 + st.size_jitter * rng.random_range(-1.0..=1.0);
            let he = (tpl.half_extents.0 * j, tpl.half_extents.1 * j);
            let cj = st.color_jitter as i32;
            let mut color = tpl.color;
            for c in &mut color {
                let d = if cj > 0 { rng.random_range(-cj..=cj) } else { 0 };
                *c = (*c as i32 + d).clamp(0, 255) as u8;
            }
            let mut o = ObjectBody::new(id as u32, he, x, color);
            o.mass = rng.random_range(st.mass.0..=st.mass.1);
            objects.push(o);
        }
        Ok(PhysState::at_rest(q, self.arm.finger_max_aperture, objects))
    }

    pub fn check_compatible(&self, s: &PhysState) -> Result<()> {
        if s.objects.len() != self.n_objects {
            return Err(Error::State(format!(
                "task {} expects {} objects, state has {}",
                self.name(),
                self.n_objects,
                s.objects.len()
            )));
        }
        s.validate(&self.arm)
    }

    /// Arm joint state then pose and velocity of every object.
    pub fn privileged_dim(&self) -> usize {
        2 * self.arm.n_joints() + 1 + 6 * self.n_objects
    }

    pub fn privileged_features(&self, s: &PhysState) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.privileged_dim());
        f.extend_from_slice(&s.joint_angles);
        f.extend_from_slice(&s.joint_velocities);
        f.push(s.finger_aperture);
        for o in &s.objects {
            f.extend_from_slice(&[o.pose.0, o.pose.1, o.pose.2, o.velocity.0, o.velocity.1, o.velocity.2]);
        }
        f
    }

    pub fn object_centric_dim(&self) -> usize {
        match self.kind {
            TaskKind::Lifting => 2,
            TaskKind::Stacking => 4,
            TaskKind::ClearingBlocks => 8,
        }
    }

    /// Gripper-to-object displacements (and absolute block positions for
    /// clearing); contains no joint state.
    pub fn object_centric_features(&self, s: &PhysState) -> Vec<f64> {
        let g = gripper_pose(&self.arm, &s.joint_angles);
        let disp = |o: &ObjectBody| [o.x() - g.x, o.y() - g.y];
        match self.kind {
            TaskKind::Lifting => disp(&s.objects[0]).to_vec(),
            TaskKind::Stacking => [disp(&s.objects[0]), disp(&s.objects[1])].concat(),
            TaskKind::ClearingBlocks => {
                let (a, b) = (&s.objects[0], &s.objects[1]);
                [[a.x(), a.y()], [b.x(), b.y()], disp(a), disp(b)].concat()
            }
        }
    }

    pub fn aux_dim(&self) -> usize {
        2 * self.n_objects
    }

    /// Object center coordinates, world units.
    pub fn aux_targets(&self, s: &PhysState) -> Vec<f64> {
        s.objects.iter().flat_map(|o| [o.x(), o.y()]).collect()
    }

    /// Initial policy log standard deviation.
    pub fn init_log_std(&self) -> f64 {
        match self.kind {
            TaskKind::ClearingBlocks => -3.0,
            _ => -1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim2d::kinematics::gripper_pose;

    #[test]
    fn reward_tables() {
        assert_eq!(TaskSpec::new(TaskKind::Lifting).reward_table(), vec![0.0, 0.125, 1.0]);
        assert_eq!(
            TaskSpec::new(TaskKind::Stacking).reward_table(),
            vec![0.0, 0.125, 0.25, 1.0]
        );
        assert_eq!(
            TaskSpec::new(TaskKind::ClearingBlocks).reward_table(),
            vec![0.0, 0.125, 0.25, 1.0, 2.0]
        );
    }

    #[test]
    fn dims() {
        let l = TaskSpec::new(TaskKind::Lifting);
        assert_eq!(l.privileged_dim(), 13);
        assert_eq!(l.object_centric_dim(), 2);
        assert_eq!(TaskSpec::new(TaskKind::Stacking).object_centric_dim(), 4);
        assert_eq!(TaskSpec::new(TaskKind::Stacking).aux_dim(), 4);
        assert_eq!(TaskSpec::new(TaskKind::ClearingBlocks).object_centric_dim(), 8);
    }

    #[test]
    fn reset_is_valid_and_deterministic() {
        for kind in [TaskKind::Lifting, TaskKind::Stacking, TaskKind::ClearingBlocks] {
            let t = TaskSpec::new(kind);
            for seed in 0..50 {
                let a = t.reset(seed, None).unwrap();
                t.check_compatible(&a).unwrap();
                assert!(a.bit_eq(&t.reset(seed, None).unwrap()));
                if t.n_objects == 2 {
                    assert!((a.objects[0].x() - a.objects[1].x()).abs() >= t.start.min_separation);
                }
            }
        }
    }

    #[test]
    fn override_mismatch_names_counts() {
        let t = TaskSpec::new(TaskKind::Stacking);
        let s = TaskSpec::new(TaskKind::Lifting).reset(1, None).unwrap();
        let e = t.reset(0, Some(&s)).unwrap_err().to_string();
        assert!(e.contains("expects 2 objects"), "{e}");
    }

    #[test]
    fn coincident_gripper_gives_zero_displacement() {
        let t = TaskSpec::new(TaskKind::Lifting);
        let mut s = t.reset(3, None).unwrap();
        let g = gripper_pose(&t.arm, &s.joint_angles);
        s.objects[0].pose.0 = g.x;
        s.objects[0].pose.1 = g.y;
        assert_eq!(t.object_centric_features(&s), vec![0.0, 0.0]);
        assert_eq!(t.stage_of(&s), 1);
    }
}
