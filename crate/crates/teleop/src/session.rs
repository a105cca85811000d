//! One operator session: the episode lifecycle, zero-order hold of the
//! latest command, and recording into the demonstration format.

use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use base64::Engine;
use rial_core::demos::{DemoDataset, DemoMeta, DemoSource, EpisodeRecorder};
use rial_core::rng::derive;
use rial_core::sim2d::kinematics::ee_velocity_to_action;
use rial_core::sim2d::render::{render, VIEW_CENTER, VIEW_HALF};
use rial_core::sim2d::{PhysState, TaskSpec, VisualParams, CONTROL_HZ, IMAGE_SIDE};

use crate::error::{Result, TeleopError};
use crate::protocol::{Ack, Cmd, CmdMode, CtlAction, EpisodeCtl, Lifecycle, Obs, SceneObject, SessionInfo};

/// Gripper speed at full end-effector command, m/s.
pub const EE_LINEAR_SPEED: f64 = 0.3;
/// Gripper rotation rate at full command, rad/s.
pub const EE_ANGULAR_SPEED: f64 = 2.0;

#[derive(Clone, Debug)]
pub struct SessionConfig {
    pub demo_dir: PathBuf,
    /// Start seeds are derived from this unless the client names one.
    pub seed: u64,
}

/// Axis count and finiteness of an operator command.
pub fn validate_cmd(task: &TaskSpec, c: &Cmd) -> Result<()> {
    let want = match c.mode {
        CmdMode::Ee => 3,
        CmdMode::Joint => task.arm.n_joints(),
    };
    if c.axes.len() != want {
        return Err(TeleopError::Command(format!("{:?} mode takes {want} axes, got {}", c.mode, c.axes.len())));
    }
    if c.axes.iter().chain([&c.grip]).any(|v| !v.is_finite()) {
        return Err(TeleopError::Command("non-finite axis".into()));
    }
    Ok(())
}

pub struct Session {
    pub id: u64,
    task: TaskSpec,
    cfg: SessionConfig,
    operator: Option<String>,
    lifecycle: Lifecycle,
    recorder: Option<EpisodeRecorder>,
    /// Scene shown while no episode is running.
    preview: PhysState,
    visual: VisualParams,
    held: Option<(u64, Cmd)>,
    last_action: Vec<f64>,
    last_reward: f64,
    tick: u64,
    started: u64,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl Session {
    pub fn new(id: u64, task: TaskSpec, cfg: SessionConfig) -> Result<Self> {
        let preview = task.reset(derive(cfg.seed, &[id]), None)?;
        let n = task.arm.action_dim();
        Ok(Self {
            id,
            task,
            cfg,
            operator: None,
            lifecycle: Lifecycle::Idle,
            recorder: None,
            preview,
            visual: VisualParams::default(),
            held: None,
            last_action: vec![0.0; n],
            last_reward: 0.0,
            tick: 0,
            started: 0,
        })
    }

    pub fn set_operator(&mut self, name: Option<String>) {
        self.operator = name;
    }

    pub fn lifecycle(&self) -> Lifecycle {
        self.lifecycle
    }

    pub fn ticks(&self) -> u64 {
        self.tick
    }

    pub fn recorder(&self) -> Option<&EpisodeRecorder> {
        self.recorder.as_ref()
    }

    pub fn info(&self) -> SessionInfo {
        SessionInfo {
            id: self.id,
            task: self.task.name().to_string(),
            stages: self.task.stages.iter().map(|s| s.name.to_string()).collect(),
            control_hz: CONTROL_HZ,
            episode_length: self.task.episode_length,
            link_lengths: self.task.arm.link_lengths.clone(),
            finger_max_aperture: self.task.arm.finger_max_aperture,
            action_dim: self.task.arm.action_dim(),
            view_center: VIEW_CENTER,
            view_half: VIEW_HALF,
            image_side: IMAGE_SIDE,
        }
    }

    fn state(&self) -> &PhysState {
        self.recorder.as_ref().map(|r| r.state()).unwrap_or(&self.preview)
    }

    pub fn check_cmd(&self, c: &Cmd) -> Result<()> {
        validate_cmd(&self.task, c)
    }

    /// Joint-space action for the held command at the current state.
    pub fn action_for(&self, cmd: Option<&Cmd>) -> Vec<f64> {
        let n = self.task.arm.action_dim();
        let Some(c) = cmd else {
            return vec![0.0; n];
        };
        let grip = c.grip.clamp(-1.0, 1.0);
        match c.mode {
            CmdMode::Ee => {
                let ax: Vec<f64> = c.axes.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
                let v = [ax[0] * EE_LINEAR_SPEED, ax[1] * EE_LINEAR_SPEED, ax[2] * EE_ANGULAR_SPEED];
                ee_velocity_to_action(&self.task.arm, &self.state().joint_angles, v, grip)
            }
            CmdMode::Joint => {
                let mut a: Vec<f64> = c.axes.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
                a.push(grip);
                a
            }
        }
    }

    /// One control tick. `new_cmd` replaces the held command; the held one
    /// is applied whenever an episode is running. Returns the executed
    /// action when the simulator advanced.
    pub fn tick(&mut self, new_cmd: Option<(u64, Cmd)>) -> Result<Option<Vec<f64>>> {
        self.tick += 1;
        if let Some(c) = new_cmd {
            self.held = Some(c);
        }
        if self.lifecycle != Lifecycle::Running {
            return Ok(None);
        }
        let a = self.action_for(self.held.as_ref().map(|h| &h.1));
        let rec = self.recorder.as_mut().expect("running sessions record");
        if rec.is_full() {
            return Ok(None);
        }
        rec.push(&a)?;
        self.last_reward = self.task.task_reward(rec.state());
        let executed = rec.episode().steps[rec.n_actions() - 1]
            .action
            .clone()
            .expect("pushed step has an action");
        self.last_action = executed.clone();
        Ok(Some(executed))
    }

    fn refuse(&self, action: CtlAction) -> TeleopError {
        TeleopError::Lifecycle {
            action: format!("{action:?}").to_lowercase(),
            state: format!("{:?}", self.lifecycle).to_lowercase(),
        }
    }

    pub fn control(&mut self, ref_seq: u64, ctl: &EpisodeCtl) -> Result<Ack> {
        use Lifecycle::*;
        let ack = |lifecycle, detail: String, path: Option<String>| Ack {
            ref_seq,
            lifecycle,
            detail,
            path,
        };
        match (ctl.action, self.lifecycle) {
            (CtlAction::Start, Idle) => {
                let seed = ctl.seed.unwrap_or_else(|| derive(self.cfg.seed, &[self.id, self.started]));
                self.started += 1;
                let start = self.task.reset(seed, None)?;
                let meta = DemoMeta {
                    recorded_at: now_unix(),
                    operator: self.operator.clone(),
                    script_version: None,
                    seed: Some(seed),
                    forced: false,
                    visual: self.visual.clone(),
                };
                self.recorder = Some(EpisodeRecorder::new(&self.task, start, DemoSource::Teleop, meta)?);
                self.held = None;
                self.last_action = vec![0.0; self.task.arm.action_dim()];
                self.lifecycle = Running;
                Ok(ack(Running, format!("episode started with seed {seed}"), None))
            }
            (CtlAction::Pause, Running) => {
                self.lifecycle = Paused;
                Ok(ack(Paused, "paused".into(), None))
            }
            (CtlAction::Resume, Paused) => {
                self.lifecycle = Running;
                Ok(ack(Running, "resumed".into(), None))
            }
            (CtlAction::Save, Running | Paused) => {
                let rec = self.recorder.as_ref().expect("active sessions record");
                let finished = rec.episode().reached_final(&self.task);
                if !finished && !ctl.force {
                    tracing::warn!(session = self.id, "save refused: final stage not reached");
                    return Err(TeleopError::NotFinished);
                }
                let mut ep = self.recorder.take().expect("checked above").finish();
                ep.meta.forced = !finished;
                self.preview = ep.steps.last().expect("episodes hold a step").state.clone();
                let path = self.cfg.demo_dir.join(format!(
                    "{}-s{}-e{}-{}.dm1",
                    self.task.name(),
                    self.id,
                    self.started,
                    ep.meta.recorded_at
                ));
                let mut ds = DemoDataset::new(&self.task);
                let n = ep.n_actions();
                ds.episodes.push(ep);
                std::fs::create_dir_all(&self.cfg.demo_dir)?;
                ds.save(&path).map_err(TeleopError::Core)?;
                self.lifecycle = Idle;
                let detail = if finished {
                    format!("saved {n} steps")
                } else {
                    format!("force-saved {n} steps without reaching the final stage")
                };
                Ok(ack(Saved, detail, Some(path.display().to_string())))
            }
            (CtlAction::Discard, Running | Paused) => {
                self.discard();
                Ok(ack(Discarded, "discarded".into(), None))
            }
            (a, _) => Err(self.refuse(a)),
        }
    }

    fn discard(&mut self) {
        if let Some(r) = self.recorder.take() {
            self.preview = r.state().clone();
        }
        self.lifecycle = Lifecycle::Idle;
    }

    /// Called when the connection drops; an unsaved episode is discarded.
    pub fn disconnect(&mut self) {
        if self.recorder.is_some() {
            tracing::info!(session = self.id, "operator left mid-episode, discarding");
        }
        self.discard();
    }

    pub fn scene(&self) -> Obs {
        let s = self.state();
        let (stage, step, pixels) = match &self.recorder {
            Some(r) => (r.stage(), r.n_actions(), r.last().obs.pixels.clone()),
            None => (self.task.stage_of(s), 0, render(&self.task.arm, s, &self.visual)),
        };
        Obs {
            tick: self.tick,
            lifecycle: self.lifecycle,
            episode_step: step,
            stage,
            stage_name: self.task.stages[stage].name.to_string(),
            reward: self.last_reward,
            joint_angles: s.joint_angles.clone(),
            finger_aperture: s.finger_aperture,
            objects: s
                .objects
                .iter()
                .map(|o| SceneObject {
                    id: o.id,
                    x: o.pose.0,
                    y: o.pose.1,
                    angle: o.pose.2,
                    half_extents: o.half_extents,
                    color: o.color,
                    attached: o.attached,
                })
                .collect(),
            action: self.last_action.clone(),
            held_cmd_seq: self.held.as_ref().map(|h| h.0),
            thumbnail: base64::engine::general_purpose::STANDARD.encode(pixels),
        }
    }
}
