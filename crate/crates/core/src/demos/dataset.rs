//! Demonstration episodes and the `RIAL-DM1` container.
//!
//! An episode with `n` actions stores `n + 1` steps: step `t` holds the
//! state before action `t`, its rendered observation, the action and the
//! stage label. The last step carries no action.

use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::expert::{scripted_expert, EXPERT_VERSION};
use crate::error::{Error, Result};
use crate::sim2d::arm::ArmModel;
use crate::sim2d::env::{proprio, Observation};
use crate::sim2d::physics::{step, DT};
use crate::sim2d::render::{render, VisualParams};
use crate::sim2d::state::PhysState;
use crate::sim2d::task::TaskSpec;

pub const DEMO_MAGIC: &[u8; 8] = b"RIAL-DM1";
pub const DEMO_VERSION: u32 = 1;
/// Steps recorded after the final stage is first reached.
pub const HOLD_TAIL: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DemoSource {
    Scripted,
    Teleop,
}

impl DemoSource {
    fn tag(self) -> u8 {
        match self {
            DemoSource::Scripted => 0,
            DemoSource::Teleop => 1,
        }
    }

    fn from_tag(b: u8) -> Result<Self> {
        match b {
            0 => Ok(DemoSource::Scripted),
            1 => Ok(DemoSource::Teleop),
            _ => Err(Error::Decode(format!("unknown demo source {b}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoMeta {
    /// Seconds since the Unix epoch.
    pub recorded_at: u64,
    #[serde(default)]
    pub operator: Option<String>,
    #[serde(default)]
    pub script_version: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Saved by the operator without reaching the final stage.
    #[serde(default)]
    pub forced: bool,
    pub visual: VisualParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoStep {
    pub state: PhysState,
    pub obs: Observation,
    pub action: Option<Vec<f64>>,
    pub stage: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoEpisode {
    pub task: String,
    pub source: DemoSource,
    pub meta: DemoMeta,
    pub steps: Vec<DemoStep>,
}

impl DemoEpisode {
    pub fn n_actions(&self) -> usize {
        self.steps.iter().filter(|s| s.action.is_some()).count()
    }

    pub fn reached_final(&self, task: &TaskSpec) -> bool {
        self.steps.iter().any(|s| s.stage == task.final_stage())
    }

    pub fn has_actions(&self) -> bool {
        let n = self.steps.len();
        n > 0 && self.steps[..n - 1].iter().all(|s| s.action.is_some())
    }
}

/// Builds an episode one executed action at a time.
#[derive(Clone, Debug)]
pub struct EpisodeRecorder {
    task: TaskSpec,
    episode: DemoEpisode,
}

impl EpisodeRecorder {
    pub fn new(task: &TaskSpec, start: PhysState, source: DemoSource, meta: DemoMeta) -> Result<Self> {
        task.check_compatible(&start)?;
        let first = DemoStep {
            obs: observe(&task.arm, &start, &meta.visual),
            stage: task.stage_of(&start),
            state: start,
            action: None,
        };
        Ok(Self {
            task: task.clone(),
            episode: DemoEpisode {
                task: task.name().to_string(),
                source,
                meta,
                steps: vec![first],
            },
        })
    }

    pub fn state(&self) -> &PhysState {
        &self.episode.steps.last().expect("recorder holds a step").state
    }

    pub fn stage(&self) -> usize {
        self.last().stage
    }

    /// Most recent step: the current state and its observation.
    pub fn last(&self) -> &DemoStep {
        self.episode.steps.last().expect("recorder holds a step")
    }

    pub fn n_actions(&self) -> usize {
        self.episode.steps.len() - 1
    }

    pub fn is_full(&self) -> bool {
        self.n_actions() >= self.task.episode_length
    }

    /// Executes `action` (clamped as the simulator does) and records it.
    pub fn push(&mut self, action: &[f64]) -> Result<&DemoStep> {
        if self.is_full() {
            return Err(Error::Invalid("episode length reached".into()));
        }
        let prev = self.state().clone();
        let next = step(&prev, action, &self.task.arm, DT)?;
        let executed: Vec<f64> = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        self.episode.steps.last_mut().expect("recorder holds a step").action = Some(executed);
        self.episode.steps.push(DemoStep {
            obs: observe(&self.task.arm, &next, &self.episode.meta.visual),
            stage: self.task.stage_of(&next),
            state: next,
            action: None,
        });
        Ok(self.episode.steps.last().expect("just pushed"))
    }

    pub fn episode(&self) -> &DemoEpisode {
        &self.episode
    }

    pub fn finish(self) -> DemoEpisode {
        self.episode
    }
}

fn observe(arm: &ArmModel, s: &PhysState, v: &VisualParams) -> Observation {
    Observation {
        pixels: render(arm, s, v),
        proprio: proprio(s),
    }
}

/// Runs the scripted expert from the task start for `seed` until the final
/// stage plus [`HOLD_TAIL`] steps, capped at the episode length. `None` if
/// the final stage is never reached.
pub fn record_scripted(task: &TaskSpec, seed: u64, recorded_at: u64) -> Result<Option<DemoEpisode>> {
    let start = task.reset(seed, None)?;
    let meta = DemoMeta {
        recorded_at,
        operator: None,
        script_version: Some(EXPERT_VERSION.to_string()),
        seed: Some(seed),
        forced: false,
        visual: VisualParams::default(),
    };
    let mut rec = EpisodeRecorder::new(task, start, DemoSource::Scripted, meta)?;
    let mut reached: Option<usize> = None;
    while !rec.is_full() {
        let a = scripted_expert(task, rec.state());
        rec.push(&a)?;
        if reached.is_none() && rec.stage() == task.final_stage() {
            reached = Some(rec.n_actions());
        }
        if reached.is_some_and(|t| rec.n_actions() >= t + HOLD_TAIL) {
            break;
        }
    }
    Ok(reached.map(|_| rec.finish()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoDataset {
    pub task: String,
    pub arm: ArmModel,
    pub episodes: Vec<DemoEpisode>,
}

pub enum DatasetSource<'a> {
    /// Scripted expert over consecutive seeds starting here.
    Scripted { first_seed: u64, max_attempts: usize },
    /// A directory of `.dm1` files, typically saved by teleop sessions.
    Directory(&'a Path),
}

/// Collects `n` successful episodes. Only episodes reaching the final stage
/// are kept; forced teleop saves are skipped.
pub fn build_dataset(task: &TaskSpec, n: usize, source: DatasetSource<'_>, recorded_at: u64) -> Result<DemoDataset> {
    let mut episodes = Vec::with_capacity(n);
    let mut seen = 0usize;
    match source {
        DatasetSource::Scripted { first_seed, max_attempts } => {
            for i in 0..max_attempts {
                if episodes.len() == n {
                    break;
                }
                seen += 1;
                if let Some(ep) = record_scripted(task, first_seed.wrapping_add(i as u64), recorded_at)? {
                    episodes.push(ep);
                }
            }
        }
        DatasetSource::Directory(dir) => {
            let mut files: Vec<_> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "dm1"))
                .collect();
            files.sort();
            'files: for f in files {
                let ds = DemoDataset::load(&f)?;
                ds.check_task(task)?;
                for ep in ds.episodes {
                    if episodes.len() == n {
                        break 'files;
                    }
                    seen += 1;
                    if !ep.meta.forced && ep.reached_final(task) {
                        episodes.push(ep);
                    }
                }
            }
        }
    }
    if episodes.len() < n {
        return Err(Error::Dataset(format!(
            "only {} of {n} requested episodes reached the final stage ({seen} examined)",
            episodes.len()
        )));
    }
    Ok(DemoDataset {
        task: task.name().to_string(),
        arm: task.arm.clone(),
        episodes,
    })
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    w.write_u32::<LittleEndian>(b.len() as u32).unwrap();
    w.extend_from_slice(b);
}

fn get_bytes<'a>(r: &mut &'a [u8], limit: usize) -> Result<&'a [u8]> {
    let n = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if n > limit || n > r.len() {
        return Err(Error::Decode(format!("length {n} exceeds record")));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn truncated(_: std::io::Error) -> Error {
    Error::Decode("truncated demo file".into())
}

impl DemoDataset {
    pub fn new(task: &TaskSpec) -> Self {
        Self {
            task: task.name().to_string(),
            arm: task.arm.clone(),
            episodes: Vec::new(),
        }
    }

    pub fn n_states(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    pub fn has_actions(&self) -> bool {
        !self.episodes.is_empty() && self.episodes.iter().all(|e| e.has_actions())
    }

    pub fn state(&self, episode: usize, step: usize) -> Option<&PhysState> {
        self.episodes.get(episode)?.steps.get(step).map(|s| &s.state)
    }

    /// Task name and arm configuration must match `task`.
    pub fn check_task(&self, task: &TaskSpec) -> Result<()> {
        if self.task != task.name() {
            return Err(Error::Dataset(format!(
                "dataset is for task {}, not {}",
                self.task,
                task.name()
            )));
        }
        if self.arm.config_hash() != task.arm.config_hash() {
            return Err(Error::Dataset("dataset arm configuration differs from the task's".into()));
        }
        Ok(())
    }

    /// Every stored stage label must equal the recomputed stage.
    pub fn check_labels(&self, task: &TaskSpec) -> Result<()> {
        for (e, ep) in self.episodes.iter().enumerate() {
            for (t, s) in ep.steps.iter().enumerate() {
                let st = task.stage_of(&s.state);
                if st != s.stage {
                    return Err(Error::Dataset(format!(
                        "episode {e} step {t}: stored stage {} but state is in stage {st}",
                        s.stage
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(DEMO_MAGIC);
        w.write_u32::<LittleEndian>(DEMO_VERSION).unwrap();
        put_bytes(&mut w, self.task.as_bytes());
        w.write_u32::<LittleEndian>(self.episodes.len() as u32).unwrap();
        put_bytes(&mut w, &self.arm.encode());
        w.extend_from_slice(&self.arm.config_hash());
        for ep in &self.episodes {
            w.write_u8(ep.source.tag()).unwrap();
            put_bytes(&mut w, ep.task.as_bytes());
            let meta = serde_json::to_vec(&ep.meta).expect("metadata serializes");
            put_bytes(&mut w, &meta);
            w.write_u32::<LittleEndian>(ep.steps.len() as u32).unwrap();
            for s in &ep.steps {
                put_bytes(&mut w, &s.state.encode());
                put_bytes(&mut w, &s.obs.pixels);
                w.write_u32::<LittleEndian>(s.obs.proprio.len() as u32).unwrap();
                for v in &s.obs.proprio {
                    w.write_f64::<LittleEndian>(*v).unwrap();
                }
                match &s.action {
                    Some(a) => {
                        w.write_u8(1).unwrap();
                        w.write_u32::<LittleEndian>(a.len() as u32).unwrap();
                        for v in a {
                            w.write_f64::<LittleEndian>(*v).unwrap();
                        }
                    }
                    None => w.write_u8(0).unwrap(),
                }
                w.write_u32::<LittleEndian>(s.stage as u32).unwrap();
            }
        }
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        w
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 32 || &bytes[..8] != DEMO_MAGIC {
            return Err(Error::Decode("not a demo file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Decode("demo file checksum mismatch".into()));
        }
        let mut r = &body[8..];
        let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != DEMO_VERSION {
            return Err(Error::Decode(format!("unsupported demo version {version}")));
        }
        let utf8 = |b: &[u8]| String::from_utf8(b.to_vec()).map_err(|_| Error::Decode("invalid UTF-8".into()));
        let task = utf8(get_bytes(&mut r, 256)?)?;
        let n_ep = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let arm = ArmModel::decode(get_bytes(&mut r, 4096)?)?;
        let mut hash = [0u8; 32];
        std::io::Read::read_exact(&mut r, &mut hash).map_err(truncated)?;
        if hash != arm.config_hash() {
            return Err(Error::Decode("arm configuration hash mismatch".into()));
        }
        let mut episodes = Vec::with_capacity(n_ep.min(4096));
        for _ in 0..n_ep {
            let source = DemoSource::from_tag(r.read_u8().map_err(truncated)?)?;
            let ep_task = utf8(get_bytes(&mut r, 256)?)?;
            let meta: DemoMeta = serde_json::from_slice(get_bytes(&mut r, 1 << 20)?)
                .map_err(|e| Error::Decode(format!("episode metadata: {e}")))?;
            let n_steps = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            let mut steps = Vec::with_capacity(n_steps.min(1 << 16));
            for _ in 0..n_steps {
                let state = PhysState::decode(get_bytes(&mut r, 1 << 20)?)?;
                let pixels = get_bytes(&mut r, 1 << 24)?.to_vec();
                let f = |r: &mut &[u8]| r.read_f64::<LittleEndian>().map_err(truncated);
                let np = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
                if np > 1024 {
                    return Err(Error::Decode(format!("implausible proprio length {np}")));
                }
                let proprio = (0..np).map(|_| f(&mut r)).collect::<Result<Vec<_>>>()?;
                let action = match r.read_u8().map_err(truncated)? {
                    0 => None,
                    1 => {
                        let na = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
                        if na > 64 {
                            return Err(Error::Decode(format!("implausible action length {na}")));
                        }
                        Some((0..na).map(|_| f(&mut r)).collect::<Result<Vec<_>>>()?)
                    }
                    b => return Err(Error::Decode(format!("bad action flag {b}"))),
                };
                let stage = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
                steps.push(DemoStep {
                    state,
                    obs: Observation { pixels, proprio },
                    action,
                    stage,
                });
            }
            episodes.push(DemoEpisode {
                task: ep_task,
                source,
                meta,
                steps,
            });
        }
        if !r.is_empty() {
            return Err(Error::Decode(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { task, arm, episodes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("dm1.partial");
        std::fs::write(&tmp, self.encode())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// First point where a replay left the recording.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Divergence {
    pub episode: usize,
    pub step: usize,
    pub field: String,
}

/// Resets to each episode's first stored state, replays the stored actions
/// and compares every state, observation and stage label bit-exactly.
pub fn replay(task: &TaskSpec, ds: &DemoDataset) -> Result<Option<Divergence>> {
    ds.check_task(task)?;
    for (e, ep) in ds.episodes.iter().enumerate() {
        let div = |step: usize, field: &str| {
            Ok(Some(Divergence {
                episode: e,
                step,
                field: field.to_string(),
            }))
        };
        let Some(first) = ep.steps.first() else {
            continue;
        };
        let mut s = task.reset(0, Some(&first.state))?;
        for (t, rec) in ep.steps.iter().enumerate() {
            if t > 0 {
                let prev = ep.steps[t - 1]
                    .action
                    .as_ref()
                    .ok_or_else(|| Error::Dataset(format!("episode {e} step {} has no action", t - 1)))?;
                s = step(&s, prev, &task.arm, DT)?;
            }
            if let Some(f) = s.first_difference(&rec.state) {
                return div(t, &format!("state.{f}"));
            }
            if task.stage_of(&s) != rec.stage {
                return div(t, "stage");
            }
            let obs = observe(&task.arm, &s, &ep.meta.visual);
            if obs.pixels != rec.obs.pixels {
                return div(t, "obs.pixels");
            }
            let bits = |a: &[f64], b: &[f64]| {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            };
            if !bits(&obs.proprio, &rec.obs.proprio) {
                return div(t, "obs.proprio");
            }
        }
    }
    Ok(None)
}
