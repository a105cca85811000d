//! Stage clusters over demonstration states and start-state sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::DemoDataset;
use crate::error::{Error, Result};
use crate::sim2d::state::PhysState;
use crate::sim2d::task::TaskSpec;

pub const DEFAULT_EPSILON: f64 = 0.3;

/// Reference to one stored demonstration state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateRef {
    pub episode: u32,
    pub step: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumClusters {
    /// `clusters[k]` holds the states in stage `k`; the final stage is absent.
    pub clusters: Vec<Vec<StateRef>>,
    pub epsilon: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StartChoice {
    Random,
    Demo { cluster: usize, state: StateRef },
}

impl StartChoice {
    /// Cluster id, or `None` for a random start.
    pub fn cluster(&self) -> Option<usize> {
        match self {
            StartChoice::Random => None,
            StartChoice::Demo { cluster, .. } => Some(*cluster),
        }
    }
}

/// Assigns every stored state to the cluster of its stage. Final-stage
/// states are not reset candidates.
pub fn cluster_by_stage(task: &TaskSpec, ds: &DemoDataset, epsilon: f64) -> Result<CurriculumClusters> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("curriculum epsilon {epsilon} outside [0, 1]")));
    }
    if ds.episodes.is_empty() {
        return Err(Error::Dataset("empty demonstration dataset".into()));
    }
    ds.check_task(task)?;
    let fin = task.final_stage();
    let mut clusters = vec![Vec::new(); fin];
    for (e, ep) in ds.episodes.iter().enumerate() {
        for (t, s) in ep.steps.iter().enumerate() {
            let st = task.stage_of(&s.state);
            if st < fin {
                clusters[st].push(StateRef {
                    episode: e as u32,
                    step: t as u32,
                });
            }
        }
    }
    if let Some(k) = clusters.iter().position(|c| c.is_empty()) {
        return Err(Error::Dataset(format!(
            "no demonstration state in stage {k} ({})",
            task.stages[k].name
        )));
    }
    Ok(CurriculumClusters { clusters, epsilon })
}

impl CurriculumClusters {
    /// Clusters used with `epsilon` forced to 1: every start is random.
    pub fn random_only() -> Self {
        Self {
            clusters: Vec::new(),
            epsilon: 1.0,
        }
    }

    pub fn n_states(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    /// With probability epsilon a random start; otherwise a uniformly chosen
    /// cluster, then a uniformly chosen state within it.
    pub fn sample_start<R: Rng + ?Sized>(&self, rng: &mut R) -> StartChoice {
        let u: f64 = rng.random();
        if self.clusters.is_empty() || u < self.epsilon {
            return StartChoice::Random;
        }
        let cluster = rng.random_range(0..self.clusters.len());
        let c = &self.clusters[cluster];
        StartChoice::Demo {
            cluster,
            state: c[rng.random_range(0..c.len())],
        }
    }

    pub fn resolve<'a>(&self, ds: &'a DemoDataset, r: StateRef) -> Result<&'a PhysState> {
        ds.state(r.episode as usize, r.step as usize)
            .ok_or_else(|| Error::Dataset(format!("dangling state reference {r:?}")))
    }
}
