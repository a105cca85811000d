//! Demonstrations: scripted expert, recording and storage, stage curriculum.

pub mod curriculum;
pub mod dataset;
pub mod expert;

pub use curriculum::{cluster_by_stage, CurriculumClusters, StartChoice, StateRef, DEFAULT_EPSILON};
pub use dataset::{
    build_dataset, record_scripted, replay, DatasetSource, DemoDataset, DemoEpisode, DemoMeta, DemoSource,
    DemoStep, Divergence, EpisodeRecorder, HOLD_TAIL,
};
pub use expert::{scripted_expert, EXPERT_VERSION};
