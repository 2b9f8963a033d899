//! DistractorDot: a small pixel-control world with exact relevance maps.
//!
//! An agent patch moves on a square grid towards a fixed goal. Everything
//! else on screen is distractor content whose evolution never depends on the
//! agent's actions, so the set of task-relevant pixels is known exactly.

mod augment;
mod dataset;
mod env;

pub use augment::{augment_crop, crop_with_offset, random_offset};
pub use dataset::{
    generate_dataset, Batch, Dataset, DatasetMeta, DatasetSpec, Policy, Transition, DATASET_MAGIC,
    DATASET_VERSION, RECORD_LAYOUT,
};
pub use env::{
    env_reset, env_step, expert_action, relevance_map, render, reward, Action, DistractorLevel,
    EnvConfig, EnvState, AGENT_COLOR,
};
