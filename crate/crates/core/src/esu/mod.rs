//! The ranking stage: unified item representations, target attention with
//! similarity-bucket side information, and the prediction head.

mod checkpoint;
mod features;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointInfo};
pub use features::{oov_count, Example, ExampleSet, FeatureTable};
pub(crate) use forward::{axpy, dot};
pub use forward::{forward, forward_example, predict, target_attention, target_interaction, unify, ForwardCache};
pub use params::{Ablation, EsuConfig, Layout, ModelParams, ModelSpec};
