//! Network configuration, construction, inference, gradients and analysis.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod network;

pub use analysis::{param_count_closed_form, receptive_field, sampling_coverage, CoverageReport};
pub use checkpoint::{
    checkpoint_info, decode_checkpoint, encode_checkpoint, read_checkpoint_info, CheckpointInfo, load_checkpoint, load_checkpoint_strict, save_checkpoint,
    save_checkpoint_with_hash,
};
pub use config::{ablation_grid, Ablation, DilationSchedule, NetworkConfig, NormMode, ScheduleKind};
pub use network::{argmax_labels, ForwardCache, Gradients, Layer, Network};

pub use crate::ops::Mode;
