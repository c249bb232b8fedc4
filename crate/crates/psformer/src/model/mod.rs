//! The PSformer architecture.
//!
//! An input window of `M` channels and `L` time steps is instance-normalized,
//! cut into `N` patches of length `P = L/N` per channel, and regrouped into
//! `N` segments of length `C = M*P` (same-position patches across channels).
//! Each encoder applies two stages of segment attention where Q, K and V are
//! produced by a parameter-shared three-layer block, adds a residual, and
//! multiplies by the same shared block. A linear head maps each channel's
//! look-back window to the forecast horizon, and the instance normalization
//! is inverted on the way out. No positional encoding is used anywhere.

mod checkpoint;
mod config;
mod forward;
mod params;
mod revin;
mod segment;

use std::fmt;

use crate::tensor::TensorError;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{ModelConfig, SharingMode};
pub use forward::{
    channel_pair_submatrix, channel_submatrix, encoder_forward, export_attention, insert_params,
    model_forward, ps_block_forward, seg_attention, AttentionRecord, ForwardArtifacts, TapeBlock,
    TapeParams,
};
pub use params::{block_count, placement, ParamCounts, PsBlock, PsformerParams, Slot};
pub use revin::{revin_denormalize_data, revin_normalize, RevinState};
pub use segment::{segment_inverse, segment_inverse_map, segment_map, segment_transform};

#[derive(Debug)]
pub enum ModelError {
    Config(String),
    /// A tensor-level failure, annotated with the pipeline stage it came from.
    Stage { stage: String, source: TensorError },
    /// Attention export takes a single sample.
    BatchTooLarge { got: usize },
    Checkpoint(String),
    Io(std::io::Error),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Config(msg) => write!(f, "invalid model config: {msg}"),
            ModelError::Stage { stage, source } => write!(f, "{stage}: {source}"),
            ModelError::BatchTooLarge { got } => {
                write!(f, "attention export takes a single sample, got batch of {got}")
            }
            ModelError::Checkpoint(msg) => write!(f, "bad checkpoint: {msg}"),
            ModelError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Io(e)
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &str) -> Result<T, ModelError>;
}

impl<T> StageExt<T> for Result<T, TensorError> {
    fn stage(self, stage: &str) -> Result<T, ModelError> {
        self.map_err(|source| ModelError::Stage {
            stage: stage.to_string(),
            source,
        })
    }
}
