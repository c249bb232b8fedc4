use std::sync::Arc;

use super::{ModelConfig, ModelError, StageExt};
use crate::element::Element;
use crate::tensor::{Tape, TensorId};

/// Index map for `[B, M, L] -> [B, C, N]`: segment row `c = m*P + p` at
/// column `n` reads input step `n*P + p` of channel `m`. Variable-major
/// ordering keeps each channel's patch contiguous inside a segment.
pub fn segment_map(batch: usize, channels: usize, lookback: usize, segments: usize) -> Vec<usize> {
    let p = lookback / segments;
    let c = channels * p;
    let mut map = Vec::with_capacity(batch * c * segments);
    for b in 0..batch {
        for row in 0..c {
            let (m, pi) = (row / p, row % p);
            for n in 0..segments {
                map.push(b * channels * lookback + m * lookback + n * p + pi);
            }
        }
    }
    map
}

/// Exact inverse of [`segment_map`].
pub fn segment_inverse_map(
    batch: usize,
    channels: usize,
    lookback: usize,
    segments: usize,
) -> Vec<usize> {
    let fwd = segment_map(batch, channels, lookback, segments);
    let mut inv = vec![0usize; fwd.len()];
    for (out_idx, &in_idx) in fwd.iter().enumerate() {
        inv[in_idx] = out_idx;
    }
    inv
}

/// Regroup `[B, M, L]` into segments `[B, C, N]` on the tape.
pub fn segment_transform<E: Element>(
    tape: &mut Tape<E>,
    x: TensorId,
    cfg: &ModelConfig,
    batch: usize,
) -> Result<TensorId, ModelError> {
    if cfg.lookback % cfg.segments != 0 {
        return Err(ModelError::Config(format!(
            "segments ({}) must divide lookback ({})",
            cfg.segments, cfg.lookback
        )));
    }
    let map = segment_map(batch, cfg.channels, cfg.lookback, cfg.segments);
    tape.gather(
        x,
        vec![batch, cfg.segment_len(), cfg.segments],
        Arc::new(map),
    )
    .stage("segment transform")
}

/// Undo [`segment_transform`]: `[B, C, N] -> [B, M, L]`, bitwise.
pub fn segment_inverse<E: Element>(
    tape: &mut Tape<E>,
    s: TensorId,
    cfg: &ModelConfig,
    batch: usize,
) -> Result<TensorId, ModelError> {
    let map = segment_inverse_map(batch, cfg.channels, cfg.lookback, cfg.segments);
    tape.gather(s, vec![batch, cfg.channels, cfg.lookback], Arc::new(map))
        .stage("segment inverse")
}
