use std::fmt;

use super::ModelError;

/// Which placements of the parameter-shared block point at the same storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SharingMode {
    /// One block per encoder, shared by all seven placements inside it (default).
    InEncoder,
    /// One block per slot, shared across encoders.
    CrossEncoders,
    /// A single block everywhere.
    All,
    /// A distinct block per (encoder, slot) placement.
    None,
}

impl SharingMode {
    pub const ALL_MODES: [SharingMode; 4] = [
        SharingMode::InEncoder,
        SharingMode::CrossEncoders,
        SharingMode::All,
        SharingMode::None,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SharingMode::InEncoder => "in-encoder",
            SharingMode::CrossEncoders => "cross-encoders",
            SharingMode::All => "all",
            SharingMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<SharingMode> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "in-encoder" | "inencoder" => Some(SharingMode::InEncoder),
            "cross-encoders" | "crossencoders" => Some(SharingMode::CrossEncoders),
            "all" => Some(SharingMode::All),
            "none" => Some(SharingMode::None),
            _ => None,
        }
    }
}

impl fmt::Display for SharingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture hyperparameters.
///
/// `lookback` (L) must be divisible by `segments` (N); the patch length is
/// `P = L/N` and the segment length `C = M*P`. Attention scales by
/// `1/sqrt(d_k)` with `d_k = N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// M, number of input channels.
    pub channels: usize,
    /// L, look-back window length.
    pub lookback: usize,
    /// N, number of segments (= patches per channel).
    pub segments: usize,
    /// F, forecast horizon.
    pub horizon: usize,
    pub n_encoders: usize,
    pub sharing: SharingMode,
    /// Trailing steps of the window used for instance-normalization statistics.
    pub revin_window: usize,
}

impl ModelConfig {
    pub fn new(channels: usize, lookback: usize, segments: usize, horizon: usize) -> Self {
        ModelConfig {
            channels,
            lookback,
            segments,
            horizon,
            n_encoders: 1,
            sharing: SharingMode::InEncoder,
            revin_window: lookback,
        }
    }

    /// P = L/N.
    pub fn patch_len(&self) -> usize {
        self.lookback / self.segments
    }

    /// C = M*P, the attention token axis.
    pub fn segment_len(&self) -> usize {
        self.channels * self.patch_len()
    }

    /// Attention scaling denominator.
    pub fn d_k(&self) -> usize {
        self.segments
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::Config(msg));
        if self.channels == 0
            || self.lookback == 0
            || self.segments == 0
            || self.horizon == 0
            || self.n_encoders == 0
        {
            return err("all dimensions must be positive".into());
        }
        if self.lookback % self.segments != 0 {
            return err(format!(
                "segments ({}) must divide lookback ({})",
                self.segments, self.lookback
            ));
        }
        if self.revin_window == 0 || self.revin_window > self.lookback {
            return err(format!(
                "revin_window ({}) must be in [1, lookback={}]",
                self.revin_window, self.lookback
            ));
        }
        Ok(())
    }
}
