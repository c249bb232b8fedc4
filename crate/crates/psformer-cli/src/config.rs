//! Experiment configuration: benchmark defaults, overridden by an optional
//! flat `key = value` config file, overridden by CLI flags. The resolved
//! configuration is echoed to the output directory and re-parses to an
//! identical run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use psformer::dataset::SplitSpec;
use psformer::model::{ModelConfig, SharingMode};
use psformer::trainer::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// Pick by dataset filename: `etth*` hourly points, `ettm*` minute
    /// points, anything else 0.7/0.1/0.2 fractions.
    Auto,
    EttHourly,
    EttMinute,
    Fractions,
}

impl SplitMode {
    pub fn name(&self) -> &'static str {
        match self {
            SplitMode::Auto => "auto",
            SplitMode::EttHourly => "ett-hourly",
            SplitMode::EttMinute => "ett-minute",
            SplitMode::Fractions => "fractions",
        }
    }

    pub fn parse(s: &str) -> Option<SplitMode> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Some(SplitMode::Auto),
            "ett-hourly" | "etth" => Some(SplitMode::EttHourly),
            "ett-minute" | "ettm" => Some(SplitMode::EttMinute),
            "fractions" => Some(SplitMode::Fractions),
            _ => None,
        }
    }
}

/// SAM neighborhood sizes that performed best per benchmark and horizon;
/// used as the default when `rho` is not set explicitly.
const BENCHMARK_RHO: &[(&str, [f64; 4])] = &[
    ("etth1", [0.6, 0.8, 0.9, 0.6]),
    ("etth2", [0.1, 0.0, 0.6, 0.5]),
    ("ettm1", [0.4, 0.4, 0.4, 0.4]),
    ("ettm2", [0.0, 0.2, 0.3, 0.3]),
    ("electricity", [0.0, 0.1, 0.1, 0.1]),
    ("exchange", [0.2, 0.1, 0.2, 0.2]),
    ("traffic", [0.1, 0.1, 0.2, 0.3]),
    ("weather", [0.1, 0.1, 0.2, 0.3]),
];

/// Look up the tuned neighborhood size for a known benchmark file stem.
pub fn benchmark_rho(stem: &str, horizon: usize) -> Option<f64> {
    let column = match horizon {
        96 => 0,
        192 => 1,
        336 => 2,
        720 => 3,
        _ => return None,
    };
    let stem = stem.to_ascii_lowercase();
    BENCHMARK_RHO
        .iter()
        .find(|(name, _)| stem.starts_with(name))
        .map(|(_, rhos)| rhos[column])
}

/// Fully resolved experiment settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    pub split_mode: SplitMode,
    pub lookback: usize,
    pub horizon: usize,
    pub segments: usize,
    pub encoders: usize,
    pub sharing: SharingMode,
    /// Statistics window for instance normalization; 0 means "use lookback".
    pub revin_window: usize,
    /// SAM radius. Unset falls back to the benchmark table for recognized
    /// dataset names and to 0.6 otherwise.
    pub rho: Option<f64>,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: None,
            split_mode: SplitMode::Auto,
            lookback: 512,
            horizon: 96,
            segments: 32,
            encoders: 1,
            sharing: SharingMode::InEncoder,
            revin_window: 0,
            rho: None,
            lr: 1e-4,
            batch_size: 16,
            max_epochs: 300,
            patience: 30,
            seed: 1,
            out: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// The SAM radius this run will use: explicit value, else the tuned
    /// per-benchmark default, else 0.6.
    pub fn effective_rho(&self) -> f64 {
        if let Some(rho) = self.rho {
            return rho;
        }
        self.dataset
            .as_ref()
            .and_then(|p| p.file_stem())
            .and_then(|s| benchmark_rho(&s.to_string_lossy(), self.horizon))
            .unwrap_or(0.6)
    }

    pub fn effective_revin_window(&self) -> usize {
        if self.revin_window == 0 {
            self.lookback
        } else {
            self.revin_window
        }
    }

    pub fn model_config(&self, channels: usize) -> ModelConfig {
        ModelConfig {
            channels,
            lookback: self.lookback,
            segments: self.segments,
            horizon: self.horizon,
            n_encoders: self.encoders,
            sharing: self.sharing,
            revin_window: self.effective_revin_window(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            lr: self.lr,
            rho: self.effective_rho(),
            seed: self.seed,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        let mode = match self.split_mode {
            SplitMode::Auto => {
                let stem = self
                    .dataset
                    .as_ref()
                    .and_then(|p| p.file_stem())
                    .map(|s| s.to_string_lossy().to_ascii_lowercase())
                    .unwrap_or_default();
                if stem.starts_with("etth") {
                    SplitMode::EttHourly
                } else if stem.starts_with("ettm") {
                    SplitMode::EttMinute
                } else {
                    SplitMode::Fractions
                }
            }
            other => other,
        };
        match mode {
            SplitMode::EttHourly => SplitSpec::ett_hourly(self.lookback),
            SplitMode::EttMinute => SplitSpec::ett_minute(self.lookback),
            _ => SplitSpec::fractions(0.7, 0.1, 0.2, self.lookback),
        }
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let bad = |what: &str| CliError::Usage(format!("config key '{key}': {what} '{value}'"));
        match key {
            "dataset" => {
                self.dataset = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "split_mode" => {
                self.split_mode =
                    SplitMode::parse(value).ok_or_else(|| bad("unknown split mode"))?
            }
            "lookback" => self.lookback = value.parse().map_err(|_| bad("bad integer"))?,
            "horizon" => self.horizon = value.parse().map_err(|_| bad("bad integer"))?,
            "segments" => self.segments = value.parse().map_err(|_| bad("bad integer"))?,
            "encoders" => self.encoders = value.parse().map_err(|_| bad("bad integer"))?,
            "sharing" => {
                self.sharing =
                    SharingMode::parse(value).ok_or_else(|| bad("unknown sharing mode"))?
            }
            "revin_window" => self.revin_window = value.parse().map_err(|_| bad("bad integer"))?,
            "rho" => {
                self.rho = if value.is_empty() {
                    None
                } else {
                    Some(value.parse().map_err(|_| bad("bad number"))?)
                }
            }
            "lr" => self.lr = value.parse().map_err(|_| bad("bad number"))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad("bad integer"))?,
            "max_epochs" => self.max_epochs = value.parse().map_err(|_| bad("bad integer"))?,
            "patience" => self.patience = value.parse().map_err(|_| bad("bad integer"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("bad integer"))?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(CliError::Usage(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parse a flat config file: `key = value` lines, `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "{}:{}: expected 'key = value', got '{line}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Render in the same format [`Self::apply_file`] reads.
    pub fn to_file_text(&self) -> String {
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        kv.insert(
            "dataset",
            self.dataset
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv.insert("split_mode", self.split_mode.name().to_string());
        kv.insert("lookback", self.lookback.to_string());
        kv.insert("horizon", self.horizon.to_string());
        kv.insert("segments", self.segments.to_string());
        kv.insert("encoders", self.encoders.to_string());
        kv.insert("sharing", self.sharing.name().to_string());
        kv.insert("revin_window", self.revin_window.to_string());
        kv.insert(
            "rho",
            self.rho.map(|v| v.to_string()).unwrap_or_default(),
        );
        kv.insert("lr", self.lr.to_string());
        kv.insert("batch_size", self.batch_size.to_string());
        kv.insert("max_epochs", self.max_epochs.to_string());
        kv.insert("patience", self.patience.to_string());
        kv.insert("seed", self.seed.to_string());
        kv.insert("out", self.out.display().to_string());
        let mut s = String::from("# resolved experiment configuration\n");
        for (k, v) in kv {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}
