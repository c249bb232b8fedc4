//! The training loop: shuffled SAM steps over the train region, one
//! validation pass per epoch, early stopping with best-checkpoint restore,
//! and element-weighted test metrics on the restored parameters.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Batch, DatasetError, Split, WindowedDataset};
use crate::element::Element;
use crate::model::{insert_params, model_forward, ModelConfig, ModelError, PsformerParams};
use crate::optim::{sam_step, Adam, EarlyStop, OptimError, SamConfig, StopDecision};
use crate::tensor::{Tape, TensorError};

#[derive(Debug)]
pub enum TrainerError {
    Model(ModelError),
    Dataset(DatasetError),
    Optim(OptimError),
    Tensor(TensorError),
    /// Loss became NaN during an epoch; reports where.
    NanTrainLoss { epoch: usize, batch: usize },
    Mismatch(String),
}

impl fmt::Display for TrainerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainerError::Model(e) => write!(f, "model: {e}"),
            TrainerError::Dataset(e) => write!(f, "dataset: {e}"),
            TrainerError::Optim(e) => write!(f, "optimizer: {e}"),
            TrainerError::Tensor(e) => write!(f, "tensor: {e}"),
            TrainerError::NanTrainLoss { epoch, batch } => {
                write!(f, "training loss is NaN at epoch {epoch}, batch {batch}")
            }
            TrainerError::Mismatch(msg) => write!(f, "config/dataset mismatch: {msg}"),
        }
    }
}

impl std::error::Error for TrainerError {}

impl From<ModelError> for TrainerError {
    fn from(e: ModelError) -> Self {
        TrainerError::Model(e)
    }
}

impl From<DatasetError> for TrainerError {
    fn from(e: DatasetError) -> Self {
        TrainerError::Dataset(e)
    }
}

impl From<OptimError> for TrainerError {
    fn from(e: OptimError) -> Self {
        TrainerError::Optim(e)
    }
}

impl From<TensorError> for TrainerError {
    fn from(e: TensorError) -> Self {
        TrainerError::Tensor(e)
    }
}

/// Optimization schedule and budget. Defaults follow the long-horizon
/// benchmark configuration: constant learning rate 1e-4, batch 16, up to 300
/// epochs with patience 30, seed 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// SAM neighborhood radius; 0 disables the ascent step.
    pub rho: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 300,
            patience: 30,
            batch_size: 16,
            lr: 1e-4,
            rho: 0.6,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub seconds: f64,
}

/// Everything one run produced. Test metrics are computed exactly once, on
/// the best checkpoint, with the final short batch kept.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    pub stopped_early: bool,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub test_mse: f64,
    pub test_mae: f64,
    pub param_total: usize,
    pub param_encoder: usize,
    pub param_head: usize,
    pub floored_channels: Vec<usize>,
}

impl RunReport {
    /// Flat `key = value` rendering; the key set is documented in the README.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv(&mut s, "config.model.channels", self.model.channels.to_string());
        kv(&mut s, "config.model.lookback", self.model.lookback.to_string());
        kv(&mut s, "config.model.segments", self.model.segments.to_string());
        kv(&mut s, "config.model.horizon", self.model.horizon.to_string());
        kv(&mut s, "config.model.encoders", self.model.n_encoders.to_string());
        kv(&mut s, "config.model.sharing", self.model.sharing.to_string());
        kv(&mut s, "config.model.revin_window", self.model.revin_window.to_string());
        kv(&mut s, "config.train.max_epochs", self.train.max_epochs.to_string());
        kv(&mut s, "config.train.patience", self.train.patience.to_string());
        kv(&mut s, "config.train.batch_size", self.train.batch_size.to_string());
        kv(&mut s, "config.train.lr", self.train.lr.to_string());
        kv(&mut s, "config.train.rho", self.train.rho.to_string());
        kv(&mut s, "config.train.seed", self.train.seed.to_string());
        kv(&mut s, "params.total", self.param_total.to_string());
        kv(&mut s, "params.encoder", self.param_encoder.to_string());
        kv(&mut s, "params.head", self.param_head.to_string());
        let floored: Vec<String> = self.floored_channels.iter().map(|c| c.to_string()).collect();
        kv(&mut s, "data.floored_channels", floored.join(","));
        for e in &self.epochs {
            kv(&mut s, &format!("epoch.{}.train_mse", e.epoch), e.train_mse.to_string());
            kv(&mut s, &format!("epoch.{}.val_mse", e.epoch), e.val_mse.to_string());
            kv(&mut s, &format!("epoch.{}.seconds", e.epoch), format!("{:.3}", e.seconds));
        }
        kv(&mut s, "stop.epoch", self.stopped_epoch.to_string());
        kv(&mut s, "stop.early", self.stopped_early.to_string());
        kv(&mut s, "best.epoch", self.best_epoch.to_string());
        kv(&mut s, "best.val_mse", self.best_val_mse.to_string());
        kv(&mut s, "test.mse", self.test_mse.to_string());
        kv(&mut s, "test.mae", self.test_mae.to_string());
        s
    }
}

/// Element-weighted error accumulation: short final batches contribute by
/// element count, so the aggregate equals the single-pass computation.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricAccumulator {
    sum_sq: f64,
    sum_abs: f64,
    count: u64,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update<E: Element>(&mut self, pred: &[E], target: &[E]) -> Result<(), TrainerError> {
        if pred.len() != target.len() {
            return Err(TrainerError::Mismatch(format!(
                "prediction has {} elements, target {}",
                pred.len(),
                target.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(target.iter()) {
            let d = p.as_f64() - t.as_f64();
            self.sum_sq += d * d;
            self.sum_abs += d.abs();
        }
        self.count += pred.len() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.sum_sq += other.sum_sq;
        self.sum_abs += other.sum_abs;
        self.count += other.count;
    }

    pub fn mse(&self) -> f64 {
        self.sum_sq / self.count as f64
    }

    pub fn mae(&self) -> f64 {
        self.sum_abs / self.count as f64
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}

/// Mean squared error over two equal-shape buffers.
pub fn mse<E: Element>(pred: &[E], target: &[E]) -> Result<f64, TrainerError> {
    let mut acc = MetricAccumulator::new();
    acc.update(pred, target)?;
    Ok(acc.mse())
}

/// Mean absolute error over two equal-shape buffers.
pub fn mae<E: Element>(pred: &[E], target: &[E]) -> Result<f64, TrainerError> {
    let mut acc = MetricAccumulator::new();
    acc.update(pred, target)?;
    Ok(acc.mae())
}

fn check_compat<E: Element>(
    cfg: &ModelConfig,
    ds: &WindowedDataset,
) -> Result<(), TrainerError> {
    let _ = std::marker::PhantomData::<E>;
    if ds.channels() != cfg.channels {
        return Err(TrainerError::Mismatch(format!(
            "dataset has {} channels, model expects {}",
            ds.channels(),
            cfg.channels
        )));
    }
    if ds.lookback() != cfg.lookback || ds.horizon() != cfg.horizon {
        return Err(TrainerError::Mismatch(format!(
            "dataset windows are L={} F={}, model expects L={} F={}",
            ds.lookback(),
            ds.horizon(),
            cfg.lookback,
            cfg.horizon
        )));
    }
    Ok(())
}

fn to_e<E: Element>(v: &[f64]) -> Vec<E> {
    v.iter().map(|&x| E::from_f64(x)).collect()
}

/// Forward one sub-batch and return (loss, gradients by parameter tensor).
fn shard_loss_and_grads<E: Element>(
    params: &PsformerParams<E>,
    inputs: &[f64],
    targets: &[f64],
    len: usize,
) -> Result<(f64, Vec<Vec<E>>), TrainerError> {
    let cfg = &params.config;
    let mut tape: Tape<E> = Tape::new();
    let tp = insert_params(&mut tape, params, true)?;
    let x = to_e::<E>(inputs);
    let art = model_forward(&mut tape, params, &tp, &x, len, false)?;
    let target = tape.constant(to_e::<E>(targets), vec![len, cfg.channels, cfg.horizon])?;
    let diff = tape.sub(art.output, target)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.mean_all(sq);
    tape.backward(loss)?;
    let grads = tp
        .leaf_ids()
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![E::zero(); tape.data(id).len()])
        })
        .collect();
    Ok((tape.data(loss)[0].as_f64(), grads))
}

/// Loss and gradients over a batch. The batch is cut into two fixed shards
/// whose tapes build concurrently; shard results are combined with
/// element-count weights in a fixed order, so the outcome does not depend on
/// the number of worker threads.
fn loss_and_grads<E: Element>(
    params: &PsformerParams<E>,
    batch: &Batch,
) -> Result<(f64, Vec<Vec<E>>), TrainerError> {
    let cfg = &params.config;
    let per_x = cfg.channels * cfg.lookback;
    let per_y = cfg.channels * cfg.horizon;
    let first = batch.len.div_ceil(2);
    if batch.len < 2 {
        return shard_loss_and_grads(params, &batch.inputs, &batch.targets, batch.len);
    }
    let (xa, xb) = batch.inputs.split_at(first * per_x);
    let (ya, yb) = batch.targets.split_at(first * per_y);
    let second = batch.len - first;
    let (ra, rb) = rayon::join(
        || shard_loss_and_grads::<E>(params, xa, ya, first),
        || shard_loss_and_grads::<E>(params, xb, yb, second),
    );
    let (loss_a, grads_a) = ra?;
    let (loss_b, mut grads_b) = rb?;
    let wa = first as f64 / batch.len as f64;
    let wb = second as f64 / batch.len as f64;
    let (wa_e, wb_e) = (E::from_f64(wa), E::from_f64(wb));
    for (ga, gb) in grads_a.iter().zip(grads_b.iter_mut()) {
        for (a, b) in ga.iter().zip(gb.iter_mut()) {
            *b = *a * wa_e + *b * wb_e;
        }
    }
    Ok((loss_a * wa + loss_b * wb, grads_b))
}

fn evaluate_range<E: Element>(
    params: &PsformerParams<E>,
    ds: &WindowedDataset,
    split: Split,
    order: Vec<usize>,
    batch_size: usize,
) -> Result<MetricAccumulator, TrainerError> {
    let mut acc = MetricAccumulator::new();
    for batch in ds.batches_over(split, order, batch_size, false)? {
        let mut tape: Tape<E> = Tape::new();
        let tp = insert_params(&mut tape, params, false)?;
        let x = to_e::<E>(&batch.inputs);
        let art = model_forward(&mut tape, params, &tp, &x, batch.len, false)?;
        let target = to_e::<E>(&batch.targets);
        acc.update(tape.data(art.output), &target)?;
    }
    Ok(acc)
}

/// Forward-only evaluation over a split with `drop_last = false`,
/// element-weighted, in standardized space. The window range is cut into two
/// fixed halves evaluated concurrently; the element-weighted accumulation
/// makes the result independent of both batching and the cut.
pub fn evaluate<E: Element>(
    params: &PsformerParams<E>,
    ds: &WindowedDataset,
    split: Split,
    batch_size: usize,
) -> Result<(f64, f64), TrainerError> {
    check_compat::<E>(&params.config, ds)?;
    if batch_size == 0 {
        return Err(TrainerError::Dataset(DatasetError::BadBatchSize));
    }
    let count = ds.window_count(split);
    let half = count.div_ceil(2);
    let (ra, rb) = rayon::join(
        || evaluate_range::<E>(params, ds, split, (0..half).collect(), batch_size),
        || evaluate_range::<E>(params, ds, split, (half..count).collect(), batch_size),
    );
    let mut acc = ra?;
    acc.merge(&rb?);
    Ok((acc.mse(), acc.mae()))
}

/// Train from a fresh seeded initialization. Returns the report and the
/// parameters of the best validation epoch.
pub fn train<E: Element>(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    ds: &WindowedDataset,
) -> Result<(RunReport, PsformerParams<E>), TrainerError> {
    check_compat::<E>(model_cfg, ds)?;
    if train_cfg.max_epochs == 0 {
        return Err(TrainerError::Mismatch("max_epochs must be positive".into()));
    }
    let mut params = PsformerParams::<E>::init(model_cfg.clone(), train_cfg.seed)?;
    let counts = params.count_parameters();
    let mut adam = Adam::<E>::new(train_cfg.lr);
    let sam = SamConfig::new(train_cfg.rho);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut early: EarlyStop<PsformerParams<E>> = EarlyStop::new(train_cfg.patience);

    let mut epochs = Vec::new();
    let mut stopped_epoch = 0;
    let mut stopped_early = false;

    for epoch in 1..=train_cfg.max_epochs {
        let t0 = Instant::now();
        let mut train_sum = 0.0;
        let mut train_elems = 0u64;
        let batches =
            ds.batches(Split::Train, train_cfg.batch_size, true, Some(&mut shuffle_rng))?;
        for (batch_idx, batch) in batches.enumerate() {
            let mut failure: Option<TrainerError> = None;
            let mut loss_fn = |p: &mut PsformerParams<E>| match loss_and_grads(p, &batch) {
                Ok(v) => v,
                Err(e) => {
                    let zeros = p.tensors().iter().map(|t| vec![E::zero(); t.len()]).collect();
                    failure = Some(e);
                    (f64::NAN, zeros)
                }
            };
            let outcome = sam_step(&mut params, &mut loss_fn, &sam, &mut adam);
            if let Some(e) = failure {
                return Err(e);
            }
            if !outcome.loss.is_finite() {
                return Err(TrainerError::NanTrainLoss { epoch, batch: batch_idx });
            }
            let elems = (batch.len * model_cfg.channels * model_cfg.horizon) as u64;
            train_sum += outcome.loss * elems as f64;
            train_elems += elems;
        }
        let train_mse = train_sum / train_elems.max(1) as f64;
        let (val_mse, _) = evaluate(&params, ds, Split::Val, train_cfg.batch_size)?;
        epochs.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
            seconds: t0.elapsed().as_secs_f64(),
        });
        stopped_epoch = epoch;
        if let StopDecision::Stop = early.update(epoch, val_mse, &params)? {
            stopped_early = true;
            break;
        }
    }

    let best_epoch = early.best_epoch();
    let best_val_mse = early.best_loss().unwrap_or(f64::NAN);
    let best = early
        .into_best_checkpoint()
        .expect("at least one epoch ran");
    let (test_mse, test_mae) = evaluate(&best, ds, Split::Test, train_cfg.batch_size)?;

    let report = RunReport {
        model: model_cfg.clone(),
        train: train_cfg.clone(),
        epochs,
        stopped_epoch,
        stopped_early,
        best_epoch,
        best_val_mse,
        test_mse,
        test_mae,
        param_total: counts.total,
        param_encoder: counts.encoder,
        param_head: counts.head,
        floored_channels: ds.floored_channels().to_vec(),
    };
    Ok((report, best))
}
