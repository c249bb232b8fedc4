use std::path::{Path, PathBuf};

use psformer::dataset::{load_csv, split_and_standardize, Split, WindowedDataset};
use psformer::gradcheck;
use psformer::model::{
    block_count, channel_pair_submatrix, channel_submatrix, export_attention, load_checkpoint,
    save_checkpoint, AttentionRecord, ModelConfig, PsBlock, PsformerParams, SharingMode,
};
use psformer::trainer::{evaluate, train, RunReport};

use crate::config::ExperimentConfig;
use crate::CliError;

const REPORT_FILE: &str = "report.txt";
const CHECKPOINT_FILE: &str = "model.ckpt";
const RESOLVED_FILE: &str = "resolved.cfg";

fn load_dataset(cfg: &ExperimentConfig) -> Result<(WindowedDataset, usize), CliError> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| CliError::Usage("a dataset path is required (--dataset)".into()))?;
    let raw = load_csv(path).map_err(|e| CliError::Runtime(e.to_string()))?;
    let channels = raw.channels();
    let ds = split_and_standardize(&raw, &cfg.split_spec(), cfg.lookback, cfg.horizon)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok((ds, channels))
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn run_training(cfg: &ExperimentConfig, quiet: bool) -> Result<RunReport, CliError> {
    // pin the resolved SAM radius so the echoed config reproduces this run
    let mut cfg = cfg.clone();
    cfg.rho = Some(cfg.effective_rho());
    let cfg = &cfg;
    let (ds, channels) = load_dataset(cfg)?;
    let model_cfg = cfg.model_config(channels);
    let train_cfg = cfg.train_config();
    if !quiet {
        let counts = PsformerParams::<f32>::init(model_cfg.clone(), train_cfg.seed)
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .count_parameters();
        println!(
            "training: M={channels} L={} N={} F={} encoders={} sharing={} | {} parameters",
            model_cfg.lookback,
            model_cfg.segments,
            model_cfg.horizon,
            model_cfg.n_encoders,
            model_cfg.sharing,
            counts.total
        );
        println!(
            "train/val/test windows: {}/{}/{}",
            ds.window_count(Split::Train),
            ds.window_count(Split::Val),
            ds.window_count(Split::Test)
        );
    }
    let (report, best) =
        train::<f32>(&model_cfg, &train_cfg, &ds).map_err(|e| CliError::Runtime(e.to_string()))?;
    if !quiet {
        for e in &report.epochs {
            println!(
                "epoch {:>3}  train_mse {:.6}  val_mse {:.6}  {:.1}s",
                e.epoch, e.train_mse, e.val_mse, e.seconds
            );
        }
        println!(
            "best epoch {} (val_mse {:.6}); test mse {:.6} mae {:.6}",
            report.best_epoch, report.best_val_mse, report.test_mse, report.test_mae
        );
    }
    write_out(&cfg.out, REPORT_FILE, &report.to_text())?;
    write_out(&cfg.out, RESOLVED_FILE, &cfg.to_file_text())?;
    save_checkpoint(&best, &cfg.out.join(CHECKPOINT_FILE))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(report)
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<(), CliError> {
    run_training(cfg, false)?;
    println!("artifacts in {}", cfg.out.display());
    Ok(())
}

fn parse_split(name: &str) -> Result<Split, CliError> {
    match name.to_ascii_lowercase().as_str() {
        "train" => Ok(Split::Train),
        "val" | "validation" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Usage(format!("unknown split '{other}'"))),
    }
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    split_name: &str,
) -> Result<(), CliError> {
    let split = parse_split(split_name)?;
    let params: PsformerParams<f32> =
        load_checkpoint(checkpoint).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut cfg = cfg.clone();
    cfg.lookback = params.config.lookback;
    cfg.horizon = params.config.horizon;
    let (ds, channels) = load_dataset(&cfg)?;
    if channels != params.config.channels {
        return Err(CliError::Runtime(format!(
            "checkpoint was trained on {} channels but the dataset has {channels}",
            params.config.channels
        )));
    }
    let (mse, mae) = evaluate(&params, &ds, split, cfg.batch_size)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("split = {split_name}");
    println!("mse = {mse:.6}");
    println!("mae = {mae:.6}");
    Ok(())
}

pub fn cmd_count_params(cfg: &ExperimentConfig) -> Result<(), CliError> {
    // parameter counts do not depend on the channel count
    let model_cfg = cfg.model_config(1);
    model_cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let per_block = PsBlock::<f32>::param_count(cfg.segments);
    let head = cfg.lookback * cfg.horizon + cfg.horizon;
    println!(
        "configuration: L={} F={} N={} encoders={}",
        cfg.lookback, cfg.horizon, cfg.segments, cfg.encoders
    );
    println!("per-block parameters: {per_block}");
    println!("head parameters:      {head}");
    println!();
    println!("{:<16} {:>7} {:>10} {:>10} {:>10}", "sharing", "blocks", "encoder", "head", "total");
    for mode in SharingMode::ALL_MODES {
        let blocks = block_count(mode, cfg.encoders);
        let encoder = blocks * per_block;
        let marker = if mode == cfg.sharing { " *" } else { "" };
        println!(
            "{:<16} {:>7} {:>10} {:>10} {:>10}{marker}",
            mode.name(),
            blocks,
            encoder,
            head,
            encoder + head
        );
    }
    Ok(())
}

pub fn cmd_grad_check(seed: u64) -> Result<(), CliError> {
    // deliberately tiny and in f64: M=2, L=8, N=4, F=2, one encoder
    let cfg = ModelConfig::new(2, 8, 4, 2);
    let report = gradcheck::grad_check(
        &cfg,
        seed,
        2,
        gradcheck::DEFAULT_STEP,
        gradcheck::DEFAULT_TOLERANCE,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    print!("{}", report.to_text());
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient check failed".into()))
    }
}

fn format_matrix(mat: &[f32], cols: usize) -> String {
    let mut s = String::new();
    for row in mat.chunks(cols) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

fn export_record(
    out: &Path,
    rec: &AttentionRecord<f32>,
    patch_len: usize,
    channel: Option<usize>,
    channel_pair: Option<(usize, usize)>,
) -> Result<usize, CliError> {
    let mut written = 0;
    for (tag, mat) in [("pre", &rec.pre), ("post", &rec.post)] {
        let base = format!("attention_e{}_s{}_{tag}", rec.encoder, rec.stage);
        write_out(out, &format!("{base}.csv"), &format_matrix(mat, rec.dim))?;
        written += 1;
        if let Some(m) = channel {
            let sub = channel_submatrix(mat, rec.dim, patch_len, m);
            write_out(out, &format!("{base}_ch{m}.csv"), &format_matrix(&sub, patch_len))?;
            written += 1;
        }
        if let Some((a, b)) = channel_pair {
            let sub = channel_pair_submatrix(mat, rec.dim, patch_len, a, b);
            write_out(out, &format!("{base}_ch{a}x{b}.csv"), &format_matrix(&sub, patch_len))?;
            written += 1;
        }
    }
    Ok(written)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_export_attention(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    split_name: &str,
    sample: usize,
    channel: Option<usize>,
    channel_pair: Option<(usize, usize)>,
) -> Result<(), CliError> {
    let split = parse_split(split_name)?;
    let params: PsformerParams<f32> =
        load_checkpoint(checkpoint).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mcfg = params.config.clone();
    let mut cfg = cfg.clone();
    cfg.lookback = mcfg.lookback;
    cfg.horizon = mcfg.horizon;
    let (ds, channels) = load_dataset(&cfg)?;
    if channels != mcfg.channels {
        return Err(CliError::Runtime(format!(
            "checkpoint was trained on {} channels but the dataset has {channels}",
            mcfg.channels
        )));
    }
    let available = ds.window_count(split);
    if sample >= available {
        return Err(CliError::Runtime(format!(
            "sample {sample} out of range: split '{split_name}' has {available} windows"
        )));
    }
    if let Some(m) = channel {
        if m >= channels {
            return Err(CliError::Usage(format!("channel {m} out of range (M={channels})")));
        }
    }
    if let Some((a, b)) = channel_pair {
        if a >= channels || b >= channels {
            return Err(CliError::Usage(format!(
                "channel pair ({a},{b}) out of range (M={channels})"
            )));
        }
    }

    let mut input = vec![0.0; channels * mcfg.lookback];
    let mut target = vec![0.0; channels * mcfg.horizon];
    ds.fill_window(split, sample, &mut input, &mut target);
    let x: Vec<f32> = input.iter().map(|&v| v as f32).collect();
    let records = export_attention(&params, &x, 1).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut files = 0;
    for rec in &records {
        files += export_record(&cfg.out, rec, mcfg.patch_len(), channel, channel_pair)?;
    }
    println!(
        "wrote {files} matrix files for {} encoder(s) x 2 stages to {}",
        mcfg.n_encoders,
        cfg.out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Segments,
    Encoders,
    Sharing,
    Rho,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "segments" => Some(Self::Segments),
            "encoders" => Some(Self::Encoders),
            "sharing" => Some(Self::Sharing),
            "rho" => Some(Self::Rho),
            _ => None,
        }
    }

    fn default_values(&self) -> Vec<String> {
        match self {
            Self::Segments => vec!["8", "16", "32", "64"],
            Self::Encoders => vec!["1", "2", "3", "4"],
            Self::Sharing => SharingMode::ALL_MODES.iter().map(|m| m.name()).collect(),
            Self::Rho => {
                return (0..=10).map(|i| format!("{:.1}", i as f64 / 10.0)).collect()
            }
        }
        .into_iter()
        .map(str::to_string)
        .collect()
    }
}

pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    axis: AblationAxis,
    values: Option<Vec<String>>,
) -> Result<(), CliError> {
    let values = values.unwrap_or_else(|| axis.default_values());
    let mut lines = vec![format!(
        "{:<16} {:>10} {:>10} {:>10} {:>8}",
        "value", "test_mse", "test_mae", "params", "epochs"
    )];
    println!("{}", lines[0]);
    for value in &values {
        let mut run_cfg = cfg.clone();
        match axis {
            AblationAxis::Segments => {
                let n: usize = value
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad segment count '{value}'")))?;
                if cfg.lookback % n != 0 {
                    let line = format!("{value:<16} skipped: {n} does not divide lookback {}", cfg.lookback);
                    println!("{line}");
                    lines.push(line);
                    continue;
                }
                run_cfg.segments = n;
            }
            AblationAxis::Encoders => {
                run_cfg.encoders = value
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad encoder count '{value}'")))?;
            }
            AblationAxis::Sharing => {
                run_cfg.sharing = SharingMode::parse(value)
                    .ok_or_else(|| CliError::Usage(format!("bad sharing mode '{value}'")))?;
            }
            AblationAxis::Rho => {
                run_cfg.rho = Some(
                    value
                        .parse()
                        .map_err(|_| CliError::Usage(format!("bad rho '{value}'")))?,
                );
            }
        }
        run_cfg.out = cfg.out.join(format!("ablate_{}", value.replace('.', "_")));
        let report = run_training(&run_cfg, true)?;
        let line = format!(
            "{:<16} {:>10.6} {:>10.6} {:>10} {:>8}",
            value, report.test_mse, report.test_mae, report.param_total, report.stopped_epoch
        );
        println!("{line}");
        lines.push(line);
    }
    let axis_name = format!("{axis:?}").to_lowercase();
    write_out(&cfg.out, &format!("ablation_{axis_name}.txt"), &(lines.join("\n") + "\n"))?;
    Ok(())
}
