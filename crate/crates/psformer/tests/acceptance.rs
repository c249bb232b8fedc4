//! Acceptance suite. One test per criterion; each prints a `criterion N:
//! PASS` line (visible with `--nocapture`) or fails its assertions.
//!
//! Criteria 6 and 7 train on the real benchmark CSVs for up to a few CPU
//! hours and are `#[ignore]`d by default; run them with
//! `cargo test --release -p psformer --test acceptance -- --ignored --nocapture`.
//! They look for the CSVs under `$PSFORMER_DATA_DIR`, falling back to the
//! repository's `data/` directory. Setting `PSFORMER_FULL_BUDGET=1` lifts the
//! reduced 60-epoch budget to the full 300-epoch configuration.

use std::path::PathBuf;

use psformer::dataset::{split_and_standardize, RawSeries, SplitSpec};
use psformer::gradcheck;
use psformer::model::{
    self, block_count, insert_params, model_forward, segment_inverse, segment_transform,
    ModelConfig, PsBlock, PsformerParams, SharingMode, Slot,
};
use psformer::optim::{sam_step, Adam, FlatParams, Optimizer, SamConfig, Sgd};
use psformer::tensor::Tape;
use psformer::trainer::{train, TrainConfig};

// ---------- shared helpers ----------------------------------------------

fn rng_stream(seed: u64) -> impl FnMut() -> f64 {
    let mut state = seed.max(1);
    move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-9)
}

// ---------- criterion 1: exact parameter counts --------------------------

#[test]
fn criterion_1_exact_parameter_counts() {
    let count = |sharing: SharingMode, encoders: usize, horizon: usize| {
        let mut cfg = ModelConfig::new(7, 512, 32, horizon);
        cfg.sharing = sharing;
        cfg.n_encoders = encoders;
        PsformerParams::<f32>::init(cfg, 1).unwrap().count_parameters()
    };
    // defaults, horizon 96: full and encoder-only
    let c = count(SharingMode::InEncoder, 1, 96);
    assert_eq!(c.total, 52_416);
    assert_eq!(c.encoder, 3_168);
    // three encoders (21-channel configuration shares the same counts)
    let c = count(SharingMode::InEncoder, 3, 96);
    assert_eq!(c.total, 58_752);
    assert_eq!(c.encoder, 9_504);
    // horizon 720
    assert_eq!(count(SharingMode::InEncoder, 1, 720).total, 372_528);
    // twelve shared encoders
    assert_eq!(count(SharingMode::InEncoder, 12, 96).total, 87_264);
    // no sharing, one and three encoders
    assert_eq!(count(SharingMode::None, 1, 96).total, 71_424);
    assert_eq!(count(SharingMode::None, 3, 96).total, 115_776);
    println!("criterion 1: PASS - six published parameter totals reproduced exactly");
}

// ---------- criterion 2: gradient correctness -----------------------------

#[test]
fn criterion_2_full_model_gradient_check() {
    let cfg = ModelConfig::new(2, 8, 4, 2);
    let report = gradcheck::grad_check(&cfg, 1, 2, 1e-5, 1e-4).unwrap();
    assert!(
        report.passed(),
        "gradient check failed:\n{}",
        report.to_text()
    );
    assert_eq!(report.groups.len(), 8, "expected every parameter group");
    println!(
        "criterion 2: PASS - max relative error {:.3e} < 1e-4 across {} parameter groups",
        report.max_rel_error,
        report.groups.len()
    );
}

// ---------- criterion 3: SAM degeneracy -----------------------------------

#[test]
fn criterion_3_sam_degeneracy() {
    // rho = 0 must match plain Adam within 1e-12 per coordinate over 100
    // random steps
    let mut next = rng_stream(0xfeed);
    let shapes = [4usize, 7, 3];
    let init: Vec<Vec<f64>> = shapes.iter().map(|&n| (0..n).map(|_| next()).collect()).collect();
    let grads_per_step: Vec<Vec<Vec<f64>>> = (0..100)
        .map(|_| shapes.iter().map(|&n| (0..n).map(|_| next() * 3.0).collect()).collect())
        .collect();

    let mut sam_params = FlatParams(init.clone());
    let mut adam_params = FlatParams(init);
    let mut adam_for_sam = Adam::new(1e-3);
    let mut adam_plain = Adam::new(1e-3);
    let sam = SamConfig::new(0.0);
    for step_grads in &grads_per_step {
        let mut loss_fn = |_: &mut FlatParams<f64>| (1.0, step_grads.clone());
        sam_step(&mut sam_params, &mut loss_fn, &sam, &mut adam_for_sam);
        adam_plain.step(&mut adam_params, step_grads);
    }
    for (a, b) in sam_params.0.iter().zip(adam_params.0.iter()) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }

    // hand-derived 1-D quadratic: theta=1, rho=0.1, plain inner step 0.1
    let mut params = FlatParams(vec![vec![1.0f64]]);
    let mut loss_fn = |p: &mut FlatParams<f64>| {
        let t = p.0[0][0];
        (t * t, vec![vec![2.0 * t]])
    };
    let mut sgd = Sgd::new(0.1);
    sam_step(&mut params, &mut loss_fn, &SamConfig::new(0.1), &mut sgd);
    assert_eq!(params.0[0][0], 0.78);
    println!("criterion 3: PASS - rho=0 bit-matches Adam over 100 steps; 1-D SAM step = 0.78 exactly");
}

// ---------- criterion 4: structural invariants ----------------------------

#[test]
fn criterion_4_structural_invariants() {
    let mut next = rng_stream(41);

    // segment transform bijectivity, bitwise, both directions
    let cfg = ModelConfig::new(3, 12, 4, 2);
    let mut tape: Tape<f64> = Tape::new();
    let data: Vec<f64> = (0..2 * 3 * 12).map(|_| next()).collect();
    let x = tape.leaf(data.clone(), vec![2, 3, 12], false).unwrap();
    let s = segment_transform(&mut tape, x, &cfg, 2).unwrap();
    let back = segment_inverse(&mut tape, s, &cfg, 2).unwrap();
    assert_eq!(tape.data(back), data.as_slice());
    let fwd_again = segment_transform(&mut tape, back, &cfg, 2).unwrap();
    assert_eq!(tape.data(fwd_again), tape.data(s));

    // RevIN round trip < 1e-10 in f64
    let x: Vec<f64> = (0..2 * 3 * 16).map(|_| next() * 4.0 + 1.0).collect();
    let (norm, state) = model::revin_normalize(&x, 2, 3, 16, 8);
    let restored = model::revin_denormalize_data(&norm, &state, 16);
    for (a, b) in restored.iter().zip(x.iter()) {
        assert!((a - b).abs() < 1e-10);
    }

    // softmax row sums < 1e-12 in f64, entries in [0, 1]
    let mut tape: Tape<f64> = Tape::new();
    let raw: Vec<f64> = (0..6 * 9).map(|_| next() * 20.0).collect();
    let si = tape.leaf(raw, vec![6, 9], false).unwrap();
    let sm = tape.softmax_rows(si).unwrap();
    for row in tape.data(sm).chunks(9) {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    // pre-softmax symmetry (f32) and PSD on a C = 8 instance
    let mut cfg = ModelConfig::new(2, 16, 4, 2); // P = 4, C = 8
    cfg.n_encoders = 1;
    let params = PsformerParams::<f32>::init(cfg.clone(), 7).unwrap();
    let x: Vec<f32> = (0..2 * 16).map(|_| next() as f32).collect();
    let records = model::export_attention(&params, &x, 1).unwrap();
    for rec in &records {
        let c = rec.dim;
        let mut max_asym = 0.0f32;
        let mut scale = 0.0f32;
        for i in 0..c {
            for j in 0..c {
                max_asym = max_asym.max((rec.pre[i * c + j] - rec.pre[j * c + i]).abs());
                scale = scale.max(rec.pre[i * c + j].abs());
            }
        }
        assert!(max_asym < 1e-5, "asymmetry {max_asym}");

        let sym = nalgebra::DMatrix::from_fn(c, c, |i, j| {
            0.5 * (rec.pre[i * c + j] as f64 + rec.pre[j * c + i] as f64)
        });
        let eigs = sym.symmetric_eigenvalues();
        let min_eig = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            min_eig >= -1e-4 * scale as f64,
            "min eigenvalue {min_eig} vs scale {scale}"
        );
    }

    // attention output stays in the convex hull of V's columns
    let mut tape: Tape<f32> = Tape::new();
    let tp = insert_params(&mut tape, &params, false).unwrap();
    let xin: Vec<f32> = (0..8 * 4).map(|_| next() as f32).collect();
    let xid = tape.leaf(xin, vec![1, 8, 4], false).unwrap();
    let v = model::ps_block_forward(&mut tape, xid, &tp.blocks[0]).unwrap();
    let out = model::seg_attention(&mut tape, xid, &tp.blocks[0], 4).unwrap();
    let vdata = tape.data(v);
    for col in 0..4 {
        let vals: Vec<f32> = (0..8).map(|r| vdata[r * 4 + col]).collect();
        let (lo, hi) = vals
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        for r in 0..8 {
            let o = tape.data(out)[r * 4 + col];
            assert!(
                o >= lo - 1e-5 && o <= hi + 1e-5,
                "column {col}: {o} outside [{lo}, {hi}]"
            );
        }
    }

    // shared-block aliasing: with in-encoder sharing, perturbing the single
    // block changes both stages' maps ...
    let mut shared = PsformerParams::<f32>::init(cfg.clone(), 9).unwrap();
    let x: Vec<f32> = (0..2 * 16).map(|_| next() as f32).collect();
    let before = model::export_attention(&shared, &x, 1).unwrap();
    shared.blocks[0].w3[5] += 0.25;
    let after = model::export_attention(&shared, &x, 1).unwrap();
    for (b, a) in before.iter().zip(after.iter()) {
        assert_ne!(b.pre, a.pre, "stage {} map did not react to the shared block", b.stage);
    }
    // ... while with no sharing, perturbing only the final-slot block leaves
    // every attention map bitwise untouched
    let mut cfg_none = cfg.clone();
    cfg_none.sharing = SharingMode::None;
    let mut isolated = PsformerParams::<f32>::init(cfg_none, 9).unwrap();
    let before = model::export_attention(&isolated, &x, 1).unwrap();
    let final_idx = isolated.block_for(0, Slot::Final);
    isolated.blocks[final_idx].w3[5] += 0.25;
    let after = model::export_attention(&isolated, &x, 1).unwrap();
    for (b, a) in before.iter().zip(after.iter()) {
        assert_eq!(b.pre, a.pre);
        assert_eq!(b.post, a.post);
    }
    println!("criterion 4: PASS - bijectivity, RevIN round trip, softmax sums, symmetry/PSD, convex hull, aliasing");
}

// ---------- criterion 5: oracle equivalence -------------------------------

// Independent scalar re-implementation of the forward pipeline. No tensor
// code is reused; only the erf primitive is shared (it is itself checked
// against a series oracle in the tensor tests).

struct OracleBlock {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    w3: Vec<f64>,
    b3: Vec<f64>,
    n: usize,
}

impl OracleBlock {
    fn from<E: psformer::Element>(b: &PsBlock<E>, n: usize) -> Self {
        let cast = |v: &Vec<E>| v.iter().map(|x| x.as_f64()).collect();
        OracleBlock {
            w1: cast(&b.w1),
            b1: cast(&b.b1),
            w2: cast(&b.w2),
            b2: cast(&b.b2),
            w3: cast(&b.w3),
            b3: cast(&b.b3),
            n,
        }
    }
}

fn o_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// rows x n times n x n plus bias, scalar loops
fn o_linear(x: &[f64], w: &[f64], b: &[f64], rows: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        for j in 0..n {
            let mut s = b[j];
            for p in 0..n {
                s += x[r * n + p] * w[p * n + j];
            }
            out[r * n + j] = s;
        }
    }
    out
}

fn o_ps_block(x: &[f64], block: &OracleBlock, rows: usize) -> Vec<f64> {
    let n = block.n;
    let h = o_linear(x, &block.w1, &block.b1, rows, n);
    let g: Vec<f64> = h.iter().map(|&v| o_gelu(v)).collect();
    let mut h2 = o_linear(&g, &block.w2, &block.b2, rows, n);
    for (a, &b) in h2.iter_mut().zip(x.iter()) {
        *a += b;
    }
    o_linear(&h2, &block.w3, &block.b3, rows, n)
}

fn o_attention(q: &[f64], k: &[f64], v: &[f64], c: usize, n: usize, d_k: usize) -> Vec<f64> {
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut out = vec![0.0; c * n];
    for i in 0..c {
        let mut scores = vec![0.0; c];
        for j in 0..c {
            let mut s = 0.0;
            for p in 0..n {
                s += q[i * n + p] * k[j * n + p];
            }
            scores[j] = s * scale;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for col in 0..n {
            let mut s = 0.0;
            for j in 0..c {
                s += exps[j] / z * v[j * n + col];
            }
            out[i * n + col] = s;
        }
    }
    out
}

fn o_encoder(x: &[f64], blocks: &[&OracleBlock; 7], c: usize, n: usize) -> Vec<f64> {
    let project = |input: &[f64], b: &OracleBlock| o_ps_block(input, b, c);
    let s1 = o_attention(
        &project(x, blocks[0]),
        &project(x, blocks[1]),
        &project(x, blocks[2]),
        c,
        n,
        n,
    );
    let act: Vec<f64> = s1.iter().map(|&v| v.max(0.0)).collect();
    let s2 = o_attention(
        &project(&act, blocks[3]),
        &project(&act, blocks[4]),
        &project(&act, blocks[5]),
        c,
        n,
        n,
    );
    let res: Vec<f64> = s2.iter().zip(x.iter()).map(|(a, b)| a + b).collect();
    o_ps_block(&res, blocks[6], c)
}

fn o_model_forward<E: psformer::Element>(params: &PsformerParams<E>, x: &[f64], batch: usize) -> Vec<f64> {
    let cfg = &params.config;
    let (m, l, f, n, p) = (cfg.channels, cfg.lookback, cfg.horizon, cfg.segments, cfg.patch_len());
    let c = cfg.segment_len();
    let w = cfg.revin_window;
    let blocks: Vec<OracleBlock> = params.blocks.iter().map(|b| OracleBlock::from(b, n)).collect();
    let head_w: Vec<f64> = params.head_w.iter().map(|v| v.as_f64()).collect();
    let head_b: Vec<f64> = params.head_b.iter().map(|v| v.as_f64()).collect();

    let mut out = vec![0.0; batch * m * f];
    for b in 0..batch {
        // instance normalization over the trailing w steps
        let mut norm = vec![0.0; m * l];
        let mut mus = vec![0.0; m];
        let mut sigmas = vec![0.0; m];
        for ch in 0..m {
            let row = &x[b * m * l + ch * l..b * m * l + (ch + 1) * l];
            let tail = &row[l - w..];
            let mu: f64 = tail.iter().sum::<f64>() / w as f64;
            let var: f64 = tail.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
            let sigma = (var + 1e-5).sqrt();
            for t in 0..l {
                norm[ch * l + t] = (row[t] - mu) / sigma;
            }
            mus[ch] = mu;
            sigmas[ch] = sigma;
        }
        // segments: seg[(ch*p + pi) * n + ni] = norm[ch*l + ni*p + pi]
        let mut seg = vec![0.0; c * n];
        for ch in 0..m {
            for pi in 0..p {
                for ni in 0..n {
                    seg[(ch * p + pi) * n + ni] = norm[ch * l + ni * p + pi];
                }
            }
        }
        for e in 0..cfg.n_encoders {
            let by_slot: [&OracleBlock; 7] = [
                &blocks[params.block_for(e, Slot::Q1)],
                &blocks[params.block_for(e, Slot::K1)],
                &blocks[params.block_for(e, Slot::V1)],
                &blocks[params.block_for(e, Slot::Q2)],
                &blocks[params.block_for(e, Slot::K2)],
                &blocks[params.block_for(e, Slot::V2)],
                &blocks[params.block_for(e, Slot::Final)],
            ];
            seg = o_encoder(&seg, &by_slot, c, n);
        }
        // inverse segments, per-channel head, de-normalize
        let mut flat = vec![0.0; m * l];
        for ch in 0..m {
            for pi in 0..p {
                for ni in 0..n {
                    flat[ch * l + ni * p + pi] = seg[(ch * p + pi) * n + ni];
                }
            }
        }
        for ch in 0..m {
            for j in 0..f {
                let mut s = head_b[j];
                for t in 0..l {
                    s += flat[ch * l + t] * head_w[t * f + j];
                }
                out[b * m * f + ch * f + j] = s * sigmas[ch] + mus[ch];
            }
        }
    }
    out
}

fn oracle_compare<E: psformer::Element>(mut cfg: ModelConfig, tolerance: f64, seed: u64) {
    let mut next = rng_stream(seed);
    cfg.n_encoders = 2;
    let params = PsformerParams::<E>::init(cfg.clone(), seed).unwrap();
    let c = cfg.segment_len();
    let n = cfg.segments;

    // ps_block_forward
    let x64: Vec<f64> = (0..c * n).map(|_| next()).collect();
    let xe: Vec<E> = x64.iter().map(|&v| E::from_f64(v)).collect();
    let mut tape: Tape<E> = Tape::new();
    let tp = insert_params(&mut tape, &params, false).unwrap();
    let xid = tape.leaf(xe.clone(), vec![1, c, n], false).unwrap();
    let got = model::ps_block_forward(&mut tape, xid, &tp.blocks[0]).unwrap();
    let oracle_block = OracleBlock::from(&params.blocks[0], n);
    let want = o_ps_block(&x64, &oracle_block, c);
    for (g, w) in tape.data(got).iter().zip(want.iter()) {
        assert!(rel_err(g.as_f64(), *w) < tolerance, "ps_block: {g} vs {w}");
    }

    // seg_attention (shared Q=K=V)
    let got = model::seg_attention(&mut tape, xid, &tp.blocks[0], n).unwrap();
    let proj = o_ps_block(&x64, &oracle_block, c);
    let want = o_attention(&proj, &proj, &proj, c, n, n);
    for (g, w) in tape.data(got).iter().zip(want.iter()) {
        assert!(rel_err(g.as_f64(), *w) < tolerance, "seg_attention: {g} vs {w}");
    }

    // encoder_forward
    let got = model::encoder_forward(&mut tape, xid, 0, &params, &tp, None).unwrap();
    let by_slot: [&OracleBlock; 7] = [&oracle_block; 7];
    let want = o_encoder(&x64, &by_slot, c, n);
    for (g, w) in tape.data(got).iter().zip(want.iter()) {
        assert!(rel_err(g.as_f64(), *w) < tolerance, "encoder: {g} vs {w}");
    }

    // model_forward, batched, both encoders
    let batch = 3;
    let x64: Vec<f64> = (0..batch * cfg.channels * cfg.lookback).map(|_| next() * 2.0).collect();
    let xe: Vec<E> = x64.iter().map(|&v| E::from_f64(v)).collect();
    let mut tape: Tape<E> = Tape::new();
    let tp = insert_params(&mut tape, &params, false).unwrap();
    let art = model_forward(&mut tape, &params, &tp, &xe, batch, false).unwrap();
    let want = o_model_forward(&params, &x64, batch);
    for (g, w) in tape.data(art.output).iter().zip(want.iter()) {
        assert!(rel_err(g.as_f64(), *w) < tolerance, "model: {g} vs {w}");
    }
}

#[test]
fn criterion_5_oracle_equivalence() {
    // C=4, N=4 and the minimal C=2, N=2 segment geometry
    oracle_compare::<f32>(ModelConfig::new(2, 8, 4, 2), 1e-6, 55);
    oracle_compare::<f64>(ModelConfig::new(2, 8, 4, 2), 1e-12, 56);
    oracle_compare::<f32>(ModelConfig::new(2, 2, 2, 1), 1e-6, 57);
    oracle_compare::<f64>(ModelConfig::new(2, 2, 2, 1), 1e-12, 58);
    // cross-encoder sharing exercises distinct per-slot blocks in a stage
    let mut next = rng_stream(77);
    let mut cfg = ModelConfig::new(2, 8, 4, 2);
    cfg.sharing = SharingMode::CrossEncoders;
    cfg.n_encoders = 2;
    let params = PsformerParams::<f64>::init(cfg.clone(), 77).unwrap();
    assert_eq!(params.blocks.len(), block_count(SharingMode::CrossEncoders, 2));
    let batch = 2;
    let x: Vec<f64> = (0..batch * 2 * 8).map(|_| next()).collect();
    let mut tape: Tape<f64> = Tape::new();
    let tp = insert_params(&mut tape, &params, false).unwrap();
    let art = model_forward(&mut tape, &params, &tp, &x, batch, false).unwrap();
    let want = o_model_forward(&params, &x, batch);
    for (g, w) in tape.data(art.output).iter().zip(want.iter()) {
        assert!(rel_err(*g, *w) < 1e-12, "cross-encoder model: {g} vs {w}");
    }
    println!("criterion 5: PASS - scalar oracles match in f32 (1e-6) and f64 (1e-12)");
}

// ---------- criteria 6-8 helpers ------------------------------------------

fn data_path(name: &str) -> PathBuf {
    if let Ok(dir) = std::env::var("PSFORMER_DATA_DIR") {
        return PathBuf::from(dir).join(name);
    }
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn load_benchmark(name: &str, spec: SplitSpec, horizon: usize) -> psformer::dataset::WindowedDataset {
    let path = data_path(name);
    assert!(
        path.exists(),
        "benchmark file {} not found; set PSFORMER_DATA_DIR or place it under data/",
        path.display()
    );
    let raw = psformer::dataset::load_csv(&path).unwrap();
    split_and_standardize(&raw, &spec, 512, horizon).unwrap()
}

fn full_budget() -> bool {
    std::env::var("PSFORMER_FULL_BUDGET").map(|v| v == "1").unwrap_or(false)
}

// ---------- criterion 6: desk-scale end-to-end ----------------------------

#[test]
#[ignore = "trains on ETTh1 for up to a few CPU-hours; needs data/ETTh1.csv"]
fn criterion_6_desk_scale_etth1() {
    let ds = load_benchmark("ETTh1.csv", SplitSpec::ett_hourly(512), 96);
    let model_cfg = ModelConfig::new(7, 512, 32, 96);
    let (max_epochs, bound) = if full_budget() { (300, 0.39) } else { (60, 0.40) };
    let train_cfg = TrainConfig {
        max_epochs,
        patience: 30,
        batch_size: 16,
        lr: 1e-4,
        rho: 0.6,
        seed: 1,
    };
    let (report, _) = train::<f32>(&model_cfg, &train_cfg, &ds).unwrap();
    println!(
        "criterion 6: ETTh1 H=96 ({} epochs max, stopped at {}, best epoch {}): test MSE {:.4}, MAE {:.4} (bound {bound})",
        max_epochs, report.stopped_epoch, report.best_epoch, report.test_mse, report.test_mae
    );
    assert!(
        report.test_mse <= bound,
        "test MSE {:.4} exceeds the {bound} bound",
        report.test_mse
    );
    println!("criterion 6: PASS - test MSE {:.4} <= {bound}", report.test_mse);
}

// ---------- criterion 7: sharing-mode ordering (informational) ------------

#[test]
#[ignore = "trains ETTm1 twice under the criterion-6 budget; several CPU-hours"]
fn criterion_7_sharing_mode_ordering() {
    let ds = load_benchmark("ETTm1.csv", SplitSpec::ett_minute(512), 96);
    let (max_epochs, _) = if full_budget() { (300, 0.0) } else { (60, 0.0) };
    let train_cfg = TrainConfig {
        max_epochs,
        patience: 30,
        batch_size: 16,
        lr: 1e-4,
        rho: 0.4,
        seed: 1,
    };
    let run = |sharing: SharingMode| {
        let mut cfg = ModelConfig::new(7, 512, 32, 96);
        cfg.n_encoders = 3;
        cfg.sharing = sharing;
        let (report, _) = train::<f32>(&cfg, &train_cfg, &ds).unwrap();
        println!(
            "criterion 7: ETTm1 H=96 sharing={}: test MSE {:.4} (stopped {})",
            sharing, report.test_mse, report.stopped_epoch
        );
        report.test_mse
    };
    let in_encoder = run(SharingMode::InEncoder);
    let none = run(SharingMode::None);
    let ordered = in_encoder <= none;
    // informational, not gating: report the ordering either way
    println!(
        "criterion 7: {} - in-encoder {:.4} {} none {:.4} (reference ordering 0.282 <= 0.295)",
        if ordered { "PASS" } else { "REPORT" },
        in_encoder,
        if ordered { "<=" } else { ">" },
        none
    );
}

// ---------- criterion 8: determinism --------------------------------------

fn sinusoid_dataset() -> psformer::dataset::WindowedDataset {
    let rows = 400;
    let mut values = Vec::with_capacity(rows * 2);
    for t in 0..rows {
        let x = t as f64;
        values.push((2.0 * std::f64::consts::PI * x / 16.0).sin());
        values.push((2.0 * std::f64::consts::PI * x / 8.0).cos() * 0.5
            + (2.0 * std::f64::consts::PI * x / 32.0).sin() * 0.3);
    }
    let raw = RawSeries::from_values(vec!["s".into(), "c".into()], values);
    split_and_standardize(&raw, &SplitSpec::fractions(0.6, 0.2, 0.2, 32), 32, 8).unwrap()
}

#[test]
fn criterion_8_determinism_and_toy_convergence() {
    let ds = sinusoid_dataset();
    let model_cfg = ModelConfig::new(2, 32, 4, 8);
    let train_cfg = TrainConfig {
        max_epochs: 15,
        patience: 30,
        batch_size: 8,
        lr: 1e-3,
        rho: 0.1,
        seed: 1,
    };
    let (r1, p1) = train::<f32>(&model_cfg, &train_cfg, &ds).unwrap();
    let (r2, p2) = train::<f32>(&model_cfg, &train_cfg, &ds).unwrap();
    assert_eq!(p1, p2, "best parameters differ between identical runs");
    for (a, b) in r1.epochs.iter().zip(r2.epochs.iter()) {
        assert_eq!(a.train_mse, b.train_mse, "epoch {} train loss differs", a.epoch);
        assert_eq!(a.val_mse, b.val_mse, "epoch {} val loss differs", a.epoch);
    }
    assert_eq!(r1.test_mse, r2.test_mse);
    assert_eq!(r1.test_mae, r2.test_mae);

    // the noiseless sinusoid is perfectly predictable: well under 0.1 of the
    // (standardized, ~unit) signal variance inside the epoch budget
    assert!(
        r1.test_mse < 0.1,
        "sinusoid test MSE {:.4} should be < 0.1",
        r1.test_mse
    );
    println!(
        "criterion 8: PASS - identical loss trajectories across runs; sinusoid test MSE {:.4} < 0.1",
        r1.test_mse
    );
}
