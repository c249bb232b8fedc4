use std::sync::Arc;

use super::{
    revin_normalize, segment_inverse, segment_transform, ModelError, PsformerParams, RevinState,
    Slot, StageExt,
};
use crate::element::Element;
use crate::tensor::{Tape, TensorId, TensorResult};

/// Tape handles for one block's six parameter tensors.
#[derive(Debug, Clone, Copy)]
pub struct TapeBlock {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
    pub w3: TensorId,
    pub b3: TensorId,
}

/// Tape handles for the full parameter set, in `PsformerParams` order.
#[derive(Debug, Clone)]
pub struct TapeParams {
    pub blocks: Vec<TapeBlock>,
    pub head_w: TensorId,
    pub head_b: TensorId,
}

impl TapeParams {
    /// Leaf ids in the same order as `PsformerParams::tensors`.
    pub fn leaf_ids(&self) -> Vec<TensorId> {
        let mut out = Vec::with_capacity(self.blocks.len() * 6 + 2);
        for b in &self.blocks {
            out.extend([b.w1, b.b1, b.w2, b.b2, b.w3, b.b3]);
        }
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }
}

/// Copy the parameters onto a tape as leaves. Training passes
/// `requires_grad = true`; inference skips gradient tracking entirely.
pub fn insert_params<E: Element>(
    tape: &mut Tape<E>,
    params: &PsformerParams<E>,
    requires_grad: bool,
) -> Result<TapeParams, ModelError> {
    let n = params.config.segments;
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        blocks.push(TapeBlock {
            w1: tape.leaf(b.w1.clone(), vec![n, n], requires_grad).stage("params")?,
            b1: tape.leaf(b.b1.clone(), vec![n], requires_grad).stage("params")?,
            w2: tape.leaf(b.w2.clone(), vec![n, n], requires_grad).stage("params")?,
            b2: tape.leaf(b.b2.clone(), vec![n], requires_grad).stage("params")?,
            w3: tape.leaf(b.w3.clone(), vec![n, n], requires_grad).stage("params")?,
            b3: tape.leaf(b.b3.clone(), vec![n], requires_grad).stage("params")?,
        });
    }
    let head_w = tape
        .leaf(
            params.head_w.clone(),
            vec![params.config.lookback, params.config.horizon],
            requires_grad,
        )
        .stage("params")?;
    let head_b = tape
        .leaf(params.head_b.clone(), vec![params.config.horizon], requires_grad)
        .stage("params")?;
    Ok(TapeParams { blocks, head_w, head_b })
}

/// `(GeLU(x W1 + b1) W2 + b2 + x) W3 + b3`, applied to each length-N row.
pub fn ps_block_forward<E: Element>(
    tape: &mut Tape<E>,
    x: TensorId,
    block: &TapeBlock,
) -> TensorResult<TensorId> {
    let h = tape.matmul(x, block.w1)?;
    let h = tape.add_bias(h, block.b1)?;
    let g = tape.gelu(h);
    let h2 = tape.matmul(g, block.w2)?;
    let h2 = tape.add_bias(h2, block.b2)?;
    let res = tape.add(h2, x)?;
    let out = tape.matmul(res, block.w3)?;
    tape.add_bias(out, block.b3)
}

struct StageIds {
    out: TensorId,
    pre: TensorId,
    post: TensorId,
}

fn attention_stage<E: Element>(
    tape: &mut Tape<E>,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    d_k: usize,
) -> TensorResult<StageIds> {
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let pre = tape.scale(scores, E::from_f64(1.0 / (d_k as f64).sqrt()));
    let post = tape.softmax_rows(pre)?;
    let out = tape.matmul(post, v)?;
    Ok(StageIds { out, pre, post })
}

/// Scaled dot-product attention over the segment axis where Q, K and V are
/// one shared-block projection of the input, evaluated once and reused.
pub fn seg_attention<E: Element>(
    tape: &mut Tape<E>,
    x: TensorId,
    block: &TapeBlock,
    d_k: usize,
) -> TensorResult<TensorId> {
    let proj = ps_block_forward(tape, x, block)?;
    Ok(attention_stage(tape, proj, proj, proj, d_k)?.out)
}

/// Score matrices captured for one (encoder, stage) pair.
#[derive(Debug, Clone)]
pub struct AttentionRecord<E: Element> {
    pub encoder: usize,
    /// 1 or 2
    pub stage: usize,
    /// C x C scaled scores before the softmax
    pub pre: Vec<E>,
    /// C x C attention weights after the softmax
    pub post: Vec<E>,
    pub dim: usize,
}

fn attend<E: Element>(
    tape: &mut Tape<E>,
    input: TensorId,
    encoder: usize,
    stage_no: usize,
    slots: [Slot; 3],
    params: &PsformerParams<E>,
    tp: &TapeParams,
) -> Result<StageIds, ModelError> {
    let label = |part: &str| format!("encoder {encoder} stage {stage_no} {part}");
    let idx = [
        params.block_for(encoder, slots[0]),
        params.block_for(encoder, slots[1]),
        params.block_for(encoder, slots[2]),
    ];
    // distinct block indices get their own evaluation; aliased ones reuse it
    let q = ps_block_forward(tape, input, &tp.blocks[idx[0]]).stage(&label("q"))?;
    let k = if idx[1] == idx[0] {
        q
    } else {
        ps_block_forward(tape, input, &tp.blocks[idx[1]]).stage(&label("k"))?
    };
    let v = if idx[2] == idx[0] {
        q
    } else if idx[2] == idx[1] {
        k
    } else {
        ps_block_forward(tape, input, &tp.blocks[idx[2]]).stage(&label("v"))?
    };
    attention_stage(tape, q, k, v, params.config.d_k()).stage(&label("attention"))
}

/// One encoder: `(Attn2(ReLU(Attn1(x))) + x) * W^S_final`.
pub fn encoder_forward<E: Element>(
    tape: &mut Tape<E>,
    x: TensorId,
    encoder: usize,
    params: &PsformerParams<E>,
    tp: &TapeParams,
    mut collector: Option<&mut Vec<AttentionRecord<E>>>,
) -> Result<TensorId, ModelError> {
    let c = params.config.segment_len();
    let record = |tape: &Tape<E>, stage: usize, ids: &StageIds,
                      collector: &mut Option<&mut Vec<AttentionRecord<E>>>| {
        if let Some(out) = collector.as_deref_mut() {
            out.push(AttentionRecord {
                encoder,
                stage,
                pre: tape.data(ids.pre).to_vec(),
                post: tape.data(ids.post).to_vec(),
                dim: c,
            });
        }
    };

    let s1 = attend(tape, x, encoder, 1, [Slot::Q1, Slot::K1, Slot::V1], params, tp)?;
    record(tape, 1, &s1, &mut collector);
    let act = tape.relu(s1.out);
    let s2 = attend(tape, act, encoder, 2, [Slot::Q2, Slot::K2, Slot::V2], params, tp)?;
    record(tape, 2, &s2, &mut collector);
    let res = tape
        .add(s2.out, x)
        .stage(&format!("encoder {encoder} residual"))?;
    let final_block = &tp.blocks[params.block_for(encoder, Slot::Final)];
    ps_block_forward(tape, res, final_block).stage(&format!("encoder {encoder} final block"))
}

/// Everything a forward pass produces besides the tape itself.
pub struct ForwardArtifacts<E: Element> {
    /// `[batch, M, F]` prediction, de-normalized back to dataset space.
    pub output: TensorId,
    pub revin: RevinState<E>,
    /// Populated only when attention capture was requested.
    pub attention: Vec<AttentionRecord<E>>,
}

/// Full pipeline on a `[batch, M, L]` window buffer (dataset-standardized):
/// RevIN -> segments -> encoders -> inverse -> per-channel head -> RevIN⁻¹.
pub fn model_forward<E: Element>(
    tape: &mut Tape<E>,
    params: &PsformerParams<E>,
    tp: &TapeParams,
    x: &[E],
    batch: usize,
    capture_attention: bool,
) -> Result<ForwardArtifacts<E>, ModelError> {
    let cfg = &params.config;
    let (m, l, f) = (cfg.channels, cfg.lookback, cfg.horizon);
    if x.len() != batch * m * l {
        return Err(ModelError::Config(format!(
            "input buffer has {} values, config wants batch {batch} x {m} x {l}",
            x.len()
        )));
    }
    let (x_norm, revin) = revin_normalize(x, batch, m, l, cfg.revin_window);
    let x_id = tape.constant(x_norm, vec![batch, m, l]).stage("input")?;

    let mut h = segment_transform(tape, x_id, cfg, batch)?;
    let mut attention = Vec::new();
    for e in 0..cfg.n_encoders {
        let collector = if capture_attention { Some(&mut attention) } else { None };
        h = encoder_forward(tape, h, e, params, tp, collector)?;
    }
    let y = segment_inverse(tape, h, cfg, batch)?;

    let flat = tape.reshape(y, vec![batch * m, l]).stage("head")?;
    let proj = tape.matmul(flat, tp.head_w).stage("head")?;
    let proj = tape.add_bias(proj, tp.head_b).stage("head")?;
    let y_norm = tape.reshape(proj, vec![batch, m, f]).stage("head")?;

    let output = tape
        .scale_shift_rows(y_norm, Arc::new(revin.std.clone()), &revin.mean)
        .stage("revin denormalize")?;
    Ok(ForwardArtifacts { output, revin, attention })
}

/// Run a single sample through the model and return the score matrices of
/// every (encoder, stage): `n_encoders x 2` records, each with the pre- and
/// post-softmax `C x C` matrix.
pub fn export_attention<E: Element>(
    params: &PsformerParams<E>,
    x: &[E],
    batch: usize,
) -> Result<Vec<AttentionRecord<E>>, ModelError> {
    if batch != 1 {
        return Err(ModelError::BatchTooLarge { got: batch });
    }
    let mut tape: Tape<E> = Tape::new();
    let tp = insert_params(&mut tape, params, false)?;
    let artifacts = model_forward(&mut tape, params, &tp, x, 1, true)?;
    Ok(artifacts.attention)
}

/// The `P x P` diagonal sub-block of a `C x C` attention matrix belonging to
/// one channel: rows and columns `[m*P, (m+1)*P)`.
pub fn channel_submatrix<E: Element>(mat: &[E], c: usize, p: usize, channel: usize) -> Vec<E> {
    channel_pair_submatrix(mat, c, p, channel, channel)
}

/// The `P x P` sub-block relating `row_channel`'s patch positions to
/// `col_channel`'s.
pub fn channel_pair_submatrix<E: Element>(
    mat: &[E],
    c: usize,
    p: usize,
    row_channel: usize,
    col_channel: usize,
) -> Vec<E> {
    debug_assert_eq!(mat.len(), c * c);
    let mut out = Vec::with_capacity(p * p);
    for i in 0..p {
        let row = row_channel * p + i;
        for j in 0..p {
            let col = col_channel * p + j;
            out.push(mat[row * c + col]);
        }
    }
    out
}
