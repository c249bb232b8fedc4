//! Dense-tensor kernel with reverse-mode automatic differentiation.
//!
//! Tensors live on a [`Tape`]: every operation records its inputs and a
//! backward rule, and [`Tape::backward`] replays the tape in reverse to
//! populate gradients. Tensors have 1 to 3 axes, stored flat in row-major
//! order. Binary elementwise ops require exact shape equality; the only
//! broadcast-like operations are scalar scaling, the trailing-axis bias add
//! and the per-row affine used by instance denormalization.
//!
//! A tape is single-writer: one training step builds and consumes one tape
//! sequentially. Large matrix products parallelize internally over output
//! rows, which is bitwise deterministic for any thread count because each
//! output element is produced by exactly one thread with a fixed reduction
//! order.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::element::Element;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Errors produced by tensor operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    /// Two operands cannot be combined, e.g. matmul inner axes differ.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A single operand has a shape the operation does not accept.
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        why: &'static str,
    },
    /// A buffer length does not match the number of elements implied by a shape.
    SizeMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    /// `backward` was called on a tensor that is not a scalar.
    NonScalarLoss { shape: Vec<usize> },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            TensorError::BadShape { op, shape, why } => {
                write!(f, "{op}: invalid shape {shape:?} ({why})")
            }
            TensorError::SizeMismatch { op, expected, got } => {
                write!(f, "{op}: expected {expected} elements, got {got}")
            }
            TensorError::NonScalarLoss { shape } => {
                write!(f, "backward: loss must be a scalar, got shape {shape:?}")
            }
        }
    }
}

impl std::error::Error for TensorError {}

pub type TensorResult<T> = Result<T, TensorError>;

/// A tensor node: flat row-major data plus gradient storage.
#[derive(Debug, Clone)]
pub struct Tensor<E: Element> {
    pub shape: Vec<usize>,
    pub data: Vec<E>,
    pub requires_grad: bool,
    pub grad: Option<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Backward rule recorded for each tape node.
#[derive(Debug, Clone)]
enum Op<E: Element> {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    Reshape { x: TensorId },
    SoftmaxRows { x: TensorId },
    Gelu { x: TensorId },
    Relu { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: E },
    AddBias { x: TensorId, bias: TensorId },
    Gather { x: TensorId, map: Arc<Vec<usize>> },
    ScaleShiftRows { x: TensorId, scale: Arc<Vec<E>> },
    SumAll { x: TensorId },
    MeanAll { x: TensorId },
}

struct Node<E: Element> {
    tensor: Tensor<E>,
    op: Op<E>,
}

/// Recorded computation: a topologically ordered list of operations.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Below this many multiply-adds (or moved elements) an op stays
/// sequential. Thread fork-join on small hosts costs around a tenth of a
/// millisecond, so only very large single ops are worth splitting; the
/// training loop parallelizes across batch shards instead (see trainer).
const PAR_FLOP_THRESHOLD: usize = 32 * 1024 * 1024;
const PAR_ELEM_THRESHOLD: usize = 8 * 1024 * 1024;

/// Rows per task when a row loop goes parallel: about eight tasks total,
/// never less than one threshold's worth of work each.
fn row_chunk(total_rows: usize, flop_per_row: usize) -> usize {
    let by_tasks = total_rows.div_ceil(8);
    let by_flops = PAR_FLOP_THRESHOLD.div_ceil(flop_per_row.max(1));
    by_tasks.max(by_flops).max(1)
}

fn map_elems<E: Element>(src: &[E], f: impl Fn(E) -> E + Sync) -> Vec<E> {
    let mut out = vec![E::zero(); src.len()];
    if src.len() >= PAR_ELEM_THRESHOLD {
        let chunk = src.len().div_ceil(4);
        out.par_chunks_mut(chunk)
            .zip(src.par_chunks(chunk))
            .for_each(|(d, s)| {
                for (dv, &sv) in d.iter_mut().zip(s.iter()) {
                    *dv = f(sv);
                }
            });
    } else {
        for (dv, &sv) in out.iter_mut().zip(src.iter()) {
            *dv = f(sv);
        }
    }
    out
}

fn zip_map_elems<E: Element>(a: &[E], b: &[E], f: impl Fn(E, E) -> E + Sync) -> Vec<E> {
    let mut out = vec![E::zero(); a.len()];
    if a.len() >= PAR_ELEM_THRESHOLD {
        let chunk = a.len().div_ceil(4);
        out.par_chunks_mut(chunk)
            .zip(a.par_chunks(chunk).zip(b.par_chunks(chunk)))
            .for_each(|(d, (x, y))| {
                for ((dv, &xv), &yv) in d.iter_mut().zip(x.iter()).zip(y.iter()) {
                    *dv = f(xv, yv);
                }
            });
    } else {
        for ((dv, &xv), &yv) in out.iter_mut().zip(a.iter()).zip(b.iter()) {
            *dv = f(xv, yv);
        }
    }
    out
}

/// dst[i] += f(g[i]), parallel on large buffers.
fn acc1<E: Element>(dst: &mut [E], g: &[E], f: impl Fn(E) -> E + Sync) {
    if dst.len() >= PAR_ELEM_THRESHOLD {
        let chunk = dst.len().div_ceil(4);
        dst.par_chunks_mut(chunk)
            .zip(g.par_chunks(chunk))
            .for_each(|(d, gs)| {
                for (dv, &gv) in d.iter_mut().zip(gs.iter()) {
                    *dv = *dv + f(gv);
                }
            });
    } else {
        for (dv, &gv) in dst.iter_mut().zip(g.iter()) {
            *dv = *dv + f(gv);
        }
    }
}

/// dst[i] += f(x[i], g[i]), parallel on large buffers.
fn acc2<E: Element>(dst: &mut [E], x: &[E], g: &[E], f: impl Fn(E, E) -> E + Sync) {
    if dst.len() >= PAR_ELEM_THRESHOLD {
        let chunk = dst.len().div_ceil(4);
        dst.par_chunks_mut(chunk)
            .zip(x.par_chunks(chunk).zip(g.par_chunks(chunk)))
            .for_each(|(d, (xs, gs))| {
                for ((dv, &xv), &gv) in d.iter_mut().zip(xs.iter()).zip(gs.iter()) {
                    *dv = *dv + f(xv, gv);
                }
            });
    } else {
        for ((dv, &xv), &gv) in dst.iter_mut().zip(x.iter()).zip(g.iter()) {
            *dv = *dv + f(xv, gv);
        }
    }
}

/// c_row += a0*b0 + a1*b1 + a2*b2 + a3*b3, one column at a time.
#[inline(always)]
fn axpy4<E: Element>(c_row: &mut [E], coeff: [E; 4], rows: [&[E]; 4]) {
    let n = c_row.len();
    let (b0, b1, b2, b3) = (&rows[0][..n], &rows[1][..n], &rows[2][..n], &rows[3][..n]);
    for j in 0..n {
        c_row[j] = c_row[j] + coeff[0] * b0[j] + coeff[1] * b1[j] + coeff[2] * b2[j] + coeff[3] * b3[j];
    }
}

/// Sequential core of out[m,n] = a[m,k] * b[k,n]; `out` must be zeroed.
fn mm_nn_core<E: Element>(a: &[E], b: &[E], k: usize, n: usize, out: &mut [E]) {
    for (i, c_row) in out.chunks_mut(n).enumerate() {
        let a_row = &a[i * k..(i + 1) * k];
        let mut p = 0;
        while p + 4 <= k {
            axpy4(
                c_row,
                [a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]],
                [
                    &b[p * n..(p + 1) * n],
                    &b[(p + 1) * n..(p + 2) * n],
                    &b[(p + 2) * n..(p + 3) * n],
                    &b[(p + 3) * n..(p + 4) * n],
                ],
            );
            p += 4;
        }
        while p < k {
            let a_ip = a_row[p];
            let b_row = &b[p * n..(p + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *c = *c + a_ip * bv;
            }
            p += 1;
        }
    }
}

/// out[m,n] = a[m,k] * b[k,n], one parallel region over row chunks.
fn mm_nn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    if m * k * n >= PAR_FLOP_THRESHOLD {
        let chunk = row_chunk(m, k * n);
        out.par_chunks_mut(chunk * n)
            .zip(a.par_chunks(chunk * k))
            .for_each(|(o, ab)| mm_nn_core(ab, b, k, n, o));
    } else {
        mm_nn_core(a, b, k, n, out);
    }
}

/// Batched out[b,m,n] = a[b,m,k] * w[b,k,n], one task per batch item.
fn bmm_nn<E: Element>(a: &[E], b: &[E], batch: usize, m: usize, k: usize, n: usize, out: &mut [E]) {
    if batch * m * k * n >= PAR_FLOP_THRESHOLD && batch > 1 {
        out.par_chunks_mut(m * n)
            .zip(a.par_chunks(m * k).zip(b.par_chunks(k * n)))
            .for_each(|(o, (ab, bb))| mm_nn_core(ab, bb, k, n, o));
    } else {
        for bi in 0..batch {
            mm_nn_core(
                &a[bi * m * k..(bi + 1) * m * k],
                &b[bi * k * n..(bi + 1) * k * n],
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
    }
}

/// Sequential core of out[m,k] += a[m,n] * b[k,n]^T.
fn mm_nt_acc_core<E: Element>(a: &[E], b: &[E], n: usize, k: usize, out: &mut [E]) {
    for (i, c_row) in out.chunks_mut(k).enumerate() {
        let a_row = &a[i * n..(i + 1) * n];
        for (p, c) in c_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = E::zero();
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                s = s + av * bv;
            }
            *c = *c + s;
        }
    }
}

/// out[m,k] += a[m,n] * b[k,n]^T, parallel over row chunks.
fn mm_nt_acc<E: Element>(a: &[E], b: &[E], m: usize, n: usize, k: usize, out: &mut [E]) {
    if m * k * n >= PAR_FLOP_THRESHOLD {
        let chunk = row_chunk(m, k * n);
        out.par_chunks_mut(chunk * k)
            .zip(a.par_chunks(chunk * n))
            .for_each(|(o, ab)| mm_nt_acc_core(ab, b, n, k, o));
    } else {
        mm_nt_acc_core(a, b, n, k, out);
    }
}

/// Sequential core of out[k,n] += a[m,k]^T * b[m,n].
fn mm_tn_acc_core<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, p0: usize, out: &mut [E]) {
    for (dp, c_row) in out.chunks_mut(n).enumerate() {
        let p = p0 + dp;
        let mut i = 0;
        while i + 4 <= m {
            axpy4(
                c_row,
                [a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]],
                [
                    &b[i * n..(i + 1) * n],
                    &b[(i + 1) * n..(i + 2) * n],
                    &b[(i + 2) * n..(i + 3) * n],
                    &b[(i + 3) * n..(i + 4) * n],
                ],
            );
            i += 4;
        }
        while i < m {
            let a_ip = a[i * k + p];
            let b_row = &b[i * n..(i + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *c = *c + a_ip * bv;
            }
            i += 1;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n], parallel over output row chunks.
fn mm_tn_acc<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    if m * k * n >= PAR_FLOP_THRESHOLD {
        let chunk = row_chunk(k, m * n);
        out.par_chunks_mut(chunk * n)
            .enumerate()
            .for_each(|(ci, o)| mm_tn_acc_core(a, b, m, k, n, ci * chunk, o));
    } else {
        mm_tn_acc_core(a, b, m, k, n, 0, out);
    }
}

fn gelu_scalar<E: Element>(x: E) -> E {
    let half = E::from_f64(0.5);
    let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (E::one() + (x * inv_sqrt2).erf())
}

fn gelu_grad_scalar<E: Element>(x: E) -> E {
    let half = E::from_f64(0.5);
    let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = E::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let cdf = half * (E::one() + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
    cdf + x * pdf
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor. Parameters use `requires_grad = true`, data
    /// tensors `false`.
    pub fn leaf(
        &mut self,
        data: Vec<E>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> TensorResult<TensorId> {
        check_axes("leaf", &shape)?;
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::SizeMismatch {
                op: "leaf",
                expected: numel,
                got: data.len(),
            });
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    /// Leaf with `requires_grad = false`.
    pub fn constant(&mut self, data: Vec<E>, shape: Vec<usize>) -> TensorResult<TensorId> {
        self.leaf(data, shape, false)
    }

    fn push(&mut self, data: Vec<E>, shape: Vec<usize>, requires_grad: bool, op: Op<E>) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
        });
        id
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tensor.requires_grad)
    }

    pub fn data(&self, id: TensorId) -> &[E] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[E]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<E> {
        &self.nodes[id.0].tensor
    }

    /// Zero the accumulated gradients of the given tensors.
    pub fn zero_grad(&mut self, ids: &[TensorId]) {
        for id in ids {
            if let Some(g) = self.nodes[id.0].tensor.grad.as_mut() {
                for v in g.iter_mut() {
                    *v = E::zero();
                }
            }
        }
    }

    // ---- forward operations ------------------------------------------------

    /// Matrix product. Accepts `[r,k] x [k,s]`, the weight-shared batched form
    /// `[b,r,k] x [k,s]`, and the fully batched form `[b,r,k] x [b,k,s]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            left: ashape.clone(),
            right: bshape.clone(),
        };
        let (out_shape, batch, m, k, n, b_batched) = match (ashape.len(), bshape.len()) {
            (2, 2) => {
                if ashape[1] != bshape[0] {
                    return Err(mismatch());
                }
                (vec![ashape[0], bshape[1]], 1, ashape[0], ashape[1], bshape[1], false)
            }
            (3, 2) => {
                if ashape[2] != bshape[0] {
                    return Err(mismatch());
                }
                (
                    vec![ashape[0], ashape[1], bshape[1]],
                    1,
                    ashape[0] * ashape[1],
                    ashape[2],
                    bshape[1],
                    false,
                )
            }
            (3, 3) => {
                if ashape[0] != bshape[0] || ashape[2] != bshape[1] {
                    return Err(mismatch());
                }
                (
                    vec![ashape[0], ashape[1], bshape[2]],
                    ashape[0],
                    ashape[1],
                    ashape[2],
                    bshape[2],
                    true,
                )
            }
            _ => return Err(mismatch()),
        };
        let numel: usize = out_shape.iter().product();
        let mut out = vec![E::zero(); numel];
        let (adata, bdata) = (self.data(a), self.data(b));
        if b_batched {
            bmm_nn(adata, bdata, batch, m, k, n, &mut out);
        } else {
            mm_nn(adata, bdata, m, k, n, &mut out);
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(out, out_shape, rg, Op::Matmul { a, b }))
    }

    /// Swap the last two axes (2-axis transpose; batch axis preserved).
    pub fn transpose(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let shape = self.shape(x).to_vec();
        let (batch, r, c) = match shape.len() {
            2 => (1, shape[0], shape[1]),
            3 => (shape[0], shape[1], shape[2]),
            _ => {
                return Err(TensorError::BadShape {
                    op: "transpose",
                    shape,
                    why: "needs 2 or 3 axes",
                })
            }
        };
        let data = self.data(x);
        let mut out = vec![E::zero(); data.len()];
        for b in 0..batch {
            let src = &data[b * r * c..(b + 1) * r * c];
            let dst = &mut out[b * r * c..(b + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut out_shape = shape.clone();
        let len = out_shape.len();
        out_shape.swap(len - 2, len - 1);
        let rg = self.needs_grad(&[x]);
        Ok(self.push(out, out_shape, rg, Op::Transpose { x }))
    }

    /// Size-preserving row-major shape reinterpretation.
    pub fn reshape(&mut self, x: TensorId, new_shape: Vec<usize>) -> TensorResult<TensorId> {
        check_axes("reshape", &new_shape)?;
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[x.0].tensor.numel() {
            return Err(TensorError::SizeMismatch {
                op: "reshape",
                expected: self.nodes[x.0].tensor.numel(),
                got: numel,
            });
        }
        let data = self.data(x).to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(data, new_shape, rg, Op::Reshape { x }))
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax_rows(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(TensorError::BadShape {
                op: "softmax_rows",
                shape,
                why: "needs at least 1 axis",
            });
        }
        let row_len = *shape.last().unwrap();
        let data = self.data(x);
        let mut out = vec![E::zero(); data.len()];
        let one_row = |src: &[E], dst: &mut [E]| {
            let mut max = src[0];
            for &v in src.iter() {
                if v > max {
                    max = v;
                }
            }
            let mut sum = E::zero();
            for (d, &v) in dst.iter_mut().zip(src.iter()) {
                let e = (v - max).exp();
                *d = e;
                sum = sum + e;
            }
            for d in dst.iter_mut() {
                *d = *d / sum;
            }
        };
        if data.len() >= PAR_ELEM_THRESHOLD {
            let rows = data.len() / row_len;
            let rows_per_task = rows.div_ceil(4).max(1);
            out.par_chunks_mut(rows_per_task * row_len)
                .zip(data.par_chunks(rows_per_task * row_len))
                .for_each(|(dblock, sblock)| {
                    for (src, dst) in sblock.chunks(row_len).zip(dblock.chunks_mut(row_len)) {
                        one_row(src, dst);
                    }
                });
        } else {
            for (src, dst) in data.chunks(row_len).zip(out.chunks_mut(row_len)) {
                one_row(src, dst);
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(out, shape, rg, Op::SoftmaxRows { x }))
    }

    /// Exact (erf-form) GeLU, elementwise.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let data = map_elems(self.data(x), gelu_scalar);
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(data, shape, rg, Op::Gelu { x })
    }

    /// Elementwise max(x, 0). Subgradient at 0 is 0.
    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data = map_elems(self.data(x), |v| if v > E::zero() { v } else { E::zero() });
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(data, shape, rg, Op::Relu { x })
    }

    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> TensorResult<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.binary_same_shape("add", a, b)?;
        let data = zip_map_elems(self.data(a), self.data(b), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(data, shape, rg, Op::Add { a, b }))
    }

    /// Elementwise difference; shapes must match exactly.
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.binary_same_shape("sub", a, b)?;
        let data = zip_map_elems(self.data(a), self.data(b), |x, y| x - y);
        let shape = self.shape(a).to_vec();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(data, shape, rg, Op::Sub { a, b }))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.binary_same_shape("mul", a, b)?;
        let data = zip_map_elems(self.data(a), self.data(b), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(data, shape, rg, Op::Mul { a, b }))
    }

    /// Multiply every element by a scalar.
    pub fn scale(&mut self, x: TensorId, c: E) -> TensorId {
        let data = map_elems(self.data(x), |v| v * c);
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(data, shape, rg, Op::Scale { x, c })
    }

    /// Add a 1-D bias along the trailing axis.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> TensorResult<TensorId> {
        let xshape = self.shape(x).to_vec();
        let bshape = self.shape(bias).to_vec();
        let row_len = *xshape.last().unwrap();
        if bshape.len() != 1 || bshape[0] != row_len {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: xshape,
                right: bshape,
            });
        }
        let bdata = self.data(bias).to_vec();
        let data: Vec<E> = self
            .data(x)
            .chunks(row_len)
            .flat_map(|row| row.iter().zip(bdata.iter()).map(|(&v, &b)| v + b))
            .collect();
        let rg = self.needs_grad(&[x, bias]);
        Ok(self.push(data, xshape, rg, Op::AddBias { x, bias }))
    }

    /// Permutation gather: `out[i] = x[map[i]]`. The map must index within
    /// `x`; when it is a bijection the backward scatter is its exact inverse.
    pub fn gather(
        &mut self,
        x: TensorId,
        out_shape: Vec<usize>,
        map: Arc<Vec<usize>>,
    ) -> TensorResult<TensorId> {
        check_axes("gather", &out_shape)?;
        let numel: usize = out_shape.iter().product();
        if map.len() != numel {
            return Err(TensorError::SizeMismatch {
                op: "gather",
                expected: numel,
                got: map.len(),
            });
        }
        let src = self.data(x);
        if let Some(&bad) = map.iter().find(|&&i| i >= src.len()) {
            return Err(TensorError::SizeMismatch {
                op: "gather",
                expected: src.len(),
                got: bad,
            });
        }
        let data: Vec<E> = map.iter().map(|&i| src[i]).collect();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(data, out_shape, rg, Op::Gather { x, map }))
    }

    /// Per-row affine with constant coefficients: for a `[.., r, s]` tensor,
    /// `out[row, j] = x[row, j] * scale[row] + shift[row]`. Used to invert
    /// instance normalization; `scale`/`shift` are data, not parameters.
    pub fn scale_shift_rows(
        &mut self,
        x: TensorId,
        scale: Arc<Vec<E>>,
        shift: &[E],
    ) -> TensorResult<TensorId> {
        let shape = self.shape(x).to_vec();
        let row_len = *shape.last().unwrap();
        let rows = self.nodes[x.0].tensor.numel() / row_len;
        if scale.len() != rows || shift.len() != rows {
            return Err(TensorError::SizeMismatch {
                op: "scale_shift_rows",
                expected: rows,
                got: scale.len().min(shift.len()),
            });
        }
        let mut data = Vec::with_capacity(rows * row_len);
        for (row, src) in self.data(x).chunks(row_len).enumerate() {
            let (s, t) = (scale[row], shift[row]);
            data.extend(src.iter().map(|&v| v * s + t));
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(data, shape, rg, Op::ScaleShiftRows { x, scale }))
    }

    /// Sum of all elements, as a 1-element tensor.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let mut s = E::zero();
        for &v in self.data(x) {
            s = s + v;
        }
        let rg = self.needs_grad(&[x]);
        self.push(vec![s], vec![1], rg, Op::SumAll { x })
    }

    /// Mean of all elements, as a 1-element tensor.
    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].tensor.numel();
        let mut s = E::zero();
        for &v in self.data(x) {
            s = s + v;
        }
        let mean = s / E::from_f64(n as f64);
        let rg = self.needs_grad(&[x]);
        self.push(vec![mean], vec![1], rg, Op::MeanAll { x })
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients of `requires_grad` tensors
    /// accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: TensorId) -> TensorResult<()> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let n = self.nodes.len();
        // local per-call buffers so repeated backward calls accumulate cleanly
        let mut local: Vec<Vec<E>> = vec![Vec::new(); n];
        local[loss.0] = vec![E::one()];

        for i in (0..n).rev() {
            if local[i].is_empty() || !self.nodes[i].tensor.requires_grad {
                continue;
            }
            let g = std::mem::take(&mut local[i]);
            self.propagate(i, &g, &mut local);
            let node = &mut self.nodes[i];
            let grad = node
                .tensor
                .grad
                .get_or_insert_with(|| vec![E::zero(); node.tensor.data.len()]);
            for (acc, &v) in grad.iter_mut().zip(g.iter()) {
                *acc = *acc + v;
            }
        }
        Ok(())
    }

    fn accumulate(&self, local: &mut [Vec<E>], id: TensorId, delta: impl FnOnce(&mut [E])) {
        if !self.nodes[id.0].tensor.requires_grad {
            return;
        }
        if local[id.0].is_empty() {
            local[id.0] = vec![E::zero(); self.nodes[id.0].tensor.data.len()];
        }
        delta(&mut local[id.0]);
    }

    fn propagate(&self, i: usize, g: &[E], local: &mut [Vec<E>]) {
        match self.nodes[i].op.clone() {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let ashape = self.shape(a);
                let bshape = self.shape(b);
                match (ashape.len(), bshape.len()) {
                    (2, 2) | (3, 2) => {
                        let k = *ashape.last().unwrap();
                        let m = self.nodes[a.0].tensor.numel() / k;
                        let n = bshape[1];
                        let (adata, bdata) = (self.data(a), self.data(b));
                        self.accumulate(local, a, |dst| {
                            mm_nt_acc(g, bdata, m, n, k, dst);
                        });
                        self.accumulate(local, b, |dst| {
                            mm_tn_acc(adata, g, m, k, n, dst);
                        });
                    }
                    (3, 3) => {
                        let (batch, m, k) = (ashape[0], ashape[1], ashape[2]);
                        let n = bshape[2];
                        let (adata, bdata) = (self.data(a), self.data(b));
                        self.accumulate(local, a, |dst| {
                            if batch * m * k * n >= PAR_FLOP_THRESHOLD && batch > 1 {
                                dst.par_chunks_mut(m * k)
                                    .zip(g.par_chunks(m * n).zip(bdata.par_chunks(k * n)))
                                    .for_each(|(d, (gb, bb))| mm_nt_acc_core(gb, bb, n, k, d));
                            } else {
                                for bi in 0..batch {
                                    mm_nt_acc_core(
                                        &g[bi * m * n..(bi + 1) * m * n],
                                        &bdata[bi * k * n..(bi + 1) * k * n],
                                        n,
                                        k,
                                        &mut dst[bi * m * k..(bi + 1) * m * k],
                                    );
                                }
                            }
                        });
                        self.accumulate(local, b, |dst| {
                            if batch * m * k * n >= PAR_FLOP_THRESHOLD && batch > 1 {
                                dst.par_chunks_mut(k * n)
                                    .zip(adata.par_chunks(m * k).zip(g.par_chunks(m * n)))
                                    .for_each(|(d, (ab, gb))| mm_tn_acc_core(ab, gb, m, k, n, 0, d));
                            } else {
                                for bi in 0..batch {
                                    mm_tn_acc_core(
                                        &adata[bi * m * k..(bi + 1) * m * k],
                                        &g[bi * m * n..(bi + 1) * m * n],
                                        m,
                                        k,
                                        n,
                                        0,
                                        &mut dst[bi * k * n..(bi + 1) * k * n],
                                    );
                                }
                            }
                        });
                    }
                    _ => unreachable!("matmul forward validated the shapes"),
                }
            }
            Op::Transpose { x } => {
                let out_shape = self.shape(TensorId(i)).to_vec();
                let (batch, r, c) = match out_shape.len() {
                    2 => (1, out_shape[0], out_shape[1]),
                    _ => (out_shape[0], out_shape[1], out_shape[2]),
                };
                self.accumulate(local, x, |dst| {
                    for b in 0..batch {
                        let src = &g[b * r * c..(b + 1) * r * c];
                        let d = &mut dst[b * r * c..(b + 1) * r * c];
                        for ri in 0..r {
                            for ci in 0..c {
                                d[ci * r + ri] = d[ci * r + ri] + src[ri * c + ci];
                            }
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                self.accumulate(local, x, |dst| acc1(dst, g, |v| v));
            }
            Op::SoftmaxRows { x } => {
                let out = self.data(TensorId(i));
                let row_len = *self.shape(TensorId(i)).last().unwrap();
                let one_row = |srow: &[E], grow: &[E], drow: &mut [E]| {
                    let mut dot = E::zero();
                    for (&s, &gv) in srow.iter().zip(grow.iter()) {
                        dot = dot + s * gv;
                    }
                    for ((d, &s), &gv) in drow.iter_mut().zip(srow.iter()).zip(grow.iter()) {
                        *d = *d + s * (gv - dot);
                    }
                };
                self.accumulate(local, x, |dst| {
                    if dst.len() >= PAR_ELEM_THRESHOLD {
                        let rows = dst.len() / row_len;
                        let block = rows.div_ceil(4).max(1) * row_len;
                        dst.par_chunks_mut(block)
                            .zip(out.par_chunks(block).zip(g.par_chunks(block)))
                            .for_each(|(dblock, (sblock, gblock))| {
                                for ((srow, grow), drow) in sblock
                                    .chunks(row_len)
                                    .zip(gblock.chunks(row_len))
                                    .zip(dblock.chunks_mut(row_len))
                                {
                                    one_row(srow, grow, drow);
                                }
                            });
                    } else {
                        for ((srow, grow), drow) in out
                            .chunks(row_len)
                            .zip(g.chunks(row_len))
                            .zip(dst.chunks_mut(row_len))
                        {
                            one_row(srow, grow, drow);
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let xdata = self.data(x);
                self.accumulate(local, x, |dst| {
                    acc2(dst, xdata, g, |xv, gv| gv * gelu_grad_scalar(xv));
                });
            }
            Op::Relu { x } => {
                let xdata = self.data(x);
                self.accumulate(local, x, |dst| {
                    acc2(dst, xdata, g, |xv, gv| {
                        if xv > E::zero() {
                            gv
                        } else {
                            E::zero()
                        }
                    });
                });
            }
            Op::Add { a, b } => {
                self.accumulate(local, a, |dst| acc1(dst, g, |v| v));
                self.accumulate(local, b, |dst| acc1(dst, g, |v| v));
            }
            Op::Sub { a, b } => {
                self.accumulate(local, a, |dst| acc1(dst, g, |v| v));
                self.accumulate(local, b, |dst| acc1(dst, g, |v| E::zero() - v));
            }
            Op::Mul { a, b } => {
                let (adata, bdata) = (self.data(a).to_vec(), self.data(b).to_vec());
                self.accumulate(local, a, |dst| acc2(dst, &bdata, g, |bv, gv| gv * bv));
                self.accumulate(local, b, |dst| acc2(dst, &adata, g, |av, gv| gv * av));
            }
            Op::Scale { x, c } => {
                self.accumulate(local, x, |dst| acc1(dst, g, |v| v * c));
            }
            Op::AddBias { x, bias } => {
                let row_len = *self.shape(TensorId(i)).last().unwrap();
                self.accumulate(local, x, |dst| acc1(dst, g, |v| v));
                self.accumulate(local, bias, |dst| {
                    for grow in g.chunks(row_len) {
                        for (d, &v) in dst.iter_mut().zip(grow.iter()) {
                            *d = *d + v;
                        }
                    }
                });
            }
            Op::Gather { x, map } => {
                self.accumulate(local, x, |dst| {
                    for (&src_idx, &gv) in map.iter().zip(g.iter()) {
                        dst[src_idx] = dst[src_idx] + gv;
                    }
                });
            }
            Op::ScaleShiftRows { x, scale } => {
                let row_len = *self.shape(TensorId(i)).last().unwrap();
                self.accumulate(local, x, |dst| {
                    for (row, (drow, grow)) in
                        dst.chunks_mut(row_len).zip(g.chunks(row_len)).enumerate()
                    {
                        let s = scale[row];
                        for (d, &v) in drow.iter_mut().zip(grow.iter()) {
                            *d = *d + v * s;
                        }
                    }
                });
            }
            Op::SumAll { x } => {
                let gv = g[0];
                self.accumulate(local, x, |dst| {
                    for d in dst.iter_mut() {
                        *d = *d + gv;
                    }
                });
            }
            Op::MeanAll { x } => {
                let n = self.nodes[x.0].tensor.numel();
                let gv = g[0] / E::from_f64(n as f64);
                self.accumulate(local, x, |dst| {
                    for d in dst.iter_mut() {
                        *d = *d + gv;
                    }
                });
            }
        }
    }
}

fn check_axes(op: &'static str, shape: &[usize]) -> TensorResult<()> {
    if shape.is_empty() || shape.len() > 3 {
        return Err(TensorError::BadShape {
            op,
            shape: shape.to_vec(),
            why: "tensors have 1 to 3 axes",
        });
    }
    if shape.contains(&0) {
        return Err(TensorError::BadShape {
            op,
            shape: shape.to_vec(),
            why: "axes must be non-empty",
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn matmul_identity() {
        let mut t = tape();
        let i = t.leaf(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2], false).unwrap();
        let x = t.leaf(vec![3.0, -1.5, 2.0, 7.0], vec![2, 2], false).unwrap();
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.data(y), &[3.0, -1.5, 2.0, 7.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut t = tape();
        let a = t.leaf(vec![1.0, 2.0], vec![1, 2], false).unwrap();
        let b = t.leaf(vec![3.0, 4.0], vec![2, 1], false).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // independent scalar oracle over random 3x3 inputs
        let mut rng = 0x2545f4914f6cdd1du64;
        let mut next = move || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let a: Vec<f64> = (0..9).map(|_| next()).collect();
        let b: Vec<f64> = (0..9).map(|_| next()).collect();
        let mut expect = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                for p in 0..3 {
                    expect[i * 3 + j] += a[i * 3 + p] * b[p * 3 + j];
                }
            }
        }
        let mut t = tape();
        let ai = t.leaf(a, vec![3, 3], false).unwrap();
        let bi = t.leaf(b, vec![3, 3], false).unwrap();
        let c = t.matmul(ai, bi).unwrap();
        for (got, want) in t.data(c).iter().zip(expect.iter()) {
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = tape();
        let a = t.leaf(vec![0.0; 6], vec![2, 3], false).unwrap();
        let b = t.leaf(vec![0.0; 4], vec![2, 2], false).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_large_rows() {
        let mut t = tape();
        let x = t.leaf(vec![0.0, 0.0, 0.0], vec![1, 3], false).unwrap();
        let s = t.softmax_rows(x).unwrap();
        for &v in t.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = t.leaf(vec![1000.0, 1000.0], vec![1, 2], false).unwrap();
        let s2 = t.softmax_rows(big).unwrap();
        for &v in t.data(s2) {
            assert!(v.is_finite());
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_matches_exp_normalize_oracle() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 2.0, 3.0], vec![1, 3], false).unwrap();
        let s = t.softmax_rows(x).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (got, v) in t.data(s).iter().zip([1.0f64, 2.0, 3.0]) {
            assert!((got - v.exp() / z).abs() < 1e-12);
        }
        let sum: f64 = t.data(s).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_fixed_points() {
        let mut t = tape();
        let x = t
            .leaf(vec![0.0, 30.0, -30.0, 1.0], vec![4], false)
            .unwrap();
        let y = t.gelu(x);
        let out = t.data(y);
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 30.0).abs() < 1e-12);
        assert!(out[2].abs() < 1e-12);
        // erf oracle via Taylor series: erf(z) = 2/sqrt(pi) * sum (-1)^n z^(2n+1) / (n! (2n+1))
        let z = 1.0f64 / std::f64::consts::SQRT_2;
        let mut term = z;
        let mut series = z;
        for n in 1..30 {
            term *= -z * z / n as f64;
            series += term / (2.0 * n as f64 + 1.0);
        }
        let erf1 = 2.0 / std::f64::consts::PI.sqrt() * series;
        let expect = 0.5 * (1.0 + erf1);
        assert!((out[3] - expect).abs() < 1e-10, "{} vs {}", out[3], expect);
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut t = tape();
        let x = t.leaf(vec![-1.0, 0.0, 2.0], vec![3], true).unwrap();
        let y = t.relu(x);
        assert_eq!(t.data(y), &[0.0, 0.0, 2.0]);
        let loss = t.sum_all(y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn reshape_preserves_flat_order_and_transpose_involution() {
        let mut t = tape();
        let data: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let x = t.leaf(data.clone(), vec![2, 6], false).unwrap();
        let r = t.reshape(x, vec![3, 4]).unwrap();
        assert_eq!(t.data(r), data.as_slice());
        let tr = t.transpose(r).unwrap();
        let back = t.transpose(tr).unwrap();
        assert_eq!(t.data(back), data.as_slice());
    }

    #[test]
    fn backward_sum_gives_ones_and_quadratic_gives_2x() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, -2.0, 0.5], vec![3], true).unwrap();
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = tape();
        let x = t.leaf(vec![1.0, -2.0, 0.5], vec![3], true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum_all(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
        t.zero_grad(&[x]);
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        assert!(matches!(
            t.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn gather_roundtrip_is_exact() {
        let mut t = tape();
        let x = t.leaf(vec![10.0, 20.0, 30.0, 40.0], vec![4], true).unwrap();
        let map = Arc::new(vec![2usize, 0, 3, 1]);
        let y = t.gather(x, vec![4], map.clone()).unwrap();
        assert_eq!(t.data(y), &[30.0, 10.0, 40.0, 20.0]);
        let mut inv = vec![0usize; 4];
        for (i, &m) in map.iter().enumerate() {
            inv[m] = i;
        }
        let back = t.gather(y, vec![4], Arc::new(inv)).unwrap();
        assert_eq!(t.data(back), t.data(x));
    }
}
