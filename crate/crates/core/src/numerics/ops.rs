//! Differentiable primitives.
//!
//! Every primitive is a pure function of its input tensors. [`Op`] wraps the
//! same kernels so the tape can replay them and apply their vector-Jacobian
//! products in reverse order.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{dim_err, LaxError, Result};

/// Large negative fill for masked attention scores. Finite so every tensor
/// stays finite; `exp` of it underflows to exactly zero after the max shift.
pub const MASK_FILL: f64 = -1e30;

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// tanh approximation of GELU.
    #[default]
    Gelu,
    Relu,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `exp`, several times cheaper than libm's. Absolute
/// error stays below 1e-15; GELU only ever adds it to 1.
fn fast_tanh(u: f64) -> f64 {
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                0.5 * x * (1.0 + fast_tanh(u))
            }
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let th = fast_tanh(u);
                let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn tag(self) -> u64 {
        match self {
            Activation::Gelu => 0,
            Activation::Relu => 1,
            Activation::Identity => 2,
        }
    }

    pub(crate) fn from_tag(tag: u64) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Gelu),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Identity),
            other => Err(LaxError::Format(format!("unknown activation tag {other}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Kernels

/// `out = a · b` for a zeroed `out`. Every entry accumulates `p = 0..k` in
/// ascending order whichever path computes it, so results do not depend
/// on the tiling.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    const T: usize = 4;
    let (m4, n4) = (m / T * T, n / T * T);
    for i in (0..m4).step_by(T) {
        for j in (0..n4).step_by(T) {
            let mut acc = [[0.0f64; T]; T];
            for p in 0..k {
                let bp: &[f64; T] = b[p * n + j..p * n + j + T].try_into().expect("tile");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for c in 0..T {
                        row[c] += av * bp[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + T].copy_from_slice(row);
            }
        }
        if n4 < n {
            matmul_rows(a, b, out, i, i + T, k, n, n4);
        }
    }
    matmul_rows(a, b, out, m4, m, k, n, 0);
}

/// Plain i-p-j product restricted to rows `lo..hi` and columns `j0..n`.
#[allow(clippy::too_many_arguments)]
fn matmul_rows(a: &[f64], b: &[f64], out: &mut [f64], lo: usize, hi: usize, k: usize, n: usize, j0: usize) {
    for i in lo..hi {
        let out_row = &mut out[i * n + j0..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * n + j0..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return dim_err(format!(
            "matmul needs [m,k] x [k,n], got {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn batch_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 3 || b.ndim() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1] {
        return dim_err(format!(
            "batch_matmul needs [g,m,k] x [g,k,n], got {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (g, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
    let mut out = vec![0.0; g * m * n];
    for gi in 0..g {
        matmul_into(
            &a.data()[gi * m * k..(gi + 1) * m * k],
            &b.data()[gi * k * n..(gi + 1) * k * n],
            &mut out[gi * m * n..(gi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Ok(Tensor::from_parts(vec![g, m, n], out))
}

fn check_perm(perm: &[usize], ndim: usize) -> Result<()> {
    let mut seen = vec![false; ndim];
    if perm.len() != ndim {
        return dim_err(format!("permutation {perm:?} does not match rank {ndim}"));
    }
    for &p in perm {
        if p >= ndim || seen[p] {
            return dim_err(format!("invalid permutation {perm:?}"));
        }
        seen[p] = true;
    }
    Ok(())
}

pub fn permute(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    check_perm(perm, t.ndim())?;
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        return Ok(t.clone());
    }
    let shape = t.shape();
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(t.len());
    let mut idx = vec![0usize; nd];
    let last = nd - 1;
    let (last_len, last_stride) = (out_shape[last], strides[last]);
    let mut base = 0usize;
    loop {
        for j in 0..last_len {
            out.push(src[base + j * last_stride]);
        }
        // odometer over all but the last output axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return Ok(Tensor::from_parts(out_shape, out));
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn move_axis_perm(ndim: usize, axis: usize, to_end: bool) -> Vec<usize> {
    let rest = (0..ndim).filter(|&i| i != axis);
    if to_end {
        rest.chain(std::iter::once(axis)).collect()
    } else {
        std::iter::once(axis).chain(rest).collect()
    }
}

/// Sums over `a[axis_a]` paired with `b[axis_b]`. The output keeps the free
/// axes of `a` followed by the free axes of `b`, each in original order.
///
/// For two matrices with axes `(1, 0)` this runs the [`matmul`] kernel on the
/// untouched operands, so the two agree bit for bit.
pub fn contract(a: &Tensor, b: &Tensor, axis_a: usize, axis_b: usize) -> Result<Tensor> {
    if axis_a >= a.ndim() || axis_b >= b.ndim() {
        return dim_err(format!(
            "contraction axes ({axis_a},{axis_b}) out of range for {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let k = a.shape()[axis_a];
    if k != b.shape()[axis_b] {
        return dim_err(format!(
            "contracted axis sizes differ: {:?}[{axis_a}] = {k} vs {:?}[{axis_b}] = {}",
            a.shape(),
            b.shape(),
            b.shape()[axis_b]
        ));
    }
    let am = permute(a, &move_axis_perm(a.ndim(), axis_a, true))?;
    let bm = permute(b, &move_axis_perm(b.ndim(), axis_b, false))?;
    let m = a.len() / k;
    let n = b.len() / k;
    let mut out = vec![0.0; m * n];
    matmul_into(am.data(), bm.data(), &mut out, m, k, n);
    let mut shape: Vec<usize> = a
        .shape()
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis_a)
        .map(|(_, &d)| d)
        .collect();
    shape.extend(
        b.shape()
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis_b)
            .map(|(_, &d)| d),
    );
    if shape.is_empty() {
        shape.push(1);
    }
    Ok(Tensor::from_parts(shape, out))
}

fn contract_vjp(
    a: &Tensor,
    b: &Tensor,
    axis_a: usize,
    axis_b: usize,
    g: &Tensor,
    need: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let k = a.shape()[axis_a];
    let m = a.len() / k;
    let n = b.len() / k;
    let pa = move_axis_perm(a.ndim(), axis_a, true);
    let pb = move_axis_perm(b.ndim(), axis_b, false);
    let am = permute(a, &pa)?.reshape(&[m, k])?;
    let bm = permute(b, &pb)?.reshape(&[k, n])?;
    let gm = g.reshape(&[m, n])?;
    let ga = if need[0] {
        let gam = matmul(&gm, &bm.t()?)?;
        let permuted_shape: Vec<usize> = pa.iter().map(|&p| a.shape()[p]).collect();
        Some(permute(&gam.reshape(&permuted_shape)?, &inverse_perm(&pa))?)
    } else {
        None
    };
    let gb = if need[1] {
        let gbm = matmul(&am.t()?, &gm)?;
        let permuted_shape: Vec<usize> = pb.iter().map(|&p| b.shape()[p]).collect();
        Some(permute(&gbm.reshape(&permuted_shape)?, &inverse_perm(&pb))?)
    } else {
        None
    };
    Ok(vec![ga, gb])
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x * y)
}

pub fn scale(a: &Tensor, factor: f64) -> Tensor {
    a.map(|x| x * factor)
}

/// `x[..., d] + bias[d]`.
pub fn add_row(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = x.last_dim();
    if bias.len() != d {
        return dim_err(format!(
            "row bias of length {} does not match last axis of {:?}",
            bias.len(),
            x.shape()
        ));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn activation(x: &Tensor, act: Activation) -> Tensor {
    x.map(|v| act.apply(v))
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if d == 0 {
        return dim_err("layer_norm over an empty axis");
    }
    if gain.len() != d || bias.len() != d {
        return dim_err(format!(
            "layer_norm gain/bias lengths {}/{} do not match last axis {d}",
            gain.len(),
            bias.len()
        ));
    }
    if eps <= 0.0 {
        return Err(LaxError::Numeric(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        let (mean, inv) = row_stats(row, eps);
        for ((&v, &g), &b) in row.iter().zip(gain.data()).zip(bias.data()) {
            out.push((v - mean) * inv * g + b);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn layer_norm_vjp(x: &Tensor, gain: &Tensor, eps: f64, g: &Tensor, need: &[bool]) -> Vec<Option<Tensor>> {
    let d = x.last_dim();
    let mut gx = vec![0.0; x.len()];
    let mut ggain = vec![0.0; d];
    let mut gbias = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut gxhat = vec![0.0; d];
    for (r, (row, grow)) in x.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
        let (mean, inv) = row_stats(row, eps);
        for j in 0..d {
            xhat[j] = (row[j] - mean) * inv;
            gxhat[j] = grow[j] * gain.data()[j];
            ggain[j] += grow[j] * xhat[j];
            gbias[j] += grow[j];
        }
        if need[0] {
            let mean_g = gxhat.iter().sum::<f64>() / d as f64;
            let mean_gx = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for j in 0..d {
                gx[r * d + j] = inv * (gxhat[j] - mean_g - xhat[j] * mean_gx);
            }
        }
    }
    vec![
        need[0].then(|| Tensor::from_parts(x.shape().to_vec(), gx)),
        need[1].then(|| Tensor::from_parts(gain.shape().to_vec(), ggain)),
        need[2].then(|| Tensor::from_parts(gain.shape().to_vec(), gbias)),
    ]
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let d = x.last_dim();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o /= total;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Replaces entries above the diagonal of the trailing `[t, t]` block with
/// [`MASK_FILL`].
pub fn causal_mask(x: &Tensor) -> Result<Tensor> {
    let nd = x.ndim();
    if nd < 2 || x.shape()[nd - 1] != x.shape()[nd - 2] {
        return dim_err(format!("causal mask needs trailing square axes, got {:?}", x.shape()));
    }
    let t = x.last_dim();
    let mut out = x.data().to_vec();
    for block in out.chunks_mut(t * t) {
        for i in 0..t {
            for j in i + 1..t {
                block[i * t + j] = MASK_FILL;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.ndim() || len == 0 || start + len > x.shape()[axis] {
        return dim_err(format!(
            "narrow(axis {axis}, {start}..{}) out of range for {:?}",
            start + len,
            x.shape()
        ));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let size = x.shape()[axis];
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * size + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

pub fn concat(a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
    let compatible = a.ndim() == b.ndim()
        && axis < a.ndim()
        && a.shape()
            .iter()
            .zip(b.shape())
            .enumerate()
            .all(|(i, (x, y))| i == axis || x == y);
    if !compatible {
        return dim_err(format!(
            "cannot concat {:?} and {:?} along axis {axis}",
            a.shape(),
            b.shape()
        ));
    }
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let (sa, sb) = (a.shape()[axis] * inner, b.shape()[axis] * inner);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for o in 0..outer {
        out.extend_from_slice(&a.data()[o * sa..(o + 1) * sa]);
        out.extend_from_slice(&b.data()[o * sb..(o + 1) * sb]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] += b.shape()[axis];
    Ok(Tensor::from_parts(shape, out))
}

fn scatter_narrow(g: &Tensor, in_shape: &[usize], axis: usize, start: usize) -> Tensor {
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let size = in_shape[axis];
    let len = g.shape()[axis];
    let mut out = vec![0.0; in_shape.iter().product()];
    for o in 0..outer {
        let dst = (o * size + start) * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}

/// Mean token cross-entropy of `logits[n, v]` against class ids.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let v = logits.last_dim();
    let n = logits.rows();
    if logits.ndim() != 2 || targets.len() != n {
        return dim_err(format!(
            "cross_entropy needs [n, v] logits with n targets, got {:?} and {}",
            logits.shape(),
            targets.len()
        ));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= v) {
        return dim_err(format!("target class {t} out of range for {v} classes"));
    }
    let mut total = 0.0;
    for (row, &t) in logits.data().chunks(v).zip(targets) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[t];
    }
    Ok(Tensor::scalar(total / n as f64))
}

pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    if table.ndim() != 2 {
        return dim_err(format!("embedding table must be [v, d], got {:?}", table.shape()));
    }
    let (v, d) = (table.shape()[0], table.shape()[1]);
    if ids.is_empty() {
        return dim_err("embedding lookup with no ids");
    }
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return dim_err(format!("token id {id} out of range for vocabulary {v}"));
        }
        out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    Ok(Tensor::from_parts(vec![ids.len(), d], out))
}

// ---------------------------------------------------------------------------
// Recorded operations

/// A recorded primitive. Non-differentiable arguments (shapes, axes, class
/// ids) live in the variant; differentiable operands are passed as inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    MatMul,
    BatchMatMul,
    Contract {
        axis_a: usize,
        axis_b: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Permute {
        perm: Vec<usize>,
    },
    Narrow {
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        axis: usize,
    },
    Add,
    AddRow,
    Mul,
    Scale {
        factor: f64,
    },
    /// `s[1] * x`
    ScalarMul,
    Activation(Activation),
    LayerNorm {
        eps: f64,
    },
    Softmax,
    CausalMask,
    Sum,
    CrossEntropy {
        targets: Vec<usize>,
    },
    Embedding {
        ids: Vec<usize>,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::BatchMatMul => "batch_matmul",
            Op::Contract { .. } => "contract",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Add => "add",
            Op::AddRow => "add_row",
            Op::Mul => "mul",
            Op::Scale { .. } => "scale",
            Op::ScalarMul => "scalar_mul",
            Op::Activation(Activation::Gelu) => "gelu",
            Op::Activation(Activation::Relu) => "relu",
            Op::Activation(Activation::Identity) => "identity",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax => "softmax",
            Op::CausalMask => "causal_mask",
            Op::Sum => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Embedding { .. } => "embedding",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Op::MatMul
            | Op::BatchMatMul
            | Op::Contract { .. }
            | Op::Concat { .. }
            | Op::Add
            | Op::AddRow
            | Op::Mul
            | Op::ScalarMul => 2,
            Op::LayerNorm { .. } => 3,
            _ => 1,
        }
    }

    fn check_arity(&self, n: usize) -> Result<()> {
        if n == self.arity() {
            Ok(())
        } else {
            dim_err(format!("{} takes {} inputs, got {n}", self.name(), self.arity()))
        }
    }

    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        self.check_arity(inputs.len())?;
        let x = inputs[0];
        match self {
            Op::MatMul => matmul(x, inputs[1]),
            Op::BatchMatMul => batch_matmul(x, inputs[1]),
            Op::Contract { axis_a, axis_b } => contract(x, inputs[1], *axis_a, *axis_b),
            Op::Reshape { shape } => x.reshape(shape),
            Op::Permute { perm } => permute(x, perm),
            Op::Narrow { axis, start, len } => narrow(x, *axis, *start, *len),
            Op::Concat { axis } => concat(x, inputs[1], *axis),
            Op::Add => add(x, inputs[1]),
            Op::AddRow => add_row(x, inputs[1]),
            Op::Mul => mul(x, inputs[1]),
            Op::Scale { factor } => Ok(scale(x, *factor)),
            Op::ScalarMul => {
                if x.len() != 1 {
                    return dim_err(format!("scalar_mul needs a [1] scale, got {:?}", x.shape()));
                }
                Ok(scale(inputs[1], x.item()))
            }
            Op::Activation(act) => Ok(activation(x, *act)),
            Op::LayerNorm { eps } => layer_norm(x, inputs[1], inputs[2], *eps),
            Op::Softmax => Ok(softmax(x)),
            Op::CausalMask => causal_mask(x),
            Op::Sum => Ok(Tensor::scalar(x.sum())),
            Op::CrossEntropy { targets } => cross_entropy(x, targets),
            Op::Embedding { ids } => embedding(x, ids),
        }
    }

    /// Cotangents for every input.
    pub fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let output = self.forward(inputs)?;
        let need = vec![true; inputs.len()];
        Ok(self
            .vjp_masked(inputs, &output, upstream, &need)?
            .into_iter()
            .map(|g| g.expect("all cotangents requested"))
            .collect())
    }

    /// Cotangents for the inputs flagged in `need`; `output` is this op's
    /// forward result on `inputs`.
    pub fn vjp_masked(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        g: &Tensor,
        need: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        self.check_arity(inputs.len())?;
        if g.shape() != output.shape() {
            return dim_err(format!(
                "{} upstream cotangent {:?} does not match output {:?}",
                self.name(),
                g.shape(),
                output.shape()
            ));
        }
        let x = inputs[0];
        let out = match self {
            Op::MatMul => {
                let b = inputs[1];
                vec![
                    if need[0] { Some(matmul(g, &b.t()?)?) } else { None },
                    if need[1] { Some(matmul(&x.t()?, g)?) } else { None },
                ]
            }
            Op::BatchMatMul => {
                let b = inputs[1];
                let bt = permute(b, &[0, 2, 1])?;
                let at = permute(x, &[0, 2, 1])?;
                vec![
                    if need[0] { Some(batch_matmul(g, &bt)?) } else { None },
                    if need[1] { Some(batch_matmul(&at, g)?) } else { None },
                ]
            }
            Op::Contract { axis_a, axis_b } => contract_vjp(x, inputs[1], *axis_a, *axis_b, g, need)?,
            Op::Reshape { .. } => vec![Some(g.reshape(x.shape())?)],
            Op::Permute { perm } => vec![Some(permute(g, &inverse_perm(perm))?)],
            Op::Narrow { axis, start, .. } => {
                vec![Some(scatter_narrow(g, x.shape(), *axis, *start))]
            }
            Op::Concat { axis } => {
                let la = x.shape()[*axis];
                let lb = inputs[1].shape()[*axis];
                vec![
                    if need[0] { Some(narrow(g, *axis, 0, la)?) } else { None },
                    if need[1] { Some(narrow(g, *axis, la, lb)?) } else { None },
                ]
            }
            Op::Add => vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())],
            Op::AddRow => {
                let d = x.last_dim();
                let gb = need[1].then(|| {
                    let mut acc = vec![0.0; d];
                    for row in g.data().chunks(d) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::from_parts(inputs[1].shape().to_vec(), acc)
                });
                vec![need[0].then(|| g.clone()), gb]
            }
            Op::Mul => {
                let b = inputs[1];
                vec![
                    if need[0] { Some(mul(g, b)?) } else { None },
                    if need[1] { Some(mul(g, x)?) } else { None },
                ]
            }
            Op::Scale { factor } => vec![Some(scale(g, *factor))],
            Op::ScalarMul => {
                let y = inputs[1];
                let gs = need[0].then(|| {
                    Tensor::from_parts(
                        x.shape().to_vec(),
                        vec![g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum()],
                    )
                });
                vec![gs, need[1].then(|| scale(g, x.item()))]
            }
            Op::Activation(act) => {
                let act = *act;
                vec![Some(x.zip_map(g, |v, gv| gv * act.derivative(v))?)]
            }
            Op::LayerNorm { eps } => layer_norm_vjp(x, inputs[1], *eps, g, need),
            Op::Softmax => {
                let d = output.last_dim();
                let mut gx = Vec::with_capacity(output.len());
                for (yrow, grow) in output.data().chunks(d).zip(g.data().chunks(d)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    gx.extend(yrow.iter().zip(grow).map(|(y, gv)| y * (gv - dot)));
                }
                vec![Some(Tensor::from_parts(output.shape().to_vec(), gx))]
            }
            Op::CausalMask => {
                let t = x.last_dim();
                let mut gx = g.data().to_vec();
                for block in gx.chunks_mut(t * t) {
                    for i in 0..t {
                        for j in i + 1..t {
                            block[i * t + j] = 0.0;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
            }
            Op::Sum => vec![Some(Tensor::filled(x.shape(), g.item()))],
            Op::CrossEntropy { targets } => {
                let v = x.last_dim();
                let n = x.rows() as f64;
                let mut p = softmax(x).into_data();
                for (row, &t) in p.chunks_mut(v).zip(targets) {
                    row[t] -= 1.0;
                }
                let s = g.item() / n;
                for e in &mut p {
                    *e *= s;
                }
                vec![Some(Tensor::from_parts(x.shape().to_vec(), p))]
            }
            Op::Embedding { ids } => {
                let d = x.shape()[1];
                let mut gt = vec![0.0; x.len()];
                for (row, &id) in g.data().chunks(d).zip(ids) {
                    for (a, &v) in gt[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *a += v;
                    }
                }
                vec![Some(Tensor::from_parts(x.shape().to_vec(), gt))]
            }
        };
        Ok(out)
    }
}

impl FromStr for Op {
    type Err = LaxError;

    /// Parses the tags of primitives that carry no static arguments.
    fn from_str(tag: &str) -> Result<Self> {
        Ok(match tag {
            "matmul" => Op::MatMul,
            "batch_matmul" => Op::BatchMatMul,
            "add" => Op::Add,
            "add_row" => Op::AddRow,
            "mul" => Op::Mul,
            "scalar_mul" => Op::ScalarMul,
            "gelu" => Op::Activation(Activation::Gelu),
            "relu" => Op::Activation(Activation::Relu),
            "identity" => Op::Activation(Activation::Identity),
            "softmax" => Op::Softmax,
            "causal_mask" => Op::CausalMask,
            "sum" => Op::Sum,
            other => return Err(LaxError::UnsupportedOp(other.to_string())),
        })
    }
}

/// Cotangents of a tagged primitive; unknown tags are rejected.
pub fn vjp(tag: &str, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
    tag.parse::<Op>()?.vjp(inputs, upstream)
}
