//! Dense f64 tensors: row-major flat storage plus a shape vector, and the
//! numeric kernels the graph ops dispatch to. Kernels are pure functions of
//! their inputs with fixed iteration order, so every build produces
//! bit-identical results for identical inputs.

use crate::error::{Error, Result};
use crate::parallel;

/// Product of a shape's dimensions; `[]` is a scalar with one element.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// A dense tensor value with no graph attachment.
#[derive(Clone, Debug, PartialEq)]
pub struct Value {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Value {
    /// Builds a value, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "value::new",
                detail: format!("shape {:?} needs {} elements, got {}", shape, numel(&shape), data.len()),
            });
        }
        Ok(Value { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Value { shape: shape.to_vec(), data: vec![0.0; numel(shape)] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Value { shape: shape.to_vec(), data: vec![1.0; numel(shape)] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Value { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    /// A scalar: shape `[]`, one element.
    pub fn scalar(v: f64) -> Self {
        Value { shape: vec![], data: vec![v] }
    }

    /// 1-D value from a slice.
    pub fn vector(data: &[f64]) -> Self {
        Value { shape: vec![data.len()], data: data.to_vec() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Reads a one-element value as f64.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "item",
                detail: format!("expected a single element, shape is {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ── Broadcasting ─────────────────────────────────────────────────────────

/// Broadcast result shape under trailing-aligned rules: aligned dims must be
/// equal or one of them 1; missing leading dims act as 1.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("cannot broadcast {:?} with {:?}", a, b),
            });
        };
    }
    Ok(out)
}

/// Per-output-dim strides for reading `src` broadcast into `out_shape`
/// (stride 0 on broadcast dims).
fn bcast_strides(src: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let src_str = strides(src);
    let mut s = vec![0; nd];
    for i in 0..nd {
        if i + src.len() >= nd {
            let j = i + src.len() - nd;
            s[i] = if src[j] == 1 && out_shape[i] != 1 { 0 } else { src_str[j] };
        }
    }
    s
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_binary(
    op: &'static str,
    a: &Value,
    b: &Value,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Value> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Value { shape: a.shape.clone(), data });
    }
    let out_shape = broadcast_shape(op, &a.shape, &b.shape)?;
    let nd = out_shape.len();
    let a_str = bcast_strides(&a.shape, &out_shape);
    let b_str = bcast_strides(&b.shape, &out_shape);
    let n = numel(&out_shape);
    let mut data = vec![0.0; n];
    let mut coords = vec![0usize; nd];
    let (mut ao, mut bo) = (0usize, 0usize);
    for slot in data.iter_mut() {
        *slot = f(a.data[ao], b.data[bo]);
        for d in (0..nd).rev() {
            coords[d] += 1;
            ao += a_str[d];
            bo += b_str[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ao -= a_str[d] * out_shape[d];
            bo -= b_str[d] * out_shape[d];
        }
    }
    Ok(Value { shape: out_shape, data })
}

/// Elementwise unary map.
pub fn map_unary(a: &Value, f: impl Fn(f64) -> f64) -> Value {
    Value { shape: a.shape.clone(), data: a.data.iter().map(|&x| f(x)).collect() }
}

// ── Matrix multiply ──────────────────────────────────────────────────────

/// Work size above which matmul rows are fanned out to the parallel helper.
const MATMUL_PAR_THRESHOLD: usize = 1 << 15;

/// Batched matrix multiply. Both operands need ndim >= 2; trailing dims
/// contract as `[.., m, k] x [.., k, n]`; leading dims must match exactly or
/// be absent on one side (that side is reused for every batch).
pub fn matmul(a: &Value, b: &Value) -> Result<Value> {
    let err = |detail: String| Error::ShapeMismatch { op: "matmul", detail };
    if a.ndim() < 2 || b.ndim() < 2 {
        return Err(err(format!("operands must have ndim >= 2, got {:?} and {:?}", a.shape, b.shape)));
    }
    let (m, ka) = (a.shape[a.ndim() - 2], a.shape[a.ndim() - 1]);
    let (kb, n) = (b.shape[b.ndim() - 2], b.shape[b.ndim() - 1]);
    if ka != kb {
        return Err(err(format!("inner dims differ: {:?} x {:?}", a.shape, b.shape)));
    }
    let la = &a.shape[..a.ndim() - 2];
    let lb = &b.shape[..b.ndim() - 2];
    let lead: Vec<usize> = if la == lb {
        la.to_vec()
    } else if la.is_empty() {
        lb.to_vec()
    } else if lb.is_empty() {
        la.to_vec()
    } else {
        return Err(err(format!("batch dims differ: {:?} x {:?}", a.shape, b.shape)));
    };
    let batch = numel(&lead);
    let a_bs = if la.is_empty() { 0 } else { m * ka };
    let b_bs = if lb.is_empty() { 0 } else { ka * n };
    let mut out_shape = lead;
    out_shape.push(m);
    out_shape.push(n);
    let mut data = vec![0.0; batch * m * n];

    let kernel = |row: usize, out_row: &mut [f64]| {
        let (bi, i) = (row / m, row % m);
        let a_row = &a.data[bi * a_bs + i * ka..bi * a_bs + i * ka + ka];
        let b_mat = &b.data[bi * b_bs..bi * b_bs + ka * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let b_row = &b_mat[p * n..p * n + n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    };
    if batch * m * n * ka >= MATMUL_PAR_THRESHOLD {
        parallel::for_each_row(&mut data, n, kernel);
    } else {
        for (row, out_row) in data.chunks_mut(n).enumerate() {
            kernel(row, out_row);
        }
    }
    Ok(Value { shape: out_shape, data })
}

// ── Axis manipulation ────────────────────────────────────────────────────

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute(a: &Value, perm: &[usize]) -> Result<Value> {
    let nd = a.ndim();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::InvalidArgument(format!(
            "permute: {:?} is not a permutation of 0..{}",
            perm, nd
        )));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| a.shape[p]).collect();
    let src_str = strides(&a.shape);
    let walk: Vec<usize> = perm.iter().map(|&p| src_str[p]).collect();
    let n = a.numel();
    let mut data = vec![0.0; n];
    let mut coords = vec![0usize; nd];
    let mut off = 0usize;
    for slot in data.iter_mut() {
        *slot = a.data[off];
        for d in (0..nd).rev() {
            coords[d] += 1;
            off += walk[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            off -= walk[d] * out_shape[d];
        }
    }
    Ok(Value { shape: out_shape, data })
}

/// Swaps the trailing two axes.
pub fn transpose_last2(a: &Value) -> Result<Value> {
    if a.ndim() < 2 {
        return Err(Error::ShapeMismatch {
            op: "transpose_last2",
            detail: format!("needs ndim >= 2, shape is {:?}", a.shape),
        });
    }
    let mut perm: Vec<usize> = (0..a.ndim()).collect();
    perm.swap(a.ndim() - 2, a.ndim() - 1);
    permute(a, &perm)
}

/// Reinterprets the data under a new shape with equal element count.
pub fn reshape(a: &Value, shape: &[usize]) -> Result<Value> {
    if numel(shape) != a.numel() {
        return Err(Error::ShapeMismatch {
            op: "reshape",
            detail: format!("{:?} ({} elems) cannot become {:?} ({} elems)", a.shape, a.numel(), shape, numel(shape)),
        });
    }
    Ok(Value { shape: shape.to_vec(), data: a.data.clone() })
}

/// Materializes `a` broadcast to `shape`.
pub fn broadcast_to(a: &Value, shape: &[usize]) -> Result<Value> {
    let joint = broadcast_shape("broadcast_to", &a.shape, shape)?;
    if joint != shape {
        return Err(Error::ShapeMismatch {
            op: "broadcast_to",
            detail: format!("{:?} does not broadcast to {:?}", a.shape, shape),
        });
    }
    let nd = shape.len();
    let a_str = bcast_strides(&a.shape, shape);
    let mut data = vec![0.0; numel(shape)];
    let mut coords = vec![0usize; nd];
    let mut off = 0usize;
    for slot in data.iter_mut() {
        *slot = a.data[off];
        for d in (0..nd).rev() {
            coords[d] += 1;
            off += a_str[d];
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
            off -= a_str[d] * shape[d];
        }
    }
    Ok(Value { shape: shape.to_vec(), data })
}

/// Reduces `a` by summation down to `shape` (the adjoint of broadcasting):
/// `shape` must broadcast to `a.shape`. Accumulation walks `a` in linear
/// order, so the summation order is fixed.
pub fn sum_to(a: &Value, shape: &[usize]) -> Result<Value> {
    let joint = broadcast_shape("sum_to", shape, &a.shape)?;
    if joint != a.shape {
        return Err(Error::ShapeMismatch {
            op: "sum_to",
            detail: format!("{:?} is not reducible to {:?}", a.shape, shape),
        });
    }
    let nd = a.ndim();
    let t_str = bcast_strides(shape, &a.shape);
    let mut data = vec![0.0; numel(shape)];
    let mut coords = vec![0usize; nd];
    let mut off = 0usize;
    for &v in &a.data {
        data[off] += v;
        for d in (0..nd).rev() {
            coords[d] += 1;
            off += t_str[d];
            if coords[d] < a.shape[d] {
                break;
            }
            coords[d] = 0;
            off -= t_str[d] * a.shape[d];
        }
    }
    Ok(Value { shape: shape.to_vec(), data })
}

// ── Reductions and row-wise ops ──────────────────────────────────────────

/// Sum of all elements, as a scalar value.
pub fn sum_all(a: &Value) -> Value {
    Value::scalar(a.data.iter().sum())
}

/// Mean of all elements, as a scalar value.
pub fn mean_all(a: &Value) -> Result<Value> {
    if a.numel() == 0 {
        return Err(Error::Domain { op: "mean", detail: "mean of an empty tensor".into() });
    }
    Ok(Value::scalar(a.data.iter().sum::<f64>() / a.numel() as f64))
}

fn last_axis(op: &'static str, a: &Value) -> Result<(usize, usize)> {
    if a.ndim() == 0 || *a.shape.last().unwrap() == 0 {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("needs a non-empty last axis, shape is {:?}", a.shape),
        });
    }
    let d = *a.shape.last().unwrap();
    Ok((a.numel() / d, d))
}

/// Sum over the last axis, keeping it as size 1.
pub fn sum_last_keepdim(a: &Value) -> Result<Value> {
    let (rows, d) = last_axis("sum_last", a)?;
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = 1;
    let data = (0..rows).map(|r| a.data[r * d..(r + 1) * d].iter().sum()).collect();
    Ok(Value { shape, data })
}

/// Numerically stable softmax over the last axis (max-subtracted).
pub fn softmax_last(a: &Value) -> Result<Value> {
    let (rows, d) = last_axis("softmax", a)?;
    let mut data = vec![0.0; a.numel()];
    for r in 0..rows {
        let row = &a.data[r * d..(r + 1) * d];
        let out = &mut data[r * d..(r + 1) * d];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &x) in out.iter_mut().zip(row) {
            *o = (x - m).exp();
            z += *o;
        }
        for o in out.iter_mut() {
            *o /= z;
        }
    }
    Ok(Value { shape: a.shape.clone(), data })
}

/// Max over the last axis (axis dropped) plus the index of the first
/// maximum per row.
pub fn max_last(a: &Value) -> Result<(Value, Vec<usize>)> {
    let (rows, d) = last_axis("max_last", a)?;
    let shape = a.shape[..a.ndim() - 1].to_vec();
    let mut data = vec![0.0; rows];
    let mut arg = vec![0usize; rows];
    for r in 0..rows {
        let row = &a.data[r * d..(r + 1) * d];
        let (mut best, mut best_j) = (row[0], 0);
        for (j, &x) in row.iter().enumerate().skip(1) {
            if x > best {
                best = x;
                best_j = j;
            }
        }
        data[r] = best;
        arg[r] = best_j;
    }
    Ok((Value { shape, data }, arg))
}

/// Euclidean norm over the last axis, keeping it as size 1:
/// `sqrt(sum(x^2) + eps)`. The epsilon keeps the op differentiable at zero.
pub fn l2norm_last(a: &Value, eps: f64) -> Result<Value> {
    let (rows, d) = last_axis("l2norm", a)?;
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = 1;
    let data = (0..rows)
        .map(|r| {
            let s: f64 = a.data[r * d..(r + 1) * d].iter().map(|&x| x * x).sum();
            (s + eps).sqrt()
        })
        .collect();
    Ok(Value { shape, data })
}

// ── Gather / scatter / concat ────────────────────────────────────────────

fn split_at_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    Ok((outer, shape[axis], inner))
}

/// Gathers slices along `axis` at the given indices (repeats allowed).
pub fn index_select(a: &Value, axis: usize, indices: &[usize]) -> Result<Value> {
    let (outer, dim, inner) = split_at_axis("index_select", &a.shape, axis)?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= dim) {
        return Err(Error::InvalidArgument(format!(
            "index_select: index {bad} out of range for axis {axis} of size {dim}"
        )));
    }
    let mut shape = a.shape.clone();
    shape[axis] = indices.len();
    let mut data = vec![0.0; outer * indices.len() * inner];
    for o in 0..outer {
        for (ii, &sel) in indices.iter().enumerate() {
            let src = &a.data[(o * dim + sel) * inner..(o * dim + sel + 1) * inner];
            let dst = (o * indices.len() + ii) * inner;
            data[dst..dst + inner].copy_from_slice(src);
        }
    }
    Ok(Value { shape, data })
}

/// Adjoint of `index_select`: adds slices of `a` into a zero tensor whose
/// `axis` has size `dim`, at the given indices. Duplicate indices accumulate
/// in index order.
pub fn scatter_add(a: &Value, axis: usize, indices: &[usize], dim: usize) -> Result<Value> {
    let (outer, have, inner) = split_at_axis("scatter_add", &a.shape, axis)?;
    if have != indices.len() {
        return Err(Error::ShapeMismatch {
            op: "scatter_add",
            detail: format!("axis {axis} has size {have} but {} indices given", indices.len()),
        });
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= dim) {
        return Err(Error::InvalidArgument(format!(
            "scatter_add: index {bad} out of range for target size {dim}"
        )));
    }
    let mut shape = a.shape.clone();
    shape[axis] = dim;
    let mut data = vec![0.0; outer * dim * inner];
    for o in 0..outer {
        for (ii, &sel) in indices.iter().enumerate() {
            let src = &a.data[(o * have + ii) * inner..(o * have + ii + 1) * inner];
            let dst = (o * dim + sel) * inner;
            for (d, &s) in data[dst..dst + inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Ok(Value { shape, data })
}

/// Concatenates along `axis`; all other dims must match.
pub fn concat(parts: &[&Value], axis: usize) -> Result<Value> {
    let first = parts.first().ok_or_else(|| {
        Error::InvalidArgument("concat: needs at least one input".into())
    })?;
    let nd = first.ndim();
    let mut dim_total = 0;
    for p in parts {
        if p.ndim() != nd
            || axis >= nd
            || (0..nd).any(|i| i != axis && p.shape[i] != first.shape[i])
        {
            return Err(Error::ShapeMismatch {
                op: "concat",
                detail: format!(
                    "shapes {:?} and {:?} differ outside axis {axis}",
                    first.shape, p.shape
                ),
            });
        }
        dim_total += p.shape[axis];
    }
    let mut shape = first.shape.clone();
    shape[axis] = dim_total;
    let (outer, _, inner) = split_at_axis("concat", &shape, axis)?;
    let mut data = vec![0.0; outer * dim_total * inner];
    for o in 0..outer {
        let mut at = 0usize;
        for p in parts {
            let d = p.shape[axis];
            let src = &p.data()[o * d * inner..(o + 1) * d * inner];
            let dst = (o * dim_total + at) * inner;
            data[dst..dst + d * inner].copy_from_slice(src);
            at += d;
        }
    }
    Ok(Value { shape, data })
}
