//! Dense row-major tensors and the raw (non-recording) kernels behind every
//! differentiable op.
//!
//! Broadcasting aligns trailing dimensions; an extent of 1 stretches to match
//! the other operand.

use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::Float;

/// Below this many multiply-adds a matmul runs on the calling thread.
const PAR_MATMUL_WORK: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Float>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<Float>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Contract(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: Float) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: Float) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<Float>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a tensor by evaluating `f` at every flat (row-major) index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> Float) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Float] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Float] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Float> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<Float> {
        if self.data.len() != 1 {
            return Err(TensorError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn get(&self, index: &[usize]) -> Result<Float> {
        if index.len() != self.shape.len() {
            return Err(TensorError::dim("get", &self.shape, index));
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return Err(TensorError::Index {
                    op: "get",
                    index: i,
                    bound: d,
                });
            }
            off = off * d + i;
        }
        Ok(self.data[off])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> Float {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum_all(&self) -> Float {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(Float) -> Float) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::dim("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub(crate) fn with_shape(mut self, shape: Vec<usize>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    /// In-place `self += other`; shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::dim("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Element-wise binary op with trailing-dimension broadcasting.
    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(Float, Float) -> Float,
    ) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape)
            .ok_or_else(|| TensorError::dim(op, &self.shape, &other.shape))?;
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        walk2(&out_shape, &sa, &sb, |_, ia, ib| {
            data.push(f(self.data[ia], other.data[ib]))
        });
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, factor: Float) -> Tensor {
        self.map(|v| v * factor)
    }

    /// Materializes the broadcast of `self` to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        match broadcast_shape(&self.shape, shape) {
            Some(s) if s == shape => {}
            _ => return Err(TensorError::dim("broadcast_to", &self.shape, shape)),
        }
        let sa = broadcast_strides(&self.shape, shape);
        let mut data = Vec::with_capacity(shape.iter().product());
        walk1(shape, &sa, |_, ia| data.push(self.data[ia]));
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Sums over the dimensions along which `shape` would have been
    /// broadcast to reach `self.shape()`. The inverse of `broadcast_to`
    /// for gradients.
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        match broadcast_shape(shape, &self.shape) {
            Some(s) if s == self.shape => {}
            _ => return Err(TensorError::dim("sum_to_shape", &self.shape, shape)),
        }
        let st = broadcast_strides(shape, &self.shape);
        let mut out = vec![0.0; shape.iter().product()];
        walk1(&self.shape, &st, |i, it| out[it] += self.data[i]);
        Ok(Tensor {
            shape: shape.to_vec(),
            data: out,
        })
    }

    /// Sums over `axes` and removes them.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor> {
        let (keep, removed) = reduced_shapes(&self.shape, axes, "sum")?;
        Ok(self.sum_to_shape(&keep)?.with_shape(removed))
    }

    /// Arithmetic mean over `axes`, which are removed. An empty axis set is
    /// the identity.
    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor> {
        let count = reduced_count(&self.shape, axes, "mean")?;
        let s = self.sum_axes(axes)?;
        Ok(s.scale(1.0 / count as Float))
    }

    /// Batched matrix product over the last two axes. Leading (batch) axes
    /// broadcast.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (ra, rb) = (self.rank(), other.rank());
        if ra < 2 || rb < 2 {
            return Err(TensorError::dim("matmul", &self.shape, &other.shape));
        }
        let (m, k) = (self.shape[ra - 2], self.shape[ra - 1]);
        let (k2, n) = (other.shape[rb - 2], other.shape[rb - 1]);
        if k != k2 {
            return Err(TensorError::dim("matmul", &self.shape, &other.shape));
        }
        if rb == 2 {
            // Fold every leading axis of the left operand into its rows.
            let rows: usize = self.shape[..ra - 1].iter().product();
            let mut out = vec![0.0; rows * n];
            gemm(&self.data, &other.data, &mut out, rows, k, n);
            let mut shape = self.shape[..ra - 1].to_vec();
            shape.push(n);
            return Ok(Tensor { shape, data: out });
        }
        let batch_a = &self.shape[..ra - 2];
        let batch_b = &other.shape[..rb - 2];
        let batch = broadcast_shape(batch_a, batch_b)
            .ok_or_else(|| TensorError::dim("matmul", &self.shape, &other.shape))?;
        let sa: Vec<usize> = broadcast_strides(batch_a, &batch)
            .into_iter()
            .map(|s| s * m * k)
            .collect();
        let sb: Vec<usize> = broadcast_strides(batch_b, &batch)
            .into_iter()
            .map(|s| s * k * n)
            .collect();
        let nb: usize = batch.iter().product();
        let mut offsets = Vec::with_capacity(nb);
        walk2(&batch, &sa, &sb, |_, ia, ib| offsets.push((ia, ib)));
        let mut out = vec![0.0; nb * m * n];
        let kernel = |(chunk, &(ia, ib)): (&mut [Float], &(usize, usize))| {
            gemm_serial(
                &self.data[ia..ia + m * k],
                &other.data[ib..ib + k * n],
                chunk,
                k,
                n,
            )
        };
        if m * n > 0 {
            if nb * m * k * n >= PAR_MATMUL_WORK && nb > 1 {
                out.par_chunks_mut(m * n)
                    .zip(offsets.par_iter())
                    .for_each(kernel);
            } else {
                out.chunks_mut(m * n).zip(offsets.iter()).for_each(kernel);
            }
        }
        let mut shape = batch;
        shape.push(m);
        shape.push(n);
        Ok(Tensor { shape, data: out })
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(TensorError::Axis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r {
            return Err(TensorError::dim("permute", &self.shape, perm));
        }
        for &p in perm {
            if p >= r || seen[p] {
                return Err(TensorError::dim("permute", &self.shape, perm));
            }
            seen[p] = true;
        }
        let strides = contiguous_strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
        let mut data = Vec::with_capacity(self.numel());
        walk1(&out_shape, &src_strides, |_, i| data.push(self.data[i]));
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let r = first.rank();
        if axis >= r {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank: r,
            });
        }
        let mut total = 0;
        for t in tensors {
            let ok = t.rank() == r
                && t.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(TensorError::dim("concat", &first.shape, &t.shape));
            }
            total += t.shape[axis];
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for t in tensors {
                let block = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor { shape, data })
    }

    /// The sub-tensor `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let r = self.rank();
        if axis >= r {
            return Err(TensorError::Axis {
                op: "narrow",
                axis,
                rank: r,
            });
        }
        let extent = self.shape[axis];
        if start + len > extent {
            return Err(TensorError::Index {
                op: "narrow",
                index: start + len,
                bound: extent,
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(axis, start, s)?);
            start += s;
        }
        if self.rank() > axis && start != self.shape[axis] {
            return Err(TensorError::dim("split", &self.shape, sizes));
        }
        Ok(out)
    }

    /// Selects rows (sub-tensors along axis 0) by index.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(TensorError::Axis {
                op: "gather",
                axis: 0,
                rank: 0,
            });
        }
        let rows = self.shape[0];
        let width: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "gather",
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(&self.data[i * width..(i + 1) * width]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor { shape, data })
    }

    /// Adds `src` into `self` over `start..` along `axis` (the adjoint of
    /// `narrow`).
    pub(crate) fn add_narrow(&mut self, axis: usize, start: usize, src: &Tensor) {
        let extent = self.shape[axis];
        let len = src.shape[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            let s = &src.data[o * len * inner..(o + 1) * len * inner];
            for (d, v) in self.data[base..base + len * inner].iter_mut().zip(s) {
                *d += v;
            }
        }
    }

    /// Adds each row of `src` into row `indices[r]` of `self` (the adjoint of
    /// `gather_rows`).
    pub(crate) fn scatter_add_rows(&mut self, indices: &[usize], src: &Tensor) {
        let width: usize = self.shape[1..].iter().product();
        for (r, &i) in indices.iter().enumerate() {
            let s = &src.data[r * width..(r + 1) * width];
            for (d, v) in self.data[i * width..(i + 1) * width].iter_mut().zip(s) {
                *d += v;
            }
        }
    }
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i < r - a.len() { 1 } else { a[i - (r - a.len())] };
        let db = if i < r - b.len() { 1 } else { b[i - (r - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Strides of `src` laid out inside `out` (0 on broadcast axes).
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(src);
    let pad = out.len() - src.len();
    (0..out.len())
        .map(|d| {
            if d < pad || src[d - pad] == 1 {
                0
            } else {
                own[d - pad]
            }
        })
        .collect()
}

fn reduced_shapes(shape: &[usize], axes: &[usize], op: &'static str) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut keep = shape.to_vec();
    for &a in axes {
        if a >= shape.len() {
            return Err(TensorError::Axis {
                op,
                axis: a,
                rank: shape.len(),
            });
        }
        keep[a] = 1;
    }
    let removed = shape
        .iter()
        .enumerate()
        .filter(|(d, _)| !axes.contains(d))
        .map(|(_, &s)| s)
        .collect();
    Ok((keep, removed))
}

pub(crate) fn reduced_count(shape: &[usize], axes: &[usize], op: &'static str) -> Result<usize> {
    let mut count = 1;
    let mut seen = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() {
            return Err(TensorError::Axis {
                op,
                axis: a,
                rank: shape.len(),
            });
        }
        if !seen[a] {
            seen[a] = true;
            count *= shape[a];
        }
    }
    Ok(count)
}

fn walk1(shape: &[usize], s: &[usize], mut f: impl FnMut(usize, usize)) {
    walk2(shape, s, s, |i, a, _| f(i, a));
}

/// Visits every multi-index of `shape` in row-major order, tracking flat
/// offsets under two stride sets.
fn walk2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let r = shape.len();
    let mut idx = vec![0usize; r];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        let mut d = r;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn gemm_serial(a: &[Float], b: &[Float], c: &mut [Float], k: usize, n: usize) {
    for (arow, crow) in a.chunks(k.max(1)).zip(c.chunks_mut(n)) {
        if k == 0 {
            break;
        }
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c (m×n) += a (m×k) · b (k×n)`, rows split across threads for large work.
/// Each output element is summed in the same order either way.
fn gemm(a: &[Float], b: &[Float], c: &mut [Float], m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    if m * k * n < PAR_MATMUL_WORK || m == 1 {
        gemm_serial(a, b, c, k, n);
        return;
    }
    let rows_per_task = (PAR_MATMUL_WORK / (k * n)).max(1);
    c.par_chunks_mut(rows_per_task * n)
        .zip(a.par_chunks(rows_per_task * k))
        .for_each(|(cc, aa)| gemm_serial(aa, b, cc, k, n));
}
