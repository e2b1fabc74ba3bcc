//! Dense row-major arrays of `f64` with the handful of layout operations the
//! attention engines and the toy model need. No autograd here; see [`super::Tensor`].

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `target`, with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = target.len() - shape.len();
    (0..target.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Calls `f(flat_out, flat_a, flat_b)` for every element of the broadcast result.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out_shape);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        // odometer increment
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::invalid(
                "array",
                format!(
                    "data length {} does not match shape {:?}",
                    data.len(),
                    shape
                ),
            ));
        }
        Ok(Array { shape, data })
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Array {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Array {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![v; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Entries drawn uniformly from `[lo, hi)`.
    pub fn random_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Self {
        Array {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(|_| rng.random_range(lo..hi)).collect(),
        }
    }

    /// Entries drawn from `N(0, std^2)`.
    pub fn random_normal(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Self {
        let dist = rand_distr::Normal::new(0.0, std).expect("finite std");
        Array {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(|_| rand_distr::Distribution::sample(&dist, rng)).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut a = Self::zeros(&[n, n]);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Array, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Array {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Elementwise binary op with broadcasting.
    pub fn broadcast_with(
        &self,
        other: &Array,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Array> {
        if self.shape == other.shape {
            return self.zip_map(other, f);
        }
        let out_shape = broadcast_shapes(&self.shape, &other.shape)
            .ok_or_else(|| Error::shape(op, &self.shape, &other.shape))?;
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let mut data = vec![0.0; numel(&out_shape)];
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
            data[o] = f(self.data[ia], other.data[ib]);
        });
        Ok(Array {
            shape: out_shape,
            data,
        })
    }

    /// Sums a broadcast gradient back down to `shape`.
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Array> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        if broadcast_shapes(shape, &self.shape).as_deref() != Some(&self.shape[..]) {
            return Err(Error::shape("sum_to_shape", &self.shape, shape));
        }
        let strides = broadcast_strides(shape, &self.shape);
        let zeros = vec![0; self.shape.len()];
        let mut out = Array::zeros(shape);
        for_each_broadcast(&self.shape, &strides, &zeros, |o, i, _| {
            out.data[i] += self.data[o];
        });
        Ok(out)
    }

    pub fn add(&self, other: &Array) -> Result<Array> {
        self.broadcast_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Array) -> Result<Array> {
        self.broadcast_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Array) -> Result<Array> {
        self.broadcast_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Array {
        self.map(|x| x * c)
    }

    pub fn add_assign(&mut self, other: &Array) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Array) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Array> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Array {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Reorders axes; `axes[i]` names the source axis placed at position `i`.
    pub fn permute(&self, axes: &[usize]) -> Result<Array> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::invalid(
                "permute",
                format!("axes {axes:?} are not a permutation of 0..{nd}"),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides = contiguous_strides(&self.shape);
        let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
        let zeros = vec![0; nd];
        let mut data = vec![0.0; self.numel()];
        for_each_broadcast(&out_shape, &perm_strides, &zeros, |o, i, _| {
            data[o] = self.data[i];
        });
        Ok(Array {
            shape: out_shape,
            data,
        })
    }

    fn split_at_axis(&self, axis: usize) -> (usize, usize, usize) {
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        (outer, self.shape[axis], inner)
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        if axis >= self.ndim() {
            return Err(Error::invalid(
                op,
                format!("axis {axis} out of range for shape {:?}", self.shape),
            ));
        }
        Ok(())
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Array> {
        self.check_axis("narrow", axis)?;
        if start + len > self.shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!(
                    "range {start}..{} exceeds extent {} of axis {axis}",
                    start + len,
                    self.shape[axis]
                ),
            ));
        }
        let (outer, extent, inner) = self.split_at_axis(axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Array { shape, data })
    }

    pub fn concat(parts: &[&Array], axis: usize) -> Result<Array> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        first.check_axis("concat", axis)?;
        for p in &parts[1..] {
            let same = p.ndim() == first.ndim()
                && p
                    .shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape("concat", &first.shape, &p.shape));
            }
        }
        let outer = numel(&first.shape[..axis]);
        let inner = numel(&first.shape[axis + 1..]);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Array { shape, data })
    }

    /// Splits into `parts` equal pieces along `axis`.
    pub fn chunk(&self, axis: usize, parts: usize) -> Result<Vec<Array>> {
        self.check_axis("chunk", axis)?;
        if parts == 0 || self.shape[axis] % parts != 0 {
            return Err(Error::Divisibility {
                what: "split extent",
                value: self.shape[axis],
                by: parts,
            });
        }
        let len = self.shape[axis] / parts;
        (0..parts).map(|i| self.narrow(axis, i * len, len)).collect()
    }

    /// Gathers entries `indices` along `axis` (duplicates allowed).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Array> {
        self.check_axis("index_select", axis)?;
        let (outer, extent, inner) = self.split_at_axis(axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
            return Err(Error::invalid(
                "index_select",
                format!("index {bad} out of range for extent {extent}"),
            ));
        }
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * extent + i) * inner;
                data.extend_from_slice(&self.data[base..base + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Ok(Array { shape, data })
    }

    /// Adjoint of [`Array::index_select`]: scatter-adds rows back into an `extent`-long axis.
    pub fn index_add(&self, axis: usize, indices: &[usize], extent: usize) -> Result<Array> {
        self.check_axis("index_add", axis)?;
        if self.shape[axis] != indices.len() {
            return Err(Error::invalid(
                "index_add",
                format!("{} indices for axis of extent {}", indices.len(), self.shape[axis]),
            ));
        }
        let (outer, n, inner) = self.split_at_axis(axis);
        let mut shape = self.shape.clone();
        shape[axis] = extent;
        let mut out = Array::zeros(&shape);
        for o in 0..outer {
            for (j, &i) in indices.iter().enumerate() {
                let src = (o * n + j) * inner;
                let dst = (o * extent + i) * inner;
                for t in 0..inner {
                    out.data[dst + t] += self.data[src + t];
                }
            }
        }
        Ok(out)
    }

    /// Appends `extra` entries filled with `value` at the end of `axis`.
    pub fn pad_axis(&self, axis: usize, extra: usize, value: f64) -> Result<Array> {
        self.check_axis("pad_axis", axis)?;
        if extra == 0 {
            return Ok(self.clone());
        }
        let mut pad_shape = self.shape.clone();
        pad_shape[axis] = extra;
        let pad = Array::full(&pad_shape, value);
        Array::concat(&[self, &pad], axis)
    }

    /// Batched matrix product over the last two axes with broadcast batch axes.
    pub fn matmul(&self, other: &Array) -> Result<Array> {
        if self.ndim() < 2 || other.ndim() < 2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k) = (self.shape[self.ndim() - 2], self.shape[self.ndim() - 1]);
        let (k2, n) = (other.shape[other.ndim() - 2], other.shape[other.ndim() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let ba = &self.shape[..self.ndim() - 2];
        let bb = &other.shape[..other.ndim() - 2];
        let batch = broadcast_shapes(ba, bb)
            .ok_or_else(|| Error::shape("matmul", &self.shape, &other.shape))?;
        let sa: Vec<usize> = broadcast_strides(ba, &batch).iter().map(|s| s * m * k).collect();
        let sb: Vec<usize> = broadcast_strides(bb, &batch).iter().map(|s| s * k * n).collect();
        let nb = numel(&batch);
        let mut data = vec![0.0; nb * m * n];
        for_each_broadcast(&batch, &sa, &sb, |bi, oa, ob| {
            let a = &self.data[oa..oa + m * k];
            let b = &other.data[ob..ob + k * n];
            let c = &mut data[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                for p in 0..k {
                    let aip = a[i * k + p];
                    let brow = &b[p * n..(p + 1) * n];
                    let crow = &mut c[i * n..(i + 1) * n];
                    for j in 0..n {
                        crow[j] += aip * brow[j];
                    }
                }
            }
        });
        let mut shape = batch;
        shape.push(m);
        shape.push(n);
        Ok(Array { shape, data })
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Array> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(Error::invalid("transpose", "need at least two axes"));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis_keep(&self, axis: usize) -> Result<Array> {
        self.check_axis("sum_axis", axis)?;
        let (outer, extent, inner) = self.split_at_axis(axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for t in 0..inner {
                    data[o * inner + t] += self.data[base + t];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Ok(Array { shape, data })
    }

    /// Rounds every entry to the nearest `f32`.
    pub fn round_f32(&mut self) {
        for x in &mut self.data {
            *x = *x as f32 as f64;
        }
    }
}
