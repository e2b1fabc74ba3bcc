//! Differentiable operations on [`Tensor`].

use std::rc::Rc;

use super::{Array, Backward, Tensor};
use crate::error::{Error, Result};

type GradFn = dyn Fn(&Array, &[Rc<Array>], &Array) -> Result<Vec<Option<Array>>>;

/// Backward op described by a closure; covers every local (non-collective) op.
pub(crate) struct FnOp {
    name: &'static str,
    f: Box<GradFn>,
}

impl FnOp {
    pub(crate) fn new(
        name: &'static str,
        f: impl Fn(&Array, &[Rc<Array>], &Array) -> Result<Vec<Option<Array>>> + 'static,
    ) -> Self {
        FnOp {
            name,
            f: Box::new(f),
        }
    }
}

impl Backward for FnOp {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, grad: &Array, inputs: &[Rc<Array>], output: &Array) -> Result<Vec<Option<Array>>> {
        (self.f)(grad, inputs, output)
    }
}

/// Result of a masked softmax. Rows whose every entry was masked come back
/// as zeros and are listed in `fully_masked_rows`.
#[derive(Debug, Clone)]
pub struct SoftmaxOutput {
    pub probs: Tensor,
    pub fully_masked_rows: Vec<usize>,
}

fn last_dim(shape: &[usize], op: &'static str) -> Result<usize> {
    shape
        .last()
        .copied()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::invalid(op, format!("needs a non-empty last axis, got {shape:?}")))
}

impl Tensor {
    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let out = self.value().map(f);
        self.tape.record(
            out,
            &[self],
            FnOp::new(name, move |g, ins, out| {
                let d = Array::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(ins[0].data())
                        .zip(out.data())
                        .map(|((&g, &x), &y)| g * df(x, y))
                        .collect(),
                )?;
                Ok(vec![Some(d)])
            }),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.value().add(&other.value())?;
        self.tape.record(
            out,
            &[self, other],
            FnOp::new("add", |g, ins, _| {
                Ok(vec![
                    Some(g.sum_to_shape(ins[0].shape())?),
                    Some(g.sum_to_shape(ins[1].shape())?),
                ])
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.value().sub(&other.value())?;
        self.tape.record(
            out,
            &[self, other],
            FnOp::new("sub", |g, ins, _| {
                Ok(vec![
                    Some(g.sum_to_shape(ins[0].shape())?),
                    Some(g.scale(-1.0).sum_to_shape(ins[1].shape())?),
                ])
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.value().mul(&other.value())?;
        self.tape.record(
            out,
            &[self, other],
            FnOp::new("mul", |g, ins, _| {
                Ok(vec![
                    Some(g.mul(&ins[1])?.sum_to_shape(ins[0].shape())?),
                    Some(g.mul(&ins[0])?.sum_to_shape(ins[1].shape())?),
                ])
            }),
        )
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.value().broadcast_with(&other.value(), "div", |a, b| a / b)?;
        self.tape.record(
            out,
            &[self, other],
            FnOp::new("div", |g, ins, _| {
                let da = g.broadcast_with(&ins[1], "div", |g, b| g / b)?;
                let gb = g.mul(&ins[0])?.broadcast_with(&ins[1], "div", |ga, b| -ga / (b * b))?;
                Ok(vec![
                    Some(da.sum_to_shape(ins[0].shape())?),
                    Some(gb.sum_to_shape(ins[1].shape())?),
                ])
            }),
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.unary("scale", |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.unary("add_scalar", |x| x + c, |_, _| 1.0)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Result<Tensor> {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn powf(&self, p: f64) -> Result<Tensor> {
        self.unary("powf", |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn square(&self) -> Result<Tensor> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Result<Tensor> {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Result<Tensor> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let out = Array::scalar(self.value().sum());
        self.tape.record(
            out,
            &[self],
            FnOp::new("sum", |g, ins, _| Ok(vec![Some(Array::full(ins[0].shape(), g.item()))])),
        )
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.value().numel() as f64;
        self.sum_all()?.scale(1.0 / n)
    }

    /// Sum over `axis`, keeping it as a unit axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let out = self.value().sum_axis_keep(axis)?;
        self.tape.record(
            out,
            &[self],
            FnOp::new("sum_axis", |g, ins, _| Ok(vec![Some(Array::zeros(ins[0].shape()).add(g)?)])),
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::invalid("mean_axis", format!("axis {axis} out of range")))?;
        self.sum_axis(axis)?.scale(1.0 / n as f64)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.value().matmul(&other.value())?;
        self.tape.record(
            out,
            &[self, other],
            FnOp::new("matmul", |g, ins, _| {
                let da = g.matmul(&ins[1].transpose_last()?)?;
                let db = ins[0].transpose_last()?.matmul(g)?;
                Ok(vec![
                    Some(da.sum_to_shape(ins[0].shape())?),
                    Some(db.sum_to_shape(ins[1].shape())?),
                ])
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let out = self.value().reshape(shape)?;
        self.tape.record(
            out,
            &[self],
            FnOp::new("reshape", |g, ins, _| Ok(vec![Some(g.reshape(ins[0].shape())?)])),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let out = self.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape.record(
            out,
            &[self],
            FnOp::new("permute", move |g, _, _| Ok(vec![Some(g.permute(&inverse)?)])),
        )
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let out = self.value().narrow(axis, start, len)?;
        self.tape.record(
            out,
            &[self],
            FnOp::new("narrow", move |g, ins, _| {
                let idx: Vec<usize> = (start..start + len).collect();
                Ok(vec![Some(g.index_add(axis, &idx, ins[0].shape()[axis])?)])
            }),
        )
    }

    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        let out = self.value().index_select(axis, indices)?;
        let idx = indices.to_vec();
        self.tape.record(
            out,
            &[self],
            FnOp::new("index_select", move |g, ins, _| {
                Ok(vec![Some(g.index_add(axis, &idx, ins[0].shape()[axis])?)])
            }),
        )
    }

    /// Appends `extra` slots filled with `value` along `axis`; their gradient is dropped.
    pub fn pad_axis(&self, axis: usize, extra: usize, value: f64) -> Result<Tensor> {
        let out = self.value().pad_axis(axis, extra, value)?;
        self.tape.record(
            out,
            &[self],
            FnOp::new("pad_axis", move |g, ins, _| {
                Ok(vec![Some(g.narrow(axis, 0, ins[0].shape()[axis])?)])
            }),
        )
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let values: Vec<Rc<Array>> = parts.iter().map(|t| t.value()).collect();
        let refs: Vec<&Array> = values.iter().map(|v| v.as_ref()).collect();
        let out = Array::concat(&refs, axis)?;
        first.tape.record(
            out,
            parts,
            FnOp::new("concat", move |g, ins, _| {
                let mut start = 0;
                ins.iter()
                    .map(|x| {
                        let len = x.shape()[axis];
                        let piece = g.narrow(axis, start, len)?;
                        start += len;
                        Ok(Some(piece))
                    })
                    .collect()
            }),
        )
    }

    /// Softmax over the last axis with an optional additive mask (`-inf` masks an entry).
    /// The row maximum is subtracted before exponentiating.
    pub fn softmax_lastdim(&self, mask: Option<&Array>) -> Result<SoftmaxOutput> {
        let x = self.value();
        let z = match mask {
            Some(m) => {
                let z = x.add(m)?;
                if z.shape() != x.shape() {
                    return Err(Error::shape("softmax", x.shape(), m.shape()));
                }
                z
            }
            None => (*x).clone(),
        };
        let n = last_dim(z.shape(), "softmax")?;
        let mut out = Array::zeros(z.shape());
        let mut fully_masked_rows = Vec::new();
        for (r, (zi, yi)) in z
            .data()
            .chunks(n)
            .zip(out.data_mut().chunks_mut(n))
            .enumerate()
        {
            let m = zi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                fully_masked_rows.push(r);
                continue;
            }
            let mut s = 0.0;
            for (y, &v) in yi.iter_mut().zip(zi) {
                *y = (v - m).exp();
                s += *y;
            }
            for y in yi.iter_mut() {
                *y /= s;
            }
        }
        let probs = self.tape.record(
            out,
            &[self],
            FnOp::new("softmax", move |g, _, y| {
                let mut dx = Array::zeros(y.shape());
                for ((gi, yi), di) in g
                    .data()
                    .chunks(n)
                    .zip(y.data().chunks(n))
                    .zip(dx.data_mut().chunks_mut(n))
                {
                    let dot: f64 = gi.iter().zip(yi).map(|(a, b)| a * b).sum();
                    for ((d, &gj), &yj) in di.iter_mut().zip(gi).zip(yi) {
                        *d = yj * (gj - dot);
                    }
                }
                Ok(vec![Some(dx)])
            }),
        )?;
        Ok(SoftmaxOutput {
            probs,
            fully_masked_rows,
        })
    }

    pub fn log_softmax_lastdim(&self) -> Result<Tensor> {
        let x = self.value();
        let n = last_dim(x.shape(), "log_softmax")?;
        let mut out = Array::zeros(x.shape());
        for (xi, yi) in x.data().chunks(n).zip(out.data_mut().chunks_mut(n)) {
            let m = xi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + xi.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (y, &v) in yi.iter_mut().zip(xi) {
                *y = v - lse;
            }
        }
        self.tape.record(
            out,
            &[self],
            FnOp::new("log_softmax", move |g, _, y| {
                let mut dx = Array::zeros(y.shape());
                for ((gi, yi), di) in g
                    .data()
                    .chunks(n)
                    .zip(y.data().chunks(n))
                    .zip(dx.data_mut().chunks_mut(n))
                {
                    let gs: f64 = gi.iter().sum();
                    for ((d, &gj), &yj) in di.iter_mut().zip(gi).zip(yi) {
                        *d = gj - yj.exp() * gs;
                    }
                }
                Ok(vec![Some(dx)])
            }),
        )
    }

    /// Picks `x[row, indices[row]]` for every row of the last axis.
    pub fn pick_lastdim(&self, indices: &[usize]) -> Result<Tensor> {
        let x = self.value();
        let n = last_dim(x.shape(), "pick")?;
        let rows = x.numel() / n;
        if indices.len() != rows {
            return Err(Error::invalid(
                "pick",
                format!("{} indices for {rows} rows", indices.len()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid("pick", format!("index {bad} out of range {n}")));
        }
        let data: Vec<f64> = indices
            .iter()
            .enumerate()
            .map(|(r, &i)| x.data()[r * n + i])
            .collect();
        let out = Array::new(x.shape()[..x.ndim() - 1].to_vec(), data)?;
        let idx = indices.to_vec();
        self.tape.record(
            out,
            &[self],
            FnOp::new("pick", move |g, ins, _| {
                let mut dx = Array::zeros(ins[0].shape());
                for (r, (&i, &gv)) in idx.iter().zip(g.data()).enumerate() {
                    dx.data_mut()[r * n + i] += gv;
                }
                Ok(vec![Some(dx)])
            }),
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(Array::from_vec(vec![0.0, 0.0]));
        assert_eq!(x.softmax_lastdim(None).unwrap().probs.value().data(), &[0.5, 0.5]);

        let x = tape.constant(Array::from_vec(vec![1000.0, 1000.0 + 2f64.ln()]));
        let p = x.softmax_lastdim(None).unwrap().probs.value();
        assert!((p.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p.data()[1] - 2.0 / 3.0).abs() < 1e-12);

        let x = tape.constant(Array::from_vec(vec![5.0, 0.0]));
        let mask = Array::from_vec(vec![0.0, f64::NEG_INFINITY]);
        let p = x.softmax_lastdim(Some(&mask)).unwrap().probs.value();
        assert_eq!(p.data(), &[1.0, 0.0]);
    }

    #[test]
    fn fully_masked_row_is_zero_and_flagged() {
        let tape = Tape::new();
        let x = tape.param(Array::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mask = Array::new(vec![2, 2], vec![0.0, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
        let out = x.softmax_lastdim(Some(&mask)).unwrap();
        assert_eq!(out.fully_masked_rows, vec![1]);
        assert_eq!(&out.probs.value().data()[2..], &[0.0, 0.0]);
        assert!(out.probs.value().data().iter().all(|v| v.is_finite()));
        out.probs.sum_all().unwrap().backward().unwrap();
        assert!(x.grad().unwrap().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_shift_invariant() {
        let tape = Tape::new();
        let a = tape.constant(Array::from_vec(vec![0.3, -1.2, 2.5, 0.0]));
        let b = tape.constant(Array::from_vec(vec![7.3, 5.8, 9.5, 7.0]));
        let pa = a.softmax_lastdim(None).unwrap().probs.value();
        let pb = b.softmax_lastdim(None).unwrap().probs.value();
        assert!(pa.max_abs_diff(&pb) < 1e-12);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
