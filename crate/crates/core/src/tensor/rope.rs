//! Rotary position embedding with the half-split pairing `(j, j + dim/2)`.

use super::ops::FnOp;
use super::{Array, Tensor};
use crate::error::{Error, Result};

pub const ROPE_BASE: f64 = 10000.0;

/// Rotates the last axis of `x` by angles `position * base^(-2j/dim)`.
/// `seq_axis` names the axis indexed by `positions`. With `inverse` the angles are negated.
pub fn rope_rotate(x: &Array, positions: &[usize], seq_axis: usize, inverse: bool) -> Result<Array> {
    let shape = x.shape();
    let dim = *shape.last().ok_or_else(|| Error::invalid("rope", "scalar input"))?;
    if dim % 2 != 0 {
        return Err(Error::OddLastDim(dim));
    }
    if seq_axis + 1 >= shape.len() {
        return Err(Error::invalid(
            "rope",
            format!("sequence axis {seq_axis} must precede the rotated axis in {shape:?}"),
        ));
    }
    if positions.len() != shape[seq_axis] {
        return Err(Error::invalid(
            "rope",
            format!(
                "{} position ids for sequence extent {}",
                positions.len(),
                shape[seq_axis]
            ),
        ));
    }
    let half = dim / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|j| ROPE_BASE.powf(-2.0 * j as f64 / dim as f64))
        .collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    let inner: usize = shape[seq_axis + 1..].iter().product();
    let seq = shape[seq_axis];
    let mut out = x.clone();
    let data = out.data_mut();
    let src = x.data();
    for (block, chunk) in src.chunks(inner).enumerate() {
        let p = positions[block % seq] as f64;
        let (sin, cos): (Vec<f64>, Vec<f64>) = inv_freq.iter().map(|f| (sign * p * f).sin_cos()).unzip();
        let base = block * inner;
        for (v, vec) in chunk.chunks(dim).enumerate() {
            let o = base + v * dim;
            for j in 0..half {
                let (a, b) = (vec[j], vec[j + half]);
                data[o + j] = a * cos[j] - b * sin[j];
                data[o + j + half] = b * cos[j] + a * sin[j];
            }
        }
    }
    Ok(out)
}

impl Tensor {
    /// Applies RoPE to a `[.., seq, .., dim]` tensor; the backward pass rotates
    /// the gradient by the negated angles.
    pub fn rope(&self, positions: &[usize], seq_axis: usize) -> Result<Tensor> {
        let out = rope_rotate(&self.value(), positions, seq_axis, false)?;
        let pos = positions.to_vec();
        self.tape.record(
            out,
            &[self],
            FnOp::new("rope", move |g, _, _| Ok(vec![Some(rope_rotate(g, &pos, seq_axis, true)?)])),
        )
    }
}
