//! Ring attention: queries stay put, key/value chunks travel around the group.

use std::rc::Rc;

use super::block::{block_attention_piece, combine_pieces, scores, unmasked_pairs, BlockPiece};
use crate::comm::{Comm, CommGroup};
use crate::error::Result;
use crate::tensor::{Array, Backward, Tensor};

const HEAD_MAJOR: [usize; 4] = [0, 2, 1, 3];

struct RingBackward {
    comm: Comm,
    group: CommGroup,
    positions: Vec<Vec<usize>>,
    causal: bool,
    lse: Array,
}

fn prev(i: usize, n: usize) -> usize {
    (i + n - 1) % n
}

/// Forward ring. Inputs are `[bs, len, hs, dim]`; `positions[i]` are the
/// global positions held by group member `i`.
pub(crate) fn ring_attention(
    comm: &Comm,
    group: &CommGroup,
    positions: &[Vec<usize>],
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    causal: bool,
) -> Result<Tensor> {
    let n = group.size();
    let me = group.index_of(comm.rank()).expect("member of ring group");
    let qh = q.value().permute(&HEAD_MAJOR)?;
    let mut kv = vec![k.value().permute(&HEAD_MAJOR)?, v.value().permute(&HEAD_MAJOR)?];
    let s = qh.shape();
    let mut acc = BlockPiece::empty(s[0], s[1], s[2], s[3]);
    let mut src = me;
    let q_pos = &positions[me];
    for step in 0..n {
        let next = if step + 1 < n {
            Some(comm.ring_shift(group, &kv, false)?)
        } else {
            None
        };
        let piece = block_attention_piece(&qh, &kv[0], &kv[1], q_pos, &positions[src], causal)?;
        comm.add_flops(4 * (s[0] * s[1] * s[3]) as u64 * unmasked_pairs(q_pos, &positions[src], causal));
        acc = combine_pieces(&acc, &piece)?;
        if let Some(next) = next {
            kv = next;
            src = prev(src, n);
        }
    }
    let (out, lse) = acc.finalize();
    q.tape().record(
        out.permute(&HEAD_MAJOR)?,
        &[q, k, v],
        RingBackward {
            comm: comm.clone(),
            group: group.clone(),
            positions: positions.to_vec(),
            causal,
            lse,
        },
    )
}

impl Backward for RingBackward {
    fn name(&self) -> &'static str {
        "ring_attention"
    }

    fn is_collective(&self) -> bool {
        true
    }

    /// Recomputes each block from the saved log-sum-exp. dQ stays local; the
    /// dK/dV accumulators ride along with their kv chunk and take one extra
    /// hop at the end to land on the owner.
    fn backward(&self, grad: &Array, inputs: &[Rc<Array>], output: &Array) -> Result<Vec<Option<Array>>> {
        let n = self.group.size();
        let me = self.group.index_of(self.comm.rank()).expect("member of ring group");
        let q = inputs[0].permute(&HEAD_MAJOR)?;
        let d_o = grad.permute(&HEAD_MAJOR)?;
        let o = output.permute(&HEAD_MAJOR)?;
        let dim = q.shape()[3];
        let scale = 1.0 / (dim as f64).sqrt();
        // D_i = sum_d dO_id O_id
        let delta = d_o.mul(&o)?.sum_axis_keep(3)?;
        let lse = self.lse.reshape(&[q.shape()[0], q.shape()[1], q.shape()[2], 1])?;
        let mut dq = Array::zeros(q.shape());
        let kshape = q.shape()[..2]
            .iter()
            .copied()
            .chain([inputs[1].shape()[1], dim])
            .collect::<Vec<_>>();
        let mut carry = vec![
            inputs[1].permute(&HEAD_MAJOR)?,
            inputs[2].permute(&HEAD_MAJOR)?,
            Array::zeros(&kshape),
            Array::zeros(&kshape),
        ];
        let q_pos = &self.positions[me];
        let mut src = me;
        for step in 0..n {
            let (k, v) = (&carry[0], &carry[1]);
            let s = scores(&q, k, q_pos, &self.positions[src], self.causal)?;
            let p = s.broadcast_with(&lse, "ring_backward", |s, lse| {
                if s == f64::NEG_INFINITY || lse == f64::NEG_INFINITY {
                    0.0
                } else {
                    (s - lse).exp()
                }
            })?;
            let dv = p.transpose_last()?.matmul(&d_o)?;
            let dp = d_o.matmul(&v.transpose_last()?)?;
            let ds = dp.broadcast_with(&delta, "ring_backward", |a, b| a - b)?.mul(&p)?;
            dq.add_assign(&ds.matmul(k)?.scale(scale))?;
            let dk = ds.transpose_last()?.matmul(&q)?.scale(scale);
            carry[2].add_assign(&dk)?;
            carry[3].add_assign(&dv)?;
            if step + 1 < n {
                carry = self.comm.ring_shift(&self.group, &carry, false)?;
                src = prev(src, n);
            }
        }
        let mut dkv = carry.split_off(2);
        if n > 1 {
            dkv = self.comm.ring_shift(&self.group, &dkv, false)?;
        }
        Ok(vec![
            Some(dq.permute(&HEAD_MAJOR)?),
            Some(dkv[0].permute(&HEAD_MAJOR)?),
            Some(dkv[1].permute(&HEAD_MAJOR)?),
        ])
    }
}
