//! Blockwise attention with log-sum-exp state.
//!
//! Arrays here are head-major: `[bs, hs, len, dim]` for q/k/v and outputs,
//! `[bs, hs, len]` for per-row statistics.

use crate::error::{Error, Result};
use crate::tensor::Array;

/// Partial attention of a query block against one key block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockPiece {
    /// Unnormalized output `sum_j exp(s_ij - m_i) v_j`.
    pub num: Array,
    /// Row maximum of the unmasked scores, `-inf` when a row saw no key.
    pub m: Array,
    /// Row normalizer `sum_j exp(s_ij - m_i)`.
    pub l: Array,
}

/// Additive causal mask `[lq, lk]` on global positions: `-inf` where `k_pos > q_pos`.
pub fn causal_mask(q_pos: &[usize], k_pos: &[usize]) -> Array {
    let data = q_pos
        .iter()
        .flat_map(|&qp| k_pos.iter().map(move |&kp| if kp > qp { f64::NEG_INFINITY } else { 0.0 }))
        .collect();
    Array::new(vec![q_pos.len(), k_pos.len()], data).expect("mask shape")
}

/// Number of (query, key) pairs left unmasked.
pub fn unmasked_pairs(q_pos: &[usize], k_pos: &[usize], causal: bool) -> u64 {
    if !causal {
        return (q_pos.len() * k_pos.len()) as u64;
    }
    q_pos
        .iter()
        .map(|&qp| k_pos.iter().filter(|&&kp| kp <= qp).count() as u64)
        .sum()
}

/// Scaled, masked scores `[bs, hs, lq, lk]`.
pub(crate) fn scores(q: &Array, k: &Array, q_pos: &[usize], k_pos: &[usize], causal: bool) -> Result<Array> {
    let dim = q.shape()[3];
    let s = q.matmul(&k.transpose_last()?)?.scale(1.0 / (dim as f64).sqrt());
    if causal {
        s.add(&causal_mask(q_pos, k_pos))
    } else {
        Ok(s)
    }
}

fn check_qkv(q: &Array, k: &Array, v: &Array, q_pos: &[usize], k_pos: &[usize]) -> Result<()> {
    if q.ndim() != 4 || k.shape() != v.shape() || k.ndim() != 4 {
        return Err(Error::shape("block_attention", q.shape(), k.shape()));
    }
    let (qs, ks) = (q.shape(), k.shape());
    if qs[0] != ks[0] || qs[1] != ks[1] || qs[3] != ks[3] {
        return Err(Error::shape("block_attention", qs, ks));
    }
    if q_pos.len() != qs[2] || k_pos.len() != ks[2] {
        return Err(Error::invalid(
            "block_attention",
            format!("{} query / {} key positions for lengths {} / {}", q_pos.len(), k_pos.len(), qs[2], ks[2]),
        ));
    }
    Ok(())
}

/// Partial attention of `q` against `k`, `v` (head-major layout).
pub fn block_attention_piece(
    q: &Array,
    k: &Array,
    v: &Array,
    q_pos: &[usize],
    k_pos: &[usize],
    causal: bool,
) -> Result<BlockPiece> {
    check_qkv(q, k, v, q_pos, k_pos)?;
    let mut p = scores(q, k, q_pos, k_pos, causal)?;
    let lk = k.shape()[2];
    let rows = p.numel() / lk;
    let mut m = Vec::with_capacity(rows);
    let mut l = Vec::with_capacity(rows);
    for row in p.data_mut().chunks_mut(lk) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = if mx == f64::NEG_INFINITY { 0.0 } else { (*x - mx).exp() };
            s += *x;
        }
        m.push(mx);
        l.push(s);
    }
    let stat_shape = q.shape()[..3].to_vec();
    Ok(BlockPiece {
        num: p.matmul(v)?,
        m: Array::new(stat_shape.clone(), m)?,
        l: Array::new(stat_shape, l)?,
    })
}

impl BlockPiece {
    /// Piece that has seen no keys: the identity of [`combine_pieces`].
    pub fn empty(bs: usize, hs: usize, lq: usize, dim: usize) -> Self {
        BlockPiece {
            num: Array::zeros(&[bs, hs, lq, dim]),
            m: Array::full(&[bs, hs, lq], f64::NEG_INFINITY),
            l: Array::zeros(&[bs, hs, lq]),
        }
    }

    /// Normalized output and row log-sum-exp. Rows without keys give zeros and `-inf`.
    pub fn finalize(&self) -> (Array, Array) {
        let dim = *self.num.shape().last().unwrap();
        let mut out = self.num.clone();
        for (row, &l) in out.data_mut().chunks_mut(dim).zip(self.l.data()) {
            for x in row {
                *x = if l > 0.0 { *x / l } else { 0.0 };
            }
        }
        let lse = self.m.zip_map(&self.l, |m, l| m + l.ln()).expect("same shape");
        (out, lse)
    }
}

fn rescale(m: f64, m_new: f64) -> f64 {
    if m == f64::NEG_INFINITY {
        0.0
    } else {
        (m - m_new).exp()
    }
}

/// Log-sum-exp merge of two pieces over the same queries.
pub fn combine_pieces(a: &BlockPiece, b: &BlockPiece) -> Result<BlockPiece> {
    if a.num.shape() != b.num.shape() || a.m.shape() != b.m.shape() {
        return Err(Error::shape("combine_pieces", a.num.shape(), b.num.shape()));
    }
    let dim = *a.num.shape().last().unwrap();
    let rows = a.m.numel();
    let mut num = Array::zeros(a.num.shape());
    let mut m = Vec::with_capacity(rows);
    let mut l = Vec::with_capacity(rows);
    for r in 0..rows {
        let (ma, mb) = (a.m.data()[r], b.m.data()[r]);
        let mx = ma.max(mb);
        let (ca, cb) = (rescale(ma, mx), rescale(mb, mx));
        m.push(mx);
        l.push(a.l.data()[r] * ca + b.l.data()[r] * cb);
        let span = r * dim..(r + 1) * dim;
        for ((o, &x), &y) in num.data_mut()[span.clone()]
            .iter_mut()
            .zip(&a.num.data()[span.clone()])
            .zip(&b.num.data()[span])
        {
            *o = x * ca + y * cb;
        }
    }
    Ok(BlockPiece {
        num,
        m: Array::new(a.m.shape().to_vec(), m)?,
        l: Array::new(a.m.shape().to_vec(), l)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_uses_global_positions() {
        let m = causal_mask(&[0, 7], &[6, 0]);
        assert_eq!(m.data(), &[f64::NEG_INFINITY, 0.0, 0.0, 0.0]);
        assert_eq!(unmasked_pairs(&[0, 1, 6, 7], &[0, 1, 2, 3, 4, 5, 6, 7], true), 1 + 2 + 7 + 8);
    }

    #[test]
    fn fully_masked_block_is_identity() {
        let q = Array::ones(&[1, 1, 2, 2]);
        let k = Array::ones(&[1, 1, 2, 2]);
        let piece = block_attention_piece(&q, &k, &k, &[0, 1], &[5, 6], true).unwrap();
        assert!(piece.l.data().iter().all(|&l| l == 0.0));
        let own = block_attention_piece(&q, &k, &k, &[0, 1], &[0, 1], true).unwrap();
        assert_eq!(combine_pieces(&own, &piece).unwrap(), own);
    }
}
