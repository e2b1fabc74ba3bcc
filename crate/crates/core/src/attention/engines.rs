//! Head-parallel engines and their two-level combination.

use super::ring::ring_attention;
use super::{local_attention, SeqGroup};
use crate::comm::{all_gather, all_to_all};
use crate::error::{Error, Result};
use crate::partition::LayoutMode;
use crate::tensor::Tensor;

/// Heads after appending dummy heads: the next multiple of `sp`.
pub fn padded_head_count(hs: usize, sp: usize) -> usize {
    hs.div_ceil(sp) * sp
}

/// Appends zero heads along axis 2 until the head count divides `sp`.
pub fn pad_heads(x: &Tensor, sp: usize) -> Result<Tensor> {
    pad_heads_with(x, sp, 0.0)
}

/// [`pad_heads`] with an arbitrary fill value.
pub fn pad_heads_with(x: &Tensor, sp: usize, value: f64) -> Result<Tensor> {
    let hs = x.shape()[2];
    let extra = padded_head_count(hs, sp) - hs;
    if extra == 0 {
        return Ok(x.clone());
    }
    x.pad_axis(2, extra, value)
}

pub fn unpad_heads(x: &Tensor, hs: usize) -> Result<Tensor> {
    if x.shape()[2] == hs {
        return Ok(x.clone());
    }
    x.narrow(2, 0, hs)
}

fn check_heads(hs: usize, sp: usize) -> Result<()> {
    if hs % sp != 0 {
        return Err(Error::Divisibility {
            what: "attention head count",
            value: hs,
            by: sp,
        });
    }
    Ok(())
}

/// All-to-all from sequence shards to head shards, full-sequence attention on
/// `hs / sp` heads, and the inverse all-to-all.
pub fn ulysses_attention(sg: &SeqGroup, q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    let n = sg.size();
    check_heads(q.shape()[2], n)?;
    check_heads(k.shape()[2], n)?;
    let [qg, kg, vg] = [q, k, v].map(|t| all_to_all(sg.comm, sg.group, t, 2, 1));
    let pos = sg.positions.concat();
    let o = local_attention(&qg?, &kg?, &vg?, &pos, &pos, causal, Some(sg.comm))?;
    all_to_all(sg.comm, sg.group, &o, 1, 2)
}

/// Ulysses on zero-padded heads; works for any head count.
pub fn dummy_head_ulysses(sg: &SeqGroup, q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    let hs = q.shape()[2];
    let n = sg.size();
    let o = ulysses_attention(sg, &pad_heads(q, n)?, &pad_heads(k, n)?, &pad_heads(v, n)?, causal)?;
    unpad_heads(&o, hs)
}

/// Smallest inner degree with `hs * insp % sp == 0` and `dim % insp == 0`.
pub fn select_insp(hs: usize, dim: usize, sp: usize) -> Result<usize> {
    let insp = (1..=dim)
        .find(|&i| (hs * i) % sp == 0 && dim % i == 0)
        .ok_or_else(|| Error::Config(format!("no inner degree fits hs={hs}, dim={dim}, sp={sp}")))?;
    if sp % insp != 0 {
        return Err(Error::Config(format!(
            "inner degree {insp} for hs={hs}, dim={dim} does not tile sp={sp}"
        )));
    }
    Ok(insp)
}

/// Virtual-head Ulysses: every head is split into `insp` heads of
/// `dim / insp`, all-to-all'd, then reassembled by an all-gather over
/// `insp` neighbouring ranks that all compute the same heads.
pub fn xtuner_ulysses(
    sg: &SeqGroup,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    causal: bool,
    insp: Option<usize>,
) -> Result<Tensor> {
    let n = sg.size();
    let s = q.shape();
    let (bs, lloc, hs, dim) = (s[0], s[1], s[2], s[3]);
    let insp = match insp {
        Some(i) => {
            if i == 0 || dim % i != 0 || (hs * i) % n != 0 || n % i != 0 {
                return Err(Error::Config(format!("infeasible inner degree {i} for hs={hs}, dim={dim}, sp={n}")));
            }
            i
        }
        None => select_insp(hs, dim, n)?,
    };
    if insp == 1 {
        return ulysses_attention(sg, q, k, v, causal);
    }
    let vh = hs * insp;
    let per_rank = vh / n;
    let me = sg.index();
    let inner = sg.group.subgroup((me / insp * insp)..(me / insp * insp + insp));
    let len = lloc * n;
    let gathered = |t: &Tensor| -> Result<Tensor> {
        let t = t.reshape(&[bs, lloc, vh, dim / insp])?;
        let t = all_to_all(sg.comm, sg.group, &t, 2, 1)?;
        all_gather(sg.comm, &inner, &t, 2)?.reshape(&[bs, len, per_rank, dim])
    };
    let (qg, kg, vg) = (gathered(q)?, gathered(k)?, gathered(v)?);
    let pos = sg.positions.concat();
    let o = local_attention(&qg, &kg, &vg, &pos, &pos, causal, Some(sg.comm))?;
    let o = o
        .reshape(&[bs, len, per_rank * insp, dim / insp])?
        .narrow(2, (me % insp) * per_rank, per_rank)?;
    all_to_all(sg.comm, sg.group, &o, 1, 2)?.reshape(&[bs, lloc, hs, dim])
}

/// Zigzag ring attention. The group must hold a zigzag layout.
pub fn ring_attention_zigzag(sg: &SeqGroup, q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    let n = sg.size();
    if n == 1 {
        let pos = &sg.positions[0];
        return local_attention(q, k, v, pos, pos, causal, Some(sg.comm));
    }
    if sg.layout != LayoutMode::Zigzag {
        return Err(Error::Config(format!(
            "ring attention needs a zigzag layout, got {:?}",
            sg.layout
        )));
    }
    ring_attention(sg.comm, sg.group, sg.positions, q, k, v, causal)
}

/// Whether `layout` is the arrangement USP with ring degree `ring` expects.
pub fn usp_layout_matches(layout: LayoutMode, ulysses: usize, ring: usize) -> bool {
    match layout {
        LayoutMode::RingUlysses { ring: r } => r == ring,
        LayoutMode::Naive => ring == 1,
        LayoutMode::Zigzag => ulysses == 1,
    }
}

/// Ulysses inside groups of `ulysses` consecutive ranks, ring across the
/// strided groups. Heads are padded to a multiple of `ulysses` when `pad` is set.
#[allow(clippy::too_many_arguments)]
pub fn usp_attention(
    sg: &SeqGroup,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    causal: bool,
    ulysses: usize,
    ring: usize,
    pad: bool,
) -> Result<Tensor> {
    let n = sg.size();
    if ulysses * ring != n {
        return Err(Error::Config(format!(
            "ulysses degree {ulysses} x ring degree {ring} != sp {n}"
        )));
    }
    if n > 1 && !usp_layout_matches(sg.layout, ulysses, ring) {
        return Err(Error::Config(format!(
            "usp with ring degree {ring} cannot run on layout {:?}",
            sg.layout
        )));
    }
    let hs = q.shape()[2];
    let (q, k, v) = if hs % ulysses != 0 && pad {
        (pad_heads(q, ulysses)?, pad_heads(k, ulysses)?, pad_heads(v, ulysses)?)
    } else {
        check_heads(hs, ulysses)?;
        (q.clone(), k.clone(), v.clone())
    };
    let me = sg.index();
    let (i, j) = (me / ulysses, me % ulysses);
    let inner = sg.group.subgroup(i * ulysses..(i + 1) * ulysses);
    let outer = sg.group.subgroup((0..ring).map(|r| r * ulysses + j));
    let ring_pos: Vec<Vec<usize>> = sg
        .positions
        .chunks(ulysses)
        .map(|c| c.concat())
        .collect();
    let [qg, kg, vg] = [&q, &k, &v].map(|t| all_to_all(sg.comm, &inner, t, 2, 1));
    let (qg, kg, vg) = (qg?, kg?, vg?);
    let o = if ring == 1 {
        local_attention(&qg, &kg, &vg, &ring_pos[0], &ring_pos[0], causal, Some(sg.comm))?
    } else {
        ring_attention(sg.comm, &outer, &ring_pos, &qg, &kg, &vg, causal)?
    };
    let o = all_to_all(sg.comm, &inner, &o, 1, 2)?;
    unpad_heads(&o, hs)
}
