//! Sequence-parallel attention engines and the single-device oracle.
//!
//! Every engine takes per-rank shards shaped `[bs, len / sp, heads, dim]`
//! plus the global positions each group member holds, and returns this
//! rank's output shard in the same layout.

mod block;
mod engines;
mod ring;

use serde::{Deserialize, Serialize};

pub use block::{block_attention_piece, causal_mask, combine_pieces, unmasked_pairs, BlockPiece};
pub use engines::{
    dummy_head_ulysses, pad_heads, pad_heads_with, padded_head_count, ring_attention_zigzag, select_insp,
    ulysses_attention, unpad_heads, usp_attention, usp_layout_matches, xtuner_ulysses,
};

use crate::comm::{Comm, CommGroup, RankCtx};
use crate::error::{Error, Result};
use crate::partition::{LayoutMode, ShardLayout};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Oracle,
    Ulysses,
    DummyHead,
    Xtuner,
    RingZigzag,
    Usp,
}

impl EngineKind {
    pub const ALL: [EngineKind; 6] = [
        EngineKind::Oracle,
        EngineKind::Ulysses,
        EngineKind::DummyHead,
        EngineKind::Xtuner,
        EngineKind::RingZigzag,
        EngineKind::Usp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EngineKind::Oracle => "oracle",
            EngineKind::Ulysses => "ulysses",
            EngineKind::DummyHead => "dummy_head",
            EngineKind::Xtuner => "xtuner",
            EngineKind::RingZigzag => "ring_zigzag",
            EngineKind::Usp => "usp",
        }
    }
}

impl std::fmt::Display for EngineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EngineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EngineKind::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown engine '{s}' (oracle|ulysses|dummy_head|xtuner|ring_zigzag|usp)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub hs: usize,
    pub kv_hs: usize,
    pub dim: usize,
    pub causal: bool,
    pub engine: EngineKind,
    pub sp: usize,
    /// Inner Ulysses degree for `usp`.
    pub ulysses_degree: usize,
    /// Outer ring degree for `usp`.
    pub ring_degree: usize,
    /// Xtuner inner degree; chosen automatically when `None`.
    pub insp: Option<usize>,
    /// Let `usp` pad heads when `hs` is not divisible by the Ulysses degree.
    pub pad_heads: bool,
}

impl AttentionConfig {
    /// Causal config; `usp` uses a ring degree of 2 when `sp` is even and at
    /// least 4, otherwise 1.
    pub fn new(engine: EngineKind, hs: usize, kv_hs: usize, dim: usize, sp: usize) -> Self {
        let ring = if sp >= 4 && sp % 2 == 0 { 2 } else { 1 };
        AttentionConfig {
            hs,
            kv_hs,
            dim,
            causal: true,
            engine,
            sp,
            ulysses_degree: sp / ring,
            ring_degree: ring,
            insp: None,
            pad_heads: true,
        }
    }

    pub fn with_usp_degrees(mut self, ulysses: usize, ring: usize) -> Self {
        self.ulysses_degree = ulysses;
        self.ring_degree = ring;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hs == 0 || self.kv_hs == 0 || self.dim == 0 || self.sp == 0 {
            return Err(Error::Config("attention extents must be positive".into()));
        }
        if self.hs % self.kv_hs != 0 {
            return Err(Error::Config(format!(
                "hs={} is not a multiple of kv_hs={}",
                self.hs, self.kv_hs
            )));
        }
        if self.dim % 2 != 0 {
            return Err(Error::OddLastDim(self.dim));
        }
        if self.engine == EngineKind::Usp && self.ulysses_degree * self.ring_degree != self.sp {
            return Err(Error::Config(format!(
                "ulysses degree {} x ring degree {} != sp {}",
                self.ulysses_degree, self.ring_degree, self.sp
            )));
        }
        if self.engine == EngineKind::Oracle && self.sp != 1 {
            return Err(Error::Config("the oracle engine runs with sp = 1".into()));
        }
        Ok(())
    }

    /// Sequence layout the engine expects.
    pub fn layout_mode(&self) -> LayoutMode {
        match self.engine {
            EngineKind::RingZigzag => LayoutMode::Zigzag,
            EngineKind::Usp if self.ring_degree > 1 => LayoutMode::RingUlysses {
                ring: self.ring_degree,
            },
            _ => LayoutMode::Naive,
        }
    }
}

/// A rank's view of its sequence-parallel group for one attention call.
#[derive(Clone, Copy, Debug)]
pub struct SeqGroup<'a> {
    pub comm: &'a Comm,
    pub group: &'a CommGroup,
    /// Global positions held by each group member, in group order.
    pub positions: &'a [Vec<usize>],
    pub layout: LayoutMode,
}

impl<'a> SeqGroup<'a> {
    pub fn new(ctx: &'a RankCtx, layout: &'a ShardLayout) -> Self {
        SeqGroup {
            comm: &ctx.comm,
            group: &ctx.group,
            positions: layout.all_indices(),
            layout: layout.mode(),
        }
    }

    pub fn size(&self) -> usize {
        self.group.size()
    }

    /// Position of this rank in the group.
    pub fn index(&self) -> usize {
        self.group.index_of(self.comm.rank()).expect("rank belongs to its group")
    }

    pub fn local_positions(&self) -> &'a [usize] {
        &self.positions[self.index()]
    }
}

/// Repeats each key/value head `hs / kv_hs` times along axis 2.
pub fn repeat_kv(x: &Tensor, hs: usize) -> Result<Tensor> {
    let kv_hs = x.shape()[2];
    if kv_hs == hs {
        return Ok(x.clone());
    }
    if hs % kv_hs != 0 {
        return Err(Error::Config(format!("hs={hs} is not a multiple of kv_hs={kv_hs}")));
    }
    let rep = hs / kv_hs;
    let idx: Vec<usize> = (0..hs).map(|h| h / rep).collect();
    x.index_select(2, &idx)
}

/// Dense masked softmax attention on `[bs, len, heads, dim]` tensors.
pub(crate) fn local_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    q_pos: &[usize],
    k_pos: &[usize],
    causal: bool,
    flops: Option<&Comm>,
) -> Result<Tensor> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 4 || ks.len() != 4 || k.shape() != v.shape() || qs[2] != ks[2] || qs[3] != ks[3] {
        return Err(Error::shape("attention", &qs, &ks));
    }
    if q_pos.len() < qs[1] || k_pos.len() < ks[1] {
        return Err(Error::invalid(
            "attention",
            format!(
                "{} query / {} key positions for lengths {} / {}",
                q_pos.len(),
                k_pos.len(),
                qs[1],
                ks[1]
            ),
        ));
    }
    let (q_pos, k_pos) = (&q_pos[..qs[1]], &k_pos[..ks[1]]);
    let scale = 1.0 / (qs[3] as f64).sqrt();
    let s = q
        .permute(&[0, 2, 1, 3])?
        .matmul(&k.permute(&[0, 2, 3, 1])?)?
        .scale(scale)?;
    let mask = causal.then(|| causal_mask(q_pos, k_pos));
    let p = s.softmax_lastdim(mask.as_ref())?.probs;
    let o = p.matmul(&v.permute(&[0, 2, 1, 3])?)?;
    if let Some(comm) = flops {
        comm.add_flops(4 * (qs[0] * qs[2] * qs[3]) as u64 * unmasked_pairs(q_pos, k_pos, causal));
    }
    o.permute(&[0, 2, 1, 3])
}

/// Single-device attention: `softmax(q k^T / sqrt(dim) + mask) v` with the
/// causal mask decided on global positions.
pub fn oracle_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    q_pos: &[usize],
    k_pos: &[usize],
    causal: bool,
) -> Result<Tensor> {
    let hs = q.shape()[2];
    local_attention(q, &repeat_kv(k, hs)?, &repeat_kv(v, hs)?, q_pos, k_pos, causal, None)
}

/// Runs the configured engine on this rank's shards.
pub fn attention(cfg: &AttentionConfig, sg: &SeqGroup, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let hs = q.shape()[2];
    if hs != cfg.hs || k.shape()[2] != cfg.kv_hs {
        return Err(Error::Config(format!(
            "tensors carry {hs} query / {} kv heads, config says {} / {}",
            k.shape()[2],
            cfg.hs,
            cfg.kv_hs
        )));
    }
    if sg.size() != cfg.sp {
        return Err(Error::Config(format!("group of {} ranks, config sp = {}", sg.size(), cfg.sp)));
    }
    let (k, v) = (repeat_kv(k, hs)?, repeat_kv(v, hs)?);
    let causal = cfg.causal;
    match cfg.engine {
        EngineKind::Oracle => {
            if sg.size() != 1 {
                return Err(Error::Config("the oracle engine runs with sp = 1".into()));
            }
            let pos = sg.local_positions();
            local_attention(q, &k, &v, pos, pos, causal, Some(sg.comm))
        }
        EngineKind::Ulysses => ulysses_attention(sg, q, &k, &v, causal),
        EngineKind::DummyHead => dummy_head_ulysses(sg, q, &k, &v, causal),
        EngineKind::Xtuner => xtuner_ulysses(sg, q, &k, &v, causal, cfg.insp),
        EngineKind::RingZigzag => ring_attention_zigzag(sg, q, &k, &v, causal),
        EngineKind::Usp => usp_attention(
            sg,
            q,
            &k,
            &v,
            causal,
            cfg.ulysses_degree,
            cfg.ring_degree,
            cfg.pad_heads,
        ),
    }
}
