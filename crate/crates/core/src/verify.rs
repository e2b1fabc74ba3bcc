//! Oracle comparisons and closed-form communication volumes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attention, oracle_attention, padded_head_count, select_insp, AttentionConfig, EngineKind, SeqGroup,
};
use crate::comm::{CommFabric, CommStats, Primitive, Scheduler};
use crate::error::Result;
use crate::partition::ShardLayout;
use crate::tensor::{Array, Tape};

/// Engine output and gradients against the oracle on one random problem.
#[derive(Clone, Debug)]
pub struct ParityOutcome {
    pub out_diff: f64,
    /// Largest gradient difference over q, k and v.
    pub grad_diff: f64,
    pub stats: CommStats,
}

/// Random `[bs, len, heads, dim]` inputs with a random upstream gradient.
#[derive(Clone, Debug)]
pub struct AttentionProblem {
    pub q: Array,
    pub k: Array,
    pub v: Array,
    pub d_out: Array,
}

type Grads = [Array; 3];

impl AttentionProblem {
    pub fn random(cfg: &AttentionConfig, bs: usize, len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qs = [bs, len, cfg.hs, cfg.dim];
        let ks = [bs, len, cfg.kv_hs, cfg.dim];
        AttentionProblem {
            q: Array::random_uniform(&qs, -2.0, 2.0, &mut rng),
            k: Array::random_uniform(&ks, -2.0, 2.0, &mut rng),
            v: Array::random_uniform(&ks, -2.0, 2.0, &mut rng),
            d_out: Array::random_uniform(&qs, -1.0, 1.0, &mut rng),
        }
    }

    pub fn len(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Oracle output and `[dq, dk, dv]` for the loss `sum(out * d_out)`.
    pub fn oracle(&self, causal: bool) -> Result<(Array, Grads)> {
        let tape = Tape::new();
        let [q, k, v] = [&self.q, &self.k, &self.v].map(|a| tape.param(a.clone()));
        let pos: Vec<usize> = (0..self.len()).collect();
        let o = oracle_attention(&q, &k, &v, &pos, &pos, causal)?;
        o.mul(&tape.constant(self.d_out.clone()))?.sum_all()?.backward()?;
        let grads = [&q, &k, &v].map(|t| t.grad().expect("param grad"));
        Ok((o.to_array(), grads))
    }

    /// Runs the configured engine on `cfg.sp` ranks; returns the gathered
    /// output, gathered gradients and the fabric counters.
    pub fn sharded(&self, cfg: &AttentionConfig, scheduler: Scheduler) -> Result<(Array, Grads, CommStats)> {
        cfg.validate()?;
        let layout = ShardLayout::new(cfg.layout_mode(), self.len(), cfg.sp)?;
        let fabric = CommFabric::init_groups(cfg.sp, cfg.sp)?.with_scheduler(scheduler);
        let shards = fabric.run(|ctx| {
            let idx = layout.indices(ctx.group_rank());
            let tape = Tape::new();
            let q = tape.param(self.q.index_select(1, idx)?);
            let k = tape.param(self.k.index_select(1, idx)?);
            let v = tape.param(self.v.index_select(1, idx)?);
            let sg = SeqGroup::new(&ctx, &layout);
            let o = attention(cfg, &sg, &q, &k, &v)?;
            let d_out = tape.constant(self.d_out.index_select(1, idx)?);
            o.mul(&d_out)?.sum_all()?.backward()?;
            let grad = |t: &crate::tensor::Tensor| t.grad().unwrap_or_else(|| Array::zeros(&t.shape()));
            Ok([o.to_array(), grad(&q), grad(&k), grad(&v)])
        })?;
        let column = |i: usize| -> Result<Array> {
            let parts: Vec<Array> = shards.iter().map(|s| s[i].clone()).collect();
            layout.gather_array(&parts, 1)
        };
        Ok((column(0)?, [column(1)?, column(2)?, column(3)?], fabric.report()))
    }

    pub fn parity(&self, cfg: &AttentionConfig, scheduler: Scheduler) -> Result<ParityOutcome> {
        let (o_ref, g_ref) = self.oracle(cfg.causal)?;
        let (o, g, stats) = self.sharded(cfg, scheduler)?;
        let grad_diff = g
            .iter()
            .zip(&g_ref)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max);
        Ok(ParityOutcome {
            out_diff: o.max_abs_diff(&o_ref),
            grad_diff,
            stats,
        })
    }
}

/// Per-rank bytes one forward and backward attention call should move, by primitive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClosedFormBytes {
    pub all_to_all: u64,
    pub all_gather: u64,
    pub p2p: u64,
}

impl ClosedFormBytes {
    pub fn total(&self) -> u64 {
        self.all_to_all + self.all_gather + self.p2p
    }

    /// Measured rank bytes for the same primitives.
    pub fn measured(stats: &CommStats, rank: usize) -> Self {
        ClosedFormBytes {
            all_to_all: stats.get(rank, Primitive::AllToAll).bytes,
            all_gather: stats.get(rank, Primitive::AllGather).bytes,
            p2p: stats.get(rank, Primitive::P2p).bytes,
        }
    }
}

/// Send-side model: 8 all-to-alls of the local activation for Ulysses-type
/// engines, 6 all-gather volumes of `insp - 1` shards for Xtuner, and
/// `6 n - 4` kv-chunk hops for a ring of `n`. Heads count after kv repetition
/// and dummy padding.
pub fn closed_form_bytes(cfg: &AttentionConfig, bs: usize, len: usize, elem: u64) -> Result<ClosedFormBytes> {
    let sp = cfg.sp as u64;
    let local = |heads: usize| (bs * len * heads * cfg.dim) as u64 / sp * elem;
    let a2a = |heads: usize, n: u64| 8 * local(heads) * (n - 1) / n;
    let mut out = ClosedFormBytes::default();
    match cfg.engine {
        EngineKind::Oracle => {}
        EngineKind::Ulysses => out.all_to_all = a2a(cfg.hs, sp),
        EngineKind::DummyHead => out.all_to_all = a2a(padded_head_count(cfg.hs, cfg.sp), sp),
        EngineKind::Xtuner => {
            let insp = match cfg.insp {
                Some(i) => i,
                None => select_insp(cfg.hs, cfg.dim, cfg.sp)?,
            } as u64;
            out.all_to_all = a2a(cfg.hs, sp);
            out.all_gather = 6 * local(cfg.hs) * (insp - 1);
        }
        EngineKind::RingZigzag => {
            if sp > 1 {
                out.p2p = (6 * sp - 4) * local(cfg.hs);
            }
        }
        EngineKind::Usp => {
            let (u, r) = (cfg.ulysses_degree, cfg.ring_degree as u64);
            let heads = if cfg.pad_heads { padded_head_count(cfg.hs, u) } else { cfg.hs };
            out.all_to_all = a2a(heads, u as u64);
            if r > 1 {
                out.p2p = (6 * r - 4) * local(heads);
            }
        }
    }
    Ok(out)
}

/// Reference asymptotic volume coefficient, in units of `bs * len * d`.
pub fn asymptotic_coefficient(cfg: &AttentionConfig) -> Result<f64> {
    let n = cfg.sp as f64;
    Ok(match cfg.engine {
        EngineKind::Oracle => 0.0,
        EngineKind::Ulysses => 8.0 / n,
        EngineKind::DummyHead => 8.0 / n * padded_head_count(cfg.hs, cfg.sp) as f64 / cfg.hs as f64,
        EngineKind::Xtuner => {
            let insp = match cfg.insp {
                Some(i) => i,
                None => select_insp(cfg.hs, cfg.dim, cfg.sp)?,
            };
            8.0 / n + 3.0 / insp as f64
        }
        EngineKind::RingZigzag => 4.0,
        EngineKind::Usp => (8.0 + 4.0 * cfg.ring_degree as f64) / n,
    })
}
