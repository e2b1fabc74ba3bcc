//! Sharded SFT and DPO objectives.
//!
//! Log-probability sums are kept as exact limb accumulators until after the
//! cross-rank reduction, so the reduced sums do not depend on how the
//! sequence was split.

use serde::{Deserialize, Serialize};

use crate::comm::{all_reduce_grad_aware, all_reduce_plain, Comm, CommGroup};
use crate::error::{Error, Result};
use crate::partition::IGNORE_INDEX;
use crate::tensor::{exact_sum_value, softplus, Array, Tensor};

/// Which all-reduce carries the differentiable terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceKind {
    /// Backward also all-reduces the upstream gradient.
    #[default]
    GradAware,
    /// Backward passes the gradient through unchanged.
    Plain,
}

/// How the summed SFT negative log-likelihood is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SftNormalization {
    /// Global NLL sum over the global supervised-token count.
    #[default]
    GlobalMean,
    /// Mean over ranks of each rank's own token mean.
    PerRankMean,
}

/// Local sum of supervised-token log-probabilities as a `[LIMBS]` accumulator.
#[derive(Clone, Debug)]
pub struct LocalLogProb {
    pub sum: Tensor,
    pub count: usize,
}

impl LocalLogProb {
    pub fn value(&self) -> f64 {
        exact_sum_value(self.sum.value().data())
    }
}

/// Sum over supervised rows of `log_softmax(logits)[target]`.
///
/// `logits` is `[len, vocab]` (a leading batch axis of one is accepted);
/// targets equal to [`IGNORE_INDEX`] are skipped. Ignored rows still sit on
/// the tape with weight zero so every rank records the same collectives.
pub fn sequence_logprob(logits: &Tensor, targets: &[i64]) -> Result<LocalLogProb> {
    let shape = logits.shape();
    let vocab = *shape.last().ok_or_else(|| Error::invalid("sequence_logprob", "scalar logits"))?;
    let rows = logits.value().numel() / vocab.max(1);
    if rows != targets.len() {
        return Err(Error::invalid(
            "sequence_logprob",
            format!("{} targets for {rows} logit rows", targets.len()),
        ));
    }
    let logits = logits.reshape(&[rows, vocab])?;
    let mut idx = Vec::with_capacity(rows);
    let mut keep = Vec::with_capacity(rows);
    for &t in targets {
        if t == IGNORE_INDEX {
            idx.push(0);
            keep.push(0.0);
        } else if t < 0 || t as usize >= vocab {
            return Err(Error::invalid("sequence_logprob", format!("label {t} outside vocabulary {vocab}")));
        } else {
            idx.push(t as usize);
            keep.push(1.0);
        }
    }
    let count = keep.iter().filter(|&&k| k == 1.0).count();
    let picked = logits.log_softmax_lastdim()?.pick_lastdim(&idx)?;
    let mask = logits.tape().constant(Array::from_vec(keep));
    Ok(LocalLogProb {
        sum: picked.mul(&mask)?.exact_sum()?,
        count,
    })
}

fn reduce(comm: &Comm, group: &CommGroup, x: &Tensor, kind: ReduceKind) -> Result<Tensor> {
    match kind {
        ReduceKind::GradAware => all_reduce_grad_aware(comm, group, x),
        ReduceKind::Plain => all_reduce_plain(comm, group, x),
    }
}

fn reduce_count(comm: &Comm, group: &CommGroup, count: usize) -> Result<usize> {
    Ok(comm.all_reduce(group, &Array::scalar(count as f64))?.item() as usize)
}

/// Token-mean NLL over the whole group; the same value on every rank.
pub fn sft_loss_sharded(
    comm: &Comm,
    group: &CommGroup,
    local: &LocalLogProb,
    reduce_kind: ReduceKind,
    norm: SftNormalization,
) -> Result<Tensor> {
    match norm {
        SftNormalization::GlobalMean => {
            let total = reduce(comm, group, &local.sum, reduce_kind)?.exact_round()?;
            let count = reduce_count(comm, group, local.count)?;
            if count == 0 {
                return Err(Error::NoSupervisedTokens);
            }
            total.scale(-1.0 / count as f64)
        }
        SftNormalization::PerRankMean => {
            if reduce_count(comm, group, local.count)? == 0 {
                return Err(Error::NoSupervisedTokens);
            }
            let mean = local.sum.exact_round()?.scale(-1.0 / local.count.max(1) as f64)?;
            let total = reduce(comm, group, &mean, reduce_kind)?;
            total.scale(1.0 / group.size() as f64)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    pub lr: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig { beta: 0.1, lr: 0.05 }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta.is_nan() || self.beta <= 0.0 {
            return Err(Error::Config(format!("dpo beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Per-rank log-probability sums for one preference pair.
#[derive(Clone, Debug)]
pub struct ShardedLossParts {
    pub policy_chosen: LocalLogProb,
    pub policy_rejected: LocalLogProb,
    pub reference_chosen: LocalLogProb,
    pub reference_rejected: LocalLogProb,
}

/// DPO loss and the four reduced sums it was computed from.
#[derive(Clone, Debug)]
pub struct DpoOutput {
    pub loss: Tensor,
    /// Reduced `[policy_chosen, policy_rejected, reference_chosen, reference_rejected]`.
    pub sums: [f64; 4],
}

/// `-log sigmoid(beta * margin)` evaluated as `softplus(-beta * margin)`.
pub fn dpo_loss_value(policy_chosen: f64, policy_rejected: f64, ref_chosen: f64, ref_rejected: f64, beta: f64) -> f64 {
    let margin = (policy_chosen - ref_chosen) - (policy_rejected - ref_rejected);
    softplus(-beta * margin)
}

fn dpo_from_scalars(pc: &Tensor, pr: &Tensor, rc: f64, rr: f64, beta: f64) -> Result<Tensor> {
    let margin = pc.sub(pr)?.add_scalar(rr - rc)?;
    margin.scale(-beta)?.softplus()
}

/// Reduces each of the four sums across the group, then applies the sigmoid.
pub fn dpo_loss_sharded(
    comm: &Comm,
    group: &CommGroup,
    parts: &ShardedLossParts,
    beta: f64,
    reduce_kind: ReduceKind,
) -> Result<DpoOutput> {
    DpoConfig { beta, lr: 0.0 }.validate()?;
    let pc = reduce(comm, group, &parts.policy_chosen.sum, reduce_kind)?.exact_round()?;
    let pr = reduce(comm, group, &parts.policy_rejected.sum, reduce_kind)?.exact_round()?;
    let rc = exact_sum_value(comm.all_reduce(group, &parts.reference_chosen.sum.value())?.data());
    let rr = exact_sum_value(comm.all_reduce(group, &parts.reference_rejected.sum.value())?.data());
    let loss = dpo_from_scalars(&pc, &pr, rc, rr, beta)?;
    Ok(DpoOutput {
        loss,
        sums: [pc.item(), pr.item(), rc, rr],
    })
}

/// Negative control: applies the sigmoid to each rank's partial sums and
/// averages the per-rank losses afterwards.
pub fn wrong_order_dpo(comm: &Comm, group: &CommGroup, parts: &ShardedLossParts, beta: f64) -> Result<Tensor> {
    DpoConfig { beta, lr: 0.0 }.validate()?;
    let pc = parts.policy_chosen.sum.exact_round()?;
    let pr = parts.policy_rejected.sum.exact_round()?;
    let local = dpo_from_scalars(
        &pc,
        &pr,
        parts.reference_chosen.value(),
        parts.reference_rejected.value(),
        beta,
    )?;
    all_reduce_grad_aware(comm, group, &local)?.scale(1.0 / group.size() as f64)
}
