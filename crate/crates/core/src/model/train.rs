use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward, ModelConfig, Params, Weights};
use crate::attention::{AttentionConfig, EngineKind, SeqGroup};
use crate::comm::{CommFabric, RankCtx};
use crate::error::{Error, Result};
use crate::losses::{
    dpo_loss_sharded, sequence_logprob, sft_loss_sharded, DpoConfig, LocalLogProb, ReduceKind, SftNormalization,
    ShardedLossParts,
};
use crate::partition::{pad_batch, shard_batch, LayoutMode, PadTarget, PreferencePair, ShardLayout, TrainBatch, IGNORE_INDEX};
use crate::tensor::{Array, Tape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Sft,
    Dpo,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sft" => Ok(Task::Sft),
            "dpo" => Ok(Task::Dpo),
            other => Err(Error::Config(format!("unknown task '{other}' (sft|dpo)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub task: Task,
    pub engine: EngineKind,
    pub sp: usize,
    /// Sequence layout; the engine's preferred layout when absent.
    pub layout: Option<LayoutMode>,
    pub lr: f64,
    pub epochs: usize,
    pub grad_accumulation: usize,
    pub beta: f64,
    pub seed: u64,
    pub reduce: ReduceKind,
    pub sft_normalization: SftNormalization,
    /// `(ulysses, ring)` degrees for `usp`.
    pub usp_degrees: Option<(usize, usize)>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            task: Task::Sft,
            engine: EngineKind::Oracle,
            sp: 1,
            layout: None,
            lr: 1.0,
            epochs: 8,
            grad_accumulation: 8,
            beta: DpoConfig::default().beta,
            seed: 0,
            reduce: ReduceKind::GradAware,
            sft_normalization: SftNormalization::GlobalMean,
            usp_degrees: None,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grad_accumulation == 0 {
            return Err(Error::Config("grad_accumulation must be at least 1".into()));
        }
        if self.sp == 0 {
            return Err(Error::Config("sp must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.task == Task::Dpo {
            DpoConfig {
                beta: self.beta,
                lr: self.lr,
            }
            .validate()?;
        }
        Ok(())
    }

    pub fn attention_config(&self, model: &ModelConfig) -> Result<AttentionConfig> {
        let mut cfg = model.attention_config(self.engine, self.sp);
        if let Some((u, r)) = self.usp_degrees {
            cfg = cfg.with_usp_degrees(u, r);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn layout_mode(&self, attn: &AttentionConfig) -> LayoutMode {
        self.layout.unwrap_or_else(|| attn.layout_mode())
    }
}

/// Training samples for one task.
#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Sft(Vec<TrainBatch>),
    Dpo(Vec<PreferencePair>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Sft(v) => v.len(),
            Dataset::Dpo(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            Dataset::Sft(_) => Task::Sft,
            Dataset::Dpo(_) => Task::Dpo,
        }
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(1..vocab as u32)).collect()
}

fn supervised(tokens: Vec<u32>, prompt: usize) -> Result<TrainBatch> {
    let labels = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| if i < prompt { IGNORE_INDEX } else { t as i64 })
        .collect();
    TrainBatch::new(tokens, labels)
}

/// Memorization data: random prompts (unsupervised) followed by random responses.
pub fn synthetic_sft(n: usize, vocab: usize, seed: u64) -> Result<Dataset> {
    if vocab < 2 {
        return Err(Error::Config("synthetic data needs vocab >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| {
            let prompt = rng.random_range(3..7);
            let len = prompt + rng.random_range(5..15);
            supervised(random_tokens(&mut rng, len, vocab), prompt)
        })
        .collect::<Result<_>>()?;
    Ok(Dataset::Sft(samples))
}

/// Preference pairs sharing a prompt, with independent random responses.
pub fn synthetic_dpo(n: usize, vocab: usize, seed: u64) -> Result<Dataset> {
    if vocab < 2 {
        return Err(Error::Config("synthetic data needs vocab >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n)
        .map(|_| {
            let prompt_len = rng.random_range(3..7);
            let prompt = random_tokens(&mut rng, prompt_len, vocab);
            let side = |rng: &mut ChaCha8Rng| {
                let extra = rng.random_range(4..11);
                let mut t = prompt.clone();
                t.extend(random_tokens(rng, extra, vocab));
                supervised(t, prompt_len)
            };
            Ok(PreferencePair {
                chosen: side(&mut rng)?,
                rejected: side(&mut rng)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset::Dpo(pairs))
}

/// One optimizer step as seen by every rank.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Largest absolute parameter change made by the update.
    pub param_delta: f64,
    /// Reduced `[policy_chosen, policy_rejected, reference_chosen, reference_rejected]`
    /// per DPO pair in the step; empty for SFT.
    pub dpo_sums: Vec<[f64; 4]>,
}

/// Loss and synchronized gradients for one set of samples on one rank.
#[derive(Clone, Debug)]
pub struct StepGrads {
    pub loss: f64,
    /// Gradients averaged over the sequence-parallel group, flattened in storage order.
    pub grads: Array,
    pub dpo_sums: Vec<[f64; 4]>,
}

struct RankModel<'a> {
    ctx: &'a RankCtx,
    model: &'a ModelConfig,
    attn: AttentionConfig,
    layout: LayoutMode,
    trainer: &'a TrainerConfig,
}

impl RankModel<'_> {
    fn logprob(&self, params: &Params, batch: &TrainBatch) -> Result<LocalLogProb> {
        let sp = self.trainer.sp;
        let padded = pad_batch(batch, sp, 0, usize::MAX, PadTarget::NextMultiple)?;
        let layout = ShardLayout::new(self.layout, padded.len(), sp)?;
        let shard = shard_batch(&padded, &layout, self.ctx.group_rank())?;
        let sg = SeqGroup::new(self.ctx, &layout);
        let logits = forward(self.model, params, &shard.tokens, Some(&shard.position_ids), &self.attn, &sg)?;
        sequence_logprob(&logits, &shard.targets)
    }
}

/// Forward, sharded loss and backward over `samples`, then gradient averaging
/// across the group. `reference` is the frozen DPO reference model.
pub fn step_gradients(
    ctx: &RankCtx,
    model: &ModelConfig,
    trainer: &TrainerConfig,
    weights: &Weights,
    reference: &Weights,
    samples: &Dataset,
) -> Result<StepGrads> {
    if samples.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let attn = trainer.attention_config(model)?;
    let rm = RankModel {
        ctx,
        model,
        layout: trainer.layout_mode(&attn),
        attn,
        trainer,
    };
    let mut acc = Array::zeros(&[weights.num_params()]);
    let mut loss_sum = 0.0;
    let mut dpo_sums = Vec::new();
    let mut accumulate = |params: &Params, loss: &Tensor| -> Result<()> {
        loss.backward()?;
        loss_sum += loss.item();
        let flat = params.grads().iter().flat_map(|g| g.data().to_vec()).collect();
        acc.add_assign(&Array::from_vec(flat))
    };
    match samples {
        Dataset::Sft(batches) => {
            for b in batches {
                let params = weights.bind(&Tape::new(), true);
                let lp = rm.logprob(&params, b)?;
                let loss = sft_loss_sharded(&ctx.comm, &ctx.group, &lp, trainer.reduce, trainer.sft_normalization)?;
                accumulate(&params, &loss)?;
            }
        }
        Dataset::Dpo(pairs) => {
            for p in pairs {
                let tape = Tape::new();
                let (policy, frozen) = (weights.bind(&tape, true), reference.bind(&tape, false));
                let parts = ShardedLossParts {
                    policy_chosen: rm.logprob(&policy, &p.chosen)?,
                    policy_rejected: rm.logprob(&policy, &p.rejected)?,
                    reference_chosen: rm.logprob(&frozen, &p.chosen)?,
                    reference_rejected: rm.logprob(&frozen, &p.rejected)?,
                };
                let out = dpo_loss_sharded(&ctx.comm, &ctx.group, &parts, trainer.beta, trainer.reduce)?;
                dpo_sums.push(out.sums);
                accumulate(&policy, &out.loss)?;
            }
        }
    }
    let n = samples.len() as f64;
    let summed = ctx.comm.all_reduce(&ctx.group, &acc)?;
    Ok(StepGrads {
        loss: loss_sum / n,
        grads: summed.scale(1.0 / (n * ctx.sp() as f64)),
        dpo_sums,
    })
}

/// Loss, averaged gradients and DPO sums for one evaluation of `data`.
#[derive(Clone, Debug)]
pub struct GradEval {
    pub loss: f64,
    pub grads: Vec<Array>,
    pub dpo_sums: Vec<[f64; 4]>,
}

/// [`step_gradients`] on every rank of `fabric`, returning rank 0's view.
pub fn evaluate_gradients(
    model: &ModelConfig,
    trainer: &TrainerConfig,
    weights: &Weights,
    data: &Dataset,
    fabric: &CommFabric,
) -> Result<GradEval> {
    check_fabric(trainer, fabric)?;
    let out = fabric.run(|ctx| step_gradients(&ctx, model, trainer, weights, weights, data))?;
    let first = out.into_iter().next().ok_or_else(|| Error::Config("empty fabric".into()))?;
    Ok(GradEval {
        loss: first.loss,
        grads: weights.unflatten(&first.grads)?,
        dpo_sums: first.dpo_sums,
    })
}

fn check_fabric(trainer: &TrainerConfig, fabric: &CommFabric) -> Result<()> {
    if fabric.sp() != trainer.sp {
        return Err(Error::Config(format!(
            "fabric has sp = {}, trainer asks for {}",
            fabric.sp(),
            trainer.sp
        )));
    }
    Ok(())
}

/// Per-step reports and final weights of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingRun {
    pub steps: Vec<StepReport>,
    pub weights: Weights,
}

impl TrainingRun {
    /// `step,loss,grad_norm` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,grad_norm\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{:e},{:e}", r.step, r.loss, r.grad_norm);
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|r| r.loss).collect()
    }
}

/// Plain gradient descent over `epochs` passes of `data`, one update per
/// `grad_accumulation` samples.
pub fn run_training(
    model: &ModelConfig,
    trainer: &TrainerConfig,
    data: &Dataset,
    fabric: &CommFabric,
) -> Result<TrainingRun> {
    trainer.validate()?;
    check_fabric(trainer, fabric)?;
    if data.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    if data.task() != trainer.task {
        return Err(Error::Config(format!(
            "{:?} dataset given to a {:?} trainer",
            data.task(),
            trainer.task
        )));
    }
    let init = Weights::init(model)?;
    let runs = fabric.run(|ctx| {
        let mut weights = init.clone();
        let mut steps = Vec::new();
        for _ in 0..trainer.epochs {
            for chunk in 0..data.len().div_ceil(trainer.grad_accumulation) {
                let lo = chunk * trainer.grad_accumulation;
                let hi = (lo + trainer.grad_accumulation).min(data.len());
                let samples = match data {
                    Dataset::Sft(v) => Dataset::Sft(v[lo..hi].to_vec()),
                    Dataset::Dpo(v) => Dataset::Dpo(v[lo..hi].to_vec()),
                };
                let step = steps.len();
                let g = step_gradients(&ctx, model, trainer, &weights, &init, &samples)?;
                if !g.loss.is_finite() {
                    return Err(Error::Diverged { step, loss: g.loss });
                }
                let delta = g.grads.scale(trainer.lr);
                let flat = weights.flatten().sub(&delta)?;
                let next = weights.unflatten(&flat)?;
                let param_delta = weights
                    .arrays
                    .iter()
                    .zip(&next)
                    .map(|(a, b)| a.max_abs_diff(b))
                    .fold(0.0, f64::max);
                weights.arrays = next;
                steps.push(StepReport {
                    step,
                    loss: g.loss,
                    grad_norm: g.grads.norm_sq().sqrt(),
                    param_delta,
                    dpo_sums: g.dpo_sums,
                });
            }
        }
        Ok(TrainingRun { steps, weights })
    })?;
    let first = runs[0].clone();
    if runs.iter().any(|r| r.steps != first.steps) {
        return Err(Error::Collective("ranks reported different training curves".into()));
    }
    Ok(first)
}
