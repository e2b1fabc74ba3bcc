//! A tiny decoder-only RoPE transformer with a pluggable attention engine.

mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use train::{
    evaluate_gradients, run_training, step_gradients, synthetic_dpo, synthetic_sft, Dataset, GradEval, StepGrads,
    StepReport, Task, TrainerConfig, TrainingRun,
};

use crate::attention::{attention, AttentionConfig, EngineKind, SeqGroup};
use crate::error::{Error, Result};
use crate::tensor::{Array, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub layers: usize,
    pub hidden: usize,
    pub hs: usize,
    pub kv_hs: usize,
    pub dim: usize,
    /// MLP width as a multiple of `hidden`.
    pub mlp_ratio: usize,
    pub norm_eps: f64,
    /// Standard deviation of the normal weight init.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 64,
            layers: 2,
            hidden: 48,
            hs: 6,
            kv_hs: 6,
            dim: 8,
            mlp_ratio: 2,
            norm_eps: 1e-6,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [self.vocab, self.hidden, self.hs, self.kv_hs, self.dim, self.mlp_ratio];
        if extents.contains(&0) {
            return Err(Error::Config("model extents must be positive".into()));
        }
        if self.hidden != self.hs * self.dim {
            return Err(Error::Config(format!(
                "hidden {} != hs {} x dim {}",
                self.hidden, self.hs, self.dim
            )));
        }
        if self.hs % self.kv_hs != 0 {
            return Err(Error::Config(format!("hs={} is not a multiple of kv_hs={}", self.hs, self.kv_hs)));
        }
        if self.dim % 2 != 0 {
            return Err(Error::OddLastDim(self.dim));
        }
        if !(self.norm_eps > 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::Config("norm_eps must be positive and init_std non-negative".into()));
        }
        Ok(())
    }

    pub fn mlp_width(&self) -> usize {
        self.hidden * self.mlp_ratio
    }

    pub fn attention_config(&self, engine: EngineKind, sp: usize) -> AttentionConfig {
        AttentionConfig::new(engine, self.hs, self.kv_hs, self.dim, sp)
    }

    /// Parameter names and shapes in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, v, m) = (self.hidden, self.vocab, self.mlp_width());
        let (q, kv) = (self.hs * self.dim, self.kv_hs * self.dim);
        let mut out = vec![("embed".to_string(), vec![v, h])];
        for l in 0..self.layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.extend([
                (p("attn_norm"), vec![h]),
                (p("wq"), vec![h, q]),
                (p("wk"), vec![h, kv]),
                (p("wv"), vec![h, kv]),
                (p("wo"), vec![q, h]),
                (p("mlp_norm"), vec![h]),
                (p("w_gate"), vec![h, m]),
                (p("w_up"), vec![h, m]),
                (p("w_down"), vec![m, h]),
            ]);
        }
        out.push(("lm_head".to_string(), vec![h, v]));
        out
    }
}

const PER_LAYER: usize = 9;

/// Full model weights; every rank holds a complete replica.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub names: Vec<String>,
    pub arrays: Vec<Array>,
}

impl Weights {
    /// Seeded `N(0, init_std)` init over the full shapes; norm gains start at one.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (names, arrays) = cfg
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let a = if name.ends_with("norm") {
                    Array::ones(&shape)
                } else {
                    Array::random_normal(&shape, cfg.init_std, &mut rng)
                };
                (name, a)
            })
            .unzip();
        Ok(Weights { names, arrays })
    }

    pub fn num_params(&self) -> usize {
        self.arrays.iter().map(Array::numel).sum()
    }

    pub fn flatten(&self) -> Array {
        Array::from_vec(self.arrays.iter().flat_map(|a| a.data().iter().copied()).collect())
    }

    /// Splits a flat vector back into arrays shaped like `self`.
    pub fn unflatten(&self, flat: &Array) -> Result<Vec<Array>> {
        if flat.numel() != self.num_params() {
            return Err(Error::invalid(
                "unflatten",
                format!("{} values for {} parameters", flat.numel(), self.num_params()),
            ));
        }
        let mut at = 0;
        self.arrays
            .iter()
            .map(|a| {
                let n = a.numel();
                at += n;
                Array::new(a.shape().to_vec(), flat.data()[at - n..at].to_vec())
            })
            .collect()
    }

    /// Puts every array on `tape`, as parameters or as constants.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Params {
        let tensors = self
            .arrays
            .iter()
            .map(|a| tape.leaf(a.clone(), trainable))
            .collect();
        Params { tensors }
    }
}

/// Weights living on one tape.
#[derive(Clone, Debug)]
pub struct Params {
    pub tensors: Vec<Tensor>,
}

impl Params {
    /// Gradients in storage order; parameters the loss never touched get zeros.
    pub fn grads(&self) -> Vec<Array> {
        self.tensors
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| Array::zeros(&t.shape())))
            .collect()
    }
}

fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    let axis = x.shape().len() - 1;
    let inv = x.square()?.mean_axis(axis)?.add_scalar(eps)?.powf(-0.5)?;
    x.mul(&inv)?.mul(gain)
}

/// Logits `[1, local_len, vocab]` for this rank's tokens.
///
/// `position_ids` are the global positions of `tokens`; they may only be
/// omitted when the group has a single rank.
pub fn forward(
    cfg: &ModelConfig,
    params: &Params,
    tokens: &[u32],
    position_ids: Option<&[usize]>,
    attn: &AttentionConfig,
    sg: &SeqGroup,
) -> Result<Tensor> {
    let ids: Vec<usize> = match position_ids {
        Some(p) => p.to_vec(),
        None if sg.size() == 1 => (0..tokens.len()).collect(),
        None => {
            return Err(Error::Config(format!(
                "position ids are required with {} ranks per sequence",
                sg.size()
            )))
        }
    };
    forward_inner(cfg, params, tokens, &ids, attn, sg)
}

/// Runs the model with local `0..len` position ids regardless of the group
/// size. Only for demonstrating what goes wrong without global ids.
#[doc(hidden)]
pub fn forward_with_local_ids(
    cfg: &ModelConfig,
    params: &Params,
    tokens: &[u32],
    attn: &AttentionConfig,
    sg: &SeqGroup,
) -> Result<Tensor> {
    let ids: Vec<usize> = (0..tokens.len()).collect();
    forward_inner(cfg, params, tokens, &ids, attn, sg)
}

fn forward_inner(
    cfg: &ModelConfig,
    params: &Params,
    tokens: &[u32],
    ids: &[usize],
    attn: &AttentionConfig,
    sg: &SeqGroup,
) -> Result<Tensor> {
    let want = cfg.param_shapes().len();
    if params.tensors.len() != want {
        return Err(Error::Config(format!("{} parameter tensors, model needs {want}", params.tensors.len())));
    }
    if ids.len() != tokens.len() {
        return Err(Error::invalid(
            "forward",
            format!("{} position ids for {} tokens", ids.len(), tokens.len()),
        ));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::invalid("forward", format!("token {t} outside vocabulary {}", cfg.vocab)));
    }
    let len = tokens.len();
    let p = &params.tensors;
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let mut x = p[0].index_select(0, &idx)?.reshape(&[1, len, cfg.hidden])?;
    for l in 0..cfg.layers {
        let w = &p[1 + l * PER_LAYER..1 + (l + 1) * PER_LAYER];
        let h = rms_norm(&x, &w[0], cfg.norm_eps)?;
        let heads = |m: &Tensor, n: usize| h.matmul(m)?.reshape(&[1, len, n, cfg.dim]);
        let q = heads(&w[1], cfg.hs)?.rope(ids, 1)?;
        let k = heads(&w[2], cfg.kv_hs)?.rope(ids, 1)?;
        let v = heads(&w[3], cfg.kv_hs)?;
        let o = attention(attn, sg, &q, &k, &v)?.reshape(&[1, len, cfg.hs * cfg.dim])?;
        x = x.add(&o.matmul(&w[4])?)?;
        let h = rms_norm(&x, &w[5], cfg.norm_eps)?;
        let gated = h.matmul(&w[6])?.silu()?.mul(&h.matmul(&w[7])?)?;
        x = x.add(&gated.matmul(&w[8])?)?;
    }
    x.matmul(&p[p.len() - 1])
}
