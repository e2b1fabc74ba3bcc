use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pitfall::{toy_gradients, toy_local_gradient};
use super::training::{max_loss_gap, DPO_GAP_TOLERANCE, SFT_GAP_TOLERANCE};
use super::{infeasibility, Command, CommandOutput, ExperimentSpec, ReportRow};
use crate::attention::{AttentionConfig, EngineKind, SeqGroup};
use crate::comm::CommFabric;
use crate::error::{Error, Result};
use crate::losses::ReduceKind;
use crate::model::{
    evaluate_gradients, forward, forward_with_local_ids, run_training, synthetic_dpo, synthetic_sft, Dataset,
    ModelConfig, Task, TrainerConfig, Weights,
};
use crate::partition::{LayoutMode, ShardLayout};
use crate::tensor::{Array, Precision, Tape};
use crate::verify::{closed_form_bytes, AttentionProblem, ClosedFormBytes};

pub const OUTPUT_TOLERANCE: f64 = 1e-10;
pub const GRAD_TOLERANCE: f64 = 1e-8;
pub const PARAM_GRAD_TOLERANCE: f64 = 1e-9;
pub const FD_TOLERANCE: f64 = 1e-5;
pub const WRONG_IDS_MIN_GAP: f64 = 1e-3;
/// Init scale at which attention depends visibly on position.
pub const POSITION_PROBE_INIT_STD: f64 = 0.1;

const PARITY_HEADS: [usize; 4] = [2, 4, 6, 14];
const PARITY_DIMS: [usize; 2] = [4, 8];

/// One engine on the attention parity grid: output and gradient rows plus
/// the byte count against the closed form, or the expected refusal.
pub fn parity_rows(spec: &ExperimentSpec, cfg: &AttentionConfig, len: usize) -> Vec<ReportRow> {
    let (engine, sp) = (cfg.engine, cfg.sp);
    let tag = format!("L{len}_hs{}_d{}", cfg.hs, cfg.dim);
    let problem = AttentionProblem::random(cfg, 1, len, spec.seed ^ (len * 131 + cfg.hs * 17 + cfg.dim) as u64);
    let outcome = problem.parity(cfg, spec.scheduler);
    if let Some(why) = infeasibility(cfg) {
        let ok = matches!(
            (&outcome, cfg.engine),
            (Err(Error::Divisibility { .. }), EngineKind::Ulysses | EngineKind::Usp)
                | (Err(Error::Config(_)), EngineKind::Xtuner)
        );
        return vec![ReportRow::expected_error(engine, sp, format!("{why}_{tag}"), ok)];
    }
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => return vec![ReportRow::failure(engine, sp, format!("parity_{tag}"), &e)],
    };
    let mut rows = vec![
        ReportRow::close(engine, sp, format!("output_{tag}"), outcome.out_diff, 0.0, OUTPUT_TOLERANCE),
        ReportRow::close(engine, sp, format!("grads_{tag}"), outcome.grad_diff, 0.0, GRAD_TOLERANCE),
    ];
    match closed_form_bytes(cfg, 1, len, Precision::F64.elem_bytes()) {
        Ok(expect) => {
            let gap = (0..sp)
                .map(|r| ClosedFormBytes::measured(&outcome.stats, r).total().abs_diff(expect.total()))
                .max()
                .unwrap_or(0);
            rows.push(ReportRow::close(engine, sp, format!("bytes_{tag}"), gap as f64, 0.0, 0.0));
        }
        Err(e) => rows.push(ReportRow::failure(engine, sp, format!("bytes_{tag}"), &e)),
    }
    rows
}

/// The full attention parity grid for the spec's engines and sp values.
pub fn parity_grid(spec: &ExperimentSpec) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for &engine in spec.engines.iter().filter(|e| **e != EngineKind::Oracle) {
        for &sp in &spec.sp_values {
            for &len in &spec.parity_lengths {
                for hs in PARITY_HEADS {
                    for dim in PARITY_DIMS {
                        let cfg = AttentionConfig::new(engine, hs, hs, dim, sp);
                        rows.extend(parity_rows(spec, &cfg, len));
                    }
                }
            }
        }
    }
    rows
}

fn gathered_logits(
    cfg: &ModelConfig,
    engine: EngineKind,
    sp: usize,
    tokens: &[u32],
    local_ids: bool,
    spec: &ExperimentSpec,
) -> Result<Array> {
    let weights = Weights::init(cfg)?;
    let attn = cfg.attention_config(engine, sp);
    let layout = ShardLayout::new(attn.layout_mode(), tokens.len(), sp)?;
    let fabric = CommFabric::init_groups(sp, sp)?.with_scheduler(spec.scheduler);
    let shards = fabric.run(|ctx| {
        let r = ctx.group_rank();
        let params = weights.bind(&Tape::new(), false);
        let sg = SeqGroup::new(&ctx, &layout);
        let local = layout.shard(tokens, r)?;
        let out = if local_ids {
            forward_with_local_ids(cfg, &params, &local, &attn, &sg)?
        } else {
            forward(cfg, &params, &local, Some(&layout.position_ids(r)), &attn, &sg)?
        };
        Ok(out.to_array())
    })?;
    layout.gather_array(&shards, 1)
}

fn probe_tokens(vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..32).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Global position ids reproduce single-device logits; local ones do not.
pub fn position_id_rows(spec: &ExperimentSpec, engine: EngineKind, sp: usize) -> Result<Vec<ReportRow>> {
    let probe = ModelConfig {
        init_std: POSITION_PROBE_INIT_STD,
        ..spec.model.clone()
    };
    let tokens = probe_tokens(probe.vocab, spec.seed);
    let base = gathered_logits(&probe, EngineKind::Oracle, 1, &tokens, false, spec)?;
    let global = gathered_logits(&probe, engine, sp, &tokens, false, spec)?.max_abs_diff(&base);
    let local = gathered_logits(&probe, engine, sp, &tokens, true, spec)?.max_abs_diff(&base);
    let mut rows = vec![
        ReportRow::close(engine, sp, "global_position_ids_vs_oracle", global, 0.0, OUTPUT_TOLERANCE),
        ReportRow::greater(engine, sp, "local_position_ids_vs_oracle", local, WRONG_IDS_MIN_GAP),
    ];
    let base = gathered_logits(&spec.model, EngineKind::Oracle, 1, &tokens, false, spec)?;
    let local = gathered_logits(&spec.model, engine, sp, &tokens, true, spec)?.max_abs_diff(&base);
    rows.push(ReportRow::info(engine, sp, "local_position_ids_vs_oracle_at_configured_init", local));
    Ok(rows)
}

fn model_parity_rows(spec: &ExperimentSpec, engine: EngineKind, sp: usize, base: &Array, tokens: &[u32]) -> Vec<ReportRow> {
    let attn = spec.model.attention_config(engine, sp);
    match gathered_logits(&spec.model, engine, sp, tokens, false, spec) {
        Ok(l) => vec![ReportRow::close(engine, sp, "model_logits_vs_oracle", l.max_abs_diff(base), 0.0, OUTPUT_TOLERANCE)],
        Err(e) if infeasibility(&attn).is_some() => vec![ReportRow::expected_error(
            engine,
            sp,
            "model_divisibility_error_expected",
            matches!(e, Error::Divisibility { .. } | Error::Config(_)),
        )],
        Err(e) => vec![ReportRow::failure(engine, sp, "model_logits", &e)],
    }
}

fn max_diff(a: &[Array], b: &[Array], scale: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(&y.scale(scale))).fold(0.0, f64::max)
}

/// Synchronized gradients against the single-device gradients for both reductions.
fn gradient_rows(spec: &ExperimentSpec, engine: EngineKind, sp: usize, data: &Dataset, oracle: &[Array]) -> Result<Vec<ReportRow>> {
    let weights = Weights::init(&spec.model)?;
    let fabric = CommFabric::init_groups(sp, sp)?.with_scheduler(spec.scheduler);
    let mut t = TrainerConfig {
        task: Task::Sft,
        engine,
        sp,
        layout: None,
        reduce: ReduceKind::GradAware,
        ..spec.trainer.clone()
    };
    let aware = evaluate_gradients(&spec.model, &t, &weights, data, &fabric)?;
    t.reduce = ReduceKind::Plain;
    let plain = evaluate_gradients(&spec.model, &t, &weights, data, &fabric)?;
    let norm = |g: &[Array]| g.iter().map(Array::norm_sq).sum::<f64>().sqrt();
    Ok(vec![
        ReportRow::close(engine, sp, "grad_aware_param_grads_vs_oracle", max_diff(&aware.grads, oracle, 1.0), 0.0, PARAM_GRAD_TOLERANCE),
        ReportRow::close(
            engine,
            sp,
            "plain_param_grads_vs_oracle_over_sp",
            max_diff(&plain.grads, oracle, 1.0 / sp as f64),
            0.0,
            PARAM_GRAD_TOLERANCE,
        ),
        ReportRow::close(engine, sp, "grad_norm_ratio", norm(&aware.grads) / norm(&plain.grads), sp as f64, 0.0),
    ])
}

fn short_trainer(spec: &ExperimentSpec, task: Task, engine: EngineKind, sp: usize) -> TrainerConfig {
    TrainerConfig {
        task,
        engine,
        sp,
        layout: None,
        epochs: 2,
        grad_accumulation: 2,
        reduce: ReduceKind::GradAware,
        usp_degrees: None,
        ..spec.trainer.clone()
    }
}

fn short_run(spec: &ExperimentSpec, t: &TrainerConfig, data: &Dataset) -> Result<crate::model::TrainingRun> {
    let fabric = CommFabric::init_groups(t.sp, t.sp)?.with_scheduler(spec.scheduler);
    run_training(&spec.model, t, data, &fabric)
}

/// Whole-model central differences on randomly chosen parameters.
pub fn finite_difference_error(spec: &ExperimentSpec, engine: EngineKind, sp: usize, n_params: usize) -> Result<f64> {
    let data = synthetic_sft(1, spec.model.vocab, spec.seed)?;
    let t = short_trainer(spec, Task::Sft, engine, sp);
    let fabric = CommFabric::init_groups(sp, sp)?.with_scheduler(spec.scheduler);
    let weights = Weights::init(&spec.model)?;
    let analytic = evaluate_gradients(&spec.model, &t, &weights, &data, &fabric)?.grads;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(99));
    let h = 1e-5;
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for _ in 0..n_params {
        let a = rng.random_range(0..weights.arrays.len());
        let j = rng.random_range(0..weights.arrays[a].numel());
        let mut w = weights.clone();
        w.arrays[a].data_mut()[j] += h;
        let up = evaluate_gradients(&spec.model, &t, &w, &data, &fabric)?.loss;
        w.arrays[a].data_mut()[j] -= 2.0 * h;
        let down = evaluate_gradients(&spec.model, &t, &w, &data, &fabric)?.loss;
        let numeric = (up - down) / (2.0 * h);
        diff += (numeric - analytic[a].data()[j]).powi(2);
        norm += numeric.powi(2);
    }
    Ok(diff.sqrt() / norm.sqrt().max(1e-300))
}

fn round_trip_rows(sp: usize) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    let len = 16 * sp;
    let seq: Vec<u32> = (0..len as u32).collect();
    let mut modes = vec![("naive", LayoutMode::Naive), ("zigzag", LayoutMode::Zigzag)];
    if sp % 2 == 0 {
        modes.push(("ring_ulysses", LayoutMode::RingUlysses { ring: 2 }));
    }
    for (name, mode) in modes {
        let ok = ShardLayout::new(mode, len, sp).and_then(|l| {
            let shards = (0..sp).map(|r| Ok((r, l.shard(&seq, r)?))).collect::<Result<Vec<_>>>()?;
            l.gather(&shards)
        });
        let same = ok.map(|g| g == seq).unwrap_or(false);
        rows.push(ReportRow::close(name, sp, "shard_gather_round_trip", same as u8 as f64, 1.0, 0.0));
    }
    rows
}

/// Engine parity, model parity, gradient synchronization, loss parity,
/// finite differences, round trips and the toy all-reduce gradients.
pub fn cmd_verify(spec: &ExperimentSpec) -> Result<CommandOutput> {
    let mut out = CommandOutput::default();
    out.rows.extend(parity_grid(spec));

    let tokens = probe_tokens(spec.model.vocab, spec.seed);
    let base_logits = gathered_logits(&spec.model, EngineKind::Oracle, 1, &tokens, false, spec)?;
    let grad_data = synthetic_sft(2, spec.model.vocab, spec.seed)?;
    let oracle_grads = {
        let t = short_trainer(spec, Task::Sft, EngineKind::Oracle, 1);
        let fabric = CommFabric::init_groups(1, 1)?;
        evaluate_gradients(&spec.model, &t, &Weights::init(&spec.model)?, &grad_data, &fabric)?.grads
    };
    let sft = synthetic_sft(4, spec.model.vocab, spec.seed)?;
    let dpo = synthetic_dpo(4, spec.model.vocab, spec.seed)?;
    let base_sft = short_run(spec, &short_trainer(spec, Task::Sft, EngineKind::Oracle, 1), &sft)?;
    let base_dpo = short_run(spec, &short_trainer(spec, Task::Dpo, EngineKind::Oracle, 1), &dpo)?;

    for &engine in spec.engines.iter().filter(|e| **e != EngineKind::Oracle) {
        for &sp in &spec.sp_values {
            out.rows.extend(model_parity_rows(spec, engine, sp, &base_logits, &tokens));
            if infeasibility(&spec.model.attention_config(engine, sp)).is_some() {
                continue;
            }
            let mut push = |rows: Result<Vec<ReportRow>>, what: &str| match rows {
                Ok(r) => out.rows.extend(r),
                Err(e) => out.rows.push(ReportRow::failure(engine, sp, what, &e)),
            };
            push(position_id_rows(spec, engine, sp), "position_ids");
            push(gradient_rows(spec, engine, sp, &grad_data, &oracle_grads), "gradients");
            for (task, data, base, tol) in [
                (Task::Sft, &sft, &base_sft, SFT_GAP_TOLERANCE),
                (Task::Dpo, &dpo, &base_dpo, DPO_GAP_TOLERANCE),
            ] {
                let name = if task == Task::Sft { "sft" } else { "dpo" };
                push(
                    short_run(spec, &short_trainer(spec, task, engine, sp), data)
                        .map(|r| vec![ReportRow::close(engine, sp, format!("{name}_loss_curve_gap"), max_loss_gap(&r, base), 0.0, tol)]),
                    name,
                );
            }
        }
    }

    let fd_sp = spec.sp_values[0];
    let fd_engine = [EngineKind::DummyHead, EngineKind::RingZigzag]
        .into_iter()
        .find(|e| spec.engines.contains(e))
        .unwrap_or(EngineKind::DummyHead);
    match finite_difference_error(spec, fd_engine, fd_sp, 12) {
        Ok(rel) => out.rows.push(ReportRow::close(fd_engine, fd_sp, "finite_difference_rel_error", rel, 0.0, FD_TOLERANCE)),
        Err(e) => out.rows.push(ReportRow::failure(fd_engine, fd_sp, "finite_difference", &e)),
    }

    for &sp in &spec.sp_values {
        out.rows.extend(round_trip_rows(sp));
        if let Ok(z) = ShardLayout::zigzag(16 * sp, sp) {
            let c = z.causal_pair_counts();
            let equal = c.iter().all(|&x| x == c[0]);
            out.rows.push(ReportRow::close("zigzag", sp, "equal_causal_work", equal as u8 as f64, 1.0, 0.0));
        }
    }

    let local = toy_local_gradient()?;
    let aware = toy_gradients(2, ReduceKind::GradAware, spec.scheduler)?;
    let plain = toy_gradients(2, ReduceKind::Plain, spec.scheduler)?;
    for r in 0..2 {
        out.rows.push(ReportRow::close("toy", 2, format!("grad_aware_rank{r}"), aware[r], [8.0, 12.0][r], 0.0));
        out.rows.push(ReportRow::close("toy", 2, format!("plain_rank{r}"), plain[r], [4.0, 6.0][r], 0.0));
    }
    out.rows.push(ReportRow::close("toy", 1, "local_grad_w0", local, 10.0, 0.0));

    out.push_grouped_reports(Command::Verify);
    out.push_file("verify_report.csv".into(), super::rows_to_csv(&out.rows));
    let failed = out.failures().count();
    out.summary.push(format!("{} rows, {} failed", out.rows.len(), failed));
    Ok(out)
}
