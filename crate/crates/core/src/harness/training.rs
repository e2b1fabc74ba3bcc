use std::time::Instant;

use super::svg::{line_chart, Series};
use super::{csv_name, infeasibility, rows_to_csv, Command, CommandOutput, ExperimentSpec, ReportRow};
use crate::attention::EngineKind;
use crate::comm::CommFabric;
use crate::error::{Error, Result};
use crate::model::{run_training, Task, TrainerConfig, TrainingRun};

pub const SFT_GAP_TOLERANCE: f64 = 1e-8;
pub const DPO_GAP_TOLERANCE: f64 = 1e-6;

/// Largest per-step loss difference between two runs.
pub fn max_loss_gap(a: &TrainingRun, b: &TrainingRun) -> f64 {
    if a.steps.len() != b.steps.len() {
        return f64::INFINITY;
    }
    a.steps
        .iter()
        .zip(&b.steps)
        .map(|(x, y)| (x.loss - y.loss).abs())
        .fold(0.0, f64::max)
}

/// Largest difference between the reduced DPO log-prob sums of two runs.
pub fn max_sum_gap(a: &TrainingRun, b: &TrainingRun) -> f64 {
    let flat = |r: &TrainingRun| -> Vec<f64> { r.steps.iter().flat_map(|s| s.dpo_sums.iter().flatten().copied()).collect() };
    let (x, y) = (flat(a), flat(b));
    if x.len() != y.len() {
        return f64::INFINITY;
    }
    x.iter().zip(&y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

fn run(spec: &ExperimentSpec, trainer: &TrainerConfig, data: &crate::model::Dataset) -> Result<TrainingRun> {
    let fabric = CommFabric::init_groups(trainer.sp, trainer.sp)?.with_scheduler(spec.scheduler);
    run_training(&spec.model, trainer, data, &fabric)
}

/// Single-device baseline plus every requested engine and sp, with loss-gap rows.
pub fn cmd_train(spec: &ExperimentSpec) -> Result<CommandOutput> {
    let mut out = CommandOutput::default();
    let data = spec.dataset()?;
    let task = spec.trainer.task;
    let tol = match task {
        Task::Sft => SFT_GAP_TOLERANCE,
        Task::Dpo => DPO_GAP_TOLERANCE,
    };
    let base_t = TrainerConfig {
        engine: EngineKind::Oracle,
        sp: 1,
        layout: None,
        usp_degrees: None,
        ..spec.trainer.clone()
    };
    let clock = Instant::now();
    let base = run(spec, &base_t, &data)?;
    out.summary.push(format!(
        "oracle sp=1: {} steps, final loss {:.6} ({:.2?})",
        base.steps.len(),
        base.steps.last().map_or(f64::NAN, |s| s.loss),
        clock.elapsed()
    ));
    out.push_file(csv_name(Command::Train, "oracle", 1), base.to_csv());
    let mut series = vec![curve("oracle sp1", &base)];
    let mut completed = 0;
    let mut attempted = 0;
    for &engine in spec.engines.iter().filter(|e| **e != EngineKind::Oracle) {
        for &sp in &spec.sp_values {
            attempted += 1;
            let t = TrainerConfig {
                engine,
                sp,
                ..spec.trainer.clone()
            };
            let attn = match t.attention_config(&spec.model) {
                Ok(a) => a,
                Err(e) => {
                    out.rows.push(ReportRow::info(engine, sp, format!("skipped: {}", clean(&e)), 0.0));
                    continue;
                }
            };
            if let Some(why) = infeasibility(&attn) {
                out.rows.push(ReportRow::info(engine, sp, format!("skipped: {why}"), 0.0));
                continue;
            }
            let clock = Instant::now();
            let r = match run(spec, &t, &data) {
                Ok(r) => r,
                Err(e @ (Error::Config(_) | Error::Divisibility { .. })) => {
                    out.rows.push(ReportRow::info(engine, sp, format!("skipped: {}", clean(&e)), 0.0));
                    continue;
                }
                Err(e) => {
                    out.rows.push(ReportRow::failure(engine, sp, "training", &e));
                    continue;
                }
            };
            completed += 1;
            let gap = max_loss_gap(&r, &base);
            out.rows.push(ReportRow::close(engine, sp, "max_loss_gap", gap, 0.0, tol));
            if task == Task::Dpo && spec.trainer.lr == 0.0 {
                out.rows.push(ReportRow::close(engine, sp, "max_logprob_sum_gap", max_sum_gap(&r, &base), 0.0, 0.0));
            }
            out.summary.push(format!("{engine} sp={sp}: max loss gap {gap:e} ({:.2?})", clock.elapsed()));
            out.push_file(csv_name(Command::Train, engine.as_str(), sp), r.to_csv());
            series.push(curve(&format!("{engine} sp{sp}"), &r));
        }
    }
    if completed == 0 {
        out.rows.push(ReportRow::close("all", 0, format!("no feasible run among {attempted}"), 0.0, 1.0, 0.0));
    }
    let task_name = match task {
        Task::Sft => "sft",
        Task::Dpo => "dpo",
    };
    out.push_file(
        format!("train_{task_name}_loss.svg"),
        line_chart(&format!("{task_name} loss with and without sequence parallelism"), "step", "loss", &series),
    );
    out.push_file("train_report.csv".into(), rows_to_csv(&out.rows));
    Ok(out)
}

fn curve(label: &str, r: &TrainingRun) -> Series {
    Series {
        label: label.into(),
        points: r.steps.iter().map(|s| (s.step as f64, s.loss)).collect(),
    }
}

fn clean(e: &Error) -> String {
    e.to_string().replace(',', ";")
}
