use std::fmt::Write as _;

use super::svg::{line_chart, Series};
use super::{csv_name, infeasibility, rows_to_csv, Command, CommandOutput, ExperimentSpec, ReportRow};
use crate::attention::EngineKind;
use crate::comm::{all_reduce_grad_aware, all_reduce_plain, CommFabric, Scheduler};
use crate::error::Result;
use crate::losses::ReduceKind;
use crate::model::{evaluate_gradients, Dataset, TrainerConfig, Weights};
use crate::tensor::{Array, Tape};

const STEPS: usize = 4;
const SAMPLES_PER_STEP: usize = 2;

/// `y = w0 * x_r` with `x_r = r + 2`, `y = all_reduce(y)`, `loss = 2 y - 1`;
/// returns each rank's gradient of `w0`.
pub fn toy_gradients(sp: usize, reduce: ReduceKind, scheduler: Scheduler) -> Result<Vec<f64>> {
    let fabric = CommFabric::init_groups(sp, sp)?.with_scheduler(scheduler);
    fabric.run(|ctx| {
        let tape = Tape::new();
        let w0 = tape.param(Array::from_vec(vec![1.0]));
        let x = tape.constant(Array::from_vec(vec![ctx.group_rank() as f64 + 2.0]));
        let y = w0.mul(&x)?;
        let y = match reduce {
            ReduceKind::GradAware => all_reduce_grad_aware(&ctx.comm, &ctx.group, &y)?,
            ReduceKind::Plain => all_reduce_plain(&ctx.comm, &ctx.group, &y)?,
        };
        y.scale(2.0)?.add_scalar(-1.0)?.sum_all()?.backward()?;
        Ok(w0.grad().map(|g| g.item()).unwrap_or(0.0))
    })
}

/// The same program without sequence parallelism: `x = 5`.
pub fn toy_local_gradient() -> Result<f64> {
    let tape = Tape::new();
    let w0 = tape.param(Array::from_vec(vec![1.0]));
    let x = tape.constant(Array::from_vec(vec![5.0]));
    w0.mul(&x)?.scale(2.0)?.add_scalar(-1.0)?.sum_all()?.backward()?;
    Ok(w0.grad().map(|g| g.item()).unwrap_or(0.0))
}

fn toy_rows(out: &mut CommandOutput, spec: &ExperimentSpec) -> Result<()> {
    let local = toy_local_gradient()?;
    out.rows.push(ReportRow::close("toy", 1, "local_grad_w0", local, 10.0, 0.0));
    for sp in [2usize, 4] {
        let aware = toy_gradients(sp, ReduceKind::GradAware, spec.scheduler)?;
        let plain = toy_gradients(sp, ReduceKind::Plain, spec.scheduler)?;
        let mut csv = String::from("rank,reduce,grad_w0\n");
        for (r, (a, p)) in aware.iter().zip(&plain).enumerate() {
            let _ = writeln!(csv, "{r},grad_aware,{a:e}");
            let _ = writeln!(csv, "{r},plain,{p:e}");
            if sp == 2 {
                let want_aware = [8.0, 12.0][r];
                let want_plain = [4.0, 6.0][r];
                out.rows.push(ReportRow::close("toy", sp, format!("grad_aware_rank{r}"), *a, want_aware, 0.0));
                out.rows.push(ReportRow::close("toy", sp, format!("plain_rank{r}"), *p, want_plain, 0.0));
            }
            out.rows.push(ReportRow::close("toy", sp, format!("aware_over_plain_rank{r}"), a / p, sp as f64, 0.0));
        }
        let mean = aware.iter().sum::<f64>() / sp as f64;
        out.rows.push(ReportRow::info("toy", sp, "mean_grad_aware", mean));
        if sp == 2 {
            out.rows.push(ReportRow::close("toy", sp, "mean_grad_aware_vs_local", mean, local, 0.0));
        }
        out.push_file(csv_name(Command::PitfallDemo, "toy", sp), csv);
    }
    Ok(())
}

fn model_engine(spec: &ExperimentSpec, sp: usize) -> EngineKind {
    let cands = std::iter::once(spec.trainer.engine).chain(spec.engines.iter().copied());
    cands
        .filter(|e| *e != EngineKind::Oracle)
        .find(|e| infeasibility(&spec.model.attention_config(*e, sp)).is_none())
        .unwrap_or(EngineKind::DummyHead)
}

/// Gradient norms under both reductions at the same weights, stepping with
/// the grad-aware gradients.
fn model_rows(out: &mut CommandOutput, spec: &ExperimentSpec) -> Result<Vec<Series>> {
    let data = spec.dataset()?;
    let mut plot = Vec::new();
    for &sp in &spec.sp_values {
        let engine = model_engine(spec, sp);
        let fabric = CommFabric::init_groups(sp, sp)?.with_scheduler(spec.scheduler);
        let aware_t = TrainerConfig {
            engine,
            sp,
            reduce: ReduceKind::GradAware,
            ..spec.trainer.clone()
        };
        let plain_t = TrainerConfig {
            reduce: ReduceKind::Plain,
            ..aware_t.clone()
        };
        let mut weights = Weights::init(&spec.model)?;
        let mut csv = String::from("step,grad_norm_grad_aware,grad_norm_plain,ratio\n");
        let (mut sa, mut sp_series) = (Vec::new(), Vec::new());
        for step in 0..STEPS {
            let lo = (step * SAMPLES_PER_STEP) % data.len();
            let batch = take(&data, lo, SAMPLES_PER_STEP);
            let aware = evaluate_gradients(&spec.model, &aware_t, &weights, &batch, &fabric)?;
            let plain = evaluate_gradients(&spec.model, &plain_t, &weights, &batch, &fabric)?;
            let norm = |g: &[Array]| g.iter().map(Array::norm_sq).sum::<f64>().sqrt();
            let (na, np) = (norm(&aware.grads), norm(&plain.grads));
            let _ = writeln!(csv, "{step},{na:e},{np:e},{:e}", na / np);
            out.rows.push(ReportRow::close(engine, sp, format!("grad_norm_ratio_step{step}"), na / np, sp as f64, 0.0));
            sa.push((step as f64, na));
            sp_series.push((step as f64, np));
            for (w, g) in weights.arrays.iter_mut().zip(&aware.grads) {
                *w = w.sub(&g.scale(aware_t.lr))?;
            }
        }
        out.push_file(csv_name(Command::PitfallDemo, engine.as_str(), sp), csv);
        plot.push(Series {
            label: format!("{engine} sp{sp} grad-aware"),
            points: sa,
        });
        plot.push(Series {
            label: format!("{engine} sp{sp} plain"),
            points: sp_series,
        });
    }
    Ok(plot)
}

fn take(data: &Dataset, lo: usize, n: usize) -> Dataset {
    let pick = |len: usize| (0..n).map(move |i| (lo + i) % len);
    match data {
        Dataset::Sft(v) => Dataset::Sft(pick(v.len()).map(|i| v[i].clone()).collect()),
        Dataset::Dpo(v) => Dataset::Dpo(pick(v.len()).map(|i| v[i].clone()).collect()),
    }
}

/// Toy gradients under both all-reduce flavours, then whole-model gradient norms.
pub fn cmd_pitfall_demo(spec: &ExperimentSpec) -> Result<CommandOutput> {
    let mut out = CommandOutput::default();
    toy_rows(&mut out, spec)?;
    let series = model_rows(&mut out, spec)?;
    out.push_file(
        "pitfall-demo_grad_norm.svg".into(),
        line_chart("gradient norm by all-reduce flavour", "step", "grad norm", &series),
    );
    out.push_file("pitfall-demo_report.csv".into(), rows_to_csv(&out.rows));
    let toy: Vec<String> = out
        .rows
        .iter()
        .filter(|r| r.engine == "toy" && r.check != super::Check::Info && !r.metric.starts_with("aware_over"))
        .map(|r| format!("{}={}", r.metric, r.measured))
        .collect();
    out.summary.push(format!("toy: {}", toy.join(" ")));
    Ok(out)
}
