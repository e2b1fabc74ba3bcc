use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{csv_name, infeasibility, rows_to_csv, Command, CommandOutput, ExperimentSpec, ReportRow};
use crate::attention::{padded_head_count, select_insp, AttentionConfig, EngineKind};
use crate::comm::{CommStats, Scheduler};
use crate::error::Result;
use crate::partition::{LayoutMode, ShardLayout};
use crate::tensor::Precision;
use crate::verify::{asymptotic_coefficient, closed_form_bytes, AttentionProblem, ClosedFormBytes};

const BS: usize = 1;

fn measure(cfg: &AttentionConfig, len: usize, scheduler: Scheduler, seed: u64) -> Result<CommStats> {
    let problem = AttentionProblem::random(cfg, BS, len, seed);
    Ok(problem.sharded(cfg, scheduler)?.2)
}

/// Largest per-rank gap between measured and closed-form bytes, and rank 0's total.
fn compare_bytes(stats: &CommStats, expect: &ClosedFormBytes, sp: usize) -> (u64, u64) {
    let mut gap = 0u64;
    for r in 0..sp {
        let m = ClosedFormBytes::measured(stats, r);
        gap = gap.max(m.total().abs_diff(expect.total()));
        gap = gap.max(m.all_to_all.abs_diff(expect.all_to_all));
        gap = gap.max(m.all_gather.abs_diff(expect.all_gather));
        gap = gap.max(m.p2p.abs_diff(expect.p2p));
    }
    (gap, ClosedFormBytes::measured(stats, 0).total())
}

/// Measured bytes against the closed-form model and the asymptotic
/// coefficients, plus the ordering between engines.
pub fn cmd_comm_report(spec: &ExperimentSpec) -> Result<CommandOutput> {
    let mut out = CommandOutput::default();
    let elem = Precision::F64.elem_bytes();
    let heads = [(8usize, 4usize), (spec.model.hs, spec.model.dim)];
    let mut tables: BTreeMap<(usize, String), String> = BTreeMap::new();
    // measured rank-0 totals keyed by (engine, len, hs, dim, sp)
    let mut totals: BTreeMap<(EngineKind, usize, usize, usize, usize), u64> = BTreeMap::new();

    for &sp in &spec.sp_values {
        for &engine in &spec.engines {
            let table = tables.entry((sp, engine.as_str().to_string())).or_insert_with(|| {
                "len,hs,dim,rank,all_to_all,all_gather,p2p,total,closed_form,normalized,asymptotic\n".to_string()
            });
            for &(hs, dim) in &heads {
                for &len in &spec.comm_lengths {
                    let cfg = AttentionConfig::new(engine, hs, hs, dim, sp);
                    let tag = format!("bytes_L{len}_hs{hs}_d{dim}");
                    let stats = match measure(&cfg, len, spec.scheduler, spec.seed) {
                        Ok(s) => s,
                        Err(e) if infeasibility(&cfg).is_some() => {
                            out.rows.push(ReportRow::info(engine, sp, format!("{tag}_infeasible"), 0.0));
                            let _ = e;
                            continue;
                        }
                        Err(e) => {
                            out.rows.push(ReportRow::failure(engine, sp, tag, &e));
                            continue;
                        }
                    };
                    let expect = closed_form_bytes(&cfg, BS, len, elem)?;
                    let (gap, total) = compare_bytes(&stats, &expect, sp);
                    out.rows.push(ReportRow::close(engine, sp, &tag, gap as f64, 0.0, 0.0));
                    totals.insert((engine, len, hs, dim, sp), total);
                    let norm = total as f64 / (BS * len * hs * dim) as f64 / elem as f64;
                    let coef = asymptotic_coefficient(&cfg)?;
                    if engine == EngineKind::Ulysses {
                        let n = sp as f64;
                        out.rows.push(ReportRow::within(
                            engine,
                            sp,
                            format!("normalized_L{len}_hs{hs}_d{dim}"),
                            norm,
                            8.0 * (n - 1.0) / (n * n),
                            8.0 / n,
                        ));
                    } else {
                        out.rows.push(ReportRow::info(engine, sp, format!("normalized_L{len}_hs{hs}_d{dim}"), norm));
                    }
                    for r in 0..sp {
                        let m = ClosedFormBytes::measured(&stats, r);
                        let _ = writeln!(
                            table,
                            "{len},{hs},{dim},{r},{},{},{},{},{},{norm:e},{coef:e}",
                            m.all_to_all,
                            m.all_gather,
                            m.p2p,
                            m.total(),
                            expect.total()
                        );
                    }
                }
            }
        }
        ordering_rows(&mut out, spec, sp, &heads, &totals, elem)?;
    }
    for ((sp, engine), table) in tables {
        out.push_file(csv_name(Command::CommReport, &engine, sp), table);
    }
    out.push_file("comm-report_report.csv".into(), rows_to_csv(&out.rows));
    let n_bytes = out.rows.iter().filter(|r| r.metric.starts_with("bytes_") && r.pass).count();
    out.summary.push(format!("{n_bytes} byte counts equal the closed-form model"));
    Ok(out)
}

fn ordering_rows(
    out: &mut CommandOutput,
    spec: &ExperimentSpec,
    sp: usize,
    heads: &[(usize, usize)],
    totals: &BTreeMap<(EngineKind, usize, usize, usize, usize), u64>,
    elem: u64,
) -> Result<()> {
    let get = |e: EngineKind, len: usize, hs: usize, dim: usize| totals.get(&(e, len, hs, dim, sp)).copied();
    for &(hs, dim) in heads {
        for &len in &spec.comm_lengths {
            let ulysses_formula =
                closed_form_bytes(&AttentionConfig::new(EngineKind::Ulysses, hs, hs, dim, sp), BS, len, elem)?.total();
            let ulysses = get(EngineKind::Ulysses, len, hs, dim).unwrap_or(ulysses_formula);
            let at = format!("L{len}_hs{hs}_d{dim}");
            if let Some(ring) = get(EngineKind::RingZigzag, len, hs, dim) {
                if sp >= 2 {
                    out.rows.push(ReportRow::greater(
                        EngineKind::RingZigzag,
                        sp,
                        format!("ring_gt_ulysses_{at}"),
                        ring as f64,
                        ulysses as f64,
                    ));
                }
            }
            if let Some(dummy) = get(EngineKind::DummyHead, len, hs, dim) {
                let hs_new = padded_head_count(hs, sp);
                out.rows.push(ReportRow::close(
                    EngineKind::DummyHead,
                    sp,
                    format!("dummy_eq_ulysses_times_padded_ratio_{at}"),
                    (dummy * hs as u64) as f64,
                    (ulysses_formula * hs_new as u64) as f64,
                    0.0,
                ));
                if let (Some(x), Ok(insp)) = (get(EngineKind::Xtuner, len, hs, dim), select_insp(hs, dim, sp)) {
                    if insp > 1 {
                        out.rows.push(ReportRow::greater(
                            EngineKind::Xtuner,
                            sp,
                            format!("xtuner_gt_dummy_{at}"),
                            x as f64,
                            dummy as f64,
                        ));
                    }
                }
            }
            if spec.engines.contains(&EngineKind::Usp) {
                usp_monotone(out, spec, sp, len, hs, dim, elem)?;
            }
        }
    }
    Ok(())
}

/// USP bytes for every ring degree dividing `sp` must grow with the degree.
fn usp_monotone(out: &mut CommandOutput, spec: &ExperimentSpec, sp: usize, len: usize, hs: usize, dim: usize, elem: u64) -> Result<()> {
    let mut prev: Option<u64> = None;
    let mut ok = true;
    for r in (1..=sp).filter(|r| sp % r == 0) {
        let cfg = AttentionConfig::new(EngineKind::Usp, hs, hs, dim, sp).with_usp_degrees(sp / r, r);
        let stats = measure(&cfg, len, spec.scheduler, spec.seed)?;
        let expect = closed_form_bytes(&cfg, BS, len, elem)?;
        let (gap, total) = compare_bytes(&stats, &expect, sp);
        ok &= gap == 0 && prev.is_none_or(|p| total > p);
        prev = Some(total);
    }
    out.rows.push(ReportRow::close(
        EngineKind::Usp,
        sp,
        format!("usp_monotone_in_ring_degree_L{len}_hs{hs}_d{dim}"),
        ok as u8 as f64,
        1.0,
        0.0,
    ));
    Ok(())
}

/// Per-rank causal pair and FLOP counts under naive and zigzag splits.
pub fn cmd_balance_report(spec: &ExperimentSpec) -> Result<CommandOutput> {
    let mut out = CommandOutput::default();
    let (hs, dim) = (spec.model.hs, spec.model.dim);
    let flops_per_pair = (4 * BS * hs * dim) as u64;
    let mut sps = vec![1];
    sps.extend(spec.sp_values.iter().copied().filter(|&s| s != 1));
    for &sp in &sps {
        for (name, mode) in [("naive", LayoutMode::Naive), ("zigzag", LayoutMode::Zigzag)] {
            let mut csv = String::from("len,rank,causal_pairs,flops\n");
            for &len in &spec.balance_lengths {
                let layout = match ShardLayout::new(mode, len, sp) {
                    Ok(l) => l,
                    Err(_) => continue,
                };
                let counts = layout.causal_pair_counts();
                for (r, c) in counts.iter().enumerate() {
                    let _ = writeln!(csv, "{len},{r},{c},{}", c * flops_per_pair);
                }
                let (lo, hi) = (*counts.iter().min().unwrap_or(&0), *counts.iter().max().unwrap_or(&0));
                let ratio = hi as f64 / lo.max(1) as f64;
                let metric = format!("max_over_min_L{len}");
                match mode {
                    LayoutMode::Zigzag => out.rows.push(ReportRow::close(name, sp, metric, ratio, 1.0, 0.0)),
                    _ if len == 8 && sp == 2 => out.rows.push(ReportRow::greater(name, sp, metric, ratio, 2.0)),
                    _ if sp == 1 => out.rows.push(ReportRow::close(name, sp, metric, ratio, 1.0, 0.0)),
                    _ => out.rows.push(ReportRow::info(name, sp, metric, ratio)),
                }
                if mode == LayoutMode::Zigzag && sp > 1 {
                    flop_counter_row(&mut out, spec, &layout, flops_per_pair)?;
                }
            }
            out.push_file(csv_name(Command::BalanceReport, name, sp), csv);
        }
    }
    out.push_file("balance-report_report.csv".into(), rows_to_csv(&out.rows));
    if let Ok(l) = ShardLayout::naive(8, 2) {
        let z = ShardLayout::zigzag(8, 2)?;
        out.summary.push(format!(
            "L=8 sp=2: naive {:?}, zigzag {:?}",
            l.causal_pair_counts(),
            z.causal_pair_counts()
        ));
    }
    Ok(out)
}

/// Ring attention's FLOP counters must equal pair counts times the per-pair cost.
fn flop_counter_row(out: &mut CommandOutput, spec: &ExperimentSpec, layout: &ShardLayout, per_pair: u64) -> Result<()> {
    let sp = layout.sp();
    let cfg = AttentionConfig::new(EngineKind::RingZigzag, spec.model.hs, spec.model.hs, spec.model.dim, sp);
    let stats = measure(&cfg, layout.global_len(), spec.scheduler, spec.seed)?;
    let expect: Vec<u64> = layout.causal_pair_counts().iter().map(|c| c * per_pair).collect();
    let gap = stats
        .flops
        .iter()
        .zip(&expect)
        .map(|(a, b)| a.abs_diff(*b))
        .max()
        .unwrap_or(0);
    out.rows.push(ReportRow::close(
        "zigzag",
        sp,
        format!("ring_flop_counters_L{}", layout.global_len()),
        gap as f64,
        0.0,
        0.0,
    ));
    Ok(())
}
