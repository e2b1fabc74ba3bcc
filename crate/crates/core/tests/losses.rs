use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqpar::comm::CommFabric;
use seqpar::losses::{
    dpo_loss_sharded, dpo_loss_value, sequence_logprob, sft_loss_sharded, wrong_order_dpo, ReduceKind,
    SftNormalization, ShardedLossParts,
};
use seqpar::partition::{LayoutMode, ShardLayout, IGNORE_INDEX};
use seqpar::tensor::{Array, Tape};
use seqpar::Error;

const LN2: f64 = std::f64::consts::LN_2;

#[test]
fn logprob_examples() {
    let tape = Tape::new();
    let mut hot = vec![-1e3; 4];
    hot[2] = 1e3;
    let lp = sequence_logprob(&tape.param(Array::new(vec![1, 4], hot).unwrap()), &[2]).unwrap();
    assert!(lp.value().abs() < 1e-10);
    assert_eq!(lp.count, 1);

    let uniform = tape.param(Array::zeros(&[3, 4]));
    let lp = sequence_logprob(&uniform, &[0, 3, 1]).unwrap();
    assert!((lp.value() + 3.0 * 4f64.ln()).abs() < 1e-15);

    let lp = sequence_logprob(&uniform, &[IGNORE_INDEX; 3]).unwrap();
    assert_eq!((lp.value(), lp.count), (0.0, 0));
    assert!(sequence_logprob(&uniform, &[0, 4, 1]).is_err());
}

#[test]
fn logprob_matches_dense_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Array::random_uniform(&[6, 5], -3.0, 3.0, &mut rng);
    let targets = [0i64, 4, IGNORE_INDEX, 2, 2, 1];
    let mut expect = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t == IGNORE_INDEX {
            continue;
        }
        let row = &x.data()[r * 5..(r + 1) * 5];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        expect += (row[t as usize].exp() / z).ln();
    }
    let got = sequence_logprob(&Tape::new().param(x), &targets).unwrap();
    assert!((got.value() - expect).abs() < 1e-12);
    assert_eq!(got.count, 5);
}

/// SFT loss and per-rank logit gradients with logits sharded over `sp` ranks.
fn sharded_sft(
    logits: &Array,
    targets: &[i64],
    sp: usize,
    mode: LayoutMode,
    kind: ReduceKind,
) -> seqpar::Result<(Vec<f64>, Array)> {
    let layout = ShardLayout::new(mode, targets.len(), sp)?;
    let f = CommFabric::init_groups(sp, sp)?;
    let out = f.run(|ctx| {
        let idx = layout.indices(ctx.group_rank());
        let tape = Tape::new();
        let x = tape.param(logits.index_select(0, idx)?);
        let lp = sequence_logprob(&x, &layout.shard(targets, ctx.group_rank())?)?;
        let loss = sft_loss_sharded(&ctx.comm, &ctx.group, &lp, kind, SftNormalization::GlobalMean)?;
        loss.backward()?;
        Ok((loss.item(), x.grad().unwrap()))
    })?;
    let grads: Vec<Array> = out.iter().map(|o| o.1.clone()).collect();
    Ok((out.iter().map(|o| o.0).collect(), layout.gather_array(&grads, 0)?))
}

fn sft_problem(seed: u64, len: usize) -> (Array, Vec<i64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Array::random_uniform(&[len, 8], -2.0, 2.0, &mut rng);
    let targets = (0..len)
        .map(|_| if rng.random_bool(0.3) { IGNORE_INDEX } else { rng.random_range(0..8) })
        .collect();
    (logits, targets)
}

#[test]
fn sft_sharded_equals_unsharded() {
    let (logits, targets) = sft_problem(2, 16);
    let (base, g1) = sharded_sft(&logits, &targets, 1, LayoutMode::Naive, ReduceKind::GradAware).unwrap();
    for sp in [2, 4] {
        for mode in [LayoutMode::Naive, LayoutMode::Zigzag] {
            let (losses, g) = sharded_sft(&logits, &targets, sp, mode, ReduceKind::GradAware).unwrap();
            for l in &losses {
                assert!((l - base[0]).abs() < 1e-10);
            }
            // each rank's logit gradient is sp times its share of the oracle
            assert!(g.max_abs_diff(&g1.scale(sp as f64)) < 1e-15);
            let (_, gp) = sharded_sft(&logits, &targets, sp, mode, ReduceKind::Plain).unwrap();
            assert!(gp.max_abs_diff(&g1) < 1e-15);
        }
    }
}

#[test]
fn sft_uniform_logits_give_ln_vocab() {
    let logits = Array::zeros(&[8, 4]);
    let targets = vec![1, 2, 3, 0, 1, IGNORE_INDEX, 2, 3];
    for sp in [1, 2, 4] {
        let (losses, _) = sharded_sft(&logits, &targets, sp, LayoutMode::Naive, ReduceKind::GradAware).unwrap();
        assert!(losses.iter().all(|l| (l - 4f64.ln()).abs() < 1e-15));
    }
}

#[test]
fn sft_with_supervision_on_one_rank() {
    let (logits, mut targets) = sft_problem(3, 8);
    for t in &mut targets[4..] {
        *t = IGNORE_INDEX;
    }
    targets[0] = 3;
    let (base, _) = sharded_sft(&logits, &targets, 1, LayoutMode::Naive, ReduceKind::GradAware).unwrap();
    let (split, _) = sharded_sft(&logits, &targets, 2, LayoutMode::Naive, ReduceKind::GradAware).unwrap();
    assert!((split[0] - base[0]).abs() < 1e-10 && (split[1] - base[0]).abs() < 1e-10);

    let err = sharded_sft(&logits, &[IGNORE_INDEX; 8], 2, LayoutMode::Naive, ReduceKind::GradAware).unwrap_err();
    assert_eq!(err, Error::NoSupervisedTokens);
}

#[test]
fn per_rank_mean_normalization_differs_when_counts_differ() {
    let (logits, mut targets) = sft_problem(4, 8);
    targets[..4].copy_from_slice(&[1, IGNORE_INDEX, IGNORE_INDEX, IGNORE_INDEX]);
    targets[4..].copy_from_slice(&[1, 2, 3, 4]);
    let layout = ShardLayout::naive(8, 2).unwrap();
    let f = CommFabric::init_groups(2, 2).unwrap();
    let losses = f
        .run(|ctx| {
            let idx = layout.indices(ctx.group_rank());
            let tape = Tape::new();
            let x = tape.param(logits.index_select(0, idx)?);
            let lp = sequence_logprob(&x, &layout.shard(&targets, ctx.group_rank())?)?;
            let a = sft_loss_sharded(&ctx.comm, &ctx.group, &lp, ReduceKind::GradAware, SftNormalization::GlobalMean)?;
            let b = sft_loss_sharded(&ctx.comm, &ctx.group, &lp, ReduceKind::GradAware, SftNormalization::PerRankMean)?;
            Ok((a.item(), b.item()))
        })
        .unwrap();
    assert!((losses[0].0 - losses[0].1).abs() > 1e-6);
}

#[test]
fn dpo_scalar_examples() {
    assert!((dpo_loss_value(-3.0, -4.0, -3.0, -4.0, 0.1) - LN2).abs() < 1e-15);
    assert!((dpo_loss_value(0.0, 0.0, -1.0, 0.0, 0.1) - 0.644396660073571).abs() < 1e-12);
}

/// Four random `[len, vocab]` logit tensors and chosen/rejected targets.
struct Pair {
    logits: [Array; 4],
    chosen: Vec<i64>,
    rejected: Vec<i64>,
}

fn pair(seed: u64, len: usize) -> Pair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = [0; 4].map(|_| Array::random_uniform(&[len, 6], -2.0, 2.0, &mut rng));
    let mut t = || -> Vec<i64> {
        (0..len)
            .map(|i| if i < 2 { IGNORE_INDEX } else { rng.random_range(0..6) })
            .collect()
    };
    Pair {
        chosen: t(),
        rejected: t(),
        logits,
    }
}

fn sharded_dpo(p: &Pair, sp: usize, mode: LayoutMode, wrong: bool) -> Vec<(f64, [f64; 4])> {
    let len = p.chosen.len();
    let layout = ShardLayout::new(mode, len, sp).unwrap();
    let f = CommFabric::init_groups(sp, sp).unwrap();
    f.run(|ctx| {
        let r = ctx.group_rank();
        let tape = Tape::new();
        let local = |i: usize, targets: &[i64], grad: bool| {
            let x = p.logits[i].index_select(0, layout.indices(r))?;
            let x = if grad { tape.param(x) } else { tape.constant(x) };
            sequence_logprob(&x, &layout.shard(targets, r)?)
        };
        let parts = ShardedLossParts {
            policy_chosen: local(0, &p.chosen, true)?,
            policy_rejected: local(1, &p.rejected, true)?,
            reference_chosen: local(2, &p.chosen, false)?,
            reference_rejected: local(3, &p.rejected, false)?,
        };
        if wrong {
            let loss = wrong_order_dpo(&ctx.comm, &ctx.group, &parts, 0.1)?;
            return Ok((loss.item(), [0.0; 4]));
        }
        let out = dpo_loss_sharded(&ctx.comm, &ctx.group, &parts, 0.1, ReduceKind::GradAware)?;
        out.loss.backward()?;
        Ok((out.loss.item(), out.sums))
    })
    .unwrap()
}

#[test]
fn dpo_sharded_equals_unsharded() {
    let p = pair(5, 16);
    let base = sharded_dpo(&p, 1, LayoutMode::Naive, false)[0];
    for sp in [2, 4] {
        for mode in [LayoutMode::Naive, LayoutMode::Zigzag] {
            for (loss, sums) in sharded_dpo(&p, sp, mode, false) {
                assert!((loss - base.0).abs() < 1e-9);
                // reduced sums do not depend on the partition
                assert_eq!(sums.map(f64::to_bits), base.1.map(f64::to_bits));
            }
        }
    }
}

#[test]
fn dpo_policy_equal_to_reference_gives_ln2() {
    let mut p = pair(6, 8);
    p.logits[2] = p.logits[0].clone();
    p.logits[3] = p.logits[1].clone();
    for sp in [1, 2] {
        for (loss, _) in sharded_dpo(&p, sp, LayoutMode::Naive, false) {
            assert!((loss - LN2).abs() < 1e-15);
        }
        // symmetric degenerate case: the wrong order coincides
        for (loss, _) in sharded_dpo(&p, sp, LayoutMode::Naive, true) {
            assert!((loss - LN2).abs() < 1e-15);
        }
    }
}

#[test]
fn wrong_order_dpo_differs_on_asymmetric_shards() {
    let mut p = pair(7, 8);
    // most of the margin sits on rank 1's half
    for r in 4..8 {
        p.logits[0].data_mut()[r * 6 + p.chosen[r] as usize] += 5.0;
    }
    let right = sharded_dpo(&p, 2, LayoutMode::Naive, false)[0].0;
    let wrong = sharded_dpo(&p, 2, LayoutMode::Naive, true)[0].0;
    assert!((right - wrong).abs() > 1e-6, "{right} {wrong}");
    let single = sharded_dpo(&p, 1, LayoutMode::Naive, true)[0].0;
    assert_eq!(single, sharded_dpo(&p, 1, LayoutMode::Naive, false)[0].0);
}

#[test]
fn non_positive_beta_is_rejected() {
    let f = CommFabric::init_groups(1, 1).unwrap();
    let err = f
        .run(|ctx| {
            let tape = Tape::new();
            let lp = sequence_logprob(&tape.param(Array::zeros(&[2, 3])), &[0, 1])?;
            let parts = ShardedLossParts {
                policy_chosen: lp.clone(),
                policy_rejected: lp.clone(),
                reference_chosen: lp.clone(),
                reference_rejected: lp,
            };
            dpo_loss_sharded(&ctx.comm, &ctx.group, &parts, 0.0, ReduceKind::GradAware).map(|_| ())
        })
        .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

proptest! {
    #[test]
    fn dpo_loss_decreases_with_margin(m in -50.0f64..50.0, dm in 1e-3f64..10.0, beta in 0.01f64..2.0) {
        prop_assert!(dpo_loss_value(m + dm, 0.0, 0.0, 0.0, beta) < dpo_loss_value(m, 0.0, 0.0, 0.0, beta));
    }
}
