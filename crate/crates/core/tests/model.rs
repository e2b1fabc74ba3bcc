use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqpar::attention::{EngineKind, SeqGroup};
use seqpar::comm::{CommFabric, Scheduler};
use seqpar::losses::ReduceKind;
use seqpar::model::{
    evaluate_gradients, forward, forward_with_local_ids, run_training, synthetic_dpo, synthetic_sft, Dataset,
    ModelConfig, Task, TrainerConfig, Weights,
};
use seqpar::partition::{LayoutMode, ShardLayout};
use seqpar::tensor::{Array, Tape};
use seqpar::Error;

fn tokens(len: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Gathered `[1, len, vocab]` logits for one engine.
fn logits(cfg: &ModelConfig, engine: EngineKind, sp: usize, toks: &[u32], local_ids: bool) -> seqpar::Result<Array> {
    let weights = Weights::init(cfg)?;
    let attn = cfg.attention_config(engine, sp);
    let layout = ShardLayout::new(attn.layout_mode(), toks.len(), sp)?;
    let fabric = CommFabric::init_groups(sp, sp)?;
    let shards = fabric.run(|ctx| {
        let r = ctx.group_rank();
        let params = weights.bind(&Tape::new(), false);
        let sg = SeqGroup::new(&ctx, &layout);
        let local = layout.shard(toks, r)?;
        let out = if local_ids {
            forward_with_local_ids(cfg, &params, &local, &attn, &sg)?
        } else {
            forward(cfg, &params, &local, Some(&layout.position_ids(r)), &attn, &sg)?
        };
        Ok(out.to_array())
    })?;
    layout.gather_array(&shards, 1)
}

#[test]
fn sharded_logits_match_single_device() {
    let cfg = ModelConfig::default();
    let toks = tokens(32, cfg.vocab, 1);
    let base = logits(&cfg, EngineKind::Oracle, 1, &toks, false).unwrap();
    for (engine, sp) in [
        (EngineKind::Ulysses, 2),
        (EngineKind::DummyHead, 4),
        (EngineKind::Xtuner, 4),
        (EngineKind::RingZigzag, 2),
        (EngineKind::RingZigzag, 4),
        (EngineKind::Usp, 4),
    ] {
        let got = logits(&cfg, engine, sp, &toks, false).unwrap();
        let d = got.max_abs_diff(&base);
        assert!(d < 1e-10, "{engine} sp={sp}: {d}");
    }
    // ulysses over a naive split keeps per-token arithmetic unchanged
    assert_eq!(logits(&cfg, EngineKind::Ulysses, 2, &toks, false).unwrap(), base);
}

#[test]
fn local_position_ids_corrupt_the_output() {
    // attention is nearly uniform at the default init scale, so the damage
    // is small there but still visible
    let small = ModelConfig::default();
    let toks = tokens(32, small.vocab, 2);
    let base = logits(&small, EngineKind::Oracle, 1, &toks, false).unwrap();
    let wrong = logits(&small, EngineKind::Ulysses, 2, &toks, true).unwrap();
    assert!(wrong.max_abs_diff(&base) > 1e-6);

    let cfg = ModelConfig {
        init_std: 0.1,
        ..small
    };
    let base = logits(&cfg, EngineKind::Oracle, 1, &toks, false).unwrap();
    assert!(logits(&cfg, EngineKind::Ulysses, 2, &toks, false).unwrap().max_abs_diff(&base) < 1e-10);
    let wrong = logits(&cfg, EngineKind::Ulysses, 2, &toks, true).unwrap();
    assert!(wrong.max_abs_diff(&base) > 1e-3);
}

#[test]
fn missing_position_ids_are_rejected_under_sp() {
    let cfg = ModelConfig::default();
    let weights = Weights::init(&cfg).unwrap();
    let attn = cfg.attention_config(EngineKind::Ulysses, 2);
    let layout = ShardLayout::naive(16, 2).unwrap();
    let err = CommFabric::init_groups(2, 2)
        .unwrap()
        .run(|ctx| {
            let params = weights.bind(&Tape::new(), false);
            let sg = SeqGroup::new(&ctx, &layout);
            forward(&cfg, &params, &[1; 8], None, &attn, &sg).map(|_| ())
        })
        .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn zero_layers_is_embedding_times_head() {
    let cfg = ModelConfig {
        layers: 0,
        ..ModelConfig::default()
    };
    let toks = tokens(16, cfg.vocab, 3);
    let weights = Weights::init(&cfg).unwrap();
    let idx: Vec<usize> = toks.iter().map(|&t| t as usize).collect();
    let expect = weights.arrays[0]
        .index_select(0, &idx)
        .unwrap()
        .matmul(&weights.arrays[1])
        .unwrap();
    let fabric = CommFabric::init_groups(2, 2).unwrap();
    let layout = ShardLayout::naive(16, 2).unwrap();
    let attn = cfg.attention_config(EngineKind::Ulysses, 2);
    let shards = fabric
        .run(|ctx| {
            let r = ctx.group_rank();
            let sg = SeqGroup::new(&ctx, &layout);
            let p = weights.bind(&Tape::new(), false);
            Ok(forward(&cfg, &p, &layout.shard(&toks, r)?, Some(&layout.position_ids(r)), &attn, &sg)?.to_array())
        })
        .unwrap();
    let got = layout.gather_array(&shards, 1).unwrap();
    assert_eq!(got.reshape(&[16, cfg.vocab]).unwrap(), expect);
    assert!(fabric.report().is_zero());
}

#[test]
fn init_is_seeded_and_norms_start_at_one() {
    let cfg = ModelConfig::default();
    let a = Weights::init(&cfg).unwrap();
    assert_eq!(a, Weights::init(&cfg).unwrap());
    let other = Weights::init(&ModelConfig { seed: 1, ..cfg.clone() }).unwrap();
    assert_ne!(a, other);
    for (name, arr) in a.names.iter().zip(&a.arrays) {
        if name.ends_with("norm") {
            assert!(arr.data().iter().all(|&v| v == 1.0));
        }
    }
    assert!(ModelConfig { hidden: 40, ..cfg }.validate().is_err());
}

fn small_sft(n: usize) -> Dataset {
    synthetic_sft(n, ModelConfig::default().vocab, 7).unwrap()
}

fn trainer(task: Task, engine: EngineKind, sp: usize) -> TrainerConfig {
    TrainerConfig {
        task,
        engine,
        sp,
        ..TrainerConfig::default()
    }
}

fn eval(cfg: &ModelConfig, t: &TrainerConfig, data: &Dataset) -> seqpar::model::GradEval {
    let w = Weights::init(cfg).unwrap();
    evaluate_gradients(cfg, t, &w, data, &CommFabric::init_groups(t.sp, t.sp).unwrap()).unwrap()
}

fn max_grad_diff(a: &[Array], b: &[Array], scale: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.max_abs_diff(&y.scale(scale)))
        .fold(0.0, f64::max)
}

#[test]
fn averaged_gradients_match_oracle() {
    let cfg = ModelConfig::default();
    let data = small_sft(3);
    let base = eval(&cfg, &trainer(Task::Sft, EngineKind::Oracle, 1), &data);
    for (engine, sp) in [(EngineKind::Ulysses, 2), (EngineKind::RingZigzag, 4), (EngineKind::DummyHead, 4)] {
        let mut t = trainer(Task::Sft, engine, sp);
        let aware = eval(&cfg, &t, &data);
        assert!((aware.loss - base.loss).abs() < 1e-12);
        assert!(max_grad_diff(&aware.grads, &base.grads, 1.0) < 1e-9, "{engine} sp={sp}");
        t.reduce = ReduceKind::Plain;
        let plain = eval(&cfg, &t, &data);
        assert!(max_grad_diff(&plain.grads, &base.grads, 1.0 / sp as f64) < 1e-9);
    }
}

#[test]
fn dpo_gradients_match_oracle() {
    let cfg = ModelConfig::default();
    let data = synthetic_dpo(2, cfg.vocab, 8).unwrap();
    let base = eval(&cfg, &trainer(Task::Dpo, EngineKind::Oracle, 1), &data);
    let sharded = eval(&cfg, &trainer(Task::Dpo, EngineKind::RingZigzag, 2), &data);
    assert!((sharded.loss - base.loss).abs() < 1e-12);
    assert!(max_grad_diff(&sharded.grads, &base.grads, 1.0) < 1e-9);
}

#[test]
fn loss_does_not_depend_on_layout() {
    let cfg = ModelConfig::default();
    let data = small_sft(2);
    let mut t = trainer(Task::Sft, EngineKind::Ulysses, 2);
    t.layout = Some(LayoutMode::Naive);
    let naive = eval(&cfg, &t, &data).loss;
    t.layout = Some(LayoutMode::Zigzag);
    let zigzag = eval(&cfg, &t, &data).loss;
    assert!((naive - zigzag).abs() < 1e-10);
}

#[test]
fn whole_model_finite_differences() {
    let cfg = ModelConfig::default();
    let data = small_sft(1);
    let t = trainer(Task::Sft, EngineKind::Ulysses, 2);
    let fabric = CommFabric::init_groups(2, 2).unwrap();
    let weights = Weights::init(&cfg).unwrap();
    let analytic = evaluate_gradients(&cfg, &t, &weights, &data, &fabric).unwrap().grads;
    let loss_at = |w: &Weights| evaluate_gradients(&cfg, &t, w, &data, &fabric).unwrap().loss;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = 1e-5;
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for _ in 0..12 {
        let a = rng.random_range(0..weights.arrays.len());
        let j = rng.random_range(0..weights.arrays[a].numel());
        let mut w = weights.clone();
        w.arrays[a].data_mut()[j] += h;
        let up = loss_at(&w);
        w.arrays[a].data_mut()[j] -= 2.0 * h;
        let down = loss_at(&w);
        let numeric = (up - down) / (2.0 * h);
        diff += (numeric - analytic[a].data()[j]).powi(2);
        norm += numeric.powi(2);
    }
    let rel = diff.sqrt() / norm.sqrt();
    assert!(rel < 1e-5, "relative error {rel}");
}

#[test]
fn zero_learning_rate_keeps_weights_and_matches_dpo_sums_exactly() {
    let cfg = ModelConfig::default();
    let data = synthetic_dpo(4, cfg.vocab, 10).unwrap();
    let mut base_t = trainer(Task::Dpo, EngineKind::Oracle, 1);
    base_t.lr = 0.0;
    base_t.epochs = 1;
    let base = run_training(&cfg, &base_t, &data, &CommFabric::init_groups(1, 1).unwrap()).unwrap();
    assert_eq!(base.weights, Weights::init(&cfg).unwrap());
    let mut t = base_t.clone();
    t.engine = EngineKind::Ulysses;
    t.sp = 2;
    let run = run_training(&cfg, &t, &data, &CommFabric::init_groups(2, 2).unwrap()).unwrap();
    assert_eq!(run.weights, base.weights);
    for (a, b) in run.steps.iter().zip(&base.steps) {
        assert_eq!(a.param_delta, 0.0);
        assert_eq!(a.dpo_sums, b.dpo_sums);
    }
}

#[test]
fn grad_norm_ratio_is_sp() {
    let cfg = ModelConfig::default();
    let data = small_sft(2);
    for (engine, sp) in [(EngineKind::Ulysses, 2), (EngineKind::DummyHead, 4)] {
        let mut t = trainer(Task::Sft, engine, sp);
        t.lr = 0.0;
        t.epochs = 2;
        t.grad_accumulation = 1;
        let fabric = CommFabric::init_groups(sp, sp).unwrap();
        let aware = run_training(&cfg, &t, &data, &fabric).unwrap();
        t.reduce = ReduceKind::Plain;
        let plain = run_training(&cfg, &t, &data, &fabric).unwrap();
        for (a, p) in aware.steps.iter().zip(&plain.steps) {
            assert_eq!(a.grad_norm, p.grad_norm * sp as f64);
        }
    }
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let cfg = ModelConfig::default();
    let data = small_sft(4);
    let mut t = trainer(Task::Sft, EngineKind::RingZigzag, 2);
    t.epochs = 4;
    t.lr = 1.0;
    t.grad_accumulation = 2;
    let a = run_training(&cfg, &t, &data, &CommFabric::init_groups(2, 2).unwrap()).unwrap();
    let fabric = CommFabric::init_groups(2, 2).unwrap().with_scheduler(Scheduler::Threaded);
    let b = run_training(&cfg, &t, &data, &fabric).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.steps.len(), 8);
    let l = a.losses();
    assert!(l[l.len() - 1] < l[0]);
}

#[test]
fn training_errors() {
    let cfg = ModelConfig::default();
    let fabric = CommFabric::init_groups(1, 1).unwrap();
    let t = trainer(Task::Sft, EngineKind::Oracle, 1);
    assert!(run_training(&cfg, &t, &Dataset::Sft(vec![]), &fabric).is_err());
    let bad = TrainerConfig {
        grad_accumulation: 0,
        ..t.clone()
    };
    assert!(run_training(&cfg, &bad, &small_sft(1), &fabric).is_err());
    let blowup = TrainerConfig { lr: 1e300, epochs: 3, ..t };
    let err = run_training(&cfg, &blowup, &small_sft(2), &fabric).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 1.., .. }), "{err}");
}
