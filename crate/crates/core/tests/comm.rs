use std::time::Duration;

use proptest::prelude::*;
use seqpar::comm::{self, CommFabric, Primitive, Scheduler};
use seqpar::tensor::{Array, Tape};
use seqpar::Error;

fn schedulers() -> [Scheduler; 2] {
    [Scheduler::Lockstep, Scheduler::Threaded]
}

#[test]
fn init_groups_examples() {
    let f = CommFabric::init_groups(8, 4).unwrap();
    assert_eq!(f.groups()[0].ranks(), &[0, 1, 2, 3]);
    assert_eq!(f.groups()[1].ranks(), &[4, 5, 6, 7]);
    assert_eq!(f.group_of(5).ranks(), &[4, 5, 6, 7]);

    let f = CommFabric::init_groups(2, 2).unwrap();
    assert_eq!(f.groups().len(), 1);
    assert_eq!(f.groups()[0].ranks(), &[0, 1]);

    assert!(matches!(CommFabric::init_groups(8, 3), Err(Error::Config(_))));
    assert!(CommFabric::init_groups(0, 1).is_err());
}

#[test]
fn fresh_fabric_reports_zeros() {
    let f = CommFabric::init_groups(4, 2).unwrap();
    let stats = f.report();
    assert!(stats.is_zero());
    assert_eq!(stats.rows.len(), 4 * Primitive::ALL.len());
}

#[test]
fn all_gather_values_and_bytes() {
    for sched in schedulers() {
        let f = CommFabric::init_groups(2, 2).unwrap().with_scheduler(sched);
        let out = f
            .run(|ctx| {
                let local = Array::from_vec(if ctx.rank() == 0 { vec![1., 2.] } else { vec![3., 4.] });
                ctx.comm.all_gather(&ctx.group, &local, 0)
            })
            .unwrap();
        assert_eq!(out[0].data(), &[1., 2., 3., 4.]);
        assert_eq!(out[1].data(), &[1., 2., 3., 4.]);

        // 16 f64 elements, sp = 2: 16 * 8 * (2 - 1) = 128 bytes per rank
        f.reset_counters();
        f.run(|ctx| ctx.comm.all_gather(&ctx.group, &Array::zeros(&[16]), 0)).unwrap();
        let stats = f.report();
        for rank in 0..2 {
            let c = stats.get(rank, Primitive::AllGather);
            assert_eq!((c.calls, c.bytes), (1, 128));
        }
        assert!(stats.to_csv("x").starts_with("engine,rank,primitive,calls,bytes\n"));
        assert!(stats.to_csv("x").contains("x,0,all_gather,1,128\n"));
    }
}

#[test]
fn all_to_all_two_ranks_and_identity() {
    let f = CommFabric::init_groups(2, 2).unwrap();
    let out = f
        .run(|ctx| {
            let local = if ctx.rank() == 0 {
                Array::from_vec(vec![10., 11.])
            } else {
                Array::from_vec(vec![20., 21.])
            };
            ctx.comm.all_to_all(&ctx.group, &local, 0, 0)
        })
        .unwrap();
    assert_eq!(out[0].data(), &[10., 20.]);
    assert_eq!(out[1].data(), &[11., 21.]);

    let f = CommFabric::init_groups(1, 1).unwrap();
    let x = Array::from_vec(vec![1., 2., 3.]);
    let out = f.run(|ctx| ctx.comm.all_to_all(&ctx.group, &x, 0, 0)).unwrap();
    assert_eq!(out[0], x);
    assert!(f.report().is_zero());
}

#[test]
fn all_to_all_indivisible_scatter_is_an_error() {
    let f = CommFabric::init_groups(4, 4).unwrap();
    let err = f
        .run(|ctx| ctx.comm.all_to_all(&ctx.group, &Array::zeros(&[1, 2, 6, 4]), 2, 1))
        .unwrap_err();
    assert!(matches!(err, Error::Divisibility { value: 6, by: 4, .. }));
}

#[test]
fn ring_shift_examples() {
    for sched in schedulers() {
        let f = CommFabric::init_groups(4, 4).unwrap().with_scheduler(sched);
        let out = f
            .run(|ctx| {
                let mut p = vec![Array::from_vec(vec![ctx.rank() as f64])];
                let once = ctx.comm.ring_shift(&ctx.group, &p, false)?;
                for _ in 0..4 {
                    p = ctx.comm.ring_shift(&ctx.group, &p, false)?;
                }
                Ok((once[0].item(), p[0].item()))
            })
            .unwrap();
        assert_eq!(out[2].0, 1.0);
        for (r, &(_, cycled)) in out.iter().enumerate() {
            assert_eq!(cycled, r as f64);
        }
        assert_eq!(f.report().get(0, Primitive::P2p).bytes, 5 * 8);
    }

    let f = CommFabric::init_groups(2, 2).unwrap();
    let out = f
        .run(|ctx| {
            let p = vec![Array::from_vec(vec![ctx.rank() as f64 + 1.0])];
            ctx.comm.ring_shift(&ctx.group, &p, false)
        })
        .unwrap();
    assert_eq!(out[0][0].item(), 2.0);
    assert_eq!(out[1][0].item(), 1.0);
}

#[test]
fn ring_shift_shape_mismatch_fails_everywhere() {
    let f = CommFabric::init_groups(2, 2).unwrap();
    let err = f
        .run(|ctx| ctx.comm.ring_shift(&ctx.group, &[Array::zeros(&[ctx.rank() + 1])], false))
        .unwrap_err();
    assert!(matches!(err, Error::Collective(_)));
}

#[test]
fn mismatched_collectives_error_instead_of_hanging() {
    let f = CommFabric::init_groups(2, 2).unwrap();
    let err = f
        .run(|ctx| {
            if ctx.rank() == 0 {
                ctx.comm.all_reduce(&ctx.group, &Array::zeros(&[2]))
            } else {
                ctx.comm.all_gather(&ctx.group, &Array::zeros(&[2]), 0)
            }
        })
        .unwrap_err();
    assert!(matches!(err, Error::Collective(_)));

    // one rank skips the collective entirely
    let err = f
        .run(|ctx| {
            if ctx.rank() == 0 {
                ctx.comm.all_reduce(&ctx.group, &Array::zeros(&[2]))
            } else {
                Ok(Array::zeros(&[2]))
            }
        })
        .unwrap_err();
    assert!(matches!(err, Error::Collective(_)));
}

/// The toy program: `y = w0 * x_r`, `y = all_reduce(y)`, `loss = 2y - 1`.
fn toy_grads(sp: usize, grad_aware: bool, sched: Scheduler) -> Vec<f64> {
    let f = CommFabric::init_groups(sp, sp).unwrap().with_scheduler(sched);
    f.run(|ctx| {
        let tape = Tape::new();
        let w0 = tape.param(Array::from_vec(vec![1.0]));
        let x = tape.constant(Array::from_vec(vec![ctx.rank() as f64 + 2.0]));
        let y = w0.mul(&x)?;
        let y = if grad_aware {
            comm::all_reduce_grad_aware(&ctx.comm, &ctx.group, &y)?
        } else {
            comm::all_reduce_plain(&ctx.comm, &ctx.group, &y)?
        };
        let loss = y.scale(2.0)?.add_scalar(-1.0)?.sum_all()?;
        loss.backward()?;
        Ok(w0.grad().unwrap().item())
    })
    .unwrap()
}

#[test]
fn pitfall_toy_reproduces_reported_gradients() {
    for sched in schedulers() {
        assert_eq!(toy_grads(2, true, sched), vec![8.0, 12.0]);
        assert_eq!(toy_grads(2, false, sched), vec![4.0, 6.0]);
    }
    // local program: x = 5
    let tape = Tape::new();
    let w0 = tape.param(Array::from_vec(vec![1.0]));
    let x = tape.constant(Array::from_vec(vec![5.0]));
    let loss = w0.mul(&x).unwrap().scale(2.0).unwrap().add_scalar(-1.0).unwrap().sum_all().unwrap();
    loss.backward().unwrap();
    assert_eq!(w0.grad().unwrap().item(), 10.0);
    let aware = toy_grads(2, true, Scheduler::Lockstep);
    assert_eq!((aware[0] + aware[1]) / 2.0, 10.0);
}

#[test]
fn grad_aware_is_sp_times_plain() {
    for sp in [1, 2, 4, 8] {
        let aware = toy_grads(sp, true, Scheduler::Lockstep);
        let plain = toy_grads(sp, false, Scheduler::Threaded);
        for (a, p) in aware.iter().zip(&plain) {
            assert_eq!(*a, sp as f64 * p);
        }
    }
}

#[test]
fn plain_and_grad_aware_share_forward() {
    let f = CommFabric::init_groups(4, 4).unwrap();
    let out = f
        .run(|ctx| {
            let tape = Tape::new();
            let x = tape.param(Array::ones(&[3]));
            let a = comm::all_reduce_plain(&ctx.comm, &ctx.group, &x)?.to_array();
            let b = comm::all_reduce_grad_aware(&ctx.comm, &ctx.group, &x)?.to_array();
            Ok((a, b))
        })
        .unwrap();
    for (a, b) in out {
        assert_eq!(a, b);
        assert_eq!(a.data(), &[4., 4., 4.]);
    }
}

#[test]
fn differentiable_all_to_all_round_trip_and_grad() {
    let f = CommFabric::init_groups(4, 4).unwrap();
    let out = f
        .run(|ctx| {
            let tape = Tape::new();
            let data: Vec<f64> = (0..32).map(|i| (i + 100 * ctx.rank()) as f64 * 0.37).collect();
            let x = tape.param(Array::new(vec![1, 2, 4, 4], data)?);
            let y = comm::all_to_all(&ctx.comm, &ctx.group, &x, 2, 1)?;
            assert_eq!(y.shape(), vec![1, 8, 1, 4]);
            let back = comm::all_to_all(&ctx.comm, &ctx.group, &y, 1, 2)?;
            // weight the output by a rank-dependent constant
            let w = tape.constant(Array::full(&y.shape(), ctx.rank() as f64 + 1.0));
            y.mul(&w)?.sum_all()?.backward()?;
            Ok((x.to_array(), back.to_array(), x.grad().unwrap()))
        })
        .unwrap();
    for (x, back, grad) in &out {
        assert_eq!(x, back);
        // every element of x lands on exactly one rank; head block h goes to rank h
        for (i, g) in grad.data().iter().enumerate() {
            let head = (i / 4) % 4;
            assert_eq!(*g, head as f64 + 1.0);
        }
    }
}

#[test]
fn all_gather_backward_reduce_scatters() {
    let f = CommFabric::init_groups(2, 2).unwrap();
    let out = f
        .run(|ctx| {
            let tape = Tape::new();
            let x = tape.param(Array::ones(&[2]));
            let g = comm::all_gather(&ctx.comm, &ctx.group, &x, 0)?;
            let w = tape.constant(Array::from_vec(vec![1., 2., 3., 4.]).scale(ctx.rank() as f64 + 1.0));
            g.mul(&w)?.sum_all()?.backward()?;
            Ok(x.grad().unwrap())
        })
        .unwrap();
    // sum over ranks of w: rank0 block gets (1+2)*[1,2] = [3,6], rank1 block [9,12]
    assert_eq!(out[0].data(), &[3., 6.]);
    assert_eq!(out[1].data(), &[9., 12.]);
}

#[test]
fn multiple_groups_run_independently() {
    let f = CommFabric::init_groups(6, 3).unwrap();
    let out = f
        .run(|ctx| ctx.comm.all_reduce(&ctx.group, &Array::from_vec(vec![ctx.rank() as f64])))
        .unwrap();
    let sums: Vec<f64> = out.iter().map(|a| a.item()).collect();
    assert_eq!(sums, vec![3., 3., 3., 12., 12., 12.]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn interleaving_does_not_change_results(seed in 0u64..1000, sp in 2usize..5) {
        let program = |ctx: seqpar::comm::RankCtx, jitter: bool| -> seqpar::Result<Vec<u64>> {
            let mut x = Array::from_vec((0..sp * 3).map(|i| ((i as u64 * 7919 + seed + ctx.rank() as u64 * 31) % 97) as f64 / 7.0).collect());
            let mut trace = Vec::new();
            for step in 0..4 {
                if jitter {
                    std::thread::sleep(Duration::from_micros((seed * 13 + ctx.rank() as u64 * 7 + step) % 300));
                }
                x = ctx.comm.all_reduce(&ctx.group, &x)?.scale(1.0 / 3.0);
                x = ctx.comm.all_to_all(&ctx.group, &x, 0, 0)?;
                x = ctx.comm.ring_shift(&ctx.group, &[x], step % 2 == 1)?.remove(0);
                trace.extend(x.data().iter().map(|v| v.to_bits()));
            }
            Ok(trace)
        };
        let lock = CommFabric::init_groups(sp, sp).unwrap().with_scheduler(Scheduler::Lockstep);
        let thr = CommFabric::init_groups(sp, sp).unwrap().with_scheduler(Scheduler::Threaded);
        let a = lock.run(|ctx| program(ctx, false)).unwrap();
        let b = thr.run(|ctx| program(ctx, true)).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(lock.report(), thr.report());
    }

    #[test]
    fn all_to_all_inverse_is_bitwise(seed in 0u64..10_000, sp in 1usize..5) {
        let f = CommFabric::init_groups(sp, sp).unwrap();
        let out = f.run(|ctx| {
            let data: Vec<f64> = (0..sp * 6).map(|i| ((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64 + 17 * ctx.rank() as u64)) % 100_003) as f64 / 977.0 - 50.0).collect();
            let x = Array::new(vec![2, sp, 3], data)?;
            let y = ctx.comm.all_to_all(&ctx.group, &x, 1, 0)?;
            let back = ctx.comm.all_to_all(&ctx.group, &y, 0, 1)?;
            Ok(x == back)
        }).unwrap();
        prop_assert!(out.into_iter().all(|ok| ok));
    }
}
