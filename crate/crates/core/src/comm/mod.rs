//! Simulated sequence-parallel process groups.
//!
//! Ranks are threads; collectives are rendezvous points evaluated once every
//! member has arrived, with rank-ordered reductions so results are bitwise
//! reproducible under either [`Scheduler`].
//!
//! Byte accounting is send-side payload per rank:
//!
//! | primitive       | bytes per call                     |
//! |-----------------|------------------------------------|
//! | all-to-all      | `local * (n-1) / n`                |
//! | all-gather      | `local * (n-1)`                    |
//! | reduce-scatter  | `local * (n-1) / n` (all-gather)   |
//! | ring p2p        | `payload`                          |
//! | all-reduce      | `2 * local * (n-1) / n`            |
//! | broadcast       | `local * (n-1) / n`                |
//!
//! Groups of one rank short-circuit: no call and no bytes are recorded.

mod autograd;
pub(crate) mod collectives;
mod fabric;

pub use autograd::{all_gather, all_reduce_grad_aware, all_reduce_plain, all_to_all};
pub use fabric::{Comm, CommFabric, CommGroup, CommStats, Counter, Primitive, RankCtx, Scheduler, StatRow};
