use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::collectives::{evaluate, CollectiveOp};
use crate::error::{Error, Result};
use crate::tensor::{Array, Precision};

const RENDEZVOUS_TIMEOUT: Duration = Duration::from_secs(120);

/// Collective families tracked by the byte counters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    AllToAll,
    AllGather,
    P2p,
    AllReduce,
    Broadcast,
}

impl Primitive {
    pub const ALL: [Primitive; 5] = [
        Primitive::AllToAll,
        Primitive::AllGather,
        Primitive::P2p,
        Primitive::AllReduce,
        Primitive::Broadcast,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Primitive::AllToAll => "all_to_all",
            Primitive::AllGather => "all_gather",
            Primitive::P2p => "p2p",
            Primitive::AllReduce => "all_reduce",
            Primitive::Broadcast => "broadcast",
        }
    }
}

/// How rank programs are interleaved. Both produce identical results.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    /// One rank executes at a time; control passes round-robin at every collective.
    #[default]
    Lockstep,
    /// Ranks run freely on their own threads and meet at collectives.
    Threaded,
}

/// Ordered set of world ranks that take part in a collective together.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CommGroup {
    ranks: Arc<[usize]>,
}

impl CommGroup {
    pub fn new(ranks: Vec<usize>) -> Self {
        CommGroup {
            ranks: ranks.into(),
        }
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn size(&self) -> usize {
        self.ranks.len()
    }

    /// Position of `world_rank` inside the group.
    pub fn index_of(&self, world_rank: usize) -> Option<usize> {
        self.ranks.iter().position(|&r| r == world_rank)
    }

    /// Subgroup made of the given positions of this group.
    pub fn subgroup(&self, positions: impl IntoIterator<Item = usize>) -> CommGroup {
        CommGroup::new(positions.into_iter().map(|p| self.ranks[p]).collect())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counter {
    pub calls: u64,
    pub bytes: u64,
}

#[derive(Default)]
struct Slot {
    op: Option<CollectiveOp>,
    inputs: Vec<Option<Vec<Array>>>,
    outputs: Vec<Option<std::result::Result<Vec<Array>, Error>>>,
    arrived: usize,
    taken: usize,
    draining: bool,
}

struct State {
    slots: HashMap<Vec<usize>, Slot>,
    counters: Vec<BTreeMap<Primitive, Counter>>,
    flops: Vec<u64>,
    live: Vec<bool>,
    baton: usize,
    scheduler: Scheduler,
}

struct Shared {
    state: Mutex<State>,
    cv: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl State {
    fn pass_baton(&mut self, from: usize) {
        let n = self.live.len();
        for step in 1..=n {
            let cand = (from + step) % n;
            if self.live[cand] {
                self.baton = cand;
                return;
            }
        }
    }
}

/// Per-rank handle to the fabric; the only channel between ranks.
#[derive(Clone)]
pub struct Comm {
    shared: Arc<Shared>,
    rank: usize,
    elem_bytes: u64,
}

impl std::fmt::Debug for Comm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Comm").field("rank", &self.rank).finish()
    }
}

impl Comm {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn elem_bytes(&self) -> u64 {
        self.elem_bytes
    }

    fn count(&self, prim: Primitive, bytes: u64) {
        let mut st = self.shared.lock();
        let c = st.counters[self.rank].entry(prim).or_default();
        c.calls += 1;
        c.bytes += bytes;
    }

    /// Adds to this rank's attention FLOP counter.
    pub fn add_flops(&self, flops: u64) {
        self.shared.lock().flops[self.rank] += flops;
    }

    /// Blocks until every rank of `group` has contributed, then returns this rank's share.
    fn rendezvous(&self, group: &CommGroup, op: CollectiveOp, payload: Vec<Array>) -> Result<Vec<Array>> {
        let idx = group.index_of(self.rank).ok_or_else(|| {
            Error::Collective(format!("rank {} is not a member of group {:?}", self.rank, group.ranks()))
        })?;
        let n = group.size();
        let key = group.ranks().to_vec();
        let mut st = self.shared.lock();

        // A previous round on this group may still be handing out results.
        st = self.wait(st, group, |st| !st.slots.get(&key).is_some_and(|s| s.draining))?;

        let slot = st.slots.entry(key.clone()).or_default();
        if slot.inputs.len() != n {
            slot.inputs = vec![None; n];
            slot.outputs = (0..n).map(|_| None).collect();
        }
        match &slot.op {
            Some(existing) if *existing != op => {
                return Err(Error::Collective(format!(
                    "rank {} entered {} while peers are in {}",
                    self.rank,
                    op.name(),
                    existing.name()
                )));
            }
            _ => slot.op = Some(op.clone()),
        }
        slot.inputs[idx] = Some(payload);
        slot.arrived += 1;
        if slot.arrived == n {
            let inputs: Vec<Vec<Array>> = slot.inputs.iter_mut().map(|p| p.take().unwrap_or_default()).collect();
            match evaluate(&op, &inputs) {
                Ok(outs) => {
                    for (o, out) in slot.outputs.iter_mut().zip(outs) {
                        *o = Some(Ok(out));
                    }
                }
                Err(e) => {
                    for o in slot.outputs.iter_mut() {
                        *o = Some(Err(e.clone()));
                    }
                }
            }
            slot.draining = true;
        }
        if st.scheduler == Scheduler::Lockstep {
            st.pass_baton(self.rank);
        }
        self.shared.cv.notify_all();

        st = self.wait(st, group, |st| {
            st.slots
                .get(&key)
                .is_some_and(|s| s.draining && s.outputs[idx].is_some())
        })?;
        let slot = st.slots.get_mut(&key).expect("slot exists while draining");
        let out = slot.outputs[idx].take().expect("checked above");
        slot.taken += 1;
        if slot.taken == n {
            st.slots.remove(&key);
        }
        self.shared.cv.notify_all();
        out
    }

    fn wait<'a>(
        &self,
        mut st: MutexGuard<'a, State>,
        group: &CommGroup,
        ready: impl Fn(&State) -> bool,
    ) -> Result<MutexGuard<'a, State>> {
        let start = Instant::now();
        loop {
            let mine = st.scheduler == Scheduler::Threaded || st.baton == self.rank;
            if ready(&st) && mine {
                return Ok(st);
            }
            if !ready(&st) {
                let key = group.ranks().to_vec();
                let slot = st.slots.get(&key);
                for (i, &r) in group.ranks().iter().enumerate() {
                    let contributed = slot.is_some_and(|s| s.draining || s.inputs.get(i).is_some_and(|p| p.is_some()));
                    if !st.live[r] && !contributed {
                        return Err(Error::Collective(format!(
                            "peer rank {r} exited before joining the collective"
                        )));
                    }
                }
                if st.scheduler == Scheduler::Lockstep && st.baton == self.rank {
                    st.pass_baton(self.rank);
                    self.shared.cv.notify_all();
                }
            }
            let (guard, _) = self
                .shared
                .cv
                .wait_timeout(st, Duration::from_millis(200))
                .unwrap_or_else(|e| e.into_inner());
            st = guard;
            if start.elapsed() > RENDEZVOUS_TIMEOUT {
                return Err(Error::Collective(format!(
                    "rank {} timed out waiting on group {:?}",
                    self.rank,
                    group.ranks()
                )));
            }
        }
    }

    fn skip(group: &CommGroup) -> bool {
        group.size() <= 1
    }

    /// Scatters `scatter` across the group and concatenates received blocks along `gather`.
    pub fn all_to_all(&self, group: &CommGroup, x: &Array, scatter: usize, gather: usize) -> Result<Array> {
        let n = group.size();
        if scatter >= x.ndim() || x.shape()[scatter] % n != 0 {
            return Err(Error::Divisibility {
                what: "all_to_all scatter extent",
                value: x.shape().get(scatter).copied().unwrap_or(0),
                by: n,
            });
        }
        if Self::skip(group) {
            return Ok(x.clone());
        }
        let bytes = (x.numel() as u64 / n as u64) * (n as u64 - 1) * self.elem_bytes;
        self.count(Primitive::AllToAll, bytes);
        let mut out = self.rendezvous(group, CollectiveOp::AllToAll { scatter, gather }, vec![x.clone()])?;
        Ok(out.remove(0))
    }

    /// Concatenation of every rank's shard along `dim`, identical on all ranks.
    pub fn all_gather(&self, group: &CommGroup, x: &Array, dim: usize) -> Result<Array> {
        if Self::skip(group) {
            return Ok(x.clone());
        }
        let n = group.size() as u64;
        self.count(Primitive::AllGather, x.numel() as u64 * (n - 1) * self.elem_bytes);
        let mut out = self.rendezvous(group, CollectiveOp::AllGather { dim }, vec![x.clone()])?;
        Ok(out.remove(0))
    }

    /// Sum across the group, then this rank's `dim` block. Adjoint of [`Comm::all_gather`]
    /// and counted under the all-gather family with the same volume.
    pub fn reduce_scatter(&self, group: &CommGroup, x: &Array, dim: usize) -> Result<Array> {
        if Self::skip(group) {
            return Ok(x.clone());
        }
        let n = group.size() as u64;
        self.count(Primitive::AllGather, x.numel() as u64 / n * (n - 1) * self.elem_bytes);
        let mut out = self.rendezvous(group, CollectiveOp::ReduceScatter { dim }, vec![x.clone()])?;
        Ok(out.remove(0))
    }

    /// Elementwise sum across the group, reduced in rank order.
    pub fn all_reduce(&self, group: &CommGroup, x: &Array) -> Result<Array> {
        if Self::skip(group) {
            return Ok(x.clone());
        }
        let n = group.size() as u64;
        self.count(Primitive::AllReduce, 2 * x.numel() as u64 * self.elem_bytes * (n - 1) / n);
        let mut out = self.rendezvous(group, CollectiveOp::AllReduce, vec![x.clone()])?;
        Ok(out.remove(0))
    }

    /// Every rank receives position `root`'s array.
    pub fn broadcast(&self, group: &CommGroup, x: &Array, root: usize) -> Result<Array> {
        if Self::skip(group) {
            return Ok(x.clone());
        }
        let n = group.size() as u64;
        self.count(Primitive::Broadcast, x.numel() as u64 * self.elem_bytes * (n - 1) / n);
        let mut out = self.rendezvous(group, CollectiveOp::Broadcast { root }, vec![x.clone()])?;
        Ok(out.remove(0))
    }

    /// Point-to-point ring step: position `i` receives position `i-1`'s payload
    /// (`i+1`'s when `reverse`).
    pub fn ring_shift(&self, group: &CommGroup, payload: &[Array], reverse: bool) -> Result<Vec<Array>> {
        if Self::skip(group) {
            return Ok(payload.to_vec());
        }
        let bytes: u64 = payload.iter().map(|a| a.numel() as u64).sum::<u64>() * self.elem_bytes;
        self.count(Primitive::P2p, bytes);
        self.rendezvous(group, CollectiveOp::RingShift { reverse }, payload.to_vec())
    }
}

/// Everything a rank program sees: its handle and its sequence-parallel group.
#[derive(Clone, Debug)]
pub struct RankCtx {
    pub comm: Comm,
    pub group: CommGroup,
}

impl RankCtx {
    pub fn rank(&self) -> usize {
        self.comm.rank
    }

    /// Position of this rank inside its sequence-parallel group.
    pub fn group_rank(&self) -> usize {
        self.group.index_of(self.comm.rank).expect("rank belongs to its group")
    }

    pub fn sp(&self) -> usize {
        self.group.size()
    }
}

/// Marks a rank finished (or failed) when its program returns or panics.
struct LiveGuard<'a> {
    shared: &'a Shared,
    rank: usize,
}

impl Drop for LiveGuard<'_> {
    fn drop(&mut self) {
        let mut st = self.shared.lock();
        st.live[self.rank] = false;
        if st.baton == self.rank {
            st.pass_baton(self.rank);
        }
        self.shared.cv.notify_all();
    }
}

/// Simulated world of `world_size` ranks split into sequence-parallel groups of
/// `sp` consecutive ranks.
pub struct CommFabric {
    world_size: usize,
    sp: usize,
    precision: Precision,
    scheduler: Scheduler,
    groups: Vec<CommGroup>,
    shared: Arc<Shared>,
}

impl CommFabric {
    pub fn init_groups(world_size: usize, sp: usize) -> Result<Self> {
        if world_size == 0 || sp == 0 {
            return Err(Error::Config(format!(
                "world size and sp must be positive (got N={world_size}, sp={sp})"
            )));
        }
        if world_size % sp != 0 {
            return Err(Error::Config(format!(
                "world size {world_size} is not divisible by sequence parallel size {sp}"
            )));
        }
        let groups = (0..world_size / sp)
            .map(|g| CommGroup::new((g * sp..(g + 1) * sp).collect()))
            .collect();
        Ok(CommFabric {
            world_size,
            sp,
            precision: Precision::F64,
            scheduler: Scheduler::Lockstep,
            groups,
            shared: Arc::new(Shared {
                state: Mutex::new(State {
                    slots: HashMap::new(),
                    counters: vec![BTreeMap::new(); world_size],
                    flops: vec![0; world_size],
                    live: vec![false; world_size],
                    baton: 0,
                    scheduler: Scheduler::Lockstep,
                }),
                cv: Condvar::new(),
            }),
        })
    }

    pub fn with_scheduler(mut self, scheduler: Scheduler) -> Self {
        self.scheduler = scheduler;
        self
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn sp(&self) -> usize {
        self.sp
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn scheduler(&self) -> Scheduler {
        self.scheduler
    }

    pub fn groups(&self) -> &[CommGroup] {
        &self.groups
    }

    pub fn group_of(&self, rank: usize) -> &CommGroup {
        &self.groups[rank / self.sp]
    }

    /// Runs `program` once per rank and returns the per-rank results in rank order.
    pub fn run<T, F>(&self, program: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(RankCtx) -> Result<T> + Sync,
    {
        {
            let mut st = self.shared.lock();
            st.scheduler = self.scheduler;
            st.live = vec![true; self.world_size];
            st.baton = 0;
            st.slots.clear();
        }
        let results: Vec<Result<T>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..self.world_size)
                .map(|rank| {
                    let program = &program;
                    let shared = &*self.shared;
                    let ctx = RankCtx {
                        comm: Comm {
                            shared: self.shared.clone(),
                            rank,
                            elem_bytes: self.precision.elem_bytes(),
                        },
                        group: self.group_of(rank).clone(),
                    };
                    scope.spawn(move || {
                        let _guard = LiveGuard { shared, rank };
                        if self.scheduler == Scheduler::Lockstep {
                            let mut st = shared.lock();
                            while st.baton != rank {
                                st = shared.cv.wait(st).unwrap_or_else(|e| e.into_inner());
                            }
                        }
                        program(ctx)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| match h.join() {
                    Ok(r) => r,
                    Err(p) => std::panic::resume_unwind(p),
                })
                .collect()
        });
        let mut out = Vec::with_capacity(results.len());
        let mut first_err: Option<Error> = None;
        for r in results {
            match r {
                Ok(v) => out.push(v),
                Err(e) => {
                    let secondary = matches!(&e, Error::Collective(m) if m.starts_with("peer rank"));
                    match &first_err {
                        None => first_err = Some(e),
                        Some(Error::Collective(m)) if m.starts_with("peer rank") && !secondary => {
                            first_err = Some(e)
                        }
                        _ => {}
                    }
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    pub fn reset_counters(&self) {
        let mut st = self.shared.lock();
        st.counters = vec![BTreeMap::new(); self.world_size];
        st.flops = vec![0; self.world_size];
    }

    /// Snapshot of per-rank, per-primitive counters.
    pub fn report(&self) -> CommStats {
        let st = self.shared.lock();
        let mut rows = Vec::new();
        for rank in 0..self.world_size {
            for prim in Primitive::ALL {
                let c = st.counters[rank].get(&prim).copied().unwrap_or_default();
                rows.push(StatRow {
                    rank,
                    primitive: prim,
                    calls: c.calls,
                    bytes: c.bytes,
                });
            }
        }
        CommStats {
            rows,
            flops: st.flops.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StatRow {
    pub rank: usize,
    pub primitive: Primitive,
    pub calls: u64,
    pub bytes: u64,
}

/// Per-rank communication counters plus attention FLOPs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommStats {
    pub rows: Vec<StatRow>,
    pub flops: Vec<u64>,
}

impl CommStats {
    pub fn get(&self, rank: usize, prim: Primitive) -> Counter {
        self.rows
            .iter()
            .find(|r| r.rank == rank && r.primitive == prim)
            .map(|r| Counter {
                calls: r.calls,
                bytes: r.bytes,
            })
            .unwrap_or_default()
    }

    /// Total bytes sent by `rank` over every primitive.
    pub fn rank_bytes(&self, rank: usize) -> u64 {
        self.rows.iter().filter(|r| r.rank == rank).map(|r| r.bytes).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.rows.iter().all(|r| r.calls == 0 && r.bytes == 0) && self.flops.iter().all(|&f| f == 0)
    }

    /// CSV with columns `engine,rank,primitive,calls,bytes`.
    pub fn to_csv(&self, engine: &str) -> String {
        let mut s = String::from("engine,rank,primitive,calls,bytes\n");
        for r in &self.rows {
            let _ = writeln!(s, "{engine},{},{},{},{}", r.rank, r.primitive.as_str(), r.calls, r.bytes);
        }
        s
    }
}
