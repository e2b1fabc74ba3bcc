//! Collectives recorded on the gradient tape.

use std::rc::Rc;

use super::{Comm, CommGroup};
use crate::error::Result;
use crate::tensor::ops::FnOp;
use crate::tensor::{Array, Backward, Tensor};

enum Kind {
    /// Backward is the inverse all-to-all.
    AllToAll { scatter: usize, gather: usize },
    /// Backward is a reduce-scatter.
    AllGather { dim: usize },
    /// Backward sums upstream gradients across the group.
    AllReduceGradAware,
}

struct CollectiveBackward {
    comm: Comm,
    group: CommGroup,
    kind: Kind,
}

impl Backward for CollectiveBackward {
    fn name(&self) -> &'static str {
        match self.kind {
            Kind::AllToAll { .. } => "all_to_all",
            Kind::AllGather { .. } => "all_gather",
            Kind::AllReduceGradAware => "all_reduce_grad_aware",
        }
    }

    fn backward(&self, grad: &Array, _inputs: &[Rc<Array>], _output: &Array) -> Result<Vec<Option<Array>>> {
        let g = match self.kind {
            Kind::AllToAll { scatter, gather } => self.comm.all_to_all(&self.group, grad, gather, scatter)?,
            Kind::AllGather { dim } => self.comm.reduce_scatter(&self.group, grad, dim)?,
            Kind::AllReduceGradAware => self.comm.all_reduce(&self.group, grad)?,
        };
        Ok(vec![Some(g)])
    }

    fn is_collective(&self) -> bool {
        true
    }
}

fn record(comm: &Comm, group: &CommGroup, x: &Tensor, out: Array, kind: Kind) -> Result<Tensor> {
    x.tape().record(
        out,
        &[x],
        CollectiveBackward {
            comm: comm.clone(),
            group: group.clone(),
            kind,
        },
    )
}

/// Differentiable all-to-all; the gradient takes the inverse route.
pub fn all_to_all(comm: &Comm, group: &CommGroup, x: &Tensor, scatter: usize, gather: usize) -> Result<Tensor> {
    let out = comm.all_to_all(group, &x.value(), scatter, gather)?;
    if group.size() <= 1 {
        return Ok(x.clone());
    }
    record(comm, group, x, out, Kind::AllToAll { scatter, gather })
}

/// Differentiable all-gather along `dim`; the gradient is reduce-scattered.
pub fn all_gather(comm: &Comm, group: &CommGroup, x: &Tensor, dim: usize) -> Result<Tensor> {
    let out = comm.all_gather(group, &x.value(), dim)?;
    if group.size() <= 1 {
        return Ok(x.clone());
    }
    record(comm, group, x, out, Kind::AllGather { dim })
}

/// Sum across the group whose backward hands the upstream gradient to the local
/// input unchanged. This is the unwrapped primitive that under-scales
/// gradients by the group size.
pub fn all_reduce_plain(comm: &Comm, group: &CommGroup, x: &Tensor) -> Result<Tensor> {
    let out = comm.all_reduce(group, &x.value())?;
    x.tape().record(
        out,
        &[x],
        FnOp::new("all_reduce_plain", |g, _, _| Ok(vec![Some(g.clone())])),
    )
}

/// Sum across the group whose backward also all-reduces the upstream gradient.
pub fn all_reduce_grad_aware(comm: &Comm, group: &CommGroup, x: &Tensor) -> Result<Tensor> {
    let out = comm.all_reduce(group, &x.value())?;
    if group.size() <= 1 {
        return Ok(x.clone());
    }
    record(comm, group, x, out, Kind::AllReduceGradAware)
}
