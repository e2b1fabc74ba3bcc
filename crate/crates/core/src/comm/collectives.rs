//! Pure data movement for each collective, evaluated once all contributions
//! of a group are present. Inputs and outputs are indexed by position in the group.

use crate::error::{Error, Result};
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum CollectiveOp {
    AllToAll { scatter: usize, gather: usize },
    AllGather { dim: usize },
    ReduceScatter { dim: usize },
    AllReduce,
    Broadcast { root: usize },
    /// Position `i` receives the payload of `i - 1` (or `i + 1` when reversed).
    RingShift { reverse: bool },
}

impl CollectiveOp {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            CollectiveOp::AllToAll { .. } => "all_to_all",
            CollectiveOp::AllGather { .. } => "all_gather",
            CollectiveOp::ReduceScatter { .. } => "reduce_scatter",
            CollectiveOp::AllReduce => "all_reduce",
            CollectiveOp::Broadcast { .. } => "broadcast",
            CollectiveOp::RingShift { .. } => "ring_shift",
        }
    }
}

fn single(op: &CollectiveOp, payload: &[Array]) -> Result<Array> {
    match payload {
        [a] => Ok(a.clone()),
        _ => Err(Error::Collective(format!(
            "{} expects one array per rank, got {}",
            op.name(),
            payload.len()
        ))),
    }
}

fn same_shapes(op: &CollectiveOp, inputs: &[Vec<Array>]) -> Result<()> {
    let first = &inputs[0];
    for (r, p) in inputs.iter().enumerate().skip(1) {
        if p.len() != first.len() || p.iter().zip(first).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Collective(format!(
                "{}: rank {r} payload shapes {:?} differ from rank 0 shapes {:?}",
                op.name(),
                p.iter().map(|a| a.shape().to_vec()).collect::<Vec<_>>(),
                first.iter().map(|a| a.shape().to_vec()).collect::<Vec<_>>(),
            )));
        }
    }
    Ok(())
}

/// Rank-ordered pairwise sum; identical inputs of a power-of-two group sum exactly.
pub(crate) fn tree_sum(parts: &[Array]) -> Result<Array> {
    match parts.len() {
        0 => Err(Error::Collective("empty reduction".into())),
        1 => Ok(parts[0].clone()),
        n => {
            let mid = n / 2;
            tree_sum(&parts[..mid])?.zip_map(&tree_sum(&parts[mid..])?, |a, b| a + b)
        }
    }
}

pub(crate) fn evaluate(op: &CollectiveOp, inputs: &[Vec<Array>]) -> Result<Vec<Vec<Array>>> {
    let n = inputs.len();
    match op {
        CollectiveOp::AllToAll { scatter, gather } => {
            same_shapes(op, inputs)?;
            let pieces: Vec<Vec<Array>> = inputs
                .iter()
                .map(|p| single(op, p)?.chunk(*scatter, n))
                .collect::<Result<_>>()?;
            (0..n)
                .map(|r| {
                    let parts: Vec<&Array> = pieces.iter().map(|p| &p[r]).collect();
                    Ok(vec![Array::concat(&parts, *gather)?])
                })
                .collect()
        }
        CollectiveOp::AllGather { dim } => {
            let arrays: Vec<Array> = inputs.iter().map(|p| single(op, p)).collect::<Result<_>>()?;
            let refs: Vec<&Array> = arrays.iter().collect();
            let out = Array::concat(&refs, *dim).map_err(|e| {
                Error::Collective(format!("all_gather: mismatched shards: {e}"))
            })?;
            Ok(vec![vec![out]; n])
        }
        CollectiveOp::ReduceScatter { dim } => {
            same_shapes(op, inputs)?;
            let arrays: Vec<Array> = inputs.iter().map(|p| single(op, p)).collect::<Result<_>>()?;
            let total = tree_sum(&arrays)?;
            Ok(total.chunk(*dim, n)?.into_iter().map(|a| vec![a]).collect())
        }
        CollectiveOp::AllReduce => {
            same_shapes(op, inputs)?;
            let arrays: Vec<Array> = inputs.iter().map(|p| single(op, p)).collect::<Result<_>>()?;
            let total = tree_sum(&arrays)?;
            Ok(vec![vec![total]; n])
        }
        CollectiveOp::Broadcast { root } => {
            let src = inputs
                .get(*root)
                .ok_or_else(|| Error::Collective(format!("broadcast root {root} outside group of {n}")))?;
            Ok(vec![src.clone(); n])
        }
        CollectiveOp::RingShift { reverse } => {
            same_shapes(op, inputs)?;
            Ok((0..n)
                .map(|r| {
                    let src = if *reverse { (r + 1) % n } else { (r + n - 1) % n };
                    inputs[src].clone()
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Array {
        Array::from_vec(data.to_vec())
    }

    /// Independent permutation oracle: output[r][s-th block] = input[s][r-th block].
    fn all_to_all_oracle(inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = inputs.len();
        let block = inputs[0].len() / n;
        (0..n)
            .map(|r| {
                (0..n)
                    .flat_map(|s| inputs[s][r * block..(r + 1) * block].to_vec())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn all_to_all_two_ranks() {
        // rank0 = [A0, A1], rank1 = [B0, B1]
        let inputs = vec![vec![v(&[1., 2.])], vec![v(&[3., 4.])]];
        let out = evaluate(&CollectiveOp::AllToAll { scatter: 0, gather: 0 }, &inputs).unwrap();
        assert_eq!(out[0][0].data(), &[1., 3.]);
        assert_eq!(out[1][0].data(), &[2., 4.]);
    }

    #[test]
    fn all_to_all_matches_permutation_oracle() {
        let raw: Vec<Vec<f64>> = (0..4)
            .map(|r| (0..8).map(|i| (r * 10 + i) as f64).collect())
            .collect();
        let inputs: Vec<Vec<Array>> = raw.iter().map(|d| vec![v(d)]).collect();
        let out = evaluate(&CollectiveOp::AllToAll { scatter: 0, gather: 0 }, &inputs).unwrap();
        for (o, e) in out.iter().zip(all_to_all_oracle(&raw)) {
            assert_eq!(o[0].data(), &e[..]);
        }
    }

    #[test]
    fn ring_shift_four_ranks() {
        let inputs: Vec<Vec<Array>> = (0..4).map(|r| vec![v(&[r as f64])]).collect();
        let out = evaluate(&CollectiveOp::RingShift { reverse: false }, &inputs).unwrap();
        assert_eq!(out[2][0].data(), &[1.0]);
        let back = evaluate(&CollectiveOp::RingShift { reverse: true }, &out).unwrap();
        assert_eq!(back, inputs);
    }

    #[test]
    fn mismatched_shapes_fail() {
        let inputs = vec![vec![v(&[1., 2.])], vec![v(&[3.])]];
        assert!(evaluate(&CollectiveOp::AllReduce, &inputs).is_err());
        assert!(evaluate(&CollectiveOp::RingShift { reverse: false }, &inputs).is_err());
        let inputs = vec![
            vec![Array::zeros(&[2, 3])],
            vec![Array::zeros(&[3, 3])],
        ];
        assert!(evaluate(&CollectiveOp::AllGather { dim: 1 }, &inputs).is_err());
    }
}
