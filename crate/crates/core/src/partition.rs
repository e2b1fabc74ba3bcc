//! Batch padding, sequence sharding and the per-position metadata that
//! travels with each shard.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::comm::{Comm, CommGroup};
use crate::error::{Error, Result};
use crate::tensor::Array;

/// Label value that excludes a position from the loss. Outside any vocabulary.
pub const IGNORE_INDEX: i64 = -100;

/// Token padding granularity per sequence-parallel rank.
pub const PAD_MULTIPLE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutMode {
    /// Rank `r` owns the `r`-th contiguous block.
    Naive,
    /// `2 sp` chunks; rank `r` owns chunks `r` and `2 sp - 1 - r`.
    Zigzag,
    /// Zigzag over `ring` outer groups, then naive over the `sp / ring` ranks
    /// inside each; rank `i * ulysses + j` holds piece `j` of ring shard `i`.
    RingUlysses { ring: usize },
}

impl std::str::FromStr for LayoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(LayoutMode::Naive),
            "zigzag" => Ok(LayoutMode::Zigzag),
            other => Err(Error::Config(format!("unknown layout '{other}' (naive|zigzag)"))),
        }
    }
}

/// How a padded global sequence is partitioned across the ranks of a group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardLayout {
    mode: LayoutMode,
    sp: usize,
    global_len: usize,
    indices: Vec<Vec<usize>>,
}

fn zigzag_indices(len: usize, sp: usize) -> Result<Vec<Vec<usize>>> {
    if len % (2 * sp) != 0 {
        return Err(Error::Divisibility {
            what: "zigzag sequence length",
            value: len,
            by: 2 * sp,
        });
    }
    let chunk = len / (2 * sp);
    Ok((0..sp)
        .map(|r| {
            let lo = r * chunk..(r + 1) * chunk;
            let hi = (2 * sp - 1 - r) * chunk..(2 * sp - r) * chunk;
            lo.chain(hi).collect()
        })
        .collect())
}

impl ShardLayout {
    pub fn new(mode: LayoutMode, global_len: usize, sp: usize) -> Result<Self> {
        if sp == 0 {
            return Err(Error::Config("sp must be positive".into()));
        }
        let indices = match mode {
            LayoutMode::Naive => {
                if global_len % sp != 0 {
                    return Err(Error::Divisibility {
                        what: "sequence length",
                        value: global_len,
                        by: sp,
                    });
                }
                let n = global_len / sp;
                (0..sp).map(|r| (r * n..(r + 1) * n).collect()).collect()
            }
            LayoutMode::Zigzag => zigzag_indices(global_len, sp)?,
            LayoutMode::RingUlysses { ring } => {
                if ring == 0 || sp % ring != 0 {
                    return Err(Error::Config(format!(
                        "ring degree {ring} does not divide sp {sp}"
                    )));
                }
                let ulysses = sp / ring;
                let outer = zigzag_indices(global_len, ring)?;
                let piece = global_len / sp;
                outer
                    .iter()
                    .flat_map(|shard| shard.chunks(piece).map(<[usize]>::to_vec))
                    .collect::<Vec<_>>()
                    .into_iter()
                    .take(ring * ulysses)
                    .collect()
            }
        };
        Ok(ShardLayout {
            mode,
            sp,
            global_len,
            indices,
        })
    }

    pub fn naive(global_len: usize, sp: usize) -> Result<Self> {
        Self::new(LayoutMode::Naive, global_len, sp)
    }

    pub fn zigzag(global_len: usize, sp: usize) -> Result<Self> {
        Self::new(LayoutMode::Zigzag, global_len, sp)
    }

    pub fn mode(&self) -> LayoutMode {
        self.mode
    }

    pub fn sp(&self) -> usize {
        self.sp
    }

    pub fn global_len(&self) -> usize {
        self.global_len
    }

    pub fn local_len(&self) -> usize {
        self.global_len / self.sp
    }

    /// Global positions owned by `rank`, in local order.
    pub fn indices(&self, rank: usize) -> &[usize] {
        &self.indices[rank]
    }

    pub fn all_indices(&self) -> &[Vec<usize>] {
        &self.indices
    }

    pub fn shard<T: Clone>(&self, seq: &[T], rank: usize) -> Result<Vec<T>> {
        if seq.len() != self.global_len {
            return Err(Error::invalid(
                "shard",
                format!("sequence length {} != layout length {}", seq.len(), self.global_len),
            ));
        }
        if rank >= self.sp {
            return Err(Error::invalid("shard", format!("rank {rank} outside group of {}", self.sp)));
        }
        Ok(self.indices[rank].iter().map(|&i| seq[i].clone()).collect())
    }

    /// Reassembles a sequence from shards tagged `(rank, data)`; tags must be `0..sp` in order.
    pub fn gather<T: Clone + Default>(&self, shards: &[(usize, Vec<T>)]) -> Result<Vec<T>> {
        if shards.len() != self.sp || shards.iter().enumerate().any(|(i, (r, _))| *r != i) {
            return Err(Error::invalid(
                "gather",
                format!(
                    "expected shards for ranks 0..{} in order, got {:?}",
                    self.sp,
                    shards.iter().map(|(r, _)| *r).collect::<Vec<_>>()
                ),
            ));
        }
        let mut out = vec![T::default(); self.global_len];
        for (rank, data) in shards {
            if data.len() != self.local_len() {
                return Err(Error::invalid(
                    "gather",
                    format!("rank {rank} shard has {} entries, expected {}", data.len(), self.local_len()),
                ));
            }
            for (&g, v) in self.indices[*rank].iter().zip(data) {
                out[g] = v.clone();
            }
        }
        Ok(out)
    }

    /// Reassembles rank arrays along `axis` into global order.
    pub fn gather_array(&self, shards: &[Array], axis: usize) -> Result<Array> {
        let refs: Vec<&Array> = shards.iter().collect();
        let cat = Array::concat(&refs, axis)?;
        let order: Vec<usize> = self.indices.iter().flatten().copied().collect();
        let mut inverse = vec![0; order.len()];
        for (local, &g) in order.iter().enumerate() {
            inverse[g] = local;
        }
        cat.index_select(axis, &inverse)
    }

    /// Global position ids for RoPE on `rank`.
    pub fn position_ids(&self, rank: usize) -> Vec<usize> {
        self.indices[rank].clone()
    }

    /// Number of causal (query, key) pairs each rank computes: `sum over owned i of (i + 1)`.
    pub fn causal_pair_counts(&self) -> Vec<u64> {
        self.indices
            .iter()
            .map(|idx| idx.iter().map(|&i| i as u64 + 1).sum())
            .collect()
    }
}

pub fn make_position_ids(layout: &ShardLayout, rank: usize) -> Vec<usize> {
    layout.position_ids(rank)
}

/// Splits an image position map (`-1` or a visual-token index) like the tokens.
pub fn split_position_map(map: &[i64], layout: &ShardLayout, rank: usize) -> Result<Vec<i64>> {
    layout.shard(map, rank)
}

/// Copies the full packing mask from group position 0 to every rank.
pub fn replicate_packing_mask(comm: &Comm, group: &CommGroup, mask: &[u32]) -> Result<Vec<u32>> {
    let arr = Array::from_vec(mask.iter().map(|&s| s as f64).collect());
    let out = comm.broadcast(group, &arr, 0)?;
    Ok(out.data().iter().map(|&v| v as u32).collect())
}

/// One training sequence with per-position metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainBatch {
    pub tokens: Vec<u32>,
    /// Token to predict at each position (`labels[i] == tokens[i]` when supervised),
    /// or [`IGNORE_INDEX`].
    pub labels: Vec<i64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub position_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_ids: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_map: Option<Vec<i64>>,
}

/// Which padded length to choose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadTarget {
    /// Smallest multiple of `8 sp` that holds the sequence.
    #[default]
    NextMultiple,
    /// Largest multiple of `8 sp` not exceeding the cutoff length.
    Cutoff,
}

impl TrainBatch {
    pub fn new(tokens: Vec<u32>, labels: Vec<i64>) -> Result<Self> {
        let mut b = TrainBatch {
            tokens,
            labels,
            position_ids: Vec::new(),
            segment_ids: None,
            image_map: None,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks field lengths and fills default position ids `0..L`.
    pub fn validate(&mut self) -> Result<()> {
        let n = self.tokens.len();
        let bad = |what: &str, len: usize| {
            Err(Error::invalid("batch", format!("{what} has {len} entries for {n} tokens")))
        };
        if self.labels.len() != n {
            return bad("labels", self.labels.len());
        }
        if self.position_ids.is_empty() {
            self.position_ids = (0..n).collect();
        } else if self.position_ids != (0..n).collect::<Vec<_>>() {
            return Err(Error::invalid("batch", "position ids must be 0..L before sharding"));
        }
        if let Some(s) = &self.segment_ids {
            if s.len() != n {
                return bad("segment_ids", s.len());
            }
        }
        if let Some(m) = &self.image_map {
            if m.len() != n {
                return bad("image_map", m.len());
            }
        }
        Ok(())
    }

    /// Targets aligned with logits: position `i` predicts `labels[i + 1]`.
    /// Shifting happens before sharding so shard boundaries lose nothing.
    pub fn next_token_targets(&self) -> Vec<i64> {
        let mut t: Vec<i64> = self.labels.iter().skip(1).copied().collect();
        t.push(IGNORE_INDEX);
        t
    }

    pub fn supervised_count(&self) -> usize {
        self.next_token_targets().iter().filter(|&&t| t != IGNORE_INDEX).count()
    }
}

/// Padded length for `len` tokens under sequence parallel size `sp`.
pub fn padded_len(len: usize, sp: usize, cutoff_len: usize, target: PadTarget) -> Result<usize> {
    if sp == 0 {
        return Err(Error::Config("sp must be positive".into()));
    }
    let m = PAD_MULTIPLE * sp;
    let out = match target {
        PadTarget::NextMultiple => len.div_ceil(m) * m,
        PadTarget::Cutoff => cutoff_len / m * m,
    };
    if out < len.max(1) || out > cutoff_len {
        return Err(Error::Config(format!(
            "cannot pad {len} tokens to a multiple of {m} within cutoff_len {cutoff_len}"
        )));
    }
    Ok(out)
}

/// Pads a batch so its length is a multiple of `8 sp`. Padded labels are
/// ignored and position ids keep counting.
pub fn pad_batch(
    batch: &TrainBatch,
    sp: usize,
    pad_token: u32,
    cutoff_len: usize,
    target: PadTarget,
) -> Result<TrainBatch> {
    let len = batch.len();
    if cutoff_len < len {
        return Err(Error::Config(format!(
            "cutoff_len {cutoff_len} is shorter than the batch ({len} tokens)"
        )));
    }
    let new_len = padded_len(len, sp, cutoff_len, target)?;
    let extra = new_len - len;
    let mut out = batch.clone();
    out.tokens.extend(std::iter::repeat_n(pad_token, extra));
    out.labels.extend(std::iter::repeat_n(IGNORE_INDEX, extra));
    out.position_ids = (0..new_len).collect();
    if let Some(s) = &mut out.segment_ids {
        s.extend(std::iter::repeat_n(0, extra));
    }
    if let Some(m) = &mut out.image_map {
        m.extend(std::iter::repeat_n(-1, extra));
    }
    Ok(out)
}

/// The slice of a padded batch that one rank works on.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalShard {
    pub tokens: Vec<u32>,
    pub targets: Vec<i64>,
    pub position_ids: Vec<usize>,
    pub image_map: Option<Vec<i64>>,
}

/// Shards tokens, shifted targets, position ids and the image map with one layout.
pub fn shard_batch(batch: &TrainBatch, layout: &ShardLayout, rank: usize) -> Result<LocalShard> {
    Ok(LocalShard {
        tokens: layout.shard(&batch.tokens, rank)?,
        targets: layout.shard(&batch.next_token_targets(), rank)?,
        position_ids: make_position_ids(layout, rank),
        image_map: batch
            .image_map
            .as_ref()
            .map(|m| split_position_map(m, layout, rank))
            .transpose()?,
    })
}

/// A preference pair; both sides share one layout mode but are padded independently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub chosen: TrainBatch,
    pub rejected: TrainBatch,
}

/// Reads JSON-lines batches (`tokens`, `labels`, optional `segment_ids`, `image_map`).
pub fn read_batches(reader: impl BufRead) -> Result<Vec<TrainBatch>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut b: TrainBatch = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("batch line {}: {e}", i + 1)))?;
        b.validate()?;
        out.push(b);
    }
    Ok(out)
}

/// Reads JSON-lines preference pairs (`{"chosen": {...}, "rejected": {...}}`).
pub fn read_pairs(reader: impl BufRead) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut p: PreferencePair = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("pair line {}: {e}", i + 1)))?;
        p.chosen.validate()?;
        p.rejected.validate()?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(len: usize) -> TrainBatch {
        TrainBatch::new((0..len as u32).collect(), (0..len as i64).collect()).unwrap()
    }

    #[test]
    fn pad_examples() {
        assert_eq!(pad_batch(&batch(100), 4, 0, 4096, PadTarget::NextMultiple).unwrap().len(), 128);
        assert_eq!(pad_batch(&batch(64), 4, 0, 4096, PadTarget::NextMultiple).unwrap().len(), 64);
        assert_eq!(pad_batch(&batch(17), 2, 0, 4096, PadTarget::NextMultiple).unwrap().len(), 32);
    }

    #[test]
    fn pad_to_cutoff_flag() {
        let b = pad_batch(&batch(17), 2, 0, 100, PadTarget::Cutoff).unwrap();
        assert_eq!(b.len(), 96);
        assert!(pad_batch(&batch(17), 2, 0, 20, PadTarget::Cutoff).is_err());
    }

    #[test]
    fn pad_rejects_small_cutoff() {
        assert!(pad_batch(&batch(100), 4, 0, 120, PadTarget::NextMultiple).is_err());
        assert!(pad_batch(&batch(100), 4, 0, 99, PadTarget::NextMultiple).is_err());
    }

    #[test]
    fn padded_fields() {
        let mut b = batch(5);
        b.image_map = Some(vec![-1, 0, 1, -1, -1]);
        b.segment_ids = Some(vec![1, 1, 2, 2, 2]);
        let p = pad_batch(&b, 1, 99, 64, PadTarget::NextMultiple).unwrap();
        assert_eq!(p.len(), 8);
        assert_eq!(&p.tokens[5..], &[99, 99, 99]);
        assert_eq!(&p.labels[5..], &[IGNORE_INDEX; 3]);
        assert_eq!(p.position_ids, (0..8).collect::<Vec<_>>());
        assert_eq!(&p.image_map.unwrap()[5..], &[-1, -1, -1]);
        assert_eq!(&p.segment_ids.unwrap()[5..], &[0, 0, 0]);
    }

    #[test]
    fn shard_examples() {
        let seq: Vec<usize> = (0..8).collect();
        let naive = ShardLayout::naive(8, 2).unwrap();
        assert_eq!(naive.shard(&seq, 1).unwrap(), vec![4, 5, 6, 7]);
        let zz = ShardLayout::zigzag(8, 2).unwrap();
        assert_eq!(zz.shard(&seq, 0).unwrap(), vec![0, 1, 6, 7]);
        assert_eq!(zz.shard(&seq, 1).unwrap(), vec![2, 3, 4, 5]);
        let one = ShardLayout::zigzag(8, 1).unwrap();
        assert_eq!(one.shard(&seq, 0).unwrap(), seq);
        assert!(naive.shard(&seq[..6], 0).is_err());
    }

    #[test]
    fn gather_rejects_bad_rank_tags() {
        let zz = ShardLayout::zigzag(8, 2).unwrap();
        let seq: Vec<u32> = (10..18).collect();
        let s0 = zz.shard(&seq, 0).unwrap();
        let s1 = zz.shard(&seq, 1).unwrap();
        assert_eq!(zz.gather(&[(0, s0.clone()), (1, s1.clone())]).unwrap(), seq);
        assert!(zz.gather(&[(1, s1.clone()), (0, s0.clone())]).is_err());
        assert!(zz.gather(&[(0, s0.clone())]).is_err());
        assert!(zz.gather(&[(0, s0.clone()), (0, s0)]).is_err());
    }

    #[test]
    fn position_id_examples() {
        let zz = ShardLayout::zigzag(8, 2).unwrap();
        assert_eq!(make_position_ids(&zz, 0), vec![0, 1, 6, 7]);
        let naive = ShardLayout::naive(8, 2).unwrap();
        assert_eq!(make_position_ids(&naive, 1), vec![4, 5, 6, 7]);
        let one = ShardLayout::naive(8, 1).unwrap();
        assert_eq!(make_position_ids(&one, 0), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn position_map_examples() {
        let map = [-1, -1, 0, 1, 2, -1, -1, -1];
        let naive = ShardLayout::naive(8, 2).unwrap();
        assert_eq!(split_position_map(&map, &naive, 0).unwrap(), vec![-1, -1, 0, 1]);
        assert_eq!(split_position_map(&map, &naive, 1).unwrap(), vec![2, -1, -1, -1]);
        let zz = ShardLayout::zigzag(8, 2).unwrap();
        assert_eq!(split_position_map(&map, &zz, 0).unwrap(), vec![-1, -1, -1, -1]);
        assert_eq!(split_position_map(&map, &zz, 1).unwrap(), vec![0, 1, 2, -1]);
        let text = [-1i64; 8];
        for r in 0..2 {
            assert!(split_position_map(&text, &zz, r).unwrap().iter().all(|&v| v == -1));
        }
        assert!(split_position_map(&map[..4], &zz, 0).is_err());
    }

    #[test]
    fn causal_balance_examples() {
        assert_eq!(ShardLayout::zigzag(8, 2).unwrap().causal_pair_counts(), vec![18, 18]);
        assert_eq!(ShardLayout::naive(8, 2).unwrap().causal_pair_counts(), vec![10, 26]);
        assert_eq!(ShardLayout::naive(8, 1).unwrap().causal_pair_counts(), vec![36]);
    }

    #[test]
    fn ring_ulysses_layout_degenerates() {
        let a = ShardLayout::new(LayoutMode::RingUlysses { ring: 1 }, 32, 4).unwrap();
        assert_eq!(a.all_indices(), ShardLayout::naive(32, 4).unwrap().all_indices());
        let b = ShardLayout::new(LayoutMode::RingUlysses { ring: 4 }, 32, 4).unwrap();
        assert_eq!(b.all_indices(), ShardLayout::zigzag(32, 4).unwrap().all_indices());
        let c = ShardLayout::new(LayoutMode::RingUlysses { ring: 2 }, 16, 4).unwrap();
        // ring shard 0 = {0..4, 12..16}, split naive over two ranks
        assert_eq!(c.indices(0), &[0, 1, 2, 3]);
        assert_eq!(c.indices(1), &[12, 13, 14, 15]);
        assert_eq!(c.indices(2), &[4, 5, 6, 7]);
        assert_eq!(c.indices(3), &[8, 9, 10, 11]);
    }

    #[test]
    fn next_token_targets_shift_before_sharding() {
        let b = TrainBatch::new(vec![5, 6, 7], vec![IGNORE_INDEX, 6, 7]).unwrap();
        assert_eq!(b.next_token_targets(), vec![6, 7, IGNORE_INDEX]);
        assert_eq!(b.supervised_count(), 2);
    }

    #[test]
    fn jsonl_round_trip() {
        let text = "{\"tokens\":[1,2],\"labels\":[-100,2]}\n\n{\"tokens\":[3],\"labels\":[3],\"image_map\":[-1]}\n";
        let bs = read_batches(text.as_bytes()).unwrap();
        assert_eq!(bs.len(), 2);
        assert_eq!(bs[1].image_map, Some(vec![-1]));
        assert!(read_batches("{\"tokens\":[1],\"labels\":[]}".as_bytes()).is_err());
        let pair = "{\"chosen\":{\"tokens\":[1],\"labels\":[1]},\"rejected\":{\"tokens\":[2],\"labels\":[2]}}";
        assert_eq!(read_pairs(pair.as_bytes()).unwrap().len(), 1);
    }
}
