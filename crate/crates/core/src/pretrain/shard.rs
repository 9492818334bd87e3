//! Masked-shard files: `BGSH` magic, then little-endian u32 version, sequence
//! length and count, then per sequence `L` u32 input ids followed by `L` i32 labels.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::pretrain::masking::{check_mask_rate, mask_tokens, MaskStats};

const MAGIC: &[u8; 4] = b"BGSH";
const VERSION: u32 = 1;
const HEADER: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shard {
    pub seq_len: usize,
    pub input_ids: Vec<u32>,
    pub labels: Vec<i32>,
}

impl Shard {
    pub fn new(seq_len: usize) -> Self {
        Self {
            seq_len,
            input_ids: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.input_ids.len().checked_div(self.seq_len).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, ids: &[u32], labels: &[i32]) -> Result<()> {
        if ids.len() != self.seq_len || labels.len() != self.seq_len {
            return Err(Error::invalid(format!(
                "sequence of length {} / {} in a shard of length {}",
                ids.len(),
                labels.len(),
                self.seq_len
            )));
        }
        self.input_ids.extend_from_slice(ids);
        self.labels.extend_from_slice(labels);
        Ok(())
    }

    pub fn sequence(&self, i: usize) -> (&[u32], &[i32]) {
        let r = i * self.seq_len..(i + 1) * self.seq_len;
        (&self.input_ids[r.clone()], &self.labels[r])
    }

    pub fn extend(&mut self, other: &Shard) -> Result<()> {
        if other.seq_len != self.seq_len {
            return Err(Error::invalid("cannot merge shards of different lengths"));
        }
        self.input_ids.extend_from_slice(&other.input_ids);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(HEADER + 8 * self.input_ids.len());
        b.extend_from_slice(MAGIC);
        for v in [VERSION, self.seq_len as u32, self.len() as u32] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..self.len() {
            let (ids, labels) = self.sequence(i);
            b.extend(ids.iter().flat_map(|v| v.to_le_bytes()));
            b.extend(labels.iter().flat_map(|v| v.to_le_bytes()));
        }
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let bad = |d: String| Error::format("shard", d);
        if b.len() < HEADER || &b[..4] != MAGIC {
            return Err(bad("missing BGSH header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().expect("4 bytes"));
        let (version, seq_len, count) = (word(4), word(8) as usize, word(12) as usize);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        if seq_len == 0 {
            return Err(bad("zero sequence length".into()));
        }
        let expect = HEADER + count * seq_len * 8;
        if b.len() != expect {
            return Err(bad(format!("{} bytes, header implies {expect}", b.len())));
        }
        let mut shard = Shard::new(seq_len);
        for s in 0..count {
            let base = HEADER + s * seq_len * 8;
            shard.input_ids.extend((0..seq_len).map(|j| word(base + 4 * j)));
            shard
                .labels
                .extend((0..seq_len).map(|j| word(base + 4 * (seq_len + j)) as i32));
        }
        Ok(shard)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Mask `segments` into `n_shards` contiguous shards on worker threads. Shard
/// `i` draws from `Rng::stream(seed, i)`, so output is independent of scheduling.
pub fn prepare_shards(
    segments: &[Vec<u32>],
    seq_len: usize,
    n_shards: usize,
    mask_rate: f64,
    vocab_size: usize,
    seed: u64,
) -> Result<(Vec<Shard>, MaskStats)> {
    check_mask_rate(mask_rate)?;
    if n_shards == 0 {
        return Err(Error::invalid("need at least one shard"));
    }
    if let Some(s) = segments.iter().find(|s| s.len() != seq_len) {
        return Err(Error::invalid(format!("segment of length {} (expected {seq_len})", s.len())));
    }
    let per = segments.len().div_ceil(n_shards).max(1);
    let parts: Vec<&[Vec<u32>]> = (0..n_shards)
        .map(|i| {
            let lo = (i * per).min(segments.len());
            let hi = ((i + 1) * per).min(segments.len());
            &segments[lo..hi]
        })
        .collect();
    let results: Vec<(Shard, MaskStats)> = std::thread::scope(|scope| {
        let handles: Vec<_> = parts
            .iter()
            .enumerate()
            .map(|(i, part)| {
                scope.spawn(move || {
                    let mut rng = Rng::stream(seed, i as u64);
                    let mut stats = MaskStats::default();
                    let mut shard = Shard::new(seq_len);
                    for seg in part.iter() {
                        let (inp, lab) = mask_tokens(seg, mask_rate, vocab_size, &mut rng, &mut stats);
                        shard.input_ids.extend(inp);
                        shard.labels.extend(lab);
                    }
                    (shard, stats)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("shard worker panicked"))
            .collect()
    });
    let mut total = MaskStats::default();
    let shards = results
        .into_iter()
        .map(|(s, st)| {
            total.merge(&st);
            s
        })
        .collect();
    Ok((shards, total))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn segs() -> Vec<Vec<u32>> {
        (0..37).map(|i| (0..8).map(|j| 5 + ((i * 8 + j) % 40) as u32).collect()).collect()
    }

    #[test]
    fn bytes_round_trip() {
        let (shards, _) = prepare_shards(&segs(), 8, 3, 0.15, 45, 9).unwrap();
        for s in &shards {
            assert_eq!(&Shard::from_bytes(&s.to_bytes()).unwrap(), s);
        }
        assert_eq!(shards.iter().map(Shard::len).sum::<usize>(), 37);
    }

    #[test]
    fn preparation_is_deterministic() {
        let a = prepare_shards(&segs(), 8, 4, 0.15, 45, 9).unwrap();
        let b = prepare_shards(&segs(), 8, 4, 0.15, 45, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let (shards, _) = prepare_shards(&segs(), 8, 1, 0.15, 45, 9).unwrap();
        let mut b = shards[0].to_bytes();
        b.pop();
        assert!(Shard::from_bytes(&b).is_err());
        b[0] = b'X';
        assert!(Shard::from_bytes(&b).is_err());
    }
}
