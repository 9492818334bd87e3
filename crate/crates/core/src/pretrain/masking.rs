use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::pretrain::vocab::{Vocab, MASK, SPECIALS};

/// Label value for positions that are not predicted.
pub const IGNORE: i32 = -1;

/// Counts over masked positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskStats {
    /// Non-special positions seen.
    pub eligible: u64,
    pub selected: u64,
    pub replaced_mask: u64,
    pub replaced_random: u64,
    pub kept: u64,
}

impl MaskStats {
    pub fn merge(&mut self, o: &MaskStats) {
        self.eligible += o.eligible;
        self.selected += o.selected;
        self.replaced_mask += o.replaced_mask;
        self.replaced_random += o.replaced_random;
        self.kept += o.kept;
    }

    pub fn selected_fraction(&self) -> f64 {
        self.selected as f64 / self.eligible.max(1) as f64
    }

    /// Fractions of selected positions that became MASK, a random id, or stayed.
    pub fn split(&self) -> [f64; 3] {
        let s = self.selected.max(1) as f64;
        [
            self.replaced_mask as f64 / s,
            self.replaced_random as f64 / s,
            self.kept as f64 / s,
        ]
    }
}

pub fn check_mask_rate(rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::invalid(format!("mask rate must lie in (0, 1), got {rate}")));
    }
    Ok(())
}

/// Select each non-special position with probability `rate`; of the selected,
/// 80% become MASK, 10% a uniformly drawn non-special id, 10% stay unchanged.
/// Labels carry the original id at selected positions and `IGNORE` elsewhere.
pub fn mask_tokens(
    ids: &[u32],
    rate: f64,
    vocab_size: usize,
    rng: &mut Rng,
    stats: &mut MaskStats,
) -> (Vec<u32>, Vec<i32>) {
    let first_regular = SPECIALS.len() as u64;
    let mut input = ids.to_vec();
    let mut labels = vec![IGNORE; ids.len()];
    for (i, &id) in ids.iter().enumerate() {
        if Vocab::is_special(id) {
            continue;
        }
        stats.eligible += 1;
        if !rng.bernoulli(rate) {
            continue;
        }
        stats.selected += 1;
        labels[i] = id as i32;
        let r = rng.uniform();
        if r < 0.8 {
            input[i] = MASK;
            stats.replaced_mask += 1;
        } else if r < 0.9 {
            input[i] = (first_regular + rng.below(vocab_size as u64 - first_regular)) as u32;
            stats.replaced_random += 1;
        } else {
            stats.kept += 1;
        }
    }
    (input, labels)
}
