use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::pretrain::vocab::{Vocab, PAD, SPECIALS};

/// Toy language with enough structure for MLM to learn: number agreement
/// between subject and verb, per-document topics, and a determiner/adjective
/// order. All randomness comes from `seed`.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub n_docs: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub n_nouns: usize,
    pub n_verbs: usize,
    pub n_adjectives: usize,
    /// Nouns and verbs available inside one document.
    pub topic_size: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpus {
    fn default() -> Self {
        Self {
            n_docs: 2000,
            min_sentences: 3,
            max_sentences: 8,
            n_nouns: 80,
            n_verbs: 50,
            n_adjectives: 40,
            topic_size: 6,
            seed: 0,
        }
    }
}

const DETS_SG: [&str; 3] = ["the", "a", "this"];
const DETS_PL: [&str; 3] = ["the", "some", "these"];
const PREPS: [&str; 6] = ["near", "under", "with", "behind", "over", "without"];

impl SyntheticCorpus {
    /// Upper bound on vocabulary size including the special tokens.
    pub fn word_types(&self) -> usize {
        // determiners: the, a, this, some, these; plus "."
        SPECIALS.len() + 2 * self.n_nouns + 2 * self.n_verbs + self.n_adjectives + 5 + PREPS.len() + 1
    }

    fn noun_phrase(&self, rng: &mut Rng, noun: usize, plural: bool, out: &mut Vec<String>) {
        let dets: &[&str] = if plural { &DETS_PL } else { &DETS_SG };
        out.push(dets[rng.below(dets.len() as u64) as usize].into());
        if rng.bernoulli(0.4) {
            out.push(format!("adj{}", rng.below(self.n_adjectives as u64)));
        }
        out.push(if plural {
            format!("noun{noun}s")
        } else {
            format!("noun{noun}")
        });
    }

    fn document(&self, rng: &mut Rng) -> String {
        let pick = |rng: &mut Rng, n: usize| -> Vec<usize> {
            (0..self.topic_size).map(|_| rng.below(n as u64) as usize).collect()
        };
        let nouns = pick(rng, self.n_nouns);
        let verbs = pick(rng, self.n_verbs);
        let span = self.max_sentences - self.min_sentences + 1;
        let n = self.min_sentences + rng.below(span as u64) as usize;
        let mut words = Vec::new();
        for _ in 0..n {
            let plural = rng.bernoulli(0.5);
            let subj = nouns[rng.below(nouns.len() as u64) as usize];
            self.noun_phrase(rng, subj, plural, &mut words);
            let verb = verbs[rng.below(verbs.len() as u64) as usize];
            words.push(if plural {
                format!("verb{verb}")
            } else {
                format!("verb{verb}s")
            });
            let obj = nouns[rng.below(nouns.len() as u64) as usize];
            let obj_plural = rng.bernoulli(0.5);
            self.noun_phrase(rng, obj, obj_plural, &mut words);
            if rng.bernoulli(0.3) {
                words.push(PREPS[rng.below(PREPS.len() as u64) as usize].into());
                let o2 = nouns[rng.below(nouns.len() as u64) as usize];
                let p2 = rng.bernoulli(0.5);
                self.noun_phrase(rng, o2, p2, &mut words);
            }
            words.push(".".into());
        }
        words.join(" ")
    }

    /// One document per line.
    pub fn generate(&self) -> Result<Vec<String>> {
        if self.min_sentences == 0 || self.min_sentences > self.max_sentences {
            return Err(Error::invalid("need 0 < min_sentences <= max_sentences"));
        }
        if self.n_nouns == 0 || self.n_verbs == 0 || self.n_adjectives == 0 || self.topic_size == 0 {
            return Err(Error::invalid("word class sizes must be positive"));
        }
        Ok((0..self.n_docs)
            .map(|i| self.document(&mut Rng::stream(self.seed, i as u64)))
            .collect())
    }
}

/// Split each encoded document into `seq_len` segments; the tail is PAD-filled.
pub fn chunk_documents<'a>(
    docs: impl IntoIterator<Item = &'a [u32]>,
    seq_len: usize,
) -> Result<Vec<Vec<u32>>> {
    if seq_len == 0 {
        return Err(Error::invalid("seq_len must be positive"));
    }
    let mut out = Vec::new();
    for doc in docs {
        for chunk in doc.chunks(seq_len) {
            let mut seg = chunk.to_vec();
            seg.resize(seq_len, PAD);
            out.push(seg);
        }
    }
    Ok(out)
}

/// Encode text lines and chunk them.
pub fn encode_corpus(lines: &[String], vocab: &Vocab, seq_len: usize) -> Result<Vec<Vec<u32>>> {
    let encoded: Vec<Vec<u32>> = lines.iter().map(|l| vocab.encode(l)).collect();
    chunk_documents(encoded.iter().map(Vec::as_slice), seq_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        let c = SyntheticCorpus {
            n_docs: 20,
            ..Default::default()
        };
        assert_eq!(c.generate().unwrap(), c.generate().unwrap());
        let other = SyntheticCorpus { seed: 1, ..c.clone() };
        assert_ne!(c.generate().unwrap(), other.generate().unwrap());
    }

    #[test]
    fn vocabulary_fits_the_bound() {
        let c = SyntheticCorpus::default();
        let lines = c.generate().unwrap();
        let v = Vocab::build(lines.iter().map(String::as_str), 10_000).unwrap();
        assert!(v.len() <= c.word_types());
    }

    #[test]
    fn agreement_holds() {
        let c = SyntheticCorpus {
            n_docs: 50,
            ..Default::default()
        };
        for line in c.generate().unwrap() {
            for sentence in line.split(" .") {
                let words: Vec<&str> = sentence.split_whitespace().collect();
                let Some(v) = words.iter().position(|w| w.starts_with("verb")) else { continue };
                let subject_plural = words[v - 1].ends_with('s');
                let verb_singular = words[v].ends_with('s');
                assert_ne!(subject_plural, verb_singular, "{sentence}");
            }
        }
    }

    #[test]
    fn chunking_pads_tail() {
        let segs = chunk_documents([&[7u32, 8, 9, 10, 11][..], &[12][..]], 2).unwrap();
        assert_eq!(segs, vec![vec![7, 8], vec![9, 10], vec![11, PAD], vec![12, PAD]]);
    }
}
