//! Run configuration: a flat `key = value` file (TOML syntax; `[section]`
//! headers are accepted and ignored) plus `--set` overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Arch, ModelConfig, Routing};
use crate::numerics::derive_seed;
use crate::pretrain::{check_mask_rate, TrainConfig};

/// Corpus and masking settings for `prepare`.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Text corpus, one document per line; the synthetic corpus is used when unset.
    pub corpus: Option<String>,
    pub mask_rate: f64,
    pub n_shards: usize,
    pub heldout_frac: f64,
    pub vocab_max: usize,
    pub synthetic_docs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            mask_rate: 0.15,
            n_shards: 4,
            heldout_frac: 0.1,
            vocab_max: 512,
            synthetic_docs: 3000,
        }
    }
}

impl DataConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::invalid(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "corpus" => self.corpus = Some(value.to_string()),
            "mask_rate" => self.mask_rate = parse(key, value)?,
            "n_shards" => self.n_shards = parse(key, value)?,
            "heldout_frac" => self.heldout_frac = parse(key, value)?,
            "vocab_max" => self.vocab_max = parse(key, value)?,
            "synthetic_docs" => self.synthetic_docs = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        check_mask_rate(self.mask_rate)?;
        if self.n_shards == 0 {
            return Err(Error::invalid("n_shards must be positive"));
        }
        if !(self.heldout_frac > 0.0 && self.heldout_frac < 1.0) {
            return Err(Error::invalid("heldout_frac must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Full,
}

/// Fully resolved settings for one invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Sub-seeds for the independent random consumers of a run.
pub mod streams {
    pub const MODEL_INIT: u64 = 1;
    pub const MASKING: u64 = 2;
    pub const CORPUS: u64 = 3;
    pub const TRAINING: u64 = 4;
}

fn value_text(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Flatten a parsed file into `(key, value)` pairs; section names are dropped.
fn flatten(table: &toml::Table, out: &mut Vec<(String, String)>) -> Result<()> {
    for (k, v) in table {
        match v {
            toml::Value::Table(t) => flatten(t, out)?,
            toml::Value::Array(_) => return Err(Error::invalid(format!("`{k}`: arrays are not supported"))),
            _ => out.push((k.clone(), value_text(v))),
        }
    }
    Ok(())
}

pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::format("config", e.to_string()))?;
    let mut out = Vec::new();
    flatten(&table, &mut out)?;
    Ok(out)
}

pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().trim_matches('"').to_string()))
}

impl RunConfig {
    /// Resolve from an optional file, `--set` pairs (later wins) and an optional seed flag.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)], seed: Option<u64>) -> Result<Self> {
        let mut pairs = match file {
            Some(p) => parse_config_text(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs, seed)
    }

    pub fn from_pairs(pairs: &[(String, String)], seed_flag: Option<u64>) -> Result<Self> {
        let last = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let arch: Arch = last("arch").unwrap_or("gated").parse()?;
        let routing: Routing = last("routing").unwrap_or("ssm").parse()?;
        let preset = match last("preset").unwrap_or("toy") {
            "toy" => Preset::Toy,
            "full" => Preset::Full,
            other => return Err(Error::invalid(format!("unknown preset `{other}` (toy|full)"))),
        };
        let model = match preset {
            Preset::Toy => ModelConfig::toy(arch, routing),
            Preset::Full => ModelConfig::new(arch, routing),
        };
        let mut rc = RunConfig {
            seed: 0,
            preset,
            model,
            train: TrainConfig::default(),
            data: DataConfig::default(),
        };
        for (k, v) in pairs {
            match k.as_str() {
                "arch" | "routing" | "preset" => continue,
                "seed" => {
                    rc.seed = v
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad value `{v}` for `seed`")))?;
                    continue;
                }
                _ => {}
            }
            if !(rc.model.set(k, v)? || rc.train.set(k, v)? || rc.data.set(k, v)?) {
                return Err(Error::invalid(format!("unknown config key `{k}`")));
            }
        }
        if let Some(s) = seed_flag {
            rc.seed = s;
        }
        rc.train.seed = derive_seed(rc.seed, streams::TRAINING);
        rc.model.validate()?;
        rc.train.validate()?;
        rc.data.validate()?;
        Ok(rc)
    }

    pub fn stream_seed(&self, stream: u64) -> u64 {
        derive_seed(self.seed, stream)
    }

    /// Snapshot in the same flat format `resolve` reads back.
    pub fn snapshot(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let q = |x: &str| format!("\"{x}\"");
        kv("seed", self.seed.to_string());
        kv("preset", q(match self.preset {
            Preset::Toy => "toy",
            Preset::Full => "full",
        }));
        kv("arch", q(match m.arch {
            Arch::Gated => "gated",
            Arch::Stacked => "stacked",
        }));
        kv("routing", q(match m.routing {
            Routing::Ssm => "ssm",
            Routing::Attention => "attention",
        }));
        let f = |x: f64| format!("{x:?}");
        for (k, v) in [
            ("n_layers", m.n_layers.to_string()),
            ("d_model", m.d_model.to_string()),
            ("n_state", m.n_state.to_string()),
            ("max_len", m.max_len.to_string()),
            ("vocab_size", m.vocab_size.to_string()),
            ("n_heads", m.n_heads.to_string()),
            ("intermediate", m.intermediate.to_string()),
            ("dropout", f(m.dropout)),
            ("use_position_embeddings", m.use_position_embeddings.to_string()),
            ("use_bias", m.use_bias.to_string()),
            ("ln_eps", f(m.ln_eps)),
            ("init_std", f(m.init_std)),
            ("dt_min", f(m.dt_min)),
            ("dt_max", f(m.dt_max)),
            ("train_ssm_imag", m.train_ssm_imag.to_string()),
            ("steps", t.steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("peak_lr", f(t.peak_lr)),
            ("warmup_frac", f(t.warmup_frac)),
            ("schedule", q(match t.schedule {
                crate::pretrain::ScheduleKind::Cosine => "cosine",
                crate::pretrain::ScheduleKind::Linear => "linear",
                crate::pretrain::ScheduleKind::Constant => "constant",
            })),
            ("beta1", f(t.adam.beta1)),
            ("beta2", f(t.adam.beta2)),
            ("adam_eps", f(t.adam.eps)),
            ("weight_decay", f(t.adam.weight_decay)),
            ("clip", f(t.adam.clip)),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("target_ppl_ratio", f(t.target_ppl_ratio)),
            ("mask_rate", f(d.mask_rate)),
            ("n_shards", d.n_shards.to_string()),
            ("heldout_frac", f(d.heldout_frac)),
            ("vocab_max", d.vocab_max.to_string()),
            ("synthetic_docs", d.synthetic_docs.to_string()),
        ] {
            kv(k, v);
        }
        if let Some(c) = &d.corpus {
            kv("corpus", format!("{c:?}"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let pairs = vec![
            ("arch".to_string(), "stacked".to_string()),
            ("routing".to_string(), "attention".to_string()),
            ("steps".to_string(), "17".to_string()),
            ("peak_lr".to_string(), "0.0003".to_string()),
            ("corpus".to_string(), "data/a b.txt".to_string()),
        ];
        let rc = RunConfig::from_pairs(&pairs, Some(9)).unwrap();
        let back = RunConfig::from_pairs(&parse_config_text(&rc.snapshot()).unwrap(), None).unwrap();
        assert_eq!(rc, back);
        assert_eq!(back.train.steps, 17);
        assert_eq!(back.model.arch, Arch::Stacked);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let p = vec![parse_override("d_model=32").unwrap(), parse_override("intermediate = 96").unwrap()];
        let rc = RunConfig::from_pairs(&p, None).unwrap();
        assert_eq!((rc.model.d_model, rc.model.intermediate), (32, 96));
        let bad = vec![parse_override("nope=1").unwrap()];
        assert!(RunConfig::from_pairs(&bad, None).is_err());
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn sections_are_flattened() {
        let pairs = parse_config_text("seed = 3\n[model]\nd_model = 32\nintermediate = 96\n[train]\nsteps = 5\n").unwrap();
        let rc = RunConfig::from_pairs(&pairs, None).unwrap();
        assert_eq!((rc.seed, rc.model.d_model, rc.train.steps), (3, 32, 5));
    }
}
