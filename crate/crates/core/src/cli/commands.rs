use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analysis::{dump_kernels, flop_estimate, flops_csv, FlopReport, KernelDump};
use crate::cli::config::{streams, RunConfig};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, Model, ModelConfig};
use crate::numerics::derive_seed;
use crate::pretrain::{
    continue_pretrain, encode_corpus, evaluate, prepare_shards, EvalResult, MaskStats, Shard,
    SyntheticCorpus, TrainReport, Trainer, Vocab,
};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const HELDOUT_SHARD: &str = "heldout.bin";
pub const STATS_FILE: &str = "stats.json";

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn snapshot(rc: &RunConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    write(&out.join(CONFIG_SNAPSHOT), rc.snapshot())
}

#[derive(Clone, Debug, Serialize)]
pub struct PrepareStats {
    pub documents: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub train_sequences: usize,
    pub heldout_sequences: usize,
    pub train_shards: usize,
    pub masking: MaskStats,
    pub selected_fraction: f64,
    /// Fractions of selected positions: MASK, random id, unchanged.
    pub replacement_split: [f64; 3],
}

fn train_shard_name(i: usize) -> String {
    format!("train-{i:05}.bin")
}

/// Read the corpus (or generate the synthetic one), build the vocabulary and
/// write masked shards plus statistics into `out`.
pub fn prepare(rc: &RunConfig, corpus: Option<&Path>, out: &Path) -> Result<PrepareStats> {
    let corpus_path = corpus.map(Path::to_path_buf).or_else(|| rc.data.corpus.as_ref().map(PathBuf::from));
    let lines: Vec<String> = match &corpus_path {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::io(p, e))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect(),
        None => SyntheticCorpus {
            n_docs: rc.data.synthetic_docs,
            seed: rc.stream_seed(streams::CORPUS),
            ..Default::default()
        }
        .generate()?,
    };
    if lines.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let vocab = Vocab::build(lines.iter().map(String::as_str), rc.data.vocab_max)?;
    let l = rc.model.max_len;
    let n_held = ((lines.len() as f64 * rc.data.heldout_frac).round() as usize).clamp(1, lines.len().max(2) - 1);
    let n_held = if lines.len() == 1 { 0 } else { n_held };
    let (train_docs, held_docs) = lines.split_at(lines.len() - n_held);
    let train_segs = encode_corpus(train_docs, &vocab, l)?;
    let held_segs = encode_corpus(if held_docs.is_empty() { train_docs } else { held_docs }, &vocab, l)?;
    let mask_seed = rc.stream_seed(streams::MASKING);
    let (shards, mut stats) = prepare_shards(&train_segs, l, rc.data.n_shards, rc.data.mask_rate, vocab.len(), mask_seed)?;
    let (held, held_stats) = prepare_shards(&held_segs, l, 1, rc.data.mask_rate, vocab.len(), derive_seed(mask_seed, u64::MAX))?;
    stats.merge(&held_stats);

    snapshot(rc, out)?;
    vocab.save(&out.join(VOCAB_FILE))?;
    for (i, s) in shards.iter().enumerate() {
        s.write(&out.join(train_shard_name(i)))?;
    }
    held[0].write(&out.join(HELDOUT_SHARD))?;
    let report = PrepareStats {
        documents: lines.len(),
        vocab_size: vocab.len(),
        seq_len: l,
        train_sequences: train_segs.len(),
        heldout_sequences: held_segs.len(),
        train_shards: shards.len(),
        masking: stats,
        selected_fraction: stats.selected_fraction(),
        replacement_split: stats.split(),
    };
    write_json(&out.join(STATS_FILE), &report)?;
    Ok(report)
}

/// Prepared data: concatenated training shards plus the held-out shard.
pub struct Dataset {
    pub vocab: Vocab,
    pub train: Shard,
    pub heldout: Shard,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("train-") && n.ends_with(".bin"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::invalid(format!("no training shards in {}", dir.display())));
    }
    let mut train: Option<Shard> = None;
    for n in &names {
        let s = Shard::read(&dir.join(n))?;
        match &mut train {
            Some(t) => t.extend(&s)?,
            None => train = Some(s),
        }
    }
    let train = train.expect("at least one shard");
    let heldout = Shard::read(&dir.join(HELDOUT_SHARD))?;
    if heldout.seq_len != train.seq_len {
        return Err(Error::format("dataset", "held-out and training shards differ in length"));
    }
    Ok(Dataset { vocab, train, heldout })
}

fn check_fits(cfg: &ModelConfig, data: &Dataset) -> Result<()> {
    if data.vocab.len() > cfg.vocab_size {
        return Err(Error::invalid(format!(
            "data vocabulary ({}) exceeds model vocab_size ({})",
            data.vocab.len(),
            cfg.vocab_size
        )));
    }
    if data.train.seq_len > cfg.max_len {
        return Err(Error::invalid(format!(
            "data sequence length {} exceeds model max_len {}",
            data.train.seq_len, cfg.max_len
        )));
    }
    Ok(())
}

pub fn train(rc: &RunConfig, data_dir: &Path, resume: Option<&Path>, out: &Path) -> Result<TrainReport> {
    let data = load_dataset(data_dir)?;
    let mut trainer = match resume {
        Some(dir) => Trainer::from_checkpoint(&load_checkpoint(dir)?, rc.train.clone())?,
        None => Trainer::new(
            Model::new(rc.model.clone(), rc.stream_seed(streams::MODEL_INIT))?,
            rc.train.clone(),
        )?,
    };
    check_fits(&trainer.model.cfg, &data)?;
    snapshot(rc, out)?;
    let report = trainer.run(&data.train, Some(&data.heldout), Some(out))?;
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

pub fn extend(
    rc: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    new_len: usize,
    steps: u64,
    lr: f64,
    out: &Path,
) -> Result<TrainReport> {
    let data = load_dataset(data_dir)?;
    let mut trainer = continue_pretrain(checkpoint, new_len, &data.train, steps, lr, &rc.train)?;
    check_fits(&trainer.model.cfg, &data)?;
    let mut resolved = rc.clone();
    resolved.model = trainer.model.cfg.clone();
    resolved.train = trainer.cfg.clone();
    snapshot(&resolved, out)?;
    let report = trainer.run(&data.train, Some(&data.heldout), Some(out))?;
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// Evaluate a checkpoint (or a freshly initialized model) on the held-out shard.
pub fn eval(rc: &RunConfig, checkpoint: Option<&Path>, data_dir: &Path, out: &Path) -> Result<EvalResult> {
    let data = load_dataset(data_dir)?;
    let model = match checkpoint {
        Some(dir) => load_checkpoint(dir)?.model()?,
        None => Model::new(rc.model.clone(), rc.stream_seed(streams::MODEL_INIT))?,
    };
    check_fits(&model.cfg, &data)?;
    let r = evaluate(&model, &data.heldout, rc.train.batch_size)?;
    snapshot(rc, out)?;
    write_json(&out.join("eval.json"), &r)?;
    Ok(r)
}

pub fn dump(checkpoint: &Path, out: &Path) -> Result<KernelDump> {
    let model = load_checkpoint(checkpoint)?.model()?;
    let d = dump_kernels(&model)?;
    d.write(out)?;
    Ok(d)
}

/// Both full-size configurations at each length.
pub fn flop_table(lengths: &[usize]) -> Vec<FlopReport> {
    let mut out = Vec::new();
    for (name, cfg) in [("bigs", ModelConfig::bigs_large()), ("bert", ModelConfig::bert_large())] {
        for &l in lengths {
            let mut r = flop_estimate(&cfg, l);
            r.model = name.to_string();
            out.push(r);
        }
    }
    out
}

/// `flops.csv` (itemized) and `flops_table.csv` (`model,length,flops,ratio_to_bert`).
pub fn flops(rc: &RunConfig, lengths: &[usize], out: &Path) -> Result<Vec<FlopReport>> {
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::invalid("lengths must be positive"));
    }
    let reports = flop_table(lengths);
    snapshot(rc, out)?;
    write(&out.join("flops.csv"), flops_csv(&reports))?;
    let mut table = String::from("model,length,flops,ratio_to_bert\n");
    for r in &reports {
        let bert = reports
            .iter()
            .find(|b| b.model == "bert" && b.length == r.length)
            .map_or(f64::NAN, |b| b.total);
        let _ = writeln!(table, "{},{},{:e},{:.4}", r.model, r.length, r.total, r.total / bert);
    }
    write(&out.join("flops_table.csv"), table)?;
    Ok(reports)
}
