use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, Model};
use crate::numerics::{Graph, Rng};
use crate::pretrain::optim::{AdamConfig, AdamW};
use crate::pretrain::schedule::{LrSchedule, ScheduleKind};
use crate::pretrain::shard::Shard;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub schedule: ScheduleKind,
    pub adam: AdamConfig,
    /// Periodic checkpoint interval in steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Held-out evaluation interval; 0 evaluates only at start and end.
    pub eval_every: u64,
    /// Stop early once held-out perplexity falls to this fraction of the
    /// initial value; 0 disables.
    pub target_ppl_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_frac: 0.01,
            schedule: ScheduleKind::Cosine,
            adam: AdamConfig::default(),
            checkpoint_every: 0,
            eval_every: 100,
            target_ppl_ratio: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            kind: self.schedule,
            peak_lr: self.peak_lr,
            total_steps: self.steps,
            warmup_frac: self.warmup_frac,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.target_ppl_ratio) {
            return Err(Error::invalid("target_ppl_ratio must lie in [0, 1)"));
        }
        self.schedule().validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::invalid(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "peak_lr" | "lr" => self.peak_lr = parse(key, value)?,
            "warmup_frac" => self.warmup_frac = parse(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "weight_decay" => self.adam.weight_decay = parse(key, value)?,
            "clip" => self.adam.clip = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "target_ppl_ratio" => self.target_ppl_ratio = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub loss: f64,
    pub perplexity: f64,
    pub predicted: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: u64,
    pub loss: f64,
    pub perplexity: f64,
}

/// Masked-position cross-entropy over a whole shard, token-weighted, no dropout.
pub fn evaluate(model: &Model, shard: &Shard, batch_size: usize) -> Result<EvalResult> {
    if shard.is_empty() || batch_size == 0 {
        return Err(Error::invalid("evaluation needs a non-empty shard and batch"));
    }
    let l = shard.seq_len;
    let (mut total, mut count) = (0.0, 0usize);
    for start in (0..shard.len()).step_by(batch_size) {
        let end = (start + batch_size).min(shard.len());
        let ids = &shard.input_ids[start * l..end * l];
        let labels: Vec<i64> = shard.labels[start * l..end * l].iter().map(|&x| x as i64).collect();
        let n = labels.iter().filter(|&&x| x >= 0).count();
        if n == 0 {
            continue;
        }
        let mut g = Graph::new();
        let loss = model.mlm_loss(&mut g, ids, &labels, l, None)?;
        total += g.value(loss).data()[0] * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::invalid("shard has no predicted positions"));
    }
    let loss = total / count as f64;
    Ok(EvalResult {
        loss,
        perplexity: loss.exp(),
        predicted: count,
    })
}

/// Per-step randomness: batch choice and dropout come from streams keyed by the
/// step number, so a resumed run replays exactly without stored RNG state.
fn batch_rng(seed: u64, step: u64) -> Rng {
    Rng::stream(seed, 2 * step)
}

fn dropout_rng(seed: u64, step: u64) -> Rng {
    Rng::stream(seed, 2 * step + 1)
}

pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    pub history: Vec<LossRecord>,
    pub evals: Vec<EvalRecord>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub steps_run: u64,
    pub final_step: u64,
    pub initial_eval: Option<EvalResult>,
    pub final_eval: Option<EvalResult>,
    pub stopped_early: bool,
    pub checkpoint: Option<PathBuf>,
}

pub const LOSS_CSV: &str = "loss.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint";

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(cfg.adam, &model.store);
        Ok(Self {
            model,
            opt,
            cfg,
            history: Vec::new(),
            evals: Vec::new(),
        })
    }

    /// Resume weights and optimizer moments; `cfg` supplies the remaining schedule.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ckpt.model()?;
        let opt = AdamW::restore(cfg.adam, ckpt.step, &model.store, |n| ckpt.tensor(n).cloned())?;
        Ok(Self {
            model,
            opt,
            cfg,
            history: Vec::new(),
            evals: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, self.opt.step);
        ck.meta = serde_json::json!({ "train": self.cfg });
        ck.tensors.extend(self.opt.state_tensors(&self.model.store));
        ck
    }

    /// One optimizer update; returns the loss before the update.
    pub fn step(&mut self, data: &Shard) -> Result<LossRecord> {
        if data.seq_len == 0 || data.is_empty() {
            return Err(Error::invalid("training shard is empty"));
        }
        let step = self.opt.step + 1;
        let lr = self.cfg.schedule().lr(step);
        let mut brng = batch_rng(self.cfg.seed, step);
        let l = data.seq_len;
        let mut ids = Vec::with_capacity(self.cfg.batch_size * l);
        let mut labels = Vec::with_capacity(self.cfg.batch_size * l);
        for _ in 0..self.cfg.batch_size {
            let (i, lab) = data.sequence(brng.below(data.len() as u64) as usize);
            ids.extend_from_slice(i);
            labels.extend(lab.iter().map(|&x| x as i64));
        }
        let mut drng = dropout_rng(self.cfg.seed, step);
        let mut g = Graph::new();
        let loss_var = self.model.mlm_loss(&mut g, &ids, &labels, l, Some(&mut drng))?;
        let loss = g.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss,
                last_checkpoint: None,
            });
        }
        let grads = g.backward(loss_var)?;
        self.model.store.zero_grad();
        self.model.store.accumulate(&g, &grads);
        self.opt.update(&mut self.model.store, lr)?;
        let rec = LossRecord { step, lr, loss };
        self.history.push(rec);
        Ok(rec)
    }

    fn record_eval(&mut self, heldout: &Shard) -> Result<EvalResult> {
        let r = evaluate(&self.model, heldout, self.cfg.batch_size)?;
        self.evals.push(EvalRecord {
            step: self.opt.step,
            loss: r.loss,
            perplexity: r.perplexity,
        });
        Ok(r)
    }

    /// Train until `cfg.steps` (or the perplexity target). With `out`, writes
    /// `loss.csv`, `eval.csv`, periodic `checkpoints/step-N` and a final `checkpoint`.
    pub fn run(&mut self, train: &Shard, heldout: Option<&Shard>, out: Option<&Path>) -> Result<TrainReport> {
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            self.load_history(dir)?;
        }
        let start = self.opt.step;
        let initial = match heldout {
            Some(h) => Some(self.record_eval(h)?),
            None => None,
        };
        let mut last_good: Option<PathBuf> = None;
        let mut latest = initial;
        let mut stopped_early = false;
        while self.opt.step < self.cfg.steps {
            if let Err(e) = self.step(train) {
                if let Some(dir) = out {
                    self.write_logs(dir)?;
                }
                return Err(match e {
                    Error::Diverged { step, loss, .. } => Error::Diverged {
                        step,
                        loss,
                        last_checkpoint: last_good,
                    },
                    other => other,
                });
            }
            let s = self.opt.step;
            if let (Some(dir), true) = (out, self.cfg.checkpoint_every > 0 && s.is_multiple_of(self.cfg.checkpoint_every)) {
                let p = dir.join("checkpoints").join(format!("step-{s:06}"));
                save_checkpoint(&p, &self.checkpoint())?;
                self.write_logs(dir)?;
                last_good = Some(p);
            }
            if let Some(h) = heldout {
                if self.cfg.eval_every > 0 && s.is_multiple_of(self.cfg.eval_every) {
                    let r = self.record_eval(h)?;
                    latest = Some(r);
                    if let Some(init) = initial {
                        if self.cfg.target_ppl_ratio > 0.0
                            && r.perplexity <= self.cfg.target_ppl_ratio * init.perplexity
                        {
                            stopped_early = true;
                            break;
                        }
                    }
                }
            }
        }
        if let Some(h) = heldout {
            if self.evals.last().map(|e| e.step) != Some(self.opt.step) {
                latest = Some(self.record_eval(h)?);
            }
        }
        let mut checkpoint = None;
        if let Some(dir) = out {
            let p = dir.join(FINAL_CHECKPOINT);
            save_checkpoint(&p, &self.checkpoint())?;
            self.write_logs(dir)?;
            checkpoint = Some(p);
        }
        Ok(TrainReport {
            steps_run: self.opt.step - start,
            final_step: self.opt.step,
            initial_eval: initial,
            final_eval: latest,
            stopped_early,
            checkpoint,
        })
    }

    /// Keep earlier loss rows when resuming into the same directory.
    fn load_history(&mut self, dir: &Path) -> Result<()> {
        if !self.history.is_empty() || self.opt.step == 0 {
            return Ok(());
        }
        let p = dir.join(LOSS_CSV);
        let Ok(text) = fs::read_to_string(&p) else { return Ok(()) };
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let parsed = (f.len() == 3)
                .then(|| Some((f[0].parse().ok()?, f[1].parse().ok()?, f[2].parse().ok()?)))
                .flatten();
            let Some((step, lr, loss)) = parsed else {
                return Err(Error::format("loss history", format!("bad row `{line}`")));
            };
            if step <= self.opt.step {
                self.history.push(LossRecord { step, lr, loss });
            }
        }
        Ok(())
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for r in &self.history {
            let _ = writeln!(s, "{},{:e},{:e}", r.step, r.lr, r.loss);
        }
        s
    }

    pub fn eval_csv(&self) -> String {
        let mut s = String::from("step,loss,perplexity\n");
        for r in &self.evals {
            let _ = writeln!(s, "{},{:e},{:e}", r.step, r.loss, r.perplexity);
        }
        s
    }

    fn write_logs(&self, dir: &Path) -> Result<()> {
        for (name, text) in [(LOSS_CSV, self.loss_csv()), (EVAL_CSV, self.eval_csv())] {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Reload a checkpoint, re-target it at `new_len` and train on `long` at a
/// constant `lr` with fresh optimizer moments.
pub fn continue_pretrain(
    ckpt_dir: &Path,
    new_len: usize,
    long: &Shard,
    steps: u64,
    lr: f64,
    base: &TrainConfig,
) -> Result<Trainer> {
    let ckpt = load_checkpoint(ckpt_dir)?;
    let mut model = ckpt.model()?;
    model.extend_max_len(new_len)?;
    if long.seq_len != new_len {
        return Err(Error::invalid(format!(
            "extension data has length {}, expected {new_len}",
            long.seq_len
        )));
    }
    let cfg = TrainConfig {
        steps,
        peak_lr: lr,
        schedule: ScheduleKind::Constant,
        ..base.clone()
    };
    Trainer::new(model, cfg)
}
