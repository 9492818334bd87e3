//! The `bigs` command line: `prepare`, `train`, `extend`, `eval`, `dump-kernels`, `flops`.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{
    dump, eval, extend, flop_table, flops, load_dataset, prepare, train, Dataset, PrepareStats,
    CONFIG_SNAPSHOT, HELDOUT_SHARD, STATS_FILE, VOCAB_FILE,
};
pub use config::{parse_config_text, parse_override, streams, DataConfig, Preset, RunConfig};

use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "bigs", version, about = "Bidirectional gated SSM toolkit")]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Override one config key (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = override_arg)]
    pub set: Vec<(String, String)>,
    #[command(subcommand)]
    pub command: Command,
}

fn override_arg(s: &str) -> std::result::Result<(String, String), String> {
    parse_override(s).map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the vocabulary and masked shards.
    Prepare {
        /// Text corpus, one document per line (synthetic corpus if omitted).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Pretrain with the MLM objective.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Continue pretraining a checkpoint at a longer sequence length.
    Extend {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Shards prepared at the new length.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        new_len: usize,
        #[arg(long, default_value_t = 200)]
        steps: u64,
        #[arg(long, default_value_t = 3e-5)]
        lr: f64,
    },
    /// Held-out masked cross-entropy and perplexity.
    Eval {
        /// Omit to evaluate a freshly initialized model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
    /// Export forward and backward kernels of every layer.
    DumpKernels {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// FLOP estimates for the full-size gated SSM and attention configurations.
    Flops {
        #[arg(long, value_delimiter = ',', default_values_t = [128, 512, 1024, 4096])]
        lengths: Vec<usize>,
    },
}

pub fn run(cli: &Cli) -> Result<()> {
    let rc = RunConfig::resolve(cli.config.as_deref(), &cli.set, cli.seed)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Prepare { corpus } => {
            let s = prepare(&rc, corpus.as_deref(), out)?;
            println!(
                "prepared {} train / {} held-out sequences of length {} (vocab {}); masked fraction {:.4}",
                s.train_sequences, s.heldout_sequences, s.seq_len, s.vocab_size, s.selected_fraction
            );
        }
        Command::Train { data, resume } => {
            let r = train(&rc, data, resume.as_deref(), out)?;
            print_train(&r);
        }
        Command::Extend {
            checkpoint,
            data,
            new_len,
            steps,
            lr,
        } => {
            let r = extend(&rc, checkpoint, data, *new_len, *steps, *lr, out)?;
            print_train(&r);
        }
        Command::Eval { checkpoint, data } => {
            let r = eval(&rc, checkpoint.as_deref(), data, out)?;
            println!("loss {:.6} perplexity {:.3} over {} positions", r.loss, r.perplexity, r.predicted);
        }
        Command::DumpKernels { checkpoint } => {
            let d = dump(checkpoint, out)?;
            println!("wrote {} kernels ({} layers, length {})", d.entries.len(), d.n_layers, d.seq_len);
        }
        Command::Flops { lengths } => {
            for r in flops(&rc, lengths, out)? {
                println!("{:<5} L={:<5} {:.3e}", r.model, r.length, r.total);
            }
        }
    }
    Ok(())
}

fn print_train(r: &crate::pretrain::TrainReport) {
    if let (Some(a), Some(b)) = (r.initial_eval, r.final_eval) {
        println!(
            "step {}: held-out perplexity {:.3} -> {:.3}",
            r.final_step, a.perplexity, b.perplexity
        );
    } else {
        println!("step {}", r.final_step);
    }
}
