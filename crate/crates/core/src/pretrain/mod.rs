//! Toy MLM pretraining: vocabulary, synthetic corpus, offline masking into
//! shards, AdamW, learning-rate schedules, the training loop and length extension.

mod corpus;
mod masking;
mod optim;
mod schedule;
mod shard;
mod trainer;
mod vocab;

pub use corpus::{chunk_documents, encode_corpus, SyntheticCorpus};
pub use masking::{check_mask_rate, mask_tokens, MaskStats, IGNORE};
pub use optim::{AdamConfig, AdamW};
pub use schedule::{cosine_warmup_lr, LrSchedule, ScheduleKind};
pub use shard::{prepare_shards, Shard};
pub use trainer::{
    continue_pretrain, evaluate, EvalRecord, EvalResult, LossRecord, TrainConfig, TrainReport,
    Trainer, EVAL_CSV, FINAL_CHECKPOINT, LOSS_CSV,
};
pub use vocab::{Vocab, CLS, MASK, PAD, SEP, SPECIALS, UNK};
