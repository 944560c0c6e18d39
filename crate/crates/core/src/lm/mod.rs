//! Word-level tokenizer and a small causal transformer language model.

mod checkpoint;
mod model;
mod pretrain;
mod vocab;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use model::{Forward, LoraPair, LoraSet, ModelConfig, ParamStore, Trainable, Transformer};
pub use pretrain::{
    corpus_ce, next_token_loss, pretrain, pretrain_scored, scored_ce, PretrainConfig, PretrainReport,
};
pub use vocab::{Vocab, BOS, EOS, PAD};
