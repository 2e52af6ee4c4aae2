//! Small transformer encoder classifier trained from scratch, with split
//! forward passes so a bottleneck can be inserted after any encoder layer.

mod checkpoint;
mod config;
mod corpus;
mod train;
mod transformer;
mod vocab;

pub use checkpoint::{expected_params, ModelCheckpoint, Param, TrainMetadata};
pub use config::ModelConfig;
pub use corpus::{generate_corpus, load_corpus, load_corpus_str};
pub use train::{argmax, mean_loss, train, TrainConfig};
pub use transformer::{
    cross_entropy, forward, forward_from, forward_lower, forward_probs, logits_from_hidden,
    mask_bias, param_tensors,
};
pub use vocab::{build_vocab, tokenize, Instance, Vocab, CLS_ID, PAD_ID, UNK_ID};
