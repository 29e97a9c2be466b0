//! Bidirectional stacked LSTM language model: vocabulary, tokenization,
//! forward pass, training and perplexity.

mod model;
mod tokenize;
mod train;
mod vocab;

pub use model::{
    batches, chunk_stream, perplexity_from_probs, BatchGraph, LanguageModel, LmConfig, LmForward,
    ModelVars,
};
pub use tokenize::{
    encode_stream, is_punctuation, is_sentence_end, read_tokenized, split_sentences, tokenize,
    write_tokenized,
};
pub use train::{train_lm, Checkpoint, TrainingMeta};
pub use vocab::{Vocabulary, BOUNDARY, BOUNDARY_ID, UNK, UNK_ID};
