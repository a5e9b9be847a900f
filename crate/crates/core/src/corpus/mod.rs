//! Dataset ingestion, vocabulary, batching and pretrained vectors.

mod batch;
mod dataset;
mod pretrained;
mod vocab;

pub use batch::{encode_sample, encode_samples, flatten_context, make_batches, Batch, EncodedSample};
pub use dataset::{
    conversation_samples, decode_escapes, detokenize, load_split, read_split, tokenize, Conversation,
    DialogueSample, LoadedSplit, Speaker, Split, Utterance, NUM_SPEAKERS, SPEAKER_CTX,
};
pub use pretrained::{load_pretrained, read_pretrained, Coverage};
pub use vocab::{Vocabulary, CTX, EOS, PAD, RESERVED, SOS, UNK};
