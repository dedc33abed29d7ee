//! Synthetic tiered multilingual corpus, character vocabulary and batching.

mod batch;
mod corpus;
mod lang;
mod vocab;

pub use batch::{make_batches, Batch, BatchPlan, Batching, DecoderIo};
pub use corpus::{inverse_cipher, split_sizes, synthesize, Corpus, ManifestRecord, Utterance, SPLITS};
pub use lang::{language_specs, Acoustics, LangSpec, Tier};
pub use vocab::{Vocab, EOS, MASK, PAD};
