//! Synthetic corpus, masking and downstream tasks. Token streams are plain
//! `u16` ids and all sampling happens in `f64`, so the data pipeline is
//! identical under both training precisions.

mod corpus;
mod masking;
mod tasks;

pub use corpus::{generate_corpus, read_corpus_cache, write_corpus_cache, Corpus, CorpusConfig, MarkovChain, CHAIN_STATES, GENERATOR_VERSION};
pub use masking::{apply_masking, ClassBatch, MaskedBatch, MaskedExample, MaskingConfig};
pub use tasks::{make_downstream_task, DownstreamExample, TaskId};

use serde::{Deserialize, Serialize};

/// Token vocabulary with the four reserved ids pinned at the bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
}

impl Vocab {
    pub const PAD: u16 = 0;
    pub const MASK: u16 = 1;
    pub const CLS: u16 = 2;
    pub const SEP: u16 = 3;
    pub const FIRST_CONTENT: u16 = 4;

    pub fn new(size: usize) -> Self {
        assert!(size > Self::FIRST_CONTENT as usize, "vocab must have content tokens");
        Vocab { size }
    }

    pub fn num_content(&self) -> usize {
        self.size - Self::FIRST_CONTENT as usize
    }

    pub fn is_content(&self, id: u16) -> bool {
        id >= Self::FIRST_CONTENT && (id as usize) < self.size
    }

    pub fn is_reserved(id: u16) -> bool {
        id < Self::FIRST_CONTENT
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new(64)
    }
}
