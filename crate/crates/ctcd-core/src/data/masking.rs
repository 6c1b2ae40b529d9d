use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Vocab;
use crate::error::{CoreError, Result};
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub rate: f64,
    /// BERT's 80/10/10 replacement split. When false every selected position
    /// becomes [MASK].
    pub bert_split: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig { rate: 0.15, bert_split: true }
    }
}

/// One masked sequence before batching.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedExample {
    pub tokens: Vec<u16>,
    pub mask_positions: Vec<usize>,
    pub original_tokens: Vec<u16>,
    pub seed: u64,
}

/// BERT-style masking: each content position is selected independently with
/// `rate` (re-drawn until at least one is selected); selected positions are
/// 80% [MASK], 10% a random content token, 10% unchanged. Reserved tokens
/// are never selected.
pub fn apply_masking(sequence: &[u16], vocab: &Vocab, config: &MaskingConfig, seed: u64) -> Result<MaskedExample> {
    let maskable: Vec<usize> = sequence
        .iter()
        .enumerate()
        .filter(|(_, &t)| vocab.is_content(t))
        .map(|(i, _)| i)
        .collect();
    if maskable.is_empty() {
        return Err(CoreError::NoMaskablePositions);
    }

    let mut rng = rng_from(&[seed]);
    let mut selected = Vec::new();
    while selected.is_empty() {
        for &pos in &maskable {
            if rng.gen::<f64>() < config.rate {
                selected.push(pos);
            }
        }
    }

    let mut tokens = sequence.to_vec();
    let mut original_tokens = Vec::with_capacity(selected.len());
    for &pos in &selected {
        original_tokens.push(sequence[pos]);
        if config.bert_split {
            let u = rng.gen::<f64>();
            if u < 0.8 {
                tokens[pos] = Vocab::MASK;
            } else if u < 0.9 {
                let content = rng.gen_range(0..vocab.num_content()) as u16;
                tokens[pos] = Vocab::FIRST_CONTENT + content;
            }
            // else: keep the original token (still predicted).
        } else {
            tokens[pos] = Vocab::MASK;
        }
    }

    Ok(MaskedExample { tokens, mask_positions: selected, original_tokens, seed })
}

/// A padded batch of masked sequences; the unit the trainer consumes. The
/// teacher and the student always see the same `MaskedBatch` value within a
/// step.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub batch: usize,
    pub seq_len: usize,
    /// [batch * seq_len], row-major.
    pub token_ids: Vec<u16>,
    /// true at real positions, false at [PAD].
    pub attention_mask: Vec<bool>,
    pub mask_positions: Vec<Vec<usize>>,
    pub original_tokens: Vec<Vec<u16>>,
    pub seed_trace: Vec<u64>,
}

impl MaskedBatch {
    pub fn from_examples(examples: Vec<MaskedExample>) -> Self {
        let batch = examples.len();
        let seq_len = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
        let mut token_ids = vec![Vocab::PAD; batch * seq_len];
        let mut attention_mask = vec![false; batch * seq_len];
        let mut mask_positions = Vec::with_capacity(batch);
        let mut original_tokens = Vec::with_capacity(batch);
        let mut seed_trace = Vec::with_capacity(batch);
        for (e, ex) in examples.into_iter().enumerate() {
            let base = e * seq_len;
            for (i, &t) in ex.tokens.iter().enumerate() {
                token_ids[base + i] = t;
                attention_mask[base + i] = true;
            }
            mask_positions.push(ex.mask_positions);
            original_tokens.push(ex.original_tokens);
            seed_trace.push(ex.seed);
        }
        MaskedBatch { batch, seq_len, token_ids, attention_mask, mask_positions, original_tokens, seed_trace }
    }

    /// Flattened (row index into [batch*seq_len], target token) pairs for
    /// every masked position.
    pub fn masked_flat(&self) -> (Vec<usize>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (e, positions) in self.mask_positions.iter().enumerate() {
            for (k, &pos) in positions.iter().enumerate() {
                rows.push(e * self.seq_len + pos);
                targets.push(self.original_tokens[e][k] as usize);
            }
        }
        (rows, targets)
    }

    /// Row indices of every real (non-pad) position.
    pub fn real_flat(&self) -> Vec<usize> {
        self.attention_mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_masked(&self) -> usize {
        self.mask_positions.iter().map(|p| p.len()).sum()
    }
}

/// A padded classification batch: sequences with a leading [CLS] plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub token_ids: Vec<u16>,
    pub attention_mask: Vec<bool>,
    pub labels: Vec<u8>,
}

impl ClassBatch {
    pub fn from_sequences(sequences: &[&[u16]], labels: Vec<u8>) -> Self {
        let batch = sequences.len();
        let seq_len = sequences.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut token_ids = vec![Vocab::PAD; batch * seq_len];
        let mut attention_mask = vec![false; batch * seq_len];
        for (e, seq) in sequences.iter().enumerate() {
            let base = e * seq_len;
            for (i, &t) in seq.iter().enumerate() {
                token_ids[base + i] = t;
                attention_mask[base + i] = true;
            }
        }
        ClassBatch { batch, seq_len, token_ids, attention_mask, labels }
    }
}
