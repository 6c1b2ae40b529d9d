use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Vocab;
use crate::error::{CoreError, Result};
use crate::rng::{rng_from, SALT_CHAIN, SALT_SEQUENCE};

/// Bump when sequence generation changes; stored in the cache header.
pub const GENERATOR_VERSION: u32 = 1;

/// Number of chain states. State `s` emits content token `FIRST_CONTENT + s`,
/// so the token bigram statistics of a corpus are exactly the transition
/// matrix.
pub const CHAIN_STATES: usize = 8;

const CACHE_MAGIC: &[u8; 8] = b"CTCDCORP";

/// First-order Markov chain over the content alphabet. Rows are normalized;
/// every row is non-uniform (max entry at least 3x the min) so masked tokens
/// are predictable from context well above chance.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    transitions: Vec<f64>, // row-major [CHAIN_STATES, CHAIN_STATES]
}

impl MarkovChain {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = rng_from(&[seed, SALT_CHAIN]);
        let mut transitions = vec![0.0; CHAIN_STATES * CHAIN_STATES];
        for row in 0..CHAIN_STATES {
            loop {
                let mut total = 0.0;
                for col in 0..CHAIN_STATES {
                    // Exp(1) draws give heavy-tailed, well-spread rows.
                    let e = -(1.0 - rng.gen::<f64>()).ln();
                    transitions[row * CHAIN_STATES + col] = e;
                    total += e;
                }
                let slice = &mut transitions[row * CHAIN_STATES..(row + 1) * CHAIN_STATES];
                for v in slice.iter_mut() {
                    *v /= total;
                }
                let max = slice.iter().cloned().fold(0.0, f64::max);
                let min = slice.iter().cloned().fold(1.0, f64::min);
                if max >= 3.0 * min {
                    break;
                }
            }
        }
        MarkovChain { transitions }
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.transitions[state * CHAIN_STATES..(state + 1) * CHAIN_STATES]
    }

    pub fn token_for_state(state: usize) -> u16 {
        Vocab::FIRST_CONTENT + state as u16
    }

    pub fn state_for_token(token: u16) -> Option<usize> {
        let s = token.checked_sub(Vocab::FIRST_CONTENT)? as usize;
        (s < CHAIN_STATES).then_some(s)
    }

    fn sample_state(weights: &[f64], u: f64) -> usize {
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        weights.len() - 1
    }

    /// Content-token sequence of the given length, starting from a uniform
    /// initial state.
    pub fn sample_sequence(&self, len: usize, rng: &mut impl Rng) -> Vec<u16> {
        let mut out = Vec::with_capacity(len);
        let mut state = rng.gen_range(0..CHAIN_STATES);
        out.push(Self::token_for_state(state));
        for _ in 1..len {
            state = Self::sample_state(self.row(state), rng.gen::<f64>());
            out.push(Self::token_for_state(state));
        }
        out
    }

    /// Stationary distribution by power iteration; used to pick learnable
    /// task rules.
    pub fn stationary(&self) -> [f64; CHAIN_STATES] {
        let mut pi = [1.0 / CHAIN_STATES as f64; CHAIN_STATES];
        for _ in 0..200 {
            let mut next = [0.0; CHAIN_STATES];
            for (s, &p) in pi.iter().enumerate() {
                for (t, &w) in self.row(s).iter().enumerate() {
                    next[t] += p * w;
                }
            }
            pi = next;
        }
        pi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub num_sequences: usize,
    /// Held-out sequences generated after the training ones, used for the
    /// masked-accuracy evaluation.
    pub heldout_sequences: usize,
    /// Content length bounds (excluding the [CLS]/[SEP] frame).
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            vocab_size: 64,
            num_sequences: 100_000,
            heldout_sequences: 1024,
            min_len: 8,
            max_len: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub chain: MarkovChain,
    pub config: CorpusConfig,
    /// [CLS] content... [SEP], training split.
    pub sequences: Vec<Vec<u16>>,
    pub heldout: Vec<Vec<u16>>,
}

fn frame(content: Vec<u16>) -> Vec<u16> {
    let mut seq = Vec::with_capacity(content.len() + 2);
    seq.push(Vocab::CLS);
    seq.extend(content);
    seq.push(Vocab::SEP);
    seq
}

pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    if config.min_len < 8 {
        return Err(CoreError::InvalidConfig(format!(
            "corpus min_len must be at least 8, got {}",
            config.min_len
        )));
    }
    if config.max_len < config.min_len {
        return Err(CoreError::InvalidConfig(format!(
            "corpus max_len {} below min_len {}",
            config.max_len, config.min_len
        )));
    }
    let vocab = Vocab::new(config.vocab_size);
    if vocab.num_content() < CHAIN_STATES {
        return Err(CoreError::InvalidConfig(format!(
            "vocab size {} too small for {} chain states",
            config.vocab_size, CHAIN_STATES
        )));
    }
    let chain = MarkovChain::from_seed(config.seed);

    let total = config.num_sequences + config.heldout_sequences;
    let mut all = Vec::with_capacity(total);
    for i in 0..total {
        let mut rng = rng_from(&[config.seed, SALT_SEQUENCE, i as u64]);
        let len = rng.gen_range(config.min_len..=config.max_len);
        all.push(frame(chain.sample_sequence(len, &mut rng)));
    }
    let heldout = all.split_off(config.num_sequences);
    Ok(Corpus { vocab, chain, config: config.clone(), sequences: all, heldout })
}

/// Cache file: header (magic, generator version, vocab size, seed, counts,
/// length bounds) followed by length-prefixed little-endian u16 sequences.
/// Regenerating and re-writing must produce identical bytes.
pub fn write_corpus_cache(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&GENERATOR_VERSION.to_le_bytes());
    buf.extend_from_slice(&(corpus.vocab.size as u32).to_le_bytes());
    buf.extend_from_slice(&corpus.config.seed.to_le_bytes());
    buf.extend_from_slice(&(corpus.sequences.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(corpus.heldout.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(corpus.config.min_len as u32).to_le_bytes());
    buf.extend_from_slice(&(corpus.config.max_len as u32).to_le_bytes());
    for seq in corpus.sequences.iter().chain(&corpus.heldout) {
        buf.extend_from_slice(&(seq.len() as u32).to_le_bytes());
        for &t in seq {
            buf.extend_from_slice(&t.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_corpus_cache(path: &Path) -> Result<Corpus> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    if cur.take(8)? != CACHE_MAGIC {
        return Err(CoreError::CheckpointFormat("bad corpus cache magic".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != GENERATOR_VERSION {
        return Err(CoreError::CheckpointFormat(format!(
            "corpus generator version {} (expected {})",
            version, GENERATOR_VERSION
        )));
    }
    let vocab_size = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    let num_sequences = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
    let num_heldout = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
    let min_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let max_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;

    let mut read_split = |count: usize| -> Result<Vec<Vec<u16>>> {
        let mut seqs = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            let raw = cur.take(len * 2)?;
            seqs.push(raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect());
        }
        Ok(seqs)
    };
    let sequences = read_split(num_sequences)?;
    let heldout = read_split(num_heldout)?;

    let config = CorpusConfig {
        vocab_size,
        num_sequences,
        heldout_sequences: num_heldout,
        min_len,
        max_len,
        seed,
    };
    Ok(Corpus {
        vocab: Vocab::new(vocab_size),
        chain: MarkovChain::from_seed(seed),
        config,
        sequences,
        heldout,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::CheckpointFormat("corpus cache truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> CorpusConfig {
        CorpusConfig { num_sequences: 200, heldout_sequences: 16, seed: 11, ..CorpusConfig::default() }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_corpus(&small_config()).unwrap();
        let b = generate_corpus(&small_config()).unwrap();
        assert_eq!(a.sequences, b.sequences);
        assert_eq!(a.heldout, b.heldout);
        assert_eq!(a.chain, b.chain);
    }

    #[test]
    fn sequences_are_framed() {
        let corpus = generate_corpus(&small_config()).unwrap();
        for seq in corpus.sequences.iter().chain(&corpus.heldout) {
            assert_eq!(seq[0], Vocab::CLS);
            assert_eq!(*seq.last().unwrap(), Vocab::SEP);
            for &t in &seq[1..seq.len() - 1] {
                assert!(corpus.vocab.is_content(t));
            }
        }
    }

    #[test]
    fn rows_are_stochastic_and_non_uniform() {
        let chain = MarkovChain::from_seed(3);
        for s in 0..CHAIN_STATES {
            let row = chain.row(s);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            let max = row.iter().cloned().fold(0.0, f64::max);
            let min = row.iter().cloned().fold(1.0, f64::min);
            assert!(max >= 3.0 * min);
        }
    }

    #[test]
    fn min_len_below_eight_rejected() {
        let cfg = CorpusConfig { min_len: 4, ..CorpusConfig::default() };
        assert!(generate_corpus(&cfg).is_err());
    }

    #[test]
    fn cache_roundtrip_is_bit_identical() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.bin");
        write_corpus_cache(&corpus, &path).unwrap();
        let loaded = read_corpus_cache(&path).unwrap();
        assert_eq!(corpus.sequences, loaded.sequences);
        assert_eq!(corpus.heldout, loaded.heldout);
        assert_eq!(corpus.chain, loaded.chain);

        // Re-writing the regenerated corpus must reproduce the same bytes.
        let path2 = dir.path().join("corpus2.bin");
        write_corpus_cache(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bigram_statistics_match_transition_matrix() {
        // 100k tokens is plenty for TV distance 0.02 per row.
        let cfg = CorpusConfig { num_sequences: 10_000, heldout_sequences: 0, seed: 5, ..CorpusConfig::default() };
        let corpus = generate_corpus(&cfg).unwrap();
        let mut counts = vec![0u64; CHAIN_STATES * CHAIN_STATES];
        let mut total_tokens = 0usize;
        for seq in &corpus.sequences {
            let content = &seq[1..seq.len() - 1];
            total_tokens += content.len();
            for w in content.windows(2) {
                let a = MarkovChain::state_for_token(w[0]).unwrap();
                let b = MarkovChain::state_for_token(w[1]).unwrap();
                counts[a * CHAIN_STATES + b] += 1;
            }
        }
        assert!(total_tokens >= 100_000, "need at least 100k tokens, got {}", total_tokens);
        for s in 0..CHAIN_STATES {
            let row_total: u64 = counts[s * CHAIN_STATES..(s + 1) * CHAIN_STATES].iter().sum();
            let mut tv = 0.0;
            for t in 0..CHAIN_STATES {
                let emp = counts[s * CHAIN_STATES + t] as f64 / row_total as f64;
                tv += (emp - corpus.chain.row(s)[t]).abs();
            }
            tv /= 2.0;
            assert!(tv < 0.02, "row {} TV distance {}", s, tv);
        }
    }
}
