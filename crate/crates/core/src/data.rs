//! Deterministic token pipeline.
//!
//! Batches are addressed, not iterated: `batch_at(corpus, split, step, seed, ..)`
//! is a pure function of its arguments, with windows drawn from a ChaCha
//! stream keyed on `(seed, split, step)`. Two candidates that ask for step `t`
//! get the same tokens no matter what else they have done.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{keyed_rng, str_key};

/// Byte-level vocabulary: 256 byte values plus one pad id.
pub const BYTE_VOCAB: usize = 257;
pub const BYTE_PAD: u32 = 256;

/// Id used as the segment delimiter in the copy task.
pub const COPY_DELIMITER: u32 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Provenance {
    Synthetic { generator: SyntheticKind, seed: u64 },
    TextFile { path: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    MarkovBigram,
    CopyTask,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markov-bigram" => Ok(SyntheticKind::MarkovBigram),
            "copy-task" => Ok(SyntheticKind::CopyTask),
            other => Err(Error::config(format!(
                "unknown synthetic corpus kind {other:?} (expected markov-bigram or copy-task)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    tokens: Vec<u32>,
    vocab_size: usize,
    provenance: Provenance,
}

impl Corpus {
    pub fn new(tokens: Vec<u32>, vocab_size: usize, provenance: Provenance) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::data("corpus is empty"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::data(format!("token id {bad} out of range for vocab_size {vocab_size}")));
        }
        Ok(Corpus { tokens, vocab_size, provenance })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Token index range `[start, end)` backing a split. The last 10% of the
    /// corpus (at least one token) is validation.
    pub fn split_range(&self, split: Split) -> std::ops::Range<usize> {
        let n = self.tokens.len();
        let val = (n / 10).max(1).min(n);
        let boundary = n - val;
        match split {
            Split::Train => 0..boundary,
            Split::Validation => boundary..n,
        }
    }

    /// Inverse of byte-level tokenization. Pad ids are dropped.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
    }
}

/// Sparse random bigram chain: every state has `fanout` successors with
/// random probabilities.
#[derive(Clone, Debug)]
pub struct BigramChain {
    vocab: usize,
    /// Row-stochastic `vocab x vocab` transition matrix.
    transitions: Vec<f64>,
}

pub const BIGRAM_FANOUT: usize = 4;

impl BigramChain {
    pub fn generate(vocab: usize, fanout: usize, seed: u64) -> Self {
        let mut rng = keyed_rng(&[seed, str_key("bigram-chain")]);
        let fanout = fanout.clamp(1, vocab);
        let mut transitions = vec![0.0; vocab * vocab];
        for s in 0..vocab {
            let row = &mut transitions[s * vocab..(s + 1) * vocab];
            let mut chosen = 0;
            while chosen < fanout {
                let next = rng.random_range(0..vocab);
                if row[next] == 0.0 {
                    // Spread the weights so rows have distinct entropies.
                    row[next] = 0.05 + rng.random::<f64>();
                    chosen += 1;
                }
            }
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= total);
        }
        BigramChain { vocab, transitions }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.transitions[state * self.vocab..(state + 1) * self.vocab]
    }

    /// Stationary distribution by power iteration from uniform.
    pub fn stationary(&self) -> Vec<f64> {
        let v = self.vocab;
        let mut pi = vec![1.0 / v as f64; v];
        for _ in 0..10_000 {
            let mut next = vec![0.0; v];
            for s in 0..v {
                for (t, p) in self.row(s).iter().enumerate() {
                    next[t] += pi[s] * p;
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-14 {
                break;
            }
        }
        pi
    }

    /// Entropy rate in nats: the best achievable next-token loss.
    pub fn entropy_rate(&self) -> f64 {
        let pi = self.stationary();
        (0..self.vocab)
            .map(|s| {
                let h: f64 = self.row(s).iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
                pi[s] * h
            })
            .sum()
    }

    pub fn sample(&self, size: usize, seed: u64) -> Vec<u32> {
        let mut rng = keyed_rng(&[seed, str_key("bigram-walk")]);
        let mut state = rng.random_range(0..self.vocab);
        let mut out = Vec::with_capacity(size);
        for _ in 0..size {
            out.push(state as u32);
            let u: f64 = rng.random();
            let row = self.row(state);
            let mut acc = 0.0;
            let mut next = self.vocab - 1;
            for (t, &p) in row.iter().enumerate() {
                acc += p;
                if p > 0.0 && u < acc {
                    next = t;
                    break;
                }
            }
            if row[next] == 0.0 {
                // Rounding left `u` past the last cumulative bucket.
                next = row.iter().rposition(|&p| p > 0.0).expect("row has support");
            }
            state = next;
        }
        out
    }
}

/// Vocabulary used by the synthetic generators.
pub const SYNTHETIC_VOCAB: usize = 48;

/// Deterministic synthetic corpus of exactly `size` tokens.
pub fn make_synthetic_corpus(kind: SyntheticKind, size: usize, seed: u64) -> Result<Corpus> {
    make_synthetic_corpus_with_vocab(kind, size, seed, SYNTHETIC_VOCAB)
}

pub fn make_synthetic_corpus_with_vocab(kind: SyntheticKind, size: usize, seed: u64, vocab: usize) -> Result<Corpus> {
    if size < 1 {
        return Err(Error::config("synthetic corpus size must be >= 1 token"));
    }
    if vocab < 3 {
        return Err(Error::config("synthetic corpus vocab must be >= 3"));
    }
    let tokens = match kind {
        SyntheticKind::MarkovBigram => BigramChain::generate(vocab, BIGRAM_FANOUT, seed).sample(size, seed),
        SyntheticKind::CopyTask => copy_task(size, seed, vocab),
    };
    Corpus::new(tokens, vocab, Provenance::Synthetic { generator: kind, seed })
}

fn copy_task(size: usize, seed: u64, vocab: usize) -> Vec<u32> {
    let mut rng = keyed_rng(&[seed, str_key("copy-task")]);
    let mut out = Vec::with_capacity(size + 32);
    while out.len() < size {
        out.push(COPY_DELIMITER);
        let len = rng.random_range(2..=8);
        let seq: Vec<u32> = (0..len).map(|_| rng.random_range(1..vocab as u32)).collect();
        out.extend_from_slice(&seq);
        out.extend_from_slice(&seq);
    }
    out.truncate(size);
    out
}

/// Byte-level corpus from a file.
pub fn load_text_corpus(path: &Path) -> Result<Corpus> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::data(format!("{} is empty", path.display())));
    }
    let tokens = bytes.into_iter().map(u32::from).collect();
    Corpus::new(tokens, BYTE_VOCAB, Provenance::TextFile { path: path.display().to_string() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    fn key(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Validation => 2,
        }
    }
}

/// `batch_size` windows of `seq_len + 1` tokens each: the first `seq_len`
/// are model inputs, the last `seq_len` are next-token targets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBatch {
    batch_size: usize,
    seq_len: usize,
    tokens: Vec<u32>,
    digest: u64,
}

impl TokenBatch {
    pub fn new(batch_size: usize, seq_len: usize, tokens: Vec<u32>) -> Result<Self> {
        if batch_size == 0 || seq_len == 0 {
            return Err(Error::data("batch_size and seq_len must be >= 1"));
        }
        if tokens.len() != batch_size * (seq_len + 1) {
            return Err(Error::data(format!(
                "batch {batch_size}x{seq_len} needs {} tokens, got {}",
                batch_size * (seq_len + 1),
                tokens.len()
            )));
        }
        let digest = token_digest(batch_size, seq_len, &tokens);
        Ok(TokenBatch { batch_size, seq_len, tokens, digest })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn digest(&self) -> u64 {
        self.digest
    }

    /// Windows of `seq_len + 1` tokens, row-major.
    pub fn windows(&self) -> impl Iterator<Item = &[u32]> {
        self.tokens.chunks_exact(self.seq_len + 1)
    }

    pub fn inputs(&self) -> Vec<u32> {
        self.windows().flat_map(|w| w[..self.seq_len].iter().copied()).collect()
    }

    pub fn targets(&self) -> Vec<u32> {
        self.windows().flat_map(|w| w[1..].iter().copied()).collect()
    }
}

fn token_digest(batch_size: usize, seq_len: usize, tokens: &[u32]) -> u64 {
    let mut h = Sha256::new();
    h.update((batch_size as u64).to_le_bytes());
    h.update((seq_len as u64).to_le_bytes());
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

/// Start offsets (corpus indices) of the windows `batch_at` would draw.
pub fn window_starts(
    corpus: &Corpus,
    split: Split,
    step: u64,
    seed: u64,
    batch_size: usize,
    seq_len: usize,
) -> Result<Vec<usize>> {
    let range = corpus.split_range(split);
    let len = range.len();
    if seq_len >= len {
        return Err(Error::data(format!(
            "seq_len {seq_len} must be < {split:?} split length {len} (corpus has {} tokens)",
            corpus.len()
        )));
    }
    let mut rng = keyed_rng(&[seed, split.key(), step]);
    // A window spans seq_len + 1 tokens.
    let max_start = len - (seq_len + 1);
    Ok((0..batch_size).map(|_| range.start + rng.random_range(0..=max_start)).collect())
}

/// Pure batch schedule; never touches model state.
pub fn batch_at(
    corpus: &Corpus,
    split: Split,
    step: u64,
    seed: u64,
    batch_size: usize,
    seq_len: usize,
) -> Result<TokenBatch> {
    let starts = window_starts(corpus, split, step, seed, batch_size, seq_len)?;
    let mut tokens = Vec::with_capacity(batch_size * (seq_len + 1));
    for s in starts {
        tokens.extend_from_slice(&corpus.tokens[s..s + seq_len + 1]);
    }
    TokenBatch::new(batch_size, seq_len, tokens)
}

/// The fixed evaluation set: validation batches `0..n_batches`.
pub fn validation_set(
    corpus: &Corpus,
    seed: u64,
    n_batches: usize,
    batch_size: usize,
    seq_len: usize,
) -> Result<Vec<TokenBatch>> {
    if n_batches < 1 {
        return Err(Error::precondition("validation set needs n_batches >= 1"));
    }
    (0..n_batches as u64).map(|i| batch_at(corpus, Split::Validation, i, seed, batch_size, seq_len)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::io::Write;

    #[test]
    fn synthetic_is_deterministic() {
        for kind in [SyntheticKind::MarkovBigram, SyntheticKind::CopyTask] {
            let a = make_synthetic_corpus(kind, 5000, 3).unwrap();
            let b = make_synthetic_corpus(kind, 5000, 3).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 5000);
        }
    }

    #[test]
    fn unknown_kind_is_config_error() {
        assert!(matches!("zipf".parse::<SyntheticKind>(), Err(Error::Config(_))));
        assert_eq!("copy-task".parse::<SyntheticKind>().unwrap(), SyntheticKind::CopyTask);
    }

    #[test]
    fn copy_task_segments_repeat() {
        let c = make_synthetic_corpus(SyntheticKind::CopyTask, 4000, 11).unwrap();
        let toks = c.tokens();
        let delims: Vec<usize> =
            toks.iter().enumerate().filter(|(_, &t)| t == COPY_DELIMITER).map(|(i, _)| i).collect();
        assert!(delims.len() > 10);
        for w in delims.windows(2) {
            let seg = &toks[w[0] + 1..w[1]];
            assert_eq!(seg.len() % 2, 0);
            let (a, b) = seg.split_at(seg.len() / 2);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn chain_rows_are_stochastic_and_sparse() {
        let chain = BigramChain::generate(16, BIGRAM_FANOUT, 2);
        for s in 0..16 {
            let row = chain.row(s);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(row.iter().filter(|&&p| p > 0.0).count(), BIGRAM_FANOUT);
        }
        let h = chain.entropy_rate();
        assert!(h > 0.0 && h < (BIGRAM_FANOUT as f64).ln() + 1e-12);
    }

    #[test]
    fn empirical_entropy_matches_chain() {
        let chain = BigramChain::generate(12, BIGRAM_FANOUT, 5);
        let toks = chain.sample(400_000, 5);
        let v = 12;
        let mut counts = vec![0f64; v * v];
        for w in toks.windows(2) {
            counts[w[0] as usize * v + w[1] as usize] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        let mut h = 0.0;
        for s in 0..v {
            let row = &counts[s * v..(s + 1) * v];
            let n: f64 = row.iter().sum();
            for &c in row {
                if c > 0.0 {
                    h -= (c / total) * (c / n).ln();
                }
            }
        }
        assert!((h - chain.entropy_rate()).abs() < 0.01, "empirical {h} vs {}", chain.entropy_rate());
    }

    #[test]
    fn text_corpus_tokenizes_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        let bytes: Vec<u8> = (0..100u8).collect();
        std::fs::File::create(&path).unwrap().write_all(&bytes).unwrap();
        let c = load_text_corpus(&path).unwrap();
        assert_eq!(c.len(), 100);
        assert_eq!(c.vocab_size(), 257);
        assert_eq!(c.to_bytes(), bytes);

        std::fs::write(&path, [b'a'; 40]).unwrap();
        let c = load_text_corpus(&path).unwrap();
        assert!(c.tokens().iter().all(|&t| t == b'a' as u32));

        std::fs::write(&path, b"").unwrap();
        assert!(matches!(load_text_corpus(&path), Err(Error::Data(_))));
        assert!(matches!(load_text_corpus(&dir.path().join("missing")), Err(Error::Io(_))));
    }

    #[test]
    fn batch_at_is_pure() {
        let c = make_synthetic_corpus(SyntheticKind::MarkovBigram, 2000, 1).unwrap();
        let a = batch_at(&c, Split::Train, 5, 9, 4, 16).unwrap();
        let b = batch_at(&c, Split::Train, 5, 9, 4, 16).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a, b);
        let other = batch_at(&c, Split::Train, 6, 9, 4, 16).unwrap();
        assert_ne!(a.digest(), other.digest());
    }

    #[test]
    fn inputs_and_targets_shift_by_one() {
        let c = make_synthetic_corpus(SyntheticKind::MarkovBigram, 500, 1).unwrap();
        let b = batch_at(&c, Split::Train, 0, 0, 2, 5).unwrap();
        let (x, y) = (b.inputs(), b.targets());
        assert_eq!(x.len(), 10);
        for r in 0..2 {
            assert_eq!(&x[r * 5 + 1..r * 5 + 5], &y[r * 5..r * 5 + 4]);
        }
    }

    #[test]
    fn splits_are_disjoint_over_sampled_windows() {
        let c = make_synthetic_corpus(SyntheticKind::MarkovBigram, 1000, 4).unwrap();
        let seq = 8;
        let mut train = HashSet::new();
        let mut val = HashSet::new();
        for step in 0..100 {
            for s in window_starts(&c, Split::Train, step, 3, 8, seq).unwrap() {
                train.extend(s..s + seq + 1);
            }
            for s in window_starts(&c, Split::Validation, step, 3, 8, seq).unwrap() {
                val.extend(s..s + seq + 1);
            }
        }
        assert!(train.is_disjoint(&val));
        assert!(val.iter().all(|&i| i >= 900));
    }

    #[test]
    fn seq_len_longer_than_split_is_rejected() {
        let c = make_synthetic_corpus(SyntheticKind::MarkovBigram, 100, 4).unwrap();
        assert!(matches!(batch_at(&c, Split::Validation, 0, 0, 1, 10), Err(Error::Data(_))));
        assert!(batch_at(&c, Split::Validation, 0, 0, 1, 9).is_ok());
    }

    #[test]
    fn validation_set_is_fixed() {
        let c = make_synthetic_corpus(SyntheticKind::MarkovBigram, 20_000, 4).unwrap();
        let a = validation_set(&c, 1, 16, 4, 16).unwrap();
        let b = validation_set(&c, 1, 16, 4, 16).unwrap();
        let da: Vec<u64> = a.iter().map(|b| b.digest()).collect();
        let db: Vec<u64> = b.iter().map(|b| b.digest()).collect();
        assert_eq!(da, db);
        assert_eq!(da.iter().collect::<HashSet<_>>().len(), 16);
        assert!(validation_set(&c, 1, 0, 4, 16).is_err());
    }
}
