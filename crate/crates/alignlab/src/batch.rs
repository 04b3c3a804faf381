//! Fixed-shape token batches and deterministic window sampling.
//!
//! A batch is `rows` sequences of equal length. Sampling draws, per row, a
//! record uniformly at random and then a start offset uniformly over the
//! record's valid windows; records shorter than the window are right-padded
//! with PAD. The draw order is fixed, so a seed fully determines a batch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Corpus;
use crate::tokenizer::{TokenId, Tokenizer, PAD};

/// A batch of token rows sampled from one corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub rows: Vec<Vec<TokenId>>,
    pub corpus_id: String,
    pub seed: u64,
}

impl TokenBatch {
    pub fn sequence_len(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

/// A corpus with every record pre-encoded, ready for window sampling.
#[derive(Debug, Clone)]
pub struct TokenizedCorpus {
    pub corpus_id: String,
    pub seqs: Vec<Vec<TokenId>>,
}

impl TokenizedCorpus {
    pub fn new(corpus: &Corpus, tokenizer: &Tokenizer) -> Self {
        TokenizedCorpus {
            corpus_id: corpus.id().to_string(),
            seqs: corpus
                .texts()
                .map(|t| tokenizer.encode(&t).ids)
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn total_tokens(&self) -> u64 {
        self.seqs.iter().map(|s| s.len() as u64).sum()
    }
}

/// Sample one batch of `rows` windows of length `len` with replacement.
pub fn sample_batch(
    corpus: &TokenizedCorpus,
    rows: usize,
    len: usize,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> TokenBatch {
    assert!(!corpus.seqs.is_empty(), "cannot sample from an empty corpus");
    assert!(rows >= 1 && len >= 2, "batch must be at least 1 x 2");
    let mut out = Vec::with_capacity(rows);
    for _ in 0..rows {
        let rec = rng.gen_range(0..corpus.seqs.len());
        let seq = &corpus.seqs[rec];
        let mut row = Vec::with_capacity(len);
        if seq.len() > len {
            let start = rng.gen_range(0..=seq.len() - len);
            row.extend_from_slice(&seq[start..start + len]);
        } else {
            // Offset draw is kept even when only offset 0 is valid, so the
            // stream shape does not depend on record lengths mid-row.
            let _ = rng.gen_range(0..=0usize);
            row.extend_from_slice(seq);
            row.resize(len, PAD);
        }
        out.push(row);
    }
    TokenBatch {
        rows: out,
        corpus_id: corpus.corpus_id.clone(),
        seed,
    }
}
