//! Byte-level tokenization.
//!
//! The vocabulary is the 256 byte values plus two specials: BOS (256) and PAD
//! (257). Encoding prepends BOS and maps each byte of the UTF-8 text to its
//! own id, so token counts are exactly reproducible and every possible input
//! encodes. PAD only ever appears in fixed-shape training batches; encoded
//! sequences never contain it.

use thiserror::Error;

use crate::corpus::Corpus;

/// Token id. All ids fit in 16 bits.
pub type TokenId = u16;

/// Beginning-of-sequence marker, prepended to every encoded record.
pub const BOS: TokenId = 256;
/// Padding id used to fill fixed-shape batches; never a scored target.
pub const PAD: TokenId = 257;
/// Vocabulary size: 256 byte values + BOS + PAD.
pub const VOCAB_SIZE: usize = 258;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("invalid token id {0} (vocabulary size is {VOCAB_SIZE})")]
    InvalidToken(u32),
}

/// An encoded record: BOS followed by the byte values of the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Stateless byte-level tokenizer shared by probe and subject models.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn new() -> Self {
        Tokenizer
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    /// Encode text as BOS followed by its bytes; length is byte length + 1.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut ids = Vec::with_capacity(text.len() + 1);
        ids.push(BOS);
        ids.extend(text.bytes().map(TokenId::from));
        TokenSequence { ids }
    }

    /// Length of `encode(text)` without materializing it.
    pub fn encoded_len(&self, text: &str) -> u64 {
        text.len() as u64 + 1
    }

    /// Reassemble the bytes of all non-special ids. Byte runs that do not
    /// form valid UTF-8 are replaced with U+FFFD; sequences produced by
    /// `encode` always decode losslessly.
    pub fn decode(&self, seq: &TokenSequence) -> Result<String, TokenizerError> {
        let mut bytes = Vec::with_capacity(seq.ids.len());
        for &id in &seq.ids {
            if usize::from(id) >= VOCAB_SIZE {
                return Err(TokenizerError::InvalidToken(u32::from(id)));
            }
            if id < 256 {
                bytes.push(id as u8);
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Total token count of a corpus: sum of encoded lengths over records.
    pub fn count_tokens(&self, corpus: &Corpus) -> u64 {
        corpus
            .records()
            .iter()
            .map(|r| self.encoded_len(&r.text_joined()))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Corpus;
    use rand::Rng;

    #[test]
    fn encode_prepends_bos_and_maps_bytes() {
        let t = Tokenizer::new();
        assert_eq!(t.encode("abc").ids, vec![256, 97, 98, 99]);
    }

    #[test]
    fn encode_empty_text_is_bos_only() {
        let t = Tokenizer::new();
        assert_eq!(t.encode("").ids, vec![256]);
    }

    #[test]
    fn roundtrip_multibyte_utf8() {
        let t = Tokenizer::new();
        let s = "Σ∀x";
        assert_eq!(t.decode(&t.encode(s)).unwrap(), s);
    }

    #[test]
    fn decode_strips_specials() {
        let t = Tokenizer::new();
        let seq = TokenSequence {
            ids: vec![256, 104, 105],
        };
        assert_eq!(t.decode(&seq).unwrap(), "hi");
        let bos_only = TokenSequence { ids: vec![256] };
        assert_eq!(t.decode(&bos_only).unwrap(), "");
    }

    #[test]
    fn decode_rejects_out_of_range_id() {
        let t = Tokenizer::new();
        let seq = TokenSequence { ids: vec![300] };
        assert_eq!(t.decode(&seq), Err(TokenizerError::InvalidToken(300)));
    }

    #[test]
    fn count_tokens_matches_hand_count() {
        let t = Tokenizer::new();
        let c = Corpus::from_texts("c", ["ab", "c"]);
        assert_eq!(t.count_tokens(&c), 5); // 2+1 bytes + 2 BOS
        assert_eq!(t.count_tokens(&Corpus::from_texts("e", [] as [&str; 0])), 0);
    }

    #[test]
    fn count_tokens_is_additive_under_concat() {
        let t = Tokenizer::new();
        let a = Corpus::from_texts("a", ["one", "two"]);
        let b = Corpus::from_texts("b", ["three"]);
        let ab = Corpus::concat(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(t.count_tokens(&ab), t.count_tokens(&a) + t.count_tokens(&b));
    }

    #[test]
    fn roundtrip_on_randomized_utf8_corpus() {
        // 10^4 random strings over a mix of ASCII and multibyte chars.
        let t = Tokenizer::new();
        let mut rng = crate::rng::rng_from_seed(0xA11CE);
        let alphabet: Vec<char> = ('a'..='z')
            .chain('0'..='9')
            .chain(['Σ', '∀', 'λ', 'ψ', '→', '≤', ' ', '\t', '€', '中'])
            .collect();
        for _ in 0..10_000 {
            let len = rng.gen_range(0..64);
            let s: String = (0..len)
                .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
                .collect();
            let seq = t.encode(&s);
            assert_eq!(seq.len() as u64, t.encoded_len(&s));
            assert!(seq.ids.iter().all(|&id| usize::from(id) < VOCAB_SIZE));
            assert_eq!(t.decode(&seq).unwrap(), s);
        }
    }

    proptest::proptest! {
        #[test]
        fn prop_roundtrip_identity(s in "\\PC*") {
            let t = Tokenizer::new();
            proptest::prop_assert_eq!(t.decode(&t.encode(&s)).unwrap(), s);
        }
    }
}
