//! Byte-level tokenizer with reserved framing tokens.
//!
//! Ids `0..=255` are raw bytes. [`BOS_MSG`] opens every stored message and
//! [`EOS_MSG`] terminates generation. EOS is a stop signal only: it is never
//! written to the cache, so a decoded message and a prefilled message with
//! the same text have identical token sequences.

pub type TokenId = u32;

pub const BOS_MSG: TokenId = 256;
pub const EOS_MSG: TokenId = 257;
/// Number of ids with a defined meaning; the rest of the vocabulary is unused.
pub const RESERVED_VOCAB: usize = 258;

/// Whether sampling may emit this id.
pub fn is_sampleable(t: TokenId) -> bool {
    t < 256 || t == EOS_MSG
}

/// `[BOS_MSG, bytes...]`
pub fn frame(text: &str) -> Vec<TokenId> {
    std::iter::once(BOS_MSG)
        .chain(text.bytes().map(TokenId::from))
        .collect()
}

pub fn encode_bytes(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Detokenize, dropping framing and unused ids.
pub fn decode_content(tokens: &[TokenId]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|t| **t < 256).map(|t| *t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
