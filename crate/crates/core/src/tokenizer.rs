//! Byte-level tokenizer used by the reference model.

pub const BYTE_VOCAB: usize = 256;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
/// Bytes plus the two special tokens.
pub const VOCAB_SIZE: usize = BYTE_VOCAB + 2;

/// Encodes UTF-8 text as one token per byte.
pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Per-token display text. The lead byte of a multi-byte character carries the
/// whole character and continuation bytes carry an empty string, so joining the
/// texts of all tokens reproduces the input exactly.
pub fn token_texts(text: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(text.len());
    for ch in text.chars() {
        out.push(ch.to_string());
        out.extend(std::iter::repeat_n(String::new(), ch.len_utf8() - 1));
    }
    out
}

/// Text for a token id outside of any source string.
pub fn id_text(id: u32) -> String {
    match id {
        BOS => "<s>".to_string(),
        EOS => "</s>".to_string(),
        b if b < 128 => char::from(b as u8).to_string(),
        b if b < 256 => format!("<0x{b:02X}>"),
        other => format!("<unk:{other}>"),
    }
}
