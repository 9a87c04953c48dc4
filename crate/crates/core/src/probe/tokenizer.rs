//! Byte-level fallback tokenizer for self-contained demos: every UTF-8 byte
//! is its own token, so any probe model with `vocab_size >= 256` accepts it.

/// Vocabulary size covering every byte value.
pub const BYTE_VOCAB: usize = 256;

/// Tokenizes text as raw bytes.
pub fn byte_tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_map_one_to_one() {
        let toks = byte_tokenize("ab c");
        assert_eq!(toks, vec![97, 98, 32, 99]);
        assert!(toks.iter().all(|&t| (t as usize) < BYTE_VOCAB));
    }

    #[test]
    fn multibyte_text_stays_in_vocab() {
        let toks = byte_tokenize("åß∂");
        assert!(!toks.is_empty());
        assert!(toks.iter().all(|&t| (t as usize) < BYTE_VOCAB));
    }
}
