use serde::{Deserialize, Serialize};

/// Byte-level tokenizer: ids 0..=255 are raw UTF-8 bytes, followed by the
/// special tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        Self {
            bos: 256,
            eos: 257,
            pad: 258,
        }
    }
}

impl TokenizerSpec {
    pub const BYTE_VOCAB: usize = 256;

    pub fn vocab_size(&self) -> usize {
        Self::BYTE_VOCAB + 3
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.bos || id == self.eos || id == self.pad
    }

    /// Encode `text` as byte ids, optionally wrapped in BOS/EOS.
    pub fn encode(&self, text: &str, add_specials: bool) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() + 2);
        if add_specials {
            out.push(self.bos);
        }
        out.extend(text.bytes().map(u32::from));
        if add_specials {
            out.push(self.eos);
        }
        out
    }

    /// Decode ids back to text, dropping special tokens. Invalid UTF-8 (e.g.
    /// a prefix cut inside a multi-byte character) is replaced lossily.
    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&id| (id as usize) < Self::BYTE_VOCAB)
            .map(|&id| id as u8)
            .collect();
        match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        }
    }
}
