//! Byte-level BPE tokenizer reading the published `vocab.json` / `merges.txt`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use regex::Regex;

use crate::error::{Error, Result};

pub const START_TOKEN: &str = "<|startoftext|>";
pub const END_TOKEN: &str = "<|endoftext|>";
const END_OF_WORD: &str = "</w>";

#[derive(Debug, Clone)]
pub struct BpeTokenizer {
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_chars: [char; 256],
    pattern: Regex,
    sot: u32,
    eot: u32,
}

/// Printable stand-ins for every byte, the mapping the vocabulary is written in.
fn byte_chars() -> [char; 256] {
    let mut printable: Vec<u32> = (b'!' as u32..=b'~' as u32).chain(0xA1..=0xAC).chain(0xAE..=0xFF).collect();
    let mut out = ['\0'; 256];
    for &b in &printable {
        out[b as usize] = char::from_u32(b).expect("latin-1");
    }
    let mut extra = 0;
    for b in 0..256u32 {
        if !printable.contains(&b) {
            out[b as usize] = char::from_u32(256 + extra).expect("valid code point");
            extra += 1;
            printable.push(b);
        }
    }
    out
}

impl BpeTokenizer {
    pub fn from_files(vocab: &Path, merges: &Path) -> Result<Self> {
        let vocab_text = fs::read_to_string(vocab).map_err(|e| Error::io(vocab, e))?;
        let merges_text = fs::read_to_string(merges).map_err(|e| Error::io(merges, e))?;
        Self::from_strings(&vocab_text, &merges_text)
    }

    pub fn from_strings(vocab_json: &str, merges: &str) -> Result<Self> {
        let encoder: HashMap<String, u32> = serde_json::from_str(vocab_json)?;
        let mut ranks = HashMap::new();
        for line in merges.lines() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => {
                    let rank = ranks.len();
                    ranks.entry((a.to_string(), b.to_string())).or_insert(rank);
                }
                _ => return Err(Error::Format(format!("bad merge line `{line}`"))),
            }
        }
        let special = |t: &str| {
            encoder
                .get(t)
                .copied()
                .ok_or_else(|| Error::Format(format!("vocabulary has no `{t}` token")))
        };
        let (sot, eot) = (special(START_TOKEN)?, special(END_TOKEN)?);
        let pattern = Regex::new(
            r"(?i)<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+",
        )
        .expect("static pattern");
        Ok(BpeTokenizer {
            encoder,
            ranks,
            byte_chars: byte_chars(),
            pattern,
            sot,
            eot,
        })
    }

    pub fn start_id(&self) -> u32 {
        self.sot
    }

    pub fn end_id(&self) -> u32 {
        self.eot
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.len()
    }

    /// Token ids without start/end markers.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(&cleaned) {
            let word: String = m.as_str().bytes().map(|b| self.byte_chars[b as usize]).collect();
            for piece in self.bpe(&word) {
                let id = self
                    .encoder
                    .get(&piece)
                    .ok_or_else(|| Error::Format(format!("token `{piece}` is not in the vocabulary")))?;
                ids.push(*id);
            }
        }
        Ok(ids)
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        let mut parts: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = parts.last_mut() {
            last.push_str(END_OF_WORD);
        }
        loop {
            let best = parts
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w[0].clone(), w[1].clone())))
                .min();
            let Some((_, a, b)) = best else { break };
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && parts[i] == a && parts[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(parts[i].clone());
                    i += 1;
                }
            }
            parts = merged;
            if parts.len() == 1 {
                break;
            }
        }
        parts
    }
}
