//! Byte-pair-encoding tokenizer for the pretrained text encoder. Vocabulary
//! and merge ranks ship inside the weights container, so a converted weights
//! bundle is self-contained.

use std::collections::HashMap;

use ndarray::Array2;

use crate::backbone::TextTokenizer;
use crate::error::{Error, Result};

pub const SOT_TOKEN: &str = "<|startoftext|>";
pub const EOT_TOKEN: &str = "<|endoftext|>";

/// Reversible byte -> printable-unicode map used by byte-level BPE vocabularies.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut used = [false; 256];
    let keep = (b'!'..=b'~').chain(0xA1..=0xAC).chain(0xAE..=0xFF);
    for b in keep {
        table[b as usize] = char::from_u32(b as u32).unwrap();
        used[b as usize] = true;
    }
    let mut n = 0u32;
    for b in 0..256 {
        if !used[b] {
            table[b] = char::from_u32(256 + n).unwrap();
            n += 1;
        }
    }
    table
}

pub struct BpeTokenizer {
    vocab: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_map: [char; 256],
    pattern: regex::Regex,
    sot: u32,
    eot: u32,
    table: Array2<f64>,
    context_limit: usize,
}

impl BpeTokenizer {
    /// `vocab` lists token strings in id order; `merges` lists merge pairs as
    /// `"left right"` lines in rank order; `table` is the frozen embedding
    /// table with one row per vocabulary entry.
    pub fn new(
        vocab: Vec<String>,
        merges: Vec<String>,
        table: Array2<f64>,
        context_limit: usize,
    ) -> Result<Self> {
        if table.nrows() != vocab.len() {
            return Err(Error::Container(format!(
                "embedding rows {} != vocabulary size {}",
                table.nrows(),
                vocab.len()
            )));
        }
        let lookup: HashMap<String, u32> = vocab
            .into_iter()
            .enumerate()
            .map(|(i, t)| (t, i as u32))
            .collect();
        let sot = *lookup
            .get(SOT_TOKEN)
            .ok_or_else(|| Error::Tokenizer(format!("vocabulary lacks {SOT_TOKEN}")))?;
        let eot = *lookup
            .get(EOT_TOKEN)
            .ok_or_else(|| Error::Tokenizer(format!("vocabulary lacks {EOT_TOKEN}")))?;
        let mut ranks = HashMap::new();
        for (rank, line) in merges.iter().enumerate() {
            let mut parts = line.split(' ');
            let (Some(a), Some(b)) = (parts.next(), parts.next()) else {
                return Err(Error::Tokenizer(format!("malformed merge rule {line:?}")));
            };
            ranks.insert((a.to_string(), b.to_string()), rank);
        }
        let pattern = regex::Regex::new(r"'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+")
            .expect("valid token pattern");
        Ok(Self {
            vocab: lookup,
            ranks,
            byte_map: bytes_to_unicode(),
            pattern,
            sot,
            eot,
            table,
            context_limit,
        })
    }

    fn bpe_word(&self, word: &str) -> Vec<String> {
        // Start from single characters with an end-of-word marker and merge
        // the best-ranked adjacent pair until none remains.
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() {
            return Vec::new();
        }
        let mut parts: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        let last = parts.len() - 1;
        parts[last] = format!("{}</w>", parts[last]);

        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, index)
            for i in 0..parts.len().saturating_sub(1) {
                if let Some(&rank) =
                    self.ranks.get(&(parts[i].clone(), parts[i + 1].clone()))
                {
                    if best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((_, i)) = best else { break };
            let merged = format!("{}{}", parts[i], parts[i + 1]);
            parts.splice(i..=i + 1, [merged]);
        }
        parts
    }
}

impl TextTokenizer for BpeTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = vec![self.sot];
        ids.extend(self.encode_content(text)?);
        ids.push(self.eot);
        Ok(ids)
    }

    fn encode_content(&self, text: &str) -> Result<Vec<u32>> {
        let cleaned = text.to_lowercase();
        let cleaned = cleaned.split_whitespace().collect::<Vec<_>>().join(" ");
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(&cleaned) {
            let mapped: String = m.as_str().bytes().map(|b| self.byte_map[b as usize]).collect();
            for piece in self.bpe_word(&mapped) {
                let id = self.vocab.get(&piece).ok_or_else(|| {
                    Error::Tokenizer(format!("token piece {piece:?} not in vocabulary"))
                })?;
                ids.push(*id);
            }
        }
        if ids.is_empty() {
            return Err(Error::Tokenizer(format!("no encodable tokens in {text:?}")));
        }
        Ok(ids)
    }

    fn leading_special_count(&self) -> usize {
        1
    }

    fn eot_id(&self) -> Option<u32> {
        Some(self.eot)
    }

    fn embed(&self, ids: &[u32]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.table.ncols()));
        for (row, &id) in ids.iter().enumerate() {
            if id as usize >= self.table.nrows() {
                return Err(Error::Tokenizer(format!("token id {id} out of vocabulary")));
            }
            out.row_mut(row).assign(&self.table.row(id as usize));
        }
        Ok(out)
    }

    fn context_limit(&self) -> usize {
        self.context_limit
    }

    fn token_dim(&self) -> usize {
        self.table.ncols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Tiny handcrafted vocabulary: single characters plus a few merges.
    fn tiny() -> BpeTokenizer {
        let mut vocab: Vec<String> = vec![SOT_TOKEN.into(), EOT_TOKEN.into()];
        for c in "abcdefghijklmnopqrstuvwxyz".chars() {
            vocab.push(c.to_string());
            vocab.push(format!("{c}</w>"));
        }
        vocab.push("at</w>".into());
        vocab.push("cat</w>".into());
        let merges = vec!["a t</w>".to_string(), "c at</w>".to_string()];
        let table = Array2::zeros((vocab.len(), 4));
        BpeTokenizer::new(vocab, merges, table, 77).unwrap()
    }

    #[test]
    fn merges_apply_in_rank_order() {
        let tok = tiny();
        let ids = tok.encode_content("cat").unwrap();
        assert_eq!(ids.len(), 1);
        let cat_id = ids[0];
        // "at" alone stops after the first merge.
        let at = tok.encode_content("at").unwrap();
        assert_eq!(at.len(), 1);
        assert_ne!(at[0], cat_id);
    }

    #[test]
    fn specials_wrap_content() {
        let tok = tiny();
        let full = tok.encode("cat").unwrap();
        assert_eq!(full.first(), Some(&0));
        assert_eq!(full.last(), tok.eot_id().as_ref());
        assert_eq!(full.len(), 3);
        assert_eq!(tok.leading_special_count(), 1);
    }

    #[test]
    fn unknown_piece_is_an_error() {
        let tok = tiny();
        // Digits are not in the tiny vocabulary.
        assert!(tok.encode_content("123").is_err());
    }

    #[test]
    fn whitespace_and_case_are_normalized() {
        let tok = tiny();
        let a = tok.encode_content("CAT").unwrap();
        let b = tok.encode_content("  cat \n").unwrap();
        assert_eq!(a, b);
    }
}
