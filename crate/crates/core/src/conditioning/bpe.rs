//! Byte-pair-encoding tokenizer trained on the lyric corpus.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::CondError;

/// Character-level BPE: the vocabulary starts from every character seen in
/// training and grows by merging the most frequent adjacent token pair until
/// the target size is reached. Ties break toward the lexicographically
/// smallest pair, so training is deterministic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LyricTokenizer {
    vocab: Vec<String>,
    token_ids: BTreeMap<String, u32>,
    /// Ordered merge rules as (left id, right id) -> product id.
    merges: Vec<(u32, u32, u32)>,
}

impl LyricTokenizer {
    pub fn train(corpus: &[&str], vocab_size: usize) -> Result<Self, CondError> {
        if corpus.is_empty() || corpus.iter().all(|s| s.is_empty()) {
            return Err(CondError::Config("lyric corpus is empty"));
        }
        let mut chars: Vec<String> = corpus
            .iter()
            .flat_map(|s| s.chars())
            .map(|c| c.to_string())
            .collect();
        chars.sort();
        chars.dedup();
        if vocab_size < chars.len() {
            return Err(CondError::Config(
                "vocab size smaller than the training character set",
            ));
        }
        let mut vocab = chars;
        let mut token_ids: BTreeMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();

        let mut seqs: Vec<Vec<u32>> = corpus
            .iter()
            .map(|s| s.chars().map(|c| token_ids[&c.to_string()]).collect())
            .collect();

        let mut merges = Vec::new();
        while vocab.len() < vocab_size {
            // Count adjacent pairs.
            let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
            for seq in &seqs {
                for w in seq.windows(2) {
                    *counts.entry((w[0], w[1])).or_insert(0) += 1;
                }
            }
            // Best pair: max count, lexicographic token-string tie-break.
            let mut best: Option<((u32, u32), usize)> = None;
            for (&pair, &count) in &counts {
                let better = match &best {
                    None => true,
                    Some((bp, bc)) => {
                        count > *bc
                            || (count == *bc
                                && pair_key(&vocab, pair) < pair_key(&vocab, *bp))
                    }
                };
                if better {
                    best = Some((pair, count));
                }
            }
            let Some(((left, right), count)) = best else {
                break; // nothing left to merge
            };
            if count < 2 {
                break; // merging singletons only inflates the vocabulary
            }
            let product = format!("{}{}", vocab[left as usize], vocab[right as usize]);
            let id = vocab.len() as u32;
            vocab.push(product.clone());
            token_ids.insert(product, id);
            merges.push((left, right, id));
            for seq in seqs.iter_mut() {
                merge_in_place(seq, left, right, id);
            }
        }
        Ok(Self {
            vocab,
            token_ids,
            merges,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn merge_count(&self) -> usize {
        self.merges.len()
    }

    /// Tokenizes a string by splitting to characters and replaying the
    /// learned merges in order.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>, CondError> {
        let mut seq = Vec::with_capacity(text.len());
        for c in text.chars() {
            match self.token_ids.get(c.to_string().as_str()) {
                Some(&id) if (id as usize) < self.char_count() => seq.push(id),
                _ => return Err(CondError::UnknownToken(c.to_string())),
            }
        }
        for &(left, right, id) in &self.merges {
            merge_in_place(&mut seq, left, right, id);
        }
        Ok(seq)
    }

    /// Inverse of [`tokenize`]: concatenates token strings.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String, CondError> {
        let mut out = String::new();
        for &id in ids {
            match self.vocab.get(id as usize) {
                Some(tok) => out.push_str(tok),
                None => return Err(CondError::UnknownToken(format!("#{id}"))),
            }
        }
        Ok(out)
    }

    fn char_count(&self) -> usize {
        self.vocab.len() - self.merges.len()
    }

    /// Text serialization: vocabulary listing followed by the ordered merges.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("bpe-tokenizer v1\n");
        out.push_str(&format!("vocab {}\n", self.vocab.len()));
        for tok in &self.vocab {
            out.push_str(&escape(tok));
            out.push('\n');
        }
        out.push_str(&format!("merges {}\n", self.merges.len()));
        for &(l, r, id) in &self.merges {
            out.push_str(&format!("{l} {r} {id}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CondError> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &'static str| -> Result<(usize, &str), CondError> {
            lines
                .next()
                .map(|(i, l)| (i + 1, l))
                .ok_or(CondError::Parse { line: 0, what })
        };
        let (_, header) = next("header")?;
        if header != "bpe-tokenizer v1" {
            return Err(CondError::Parse {
                line: 1,
                what: "unrecognized tokenizer header",
            });
        }
        let (line_no, vocab_line) = next("vocab count")?;
        let vocab_len: usize = vocab_line
            .strip_prefix("vocab ")
            .and_then(|s| s.parse().ok())
            .ok_or(CondError::Parse {
                line: line_no,
                what: "vocab count",
            })?;
        let mut vocab = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            let (line_no, tok) = next("vocab entry")?;
            vocab.push(unescape(tok).ok_or(CondError::Parse {
                line: line_no,
                what: "vocab entry escape",
            })?);
        }
        let (line_no, merges_line) = next("merge count")?;
        let merge_len: usize = merges_line
            .strip_prefix("merges ")
            .and_then(|s| s.parse().ok())
            .ok_or(CondError::Parse {
                line: line_no,
                what: "merge count",
            })?;
        let mut merges = Vec::with_capacity(merge_len);
        for _ in 0..merge_len {
            let (line_no, m) = next("merge entry")?;
            let mut parts = m.split(' ');
            let parse = |p: Option<&str>| -> Option<u32> { p.and_then(|v| v.parse().ok()) };
            let (l, r, id) = match (
                parse(parts.next()),
                parse(parts.next()),
                parse(parts.next()),
            ) {
                (Some(l), Some(r), Some(id)) if parts.next().is_none() => (l, r, id),
                _ => {
                    return Err(CondError::Parse {
                        line: line_no,
                        what: "merge entry",
                    })
                }
            };
            if l as usize >= vocab.len() || r as usize >= vocab.len() || id as usize >= vocab.len()
            {
                return Err(CondError::Parse {
                    line: line_no,
                    what: "merge id out of range",
                });
            }
            merges.push((l, r, id));
        }
        let token_ids = vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        Ok(Self {
            vocab,
            token_ids,
            merges,
        })
    }
}

fn pair_key<'v>(vocab: &'v [String], pair: (u32, u32)) -> (&'v str, &'v str) {
    (&vocab[pair.0 as usize], &vocab[pair.1 as usize])
}

fn merge_in_place(seq: &mut Vec<u32>, left: u32, right: u32, id: u32) {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == left && seq[i + 1] == right {
            out.push(id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}

fn escape(s: &str) -> String {
    let mut out = String::new();
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            ' ' => out.push_str("\\s"),
            _ => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Option<String> {
    let mut out = String::new();
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next()? {
                '\\' => out.push('\\'),
                'n' => out.push('\n'),
                'r' => out.push('\r'),
                's' => out.push(' '),
                _ => return None,
            }
        } else {
            out.push(c);
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn first_merge_on_lalala_is_l_a() {
        // "lalala": pairs la x3, al x2 -> ("l","a") merges first.
        let tok = LyricTokenizer::train(&["lalala"], 3).unwrap();
        assert_eq!(tok.merge_count(), 1);
        assert_eq!(tok.token(2), Some("la"));
        assert_eq!(tok.tokenize("lalala").unwrap(), vec![2, 2, 2]);
    }

    #[test]
    fn vocab_size_equal_to_char_count_is_identity() {
        let tok = LyricTokenizer::train(&["abcab"], 3).unwrap();
        assert_eq!(tok.merge_count(), 0);
        assert_eq!(tok.tokenize("ab").unwrap().len(), 2);
    }

    #[test]
    fn vocab_size_below_char_count_is_config_error() {
        assert!(matches!(
            LyricTokenizer::train(&["abc"], 2),
            Err(CondError::Config(_))
        ));
    }

    #[test]
    fn paper_scale_vocab_target_is_accepted() {
        // A tiny corpus saturates long before 6681 merges; training must
        // still accept the target and stop cleanly.
        let tok = LyricTokenizer::train(&["la li lu ma mi mu"], 6681).unwrap();
        assert!(tok.vocab_size() < 6681);
        assert!(tok.merge_count() > 0);
    }

    #[test]
    fn roundtrip_is_lossless_on_corpus_strings() {
        let corpus = ["la la lu mi", "so so la ti", "mi mi lu la so"];
        let tok = LyricTokenizer::train(&corpus, 24).unwrap();
        for s in corpus {
            let ids = tok.tokenize(s).unwrap();
            assert_eq!(tok.detokenize(&ids).unwrap(), s);
        }
    }

    #[test]
    fn unknown_character_is_a_vocab_error() {
        let tok = LyricTokenizer::train(&["lala"], 8).unwrap();
        assert!(matches!(
            tok.tokenize("laxla"),
            Err(CondError::UnknownToken(_))
        ));
    }

    #[test]
    fn text_format_roundtrips() {
        let corpus = ["la la lu mi so", "mi lu lu so la"];
        let tok = LyricTokenizer::train(&corpus, 20).unwrap();
        let text = tok.to_text();
        let back = LyricTokenizer::from_text(&text).unwrap();
        assert_eq!(tok, back);
        assert!(LyricTokenizer::from_text(&text[..text.len() / 2]).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["do re mi fa so", "so fa mi re do", "mi mi re do fa"];
        let a = LyricTokenizer::train(&corpus, 30).unwrap();
        let b = LyricTokenizer::train(&corpus, 30).unwrap();
        assert_eq!(a, b);
    }
}
