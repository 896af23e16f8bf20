use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{ChnError, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const EOS: u32 = 2;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "<eos>";

const RESERVED: [&str; 3] = [PAD_TOKEN, UNK_TOKEN, EOS_TOKEN];

/// Token/id mapping with PAD, UNK and EOS at ids 0, 1, 2 followed by corpus
/// tokens in descending frequency (ties by first occurrence).
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Keeps the `max_size - 3` most frequent tokens of `corpus`.
    pub fn build<S, T>(corpus: impl IntoIterator<Item = S>, max_size: usize) -> Result<Self>
    where
        S: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        if max_size <= RESERVED.len() {
            return Err(ChnError::Config(format!(
                "vocabulary size must exceed {}, got {max_size}",
                RESERVED.len()
            )));
        }
        // token -> (count, first position)
        let mut freq: HashMap<String, (u64, usize)> = HashMap::new();
        let mut position = 0usize;
        for seq in corpus {
            for tok in seq {
                let tok = tok.as_ref();
                if RESERVED.contains(&tok) {
                    continue;
                }
                let entry = freq.entry(tok.to_string()).or_insert((0, position));
                entry.0 += 1;
                position += 1;
            }
        }
        if freq.is_empty() {
            return Err(ChnError::Empty("vocabulary corpus"));
        }
        let mut ranked: Vec<(String, u64, usize)> =
            freq.into_iter().map(|(t, (c, first))| (t, c, first)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(max_size - RESERVED.len());

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; RESERVED.len()];
        for (t, c, _) in ranked {
            tokens.push(t);
            counts.push(c);
        }
        Ok(Self::from_parts(tokens, counts))
    }

    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            tokens,
            counts,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode_all<T: AsRef<str>>(&self, tokens: &[T]) -> Vec<u32> {
        tokens.iter().map(|t| self.encode(t.as_ref())).collect()
    }

    pub fn decode(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Joins the tokens of `ids` with spaces, stopping at EOS and skipping PAD.
    pub fn decode_text(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD)
            .map(|&id| self.decode(id).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn count(&self, id: u32) -> Option<u64> {
        self.counts.get(id as usize).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Writes one `token<TAB>id<TAB>count` line per entry, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| ChnError::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (id, (tok, count)) in self.tokens.iter().zip(&self.counts).enumerate() {
            writeln!(w, "{tok}\t{id}\t{count}").map_err(|e| ChnError::io(path, e))?;
        }
        w.flush().map_err(|e| ChnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ChnError::io(path, e))?;
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let bad = || ChnError::Data(format!("{}:{}: malformed vocabulary line", path.display(), lineno + 1));
            let mut parts = line.split('\t');
            let (Some(tok), Some(id), Some(count), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad());
            };
            let id: usize = id.parse().map_err(|_| bad())?;
            if id != tokens.len() {
                return Err(bad());
            }
            tokens.push(tok.to_string());
            counts.push(count.parse().map_err(|_| bad())?);
        }
        if tokens.len() <= RESERVED.len() || tokens[..3] != RESERVED {
            return Err(ChnError::Data(format!(
                "{}: vocabulary must start with {RESERVED:?}",
                path.display()
            )));
        }
        Ok(Self::from_parts(tokens, counts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_ranking_and_unk() {
        let corpus = vec![vec!["c", "a", "b"], vec!["a", "b", "a"]];
        let v = Vocabulary::build(corpus, 5).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "<eos>", "a", "b"]);
        assert_eq!(v.encode("c"), UNK);
        assert_eq!(v.count(3), Some(3));
    }

    #[test]
    fn ties_break_by_first_occurrence() {
        let v = Vocabulary::build(vec![vec!["z", "y", "x", "y", "z", "x"]], 10).unwrap();
        assert_eq!(&v.tokens()[3..], &["z", "y", "x"]);
    }

    #[test]
    fn single_token_and_errors() {
        let v = Vocabulary::build(vec![vec!["only"]], 50_000).unwrap();
        assert_eq!(v.len(), 4);
        assert!(Vocabulary::build(vec![vec!["a"]], 3).is_err());
        assert!(Vocabulary::build(Vec::<Vec<&str>>::new(), 10).is_err());
        // reserved spellings in the corpus never get a second id
        let v = Vocabulary::build(vec![vec!["<unk>", "<eos>", "q"]], 10).unwrap();
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn encode_decode_bijection() {
        let v = Vocabulary::build(vec![vec!["a", "b", "c", "a"]], 10).unwrap();
        for id in 0..v.len() as u32 {
            assert_eq!(v.encode(v.decode(id).unwrap()), id);
        }
        assert_eq!(v.decode_text(&[3, 4, EOS, 5]), "a b");
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        let v = Vocabulary::build(vec![vec!["hello", "world", "hello"]], 10).unwrap();
        v.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<pad>\t0\t0\n<unk>\t1\t0\n<eos>\t2\t0\nhello\t3\t2\n"));
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }
}
