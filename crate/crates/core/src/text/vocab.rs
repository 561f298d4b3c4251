use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token/index bijection with fixed reserved indices 0..3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Every symbol of the segmented corpus, most frequent first, ties by text.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>]) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sentence in corpus {
            for sym in sentence {
                let sym = sym.as_ref();
                if !RESERVED.contains(&sym) {
                    *counts.entry(sym).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()))
            .expect("counted symbols are unique")
    }

    /// Builds from non-reserved tokens in index order (starting at 4).
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocabulary { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> &str {
        self.tokens
            .get(index)
            .map(String::as_str)
            .unwrap_or(RESERVED[UNK])
    }

    /// Non-reserved tokens in index order.
    pub fn entries(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn numericalize<S: AsRef<str>>(&self, subwords: &[S], add_bos_eos: bool) -> Vec<usize> {
        let mut out = Vec::with_capacity(subwords.len() + 2);
        if add_bos_eos {
            out.push(BOS);
        }
        out.extend(subwords.iter().map(|s| self.index(s.as_ref())));
        if add_bos_eos {
            out.push(EOS);
        }
        out
    }

    /// Maps indices back to symbols, dropping reserved framing tokens.
    pub fn denumericalize(&self, indices: &[usize]) -> Vec<String> {
        indices
            .iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    /// One token per line; the first four lines are the reserved symbols.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
        if lines.len() < RESERVED.len()
            || lines[..RESERVED.len()]
                .iter()
                .zip(RESERVED)
                .any(|(l, r)| l != r)
        {
            return Err(Error::Format(format!(
                "vocabulary must begin with {RESERVED:?}"
            )));
        }
        Self::from_tokens(lines.into_iter().skip(RESERVED.len()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(&[vec!["a", "b", "a"], vec!["c@@", "a"]])
    }

    #[test]
    fn reserved_indices_and_frequency_order() {
        let v = vocab();
        assert_eq!(v.token(PAD), "<pad>");
        assert_eq!(v.token(UNK), "<unk>");
        assert_eq!(v.index("a"), 4);
        assert_eq!(v.index("b"), 5);
        assert_eq!(v.index("c@@"), 6);
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn numericalize_examples() {
        let v = vocab();
        assert_eq!(v.numericalize(&["a", "b"], false), vec![4, 5]);
        assert_eq!(v.numericalize(&["zzz"], false), vec![UNK]);
        assert_eq!(v.numericalize(&["a"], true), vec![BOS, 4, EOS]);
    }

    #[test]
    fn index_token_round_trip() {
        let v = vocab();
        for i in 0..v.len() {
            assert_eq!(v.index(v.token(i)), i);
        }
    }

    #[test]
    fn file_round_trip() {
        let v = vocab();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        assert_eq!(Vocabulary::read_from(&buf[..]).unwrap(), v);
        assert!(Vocabulary::read_from(&b"a\nb\n"[..]).is_err());
    }
}
