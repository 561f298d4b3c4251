//! Byte-pair-encoding subword segmentation.
//!
//! Words are split into characters and the most frequent adjacent symbol
//! pair is merged repeatedly. Segmented output marks every non-final
//! subword of a word with a trailing `@@`, so joining with spaces and
//! deleting `"@@ "` restores the original tokens.

use std::cmp::Reverse;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CONTINUATION: &str = "@@";
pub const FILE_HEADER: &str = "#version: vagnmt-bpe-1";

type Pair = (String, String);

/// Ordered merge rules.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<Pair>,
    ranks: HashMap<Pair, usize>,
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        BpeModel { merges, ranks }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Learns up to `num_merges` merges from tokenized sentences.
    pub fn learn<S: AsRef<str>>(corpus: &[Vec<S>], num_merges: usize) -> Result<Self> {
        if corpus.iter().all(|s| s.is_empty()) {
            return Err(Error::Input("cannot learn BPE from an empty corpus".into()));
        }
        let mut freq: HashMap<&str, i64> = HashMap::new();
        for sentence in corpus {
            for tok in sentence {
                *freq.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut vocab: Vec<(&str, i64)> = freq.into_iter().collect();
        vocab.sort_unstable();
        let mut words: Vec<(Vec<String>, i64)> = vocab
            .into_iter()
            .map(|(w, c)| (w.chars().map(String::from).collect(), c))
            .collect();

        let mut stats = PairStats::default();
        for (idx, (symbols, count)) in words.iter().enumerate() {
            stats.add_word(idx, symbols, *count);
        }

        let mut merges = Vec::new();
        while merges.len() < num_merges {
            let Some((Reverse(count), best)) = stats.best() else {
                break;
            };
            if count < 2 {
                break;
            }
            let mut affected: Vec<usize> = stats.words_with(&best).into_iter().collect();
            affected.sort_unstable();
            for idx in affected {
                let (symbols, count) = &mut words[idx];
                let merged = merge_pair(symbols, &best);
                if merged.len() == symbols.len() {
                    continue;
                }
                stats.remove_word(symbols, *count);
                stats.add_word(idx, &merged, *count);
                *symbols = merged;
            }
            merges.push(best);
        }
        Ok(Self::from_merges(merges))
    }

    /// Segments a single word into subwords (without markers).
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|r| (*r, w))
                })
                .min_by_key(|(r, _)| *r)
                .map(|(_, w)| (w[0].clone(), w[1].clone()));
            match best {
                Some(pair) => symbols = merge_pair(&symbols, &pair),
                None => return symbols,
            }
        }
    }

    /// Segments tokens, marking non-final subwords with `@@`.
    pub fn apply<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        let mut out = Vec::new();
        for tok in tokens {
            let pieces = self.segment_word(tok.as_ref());
            let last = pieces.len().saturating_sub(1);
            for (i, p) in pieces.into_iter().enumerate() {
                if i < last {
                    out.push(format!("{p}{CONTINUATION}"));
                } else {
                    out.push(p);
                }
            }
        }
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{FILE_HEADER}")?;
        for (a, b) in &self.merges {
            writeln!(w, "{a} {b}")?;
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
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(first)) if first.trim_end() == FILE_HEADER => {}
            _ => {
                return Err(Error::Format(format!(
                    "BPE file must start with {FILE_HEADER:?}"
                )))
            }
        }
        let mut merges = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()))
                }
                _ => {
                    return Err(Error::Format(format!(
                        "malformed merge on line {}: {line:?}",
                        n + 2
                    )))
                }
            }
        }
        Ok(Self::from_merges(merges))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Joins subwords back into a space-separated token string.
pub fn postprocess<S: AsRef<str>>(subwords: &[S]) -> String {
    desegment(subwords).join(" ")
}

/// Merges marked subwords back into whole tokens.
pub fn desegment<S: AsRef<str>>(subwords: &[S]) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for sw in subwords {
        let sw = sw.as_ref();
        match sw.strip_suffix(CONTINUATION) {
            Some(stem) => current.push_str(stem),
            None => {
                current.push_str(sw);
                tokens.push(std::mem::take(&mut current));
            }
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

fn merge_pair(symbols: &[String], pair: &Pair) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Pair frequencies with a max-count/lexicographic ordering.
#[derive(Default)]
struct PairStats {
    counts: HashMap<Pair, i64>,
    ordered: BTreeSet<(Reverse<i64>, Pair)>,
    words: HashMap<Pair, HashSet<usize>>,
}

impl PairStats {
    fn bump(&mut self, pair: &Pair, delta: i64) {
        let old = self.counts.get(pair).copied().unwrap_or(0);
        let new = old + delta;
        if old > 0 {
            self.ordered.remove(&(Reverse(old), pair.clone()));
        }
        if new > 0 {
            self.ordered.insert((Reverse(new), pair.clone()));
            self.counts.insert(pair.clone(), new);
        } else {
            self.counts.remove(pair);
        }
    }

    fn add_word(&mut self, idx: usize, symbols: &[String], count: i64) {
        for w in symbols.windows(2) {
            let pair = (w[0].clone(), w[1].clone());
            self.bump(&pair, count);
            self.words.entry(pair).or_default().insert(idx);
        }
    }

    fn remove_word(&mut self, symbols: &[String], count: i64) {
        for w in symbols.windows(2) {
            self.bump(&(w[0].clone(), w[1].clone()), -count);
        }
    }

    fn best(&self) -> Option<(Reverse<i64>, Pair)> {
        self.ordered.first().cloned()
    }

    fn words_with(&self, pair: &Pair) -> HashSet<usize> {
        self.words.get(pair).cloned().unwrap_or_default()
    }
}
