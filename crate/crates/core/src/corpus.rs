//! Parallel corpora with aligned image features, the VAGF feature format,
//! and a synthetic corpus generator.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"VAGF";
pub const FEATURE_VERSION: u32 = 1;
pub const DEFAULT_FEATURE_DIM: usize = 2048;

/// Row-major `count × dim` matrix of image features.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    dim: usize,
    data: Vec<f32>,
}

impl Features {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Format(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        Ok(Features { dim, data })
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f32>]) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::Format(format!(
                "feature row of width {} in a file of width {dim}",
                r.len()
            )));
        }
        Self::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Index of the first row containing a non-finite value.
    pub fn first_non_finite(&self) -> Option<usize> {
        (0..self.len()).find(|&i| self.row(i).iter().any(|v| !v.is_finite()))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let count =
            u32::try_from(self.len()).map_err(|_| Error::Format("too many feature rows".into()))?;
        let dim = u32::try_from(self.dim)
            .map_err(|_| Error::Format("feature dimension too large".into()))?;
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&FEATURE_VERSION.to_le_bytes())?;
        w.write_all(&count.to_le_bytes())?;
        w.write_all(&dim.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)
            .map_err(|_| Error::Format("feature file shorter than its 16-byte header".into()))?;
        if &header[..4] != FEATURE_MAGIC {
            return Err(Error::Format(format!(
                "bad feature magic {:?}",
                &header[..4]
            )));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes"));
        let (version, count, dim) = (word(4), word(8) as usize, word(12) as usize);
        if version != FEATURE_VERSION {
            return Err(Error::Format(format!(
                "unsupported feature version {version}"
            )));
        }
        if dim == 0 {
            return Err(Error::Format("feature dimension is zero".into()));
        }
        let expected = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("feature header sizes overflow".into()))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "feature payload has {} bytes, header promises {count} × {dim} × 4 = {expected}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(dim, data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Aligned source sentences, target sentences and (optionally) image features.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub features: Option<Features>,
}

impl ParallelCorpus {
    pub fn new(
        source: Vec<String>,
        target: Vec<String>,
        features: Option<Features>,
    ) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::Alignment {
                what: "source lines".into(),
                left: source.len(),
                other: "target lines".into(),
                right: target.len(),
            });
        }
        if let Some(f) = &features {
            if f.len() != source.len() {
                return Err(Error::Alignment {
                    what: "sentence pairs".into(),
                    left: source.len(),
                    other: "feature rows".into(),
                    right: f.len(),
                });
            }
            if let Some(i) = f.first_non_finite() {
                return Err(Error::Format(format!(
                    "feature row {i} contains non-finite values"
                )));
            }
        }
        Ok(ParallelCorpus {
            source,
            target,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn feature(&self, i: usize) -> Option<&[f32]> {
        self.features.as_ref().map(|f| f.row(i))
    }

    pub fn save(&self, dir: &Path, split: &str) -> Result<()> {
        let paths = SplitPaths::new(dir, split);
        write_lines(&paths.source, &self.source)?;
        write_lines(&paths.target, &self.target)?;
        if let Some(f) = &self.features {
            f.save(&paths.features)?;
        }
        Ok(())
    }
}

/// File names of one split inside a corpus directory.
#[derive(Clone, Debug)]
pub struct SplitPaths {
    pub source: PathBuf,
    pub target: PathBuf,
    pub features: PathBuf,
}

impl SplitPaths {
    pub fn new(dir: &Path, split: &str) -> Self {
        SplitPaths {
            source: dir.join(format!("{split}.src.txt")),
            target: dir.join(format!("{split}.tgt.txt")),
            features: dir.join(format!("{split}.feat.vagf")),
        }
    }

    pub fn load(&self, with_features: bool) -> Result<ParallelCorpus> {
        load_corpus(
            &self.source,
            &self.target,
            with_features.then_some(self.features.as_path()),
        )
    }
}

/// UTF-8 lines without terminators; invalid UTF-8 is an encoding error.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f =
        std::fs::File::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(f).split(b'\n').enumerate() {
        let mut line = line?;
        if line.last() == Some(&b'\r') {
            line.pop();
        }
        out.push(String::from_utf8(line).map_err(|_| {
            Error::Encoding(format!(
                "{} line {} is not valid UTF-8",
                path.display(),
                n + 1
            ))
        })?);
    }
    Ok(out)
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for l in lines {
        f.write_all(l.as_ref().as_bytes())?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Loads and validates an aligned corpus.
pub fn load_corpus(
    source: &Path,
    target: &Path,
    features: Option<&Path>,
) -> Result<ParallelCorpus> {
    let src = read_lines(source)?;
    let tgt = read_lines(target)?;
    let feats = features.map(Features::load).transpose()?;
    ParallelCorpus::new(src, tgt, feats)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Copy,
    Reverse,
    /// Sentences with one ambiguous word whose translation depends on the image.
    Ambiguous,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "ambiguous" => Ok(Task::Ambiguous),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (copy|reverse|ambiguous)"
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::Ambiguous => "ambiguous",
        })
    }
}

/// Source token of the ambiguous word.
pub const AMBIGUOUS_WORD: &str = "amb";

/// Target token for sense `k` of the ambiguous word.
pub fn sense_token(k: usize) -> String {
    format!("sense{k}")
}

pub fn is_sense_token(tok: &str) -> bool {
    tok.strip_prefix("sense")
        .is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub task: Task,
    /// Training pairs.
    pub n: usize,
    pub valid_n: usize,
    pub test_n: usize,
    /// Number of distinct ordinary words.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Image clusters; the ambiguous task always uses one cluster per sense.
    pub clusters: usize,
    pub feature_dim: usize,
    /// Standard deviation of the per-image noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            task: Task::Copy,
            n: 50,
            valid_n: 0,
            test_n: 0,
            vocab_size: 30,
            min_len: 3,
            max_len: 8,
            clusters: 4,
            feature_dim: DEFAULT_FEATURE_DIM,
            noise: 0.1,
            seed: 1,
        }
    }
}

/// Train/valid/test splits of a synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub train: ParallelCorpus,
    pub valid: ParallelCorpus,
    pub test: ParallelCorpus,
    /// Image cluster of every pair, per split in the order above.
    pub clusters: [Vec<usize>; 3],
}

impl SyntheticCorpus {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (split, c) in [
            ("train", &self.train),
            ("valid", &self.valid),
            ("test", &self.test),
        ] {
            c.save(dir, split)?;
        }
        Ok(())
    }
}

/// Deterministic synthetic data. Image features are a cluster centroid,
/// plus the scaled sum of per-word visual vectors, plus Gaussian noise.
///
/// In the ambiguous task every source sentence holds one `amb` token,
/// translated as `sense{k}` where `k` is the image cluster. Each distinct
/// source sentence occurs once with each of the two senses, so the text
/// alone never determines the sense.
pub fn synthesize_corpus(spec: &SynthSpec) -> Result<SyntheticCorpus> {
    if spec.n < 4 {
        return Err(Error::Config(format!(
            "synthetic corpora need at least 4 pairs, got {}",
            spec.n
        )));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(format!(
            "invalid length range {}..={}",
            spec.min_len, spec.max_len
        )));
    }
    if spec.vocab_size == 0 || spec.feature_dim == 0 || spec.clusters == 0 {
        return Err(Error::Config(
            "vocab_size, feature_dim and clusters must be positive".into(),
        ));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Config(format!(
            "noise must be a finite non-negative value, got {}",
            spec.noise
        )));
    }
    let ambiguous = spec.task == Task::Ambiguous;
    if ambiguous && spec.max_len < 2 {
        return Err(Error::Config("the ambiguous task needs max_len ≥ 2".into()));
    }
    let clusters = if ambiguous { 2 } else { spec.clusters };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let words: Vec<String> = (0..spec.vocab_size).map(|i| format!("w{i}")).collect();
    let gaussian = |rng: &mut ChaCha8Rng, d: usize| -> Vec<f64> {
        (0..d).map(|_| StandardNormal.sample(rng)).collect()
    };
    let centroids: Vec<Vec<f64>> = (0..clusters)
        .map(|_| gaussian(&mut rng, spec.feature_dim))
        .collect();
    let mut visual: Vec<Vec<f64>> = (0..spec.vocab_size)
        .map(|_| gaussian(&mut rng, spec.feature_dim))
        .collect();
    visual.push(vec![0.0; spec.feature_dim]);
    let amb_index = spec.vocab_size;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;

    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut splits = Vec::with_capacity(3);
    let mut split_clusters: [Vec<usize>; 3] = Default::default();
    for (s, &size) in [spec.n, spec.valid_n, spec.test_n].iter().enumerate() {
        let mut pairs: Vec<(Vec<usize>, usize)> = Vec::with_capacity(size);
        let distinct = if ambiguous { size.div_ceil(2) } else { size };
        for _ in 0..distinct {
            let sent = fresh_sentence(&mut rng, spec, ambiguous, amb_index, &mut seen)?;
            if ambiguous {
                pairs.push((sent.clone(), 0));
                if pairs.len() < size {
                    pairs.push((sent, 1));
                }
            } else {
                let k = rng.gen_range(0..clusters);
                pairs.push((sent, k));
            }
        }
        pairs.shuffle(&mut rng);

        let mut src = Vec::with_capacity(size);
        let mut tgt = Vec::with_capacity(size);
        let mut rows = Vec::with_capacity(size * spec.feature_dim);
        for (sent, k) in &pairs {
            let tok = |i: usize| {
                if i == amb_index {
                    AMBIGUOUS_WORD.to_string()
                } else {
                    words[i].clone()
                }
            };
            let src_tokens: Vec<String> = sent.iter().map(|&i| tok(i)).collect();
            let mut tgt_tokens: Vec<String> = match spec.task {
                Task::Copy | Task::Ambiguous => src_tokens.clone(),
                Task::Reverse => src_tokens.iter().rev().cloned().collect(),
            };
            for t in &mut tgt_tokens {
                if t == AMBIGUOUS_WORD {
                    *t = sense_token(*k);
                }
            }
            src.push(src_tokens.join(" "));
            tgt.push(tgt_tokens.join(" "));

            let scale = 1.0 / (sent.len() as f64).sqrt();
            let mut feat = centroids[*k].clone();
            for &w in sent {
                for (f, v) in feat.iter_mut().zip(&visual[w]) {
                    *f += scale * v;
                }
            }
            rows.extend(feat.iter().map(|f| (f + noise.sample(&mut rng)) as f32));
        }
        split_clusters[s] = pairs.iter().map(|p| p.1).collect();
        splits.push(ParallelCorpus::new(
            src,
            tgt,
            Some(Features::new(spec.feature_dim, rows)?),
        )?);
    }
    let test = splits.pop().expect("three splits");
    let valid = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(SyntheticCorpus {
        train,
        valid,
        test,
        clusters: split_clusters,
    })
}

fn fresh_sentence(
    rng: &mut ChaCha8Rng,
    spec: &SynthSpec,
    ambiguous: bool,
    amb_index: usize,
    seen: &mut HashSet<Vec<usize>>,
) -> Result<Vec<usize>> {
    for _ in 0..10_000 {
        let len = rng.gen_range(spec.min_len.max(if ambiguous { 2 } else { 1 })..=spec.max_len);
        let mut sent: Vec<usize> = (0..len)
            .map(|_| rng.gen_range(0..spec.vocab_size))
            .collect();
        if ambiguous {
            let pos = rng.gen_range(0..len);
            sent[pos] = amb_index;
        }
        if seen.insert(sent.clone()) {
            return Ok(sent);
        }
    }
    Err(Error::Config(
        "cannot draw enough distinct sentences; increase vocab_size or max_len".into(),
    ))
}

/// Reads a text file for the tokenizer, rejecting invalid UTF-8.
pub fn read_text(path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    String::from_utf8(bytes)
        .map_err(|_| Error::Encoding(format!("{} is not valid UTF-8", path.display())))
}
