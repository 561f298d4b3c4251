//! Corpus BLEU, retrieval recall and slot accuracy.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::forward::shared_embeddings;
use crate::model::grounding::retrieve;
use crate::model::{ForwardSettings, Model};
use crate::tensor::ParamStore;

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts
                .entry(w.iter().map(|s| s.as_ref()).collect())
                .or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 over tokenized sentences with clipped n-gram counts.
/// With `smoothing`, an order with no matches counts as
/// `(0 + 1) / (total + 1)` instead of zeroing the score.
pub fn corpus_bleu<S: AsRef<str>, T: AsRef<str>>(
    hyps: &[Vec<S>],
    refs: &[Vec<T>],
    smoothing: bool,
) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::Alignment {
            what: "hypotheses".into(),
            left: hyps.len(),
            other: "references".into(),
            right: refs.len(),
        });
    }
    if refs.is_empty() {
        return Err(Error::Input("BLEU needs at least one reference".into()));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = if matches[n] == 0 {
            if smoothing {
                1.0 / (totals[n] + 1) as f64
            } else {
                0.0
            }
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) || brevity_penalty == 0.0 {
        0.0
    } else {
        brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64).exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// BLEU on whitespace-tokenized lines.
pub fn corpus_bleu_lines<S: AsRef<str>, T: AsRef<str>>(
    hyps: &[S],
    refs: &[T],
    smoothing: bool,
) -> Result<BleuReport> {
    let split = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let h: Vec<Vec<String>> = hyps.iter().map(|s| split(s.as_ref())).collect();
    let r: Vec<Vec<String>> = refs.iter().map(|s| split(s.as_ref())).collect();
    corpus_bleu(&h, &r, smoothing)
}

/// Fraction of sentences whose hypothesis contains the reference's slot
/// token and no other slot token. Sentences without a slot token are skipped.
pub fn slot_accuracy<S: AsRef<str>, T: AsRef<str>>(
    hyps: &[Vec<S>],
    refs: &[Vec<T>],
    is_slot: impl Fn(&str) -> bool,
) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Alignment {
            what: "hypotheses".into(),
            left: hyps.len(),
            other: "references".into(),
            right: refs.len(),
        });
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let Some(gold) = r.iter().map(|t| t.as_ref()).find(|t| is_slot(t)) else {
            continue;
        };
        total += 1;
        let produced: Vec<&str> = h
            .iter()
            .map(|t| t.as_ref())
            .filter(|t| is_slot(t))
            .collect();
        if !produced.is_empty() && produced.iter().all(|&t| t == gold) {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(Error::Input("no reference contains a slot token".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Recall at each cutoff in both retrieval directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub text_to_image: BTreeMap<usize, f64>,
    pub image_to_text: BTreeMap<usize, f64>,
}

/// Embeds every (source, image) pair into the shared space and ranks.
pub fn report_retrieval(
    store: &ParamStore<f32>,
    model: &Model,
    sources: &[Vec<usize>],
    images: &[&[f32]],
    settings: &ForwardSettings,
    ks: &[usize],
) -> Result<RetrievalReport> {
    if sources.len() != images.len() {
        return Err(Error::Alignment {
            what: "sentences".into(),
            left: sources.len(),
            other: "images".into(),
            right: images.len(),
        });
    }
    let mut texts = Vec::with_capacity(sources.len());
    let mut imgs = Vec::with_capacity(sources.len());
    for (src, img) in sources.iter().zip(images) {
        let (t, v) = shared_embeddings(store, model, src, img, settings)?;
        texts.push(t);
        imgs.push(v);
    }
    let t2i = retrieve(&texts, &imgs, ks)?;
    let i2t = retrieve(&imgs, &texts, ks)?;
    Ok(RetrievalReport {
        text_to_image: t2i.recall.into_iter().collect(),
        image_to_text: i2t.recall.into_iter().collect(),
    })
}

/// Serialized metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub bleu: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p4: f64,
    pub bp: f64,
    pub r_at: BTreeMap<String, f64>,
}

impl Metrics {
    pub fn from_bleu(b: &BleuReport) -> Self {
        Metrics {
            bleu: b.bleu,
            p1: b.precisions[0],
            p2: b.precisions[1],
            p3: b.precisions[2],
            p4: b.precisions[3],
            bp: b.brevity_penalty,
            r_at: BTreeMap::new(),
        }
    }

    pub fn with_recall(mut self, recall: &BTreeMap<usize, f64>) -> Self {
        self.r_at = recall.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        self
    }
}
