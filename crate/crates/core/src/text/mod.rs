//! Tokenization, subword segmentation and vocabularies.

pub mod bpe;
mod tokenize;
pub mod vocab;

pub use bpe::{desegment, postprocess, BpeModel};
pub use tokenize::{tokenize, tokenize_bytes};
pub use vocab::{Vocabulary, BOS, EOS, PAD, UNK};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// BPE model and vocabulary for both sides of a language pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TextProcessor {
    pub src_bpe: BpeModel,
    pub tgt_bpe: BpeModel,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

/// Serializable form stored inside checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TextProcessorRecord {
    pub src_merges: Vec<(String, String)>,
    pub tgt_merges: Vec<(String, String)>,
    pub src_vocab: Vec<String>,
    pub tgt_vocab: Vec<String>,
}

impl TextProcessor {
    /// Learns BPE independently per language, then the vocabularies.
    pub fn learn<S: AsRef<str>>(src: &[S], tgt: &[S], num_merges: usize) -> Result<Self> {
        let src_tok: Vec<Vec<String>> = src.iter().map(|s| tokenize(s.as_ref())).collect();
        let tgt_tok: Vec<Vec<String>> = tgt.iter().map(|s| tokenize(s.as_ref())).collect();
        let src_bpe = BpeModel::learn(&src_tok, num_merges)?;
        let tgt_bpe = BpeModel::learn(&tgt_tok, num_merges)?;
        let src_seg: Vec<Vec<String>> = src_tok.iter().map(|t| src_bpe.apply(t)).collect();
        let tgt_seg: Vec<Vec<String>> = tgt_tok.iter().map(|t| tgt_bpe.apply(t)).collect();
        Ok(TextProcessor {
            src_vocab: Vocabulary::build(&src_seg),
            tgt_vocab: Vocabulary::build(&tgt_seg),
            src_bpe,
            tgt_bpe,
        })
    }

    /// Source sentence to indices (no framing).
    pub fn encode_source(&self, sentence: &str) -> Vec<usize> {
        self.src_vocab
            .numericalize(&self.src_bpe.apply(&tokenize(sentence)), false)
    }

    /// Target sentence to `BOS … EOS` framed indices.
    pub fn encode_target(&self, sentence: &str) -> Vec<usize> {
        self.tgt_vocab
            .numericalize(&self.tgt_bpe.apply(&tokenize(sentence)), true)
    }

    /// Target indices to a detokenized (BPE-merged, space-joined) sentence.
    pub fn decode_target(&self, indices: &[usize]) -> String {
        postprocess(&self.tgt_vocab.denumericalize(indices))
    }

    pub fn to_record(&self) -> TextProcessorRecord {
        TextProcessorRecord {
            src_merges: self.src_bpe.merges().to_vec(),
            tgt_merges: self.tgt_bpe.merges().to_vec(),
            src_vocab: self.src_vocab.entries().to_vec(),
            tgt_vocab: self.tgt_vocab.entries().to_vec(),
        }
    }

    pub fn from_record(r: &TextProcessorRecord) -> Result<Self> {
        Ok(TextProcessor {
            src_bpe: BpeModel::from_merges(r.src_merges.clone()),
            tgt_bpe: BpeModel::from_merges(r.tgt_merges.clone()),
            src_vocab: Vocabulary::from_tokens(r.src_vocab.iter().cloned())?,
            tgt_vocab: Vocabulary::from_tokens(r.tgt_vocab.iter().cloned())?,
        })
    }
}
