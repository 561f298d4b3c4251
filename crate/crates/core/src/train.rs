//! Joint optimization of translation and shared-space objectives.

use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::eval::corpus_bleu;
use crate::model::decoder::{memory, sequence_loss};
use crate::model::grounding::ranking_loss;
use crate::model::{
    prepare, translate, Ablation, DropoutRates, ForwardSettings, Model, ModelConfig, Phase,
};
use crate::tensor::{Gradients, Graph, ParamStore, Real, Var};
use crate::text::{tokenize, TextProcessor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Weight of the translation loss; the ranking loss gets `1 − alpha`.
    pub alpha: f64,
    pub lambda: f64,
    /// Ranking-loss margin.
    pub margin: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub dropout: DropoutRates,
    /// Validations without improvement before stopping.
    pub patience: usize,
    pub beam_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub max_epochs: usize,
    pub bpe_merges: usize,
    /// Smoothed validation BLEU.
    pub smoothing: bool,
    /// Stop as soon as validation BLEU reaches this value.
    pub target_bleu: Option<f64>,
    /// Directory holding `{split}.src.txt`, `{split}.tgt.txt`, `{split}.feat.vagf`.
    pub corpus_dir: Option<PathBuf>,
    pub train_split: String,
    pub valid_split: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            alpha: 0.99,
            lambda: 0.5,
            margin: 0.1,
            learning_rate: 4e-4,
            batch_size: 32,
            clip_norm: 1.0,
            dropout: DropoutRates {
                embedding: 0.3,
                context: 0.5,
                output: 0.5,
            },
            patience: 10,
            beam_size: 12,
            seed: 1,
            ablation: Ablation::default(),
            max_epochs: 100,
            bpe_merges: 10_000,
            smoothing: true,
            target_bleu: None,
            corpus_dir: None,
            train_split: "train".into(),
            valid_split: "valid".into(),
        }
    }
}

impl TrainConfig {
    /// Settings tuned for the French pair.
    pub fn french() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            dropout: DropoutRates {
                embedding: 0.2,
                context: 0.4,
                output: 0.4,
            },
            ..Self::default()
        }
    }

    /// Smaller batches for long-sentence data.
    pub fn long_sentences() -> Self {
        TrainConfig {
            batch_size: 12,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" | "german" => Ok(Self::default()),
            "french" => Ok(Self::french()),
            "ikea" => Ok(Self::long_sentences()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (default|french|ikea)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.margin > 0.0) {
            return bad(format!("margin must be positive, got {}", self.margin));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            ));
        }
        if self.patience == 0 || self.batch_size == 0 || self.beam_size == 0 || self.max_epochs == 0
        {
            return bad("patience, batch_size, beam_size and max_epochs must be at least 1".into());
        }
        for p in [
            self.dropout.embedding,
            self.dropout.context,
            self.dropout.output,
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("dropout probability {p} outside [0, 1)"));
            }
        }
        if self.ranking_active() && self.batch_size < 2 {
            return bad(
                "the ranking loss needs batch_size ≥ 2 (or alpha = 1, or text_only)".into(),
            );
        }
        Ok(())
    }

    pub fn forward_settings(&self) -> ForwardSettings {
        ForwardSettings {
            lambda: self.lambda,
            ablation: self.ablation,
        }
    }

    /// Whether the ranking loss contributes.
    pub fn ranking_active(&self) -> bool {
        !self.ablation.text_only && self.alpha < 1.0
    }
}

/// One numericalized training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub src: Vec<usize>,
    /// `BOS … EOS` framed target.
    pub tgt: Vec<usize>,
    pub image: Option<Vec<f32>>,
}

/// Numericalizes a corpus; images are attached only when `with_images`.
pub fn make_examples(
    text: &TextProcessor,
    corpus: &ParallelCorpus,
    with_images: bool,
) -> Result<Vec<Example>> {
    if with_images && corpus.features.is_none() {
        return Err(Error::Input(
            "image features are required unless text_only is set".into(),
        ));
    }
    let mut out = Vec::with_capacity(corpus.len());
    for i in 0..corpus.len() {
        let src = text.encode_source(&corpus.source[i]);
        if src.is_empty() {
            return Err(Error::Input(format!(
                "source sentence {} is empty after tokenization",
                i + 1
            )));
        }
        out.push(Example {
            src,
            tgt: text.encode_target(&corpus.target[i]),
            image: if with_images {
                corpus.feature(i).map(<[f32]>::to_vec)
            } else {
                None
            },
        });
    }
    Ok(out)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<F: Real = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update; parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>) {
        if self.m.is_empty() {
            self.m = store
                .iter()
                .map(|(_, _, t)| vec![F::zero(); t.numel()])
                .collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let c1 = F::lit(1.0 - self.beta1.powi(t));
        let c2 = F::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (F::lit(self.lr), F::lit(self.eps));
        let one = F::one();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let w = store.get_mut(id).data_mut();
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Loss nodes of one mini-batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    /// Mean per-sentence translation loss.
    pub translation: Var,
    pub ranking: Option<Var>,
}

/// Builds `J = α·mean(J_T) + (1 − α)·J_V` for a batch on one graph.
pub fn batch_loss<F: Real>(
    g: &mut Graph<'_, F>,
    model: &Model,
    batch: &[&Example],
    cfg: &TrainConfig,
    phase: &mut Phase<'_>,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let settings = cfg.forward_settings();
    let ranking = cfg.ranking_active();
    if ranking && batch.len() < 2 {
        return Err(Error::Input(
            "the ranking loss needs at least two pairs per batch".into(),
        ));
    }
    let mut jts = Vec::with_capacity(batch.len());
    let mut texts = Vec::new();
    let mut images = Vec::new();
    for ex in batch {
        let image: Option<Vec<F>> = if settings.uses_image() {
            let img = ex
                .image
                .as_ref()
                .ok_or_else(|| Error::Input("training pair is missing its image feature".into()))?;
            Some(img.iter().map(|&x| F::lit(x as f64)).collect())
        } else {
            None
        };
        let p = prepare(
            g,
            model,
            &ex.src,
            image.as_deref(),
            &settings,
            ranking,
            phase,
        )?;
        let mem = memory(g, &model.decoder, p.encoded.states)?;
        jts.push(sequence_loss(g, &model.decoder, p.s0, mem, &ex.tgt, phase)?);
        if let Some((t, v)) = p.shared {
            texts.push(t);
            images.push(v);
        }
    }
    let sum = g.add_n(&jts)?;
    let translation = g.scale(sum, F::lit(1.0 / batch.len() as f64));
    let (total, ranking) = if ranking {
        let jv = ranking_loss(g, &texts, &images, cfg.margin)?;
        let a = g.scale(translation, F::lit(cfg.alpha));
        let b = g.scale(jv, F::lit(1.0 - cfg.alpha));
        (g.add(a, b)?, Some(jv))
    } else {
        (translation, None)
    };
    Ok(BatchLoss {
        total,
        translation,
        ranking,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub translation: f64,
    pub ranking: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm of the applied update direction.
    pub clipped_norm: f64,
}

/// Loss and clipped gradients of one batch, without updating parameters.
pub fn batch_gradients<F: Real>(
    store: &ParamStore<F>,
    model: &Model,
    batch: &[&Example],
    cfg: &TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<(StepStats, Gradients<F>)> {
    let mut g = Graph::new(store);
    let mut phase = Phase::Train {
        rng,
        dropout: cfg.dropout,
    };
    let loss = batch_loss(&mut g, model, batch, cfg, &mut phase)?;
    let read = |g: &Graph<'_, F>, v: Var| g.value(v).item().to_f64_lossy();
    let stats_loss = read(&g, loss.total);
    let jt = read(&g, loss.translation);
    let jv = loss.ranking.map_or(0.0, |v| read(&g, v));
    if !stats_loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss J = {stats_loss} (J_T = {jt}, J_V = {jv}) on a batch of {} pairs with source lengths {:?}",
            batch.len(),
            batch.iter().map(|e| e.src.len()).collect::<Vec<_>>()
        )));
    }
    g.backward(loss.total)?;
    let mut grads = g.into_gradients();
    if !grads.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite gradient at loss J = {stats_loss}"
        )));
    }
    let norm = grads.global_norm().to_f64_lossy();
    if norm > cfg.clip_norm {
        grads.scale(F::lit(cfg.clip_norm / norm));
    }
    let clipped = grads.global_norm().to_f64_lossy();
    Ok((
        StepStats {
            loss: stats_loss,
            translation: jt,
            ranking: jv,
            grad_norm: norm,
            clipped_norm: clipped,
        },
        grads,
    ))
}

/// Forward, backward, clip and Adam update on one batch.
pub fn joint_step<F: Real>(
    store: &mut ParamStore<F>,
    model: &Model,
    adam: &mut Adam<F>,
    batch: &[&Example],
    cfg: &TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<StepStats> {
    let (stats, grads) = batch_gradients(store, model, batch, cfg, rng)?;
    adam.step(store, &grads);
    Ok(stats)
}

/// Source-length buckets in random order; ties within a length are shuffled.
/// A trailing singleton is merged into its neighbour when the ranking loss
/// needs pairs.
pub fn make_batches(
    examples: &[Example],
    batch_size: usize,
    need_pairs: bool,
    rng: &mut impl Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<(usize, u64, usize)> = examples
        .iter()
        .enumerate()
        .map(|(i, e)| (e.src.len(), rng.gen::<u64>(), i))
        .collect();
    order.sort_unstable();
    let idx: Vec<usize> = order.into_iter().map(|(_, _, i)| i).collect();
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if need_pairs && batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let last = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(last);
    }
    batches.shuffle(rng);
    batches
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "J")]
    pub loss: f64,
    #[serde(rename = "J_T")]
    pub translation: f64,
    #[serde(rename = "J_V")]
    pub ranking: f64,
    pub val_bleu: f64,
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if history.is_empty() {
        w.write_record(["epoch", "J", "J_T", "J_V", "val_bleu"])?;
    }
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Beam-decodes every source and scores against the raw references.
pub fn validation_bleu(
    store: &ParamStore<f32>,
    model: &Model,
    text: &TextProcessor,
    examples: &[Example],
    references: &[String],
    settings: &ForwardSettings,
    beam: usize,
    smoothing: bool,
) -> Result<f64> {
    let hyps = translate_all(store, model, text, examples, settings, beam)?;
    let h: Vec<Vec<String>> = hyps
        .iter()
        .map(|s| s.split_whitespace().map(String::from).collect())
        .collect();
    let r: Vec<Vec<String>> = references.iter().map(|s| tokenize(s)).collect();
    Ok(corpus_bleu(&h, &r, smoothing)?.bleu)
}

/// Detokenized translations of every example.
pub fn translate_all(
    store: &ParamStore<f32>,
    model: &Model,
    text: &TextProcessor,
    examples: &[Example],
    settings: &ForwardSettings,
    beam: usize,
) -> Result<Vec<String>> {
    examples
        .iter()
        .map(|ex| {
            let out = translate(store, model, &ex.src, ex.image.as_deref(), settings, beam)?;
            Ok(text.decode_target(&out))
        })
        .collect()
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    /// Parameters after the final epoch.
    pub last: ParamStore<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Full training run: learns the text pipeline on the training corpus,
/// then alternates epochs and validation with early stopping.
pub fn train(
    train_corpus: &ParallelCorpus,
    valid_corpus: &ParallelCorpus,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_corpus.is_empty() || valid_corpus.is_empty() {
        return Err(Error::Input(
            "training and validation corpora must be nonempty".into(),
        ));
    }
    let uses_image = !cfg.ablation.text_only;
    for (name, c) in [("training", train_corpus), ("validation", valid_corpus)] {
        if uses_image && c.features.is_none() {
            return Err(Error::Input(format!("{name} corpus has no image features")));
        }
        if let (true, Some(f)) = (uses_image, &c.features) {
            if f.dim() != cfg.model.feature_dim {
                return Err(Error::Input(format!(
                    "{name} features have dimension {}, model expects {}",
                    f.dim(),
                    cfg.model.feature_dim
                )));
            }
        }
    }
    let text = TextProcessor::learn(&train_corpus.source, &train_corpus.target, cfg.bpe_merges)?;
    let train_ex = make_examples(&text, train_corpus, uses_image)?;
    let valid_ex = make_examples(&text, valid_corpus, uses_image)?;
    let model = Model::new(
        cfg.model.clone(),
        text.src_vocab.len(),
        text.tgt_vocab.len(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store: ParamStore<f32> = model.init_params(&mut rng);
    let mut adam = Adam::new(cfg.learning_rate);
    info!(
        "model: {} parameters, vocab {}/{}; {} training and {} validation pairs",
        store.num_scalars(),
        text.src_vocab.len(),
        text.tgt_vocab.len(),
        train_ex.len(),
        valid_ex.len()
    );
    let settings = cfg.forward_settings();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut stale = 0;
    let mut step = 0u64;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let batches = make_batches(&train_ex, cfg.batch_size, cfg.ranking_active(), &mut rng);
        let (mut j, mut jt, mut jv) = (0.0, 0.0, 0.0);
        for b in &batches {
            let batch: Vec<&Example> = b.iter().map(|&i| &train_ex[i]).collect();
            let s = joint_step(&mut store, &model, &mut adam, &batch, cfg, &mut rng)?;
            step += 1;
            j += s.loss;
            jt += s.translation;
            jv += s.ranking;
        }
        let nb = batches.len() as f64;
        let bleu = validation_bleu(
            &store,
            &model,
            &text,
            &valid_ex,
            &valid_corpus.target,
            &settings,
            cfg.beam_size,
            cfg.smoothing,
        )?;
        let rec = EpochRecord {
            epoch,
            loss: j / nb,
            translation: jt / nb,
            ranking: jv / nb,
            val_bleu: bleu,
        };
        info!(
            "epoch {epoch}: J {:.4} J_T {:.4} J_V {:.4} val BLEU {:.4}",
            rec.loss, rec.translation, rec.ranking, bleu
        );
        history.push(rec);
        if best.as_ref().map_or(true, |(b, _, _)| bleu > *b) {
            best = Some((bleu, epoch, store.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        if cfg.target_bleu.is_some_and(|t| bleu >= t) {
            info!("validation BLEU reached the target; stopping");
            break;
        }
        if stale >= cfg.patience {
            info!("no improvement for {stale} validations; stopping");
            break;
        }
    }
    let (best_bleu, best_epoch, params) = best.expect("at least one epoch ran");
    let meta = CheckpointMeta {
        train: cfg.clone(),
        src_vocab_size: text.src_vocab.len(),
        tgt_vocab_size: text.tgt_vocab.len(),
        epoch: best_epoch,
        step,
        best_bleu,
        text: text.to_record(),
    };
    Ok(TrainOutcome {
        best: Checkpoint { params, meta },
        last: store,
        history,
        best_epoch,
        epochs_run,
    })
}

/// Loads `{train,valid}` splits named by the config.
pub fn load_splits(cfg: &TrainConfig) -> Result<(ParallelCorpus, ParallelCorpus)> {
    let dir = cfg
        .corpus_dir
        .as_ref()
        .ok_or_else(|| Error::Config("corpus_dir is not set".into()))?;
    let feats = !cfg.ablation.text_only;
    let train = crate::corpus::SplitPaths::new(dir, &cfg.train_split).load(feats)?;
    let valid = crate::corpus::SplitPaths::new(dir, &cfg.valid_split).load(feats)?;
    Ok((train, valid))
}
