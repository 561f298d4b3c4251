//! Source-side forward pass shared by training and decoding, and the
//! decoder adapter used by beam search.

use serde::{Deserialize, Serialize};

use super::beam::{beam_search, greedy, Hypothesis, StepModel};
use super::decoder::{self, cgru_step, memory, output_distribution};
use super::encoder::{encode, EncodedSource};
use super::grounding::{decoder_init, project_shared, visual_attention};
use super::{Model, Phase};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};
use crate::text::{BOS, EOS};

/// Component switches for ablation studies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Drop the image pathway entirely (no grounding, no ranking loss).
    pub text_only: bool,
    /// Project the mean encoder state instead of the attended vector.
    pub no_grounding_attention: bool,
    /// Initialize the decoder from the mean encoder state only.
    pub no_attention_init: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardSettings {
    /// Blend between attended vector and mean state in the decoder init.
    pub lambda: f64,
    pub ablation: Ablation,
}

impl Default for ForwardSettings {
    fn default() -> Self {
        ForwardSettings {
            lambda: 0.5,
            ablation: Ablation::default(),
        }
    }
}

impl ForwardSettings {
    pub fn uses_image(&self) -> bool {
        !self.ablation.text_only
    }

    fn init_lambda(&self) -> f64 {
        if self.ablation.no_attention_init {
            0.0
        } else {
            self.lambda
        }
    }
}

/// Everything the decoder and the ranking loss need from one source sentence.
#[derive(Clone, Copy, Debug)]
pub struct Prepared {
    pub encoded: EncodedSource,
    /// Visual attention weights `[1, n]` when the image is used.
    pub beta: Option<Var>,
    pub attended: Option<Var>,
    /// Shared-space embeddings `(text, image)` when requested.
    pub shared: Option<(Var, Var)>,
    pub s0: Var,
}

/// Encodes the source and computes the grounded decoder init. `image` is
/// ignored (never read) in text-only mode. Shared-space projections are
/// only built when `with_shared` is set.
pub fn prepare<F: Real>(
    g: &mut Graph<'_, F>,
    model: &Model,
    src: &[usize],
    image: Option<&[F]>,
    settings: &ForwardSettings,
    with_shared: bool,
    phase: &mut Phase<'_>,
) -> Result<Prepared> {
    let encoded = encode(g, &model.encoder, src, phase)?;
    if !settings.uses_image() {
        let s0 = decoder_init(g, &model.grounding, None, encoded.mean, 0.0)?;
        return Ok(Prepared {
            encoded,
            beta: None,
            attended: None,
            shared: None,
            s0,
        });
    }
    let image = image.ok_or_else(|| {
        Error::Contract("an image feature is required unless text_only is set".into())
    })?;
    if image.len() != model.config.feature_dim {
        return Err(Error::dim(
            "image feature",
            &[image.len()],
            &[model.config.feature_dim],
        ));
    }
    let v = g.constant(Tensor::vector(image.to_vec()));
    let (beta, t) = visual_attention(g, &model.grounding, encoded.states, v)?;
    let shared = if with_shared {
        let text = if settings.ablation.no_grounding_attention {
            encoded.mean
        } else {
            t
        };
        Some(project_shared(g, &model.grounding, text, v)?)
    } else {
        None
    };
    let s0 = decoder_init(
        g,
        &model.grounding,
        Some(t),
        encoded.mean,
        settings.init_lambda(),
    )?;
    Ok(Prepared {
        encoded,
        beta: Some(beta),
        attended: Some(t),
        shared,
        s0,
    })
}

/// Text embedding in the shared space for retrieval, paired with the image
/// embedding. Text-only models have no shared space.
pub fn shared_embeddings<F: Real>(
    store: &ParamStore<F>,
    model: &Model,
    src: &[usize],
    image: &[F],
    settings: &ForwardSettings,
) -> Result<(Vec<F>, Vec<F>)> {
    if !settings.uses_image() {
        return Err(Error::Config(
            "a text-only model has no shared embedding space".into(),
        ));
    }
    let mut g = Graph::inference(store);
    let p = prepare(
        &mut g,
        model,
        src,
        Some(image),
        settings,
        true,
        &mut Phase::Infer,
    )?;
    let (t, v) = p.shared.expect("requested");
    Ok((g.value(t).data().to_vec(), g.value(v).data().to_vec()))
}

/// Decoder over a fixed, precomputed source memory.
pub struct NmtStepper<'a, F: Real> {
    store: &'a ParamStore<F>,
    decoder: &'a decoder::DecoderParams,
    states: Tensor<F>,
    keys: Tensor<F>,
}

impl<'a, F: Real> NmtStepper<'a, F> {
    /// Returns the stepper and the initial decoder state.
    pub fn new(
        store: &'a ParamStore<F>,
        model: &'a Model,
        src: &[usize],
        image: Option<&[F]>,
        settings: &ForwardSettings,
    ) -> Result<(Self, Vec<F>)> {
        let mut g = Graph::inference(store);
        let p = prepare(
            &mut g,
            model,
            src,
            image,
            settings,
            false,
            &mut Phase::Infer,
        )?;
        let mem = memory(&mut g, &model.decoder, p.encoded.states)?;
        let stepper = NmtStepper {
            store,
            decoder: &model.decoder,
            states: g.value(mem.states).clone(),
            keys: g.value(mem.keys).clone(),
        };
        Ok((stepper, g.value(p.s0).data().to_vec()))
    }
}

impl<F: Real> StepModel for NmtStepper<'_, F> {
    type State = Vec<F>;

    fn step(&mut self, states: &[Vec<F>], prev: &[usize]) -> Result<Vec<(Vec<F>, Vec<f64>)>> {
        let k = states.len();
        let hidden = self.decoder.hidden;
        let mut g = Graph::inference(self.store);
        let s = g.constant(Tensor::new(vec![k, hidden], states.concat())?);
        let mem = decoder::Memory {
            states: g.constant(self.states.clone()),
            keys: g.constant(self.keys.clone()),
        };
        let out = cgru_step(&mut g, self.decoder, s, prev, mem, &mut Phase::Infer)?;
        let e = decoder::embed(&mut g, self.decoder, prev)?;
        let lp = output_distribution(
            &mut g,
            self.decoder,
            e,
            out.state,
            out.context,
            &mut Phase::Infer,
        )?;
        let (sv, lv) = (g.value(out.state), g.value(lp));
        Ok((0..k)
            .map(|r| {
                (
                    sv.row(r).to_vec(),
                    lv.row(r).iter().map(|x| x.to_f64_lossy()).collect(),
                )
            })
            .collect())
    }
}

/// Default decoding length bound for a source of `n` tokens.
pub fn default_max_len(n: usize) -> usize {
    3 * n + 5
}

/// Beam-search translation of one source sentence; returns target indices
/// without BOS/EOS.
pub fn translate<F: Real>(
    store: &ParamStore<F>,
    model: &Model,
    src: &[usize],
    image: Option<&[F]>,
    settings: &ForwardSettings,
    beam_size: usize,
) -> Result<Vec<usize>> {
    let (mut stepper, s0) = NmtStepper::new(store, model, src, image, settings)?;
    let max_len = default_max_len(src.len());
    let hyp: Hypothesis<Vec<F>> = if beam_size == 1 {
        greedy(&mut stepper, s0, BOS, EOS, max_len)?
    } else {
        beam_search(&mut stepper, s0, BOS, EOS, beam_size, max_len)?
    };
    Ok(hyp.output(EOS).to_vec())
}
