//! Network definition: parameter layout, encoder, visual grounding and decoder.

pub mod beam;
pub mod decoder;
pub mod encoder;
pub mod forward;
pub mod grounding;
mod gru;

pub use forward::{prepare, translate, Ablation, ForwardSettings, Prepared};
pub use gru::{gru_cell, gru_step, GruParams};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Layer sizes. Defaults follow the reference configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Shared visual-text embedding size.
    pub shared_dim: usize,
    /// Inner size of the visual-text attention transforms.
    pub attention_dim: usize,
    /// Hidden size of the decoder's feed-forward attention scorer.
    pub decoder_attention_dim: usize,
    /// Size of the pre-softmax output layer `o`.
    pub output_dim: usize,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 256,
            hidden_dim: 512,
            shared_dim: 512,
            attention_dim: 512,
            decoder_attention_dim: 512,
            output_dim: 256,
            feature_dim: 2048,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.embed_dim,
            self.hidden_dim,
            self.shared_dim,
            self.attention_dim,
            self.decoder_attention_dim,
            self.output_dim,
            self.feature_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!(
                "all model dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Width of a bidirectional encoder state.
    pub fn context_dim(&self) -> usize {
        2 * self.hidden_dim
    }
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Zeros,
    /// Glorot-uniform over `blocks` row blocks of equal height.
    Glorot {
        blocks: usize,
    },
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Collects parameter specs and hands out ids in registration order.
#[derive(Default)]
pub(crate) struct Layout {
    specs: Vec<ParamSpec>,
}

impl Layout {
    pub(crate) fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub(crate) fn matrix(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, &[rows, cols], Init::Glorot { blocks: 1 })
    }

    pub(crate) fn bias(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.add(name, &[len], Init::Zeros)
    }
}

/// Samples one parameter tensor. Weight blocks are `U(-a, a)` with
/// `a = sqrt(6 / (fan_in + fan_out))`; biases are zero.
pub fn init_tensor<F: Real>(spec: &ParamSpec, rng: &mut dyn RngCore) -> Tensor<F> {
    match spec.init {
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Glorot { blocks } => {
            let (rows, cols) = (spec.shape[0], spec.shape[1]);
            let fan_out = rows / blocks;
            let bound = (6.0 / (fan_out + cols) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| F::lit(rng.gen_range(-bound..bound)))
                .collect();
            Tensor::new(spec.shape.clone(), data).expect("spec shape is consistent")
        }
    }
}

/// Parameter ids of the whole network.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub encoder: encoder::EncoderParams,
    pub grounding: grounding::GroundingParams,
    pub decoder: decoder::DecoderParams,
    specs: Vec<ParamSpec>,
}

impl Model {
    pub fn new(config: ModelConfig, src_vocab: usize, tgt_vocab: usize) -> Result<Self> {
        config.validate()?;
        if src_vocab < 5 || tgt_vocab < 5 {
            return Err(Error::Config(
                "vocabularies need at least one non-reserved symbol".into(),
            ));
        }
        let mut layout = Layout::default();
        let encoder = encoder::EncoderParams::register(&mut layout, &config, src_vocab);
        let grounding = grounding::GroundingParams::register(&mut layout, &config);
        let decoder = decoder::DecoderParams::register(&mut layout, &config, tgt_vocab);
        Ok(Model {
            config,
            src_vocab,
            tgt_vocab,
            encoder,
            grounding,
            decoder,
            specs: layout.specs,
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Draws every parameter from `rng` in registration order.
    pub fn init_params<F: Real>(&self, rng: &mut dyn RngCore) -> ParamStore<F> {
        let mut store = ParamStore::new();
        for spec in &self.specs {
            store
                .add(spec.name.clone(), init_tensor(spec, rng))
                .expect("layout names are unique");
        }
        store
    }

    /// All-zero parameters (useful for constructions in tests).
    pub fn zero_params<F: Real>(&self) -> ParamStore<F> {
        let mut store = ParamStore::new();
        for spec in &self.specs {
            store
                .add(spec.name.clone(), Tensor::zeros(&spec.shape))
                .expect("unique");
        }
        store
    }

    /// Checks that a loaded store matches this layout exactly.
    pub fn check_params<F: Real>(&self, store: &ParamStore<F>) -> Result<()> {
        if store.len() != self.specs.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                self.specs.len(),
                store.len()
            )));
        }
        for ((_, name, t), spec) in store.iter().zip(&self.specs) {
            if name != spec.name || t.shape() != spec.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    /// Ids of parameters that only the translation decoder uses.
    pub fn decoder_param_ids(&self) -> Vec<ParamId> {
        self.decoder.ids()
    }

    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.encoder.ids()
    }

    pub fn grounding_param_ids(&self) -> Vec<ParamId> {
        self.grounding.ids()
    }
}

/// Dropout probabilities at the encoder embeddings, the decoder context
/// vectors and the decoder output layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutRates {
    pub embedding: f64,
    pub context: f64,
    pub output: f64,
}

impl DropoutRates {
    pub const NONE: DropoutRates = DropoutRates {
        embedding: 0.0,
        context: 0.0,
        output: 0.0,
    };
}

/// Training (dropout active, seeded) or inference.
pub enum Phase<'r> {
    Train {
        rng: &'r mut dyn RngCore,
        dropout: DropoutRates,
    },
    Infer,
}

#[derive(Clone, Copy)]
pub(crate) enum DropSite {
    Embedding,
    Context,
    Output,
}

impl Phase<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Phase::Train { .. })
    }

    pub(crate) fn drop<F: Real>(
        &mut self,
        g: &mut Graph<'_, F>,
        x: Var,
        site: DropSite,
    ) -> Result<Var> {
        match self {
            Phase::Infer => Ok(x),
            Phase::Train { rng, dropout } => {
                let p = match site {
                    DropSite::Embedding => dropout.embedding,
                    DropSite::Context => dropout.context,
                    DropSite::Output => dropout.output,
                };
                g.dropout(x, p, true, &mut **rng)
            }
        }
    }
}
