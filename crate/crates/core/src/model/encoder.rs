use super::{DropSite, GruParams, Layout, ModelConfig, Phase};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, Real, Tensor, Var};

/// Source embeddings and the two directional GRUs.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub embedding: ParamId,
    pub forward: GruParams,
    pub backward: GruParams,
    pub vocab: usize,
}

impl EncoderParams {
    pub(crate) fn register(layout: &mut Layout, cfg: &ModelConfig, vocab: usize) -> Self {
        EncoderParams {
            embedding: layout.matrix("encoder.embedding", vocab, cfg.embed_dim),
            forward: GruParams::register(layout, "encoder.forward", cfg.embed_dim, cfg.hidden_dim),
            backward: GruParams::register(
                layout,
                "encoder.backward",
                cfg.embed_dim,
                cfg.hidden_dim,
            ),
            vocab,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embedding];
        ids.extend(self.forward.ids());
        ids.extend(self.backward.ids());
        ids
    }
}

/// Per-token annotations of one source sentence.
#[derive(Clone, Copy, Debug)]
pub struct EncodedSource {
    /// `[n, 2h]`, each row `[backward_i, forward_i]`.
    pub states: Var,
    /// Row mean of `states`, shaped `[1, 2h]`.
    pub mean: Var,
    pub forward: Var,
    pub backward: Var,
    pub len: usize,
}

/// Runs both directions from zero initial states and concatenates them.
pub fn encode<F: Real>(
    g: &mut Graph<'_, F>,
    p: &EncoderParams,
    indices: &[usize],
    phase: &mut Phase<'_>,
) -> Result<EncodedSource> {
    let n = indices.len();
    if n == 0 {
        return Err(Error::Input("cannot encode an empty sentence".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= p.vocab) {
        return Err(Error::Input(format!(
            "source index {bad} outside vocabulary of {}",
            p.vocab
        )));
    }
    let table = g.param(p.embedding);
    let emb = g.gather_rows(table, indices)?;
    let emb = phase.drop(g, emb, DropSite::Embedding)?;

    let fwd_in = p.forward.project_input(g, emb)?;
    let bwd_in = p.backward.project_input(g, emb)?;
    let forward = run_direction(g, &p.forward, fwd_in, n, false)?;
    let backward = run_direction(g, &p.backward, bwd_in, n, true)?;
    let states = g.concat_cols(&[backward, forward])?;
    let mean = g.mean_rows(states)?;
    Ok(EncodedSource {
        states,
        mean,
        forward,
        backward,
        len: n,
    })
}

/// States of one direction in source order, `[n, h]`.
fn run_direction<F: Real>(
    g: &mut Graph<'_, F>,
    p: &GruParams,
    projected: Var,
    n: usize,
    reverse: bool,
) -> Result<Var> {
    let mut h = g.constant(Tensor::zeros(&[1, p.hidden]));
    let mut out = vec![h; n];
    let order: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for i in order {
        let xp = g.gather_rows(projected, &[i])?;
        h = super::gru_step(g, p, xp, h)?;
        out[i] = h;
    }
    g.concat_rows(&out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::Model;
    use crate::tensor::ParamStore;

    fn small() -> ModelConfig {
        ModelConfig {
            embed_dim: 5,
            hidden_dim: 4,
            shared_dim: 3,
            attention_dim: 3,
            decoder_attention_dim: 3,
            output_dim: 3,
            feature_dim: 6,
        }
    }

    fn setup() -> (Model, ParamStore<f64>) {
        let model = Model::new(small(), 12, 9).unwrap();
        let store = model.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        (model, store)
    }

    #[test]
    fn single_token_mean_equals_row() {
        let (m, store) = setup();
        let mut g = Graph::inference(&store);
        let enc = encode(&mut g, &m.encoder, &[7], &mut Phase::Infer).unwrap();
        assert_eq!(g.shape(enc.states), &[1, 8]);
        assert_eq!(g.value(enc.mean).data(), g.value(enc.states).data());
    }

    #[test]
    fn mean_state_is_row_average() {
        let (m, store) = setup();
        let mut g = Graph::inference(&store);
        let enc = encode(&mut g, &m.encoder, &[4, 5, 6, 11], &mut Phase::Infer).unwrap();
        let h = g.value(enc.states);
        for c in 0..8 {
            let avg: f64 = (0..4).map(|r| h.row(r)[c]).sum::<f64>() / 4.0;
            assert!((avg - g.value(enc.mean).data()[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn reversal_swaps_directions() {
        let (m, mut store) = setup();
        // Share weights across directions so mirrored runs are comparable.
        for (a, b) in m
            .encoder
            .forward
            .ids()
            .into_iter()
            .zip(m.encoder.backward.ids())
        {
            let t = store.get(a).clone();
            store.set(b, t).unwrap();
        }
        let sent = [4, 9, 5, 10, 6];
        let rev: Vec<usize> = sent.iter().rev().copied().collect();
        let mut g = Graph::inference(&store);
        let a = encode(&mut g, &m.encoder, &sent, &mut Phase::Infer).unwrap();
        let b = encode(&mut g, &m.encoder, &rev, &mut Phase::Infer).unwrap();
        let n = sent.len();
        for i in 0..n {
            let fa = g.value(a.forward).row(i);
            let bb = g.value(b.backward).row(n - 1 - i);
            for (x, y) in fa.iter().zip(bb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_params_give_identical_rows() {
        let (m, store) = setup();
        let zeros: ParamStore<f64> = m.zero_params();
        let _ = store;
        let mut g = Graph::inference(&zeros);
        let enc = encode(&mut g, &m.encoder, &[4, 5, 6], &mut Phase::Infer).unwrap();
        let h = g.value(enc.states);
        assert_eq!(h.row(0), h.row(1));
        assert_eq!(h.row(1), h.row(2));
    }

    #[test]
    fn empty_and_out_of_range_inputs_fail() {
        let (m, store) = setup();
        let mut g = Graph::inference(&store);
        assert!(matches!(
            encode(&mut g, &m.encoder, &[], &mut Phase::Infer),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            encode(&mut g, &m.encoder, &[12], &mut Phase::Infer),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn inference_is_deterministic_and_training_dropout_varies() {
        let (m, store) = setup();
        let run = |phase: &mut Phase<'_>| {
            let mut g = Graph::inference(&store);
            let enc = encode(&mut g, &m.encoder, &[4, 5, 6], phase).unwrap();
            g.value(enc.states).clone()
        };
        assert_eq!(run(&mut Phase::Infer), run(&mut Phase::Infer));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dropout = crate::model::DropoutRates {
            embedding: 0.5,
            ..crate::model::DropoutRates::NONE
        };
        let trained = run(&mut Phase::Train {
            rng: &mut rng,
            dropout,
        });
        assert_ne!(trained, run(&mut Phase::Infer));
    }
}
