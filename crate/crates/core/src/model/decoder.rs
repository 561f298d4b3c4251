//! Conditional-GRU attention decoder and its output layer.

use super::{DropSite, GruParams, Layout, ModelConfig, Phase};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, Real, Var};

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub embedding: ParamId,
    /// Consumes the previous target embedding.
    pub gru1: GruParams,
    /// Consumes the attention context.
    pub gru2: GruParams,
    /// Key transform of encoder states `[A, 2h]` and its bias.
    pub w_keys: ParamId,
    pub b_keys: ParamId,
    /// Query transform of the intermediate state `[A, hidden]`.
    pub w_query: ParamId,
    /// Scoring vector `[1, A]`.
    pub v_score: ParamId,
    pub w_emb_out: ParamId,
    pub w_state_out: ParamId,
    pub w_ctx_out: ParamId,
    pub b_out_hidden: ParamId,
    /// Vocabulary projection `[V, output]`.
    pub w_vocab: ParamId,
    pub b_vocab: ParamId,
    pub vocab: usize,
    pub hidden: usize,
}

impl DecoderParams {
    pub(crate) fn register(layout: &mut Layout, cfg: &ModelConfig, vocab: usize) -> Self {
        let ctx = cfg.context_dim();
        let a = cfg.decoder_attention_dim;
        let o = cfg.output_dim;
        DecoderParams {
            embedding: layout.matrix("decoder.embedding", vocab, cfg.embed_dim),
            gru1: GruParams::register(layout, "decoder.gru1", cfg.embed_dim, cfg.hidden_dim),
            gru2: GruParams::register(layout, "decoder.gru2", ctx, cfg.hidden_dim),
            w_keys: layout.matrix("decoder.attention.w_keys", a, ctx),
            b_keys: layout.bias("decoder.attention.b_keys", a),
            w_query: layout.matrix("decoder.attention.w_query", a, cfg.hidden_dim),
            v_score: layout.matrix("decoder.attention.v_score", 1, a),
            w_emb_out: layout.matrix("decoder.output.w_emb", o, cfg.embed_dim),
            w_state_out: layout.matrix("decoder.output.w_state", o, cfg.hidden_dim),
            w_ctx_out: layout.matrix("decoder.output.w_ctx", o, ctx),
            b_out_hidden: layout.bias("decoder.output.b_hidden", o),
            w_vocab: layout.matrix("decoder.output.w_vocab", vocab, o),
            b_vocab: layout.bias("decoder.output.b_vocab", vocab),
            vocab,
            hidden: cfg.hidden_dim,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embedding];
        ids.extend(self.gru1.ids());
        ids.extend(self.gru2.ids());
        ids.extend([
            self.w_keys,
            self.b_keys,
            self.w_query,
            self.v_score,
            self.w_emb_out,
            self.w_state_out,
            self.w_ctx_out,
            self.b_out_hidden,
            self.w_vocab,
            self.b_vocab,
        ]);
        ids
    }
}

/// Encoder states together with their precomputed attention keys.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    pub states: Var,
    pub keys: Var,
}

pub fn memory<F: Real>(g: &mut Graph<'_, F>, p: &DecoderParams, states: Var) -> Result<Memory> {
    let w = g.param(p.w_keys);
    let b = g.param(p.b_keys);
    let k = g.linear(states, w)?;
    let keys = g.add_row(k, b)?;
    Ok(Memory { states, keys })
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// New decoder state `[k, hidden]`.
    pub state: Var,
    /// Context vectors `[k, 2h]` (after dropout when training).
    pub context: Var,
    /// Attention weights `[k, n]`.
    pub attention: Var,
}

/// One decoder step for `k` parallel hypotheses.
pub fn cgru_step<F: Real>(
    g: &mut Graph<'_, F>,
    p: &DecoderParams,
    s_prev: Var,
    y_prev: &[usize],
    mem: Memory,
    phase: &mut Phase<'_>,
) -> Result<StepOutput> {
    let emb = embed(g, p, y_prev)?;
    let xp = p.gru1.project_input(g, emb)?;
    transition(g, p, s_prev, xp, mem, phase)
}

pub(crate) fn embed<F: Real>(
    g: &mut Graph<'_, F>,
    p: &DecoderParams,
    tokens: &[usize],
) -> Result<Var> {
    if let Some(&bad) = tokens.iter().find(|&&i| i >= p.vocab) {
        return Err(Error::Input(format!(
            "target index {bad} outside vocabulary of {}",
            p.vocab
        )));
    }
    let table = g.param(p.embedding);
    g.gather_rows(table, tokens)
}

/// GRU1 on a projected input, attention, then GRU2 on the context.
fn transition<F: Real>(
    g: &mut Graph<'_, F>,
    p: &DecoderParams,
    s_prev: Var,
    xp: Var,
    mem: Memory,
    phase: &mut Phase<'_>,
) -> Result<StepOutput> {
    if g.shape(s_prev).len() != 2 || g.shape(s_prev)[1] != p.hidden {
        return Err(Error::dim("cgru_step", g.shape(s_prev), &[p.hidden]));
    }
    let s1 = super::gru_step(g, &p.gru1, xp, s_prev)?;
    let w_q = g.param(p.w_query);
    let v = g.param(p.v_score);
    let q = g.linear(s1, w_q)?;
    let energies = g.additive_scores(mem.keys, q, v)?;
    let attention = g.softmax(energies)?;
    let context = g.matmul(attention, mem.states)?;
    let context = phase.drop(g, context, DropSite::Context)?;
    let state = super::gru_cell(g, &p.gru2, s1, context)?;
    Ok(StepOutput {
        state,
        context,
        attention,
    })
}

/// Unnormalized scores `W_vocab o + b` with `o = tanh(W_e e + W_s s + W_c c + b_o)`.
pub fn output_logits<F: Real>(
    g: &mut Graph<'_, F>,
    p: &DecoderParams,
    e_prev: Var,
    state: Var,
    context: Var,
    phase: &mut Phase<'_>,
) -> Result<Var> {
    let (we, ws, wc, bo) = (
        g.param(p.w_emb_out),
        g.param(p.w_state_out),
        g.param(p.w_ctx_out),
        g.param(p.b_out_hidden),
    );
    let a = g.linear(e_prev, we)?;
    let b = g.linear(state, ws)?;
    let c = g.linear(context, wc)?;
    let pre = g.add_n(&[a, b, c])?;
    let pre = g.add_row(pre, bo)?;
    let o = g.tanh(pre);
    let o = phase.drop(g, o, DropSite::Output)?;
    let (wv, bv) = (g.param(p.w_vocab), g.param(p.b_vocab));
    let logits = g.linear(o, wv)?;
    g.add_row(logits, bv)
}

/// Log-probabilities over the target vocabulary, `[k, V]`.
pub fn output_distribution<F: Real>(
    g: &mut Graph<'_, F>,
    p: &DecoderParams,
    e_prev: Var,
    state: Var,
    context: Var,
    phase: &mut Phase<'_>,
) -> Result<Var> {
    let logits = output_logits(g, p, e_prev, state, context, phase)?;
    g.log_softmax(logits)
}

/// Teacher-forced negative log-likelihood of a `BOS … EOS` framed target,
/// summed over every predicted position.
pub fn sequence_loss<F: Real>(
    g: &mut Graph<'_, F>,
    p: &DecoderParams,
    s0: Var,
    mem: Memory,
    target: &[usize],
    phase: &mut Phase<'_>,
) -> Result<Var> {
    if target.len() < 2 {
        return Err(Error::Input(
            "target must contain a start symbol and at least one prediction".into(),
        ));
    }
    let steps = target.len() - 1;
    let inputs = embed(g, p, &target[..steps])?;
    let projected = p.gru1.project_input(g, inputs)?;
    let mut state = s0;
    let mut states = Vec::with_capacity(steps);
    let mut contexts = Vec::with_capacity(steps);
    for j in 0..steps {
        let xp = g.gather_rows(projected, &[j])?;
        let out = transition(g, p, state, xp, mem, phase)?;
        state = out.state;
        states.push(out.state);
        contexts.push(out.context);
    }
    let states = g.concat_rows(&states)?;
    let contexts = g.concat_rows(&contexts)?;
    let logits = output_logits(g, p, inputs, states, contexts, phase)?;
    g.cross_entropy(logits, &target[1..])
}
