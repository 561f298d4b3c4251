//! Visual-text attention, the shared embedding space and the ranking loss.

use super::{Layout, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, Real, Var};

#[derive(Clone, Debug)]
pub struct GroundingParams {
    /// Image transform for attention `[a, feature]`.
    pub w_v: ParamId,
    /// Encoder-state transform for attention `[a, 2h]`.
    pub w_h: ParamId,
    pub w_text: ParamId,
    pub b_text: ParamId,
    pub w_image: ParamId,
    pub b_image: ParamId,
    /// Decoder-init transform `[hidden, 2h]`.
    pub w_init: ParamId,
}

impl GroundingParams {
    pub(crate) fn register(layout: &mut Layout, cfg: &ModelConfig) -> Self {
        let ctx = cfg.context_dim();
        GroundingParams {
            w_v: layout.matrix("grounding.w_v", cfg.attention_dim, cfg.feature_dim),
            w_h: layout.matrix("grounding.w_h", cfg.attention_dim, ctx),
            w_text: layout.matrix("grounding.w_text", cfg.shared_dim, ctx),
            b_text: layout.bias("grounding.b_text", cfg.shared_dim),
            w_image: layout.matrix("grounding.w_image", cfg.shared_dim, cfg.feature_dim),
            b_image: layout.bias("grounding.b_image", cfg.shared_dim),
            w_init: layout.matrix("grounding.w_init", cfg.hidden_dim, ctx),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.w_v,
            self.w_h,
            self.w_text,
            self.b_text,
            self.w_image,
            self.b_image,
            self.w_init,
        ]
    }
}

/// Attention of the image over source states: `z_i = tanh(W_v v)·tanh(W_h h_i)`,
/// `beta = softmax(z)`, `t = Σ beta_i h_i`. Returns `(beta [1, n], t [1, 2h])`.
pub fn visual_attention<F: Real>(
    g: &mut Graph<'_, F>,
    p: &GroundingParams,
    states: Var,
    image: Var,
) -> Result<(Var, Var)> {
    if !g.value(image).is_finite() {
        return Err(Error::NumericDomain(
            "image feature contains non-finite values".into(),
        ));
    }
    let w_v = g.param(p.w_v);
    let w_h = g.param(p.w_h);
    let qv = g.linear(image, w_v)?;
    let q = g.tanh(qv);
    let kh = g.linear(states, w_h)?;
    let keys = g.tanh(kh);
    let q = as_row(g, q)?;
    let scores = g.linear(q, keys)?;
    let beta = g.softmax(scores)?;
    let t = g.matmul(beta, states)?;
    Ok((beta, t))
}

/// `t_emb = tanh(W_text t + b_text)` and `v_emb = tanh(W_image v + b_image)`.
pub fn project_shared<F: Real>(
    g: &mut Graph<'_, F>,
    p: &GroundingParams,
    text: Var,
    image: Var,
) -> Result<(Var, Var)> {
    let t_emb = affine_tanh(g, p.w_text, p.b_text, text)?;
    let v_emb = affine_tanh(g, p.w_image, p.b_image, image)?;
    Ok((t_emb, v_emb))
}

fn affine_tanh<F: Real>(g: &mut Graph<'_, F>, w: ParamId, b: ParamId, x: Var) -> Result<Var> {
    let w = g.param(w);
    let b = g.param(b);
    let x = as_row(g, x)?;
    let y = g.linear(x, w)?;
    let y = g.add_row(y, b)?;
    Ok(g.tanh(y))
}

fn as_row<F: Real>(g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
    match g.shape(x) {
        [d] => {
            let d = *d;
            g.reshape(x, &[1, d])
        }
        _ => Ok(x),
    }
}

/// `s0 = tanh(W_init (λ·t + (1 − λ)·mean))`. At `λ = 0` the attention
/// vector is not read at all, at `λ = 1` the mean is not read.
pub fn decoder_init<F: Real>(
    g: &mut Graph<'_, F>,
    p: &GroundingParams,
    t: Option<Var>,
    mean: Var,
    lambda: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!(
            "blend weight {lambda} outside [0, 1]"
        )));
    }
    let blended = match t {
        Some(t) if lambda == 1.0 => t,
        Some(t) if lambda > 0.0 => {
            let a = g.scale(t, F::lit(lambda));
            let b = g.scale(mean, F::lit(1.0 - lambda));
            g.add(a, b)?
        }
        _ => mean,
    };
    let w = g.param(p.w_init);
    let blended = as_row(g, blended)?;
    let s = g.linear(blended, w)?;
    Ok(g.tanh(s))
}

/// Bidirectional hinge loss over all in-batch negatives, summed:
///
/// ```text
/// Σ_p Σ_{k≠p} max(0, γ − s(v_p,t_p) + s(v_p,t_k)) + Σ_k Σ_{p≠k} max(0, γ − s(t_k,v_k) + s(t_k,v_p))
/// ```
pub fn ranking_loss<F: Real>(
    g: &mut Graph<'_, F>,
    texts: &[Var],
    images: &[Var],
    margin: f64,
) -> Result<Var> {
    let b = texts.len();
    if b != images.len() {
        return Err(Error::Alignment {
            what: "ranking loss inputs".into(),
            left: b,
            other: "images".into(),
            right: images.len(),
        });
    }
    if b < 2 {
        return Err(Error::Input("ranking loss needs at least two pairs".into()));
    }
    // sim[i][j] = cos(text_i, image_j)
    let mut sim = Vec::with_capacity(b);
    for &t in texts {
        let row = images
            .iter()
            .map(|&v| g.cosine(t, v))
            .collect::<Result<Vec<_>>>()?;
        sim.push(row);
    }
    let mut hinges = Vec::with_capacity(2 * b * (b - 1));
    let gamma = F::lit(margin);
    for p in 0..b {
        for k in 0..b {
            if k == p {
                continue;
            }
            // image p against wrong text k
            let d = g.sub(sim[k][p], sim[p][p])?;
            let d = g.add_scalar(d, gamma);
            hinges.push(g.relu(d));
            // text p against wrong image k
            let d = g.sub(sim[p][k], sim[p][p])?;
            let d = g.add_scalar(d, gamma);
            hinges.push(g.relu(d));
        }
    }
    g.add_n(&hinges)
}

/// Ranked candidate lists and recall at each requested cutoff.
#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    pub rankings: Vec<Vec<usize>>,
    pub recall: Vec<(usize, f64)>,
}

/// Ranks candidates for every query by cosine similarity (descending, ties
/// by ascending index). Query `i`'s true match is candidate `i`.
pub fn retrieve(queries: &[Vec<f32>], candidates: &[Vec<f32>], ks: &[usize]) -> Result<Retrieval> {
    if queries.is_empty() || candidates.is_empty() {
        return Err(Error::Input(
            "retrieval needs nonempty query and candidate sets".into(),
        ));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0) {
        return Err(Error::Config(format!(
            "recall cutoff must be at least 1, got {k}"
        )));
    }
    let unit = |v: &Vec<f32>| -> Result<Vec<f64>> {
        let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::NumericDomain(
                "retrieval embedding has zero or non-finite norm".into(),
            ));
        }
        Ok(v.iter().map(|&x| x as f64 / norm).collect())
    };
    let qs = queries.iter().map(unit).collect::<Result<Vec<_>>>()?;
    let cs = candidates.iter().map(unit).collect::<Result<Vec<_>>>()?;
    if let Some(c) = cs.iter().find(|c| c.len() != qs[0].len()) {
        return Err(Error::dim("retrieve", &[qs[0].len()], &[c.len()]));
    }
    let mut rankings = Vec::with_capacity(qs.len());
    for q in &qs {
        if q.len() != cs[0].len() {
            return Err(Error::dim("retrieve", &[q.len()], &[cs[0].len()]));
        }
        let scores: Vec<f64> = cs
            .iter()
            .map(|c| q.iter().zip(c).map(|(a, b)| a * b).sum())
            .collect();
        let mut order: Vec<usize> = (0..cs.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        rankings.push(order);
    }
    let recall = ks
        .iter()
        .map(|&k| {
            let hits = rankings
                .iter()
                .enumerate()
                .filter(|(i, r)| r.iter().take(k).any(|c| c == i))
                .count();
            (k, hits as f64 / rankings.len() as f64)
        })
        .collect();
    Ok(Retrieval { rankings, recall })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::Model;
    use crate::tensor::{ParamStore, Tensor};

    fn small() -> ModelConfig {
        ModelConfig {
            embed_dim: 4,
            hidden_dim: 3,
            shared_dim: 5,
            attention_dim: 4,
            decoder_attention_dim: 3,
            output_dim: 3,
            feature_dim: 7,
        }
    }

    fn setup() -> (Model, ParamStore<f64>) {
        let model = Model::new(small(), 10, 10).unwrap();
        let store = model.init_params(&mut ChaCha8Rng::seed_from_u64(11));
        (model, store)
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_rows_give_uniform_attention() {
        let (m, store) = setup();
        let mut g = Graph::inference(&store);
        let row = [0.1, -0.2, 0.3, 0.4, 0.5, -0.6];
        let states = g.constant(Tensor::from_f64(&[3, 6], &[row, row, row].concat()).unwrap());
        let v = g.constant(random(&mut ChaCha8Rng::seed_from_u64(1), &[7]));
        let (beta, t) = visual_attention(&mut g, &m.grounding, states, v).unwrap();
        for b in g.value(beta).data() {
            assert!((b - 1.0 / 3.0).abs() < 1e-12);
        }
        for (x, y) in g.value(t).data().iter().zip(row) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_position_has_unit_weight() {
        let (m, store) = setup();
        let mut g = Graph::inference(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let states = g.constant(random(&mut rng, &[1, 6]));
        let v = g.constant(random(&mut rng, &[7]));
        let (beta, t) = visual_attention(&mut g, &m.grounding, states, v).unwrap();
        assert_eq!(g.value(beta).data(), &[1.0]);
        assert_eq!(g.value(t).data(), g.value(states).data());
    }

    #[test]
    fn permuting_positions_permutes_weights() {
        let (m, store) = setup();
        let mut g = Graph::inference(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let states = g.constant(random(&mut rng, &[4, 6]));
        let v = g.constant(random(&mut rng, &[7]));
        let perm = [2, 0, 3, 1];
        let permuted = g.gather_rows(states, &perm).unwrap();
        let (b1, t1) = visual_attention(&mut g, &m.grounding, states, v).unwrap();
        let (b2, t2) = visual_attention(&mut g, &m.grounding, permuted, v).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert!((g.value(b2).data()[i] - g.value(b1).data()[p]).abs() < 1e-12);
        }
        for (x, y) in g.value(t1).data().iter().zip(g.value(t2).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let total: f64 = g.value(b1).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_projection_gives_zero_embeddings() {
        let (m, _) = setup();
        let store: ParamStore<f64> = m.zero_params();
        let mut g = Graph::inference(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = g.constant(random(&mut rng, &[1, 6]));
        let v = g.constant(random(&mut rng, &[7]));
        let (te, ve) = project_shared(&mut g, &m.grounding, t, v).unwrap();
        assert!(g.value(te).data().iter().all(|x| *x == 0.0));
        assert!(g.value(ve).data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn identity_projection_is_tanh() {
        let cfg = ModelConfig {
            shared_dim: 6,
            ..small()
        };
        let m = Model::new(cfg, 10, 10).unwrap();
        let mut store: ParamStore<f64> = m.zero_params();
        let mut eye = Tensor::zeros(&[6, 6]);
        for i in 0..6 {
            eye.data_mut()[i * 6 + i] = 1.0;
        }
        store.set(m.grounding.w_text, eye).unwrap();
        let mut g = Graph::inference(&store);
        let x = [0.01, -0.02, 0.03, 0.0, 0.05, -0.04];
        let t = g.constant(Tensor::from_f64(&[1, 6], &x).unwrap());
        let v = g.constant(Tensor::zeros(&[7]));
        let (te, _) = project_shared(&mut g, &m.grounding, t, v).unwrap();
        for (y, x) in g.value(te).data().iter().zip(x) {
            assert_eq!(*y, f64::tanh(x));
        }
    }

    #[test]
    fn decoder_init_blend_with_identity_weights() {
        let cfg = ModelConfig {
            hidden_dim: 2,
            ..small()
        };
        // context width 4, decoder hidden 2: use a [2, 4] selector as the "identity".
        let m = Model::new(cfg, 10, 10).unwrap();
        let mut store: ParamStore<f64> = m.zero_params();
        store
            .set(
                m.grounding.w_init,
                Tensor::from_f64(&[2, 4], &[1., 0., 0., 0., 0., 1., 0., 0.]).unwrap(),
            )
            .unwrap();
        let mut g = Graph::inference(&store);
        let t = g.constant(Tensor::full(&[1, 4], 1.0));
        let mean = g.constant(Tensor::full(&[1, 4], 3.0));
        let s0 = decoder_init(&mut g, &m.grounding, Some(t), mean, 0.5).unwrap();
        assert_eq!(g.value(s0).data(), &[2f64.tanh(), 2f64.tanh()]);
        let s1 = decoder_init(&mut g, &m.grounding, Some(t), mean, 1.0).unwrap();
        assert_eq!(g.value(s1).data(), &[1f64.tanh(), 1f64.tanh()]);
        let s2 = decoder_init(&mut g, &m.grounding, Some(t), mean, 0.0).unwrap();
        assert_eq!(g.value(s2).data(), &[3f64.tanh(), 3f64.tanh()]);
        assert!(decoder_init(&mut g, &m.grounding, Some(t), mean, 1.5).is_err());
    }

    fn unit(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    #[test]
    fn ranking_loss_examples() {
        let mut g: Graph<'_, f64> = Graph::standalone();
        // Paired similarity 0.9 and every cross similarity 0.5.
        let e = |x: [f64; 5]| unit(&x);
        let basis = gram_vectors();
        let t = [g.constant(e(basis[0])), g.constant(e(basis[1]))];
        let v = [g.constant(e(basis[2])), g.constant(e(basis[3]))];
        let loss = ranking_loss(&mut g, &t, &v, 0.1).unwrap();
        assert!(g.value(loss).item().abs() < 1e-9);

        // Equal paired and contrastive similarity: every hinge is γ.
        let mut g: Graph<'_, f64> = Graph::standalone();
        let same: Vec<Var> = (0..3).map(|_| g.constant(unit(&[1.0, 2.0]))).collect();
        let loss = ranking_loss(&mut g, &same, &same, 0.1).unwrap();
        assert!((g.value(loss).item() - 2.0 * 3.0 * 2.0 * 0.1).abs() < 1e-12);

        // Perfect orthogonal separation.
        let mut g: Graph<'_, f64> = Graph::standalone();
        let t: Vec<Var> = (0..3)
            .map(|i| {
                let mut x = [0.0; 3];
                x[i] = 1.0;
                g.constant(unit(&x))
            })
            .collect();
        let loss = ranking_loss(&mut g, &t, &t, 0.1).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    /// Unit vectors t1, t2, v1, v2 with <t_i,v_i> = 0.9 and cross products 0.5:
    /// a shared component of weight sqrt(.5) plus private parts correlated by 0.8.
    fn gram_vectors() -> [[f64; 5]; 4] {
        let h = 0.5f64.sqrt();
        [
            [h, h, 0.0, 0.0, 0.0],
            [h, 0.0, h, 0.0, 0.0],
            [h, 0.8 * h, 0.0, 0.6 * h, 0.0],
            [h, 0.0, 0.8 * h, 0.0, 0.6 * h],
        ]
    }

    #[test]
    fn ranking_loss_rejects_small_batches_and_zero_vectors() {
        let mut g: Graph<'_, f64> = Graph::standalone();
        let a = g.constant(unit(&[1.0, 0.0]));
        assert!(matches!(
            ranking_loss(&mut g, &[a], &[a], 0.1),
            Err(Error::Input(_))
        ));
        let z = g.constant(unit(&[0.0, 0.0]));
        assert!(matches!(
            ranking_loss(&mut g, &[a, z], &[a, a], 0.1),
            Err(Error::NumericDomain(_))
        ));
    }

    #[test]
    fn retrieval_examples() {
        let q = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let r = retrieve(&q, &q, &[1, 2]).unwrap();
        assert_eq!(r.recall, vec![(1, 1.0), (2, 1.0)]);

        // Ties resolved by ascending index.
        let c = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let r = retrieve(&c, &c, &[1]).unwrap();
        assert_eq!(r.rankings, vec![vec![0, 1], vec![0, 1]]);
        assert_eq!(r.recall, vec![(1, 0.5)]);

        assert!(matches!(
            retrieve(&[vec![0.0, 0.0]], &c, &[1]),
            Err(Error::NumericDomain(_))
        ));
        assert!(retrieve(&c, &c, &[0]).is_err());
    }
}
