#![allow(dead_code)]

//! Shared helpers for integration tests: a central-difference gradient
//! oracle and small randomized models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vagnmt::model::{Model, ModelConfig};
use vagnmt::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;
/// Below this magnitude, gradients are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 3,
        hidden_dim: 4,
        shared_dim: 3,
        attention_dim: 3,
        decoder_attention_dim: 3,
        output_dim: 3,
        feature_dim: 5,
    }
}

pub fn tiny_model() -> Model {
    Model::new(tiny_config(), 8, 7).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Glorot-initialized parameters with every tensor (biases included)
/// jittered so no gradient is structurally zero by accident.
pub fn random_params(model: &Model, seed: u64) -> ParamStore<f64> {
    let mut r = rng(seed);
    let mut store: ParamStore<f64> = model.init_params(&mut r);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += r.gen_range(-0.3..0.3);
        }
    }
    store
}

/// Scalar `Σ c ⊙ x` with fixed random weights `c`, so every output
/// coordinate reaches the loss with a distinct sensitivity.
pub fn probe_sum(g: &mut Graph<'_, f64>, x: Var, seed: u64) -> Var {
    let shape = g.shape(x).to_vec();
    let c = random_tensor(&mut rng(seed ^ 0x5eed), &shape, 1.0);
    let c = g.constant(c);
    let prod = g.mul(x, c).unwrap();
    g.sum(prod)
}

#[derive(Debug)]
pub struct Mismatch {
    pub what: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

/// Compares backpropagated gradients of `build` against central
/// differences for every listed parameter entry and every input entry.
/// Returns the largest relative error, or the first entry over tolerance.
pub fn check_gradients(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    ids: &[ParamId],
    build: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
) -> Result<f64, Mismatch> {
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };

    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let input_grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map_or_else(|| vec![0.0; t.numel()], |gr| gr.data().to_vec())
        })
        .collect();
    let param_grads: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            g.param_grad(id)
                .map_or_else(|| vec![0.0; store.get(id).numel()], <[f64]>::to_vec)
        })
        .collect();
    drop(g);

    let mut worst = 0.0f64;
    let mut compare =
        |what: &dyn Fn() -> String, index: usize, analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic, numeric);
            worst = worst.max(err);
            if err > REL_TOL {
                Err(Mismatch {
                    what: what(),
                    index,
                    analytic,
                    numeric,
                })
            } else {
                Ok(())
            }
        };

    for (&id, grad) in ids.iter().zip(&param_grads) {
        let mut perturbed = store.clone();
        for (i, &a) in grad.iter().enumerate() {
            let orig = perturbed.get(id).data()[i];
            perturbed.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let plus = eval(&perturbed, inputs);
            perturbed.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let minus = eval(&perturbed, inputs);
            perturbed.get_mut(id).data_mut()[i] = orig;
            compare(&|| store.name(id).to_string(), i, a, plus, minus)?;
        }
    }
    for (k, grad) in input_grads.iter().enumerate() {
        let mut perturbed = inputs.to_vec();
        for (i, &a) in grad.iter().enumerate() {
            let orig = perturbed[k].data()[i];
            perturbed[k].data_mut()[i] = orig + FD_STEP;
            let plus = eval(store, &perturbed);
            perturbed[k].data_mut()[i] = orig - FD_STEP;
            let minus = eval(store, &perturbed);
            perturbed[k].data_mut()[i] = orig;
            compare(&|| format!("input {k}"), i, a, plus, minus)?;
        }
    }
    Ok(worst)
}

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}[{}]: analytic {:.6e} vs numeric {:.6e}",
            self.what, self.index, self.analytic, self.numeric
        )
    }
}

/// One parameterized operation checked on a randomized instance per seed.
pub struct GradCase {
    pub name: &'static str,
    pub run: fn(u64) -> Result<f64, Mismatch>,
}

pub const INSTANCES_PER_CASE: u64 = 20;

pub fn gradient_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "gru cell",
            run: gru_cell_case,
        },
        GradCase {
            name: "conditional gru step",
            run: cgru_case,
        },
        GradCase {
            name: "visual-text attention",
            run: visual_attention_case,
        },
        GradCase {
            name: "shared-space projections",
            run: projection_case,
        },
        GradCase {
            name: "ranking loss",
            run: ranking_case,
        },
        GradCase {
            name: "output layer",
            run: output_case,
        },
        GradCase {
            name: "decoder initialization",
            run: decoder_init_case,
        },
        GradCase {
            name: "teacher-forced sequence loss",
            run: sequence_case,
        },
        GradCase {
            name: "bidirectional encoder",
            run: encoder_case,
        },
        GradCase {
            name: "joint objective",
            run: joint_case,
        },
    ]
}

fn add_all(g: &mut Graph<'_, f64>, parts: &[Var]) -> Var {
    g.add_n(parts).unwrap()
}

fn gru_cell_case(seed: u64) -> Result<f64, Mismatch> {
    use vagnmt::model::gru_cell;
    let model = tiny_model();
    let store = random_params(&model, seed);
    let mut r = rng(seed);
    let h = random_tensor(&mut r, &[1, 4], 1.0);
    let x = random_tensor(&mut r, &[1, 3], 1.0);
    let p = model.encoder.forward.clone();
    check_gradients(&store, &[h, x], &p.ids(), |g, v| {
        let out = gru_cell(g, &p, v[0], v[1]).unwrap();
        probe_sum(g, out, seed)
    })
}

fn cgru_case(seed: u64) -> Result<f64, Mismatch> {
    use vagnmt::model::decoder::{cgru_step, memory};
    use vagnmt::model::Phase;
    let model = tiny_model();
    let store = random_params(&model, seed);
    let mut r = rng(seed);
    let n = r.gen_range(1..=4);
    let k = r.gen_range(1..=3);
    let states = random_tensor(&mut r, &[n, 8], 1.0);
    let s_prev = random_tensor(&mut r, &[k, 4], 1.0);
    let prev: Vec<usize> = (0..k).map(|_| r.gen_range(0..7)).collect();
    let p = model.decoder.clone();
    check_gradients(&store, &[states, s_prev], &p.ids(), |g, v| {
        let mem = memory(g, &p, v[0]).unwrap();
        let out = cgru_step(g, &p, v[1], &prev, mem, &mut Phase::Infer).unwrap();
        let parts = [
            probe_sum(g, out.state, seed),
            probe_sum(g, out.context, seed + 1),
            probe_sum(g, out.attention, seed + 2),
        ];
        add_all(g, &parts)
    })
}

fn visual_attention_case(seed: u64) -> Result<f64, Mismatch> {
    use vagnmt::model::grounding::visual_attention;
    let model = tiny_model();
    let store = random_params(&model, seed);
    let mut r = rng(seed);
    let n = r.gen_range(1..=5);
    let states = random_tensor(&mut r, &[n, 8], 1.0);
    let image = random_tensor(&mut r, &[1, 5], 2.0);
    let p = model.grounding.clone();
    check_gradients(&store, &[states, image], &p.ids(), |g, v| {
        let (beta, t) = visual_attention(g, &p, v[0], v[1]).unwrap();
        let parts = [probe_sum(g, beta, seed), probe_sum(g, t, seed + 1)];
        add_all(g, &parts)
    })
}

fn projection_case(seed: u64) -> Result<f64, Mismatch> {
    use vagnmt::model::grounding::project_shared;
    let model = tiny_model();
    let store = random_params(&model, seed);
    let mut r = rng(seed);
    let text = random_tensor(&mut r, &[1, 8], 1.0);
    let image = random_tensor(&mut r, &[1, 5], 2.0);
    let p = model.grounding.clone();
    check_gradients(&store, &[text, image], &p.ids(), |g, v| {
        let (te, ve) = project_shared(g, &p, v[0], v[1]).unwrap();
        let parts = [probe_sum(g, te, seed), probe_sum(g, ve, seed + 1)];
        add_all(g, &parts)
    })
}

fn ranking_case(seed: u64) -> Result<f64, Mismatch> {
    use vagnmt::model::grounding::ranking_loss;
    let model = tiny_model();
    let store = random_params(&model, seed);
    let mut r = rng(seed);
    let b = r.gen_range(2..=4);
    let inputs: Vec<Tensor<f64>> = (0..2 * b)
        .map(|_| random_tensor(&mut r, &[1, 3], 1.0))
        .collect();
    check_gradients(&store, &inputs, &[], |g, v| {
        ranking_loss(g, &v[..b], &v[b..], 0.5).unwrap()
    })
}

fn output_case(seed: u64) -> Result<f64, Mismatch> {
    use vagnmt::model::decoder::output_distribution;
    use vagnmt::model::Phase;
    let model = tiny_model();
    let store = random_params(&model, seed);
    let mut r = rng(seed);
    let k = r.gen_range(1..=3);
    let e = random_tensor(&mut r, &[k, 3], 1.0);
    let s = random_tensor(&mut r, &[k, 4], 1.0);
    let c = random_tensor(&mut r, &[k, 8], 1.0);
    let p = model.decoder.clone();
    check_gradients(&store, &[e, s, c], &p.ids(), |g, v| {
        let out = output_distribution(g, &p, v[0], v[1], v[2], &mut Phase::Infer).unwrap();
        probe_sum(g, out, seed)
    })
}

fn decoder_init_case(seed: u64) -> Result<f64, Mismatch> {
    use vagnmt::model::grounding::decoder_init;
    let model = tiny_model();
    let store = random_params(&model, seed);
    let mut r = rng(seed);
    let t = random_tensor(&mut r, &[1, 8], 1.0);
    let mean = random_tensor(&mut r, &[1, 8], 1.0);
    let lambda = match seed % 4 {
        0 => 0.0,
        1 => 1.0,
        _ => r.gen_range(0.0..1.0),
    };
    let p = model.grounding.clone();
    check_gradients(&store, &[t, mean], &p.ids(), |g, v| {
        let s0 = decoder_init(g, &p, Some(v[0]), v[1], lambda).unwrap();
        probe_sum(g, s0, seed)
    })
}

fn sequence_case(seed: u64) -> Result<f64, Mismatch> {
    use vagnmt::model::decoder::{memory, sequence_loss};
    use vagnmt::model::Phase;
    let model = tiny_model();
    let store = random_params(&model, seed);
    let mut r = rng(seed);
    let n = r.gen_range(1..=4);
    let len = r.gen_range(2..=5);
    let s0 = random_tensor(&mut r, &[1, 4], 1.0);
    let states = random_tensor(&mut r, &[n, 8], 1.0);
    let target: Vec<usize> = (0..len).map(|_| r.gen_range(0..7)).collect();
    let p = model.decoder.clone();
    check_gradients(&store, &[s0, states], &p.ids(), |g, v| {
        let mem = memory(g, &p, v[1]).unwrap();
        sequence_loss(g, &p, v[0], mem, &target, &mut Phase::Infer).unwrap()
    })
}

fn encoder_case(seed: u64) -> Result<f64, Mismatch> {
    use vagnmt::model::encoder::encode;
    use vagnmt::model::Phase;
    let model = tiny_model();
    let store = random_params(&model, seed);
    let mut r = rng(seed);
    let n = r.gen_range(1..=5);
    let src: Vec<usize> = (0..n).map(|_| r.gen_range(0..8)).collect();
    let p = model.encoder.clone();
    check_gradients(&store, &[], &p.ids(), |g, _| {
        let enc = encode(g, &p, &src, &mut Phase::Infer).unwrap();
        let parts = [
            probe_sum(g, enc.states, seed),
            probe_sum(g, enc.mean, seed + 1),
        ];
        add_all(g, &parts)
    })
}

fn joint_case(seed: u64) -> Result<f64, Mismatch> {
    use vagnmt::model::Phase;
    use vagnmt::train::{batch_loss, Example, TrainConfig};
    let model = tiny_model();
    let store = random_params(&model, seed);
    let mut r = rng(seed);
    let batch: Vec<Example> = (0..3)
        .map(|_| {
            let n = r.gen_range(1..=4);
            let m = r.gen_range(1..=3);
            let mut tgt = vec![1];
            tgt.extend((0..m).map(|_| r.gen_range(3..7)));
            tgt.push(2);
            Example {
                src: (0..n).map(|_| r.gen_range(3..8)).collect(),
                tgt,
                image: Some((0..5).map(|_| r.gen_range(-2.0f32..2.0)).collect()),
            }
        })
        .collect();
    let refs: Vec<&Example> = batch.iter().collect();
    let cfg = TrainConfig {
        model: tiny_config(),
        alpha: r.gen_range(0.2..0.9),
        margin: 0.5,
        ..TrainConfig::default()
    };
    let ids: Vec<ParamId> = store.ids().collect();
    check_gradients(&store, &[], &ids, |g, _| {
        batch_loss(g, &model, &refs, &cfg, &mut Phase::Infer)
            .unwrap()
            .total
    })
}

/// Runs every instance of a case; `Err` carries the first failure.
pub fn run_case(case: &GradCase) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES_PER_CASE {
        match (case.run)(1000 + seed) {
            Ok(e) => worst = worst.max(e),
            Err(m) => return Err(format!("instance {seed}: {m}")),
        }
    }
    Ok(worst)
}
