//! Beam search and greedy decoding over any step-wise scorer.

use crate::error::{Error, Result};

/// Something that extends a batch of partial hypotheses by one token.
pub trait StepModel {
    type State: Clone;

    /// For each `(state, previous token)` pair, the next state and
    /// log-probabilities over the whole vocabulary.
    fn step(
        &mut self,
        states: &[Self::State],
        prev: &[usize],
    ) -> Result<Vec<(Self::State, Vec<f64>)>>;
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    /// Generated tokens; ends with EOS when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub state: S,
    pub finished: bool,
}

impl<S> Hypothesis<S> {
    /// Cumulative log-probability divided by token count (EOS included).
    pub fn normalized_score(&self) -> f64 {
        if self.tokens.is_empty() {
            return 0.0;
        }
        self.log_prob / self.tokens.len() as f64
    }

    /// Tokens without the trailing EOS.
    pub fn output(&self, eos: usize) -> &[usize] {
        match self.tokens.split_last() {
            Some((&last, rest)) if self.finished && last == eos => rest,
            _ => &self.tokens,
        }
    }
}

/// Keeps the `beam_size` best partial hypotheses by cumulative
/// log-probability. Each finished hypothesis permanently takes one beam
/// slot. Candidates tie-break on (parent, token). The result maximizes the
/// length-normalized score among finished hypotheses, or among the
/// survivors at `max_len` when none finished.
pub fn beam_search<M: StepModel>(
    model: &mut M,
    initial: M::State,
    bos: usize,
    eos: usize,
    beam_size: usize,
    max_len: usize,
) -> Result<Hypothesis<M::State>> {
    if beam_size == 0 || max_len == 0 {
        return Err(Error::Config(
            "beam size and maximum length must be at least 1".into(),
        ));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: initial,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis<M::State>> = Vec::new();

    for _ in 0..max_len {
        let width = beam_size - finished.len();
        if live.is_empty() || width == 0 {
            break;
        }
        let states: Vec<M::State> = live.iter().map(|h| h.state.clone()).collect();
        let prev: Vec<usize> = live
            .iter()
            .map(|h| *h.tokens.last().unwrap_or(&bos))
            .collect();
        let outputs = model.step(&states, &prev)?;
        if outputs.len() != live.len() {
            return Err(Error::Contract(
                "step model returned the wrong number of rows".into(),
            ));
        }

        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (parent, (_, logp)) in outputs.iter().enumerate() {
            let base = live[parent].log_prob;
            for (tok, &lp) in logp.iter().enumerate() {
                candidates.push((base + lp, parent, tok));
            }
        }
        let width = width.min(candidates.len());
        let order = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
            b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        };
        if width < candidates.len() {
            candidates.select_nth_unstable_by(width - 1, order);
            candidates.truncate(width);
        }
        candidates.sort_by(order);

        let mut next = Vec::with_capacity(width);
        for (score, parent, tok) in candidates {
            let mut tokens = live[parent].tokens.clone();
            tokens.push(tok);
            let hyp = Hypothesis {
                tokens,
                log_prob: score,
                state: outputs[parent].0.clone(),
                finished: tok == eos,
            };
            if hyp.finished {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
    }

    let pool = if finished.is_empty() { live } else { finished };
    pool.into_iter()
        .reduce(|best, h| {
            if h.normalized_score() > best.normalized_score() {
                h
            } else {
                best
            }
        })
        .ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()))
}

/// Arg-max decoding; ties pick the lowest token index.
pub fn greedy<M: StepModel>(
    model: &mut M,
    initial: M::State,
    bos: usize,
    eos: usize,
    max_len: usize,
) -> Result<Hypothesis<M::State>> {
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: initial,
        finished: false,
    };
    while hyp.tokens.len() < max_len && !hyp.finished {
        let prev = *hyp.tokens.last().unwrap_or(&bos);
        let (state, logp) = model
            .step(std::slice::from_ref(&hyp.state), &[prev])?
            .pop()
            .ok_or_else(|| Error::Contract("step model returned no rows".into()))?;
        let (tok, lp) =
            logp.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                });
        hyp.tokens.push(tok);
        hyp.log_prob += lp;
        hyp.state = state;
        hyp.finished = tok == eos;
    }
    Ok(hyp)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// First-order Markov chain: the state is the last token.
    struct Markov {
        table: Vec<Vec<f64>>,
    }

    impl StepModel for Markov {
        type State = ();
        fn step(&mut self, states: &[()], prev: &[usize]) -> Result<Vec<((), Vec<f64>)>> {
            Ok(states
                .iter()
                .zip(prev)
                .map(|(_, &p)| ((), self.table[p].iter().map(|x| x.ln()).collect()))
                .collect())
        }
    }

    const BOS: usize = 0;
    const EOS: usize = 1;

    /// Greedy takes token 2 (0.6) but its continuations are poor; token 3
    /// leads to EOS with high probability.
    fn toy() -> Markov {
        Markov {
            table: vec![
                vec![0.0, 0.0, 0.6, 0.4],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.4, 0.3, 0.3],
                vec![0.0, 0.95, 0.025, 0.025],
            ],
        }
    }

    /// Best normalized score among all finished sequences of length ≤ max_len.
    fn exhaustive(m: &Markov, max_len: usize) -> (Vec<usize>, f64) {
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        let mut stack = vec![(vec![], 0.0f64)];
        while let Some((seq, lp)) = stack.pop() {
            let last = *seq.last().unwrap_or(&BOS);
            for (tok, &p) in m.table[last].iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let mut s = seq.clone();
                s.push(tok);
                let l = lp + p.ln();
                if tok == EOS {
                    let score = l / s.len() as f64;
                    if score > best.1 {
                        best = (s, score);
                    }
                } else if s.len() < max_len {
                    stack.push((s, l));
                }
            }
        }
        best
    }

    #[test]
    fn beam_of_one_is_greedy() {
        let mut m = toy();
        let g = greedy(&mut m, (), BOS, EOS, 4).unwrap();
        let b = beam_search(&mut m, (), BOS, EOS, 1, 4).unwrap();
        assert_eq!(g.tokens, b.tokens);
        assert!((g.log_prob - b.log_prob).abs() < 1e-12);
    }

    #[test]
    fn wider_beam_beats_greedy_and_matches_exhaustive() {
        let mut m = toy();
        let g = beam_search(&mut m, (), BOS, EOS, 1, 4).unwrap();
        let b = beam_search(&mut m, (), BOS, EOS, 2, 4).unwrap();
        let (best_seq, best_score) = exhaustive(&m, 4);
        assert_eq!(b.tokens, best_seq);
        assert!((b.normalized_score() - best_score).abs() < 1e-12);
        assert!(b.normalized_score() > g.normalized_score());
        assert_eq!(b.output(EOS), &[3]);
    }

    #[test]
    fn score_is_monotone_in_beam_size() {
        let mut m = toy();
        let mut prev = f64::NEG_INFINITY;
        for k in 1..=8 {
            let h = beam_search(&mut m, (), BOS, EOS, k, 4).unwrap();
            assert!(h.normalized_score() >= prev - 1e-12);
            prev = h.normalized_score();
        }
        assert!((prev - exhaustive(&m, 4).1).abs() < 1e-12);
    }

    #[test]
    fn max_len_one_yields_one_token() {
        let mut m = toy();
        let h = beam_search(&mut m, (), BOS, EOS, 3, 1).unwrap();
        assert_eq!(h.tokens.len(), 1);
        assert!(!h.finished);
    }

    #[test]
    fn finished_hypotheses_do_not_grow_and_log_prob_never_increases() {
        let mut m = toy();
        let h = beam_search(&mut m, (), BOS, EOS, 4, 6).unwrap();
        assert!(h.finished);
        assert_eq!(h.tokens.iter().filter(|&&t| t == EOS).count(), 1);
        assert!(h.log_prob <= 0.0);
    }

    #[test]
    fn zero_beam_is_a_config_error() {
        let mut m = toy();
        assert!(matches!(
            beam_search(&mut m, (), BOS, EOS, 0, 3),
            Err(Error::Config(_))
        ));
    }
}
