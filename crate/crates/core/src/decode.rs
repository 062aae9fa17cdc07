//! Hypothesis generation by beam search or ancestral (multinomial) sampling.
//!
//! Both strategies share one length rule: at most `max_len` tokens are
//! generated, EOS included. A hypothesis that reaches `max_len` without
//! emitting EOS is cut there and marked unterminated; its score is the sum of
//! the log-probabilities of the tokens it actually emitted.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rayon::prelude::*;

use crate::error::Result;
use crate::model::{ConditionalLm, Seq2Seq};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, ending in EOS when `terminated`.
    pub tokens: Vec<u32>,
    pub step_log_probs: Vec<f64>,
    pub score: f64,
    pub terminated: bool,
    /// Decoder state that produced each step's distribution.
    pub decoder_states: Vec<Vec<f64>>,
}

impl Hypothesis {
    /// Tokens without the trailing EOS.
    pub fn content(&self) -> &[u32] {
        if self.terminated {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone)]
struct BeamEntry<S> {
    tokens: Vec<u32>,
    step_log_probs: Vec<f64>,
    score: f64,
    state: S,
    features: Vec<Vec<f64>>,
}

impl<S> BeamEntry<S> {
    fn finish(self, terminated: bool) -> Hypothesis {
        Hypothesis {
            tokens: self.tokens,
            step_log_probs: self.step_log_probs,
            score: self.score,
            terminated,
            decoder_states: self.features,
        }
    }
}

struct Candidate {
    score: f64,
    token: u32,
    parent: usize,
    log_prob: f64,
    order: usize,
}

/// Indices of the `k` largest entries, ties to the lower index.
fn top_k(log_probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..log_probs.len()).collect();
    idx.sort_by(|&a, &b| log_probs[b].total_cmp(&log_probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Beam search over summed log-probabilities, without length normalization.
///
/// Each live entry proposes its `width` best continuations; the pooled
/// candidates are ranked by score (ties: lower token id, then earlier
/// insertion). Candidates ending in EOS move to the finished set, the rest
/// refill the beam to `width` entries. The search stops once `width`
/// hypotheses have finished or `max_len` steps have run, at which point live
/// entries are cut and returned unterminated. Results are sorted by score.
pub fn beam_search<M: ConditionalLm>(model: &M, src: &[u32], width: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    assert!(width >= 1 && max_len >= 1, "beam width and max_len must be positive");
    let eos = model.eos();
    let (ctx, init) = model.start(src)?;
    let mut beam = vec![BeamEntry {
        tokens: Vec::new(),
        step_log_probs: Vec::new(),
        score: 0.0,
        state: init,
        features: Vec::new(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..max_len {
        let mut pool = Vec::new();
        let mut expanded = Vec::with_capacity(beam.len());
        for (parent, entry) in beam.iter().enumerate() {
            let prev = entry.tokens.last().copied().unwrap_or(model.bos());
            let (state, log_probs) = model.step(&ctx, &entry.state, prev)?;
            for tok in top_k(&log_probs, width) {
                pool.push(Candidate {
                    score: entry.score + log_probs[tok],
                    token: tok as u32,
                    parent,
                    log_prob: log_probs[tok],
                    order: pool.len(),
                });
            }
            expanded.push(state);
        }
        pool.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.token.cmp(&b.token))
                .then(a.order.cmp(&b.order))
        });

        let mut next = Vec::with_capacity(width);
        for cand in pool {
            if finished.len() >= width || next.len() >= width {
                break;
            }
            let parent = &beam[cand.parent];
            let state = &expanded[cand.parent];
            let mut tokens = parent.tokens.clone();
            tokens.push(cand.token);
            let mut step_log_probs = parent.step_log_probs.clone();
            step_log_probs.push(cand.log_prob);
            let mut features = parent.features.clone();
            features.push(model.features(state));
            let entry = BeamEntry {
                tokens,
                step_log_probs,
                score: cand.score,
                state: state.clone(),
                features,
            };
            if cand.token == eos {
                finished.push(entry.finish(true));
            } else {
                next.push(entry);
            }
        }
        beam = next;
        if step + 1 == max_len {
            finished.extend(beam.drain(..).map(|e| e.finish(false)));
        }
        if finished.len() >= width || beam.is_empty() {
            break;
        }
    }
    finished.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(finished)
}

/// Repeatedly takes the most probable token (lowest id on ties).
pub fn greedy_decode<M: ConditionalLm>(model: &M, src: &[u32], max_len: usize) -> Result<Hypothesis> {
    let (ctx, mut state) = model.start(src)?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        step_log_probs: Vec::new(),
        score: 0.0,
        terminated: false,
        decoder_states: Vec::new(),
    };
    let mut prev = model.bos();
    while hyp.tokens.len() < max_len {
        let (next, log_probs) = model.step(&ctx, &state, prev)?;
        let tok = top_k(&log_probs, 1)[0];
        hyp.decoder_states.push(model.features(&next));
        hyp.tokens.push(tok as u32);
        hyp.step_log_probs.push(log_probs[tok]);
        hyp.score += log_probs[tok];
        if tok as u32 == model.eos() {
            hyp.terminated = true;
            break;
        }
        prev = tok as u32;
        state = next;
    }
    Ok(hyp)
}

/// Draws one token per step from the model distribution at temperature 1.
pub fn multinomial_sample<M: ConditionalLm, R: Rng + ?Sized>(
    model: &M,
    src: &[u32],
    max_len: usize,
    rng: &mut R,
) -> Result<Hypothesis> {
    let (ctx, mut state) = model.start(src)?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        step_log_probs: Vec::new(),
        score: 0.0,
        terminated: false,
        decoder_states: Vec::new(),
    };
    let mut prev = model.bos();
    while hyp.tokens.len() < max_len {
        let (next, log_probs) = model.step(&ctx, &state, prev)?;
        let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
        let tok = WeightedIndex::new(&probs)
            .expect("model distribution has positive mass")
            .sample(rng);
        hyp.decoder_states.push(model.features(&next));
        hyp.tokens.push(tok as u32);
        hyp.step_log_probs.push(log_probs[tok]);
        hyp.score += log_probs[tok];
        if tok as u32 == model.eos() {
            hyp.terminated = true;
            break;
        }
        prev = tok as u32;
        state = next;
    }
    Ok(hyp)
}

/// Top beam hypothesis content for each source, decoded in parallel.
pub fn translate_all(model: Seq2Seq<'_>, srcs: &[&[u32]], width: usize, max_len: usize) -> Result<Vec<Vec<u32>>> {
    srcs.par_iter()
        .map(|src| {
            let hyps = beam_search(&model, src, width, max_len)?;
            Ok(hyps.first().map(|h| h.content().to_vec()).unwrap_or_default())
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod table {
    //! A hand-set conditional LM whose distribution depends only on the step.

    use super::*;
    use crate::tensor::log_softmax;

    pub struct TableLm {
        /// Per-step probabilities; the last row repeats.
        pub rows: Vec<Vec<f64>>,
        pub eos: u32,
    }

    impl ConditionalLm for TableLm {
        type Context = ();
        type State = usize;

        fn tgt_vocab_size(&self) -> usize {
            self.rows[0].len()
        }
        fn bos(&self) -> u32 {
            0
        }
        fn eos(&self) -> u32 {
            self.eos
        }
        fn start(&self, _src: &[u32]) -> Result<((), usize)> {
            Ok(((), 0))
        }
        fn step(&self, _: &(), state: &usize, _prev: u32) -> Result<(usize, Vec<f64>)> {
            let row = &self.rows[(*state).min(self.rows.len() - 1)];
            let logits: Vec<f64> = row.iter().map(|p| p.ln()).collect();
            Ok((state + 1, log_softmax(&logits)))
        }
        fn features(&self, state: &usize) -> Vec<f64> {
            vec![*state as f64]
        }
    }
}
