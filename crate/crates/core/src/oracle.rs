//! Brute-force enumeration of the whole output space of a tiny model.
//!
//! Everything here walks the space with its own depth-first traversal and
//! talks to the model only through single decoder steps, so it shares no
//! search or sampling logic with [`crate::decode`]. The length rule is the
//! same as decoding: sequences end at EOS or are cut at `max_len` tokens,
//! which makes the enumerated probabilities sum to one.

use crate::decode::Hypothesis;
use crate::error::{Error, Result};
use crate::metrics::{sentence_reward, BleuConfig};
use crate::model::{check_gradient_against_fn, ConditionalLm, GradCheck, Gradients, Seq2Seq};
use crate::tensor::ParamSet;

pub const DEFAULT_BUDGET: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub tokens: Vec<u32>,
    pub step_log_probs: Vec<f64>,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedSpace {
    pub sequences: Vec<Outcome>,
    pub total_mass: f64,
}

pub fn enumerate_sequences<M: ConditionalLm>(model: &M, src: &[u32], max_len: usize) -> Result<EnumeratedSpace> {
    enumerate_with_budget(model, src, max_len, DEFAULT_BUDGET)
}

/// Expands every continuation in token-id order. Fails when
/// `V^max_len` exceeds `budget`.
pub fn enumerate_with_budget<M: ConditionalLm>(
    model: &M,
    src: &[u32],
    max_len: usize,
    budget: usize,
) -> Result<EnumeratedSpace> {
    let size = (model.tgt_vocab_size() as f64).powi(max_len as i32);
    if size > budget as f64 {
        return Err(Error::SpaceTooLarge { size, budget });
    }
    let (ctx, state) = model.start(src)?;
    let mut sequences = Vec::new();
    let mut prefix = Vec::with_capacity(max_len);
    let mut log_probs = Vec::with_capacity(max_len);
    expand(
        model,
        &ctx,
        &state,
        model.bos(),
        max_len,
        &mut prefix,
        &mut log_probs,
        &mut sequences,
    )?;
    let total_mass = sequences.iter().map(|o| o.probability).sum();
    Ok(EnumeratedSpace { sequences, total_mass })
}

#[allow(clippy::too_many_arguments)]
fn expand<M: ConditionalLm>(
    model: &M,
    ctx: &M::Context,
    state: &M::State,
    prev: u32,
    max_len: usize,
    prefix: &mut Vec<u32>,
    log_probs: &mut Vec<f64>,
    out: &mut Vec<Outcome>,
) -> Result<()> {
    let (next, dist) = model.step(ctx, state, prev)?;
    for (tok, &lp) in dist.iter().enumerate() {
        let tok = tok as u32;
        prefix.push(tok);
        log_probs.push(lp);
        if tok == model.eos() || prefix.len() == max_len {
            out.push(Outcome {
                tokens: prefix.clone(),
                step_log_probs: log_probs.clone(),
                probability: log_probs.iter().sum::<f64>().exp(),
            });
        } else {
            expand(model, ctx, &next, tok, max_len, prefix, log_probs, out)?;
        }
        prefix.pop();
        log_probs.pop();
    }
    Ok(())
}

/// `Σ_ŷ p(ŷ|x)·reward(ŷ)` over the enumerated space.
pub fn expected_reward<M, F>(model: &M, src: &[u32], max_len: usize, reward: F) -> Result<f64>
where
    M: ConditionalLm,
    F: Fn(&[u32]) -> f64,
{
    let space = enumerate_sequences(model, src, max_len)?;
    Ok(space.sequences.iter().map(|o| o.probability * reward(&o.tokens)).sum())
}

/// Expected smoothed sentence-BLEU reward against `reference`.
pub fn expected_bleu<M: ConditionalLm>(
    model: &M,
    src: &[u32],
    reference: &[u32],
    max_len: usize,
    cfg: &BleuConfig,
) -> Result<f64> {
    sentence_reward(&[], reference, cfg)?;
    expected_reward(model, src, max_len, |y| {
        sentence_reward(y, reference, cfg).expect("reference checked non-empty")
    })
}

/// Exact `∇_θ E[R] = Σ_ŷ p(ŷ)·R(ŷ)·∇_θ log p(ŷ)`, one backward pass per sequence.
pub fn exact_policy_gradient<F>(model: Seq2Seq<'_>, src: &[u32], max_len: usize, reward: F) -> Result<Gradients>
where
    F: Fn(&[u32]) -> f64,
{
    let space = enumerate_sequences(&model, src, max_len)?;
    let mut grads = model.params.zeros_like();
    for o in &space.sequences {
        let w = o.probability * reward(&o.tokens);
        if w != 0.0 {
            model.backward(src, &o.tokens, &vec![w; o.tokens.len()], &mut grads)?;
        }
    }
    // backward differentiates −Σ w·log p
    grads.scale(-1.0);
    Ok(grads)
}

/// Exact `Σ_ŷ p(ŷ) Σ_t b_t ∇_θ log p(ŷ_t | x, ŷ_<t)` for step-indexed
/// baselines `b_t` that do not depend on the drawn token. Steps beyond
/// `baselines.len()` use zero.
pub fn expected_baseline_term(model: Seq2Seq<'_>, src: &[u32], max_len: usize, baselines: &[f64]) -> Result<Gradients> {
    let space = enumerate_sequences(&model, src, max_len)?;
    let mut grads = model.params.zeros_like();
    for o in &space.sequences {
        let weights: Vec<f64> = (0..o.tokens.len())
            .map(|t| o.probability * baselines.get(t).copied().unwrap_or(0.0))
            .collect();
        model.backward(src, &o.tokens, &weights, &mut grads)?;
    }
    grads.scale(-1.0);
    Ok(grads)
}

/// The most probable sequence in the space; the first in token-id order wins ties.
pub fn exhaustive_best<M: ConditionalLm>(model: &M, src: &[u32], max_len: usize) -> Result<Hypothesis> {
    let space = enumerate_sequences(model, src, max_len)?;
    let best = space
        .sequences
        .iter()
        .map(|o| (o, o.step_log_probs.iter().sum::<f64>()))
        .fold(None::<(&Outcome, f64)>, |acc, (o, s)| match acc {
            Some((_, best)) if best >= s => acc,
            _ => Some((o, s)),
        })
        .map(|(o, _)| o.clone())
        .expect("enumerated space is never empty");

    let (ctx, mut state) = model.start(src)?;
    let mut prev = model.bos();
    let mut decoder_states = Vec::with_capacity(best.tokens.len());
    for &tok in &best.tokens {
        let (next, _) = model.step(&ctx, &state, prev)?;
        decoder_states.push(model.features(&next));
        state = next;
        prev = tok;
    }
    Ok(Hypothesis {
        terminated: best.tokens.last() == Some(&model.eos()),
        score: best.step_log_probs.iter().sum(),
        tokens: best.tokens,
        step_log_probs: best.step_log_probs,
        decoder_states,
    })
}

/// Compares [`exact_policy_gradient`] with central differences of
/// [`expected_reward`].
pub fn policy_gradient_fd_check<F>(
    model: Seq2Seq<'_>,
    src: &[u32],
    max_len: usize,
    reward: F,
    epsilon: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheck>
where
    F: Fn(&[u32]) -> f64,
{
    let exact = exact_policy_gradient(model, src, max_len, &reward)?;
    check_gradient_against_fn(
        model,
        &exact,
        |m| expected_reward(&m, src, max_len, &reward),
        epsilon,
        max_coords,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::table::TableLm;
    use crate::model::{init_model, ModelConfig, ModelParams};

    fn two_token_model(p_content: f64) -> (ModelParams, ModelConfig) {
        // ids: 0 = content / BOS, 1 = EOS
        let cfg = ModelConfig {
            src_vocab_size: 2,
            tgt_vocab_size: 2,
            embed_dim: 2,
            hidden_dim: 2,
            max_decode_len: 2,
            param_init_scale: 0.0,
            seed: 0,
            bos_id: 0,
            eos_id: 1,
        };
        let mut p = init_model(&cfg).unwrap();
        p.b_o.data_mut()[0] = p_content.ln();
        p.b_o.data_mut()[1] = (1.0 - p_content).ln();
        (p, cfg)
    }

    #[test]
    fn binary_space_has_three_outcomes() {
        let (p, cfg) = two_token_model(0.6);
        let m = Seq2Seq::new(&p, &cfg);
        let space = enumerate_sequences(&m, &[0], 2).unwrap();
        let tokens: Vec<_> = space.sequences.iter().map(|o| o.tokens.clone()).collect();
        assert_eq!(tokens, vec![vec![0, 0], vec![0, 1], vec![1]]);
        assert!((space.total_mass - 1.0).abs() < 1e-12);
        assert!((space.sequences[2].probability - 0.4).abs() < 1e-12);
    }

    #[test]
    fn budget_is_enforced() {
        let cfg = ModelConfig::new(5, 10);
        let p = init_model(&cfg).unwrap();
        let m = Seq2Seq::new(&p, &cfg);
        assert!(matches!(
            enumerate_with_budget(&m, &[4], 7, 1000),
            Err(Error::SpaceTooLarge { .. })
        ));
    }

    #[test]
    fn uniform_model_makes_equal_lengths_equiprobable() {
        let cfg = ModelConfig {
            param_init_scale: 0.0,
            embed_dim: 2,
            hidden_dim: 2,
            ..ModelConfig::new(5, 4)
        };
        let p = init_model(&cfg).unwrap();
        let m = Seq2Seq::new(&p, &cfg);
        let space = enumerate_sequences(&m, &[4], 3).unwrap();
        for o in &space.sequences {
            let expected = 0.25f64.powi(o.tokens.len() as i32);
            assert!((o.probability - expected).abs() < 1e-12);
        }
        assert!((space.total_mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_step_expectation_and_gradient() {
        let (p, cfg) = two_token_model(0.7);
        let m = Seq2Seq::new(&p, &cfg);
        let reward = |y: &[u32]| if y[0] == 0 { 1.0 } else { 0.0 };
        assert!((expected_reward(&m, &[0], 1, reward).unwrap() - 0.7).abs() < 1e-12);
        let g = exact_policy_gradient(m, &[0], 1, reward).unwrap();
        assert!((g.b_o.data()[0] - 0.21).abs() < 1e-12);
        assert!((g.b_o.data()[1] + 0.21).abs() < 1e-12);
        assert!((expected_reward(&m, &[0], 1, |_| 3.0).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_reward_has_zero_gradient() {
        let cfg = ModelConfig {
            embed_dim: 3,
            hidden_dim: 3,
            param_init_scale: 0.8,
            ..ModelConfig::new(6, 4)
        };
        let p = init_model(&cfg).unwrap();
        let g = exact_policy_gradient(Seq2Seq::new(&p, &cfg), &[4, 5], 3, |_| 2.5).unwrap();
        assert!(g.max_abs_diff(&p.zeros_like()) < 1e-10);
    }

    #[test]
    fn best_of_a_table_model() {
        let lm = TableLm {
            rows: vec![vec![0.1, 0.2, 0.7], vec![0.1, 0.6, 0.3]],
            eos: 1,
        };
        let best = exhaustive_best(&lm, &[0], 3).unwrap();
        assert_eq!(best.tokens, vec![2, 1]);
        assert!(best.terminated);
    }
}
