//! Sentence-level smoothed BLEU reward, per-step shaped rewards, and
//! corpus BLEU for evaluation.
//!
//! The sentence reward starts every n-gram count from one (add-one on both
//! the clipped match count and the hypothesis n-gram count) and scales the
//! result by the reference length, so a perfect hypothesis scores `|ref|`.
//! EOS never takes part in n-gram counting.

use std::collections::HashMap;

use crate::corpus::EOS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuConfig {
    pub max_order: usize,
    pub multiply_by_ref_len: bool,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            max_order: 4,
            multiply_by_ref_len: true,
        }
    }
}

/// Rewards for one sampled hypothesis.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RewardTrace {
    /// Terminal reward `R(ŷ, y)`.
    pub terminal: f64,
    /// `r_t = R(ŷ_{1..t}) − R(ŷ_{1..t-1})`, one entry per decoding step.
    pub shaped: Vec<f64>,
    /// Suffix sums of `shaped`; `returns[0] == terminal`.
    pub returns: Vec<f64>,
    pub baselines: Option<Vec<f64>>,
    /// Per-step policy-gradient weights, filled by the trainer.
    pub advantages: Vec<f64>,
}

/// Tokens up to (not including) the first EOS.
pub fn content(tokens: &[u32]) -> &[u32] {
    let end = tokens.iter().position(|&t| t == EOS).unwrap_or(tokens.len());
    &tokens[..end]
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and total hypothesis n-grams of order `n`.
fn clipped_matches(hyp: &[u32], reference: &[u32], n: usize) -> (usize, usize) {
    let hyp_counts = ngram_counts(hyp, n);
    let ref_counts = ngram_counts(reference, n);
    let matches = hyp_counts
        .iter()
        .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, hyp.len().saturating_sub(n - 1))
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp().min(1.0)
    }
}

/// Smoothed sentence BLEU of `hyp` against `reference`. An empty hypothesis
/// scores exactly zero.
pub fn sentence_reward(hyp: &[u32], reference: &[u32], cfg: &BleuConfig) -> Result<f64> {
    let hyp = content(hyp);
    let reference = content(reference);
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let log_precision: f64 = (1..=cfg.max_order)
        .map(|n| {
            let (matches, total) = clipped_matches(hyp, reference, n);
            ((matches + 1) as f64 / (total + 1) as f64).ln()
        })
        .sum::<f64>()
        / cfg.max_order as f64;
    let scale = if cfg.multiply_by_ref_len {
        reference.len() as f64
    } else {
        1.0
    };
    Ok(brevity_penalty(hyp.len(), reference.len()) * log_precision.exp() * scale)
}

/// Terminal reward plus per-step shaped rewards and their suffix sums. The
/// hypothesis may end in EOS; that step is scored like any other but adds no
/// n-grams, so its shaped reward is zero.
pub fn shaped_rewards(hyp: &[u32], reference: &[u32], cfg: &BleuConfig) -> Result<RewardTrace> {
    if content(reference).is_empty() {
        return Err(Error::EmptyReference);
    }
    let mut shaped = Vec::with_capacity(hyp.len());
    let mut prev = 0.0;
    for t in 1..=hyp.len() {
        let r = sentence_reward(&hyp[..t], reference, cfg)?;
        shaped.push(r - prev);
        prev = r;
    }
    let returns = suffix_sums(&shaped);
    Ok(RewardTrace {
        terminal: prev,
        shaped,
        returns,
        baselines: None,
        advantages: Vec::new(),
    })
}

pub fn suffix_sums(values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    let mut acc = 0.0;
    for (o, v) in out.iter_mut().zip(values).rev() {
        acc += v;
        *o = acc;
    }
    out
}

/// Standard unsmoothed corpus BLEU in `[0, 100]` with pooled clipped counts
/// and a corpus-level brevity penalty.
pub fn corpus_bleu<H, R>(hyps: &[H], refs: &[R], max_order: usize) -> Result<f64>
where
    H: AsRef<[u32]>,
    R: AsRef<[u32]>,
{
    if hyps.len() != refs.len() {
        return Err(Error::ListMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    let mut matches = vec![0usize; max_order];
    let mut totals = vec![0usize; max_order];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let h = content(h.as_ref());
        let r = content(r.as_ref());
        if r.is_empty() {
            return Err(Error::EmptyReference);
        }
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_order {
            let (m, t) = clipped_matches(h, r, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    if matches.contains(&0) {
        return Ok(0.0);
    }
    let log_precision: f64 = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / max_order as f64;
    Ok(100.0 * brevity_penalty(hyp_len, ref_len) * log_precision.exp())
}
