//! Fast self-checks against the brute-force oracles, for sanity-checking a
//! build or a machine. Each suite runs in well under a second.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{BOS, EOS};
use crate::decode::{beam_search, greedy_decode};
use crate::error::Result;
use crate::metrics::{sentence_reward, shaped_rewards, BleuConfig};
use crate::model::{decode_checkpoint, encode_checkpoint, finite_difference_check, init_model, ModelConfig, Seq2Seq};
use crate::oracle::{exact_policy_gradient, exhaustive_best, expected_baseline_term, policy_gradient_fd_check};
use crate::rltrain::blend;
use crate::tensor::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn tiny_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        embed_dim: rng.gen_range(2..=3),
        hidden_dim: rng.gen_range(2..=3),
        param_init_scale: rng.gen_range(0.3..1.0),
        seed: rng.gen(),
        max_decode_len: 3,
        ..ModelConfig::new(rng.gen_range(5..=6), 4)
    }
}

fn random_ids(rng: &mut ChaCha8Rng, len: std::ops::RangeInclusive<usize>, lo: u32, hi: u32) -> Vec<u32> {
    let len = rng.gen_range(len);
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

fn gradient_suite(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let cfg = tiny_config(rng);
        let p = init_model(&cfg)?;
        let src = random_ids(rng, 1..=3, 4, cfg.src_vocab_size as u32);
        let tgt = random_ids(rng, 1..=3, 0, 4);
        let w: Vec<f64> = (0..tgt.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let check = finite_difference_check(Seq2Seq::new(&p, &cfg), &src, &tgt, &w, 1e-5, None, 0)?;
        worst = worst.max(check.max_relative_error);
    }
    Ok(SuiteResult {
        name: "gradient",
        passed: worst <= 1e-4,
        detail: format!("max relative error {worst:.2e} over 10 models"),
    })
}

fn policy_gradient_suite(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    // binary vocabulary with p(content) = 0.7 and reward 1 for it
    let cfg = ModelConfig {
        embed_dim: 2,
        hidden_dim: 2,
        max_decode_len: 2,
        param_init_scale: 0.0,
        bos_id: 0,
        eos_id: 1,
        ..ModelConfig::new(2, 2)
    };
    let mut p = init_model(&cfg)?;
    p.b_o.data_mut()[0] = 0.7f64.ln();
    p.b_o.data_mut()[1] = 0.3f64.ln();
    let g = exact_policy_gradient(Seq2Seq::new(&p, &cfg), &[0], 1, |y| f64::from(y[0] == 0))?;
    let closed_form = (g.b_o.data()[0] - 0.21).abs().max((g.b_o.data()[1] + 0.21).abs());

    let cfg = tiny_config(rng);
    let p = init_model(&cfg)?;
    let reference = [4u32, 5];
    let bleu = BleuConfig::default();
    let fd = policy_gradient_fd_check(
        Seq2Seq::new(&p, &cfg),
        &[4, 5],
        3,
        |y| sentence_reward(y, &reference, &bleu).unwrap_or(0.0),
        1e-5,
        Some(40),
        rng.gen(),
    )?;
    Ok(SuiteResult {
        name: "policy-gradient",
        passed: closed_form < 1e-12 && fd.passes(1e-4),
        detail: format!(
            "closed-form error {closed_form:.1e}, finite-difference error {:.2e}",
            fd.max_relative_error
        ),
    })
}

fn baseline_suite(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let cfg = tiny_config(rng);
    let p = init_model(&cfg)?;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let g = expected_baseline_term(Seq2Seq::new(&p, &cfg), &[4], 3, &b)?;
        worst = worst.max(g.sq_norm().sqrt());
    }
    Ok(SuiteResult {
        name: "baseline-unbiased",
        passed: worst <= 1e-8,
        detail: format!("largest expected baseline term norm {worst:.1e}"),
    })
}

fn reward_suite(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let cfg = BleuConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let reference = random_ids(rng, 1..=8, 4, 9);
        let hyp = random_ids(rng, 0..=8, 4, 9);
        worst = worst.max((sentence_reward(&reference, &reference, &cfg)? - reference.len() as f64).abs());
        let trace = shaped_rewards(&hyp, &reference, &cfg)?;
        worst = worst.max((trace.shaped.iter().sum::<f64>() - trace.terminal).abs());
    }
    Ok(SuiteResult {
        name: "reward",
        passed: worst <= 1e-9,
        detail: format!("largest identity violation {worst:.1e} over 200 pairs"),
    })
}

fn beam_suite(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut failures = 0;
    for _ in 0..10 {
        let cfg = tiny_config(rng);
        let p = init_model(&cfg)?;
        let m = Seq2Seq::new(&p, &cfg);
        let src = random_ids(rng, 2..=2, 4, cfg.src_vocab_size as u32);
        let full = 4usize.pow(3);
        let best = exhaustive_best(&m, &src, 3)?;
        let beam = beam_search(&m, &src, full, 3)?;
        let greedy = greedy_decode(&m, &src, 3)?;
        let one = beam_search(&m, &src, 1, 3)?;
        if beam[0].tokens != best.tokens || one[0].tokens != greedy.tokens {
            failures += 1;
        }
    }
    Ok(SuiteResult {
        name: "beam",
        passed: failures == 0,
        detail: format!("{failures} of 10 models disagree with the exhaustive or greedy result"),
    })
}

fn alpha_suite(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let cfg = tiny_config(rng);
    let a = init_model(&cfg)?;
    let b = init_model(&ModelConfig {
        seed: cfg.seed ^ 1,
        ..cfg.clone()
    })?;
    let mut worst = blend(1.0, &a, &b)
        .max_abs_diff(&a)
        .max(blend(0.0, &a, &b).max_abs_diff(&b));
    let mut mid = a.clone();
    mid.scale(0.3);
    mid.add_scaled(0.7, &b);
    worst = worst.max(blend(0.3, &a, &b).max_abs_diff(&mid));
    Ok(SuiteResult {
        name: "alpha-mix",
        passed: worst <= 1e-12,
        detail: format!("largest deviation {worst:.1e}"),
    })
}

fn checkpoint_suite(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let cfg = tiny_config(rng);
    let p = init_model(&cfg)?;
    let (q, qcfg) = decode_checkpoint(&encode_checkpoint(&p, &cfg))?;
    Ok(SuiteResult {
        name: "checkpoint",
        passed: q == p && qcfg == cfg && cfg.bos_id == BOS && cfg.eos_id == EOS,
        detail: "encode/decode round trip".into(),
    })
}

/// Runs every suite; a suite that errors counts as failed.
pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    type Suite = fn(&mut ChaCha8Rng) -> Result<SuiteResult>;
    let suites: [(&'static str, Suite); 7] = [
        ("gradient", gradient_suite),
        ("policy-gradient", policy_gradient_suite),
        ("baseline-unbiased", baseline_suite),
        ("reward", reward_suite),
        ("beam", beam_suite),
        ("alpha-mix", alpha_suite),
        ("checkpoint", checkpoint_suite),
    ];
    suites
        .into_iter()
        .map(|(name, suite)| {
            suite(&mut rng).unwrap_or_else(|e| SuiteResult {
                name,
                passed: false,
                detail: format!("error: {e}"),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for r in run_all(7) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
