//! MLE and REINFORCE training with optional reward shaping, a learned
//! baseline, and the linear MLE/RL objective mix.
//!
//! Sign convention: everything here minimizes. The MLE loss is the per-token
//! mean negative log-likelihood of the references; the RL surrogate loss is
//! `−(1/|B|) Σ_pairs Σ_t w_t·log p(ŷ_t | x, ŷ_<t)` with per-step weights `w_t`
//! from [`reinforce_advantages`]; the mixed loss is
//! `α·L_mle + (1 − α)·L_rl`.

mod baseline;
mod train;

pub use baseline::{baseline_loss, baseline_predict, baseline_update, BaselineParams};
pub use train::{evaluate_bleu, train, EvalRecord, TrainMode, TrainOutcome, TrainingReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{Batch, EOS};
use crate::decode::{beam_search, multinomial_sample, Hypothesis};
use crate::error::{Error, Result};
use crate::metrics::{shaped_rewards, BleuConfig, RewardTrace};
use crate::model::{Gradients, ModelParams, Seq2Seq};
use crate::optim::{AdamConfig, OptimizerState};
use crate::tensor::ParamSet;

/// How `ŷ` is generated for the reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Top hypothesis of a beam of this width.
    Beam { width: usize },
    /// One ancestral sample per source sentence.
    Multinomial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the MLE term in the mixed objective.
    pub alpha: f64,
    pub sampling: Sampling,
    pub shaping: bool,
    pub baseline: bool,
    pub lr_mle: f64,
    pub lr_rl: f64,
    pub lr_baseline: f64,
    /// Hidden width of the baseline regressor; `None` uses the decoder width.
    pub baseline_hidden: Option<usize>,
    pub baseline_pretrain_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    /// Optional cap on optimizer steps across epochs.
    pub max_steps: Option<usize>,
    pub eval_every: usize,
    pub seed: u64,
    pub reward: BleuConfig,
    /// Token budget per batch, applied to each side separately.
    pub max_tokens: usize,
    pub eval_beam_width: usize,
    pub max_decode_len: usize,
    /// Use every hypothesis of the beam instead of the top one (beam sampling only).
    pub beam_all_k: bool,
    /// Rescale the update when its global norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            sampling: Sampling::Multinomial,
            shaping: true,
            baseline: false,
            lr_mle: 1e-3,
            lr_rl: 1e-4,
            lr_baseline: 1e-3,
            baseline_hidden: None,
            baseline_pretrain_steps: 2000,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            max_epochs: 10,
            max_steps: None,
            eval_every: 100,
            seed: 1,
            reward: BleuConfig::default(),
            max_tokens: 4096,
            eval_beam_width: 6,
            max_decode_len: 20,
            beam_all_k: false,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", "must lie in [0, 1]"));
        }
        for (key, lr) in [
            ("lr_mle", self.lr_mle),
            ("lr_rl", self.lr_rl),
            ("lr_baseline", self.lr_baseline),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if let Sampling::Beam { width: 0 } = self.sampling {
            return Err(Error::config("sampling", "beam width must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be positive"));
        }
        if self.eval_beam_width == 0 {
            return Err(Error::config("eval_beam_width", "must be positive"));
        }
        if self.max_decode_len == 0 {
            return Err(Error::config("max_decode_len", "must be positive"));
        }
        if self.reward.max_order == 0 {
            return Err(Error::config("bleu_max_order", "must be positive"));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Per-step policy-gradient weights for one sample.
///
/// With shaping the weight at step `t` is the return `G_t = Σ_{τ≥t} r_τ`,
/// otherwise the terminal reward `R` at every step; a baseline, when given,
/// is subtracted step by step. The returned trace carries the rewards and the
/// weights in `advantages`.
pub fn reinforce_advantages(
    hyp: &Hypothesis,
    reference: &[u32],
    cfg: &TrainConfig,
    baselines: Option<&[f64]>,
) -> Result<RewardTrace> {
    let mut trace = shaped_rewards(&hyp.tokens, reference, &cfg.reward)?;
    fill_advantages(&mut trace, cfg.shaping, baselines)?;
    Ok(trace)
}

/// Fills `trace.advantages` from an already computed reward trace.
pub fn fill_advantages(trace: &mut RewardTrace, shaping: bool, baselines: Option<&[f64]>) -> Result<()> {
    let steps = trace.shaped.len();
    let mut weights = if shaping {
        trace.returns.clone()
    } else {
        vec![trace.terminal; steps]
    };
    if let Some(b) = baselines {
        if b.len() != steps {
            return Err(Error::WeightMismatch {
                expected: steps,
                got: b.len(),
            });
        }
        weights.iter_mut().zip(b).for_each(|(w, b)| *w -= b);
        trace.baselines = Some(b.to_vec());
    }
    trace.advantages = weights;
    Ok(())
}

/// Regression targets for the baseline: returns with shaping, otherwise the
/// terminal reward at every step.
pub fn baseline_targets(trace: &RewardTrace, shaping: bool) -> Vec<f64> {
    if shaping {
        trace.returns.clone()
    } else {
        vec![trace.terminal; trace.shaped.len()]
    }
}

/// Single-sample policy-gradient estimate `Σ_t w_t ∇ log p(ŷ_t | x, ŷ_<t)`
/// (an ascent direction).
pub fn policy_gradient_estimate(
    model: Seq2Seq<'_>,
    src: &[u32],
    hyp: &Hypothesis,
    weights: &[f64],
) -> Result<Gradients> {
    let (mut g, _) = model.gradient(src, &hyp.tokens, weights)?;
    g.scale(-1.0);
    Ok(g)
}

fn with_eos(tgt: &[u32]) -> Vec<u32> {
    let mut y = tgt.to_vec();
    y.push(EOS);
    y
}

fn sum_gradients(template: &ModelParams, parts: Vec<(Gradients, f64)>) -> (Gradients, f64) {
    let mut total = template.zeros_like();
    let mut obj = 0.0;
    for (g, o) in parts {
        total.add_scaled(1.0, &g);
        obj += o;
    }
    (total, obj)
}

/// Gradient of the per-token mean NLL of the batch references (EOS included).
pub fn mle_gradient(model: Seq2Seq<'_>, batch: &Batch<'_>) -> Result<(Gradients, f64)> {
    assert!(!batch.is_empty(), "batch must be non-empty");
    let parts = batch
        .pairs
        .par_iter()
        .map(|pair| {
            let y = with_eos(pair.tgt.ids());
            model.gradient(pair.src.ids(), &y, &vec![1.0; y.len()])
        })
        .collect::<Result<Vec<_>>>()?;
    let tokens = (batch.tgt_tokens() + batch.len()) as f64;
    let (mut g, nll) = sum_gradients(model.params, parts);
    g.scale(1.0 / tokens);
    Ok((g, nll / tokens))
}

/// One Adam step on the MLE loss at `cfg.lr_mle`. Returns the loss before
/// the update and the unclipped gradient norm.
pub fn mle_step(
    params: &mut ModelParams,
    optimizer: &mut OptimizerState,
    batch: &Batch<'_>,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let (mut g, loss) = mle_gradient(Seq2Seq::with_default_specials(params), batch)?;
    if !loss.is_finite() || !g.all_finite() {
        return Err(Error::DivergedTraining("MLE loss"));
    }
    let norm = clip(&mut g, cfg.clip_norm);
    optimizer.update(params, &g, &cfg.adam(cfg.lr_mle));
    Ok((loss, norm))
}

fn clip(g: &mut Gradients, max_norm: Option<f64>) -> f64 {
    let norm = g.sq_norm().sqrt();
    if let Some(max) = max_norm {
        if norm > max {
            g.scale(max / norm);
        }
    }
    norm
}

/// Seed of the sampling stream for one sentence of one step.
pub fn sentence_seed(seed: u64, step: u64, index: u64) -> u64 {
    let mut x = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

/// A generated hypothesis with its rewards and per-step weights.
#[derive(Debug, Clone)]
pub struct Sample {
    pub hyp: Hypothesis,
    pub trace: RewardTrace,
}

/// Generates `ŷ` for every pair of the batch per `cfg.sampling` and scores it
/// against the pair's reference.
pub fn sample_batch(
    model: Seq2Seq<'_>,
    baseline: Option<&BaselineParams>,
    batch: &Batch<'_>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<Vec<Vec<Sample>>> {
    batch
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let src = pair.src.ids();
            let hyps = match cfg.sampling {
                Sampling::Multinomial => {
                    let mut rng = ChaCha8Rng::seed_from_u64(sentence_seed(cfg.seed, step, i as u64));
                    vec![multinomial_sample(&model, src, cfg.max_decode_len, &mut rng)?]
                }
                Sampling::Beam { width } => {
                    let mut hyps = beam_search(&model, src, width, cfg.max_decode_len)?;
                    if !cfg.beam_all_k {
                        hyps.truncate(1);
                    }
                    hyps
                }
            };
            hyps.into_iter()
                .map(|hyp| {
                    let predicted = baseline.map(|bp| baseline_predict(bp, &hyp.decoder_states));
                    let trace = reinforce_advantages(&hyp, pair.tgt.ids(), cfg, predicted.as_deref())?;
                    Ok(Sample { hyp, trace })
                })
                .collect()
        })
        .collect()
}

/// Gradient of the RL surrogate loss for already drawn samples. Each pair
/// contributes the mean over its samples; pairs are averaged.
pub fn rl_gradient(model: Seq2Seq<'_>, batch: &Batch<'_>, samples: &[Vec<Sample>]) -> Result<(Gradients, f64)> {
    assert_eq!(batch.len(), samples.len());
    let parts = batch
        .pairs
        .par_iter()
        .zip(samples.par_iter())
        .map(|(pair, per_pair)| {
            let mut g = model.params.zeros_like();
            let mut obj = 0.0;
            let k = per_pair.len() as f64;
            for s in per_pair {
                let w: Vec<f64> = s.trace.advantages.iter().map(|a| a / k).collect();
                obj += model.backward(pair.src.ids(), &s.hyp.tokens, &w, &mut g)?;
            }
            Ok((g, obj))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut g, obj) = sum_gradients(model.params, parts);
    let n = batch.len() as f64;
    g.scale(1.0 / n);
    Ok((g, obj / n))
}

/// `α·g_mle + (1 − α)·g_rl`.
pub fn blend(alpha: f64, g_mle: &Gradients, g_rl: &Gradients) -> Gradients {
    let mut g = g_mle.zeros_like();
    g.add_scaled(alpha, g_mle);
    g.add_scaled(1.0 - alpha, g_rl);
    g
}

/// All pieces of one mixed-objective gradient evaluation.
#[derive(Debug, Clone)]
pub struct CombinedGradient {
    pub mle: Gradients,
    pub rl: Gradients,
    pub blended: Gradients,
    pub l_mle: f64,
    pub l_rl: f64,
    pub l_com: f64,
    pub mean_reward: f64,
    pub samples: Vec<Vec<Sample>>,
}

pub fn combined_gradient(
    model: Seq2Seq<'_>,
    baseline: Option<&BaselineParams>,
    batch: &Batch<'_>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<CombinedGradient> {
    let samples = sample_batch(model, baseline, batch, cfg, step)?;
    let (mle, l_mle) = mle_gradient(model, batch)?;
    let (rl, l_rl) = rl_gradient(model, batch, &samples)?;
    let blended = blend(cfg.alpha, &mle, &rl);
    let (reward_sum, count) = samples
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, c), x| (s + x.trace.terminal, c + 1));
    Ok(CombinedGradient {
        mle,
        rl,
        blended,
        l_mle,
        l_rl,
        l_com: cfg.alpha * l_mle + (1.0 - cfg.alpha) * l_rl,
        mean_reward: reward_sum / count.max(1) as f64,
        samples,
    })
}

/// Translation-model and baseline optimizers.
#[derive(Debug, Clone)]
pub struct Optimizers {
    pub model: OptimizerState,
    pub baseline: Option<OptimizerState>,
}

impl Optimizers {
    pub fn new(params: &ModelParams, baseline: Option<&BaselineParams>) -> Self {
        Self {
            model: OptimizerState::new(params),
            baseline: baseline.map(OptimizerState::new),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub l_mle: f64,
    pub l_rl: f64,
    pub l_com: f64,
    pub mean_reward: f64,
    pub grad_norm: f64,
    /// Baseline regression error before its update, when a baseline is trained.
    pub baseline_mse: Option<f64>,
}

/// One update of the mixed objective at `cfg.lr_rl`, followed by one
/// baseline update on the same samples when a baseline is in use.
pub fn combined_step(
    params: &mut ModelParams,
    baseline: Option<&mut BaselineParams>,
    optimizers: &mut Optimizers,
    batch: &Batch<'_>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepStats> {
    let cg = combined_gradient(
        Seq2Seq::with_default_specials(params),
        baseline.as_deref(),
        batch,
        cfg,
        step,
    )?;
    let CombinedGradient {
        mut blended,
        l_mle,
        l_rl,
        l_com,
        mean_reward,
        samples,
        ..
    } = cg;
    if !l_com.is_finite() || !blended.all_finite() {
        return Err(Error::DivergedTraining("mixed objective"));
    }
    let grad_norm = clip(&mut blended, cfg.clip_norm);
    optimizers.model.update(params, &blended, &cfg.adam(cfg.lr_rl));

    let mut baseline_mse = None;
    if let Some(bp) = baseline {
        let opt = optimizers.baseline.get_or_insert_with(|| OptimizerState::new(&*bp));
        let (states, targets) = baseline_batch(&samples, cfg.shaping);
        baseline_mse = Some(baseline_update(bp, opt, &states, &targets, &cfg.adam(cfg.lr_baseline))?);
    }
    Ok(StepStats {
        l_mle,
        l_rl,
        l_com,
        mean_reward,
        grad_norm,
        baseline_mse,
    })
}

/// Decoder states and regression targets of all samples, flattened.
pub fn baseline_batch(samples: &[Vec<Sample>], shaping: bool) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut states = Vec::new();
    let mut targets = Vec::new();
    for s in samples.iter().flatten() {
        states.extend(s.hyp.decoder_states.iter().cloned());
        targets.extend(baseline_targets(&s.trace, shaping));
    }
    (states, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Origin, SentencePair, TokenSequence};
    use crate::model::{init_model, ModelConfig};

    fn pairs(data: &[(&[u32], &[u32])]) -> Vec<SentencePair> {
        data.iter()
            .map(|(s, t)| {
                SentencePair::new(
                    TokenSequence::new(s.to_vec()),
                    TokenSequence::new(t.to_vec()),
                    Origin::Bilingual,
                )
            })
            .collect()
    }

    fn hyp(tokens: Vec<u32>) -> Hypothesis {
        let n = tokens.len();
        Hypothesis {
            terminated: tokens.last() == Some(&EOS),
            tokens,
            step_log_probs: vec![-0.1; n],
            score: -0.1 * n as f64,
            decoder_states: vec![vec![0.0]; n],
        }
    }

    #[test]
    fn terminal_reward_without_shaping() {
        let cfg = TrainConfig {
            shaping: false,
            ..TrainConfig::default()
        };
        let tr = reinforce_advantages(&hyp(vec![4, 6, EOS]), &[4, 5], &cfg, None).unwrap();
        assert_eq!(tr.advantages, vec![tr.terminal; 3]);
    }

    #[test]
    fn shaped_first_weight_is_terminal() {
        let cfg = TrainConfig::default();
        let tr = reinforce_advantages(&hyp(vec![4, 5, 6, EOS]), &[4, 5, 7], &cfg, None).unwrap();
        assert!((tr.advantages[0] - tr.terminal).abs() < 1e-12);
    }

    #[test]
    fn shaped_weights_subtract_baselines() {
        // Prefix rewards against ref [a, b]: R([a]) = 2e^{-1}, R([a, b]) = 2, R([a, b, EOS]) = 2.
        let cfg = TrainConfig::default();
        let b = [0.5, 0.25, -1.0];
        let tr = reinforce_advantages(&hyp(vec![4, 5, EOS]), &[4, 5], &cfg, Some(&b)).unwrap();
        let expected = [2.0 - 0.5, (2.0 - 2.0 * (-1.0f64).exp()) - 0.25, 0.0 + 1.0];
        for (a, e) in tr.advantages.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
        assert!(matches!(
            reinforce_advantages(&hyp(vec![4, EOS]), &[4], &cfg, Some(&b)),
            Err(Error::WeightMismatch { .. })
        ));
    }

    fn uniform_model(v: usize) -> (ModelParams, ModelConfig) {
        let cfg = ModelConfig {
            embed_dim: 3,
            hidden_dim: 3,
            param_init_scale: 0.0,
            ..ModelConfig::new(6, v)
        };
        (init_model(&cfg).unwrap(), cfg)
    }

    #[test]
    fn first_mle_loss_of_a_uniform_model_is_log_v() {
        let (mut p, _) = uniform_model(4);
        let data = pairs(&[(&[4, 5], &[3, 3]), (&[5], &[3])]);
        let batch = Batch {
            pairs: data.iter().collect(),
        };
        let mut opt = OptimizerState::new(&p);
        let (loss, _) = mle_step(&mut p, &mut opt, &batch, &TrainConfig::default()).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn mle_overfits_a_single_pair() {
        let cfg = ModelConfig {
            embed_dim: 8,
            hidden_dim: 16,
            ..ModelConfig::new(8, 8)
        };
        let mut p = init_model(&cfg).unwrap();
        let data = pairs(&[(&[4, 5, 6], &[6, 5, 4])]);
        let batch = Batch {
            pairs: data.iter().collect(),
        };
        let tc = TrainConfig {
            lr_mle: 1e-2,
            ..TrainConfig::default()
        };
        let mut opt = OptimizerState::new(&p);
        let mut loss = f64::INFINITY;
        for _ in 0..500 {
            loss = mle_step(&mut p, &mut opt, &batch, &tc).unwrap().0;
        }
        assert!(loss * 4.0 < 0.1, "sentence NLL {}", loss * 4.0);
    }

    #[test]
    fn blend_endpoints() {
        let (p, _) = uniform_model(4);
        let mut a = p.zeros_like();
        a.b_o.data_mut()[0] = 1.0;
        let mut b = p.zeros_like();
        b.w_o.data_mut()[1] = -2.0;
        assert_eq!(blend(1.0, &a, &b), a);
        assert_eq!(blend(0.0, &a, &b), b);
    }

    #[test]
    fn sentence_seeds_differ() {
        assert_ne!(sentence_seed(1, 0, 0), sentence_seed(1, 0, 1));
        assert_ne!(sentence_seed(1, 0, 0), sentence_seed(1, 1, 0));
        assert_eq!(sentence_seed(3, 4, 5), sentence_seed(3, 4, 5));
    }

    #[test]
    fn config_validation_names_the_key() {
        let bad = TrainConfig {
            alpha: 1.5,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "alpha"));
    }
}
