use std::fmt::Write as _;

use log::info;

use super::{baseline_batch, combined_step, mle_step, sample_batch, BaselineParams, Optimizers, TrainConfig};
use crate::corpus::{make_batches, Dataset};
use crate::decode::translate_all;
use crate::error::{Error, Result};
use crate::metrics::corpus_bleu;
use crate::model::{init_model, ModelConfig, ModelParams, Seq2Seq};
use crate::optim::OptimizerState;
use crate::rltrain::baseline_update;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Mle,
    Rl,
}

/// Averages over the steps since the previous evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub l_mle: f64,
    pub l_rl: Option<f64>,
    pub l_com: Option<f64>,
    pub dev_bleu: f64,
    pub mean_reward: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingReport {
    pub records: Vec<EvalRecord>,
    /// Mean sampled reward of every RL step, in order.
    pub step_rewards: Vec<f64>,
}

pub const CSV_HEADER: &str = "step,l_mle,l_rl,l_com,dev_bleu,mean_reward,grad_norm";

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl TrainingReport {
    /// Metrics log with one row per evaluation. Values use Rust's shortest
    /// round-trip formatting; missing values are empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.step,
                r.l_mle,
                cell(r.l_rl),
                cell(r.l_com),
                r.dev_bleu,
                cell(r.mean_reward),
                r.grad_norm
            );
        }
        out
    }

    pub fn best_dev_bleu(&self) -> Option<f64> {
        self.records.iter().map(|r| r.dev_bleu).reduce(f64::max)
    }

    /// Concatenates another phase, shifting its steps after this one's.
    pub fn append(&mut self, other: TrainingReport) {
        let offset = self.records.last().map(|r| r.step).unwrap_or(0);
        self.records.extend(other.records.into_iter().map(|mut r| {
            r.step += offset;
            r
        }));
        self.step_rewards.extend(other.step_rewards);
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainingReport,
    /// Parameters at the best dev evaluation (the initial ones if none ran).
    pub best: ModelParams,
    pub last: ModelParams,
    pub baseline: Option<BaselineParams>,
}

/// Corpus BLEU of top beam hypotheses against the dataset references.
pub fn evaluate_bleu(model: Seq2Seq<'_>, ds: &Dataset, beam_width: usize, max_len: usize) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let srcs: Vec<&[u32]> = ds.pairs.iter().map(|p| p.src.ids()).collect();
    let hyps = translate_all(model, &srcs, beam_width, max_len)?;
    let refs: Vec<&[u32]> = ds.pairs.iter().map(|p| p.tgt.ids()).collect();
    corpus_bleu(&hyps, &refs, 4)
}

#[derive(Default)]
struct Window {
    steps: usize,
    l_mle: f64,
    l_rl: f64,
    l_com: f64,
    reward: f64,
    grad_norm: f64,
}

impl Window {
    fn record(&self, step: usize, dev_bleu: f64, rl: bool) -> EvalRecord {
        let n = self.steps.max(1) as f64;
        let rl_only = |x: f64| rl.then_some(x / n);
        EvalRecord {
            step,
            l_mle: self.l_mle / n,
            l_rl: rl_only(self.l_rl),
            l_com: rl_only(self.l_com),
            dev_bleu,
            mean_reward: rl_only(self.reward),
            grad_norm: self.grad_norm / n,
        }
    }
}

/// Runs MLE or RL training.
///
/// MLE starts from `init` when given, otherwise from a fresh model. RL needs
/// `init`; with a baseline it first fits the regressor for
/// `baseline_pretrain_steps` batches on samples from the frozen model, then
/// runs mixed-objective steps. Dev BLEU is measured every `eval_every` steps
/// and after the last step, and the best-scoring parameters are kept.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mode: TrainMode,
    train_set: &Dataset,
    dev_set: &Dataset,
    init: Option<ModelParams>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = match (mode, init) {
        (_, Some(p)) => p,
        (TrainMode::Mle, None) => init_model(model_cfg)?,
        (TrainMode::Rl, None) => return Err(Error::MissingInitModel),
    };
    let rl = mode == TrainMode::Rl;
    let mut baseline = (rl && cfg.baseline).then(|| {
        BaselineParams::init(
            params.hidden_dim(),
            cfg.baseline_hidden.unwrap_or(params.hidden_dim()),
            cfg.seed ^ 0xBA5E,
        )
    });
    let mut optimizers = Optimizers::new(&params, baseline.as_ref());
    let mut report = TrainingReport::default();
    let mut best = params.clone();
    let mut best_bleu = f64::NEG_INFINITY;

    if cfg.max_epochs == 0 || train_set.is_empty() {
        return Ok(TrainOutcome {
            report,
            last: params,
            best,
            baseline,
        });
    }

    if let Some(bp) = baseline.as_mut() {
        pretrain_baseline(&params, bp, &mut optimizers, train_set, cfg)?;
    }

    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    let mut step = 0usize;
    let mut window = Window::default();
    let mut evaluate =
        |params: &ModelParams, window: &mut Window, step: usize, report: &mut TrainingReport| -> Result<()> {
            let bleu = evaluate_bleu(
                Seq2Seq::with_default_specials(params),
                dev_set,
                cfg.eval_beam_width,
                cfg.max_decode_len,
            )?;
            let rec = window.record(step, bleu, rl);
            info!(
                "step {step}: l_mle {:.4} dev_bleu {:.2} mean_reward {:?}",
                rec.l_mle, bleu, rec.mean_reward
            );
            report.records.push(rec);
            *window = Window::default();
            if bleu > best_bleu {
                best_bleu = bleu;
                best = params.clone();
            }
            Ok(())
        };

    'epochs: for epoch in 0..cfg.max_epochs {
        let batches = make_batches(train_set, cfg.max_tokens, cfg.seed.wrapping_add(epoch as u64))?;
        for batch in &batches {
            if step >= max_steps {
                break 'epochs;
            }
            step += 1;
            match mode {
                TrainMode::Mle => {
                    let (loss, norm) = mle_step(&mut params, &mut optimizers.model, batch, cfg)?;
                    window.l_mle += loss;
                    window.grad_norm += norm;
                }
                TrainMode::Rl => {
                    let stats =
                        combined_step(&mut params, baseline.as_mut(), &mut optimizers, batch, cfg, step as u64)?;
                    window.l_mle += stats.l_mle;
                    window.l_rl += stats.l_rl;
                    window.l_com += stats.l_com;
                    window.reward += stats.mean_reward;
                    window.grad_norm += stats.grad_norm;
                    report.step_rewards.push(stats.mean_reward);
                }
            }
            window.steps += 1;
            if step.is_multiple_of(cfg.eval_every) {
                evaluate(&params, &mut window, step, &mut report)?;
            }
        }
    }
    if window.steps > 0 {
        evaluate(&params, &mut window, step, &mut report)?;
    }
    Ok(TrainOutcome {
        report,
        best,
        last: params,
        baseline,
    })
}

fn pretrain_baseline(
    params: &ModelParams,
    bp: &mut BaselineParams,
    optimizers: &mut Optimizers,
    train_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<()> {
    let model = Seq2Seq::with_default_specials(params);
    let opt = optimizers.baseline.get_or_insert_with(|| OptimizerState::new(&*bp));
    let adam = cfg.adam(cfg.lr_baseline);
    let mut done = 0usize;
    let mut epoch = 0u64;
    while done < cfg.baseline_pretrain_steps {
        let batches = make_batches(train_set, cfg.max_tokens, cfg.seed ^ 0x5EED ^ epoch)?;
        for batch in &batches {
            if done >= cfg.baseline_pretrain_steps {
                break;
            }
            // distinct sampling streams from the RL steps
            let samples = sample_batch(model, Some(bp), batch, cfg, u64::MAX - done as u64)?;
            let (states, targets) = baseline_batch(&samples, cfg.shaping);
            let mse = baseline_update(bp, opt, &states, &targets, &adam)?;
            done += 1;
            if done.is_multiple_of(500) {
                info!("baseline pretrain step {done}: mse {mse:.4}");
            }
        }
        epoch += 1;
    }
    Ok(())
}
