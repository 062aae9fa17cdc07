//! Pseudo-parallel data from monolingual text, and the two recipes that mix it
//! with genuine bilingual pairs.
//!
//! Source-side sentences get a target produced by beam search with a forward
//! model. Target-side sentences get a source produced by a reverse model
//! trained on the swapped bilingual corpus. The sequential recipe uses one
//! side for an MLE phase and the other for an RL phase; the unified recipe
//! packs all three domains into one corpus and runs MLE then RL on it.

use std::sync::Arc;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{Dataset, Origin, SentencePair, TokenSequence, Vocabulary, BOS, PAD};
use crate::decode::beam_search;
use crate::error::{Error, Result};
use crate::model::{ConditionalLm, ModelConfig, ModelParams, Seq2Seq};
use crate::rltrain::{train, TrainConfig, TrainMode, TrainingReport};

/// Beam width used to produce pseudo references.
pub const PSEUDO_BEAM_WIDTH: usize = 4;

/// Top-1 beam content for each input, or `None` when it is unusable as a
/// training sentence (empty, or containing PAD or BOS).
fn decode_all<M>(
    model: &M,
    inputs: &[TokenSequence],
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<Option<TokenSequence>>>
where
    M: ConditionalLm + Sync,
{
    inputs
        .par_iter()
        .map(|s| {
            let hyps = beam_search(model, s.ids(), beam_width, max_len)?;
            Ok(hyps.first().and_then(|h| {
                let c = h.content();
                (!c.is_empty() && c.iter().all(|&t| t != PAD && t != BOS)).then(|| TokenSequence::new(c.to_vec()))
            }))
        })
        .collect()
}

/// Pairs each source-side sentence with the forward model's top beam
/// hypothesis. Sentences whose hypothesis is empty are dropped.
pub fn generate_pseudo_targets<M>(
    model: &M,
    mono_src: &[TokenSequence],
    beam_width: usize,
    max_len: usize,
    src_vocab: Arc<Vocabulary>,
    tgt_vocab: Arc<Vocabulary>,
) -> Result<Dataset>
where
    M: ConditionalLm + Sync,
{
    let hyps = decode_all(model, mono_src, beam_width, max_len)?;
    let mut ds = Dataset::new(src_vocab, tgt_vocab);
    ds.pairs = mono_src
        .iter()
        .zip(hyps)
        .filter_map(|(s, h)| h.map(|t| SentencePair::new(s.clone(), t, Origin::PseudoFromSourceMono)))
        .collect();
    Ok(ds)
}

/// Pairs each target-side sentence with a source decoded by the reverse
/// (target to source) model. The target side is kept verbatim.
pub fn back_translate<M>(
    reverse_model: &M,
    mono_tgt: &[TokenSequence],
    beam_width: usize,
    max_len: usize,
    src_vocab: Arc<Vocabulary>,
    tgt_vocab: Arc<Vocabulary>,
) -> Result<Dataset>
where
    M: ConditionalLm + Sync,
{
    let hyps = decode_all(reverse_model, mono_tgt, beam_width, max_len)?;
    let mut ds = Dataset::new(src_vocab, tgt_vocab);
    ds.pairs = mono_tgt
        .iter()
        .zip(hyps)
        .filter_map(|(t, h)| h.map(|s| SentencePair::new(s, t.clone(), Origin::PseudoFromTargetMono)))
        .collect();
    Ok(ds)
}

/// Concatenates the three domains with equal weight and shuffles under `seed`.
pub fn build_unified_dataset(
    bilingual: &Dataset,
    pseudo_src: &Dataset,
    pseudo_tgt: &Dataset,
    seed: u64,
) -> Result<Dataset> {
    if !bilingual.shares_vocab(pseudo_src) || !bilingual.shares_vocab(pseudo_tgt) {
        return Err(Error::VocabMismatch);
    }
    let mut ds = Dataset::new(bilingual.src_vocab.clone(), bilingual.tgt_vocab.clone());
    ds.pairs = bilingual
        .pairs
        .iter()
        .chain(&pseudo_src.pairs)
        .chain(&pseudo_tgt.pairs)
        .cloned()
        .collect();
    ds.pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(ds)
}

/// Which language a monolingual corpus is written in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonoSide {
    Source,
    Target,
}

#[derive(Debug, Clone)]
pub struct MonoCorpus {
    pub side: MonoSide,
    pub sentences: Vec<TokenSequence>,
}

#[derive(Debug, Clone)]
pub struct RecipeConfig {
    /// Forward model shape; the reverse model swaps the vocabulary sizes.
    pub model: ModelConfig,
    pub mle: TrainConfig,
    pub rl: TrainConfig,
    pub pseudo_beam_width: usize,
    /// Length limit when decoding pseudo sentences.
    pub max_len: usize,
    /// In the sequential recipe, fit the phase-two pseudo data with MLE
    /// before the RL phase starts.
    pub pseudo_warm_start: bool,
}

impl RecipeConfig {
    pub fn new(model: ModelConfig, mle: TrainConfig, rl: TrainConfig) -> Self {
        let max_len = model.max_decode_len;
        Self {
            model,
            mle,
            rl,
            pseudo_beam_width: PSEUDO_BEAM_WIDTH,
            max_len,
            pseudo_warm_start: false,
        }
    }

    fn reverse_model(&self) -> ModelConfig {
        ModelConfig {
            src_vocab_size: self.model.tgt_vocab_size,
            tgt_vocab_size: self.model.src_vocab_size,
            seed: self.model.seed.wrapping_add(1),
            ..self.model.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct RecipeOutcome {
    /// All forward-model phases, concatenated in order.
    pub report: TrainingReport,
    /// Best dev BLEU of the MLE model trained on bilingual data only.
    pub bilingual_bleu: f64,
    /// Best dev BLEU of the reverse model on the swapped dev set, if one was trained.
    pub reverse_bleu: Option<f64>,
    /// Dev BLEU of the returned parameters.
    pub final_bleu: f64,
    pub params: ModelParams,
    /// Pseudo-parallel corpora in the order they were generated.
    pub pseudo: Vec<Dataset>,
}

/// The bilingual-only models every recipe starts from.
struct BaseModels {
    report: TrainingReport,
    forward: ModelParams,
    forward_bleu: f64,
    reverse: Option<ModelParams>,
    reverse_bleu: Option<f64>,
}

fn best_bleu(report: &TrainingReport) -> f64 {
    report.best_dev_bleu().unwrap_or(0.0)
}

fn train_base(cfg: &RecipeConfig, bilingual: &Dataset, dev: &Dataset, need_reverse: bool) -> Result<BaseModels> {
    let fwd = train(&cfg.model, &cfg.mle, TrainMode::Mle, bilingual, dev, None)?;
    let forward_bleu = best_bleu(&fwd.report);
    info!("bilingual MLE: dev BLEU {forward_bleu:.2}");
    let (reverse, reverse_bleu) = if need_reverse {
        let rev = train(
            &cfg.reverse_model(),
            &cfg.mle,
            TrainMode::Mle,
            &bilingual.reversed(),
            &dev.reversed(),
            None,
        )?;
        let bleu = best_bleu(&rev.report);
        info!("reverse MLE: dev BLEU {bleu:.2}");
        (Some(rev.best), Some(bleu))
    } else {
        (None, None)
    };
    Ok(BaseModels {
        report: fwd.report,
        forward: fwd.best,
        forward_bleu,
        reverse,
        reverse_bleu,
    })
}

fn pseudo_data(cfg: &RecipeConfig, base: &BaseModels, mono: &MonoCorpus, bilingual: &Dataset) -> Result<Dataset> {
    let (sv, tv) = (bilingual.src_vocab.clone(), bilingual.tgt_vocab.clone());
    let ds = match mono.side {
        MonoSide::Source => generate_pseudo_targets(
            &Seq2Seq::with_default_specials(&base.forward),
            &mono.sentences,
            cfg.pseudo_beam_width,
            cfg.max_len,
            sv,
            tv,
        )?,
        MonoSide::Target => match &base.reverse {
            Some(rev) => back_translate(
                &Seq2Seq::with_default_specials(rev),
                &mono.sentences,
                cfg.pseudo_beam_width,
                cfg.max_len,
                sv,
                tv,
            )?,
            None => Dataset::new(sv, tv),
        },
    };
    info!("{} pseudo pairs from {} sentences", ds.len(), mono.sentences.len());
    Ok(ds)
}

fn needs_reverse(corpora: &[&MonoCorpus]) -> bool {
    corpora
        .iter()
        .any(|m| m.side == MonoSide::Target && !m.sentences.is_empty())
}

/// Bilingual pairs plus one pseudo corpus, shuffled.
fn with_bilingual(bilingual: &Dataset, extra: &Dataset, seed: u64) -> Result<Dataset> {
    let empty = Dataset::new(bilingual.src_vocab.clone(), bilingual.tgt_vocab.clone());
    build_unified_dataset(bilingual, extra, &empty, seed)
}

/// MLE on bilingual plus `mono_a` pseudo data, then RL on bilingual plus
/// `mono_b` pseudo data starting from the best MLE checkpoint.
///
/// Pseudo data for both phases comes from the bilingual-only models, and the
/// first phase starts from the bilingual MLE model. With
/// `pseudo_warm_start`, an MLE pass over the second phase's data runs before RL.
pub fn sequential_recipe(
    cfg: &RecipeConfig,
    bilingual: &Dataset,
    dev: &Dataset,
    mono_a: &MonoCorpus,
    mono_b: &MonoCorpus,
) -> Result<RecipeOutcome> {
    let base = train_base(cfg, bilingual, dev, needs_reverse(&[mono_a, mono_b]))?;
    let a_data = pseudo_data(cfg, &base, mono_a, bilingual)?;
    let b_data = pseudo_data(cfg, &base, mono_b, bilingual)?;

    let mut report = base.report.clone();
    let phase1_data = with_bilingual(bilingual, &a_data, cfg.mle.seed)?;
    let phase1 = train(
        &cfg.model,
        &cfg.mle,
        TrainMode::Mle,
        &phase1_data,
        dev,
        Some(base.forward.clone()),
    )?;
    info!("sequential phase 1: dev BLEU {:.2}", best_bleu(&phase1.report));
    report.append(phase1.report);

    let phase2_data = with_bilingual(bilingual, &b_data, cfg.rl.seed)?;
    let mut init = phase1.best;
    if cfg.pseudo_warm_start && !b_data.is_empty() {
        let warm = train(&cfg.model, &cfg.mle, TrainMode::Mle, &phase2_data, dev, Some(init))?;
        report.append(warm.report);
        init = warm.best;
    }
    let phase2 = train(&cfg.model, &cfg.rl, TrainMode::Rl, &phase2_data, dev, Some(init))?;
    let final_bleu = best_bleu(&phase2.report);
    info!("sequential phase 2: dev BLEU {final_bleu:.2}");
    report.append(phase2.report);
    Ok(RecipeOutcome {
        report,
        bilingual_bleu: base.forward_bleu,
        reverse_bleu: base.reverse_bleu,
        final_bleu,
        params: phase2.best,
        pseudo: vec![a_data, b_data],
    })
}

/// MLE on the three-domain corpus, warm-started from the bilingual model, then
/// RL on the same corpus.
pub fn unified_recipe(
    cfg: &RecipeConfig,
    bilingual: &Dataset,
    dev: &Dataset,
    mono_src: &[TokenSequence],
    mono_tgt: &[TokenSequence],
) -> Result<RecipeOutcome> {
    let src = MonoCorpus {
        side: MonoSide::Source,
        sentences: mono_src.to_vec(),
    };
    let tgt = MonoCorpus {
        side: MonoSide::Target,
        sentences: mono_tgt.to_vec(),
    };
    let base = train_base(cfg, bilingual, dev, needs_reverse(&[&tgt]))?;
    let pseudo_src = pseudo_data(cfg, &base, &src, bilingual)?;
    let pseudo_tgt = pseudo_data(cfg, &base, &tgt, bilingual)?;
    let unified = build_unified_dataset(bilingual, &pseudo_src, &pseudo_tgt, cfg.mle.seed)?;

    let mut report = base.report.clone();
    let mle = train(
        &cfg.model,
        &cfg.mle,
        TrainMode::Mle,
        &unified,
        dev,
        Some(base.forward.clone()),
    )?;
    info!("unified MLE: dev BLEU {:.2}", best_bleu(&mle.report));
    report.append(mle.report);
    let rl = train(&cfg.model, &cfg.rl, TrainMode::Rl, &unified, dev, Some(mle.best))?;
    let final_bleu = best_bleu(&rl.report);
    info!("unified RL: dev BLEU {final_bleu:.2}");
    report.append(rl.report);
    Ok(RecipeOutcome {
        report,
        bilingual_bleu: base.forward_bleu,
        reverse_bleu: base.reverse_bleu,
        final_bleu,
        params: rl.best,
        pseudo: vec![pseudo_src, pseudo_tgt],
    })
}
