//! Subcommand implementations. Every command reads the same config file and
//! writes into the `--out` directory.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use log::info;

use seqrl::config::RunConfig;
use seqrl::corpus::{build_vocab, load_mono, load_parallel, Dataset, Vocabulary};
use seqrl::decode::translate_all;
use seqrl::metrics::corpus_bleu;
use seqrl::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams, Seq2Seq};
use seqrl::rltrain::{evaluate_bleu, train, TrainMode, TrainOutcome};
use seqrl::semisup::{back_translate, build_unified_dataset, generate_pseudo_targets};
use seqrl::toy::{ToyKind, ToyTask};
use seqrl::verify;

use crate::manifest::Manifest;
use crate::{Cli, Command};

fn missing(key: &str) -> seqrl::Error {
    seqrl::Error::Config {
        key: key.into(),
        reason: "required by this command but not set".into(),
    }
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    path.as_ref().ok_or_else(|| missing(key).into())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Shared state for one invocation.
struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.global.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.global.seed {
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        fs::create_dir_all(&cli.global.out).with_context(|| format!("creating {}", cli.global.out.display()))?;
        Ok(Self {
            cfg,
            out: cli.global.out.clone(),
        })
    }

    /// Vocabularies from the config paths, then from the output directory,
    /// otherwise built from the training corpus.
    fn vocabs(&self) -> Result<(Arc<Vocabulary>, Arc<Vocabulary>)> {
        let d = &self.cfg.data;
        if let (Some(s), Some(t)) = (&d.src_vocab, &d.tgt_vocab) {
            return Ok((Arc::new(Vocabulary::load(s)?), Arc::new(Vocabulary::load(t)?)));
        }
        let (s, t) = (self.out.join("src.vocab"), self.out.join("tgt.vocab"));
        if s.exists() && t.exists() {
            return Ok((Arc::new(Vocabulary::load(s)?), Arc::new(Vocabulary::load(t)?)));
        }
        let (src, tgt) = self.build_vocabs()?;
        Ok((Arc::new(src), Arc::new(tgt)))
    }

    fn build_vocabs(&self) -> Result<(Vocabulary, Vocabulary)> {
        let d = &self.cfg.data;
        let build = |path: &Option<PathBuf>, key: &str| -> Result<Vocabulary> {
            let lines = read_lines(required(path, key)?)?;
            Ok(build_vocab(&lines, self.cfg.vocab_min_count, self.cfg.vocab_max_size))
        };
        Ok((build(&d.train_src, "train_src")?, build(&d.train_tgt, "train_tgt")?))
    }

    fn parallel(
        &self,
        src: &Option<PathBuf>,
        tgt: &Option<PathBuf>,
        name: &str,
        vocabs: &(Arc<Vocabulary>, Arc<Vocabulary>),
    ) -> Result<Dataset> {
        let s = required(src, &format!("{name}_src"))?;
        let t = required(tgt, &format!("{name}_tgt"))?;
        let ds = load_parallel(s, t, vocabs.0.clone(), vocabs.1.clone(), self.cfg.max_len)?;
        info!("loaded {} {name} pairs", ds.len());
        Ok(ds)
    }

    fn train_set(&self, v: &(Arc<Vocabulary>, Arc<Vocabulary>)) -> Result<Dataset> {
        self.parallel(&self.cfg.data.train_src, &self.cfg.data.train_tgt, "train", v)
    }

    fn dev_set(&self, v: &(Arc<Vocabulary>, Arc<Vocabulary>)) -> Result<Dataset> {
        self.parallel(&self.cfg.data.dev_src, &self.cfg.data.dev_tgt, "dev", v)
    }

    fn test_set(&self, v: &(Arc<Vocabulary>, Arc<Vocabulary>)) -> Result<Option<Dataset>> {
        let d = &self.cfg.data;
        if d.test_src.is_none() && d.test_tgt.is_none() {
            return Ok(None);
        }
        self.parallel(&d.test_src, &d.test_tgt, "test", v).map(Some)
    }

    fn data_inputs(&self) -> Vec<PathBuf> {
        let d = &self.cfg.data;
        [
            &d.train_src,
            &d.train_tgt,
            &d.dev_src,
            &d.dev_tgt,
            &d.test_src,
            &d.test_tgt,
        ]
        .into_iter()
        .flatten()
        .cloned()
        .collect()
    }

    fn write_manifest(&self, command: &str, mut inputs: Vec<PathBuf>) -> Result<()> {
        inputs.sort();
        inputs.dedup();
        Manifest::new(command, &self.cfg, &inputs)?.write(&self.out, &self.cfg)
    }

    fn save_vocabs(&self, v: &(Arc<Vocabulary>, Arc<Vocabulary>)) -> Result<()> {
        v.0.save(self.out.join("src.vocab"))?;
        v.1.save(self.out.join("tgt.vocab"))?;
        Ok(())
    }

    fn save_outcome(&self, outcome: &TrainOutcome, model_cfg: &ModelConfig) -> Result<()> {
        save_checkpoint(&outcome.best, model_cfg, self.out.join("model.ckpt"))?;
        save_checkpoint(&outcome.last, model_cfg, self.out.join("last.ckpt"))?;
        fs::write(self.out.join("metrics.csv"), outcome.report.to_csv()).context("writing metrics.csv")?;
        Ok(())
    }
}

/// Loads a checkpoint and the vocabularies it was trained with: the config
/// paths when set, else `src.vocab`/`tgt.vocab` beside the checkpoint.
fn load_model(ctx: &Ctx, path: &Path) -> Result<(ModelParams, ModelConfig, Arc<Vocabulary>, Arc<Vocabulary>)> {
    let (params, model_cfg) =
        load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let d = &ctx.cfg.data;
    let dir = path.parent().unwrap_or(Path::new("."));
    let src = d.src_vocab.clone().unwrap_or_else(|| dir.join("src.vocab"));
    let tgt = d.tgt_vocab.clone().unwrap_or_else(|| dir.join("tgt.vocab"));
    let (src, tgt) = (Vocabulary::load(src)?, Vocabulary::load(tgt)?);
    if src.len() != model_cfg.src_vocab_size || tgt.len() != model_cfg.tgt_vocab_size {
        bail!(
            "vocabulary sizes {}/{} do not match the checkpoint's {}/{}",
            src.len(),
            tgt.len(),
            model_cfg.src_vocab_size,
            model_cfg.tgt_vocab_size
        );
    }
    Ok((params, model_cfg, Arc::new(src), Arc::new(tgt)))
}

fn make_vocab(ctx: &Ctx) -> Result<()> {
    let (src, tgt) = ctx.build_vocabs()?;
    let v = (Arc::new(src), Arc::new(tgt));
    ctx.save_vocabs(&v)?;
    let d = &ctx.cfg.data;
    let inputs = [&d.train_src, &d.train_tgt].into_iter().flatten().cloned().collect();
    ctx.write_manifest("make-vocab", inputs)?;
    println!("source vocabulary: {} entries", v.0.len());
    println!("target vocabulary: {} entries", v.1.len());
    Ok(())
}

fn train_mle(ctx: &Ctx, init: Option<&Path>) -> Result<()> {
    let (model_cfg, init_params, v) = match init {
        Some(path) => {
            let (p, c, s, t) = load_model(ctx, path)?;
            (c, Some(p), (s, t))
        }
        None => {
            let v = ctx.vocabs()?;
            (ctx.cfg.model_config(v.0.len(), v.1.len()), None, v)
        }
    };
    let train_set = ctx.train_set(&v)?;
    let dev_set = ctx.dev_set(&v)?;
    let outcome = train(
        &model_cfg,
        &ctx.cfg.train,
        TrainMode::Mle,
        &train_set,
        &dev_set,
        init_params,
    )?;
    ctx.save_vocabs(&v)?;
    ctx.save_outcome(&outcome, &model_cfg)?;
    let mut inputs = ctx.data_inputs();
    inputs.extend(init.map(Path::to_path_buf));
    ctx.write_manifest("train-mle", inputs)?;
    println!("best dev BLEU {:.2}", outcome.report.best_dev_bleu().unwrap_or(0.0));
    Ok(())
}

fn train_rl(ctx: &Ctx, init: &Path) -> Result<()> {
    let (params, model_cfg, s, t) = load_model(ctx, init)?;
    let v = (s, t);
    let train_set = ctx.train_set(&v)?;
    let dev_set = ctx.dev_set(&v)?;
    let outcome = train(
        &model_cfg,
        &ctx.cfg.train,
        TrainMode::Rl,
        &train_set,
        &dev_set,
        Some(params),
    )?;
    ctx.save_vocabs(&v)?;
    ctx.save_outcome(&outcome, &model_cfg)?;
    let mut inputs = ctx.data_inputs();
    inputs.push(init.to_path_buf());
    ctx.write_manifest("train-rl", inputs)?;
    println!("best dev BLEU {:.2}", outcome.report.best_dev_bleu().unwrap_or(0.0));
    Ok(())
}

fn translate(
    ctx: &Ctx,
    model: &Path,
    input: &Path,
    output: Option<&Path>,
    beam_width: usize,
    max_len: Option<usize>,
) -> Result<()> {
    if beam_width == 0 {
        return Err(seqrl::Error::Config {
            key: "beam-width".into(),
            reason: "must be positive".into(),
        }
        .into());
    }
    let (params, model_cfg, src_vocab, tgt_vocab) = load_model(ctx, model)?;
    let lines = read_lines(input)?;
    // Empty lines stay empty so the output stays aligned with the input.
    let encoded: Vec<Vec<u32>> = lines
        .iter()
        .map(|l| {
            seqrl::corpus::encode_sentence(&src_vocab, l)
                .map(|s| s.into_inner())
                .unwrap_or_default()
        })
        .collect();
    let nonempty: Vec<&[u32]> = encoded.iter().filter(|s| !s.is_empty()).map(Vec::as_slice).collect();
    let max_len = max_len.unwrap_or(model_cfg.max_decode_len);
    let hyps = translate_all(Seq2Seq::new(&params, &model_cfg), &nonempty, beam_width, max_len)?;
    let mut hyps = hyps.into_iter();
    let mut text = String::new();
    for src in &encoded {
        if !src.is_empty() {
            text.push_str(&tgt_vocab.decode(&hyps.next().unwrap_or_default()));
        }
        text.push('\n');
    }
    match output {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Maps whitespace tokens of both files into one shared id space.
fn evaluate(hyp: &Path, reference: &Path) -> Result<()> {
    let hyps = read_lines(hyp)?;
    let refs = read_lines(reference)?;
    let mut ids: HashMap<String, u32> = HashMap::new();
    let mut encode = |line: &str| -> Vec<u32> {
        line.split_whitespace()
            .map(|tok| {
                let next = (seqrl::corpus::NUM_SPECIALS + ids.len()) as u32;
                *ids.entry(tok.to_string()).or_insert(next)
            })
            .collect()
    };
    let h: Vec<Vec<u32>> = hyps.iter().map(|l| encode(l)).collect();
    let r: Vec<Vec<u32>> = refs.iter().map(|l| encode(l)).collect();
    println!("BLEU = {:.2}", corpus_bleu(&h, &r, 4)?);
    Ok(())
}

fn pseudo_targets(ctx: &Ctx, model: &Path, input: &Path) -> Result<()> {
    let (params, model_cfg, src_vocab, tgt_vocab) = load_model(ctx, model)?;
    let mono = load_mono(input, &src_vocab, ctx.cfg.max_len)?;
    let ds = generate_pseudo_targets(
        &Seq2Seq::new(&params, &model_cfg),
        &mono,
        ctx.cfg.pseudo_beam_width,
        model_cfg.max_decode_len,
        src_vocab,
        tgt_vocab,
    )?;
    ds.save(ctx.out.join("pseudo_src"))?;
    ctx.write_manifest("pseudo-targets", vec![model.to_path_buf(), input.to_path_buf()])?;
    println!("{} pseudo pairs from {} sentences", ds.len(), mono.len());
    Ok(())
}

/// The reverse checkpoint maps target to source, so its `src.vocab` is the
/// target language of the forward task.
fn back_translate_cmd(ctx: &Ctx, model: &Path, input: &Path) -> Result<()> {
    let (params, model_cfg, rev_src, rev_tgt) = load_model(ctx, model)?;
    let mono = load_mono(input, &rev_src, ctx.cfg.max_len)?;
    let ds = back_translate(
        &Seq2Seq::new(&params, &model_cfg),
        &mono,
        ctx.cfg.pseudo_beam_width,
        model_cfg.max_decode_len,
        rev_tgt,
        rev_src,
    )?;
    ds.save(ctx.out.join("pseudo_tgt"))?;
    ctx.write_manifest("back-translate", vec![model.to_path_buf(), input.to_path_buf()])?;
    println!("{} back-translated pairs from {} sentences", ds.len(), mono.len());
    Ok(())
}

fn unify(ctx: &Ctx, pseudo_src: Option<&Path>, pseudo_tgt: Option<&Path>) -> Result<()> {
    let v = ctx.vocabs()?;
    let bilingual = ctx.train_set(&v)?;
    let load = |prefix: Option<&Path>| -> Result<Dataset> {
        match prefix {
            Some(p) => Ok(Dataset::load(p, v.0.clone(), v.1.clone())?),
            None => Ok(Dataset::new(v.0.clone(), v.1.clone())),
        }
    };
    let unified = build_unified_dataset(&bilingual, &load(pseudo_src)?, &load(pseudo_tgt)?, ctx.cfg.train.seed)?;
    unified.save(ctx.out.join("unified"))?;
    let mut inputs = ctx.data_inputs();
    for prefix in [pseudo_src, pseudo_tgt].into_iter().flatten() {
        inputs.push(prefix.with_extension("src"));
        inputs.push(prefix.with_extension("tgt"));
    }
    ctx.write_manifest("unify", inputs)?;
    println!("{} pairs in the unified corpus", unified.len());
    Ok(())
}

fn sweep_alpha(ctx: &Ctx, init: Option<&Path>, alphas: &[f64]) -> Result<()> {
    for &a in alphas {
        if !(0.0..=1.0).contains(&a) {
            return Err(seqrl::Error::Config {
                key: "alphas".into(),
                reason: format!("{a} is outside [0, 1]"),
            }
            .into());
        }
    }
    let (params, model_cfg, v) = match init {
        Some(path) => {
            let (p, c, s, t) = load_model(ctx, path)?;
            (p, c, (s, t))
        }
        None => {
            let v = ctx.vocabs()?;
            let model_cfg = ctx.cfg.model_config(v.0.len(), v.1.len());
            let train_set = ctx.train_set(&v)?;
            let dev_set = ctx.dev_set(&v)?;
            info!("training the shared MLE starting point");
            let mle = train(&model_cfg, &ctx.cfg.train, TrainMode::Mle, &train_set, &dev_set, None)?;
            (mle.best, model_cfg, v)
        }
    };
    let train_set = ctx.train_set(&v)?;
    let dev_set = ctx.dev_set(&v)?;
    let test_set = ctx.test_set(&v)?;
    let (width, max_len) = (ctx.cfg.train.eval_beam_width, ctx.cfg.train.max_decode_len);
    let mut csv = String::from("alpha,dev_bleu,test_bleu\n");
    for &alpha in alphas {
        let mut cfg = ctx.cfg.train.clone();
        cfg.alpha = alpha;
        let outcome = train(
            &model_cfg,
            &cfg,
            TrainMode::Rl,
            &train_set,
            &dev_set,
            Some(params.clone()),
        )?;
        let model = Seq2Seq::new(&outcome.best, &model_cfg);
        let dev = evaluate_bleu(model, &dev_set, width, max_len)?;
        let test = match &test_set {
            Some(ts) => format!("{:.2}", evaluate_bleu(model, ts, width, max_len)?),
            None => String::new(),
        };
        info!("alpha {alpha}: dev BLEU {dev:.2}");
        let _ = writeln!(csv, "{alpha},{dev:.2},{test}");
    }
    fs::write(ctx.out.join("sweep_alpha.csv"), &csv).context("writing sweep_alpha.csv")?;
    let mut inputs = ctx.data_inputs();
    inputs.extend(init.map(Path::to_path_buf));
    ctx.write_manifest("sweep-alpha", inputs)?;
    print!("{csv}");
    Ok(())
}

fn gen_toy(
    ctx: &Ctx,
    task: &str,
    pairs: usize,
    alphabet: usize,
    min_len: usize,
    max_len: usize,
    name: &str,
) -> Result<()> {
    let kind = ToyKind::parse(task).ok_or_else(|| seqrl::Error::Config {
        key: "task".into(),
        reason: format!("unknown toy task `{task}`"),
    })?;
    if !(1..=26).contains(&alphabet) {
        return Err(seqrl::Error::Config {
            key: "alphabet".into(),
            reason: "must be between 1 and 26".into(),
        }
        .into());
    }
    if min_len == 0 || min_len > max_len {
        return Err(seqrl::Error::Config {
            key: "min-len".into(),
            reason: "must be positive and at most max-len".into(),
        }
        .into());
    }
    let toy = ToyTask::new(kind, alphabet, min_len, max_len);
    let (src, tgt) = toy.parallel(pairs, ctx.cfg.train.seed);
    for (ext, lines) in [("src", src), ("tgt", tgt)] {
        let path = ctx.out.join(format!("{name}.{ext}"));
        let mut text = lines.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {pairs} pairs to {}", ctx.out.join(name).display());
    Ok(())
}

fn verify_cmd(ctx: &Ctx) -> Result<()> {
    let results = verify::run_all(ctx.cfg.train.seed);
    for r in &results {
        println!("{} {}: {}", if r.passed { "ok  " } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        bail!("{failed} of {} self-checks failed", results.len());
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(seqrl::Error::Config {
                key: "threads".into(),
                reason: "must be positive".into(),
            }
            .into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::MakeVocab => make_vocab(&ctx),
        Command::TrainMle { init } => train_mle(&ctx, init.as_deref()),
        Command::TrainRl { init } => train_rl(&ctx, init),
        Command::Translate {
            model,
            input,
            output,
            beam_width,
            max_len,
        } => translate(&ctx, model, input, output.as_deref(), *beam_width, *max_len),
        Command::Evaluate { hyp, reference } => evaluate(hyp, reference),
        Command::PseudoTargets { model, input } => pseudo_targets(&ctx, model, input),
        Command::BackTranslate { model, input } => back_translate_cmd(&ctx, model, input),
        Command::Unify { pseudo_src, pseudo_tgt } => unify(&ctx, pseudo_src.as_deref(), pseudo_tgt.as_deref()),
        Command::Verify => verify_cmd(&ctx),
        Command::SweepAlpha { init, alphas } => sweep_alpha(&ctx, init.as_deref(), alphas),
        Command::GenToy {
            task,
            pairs,
            alphabet,
            min_len,
            max_len,
            name,
        } => gen_toy(&ctx, task, *pairs, *alphabet, *min_len, *max_len, name),
    }
}
