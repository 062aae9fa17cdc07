//! Experiment configuration files.
//!
//! One `key = value` per line, `#` starts a comment, blank lines are ignored.
//! Every key is optional and unknown keys are rejected. Optional values take
//! `none`; sampling is `multinomial` or `beam:<width>`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::BleuConfig;
use crate::model::ModelConfig;
use crate::rltrain::{Sampling, TrainConfig};
use crate::semisup::PSEUDO_BEAM_WIDTH;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataConfig {
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub dev_src: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
    pub test_src: Option<PathBuf>,
    pub test_tgt: Option<PathBuf>,
    pub mono_src: Option<PathBuf>,
    pub mono_tgt: Option<PathBuf>,
    pub src_vocab: Option<PathBuf>,
    pub tgt_vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    /// Sentences longer than this are dropped when loading.
    pub max_len: usize,
    pub vocab_min_count: usize,
    /// Vocabulary size including the four special tokens.
    pub vocab_max_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub param_init_scale: f64,
    pub train: TrainConfig,
    pub pseudo_beam_width: usize,
    pub pseudo_warm_start: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::new(0, 0);
        Self {
            data: DataConfig::default(),
            max_len: 50,
            vocab_min_count: 1,
            vocab_max_size: 30_000,
            embed_dim: model.embed_dim,
            hidden_dim: model.hidden_dim,
            param_init_scale: model.param_init_scale,
            train: TrainConfig::default(),
            pseudo_beam_width: PSEUDO_BEAM_WIDTH,
            pseudo_warm_start: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (value != "none").then(|| PathBuf::from(value))
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(line, "expected `key = value`"));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "train_src" => d.train_src = parse_path(value),
            "train_tgt" => d.train_tgt = parse_path(value),
            "dev_src" => d.dev_src = parse_path(value),
            "dev_tgt" => d.dev_tgt = parse_path(value),
            "test_src" => d.test_src = parse_path(value),
            "test_tgt" => d.test_tgt = parse_path(value),
            "mono_src" => d.mono_src = parse_path(value),
            "mono_tgt" => d.mono_tgt = parse_path(value),
            "src_vocab" => d.src_vocab = parse_path(value),
            "tgt_vocab" => d.tgt_vocab = parse_path(value),
            "max_len" => self.max_len = parse(key, value)?,
            "vocab_min_count" => self.vocab_min_count = parse(key, value)?,
            "vocab_max_size" => self.vocab_max_size = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "param_init_scale" => self.param_init_scale = parse(key, value)?,
            "alpha" => t.alpha = parse(key, value)?,
            "sampling" => t.sampling = parse_sampling(value)?,
            "shaping" => t.shaping = parse(key, value)?,
            "baseline" => t.baseline = parse(key, value)?,
            "lr_mle" => t.lr_mle = parse(key, value)?,
            "lr_rl" => t.lr_rl = parse(key, value)?,
            "lr_baseline" => t.lr_baseline = parse(key, value)?,
            "baseline_hidden" => t.baseline_hidden = parse_opt(key, value)?,
            "baseline_pretrain_steps" => t.baseline_pretrain_steps = parse(key, value)?,
            "adam_beta1" => t.adam_beta1 = parse(key, value)?,
            "adam_beta2" => t.adam_beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "max_steps" => t.max_steps = parse_opt(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "bleu_max_order" => t.reward.max_order = parse(key, value)?,
            "reward_times_ref_len" => t.reward.multiply_by_ref_len = parse(key, value)?,
            "max_tokens" => t.max_tokens = parse(key, value)?,
            "eval_beam_width" => t.eval_beam_width = parse(key, value)?,
            "max_decode_len" => t.max_decode_len = parse(key, value)?,
            "beam_all_k" => t.beam_all_k = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse_opt(key, value)?,
            "pseudo_beam_width" => self.pseudo_beam_width = parse(key, value)?,
            "pseudo_warm_start" => self.pseudo_warm_start = parse(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        for (key, v) in [
            ("max_len", self.max_len),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("pseudo_beam_width", self.pseudo_beam_width),
            ("max_tokens", self.train.max_tokens),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(self.param_init_scale > 0.0 && self.param_init_scale.is_finite()) {
            return Err(Error::config("param_init_scale", "must be positive"));
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let d = &self.data;
        vec![
            ("train_src", show_path(&d.train_src)),
            ("train_tgt", show_path(&d.train_tgt)),
            ("dev_src", show_path(&d.dev_src)),
            ("dev_tgt", show_path(&d.dev_tgt)),
            ("test_src", show_path(&d.test_src)),
            ("test_tgt", show_path(&d.test_tgt)),
            ("mono_src", show_path(&d.mono_src)),
            ("mono_tgt", show_path(&d.mono_tgt)),
            ("src_vocab", show_path(&d.src_vocab)),
            ("tgt_vocab", show_path(&d.tgt_vocab)),
            ("max_len", self.max_len.to_string()),
            ("vocab_min_count", self.vocab_min_count.to_string()),
            ("vocab_max_size", self.vocab_max_size.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("param_init_scale", self.param_init_scale.to_string()),
            ("alpha", t.alpha.to_string()),
            ("sampling", show_sampling(t.sampling)),
            ("shaping", t.shaping.to_string()),
            ("baseline", t.baseline.to_string()),
            ("lr_mle", t.lr_mle.to_string()),
            ("lr_rl", t.lr_rl.to_string()),
            ("lr_baseline", t.lr_baseline.to_string()),
            ("baseline_hidden", show_opt(&t.baseline_hidden)),
            ("baseline_pretrain_steps", t.baseline_pretrain_steps.to_string()),
            ("adam_beta1", t.adam_beta1.to_string()),
            ("adam_beta2", t.adam_beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("max_steps", show_opt(&t.max_steps)),
            ("eval_every", t.eval_every.to_string()),
            ("seed", t.seed.to_string()),
            ("bleu_max_order", t.reward.max_order.to_string()),
            ("reward_times_ref_len", t.reward.multiply_by_ref_len.to_string()),
            ("max_tokens", t.max_tokens.to_string()),
            ("eval_beam_width", t.eval_beam_width.to_string()),
            ("max_decode_len", t.max_decode_len.to_string()),
            ("beam_all_k", t.beam_all_k.to_string()),
            ("clip_norm", show_opt(&t.clip_norm)),
            ("pseudo_beam_width", self.pseudo_beam_width.to_string()),
            ("pseudo_warm_start", self.pseudo_warm_start.to_string()),
        ]
    }

    /// A complete config file that parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Model shape for the given vocabulary sizes. The initialization seed is
    /// the run seed.
    pub fn model_config(&self, src_vocab_size: usize, tgt_vocab_size: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            max_decode_len: self.train.max_decode_len,
            param_init_scale: self.param_init_scale,
            seed: self.train.seed,
            ..ModelConfig::new(src_vocab_size, tgt_vocab_size)
        }
    }

    pub fn bleu(&self) -> BleuConfig {
        self.train.reward
    }
}

fn parse_sampling(value: &str) -> Result<Sampling> {
    if value == "multinomial" {
        return Ok(Sampling::Multinomial);
    }
    value
        .strip_prefix("beam:")
        .and_then(|w| w.parse().ok())
        .map(|width| Sampling::Beam { width })
        .ok_or_else(|| {
            Error::config(
                "sampling",
                format!("expected `multinomial` or `beam:<width>`, got `{value}`"),
            )
        })
}

fn show_sampling(s: Sampling) -> String {
    match s {
        Sampling::Multinomial => "multinomial".into(),
        Sampling::Beam { width } => format!("beam:{width}"),
    }
}
