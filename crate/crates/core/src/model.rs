//! A single-layer tanh recurrent encoder-decoder with scaled dot-product
//! attention and exact hand-written gradients.
//!
//! Encoder: `z_i = tanh(W_xe·e(x_i) + W_he·z_{i-1} + b_e)`, `z_0 = 0`.
//!
//! Decoder, starting from `s_0 = z_n`:
//!
//! ```text
//! a_t  = softmax_i(s_{t-1}·z_i / √h)
//! c_t  = Σ_i a_t,i · z_i
//! s_t  = tanh(W_xd·e(y_{t-1}) + W_hd·s_{t-1} + W_cd·c_t + b_d)
//! p_t  = softmax(W_o·s_t + b_o)
//! ```

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, log_softmax, softmax, ParamSet, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_decode_len: usize,
    pub param_init_scale: f64,
    pub seed: u64,
    /// Decoder start symbol; must be a valid target id.
    pub bos_id: u32,
    /// End-of-sentence symbol; must be a valid target id.
    pub eos_id: u32,
}

impl ModelConfig {
    pub fn new(src_vocab_size: usize, tgt_vocab_size: usize) -> Self {
        Self {
            src_vocab_size,
            tgt_vocab_size,
            embed_dim: 32,
            hidden_dim: 64,
            max_decode_len: 20,
            param_init_scale: 0.1,
            seed: 1,
            bos_id: BOS,
            eos_id: EOS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidModelConfig(m.to_string()));
        if self.src_vocab_size == 0 || self.tgt_vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("all dimensions must be at least 1");
        }
        if self.max_decode_len < 2 {
            return bad("max_decode_len must be at least 2");
        }
        if self.bos_id as usize >= self.tgt_vocab_size || self.eos_id as usize >= self.tgt_vocab_size {
            return bad("bos_id and eos_id must be target vocabulary ids");
        }
        if !(self.param_init_scale >= 0.0 && self.param_init_scale.is_finite()) {
            return bad("param_init_scale must be finite and non-negative");
        }
        Ok(())
    }
}

/// All trainable tensors of the translation model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub src_embed: Tensor,
    pub tgt_embed: Tensor,
    pub w_xe: Tensor,
    pub w_he: Tensor,
    pub b_e: Tensor,
    pub w_xd: Tensor,
    pub w_hd: Tensor,
    pub w_cd: Tensor,
    pub b_d: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

impl ParamSet for ModelParams {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("src_embed", &self.src_embed),
            ("tgt_embed", &self.tgt_embed),
            ("w_xe", &self.w_xe),
            ("w_he", &self.w_he),
            ("b_e", &self.b_e),
            ("w_xd", &self.w_xd),
            ("w_hd", &self.w_hd),
            ("w_cd", &self.w_cd),
            ("b_d", &self.b_d),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("src_embed", &mut self.src_embed),
            ("tgt_embed", &mut self.tgt_embed),
            ("w_xe", &mut self.w_xe),
            ("w_he", &mut self.w_he),
            ("b_e", &mut self.b_e),
            ("w_xd", &mut self.w_xd),
            ("w_hd", &mut self.w_hd),
            ("w_cd", &mut self.w_cd),
            ("b_d", &mut self.b_d),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
        ]
    }
}

fn is_bias(name: &str) -> bool {
    name.starts_with("b_")
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, h) = (cfg.embed_dim, cfg.hidden_dim);
        Self {
            src_embed: Tensor::zeros(&[cfg.src_vocab_size, d]),
            tgt_embed: Tensor::zeros(&[cfg.tgt_vocab_size, d]),
            w_xe: Tensor::zeros(&[h, d]),
            w_he: Tensor::zeros(&[h, h]),
            b_e: Tensor::zeros(&[h]),
            w_xd: Tensor::zeros(&[h, d]),
            w_hd: Tensor::zeros(&[h, h]),
            w_cd: Tensor::zeros(&[h, h]),
            b_d: Tensor::zeros(&[h]),
            w_o: Tensor::zeros(&[cfg.tgt_vocab_size, h]),
            b_o: Tensor::zeros(&[cfg.tgt_vocab_size]),
        }
    }

    /// Same-shaped zero tensor set, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }

    pub fn hidden_dim(&self) -> usize {
        self.b_e.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.w_xe.cols()
    }

    pub fn src_vocab_size(&self) -> usize {
        self.src_embed.rows()
    }

    pub fn tgt_vocab_size(&self) -> usize {
        self.b_o.len()
    }

    fn shape_matches(&self, cfg: &ModelConfig) -> bool {
        let reference = ModelParams::zeros(cfg);
        self.tensors()
            .iter()
            .zip(reference.tensors())
            .all(|((_, a), (_, b))| a.shape() == b.shape())
    }
}

/// Uniform weights in `[-scale, scale]` from the seeded generator; zero biases.
pub fn init_model(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut params = ModelParams::zeros(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = cfg.param_init_scale;
    for (name, t) in params.tensors_mut() {
        if is_bias(name) || scale == 0.0 {
            continue;
        }
        for x in t.data_mut() {
            *x = rng.gen_range(-scale..=scale);
        }
    }
    Ok(params)
}

/// Outputs of a teacher-forced pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutputs {
    pub encoder_states: Vec<Vec<f64>>,
    pub decoder_states: Vec<Vec<f64>>,
    pub attention: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub log_probs: Vec<Vec<f64>>,
}

/// Encoded source sentence, reused across decoder steps.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `n × h`, row-major.
    states: Vec<f64>,
    hidden: usize,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.states.len() / self.hidden
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.hidden..(i + 1) * self.hidden]
    }
}

/// Incremental decoding interface over any conditional language model
/// `p(y_t | x, y_<t)`. Decoding, sampling and enumeration only need this.
pub trait ConditionalLm {
    type Context;
    type State: Clone;

    fn tgt_vocab_size(&self) -> usize;
    fn bos(&self) -> u32;
    fn eos(&self) -> u32;

    /// Encodes the source and returns the initial decoder state.
    fn start(&self, src: &[u32]) -> Result<(Self::Context, Self::State)>;

    /// Feeds `prev` and returns the next state with log-probabilities of the
    /// token that follows it.
    fn step(&self, ctx: &Self::Context, state: &Self::State, prev: u32) -> Result<(Self::State, Vec<f64>)>;

    /// Feature vector of a decoder state (the input of the baseline regressor).
    fn features(&self, state: &Self::State) -> Vec<f64>;
}

/// A [`ModelParams`] bound to its special-token ids.
#[derive(Debug, Clone, Copy)]
pub struct Seq2Seq<'a> {
    pub params: &'a ModelParams,
    pub bos: u32,
    pub eos: u32,
}

impl<'a> Seq2Seq<'a> {
    pub fn new(params: &'a ModelParams, cfg: &ModelConfig) -> Self {
        Self {
            params,
            bos: cfg.bos_id,
            eos: cfg.eos_id,
        }
    }

    /// Uses the corpus special ids.
    pub fn with_default_specials(params: &'a ModelParams) -> Self {
        Self {
            params,
            bos: BOS,
            eos: EOS,
        }
    }

    /// Teacher-forced forward pass. `tgt_prefix` must start with BOS; one
    /// prediction step is produced per prefix token.
    pub fn forward(&self, src: &[u32], tgt_prefix: &[u32]) -> Result<StepOutputs> {
        if tgt_prefix.first() != Some(&self.bos) {
            return Err(Error::InvalidToken {
                id: tgt_prefix.first().copied().unwrap_or(u32::MAX),
                size: self.params.tgt_vocab_size(),
            });
        }
        let trace = self.params.trace(src, tgt_prefix)?;
        let h = self.params.hidden_dim();
        let v = self.params.tgt_vocab_size();
        let rows = |buf: &[f64], w: usize| buf.chunks_exact(w).map(<[f64]>::to_vec).collect();
        Ok(StepOutputs {
            encoder_states: rows(&trace.enc, h),
            decoder_states: rows(&trace.dec[h..], h),
            attention: trace.attn.clone(),
            logits: rows(&trace.logits, v),
            log_probs: rows(&trace.log_probs, v),
        })
    }

    /// Weighted negative log-likelihood `−Σ_t w_t·log p(tgt_t | x, tgt_<t)`
    /// and its exact gradient, accumulated into `grads`. Inputs are
    /// `[BOS, tgt_1 .. tgt_{m-1}]`, so `step_weights.len()` must equal `tgt.len()`.
    pub fn backward(&self, src: &[u32], tgt: &[u32], step_weights: &[f64], grads: &mut Gradients) -> Result<f64> {
        if step_weights.len() != tgt.len() {
            return Err(Error::WeightMismatch {
                expected: tgt.len(),
                got: step_weights.len(),
            });
        }
        let inputs = self.teacher_inputs(tgt);
        self.params.backward_into(src, &inputs, tgt, step_weights, grads)
    }

    /// Convenience wrapper returning a fresh gradient set.
    pub fn gradient(&self, src: &[u32], tgt: &[u32], step_weights: &[f64]) -> Result<(Gradients, f64)> {
        let mut g = self.params.zeros_like();
        let obj = self.backward(src, tgt, step_weights, &mut g)?;
        Ok((g, obj))
    }

    /// Log-probability of each target token under teacher forcing.
    pub fn score(&self, src: &[u32], tgt: &[u32]) -> Result<Vec<f64>> {
        let inputs = self.teacher_inputs(tgt);
        let trace = self.params.trace(src, &inputs)?;
        let v = self.params.tgt_vocab_size();
        tgt.iter()
            .enumerate()
            .map(|(t, &y)| {
                check_token(y, v)?;
                Ok(trace.log_probs[t * v + y as usize])
            })
            .collect()
    }

    /// Weighted negative log-likelihood without gradients.
    pub fn objective(&self, src: &[u32], tgt: &[u32], step_weights: &[f64]) -> Result<f64> {
        let lp = self.score(src, tgt)?;
        Ok(-lp.iter().zip(step_weights).map(|(l, w)| l * w).sum::<f64>())
    }

    fn teacher_inputs(&self, tgt: &[u32]) -> Vec<u32> {
        let mut inputs = Vec::with_capacity(tgt.len());
        inputs.push(self.bos);
        if !tgt.is_empty() {
            inputs.extend_from_slice(&tgt[..tgt.len() - 1]);
        }
        inputs
    }
}

#[derive(Debug, Clone)]
pub struct DecoderState {
    pub hidden: Vec<f64>,
}

impl ConditionalLm for Seq2Seq<'_> {
    type Context = Encoded;
    type State = DecoderState;

    fn tgt_vocab_size(&self) -> usize {
        self.params.tgt_vocab_size()
    }

    fn bos(&self) -> u32 {
        self.bos
    }

    fn eos(&self) -> u32 {
        self.eos
    }

    fn start(&self, src: &[u32]) -> Result<(Encoded, DecoderState)> {
        let enc = self.params.encode(src)?;
        let hidden = enc.state(enc.len() - 1).to_vec();
        Ok((enc, DecoderState { hidden }))
    }

    fn step(&self, ctx: &Encoded, state: &DecoderState, prev: u32) -> Result<(DecoderState, Vec<f64>)> {
        check_token(prev, self.params.tgt_vocab_size())?;
        let p = self.params;
        let h = p.hidden_dim();
        let mut s = vec![0.0; h];
        let mut attn = vec![0.0; ctx.len()];
        let mut c = vec![0.0; h];
        p.decoder_cell(ctx, &state.hidden, prev, &mut attn, &mut c, &mut s);
        let mut logits = p.b_o.data().to_vec();
        p.w_o.matvec_acc(&s, &mut logits);
        Ok((DecoderState { hidden: s }, log_softmax(&logits)))
    }

    fn features(&self, state: &DecoderState) -> Vec<f64> {
        state.hidden.clone()
    }
}

fn check_token(id: u32, size: usize) -> Result<()> {
    if (id as usize) < size {
        Ok(())
    } else {
        Err(Error::InvalidToken { id, size })
    }
}

/// Activations of a teacher-forced pass, kept for backpropagation.
struct Trace {
    /// `n × h` encoder states.
    enc: Vec<f64>,
    /// `(m + 1) × h` decoder states; row 0 is `s_0 = z_n`.
    dec: Vec<f64>,
    /// `m × h` attention contexts.
    ctx: Vec<f64>,
    attn: Vec<Vec<f64>>,
    logits: Vec<f64>,
    log_probs: Vec<f64>,
}

impl ModelParams {
    fn encode(&self, src: &[u32]) -> Result<Encoded> {
        if src.is_empty() {
            return Err(Error::EmptySentence);
        }
        let h = self.hidden_dim();
        let mut states = vec![0.0; src.len() * h];
        let mut prev = vec![0.0; h];
        for (i, &x) in src.iter().enumerate() {
            check_token(x, self.src_vocab_size())?;
            let z = &mut states[i * h..(i + 1) * h];
            z.copy_from_slice(self.b_e.data());
            self.w_xe.matvec_acc(self.src_embed.row(x as usize), z);
            self.w_he.matvec_acc(&prev, z);
            z.iter_mut().for_each(|v| *v = v.tanh());
            prev.copy_from_slice(z);
        }
        Ok(Encoded { states, hidden: h })
    }

    /// One decoder recurrence step from `s_prev` with input token `prev`.
    fn decoder_cell(&self, enc: &Encoded, s_prev: &[f64], prev: u32, attn: &mut [f64], c: &mut [f64], s: &mut [f64]) {
        let h = self.hidden_dim();
        let inv_sqrt_h = 1.0 / (h as f64).sqrt();
        let scores: Vec<f64> = (0..enc.len()).map(|i| dot(s_prev, enc.state(i)) * inv_sqrt_h).collect();
        attn.copy_from_slice(&softmax(&scores));
        c.iter_mut().for_each(|x| *x = 0.0);
        for (i, &a) in attn.iter().enumerate() {
            axpy(a, enc.state(i), c);
        }
        s.copy_from_slice(self.b_d.data());
        self.w_xd.matvec_acc(self.tgt_embed.row(prev as usize), s);
        self.w_hd.matvec_acc(s_prev, s);
        self.w_cd.matvec_acc(c, s);
        s.iter_mut().for_each(|v| *v = v.tanh());
    }

    fn trace(&self, src: &[u32], inputs: &[u32]) -> Result<Trace> {
        let enc = self.encode(src)?;
        let h = self.hidden_dim();
        let v = self.tgt_vocab_size();
        let m = inputs.len();
        let mut dec = vec![0.0; (m + 1) * h];
        dec[..h].copy_from_slice(enc.state(enc.len() - 1));
        let mut ctx = vec![0.0; m * h];
        let mut attn = Vec::with_capacity(m);
        let mut logits = vec![0.0; m * v];
        let mut log_probs = vec![0.0; m * v];
        for (t, &y) in inputs.iter().enumerate() {
            check_token(y, v)?;
            let (before, after) = dec.split_at_mut((t + 1) * h);
            let s_prev = &before[t * h..];
            let s = &mut after[..h];
            let mut a = vec![0.0; enc.len()];
            self.decoder_cell(&enc, s_prev, y, &mut a, &mut ctx[t * h..(t + 1) * h], s);
            let lg = &mut logits[t * v..(t + 1) * v];
            lg.copy_from_slice(self.b_o.data());
            self.w_o.matvec_acc(s, lg);
            log_probs[t * v..(t + 1) * v].copy_from_slice(&log_softmax(lg));
            attn.push(a);
        }
        Ok(Trace {
            enc: enc.states,
            dec,
            ctx,
            attn,
            logits,
            log_probs,
        })
    }

    fn backward_into(
        &self,
        src: &[u32],
        inputs: &[u32],
        targets: &[u32],
        weights: &[f64],
        g: &mut Gradients,
    ) -> Result<f64> {
        let v = self.tgt_vocab_size();
        for &y in targets {
            check_token(y, v)?;
        }
        let tr = self.trace(src, inputs)?;
        let h = self.hidden_dim();
        let n = src.len();
        let m = inputs.len();
        let inv_sqrt_h = 1.0 / (h as f64).sqrt();

        let mut objective = 0.0;
        let mut dz = vec![0.0; n * h];
        // gradient flowing into s_t from later steps
        let mut ds_next = vec![0.0; h];
        let mut dlogits = vec![0.0; v];
        let mut du = vec![0.0; h];
        let mut dc = vec![0.0; h];

        for t in (0..m).rev() {
            let w = weights[t];
            let y = targets[t] as usize;
            let lp = &tr.log_probs[t * v..(t + 1) * v];
            objective -= w * lp[y];

            let s = &tr.dec[(t + 1) * h..(t + 2) * h];
            let s_prev = &tr.dec[t * h..(t + 1) * h];
            let c = &tr.ctx[t * h..(t + 1) * h];
            let a = &tr.attn[t];

            let mut ds = std::mem::replace(&mut ds_next, vec![0.0; h]);
            if w != 0.0 {
                for (dl, l) in dlogits.iter_mut().zip(lp) {
                    *dl = w * l.exp();
                }
                dlogits[y] -= w;
                g.w_o.add_outer(&dlogits, s);
                axpy(1.0, &dlogits, g.b_o.data_mut());
                self.w_o.matvec_t_acc(&dlogits, &mut ds);
            }
            if ds.iter().all(|&x| x == 0.0) {
                continue;
            }
            for ((d, &dsi), &si) in du.iter_mut().zip(&ds).zip(s) {
                *d = dsi * (1.0 - si * si);
            }
            let prev = inputs[t] as usize;
            g.w_xd.add_outer(&du, self.tgt_embed.row(prev));
            self.w_xd.matvec_t_acc(&du, g.tgt_embed.row_mut(prev));
            g.w_hd.add_outer(&du, s_prev);
            self.w_hd.matvec_t_acc(&du, &mut ds_next);
            g.w_cd.add_outer(&du, c);
            dc.iter_mut().for_each(|x| *x = 0.0);
            self.w_cd.matvec_t_acc(&du, &mut dc);
            axpy(1.0, &du, g.b_d.data_mut());

            // c = Σ a_i z_i ; a = softmax(score) ; score_i = s_prev·z_i/√h
            let da: Vec<f64> = (0..n).map(|i| dot(&dc, &tr.enc[i * h..(i + 1) * h])).collect();
            let mean_da: f64 = a.iter().zip(&da).map(|(ai, dai)| ai * dai).sum();
            for i in 0..n {
                let z = &tr.enc[i * h..(i + 1) * h];
                let dz_i = &mut dz[i * h..(i + 1) * h];
                axpy(a[i], &dc, dz_i);
                let dscore = a[i] * (da[i] - mean_da) * inv_sqrt_h;
                if dscore != 0.0 {
                    axpy(dscore, s_prev, dz_i);
                    axpy(dscore, z, &mut ds_next);
                }
            }
        }
        // s_0 = z_n
        axpy(1.0, &ds_next, &mut dz[(n - 1) * h..]);

        let mut dz_prev = vec![0.0; h];
        let mut da = vec![0.0; h];
        for i in (0..n).rev() {
            let z = &tr.enc[i * h..(i + 1) * h];
            let dz_i = &mut dz[i * h..(i + 1) * h];
            axpy(1.0, &dz_prev, dz_i);
            for ((d, &g_i), &zi) in da.iter_mut().zip(dz_i.iter()).zip(z) {
                *d = g_i * (1.0 - zi * zi);
            }
            let x = src[i] as usize;
            g.w_xe.add_outer(&da, self.src_embed.row(x));
            self.w_xe.matvec_t_acc(&da, g.src_embed.row_mut(x));
            axpy(1.0, &da, g.b_e.data_mut());
            dz_prev.iter_mut().for_each(|x| *x = 0.0);
            if i > 0 {
                g.w_he.add_outer(&da, &tr.enc[(i - 1) * h..i * h]);
                self.w_he.matvec_t_acc(&da, &mut dz_prev);
            }
        }
        Ok(objective)
    }
}

const MAGIC: &[u8; 4] = b"SQRL";
const VERSION: u16 = 1;

/// Writes the versioned binary checkpoint: magic, version, config block,
/// then one record per tensor (name, rank, dims, little-endian `f64` data).
pub fn save_checkpoint(params: &ModelParams, cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params, cfg)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, ModelConfig)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn encode_checkpoint(params: &ModelParams, cfg: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for x in [
        cfg.src_vocab_size,
        cfg.tgt_vocab_size,
        cfg.embed_dim,
        cfg.hidden_dim,
        cfg.max_decode_len,
    ] {
        out.extend_from_slice(&(x as u64).to_le_bytes());
    }
    out.extend_from_slice(&cfg.param_init_scale.to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&cfg.bos_id.to_le_bytes());
    out.extend_from_slice(&cfg.eos_id.to_le_bytes());
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::CorruptCheckpoint("size overflow".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams, ModelConfig)> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let cfg = ModelConfig {
        src_vocab_size: r.usize()?,
        tgt_vocab_size: r.usize()?,
        embed_dim: r.usize()?,
        hidden_dim: r.usize()?,
        max_decode_len: r.usize()?,
        param_init_scale: r.f64()?,
        seed: r.u64()?,
        bos_id: r.u32()?,
        eos_id: r.u32()?,
    };
    cfg.validate().map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let mut params = ModelParams::zeros(&cfg);
    let count = r.u32()? as usize;
    if count != params.tensors().len() {
        return Err(corrupt("unexpected tensor count"));
    }
    for (expected_name, t) in params.tensors_mut() {
        let name_len = r.u32()? as usize;
        if r.take(name_len)? != expected_name.as_bytes() {
            return Err(Error::CorruptCheckpoint(format!("expected tensor {expected_name}")));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        if dims != t.shape() {
            return Err(Error::CorruptCheckpoint(format!("shape mismatch for {expected_name}")));
        }
        for x in t.data_mut() {
            *x = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    if !params.shape_matches(&cfg) || !params.all_finite() {
        return Err(corrupt("non-finite parameters"));
    }
    Ok((params, cfg))
}

/// Result of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub coords_checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

/// Compares `analytic` (gradient of the weighted NLL) with central
/// differences of that objective. Checks every coordinate when
/// `max_coords` is `None` or covers the parameter count, otherwise a seeded
/// random subset of that many coordinates.
#[allow(clippy::too_many_arguments)]
pub fn check_gradient_against(
    model: Seq2Seq<'_>,
    src: &[u32],
    tgt: &[u32],
    step_weights: &[f64],
    analytic: &Gradients,
    epsilon: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheck> {
    check_gradient_against_fn(
        model,
        analytic,
        |m| m.objective(src, tgt, step_weights),
        epsilon,
        max_coords,
        seed,
    )
}

/// Central-difference check of `analytic` against an arbitrary scalar
/// function of the parameters. Relative error uses the denominator
/// `max(|numeric|, |analytic|, 1e-8)`.
pub fn check_gradient_against_fn<F>(
    model: Seq2Seq<'_>,
    analytic: &Gradients,
    objective: F,
    epsilon: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheck>
where
    F: Fn(Seq2Seq<'_>) -> Result<f64>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let total = model.params.num_params();
    let coords: Vec<usize> = match max_coords {
        Some(k) if k < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, total, k).into_vec()
        }
        _ => (0..total).collect(),
    };
    let mut probe = model.params.clone();
    let mut max_rel: f64 = 0.0;
    for &i in &coords {
        let orig = probe.coord(i);
        *probe.coord_mut(i) = orig + epsilon;
        let plus = objective(Seq2Seq {
            params: &probe,
            ..model
        })?;
        *probe.coord_mut(i) = orig - epsilon;
        let minus = objective(Seq2Seq {
            params: &probe,
            ..model
        })?;
        *probe.coord_mut(i) = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let exact = analytic.coord(i);
        let denom = numeric.abs().max(exact.abs()).max(1e-8);
        max_rel = max_rel.max((numeric - exact).abs() / denom);
    }
    Ok(GradCheck {
        max_relative_error: max_rel,
        coords_checked: coords.len(),
    })
}

/// Runs `backward` and checks it against central differences.
pub fn finite_difference_check(
    model: Seq2Seq<'_>,
    src: &[u32],
    tgt: &[u32],
    step_weights: &[f64],
    epsilon: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheck> {
    let (grads, _) = model.gradient(src, tgt, step_weights)?;
    check_gradient_against(model, src, tgt, step_weights, &grads, epsilon, max_coords, seed)
}
