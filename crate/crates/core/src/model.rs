//! Attention-based LSTM encoder-decoder.
//!
//! Bidirectional LSTM encoder (forward/backward halves concatenated per
//! position), unidirectional LSTM decoder, and general bilinear attention:
//! `score_l = s_t^T W h_l`. The context vector feeds the output projection
//! only — `logits = W_out [s_t; c_t] + b` — not the next recurrent step.
//! Layer counts and sizes are configurable; the desk-scale default is one
//! layer each at 64 dimensions.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Error;
use crate::rng;
use crate::tensor::Tensor;
use crate::Result;

/// Architecture sizes. Embeddings and hidden states are sized independently;
/// the encoder output dimension is `2 * d_hidden` (two directions).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_emb: usize,
    pub d_hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Parameters draw from `uniform(-init_range, init_range)`.
    pub init_range: f64,
}

impl ModelConfig {
    pub fn new(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            d_emb: 64,
            d_hidden: 64,
            enc_layers: 1,
            dec_layers: 1,
            init_range: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.src_vocab == 0 || self.tgt_vocab < 3 {
            return Err(Error::config(format!(
                "vocabulary sizes too small: src {}, tgt {} (target needs BOS/EOS ids)",
                self.src_vocab, self.tgt_vocab
            )));
        }
        if self.d_emb == 0 || self.d_hidden == 0 || self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::config("model dimensions and layer counts must be positive"));
        }
        if !(self.init_range > 0.0 && self.init_range.is_finite()) {
            return Err(Error::config(format!("init_range must be positive, got {}", self.init_range)));
        }
        Ok(())
    }

    /// Encoder output dimension per position.
    pub fn d_enc(&self) -> usize {
        2 * self.d_hidden
    }
}

const GATES: [char; 4] = ['i', 'f', 'g', 'o'];

/// Expected parameter layout for a configuration: `(name, shape)` in a
/// fixed order. Initialization, binding and checkpoint validation all
/// derive from this single description.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let h = cfg.d_hidden;
    let mut out = Vec::new();
    out.push((String::from("src_emb"), vec![cfg.src_vocab, cfg.d_emb]));
    out.push((String::from("tgt_emb"), vec![cfg.tgt_vocab, cfg.d_emb]));
    for li in 0..cfg.enc_layers {
        let d_in = if li == 0 { cfg.d_emb } else { cfg.d_enc() };
        for dir in ["fw", "bw"] {
            for g in GATES {
                out.push((format!("enc{li}.{dir}.w_{g}"), vec![d_in + h, h]));
            }
            for g in GATES {
                out.push((format!("enc{li}.{dir}.b_{g}"), vec![h]));
            }
        }
    }
    for li in 0..cfg.dec_layers {
        let d_in = if li == 0 { cfg.d_emb } else { h };
        for g in GATES {
            out.push((format!("dec{li}.w_{g}"), vec![d_in + h, h]));
        }
        for g in GATES {
            out.push((format!("dec{li}.b_{g}"), vec![h]));
        }
    }
    out.push((String::from("att.w"), vec![cfg.d_enc(), h]));
    for li in 0..cfg.dec_layers {
        out.push((format!("init{li}.w_h"), vec![h, cfg.d_enc()]));
        out.push((format!("init{li}.b_h"), vec![h]));
        out.push((format!("init{li}.w_c"), vec![h, cfg.d_enc()]));
        out.push((format!("init{li}.b_c"), vec![h]));
    }
    out.push((String::from("out.w"), vec![cfg.tgt_vocab, h + cfg.d_enc()]));
    out.push((String::from("out.b"), vec![cfg.tgt_vocab]));
    out
}

/// All learnable parameters, in a fixed, named order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    entries: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

impl ModelParams {
    /// Fresh parameters: `uniform(-r, r)` draws, deterministic under the
    /// seed; LSTM forget-gate biases start at 1.0.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut stream = rng::derive(seed, &[rng::tag::INIT]);
        let r = config.init_range;
        let mut entries = Vec::new();
        for (name, shape) in parameter_layout(config) {
            let numel: usize = shape.iter().product();
            let data = if name.ends_with(".b_f") {
                vec![1.0; numel]
            } else {
                rng::uniform_vec(&mut stream, numel, -r, r)
            };
            entries.push((name, Tensor::from_vec(&shape, data)?));
        }
        Self::from_entries(config.clone(), entries)
    }

    /// Rebuild from named tensors (checkpoint load). Names, order and
    /// shapes must match the layout implied by `config` exactly.
    pub fn from_entries(config: ModelConfig, entries: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != entries.len() {
            return Err(Error::config(format!(
                "parameter count mismatch: expected {}, got {}",
                layout.len(),
                entries.len()
            )));
        }
        let mut index = BTreeMap::new();
        for (i, ((name, tensor), (want_name, want_shape))) in
            entries.iter().zip(layout.iter()).enumerate()
        {
            if name != want_name || tensor.shape() != &want_shape[..] {
                return Err(Error::config(format!(
                    "parameter {i}: expected {want_name} {want_shape:?}, got {name} {:?}",
                    tensor.shape()
                )));
            }
            index.insert(name.clone(), i);
        }
        Ok(ModelParams { config, entries, index })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

// ── tape binding ─────────────────────────────────────────────────────

#[derive(Clone, Copy)]
pub struct LstmVars {
    w: [Var; 4],
    b: [Var; 4],
}

#[derive(Clone, Copy)]
pub struct InitVars {
    w_h: Var,
    b_h: Var,
    w_c: Var,
    b_c: Var,
}

/// Model parameters registered on a tape, plus the handles the forward
/// passes need. Bind with `trainable = false` for frozen models (teacher,
/// inference): their leaves then take no part in backward.
pub struct BoundModel {
    pub config: ModelConfig,
    src_emb: Var,
    tgt_emb: Var,
    enc: Vec<[LstmVars; 2]>,
    dec: Vec<LstmVars>,
    att_w: Var,
    init: Vec<InitVars>,
    out_w: Var,
    out_b: Var,
    /// One Var per parameter, aligned with `ModelParams` order.
    pub param_vars: Vec<Var>,
}

pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> BoundModel {
    let mut vars = Vec::with_capacity(params.len());
    for (_, tensor) in params.iter() {
        let v = if trainable { tape.param(tensor.clone()) } else { tape.leaf(tensor.clone()) };
        vars.push(v);
    }
    let cfg = params.config().clone();
    let at = |name: &str| vars[params.position(name).expect("layout name")];
    let lstm = |prefix: &str| LstmVars {
        w: [
            at(&format!("{prefix}.w_i")),
            at(&format!("{prefix}.w_f")),
            at(&format!("{prefix}.w_g")),
            at(&format!("{prefix}.w_o")),
        ],
        b: [
            at(&format!("{prefix}.b_i")),
            at(&format!("{prefix}.b_f")),
            at(&format!("{prefix}.b_g")),
            at(&format!("{prefix}.b_o")),
        ],
    };
    let enc = (0..cfg.enc_layers)
        .map(|li| [lstm(&format!("enc{li}.fw")), lstm(&format!("enc{li}.bw"))])
        .collect();
    let dec = (0..cfg.dec_layers).map(|li| lstm(&format!("dec{li}"))).collect();
    let init = (0..cfg.dec_layers)
        .map(|li| InitVars {
            w_h: at(&format!("init{li}.w_h")),
            b_h: at(&format!("init{li}.b_h")),
            w_c: at(&format!("init{li}.w_c")),
            b_c: at(&format!("init{li}.b_c")),
        })
        .collect();
    BoundModel {
        src_emb: at("src_emb"),
        tgt_emb: at("tgt_emb"),
        enc,
        dec,
        att_w: at("att.w"),
        init,
        out_w: at("out.w"),
        out_b: at("out.b"),
        config: cfg,
        param_vars: vars,
    }
}

// ── dropout ──────────────────────────────────────────────────────────

/// Inverted-dropout mask source: kept units scale by `1/(1-rate)` at train
/// time so inference needs no rescaling.
pub struct DropoutCtx {
    pub rng: ChaCha8Rng,
    pub rate: f64,
}

impl DropoutCtx {
    pub fn new(rng: ChaCha8Rng, rate: f64) -> Self {
        DropoutCtx { rng, rate }
    }

    fn mask(&mut self, n: usize) -> Tensor {
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let data = (0..n)
            .map(|_| if rng::next_f64(&mut self.rng) < keep { scale } else { 0.0 })
            .collect();
        Tensor::vector(data)
    }
}

fn maybe_dropout(tape: &mut Tape, x: Var, ctx: &mut Option<DropoutCtx>) -> Result<Var> {
    match ctx {
        Some(d) if d.rate > 0.0 => {
            let n = tape.value(x).numel();
            let mask = d.mask(n);
            tape.apply_mask(x, mask)
        }
        _ => Ok(x),
    }
}

// ── forward passes ───────────────────────────────────────────────────

/// Per-position encoder states `h_{1:L}` plus the final states used to
/// initialize the decoder.
#[derive(Debug)]
pub struct EncoderStates {
    /// `[L, d_enc]` matrix of concatenated direction states.
    pub states: Var,
    pub len: usize,
    h_final: Var,
    c_final: Var,
}

fn lstm_step(tape: &mut Tape, cell: &LstmVars, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let cat = tape.concat(&[x, h])?;
    let mut z = [cat; 4];
    for (k, zk) in z.iter_mut().enumerate() {
        let prod = tape.matmul(cat, cell.w[k])?;
        *zk = tape.add(prod, cell.b[k])?;
    }
    let i = tape.sigmoid(z[0]);
    let f = tape.sigmoid(z[1]);
    let g = tape.tanh(z[2]);
    let o = tape.sigmoid(z[3]);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// Bidirectional recurrent encoding of a source sequence.
pub fn encode(
    tape: &mut Tape,
    model: &BoundModel,
    src: &[u32],
    dropout: &mut Option<DropoutCtx>,
) -> Result<EncoderStates> {
    if src.is_empty() {
        return Err(Error::contract("encode requires a nonempty source"));
    }
    let cfg = &model.config;
    for &id in src {
        if id as usize >= cfg.src_vocab {
            return Err(Error::index(
                "encode",
                format!("source token id {id} out of vocabulary range {}", cfg.src_vocab),
            ));
        }
    }
    let n = src.len();
    let mut seq = Vec::with_capacity(n);
    for &id in src {
        let e = tape.gather_row(model.src_emb, id as usize)?;
        seq.push(maybe_dropout(tape, e, dropout)?);
    }

    let h_dim = cfg.d_hidden;
    let mut h_final = None;
    let mut c_final = None;
    for (li, pair) in model.enc.iter().enumerate() {
        let zero = tape.leaf(Tensor::zeros(&[h_dim]));
        // forward direction
        let (mut h, mut c) = (zero, zero);
        let mut fw = Vec::with_capacity(n);
        for &x in &seq {
            let (h2, c2) = lstm_step(tape, &pair[0], x, h, c)?;
            h = h2;
            c = c2;
            fw.push(h2);
        }
        let (fw_h_last, fw_c_last) = (h, c);
        // backward direction
        let (mut h, mut c) = (zero, zero);
        let mut bw = vec![zero; n];
        for l in (0..n).rev() {
            let (h2, c2) = lstm_step(tape, &pair[1], seq[l], h, c)?;
            h = h2;
            c = c2;
            bw[l] = h2;
        }
        let (bw_h_last, bw_c_last) = (h, c);

        let mut combined = Vec::with_capacity(n);
        for l in 0..n {
            combined.push(tape.concat(&[fw[l], bw[l]])?);
        }
        if li + 1 < model.enc.len() {
            for v in &mut combined {
                *v = maybe_dropout(tape, *v, dropout)?;
            }
        } else {
            h_final = Some(tape.concat(&[fw_h_last, bw_h_last])?);
            c_final = Some(tape.concat(&[fw_c_last, bw_c_last])?);
        }
        seq = combined;
    }
    let states = tape.stack_rows(&seq)?;
    Ok(EncoderStates {
        states,
        len: n,
        h_final: h_final.expect("at least one encoder layer"),
        c_final: c_final.expect("at least one encoder layer"),
    })
}

/// Decoder recurrent state: one `(h, c)` pair per layer plus the step index.
#[derive(Clone, Debug)]
pub struct DecoderState {
    layers: Vec<(Var, Var)>,
    pub step: usize,
}

impl DecoderState {
    /// Hidden state of the top layer.
    pub fn top(&self) -> Var {
        self.layers[self.layers.len() - 1].0
    }
}

/// Affine map of the final encoder states into each decoder layer's
/// initial `(h, c)`.
pub fn init_decoder_state(
    tape: &mut Tape,
    model: &BoundModel,
    enc: &EncoderStates,
) -> Result<DecoderState> {
    let mut layers = Vec::with_capacity(model.dec.len());
    for iv in &model.init {
        let h = tape.matmul(iv.w_h, enc.h_final)?;
        let h = tape.add(h, iv.b_h)?;
        let c = tape.matmul(iv.w_c, enc.c_final)?;
        let c = tape.add(c, iv.b_c)?;
        layers.push((h, c));
    }
    Ok(DecoderState { layers, step: 0 })
}

/// Alignment over source positions for a decoder state (general bilinear
/// scores, softmax-normalized).
pub fn attention_weights(
    tape: &mut Tape,
    model: &BoundModel,
    s: Var,
    enc: &EncoderStates,
) -> Result<Var> {
    if enc.len == 0 {
        return Err(Error::contract("attend over an empty encoding"));
    }
    let proj = tape.matmul(model.att_w, s)?;
    let scores = tape.matmul(enc.states, proj)?;
    tape.softmax(scores)
}

/// Alignment plus its context vector `c = sum_l alpha_l h_l`.
pub fn attend(
    tape: &mut Tape,
    model: &BoundModel,
    s: Var,
    enc: &EncoderStates,
) -> Result<(Var, Var)> {
    let alpha = attention_weights(tape, model, s, enc)?;
    let ctx = tape.matmul(alpha, enc.states)?;
    Ok((alpha, ctx))
}

/// Where the decoder's context vector comes from.
pub enum ContextSource {
    /// Own alignment (teacher forcing / free running / inference).
    SelfAttention,
    /// Externally supplied reference alignment (attention forcing); the
    /// model's own alignment is still computed and returned.
    Reference(Var),
}

#[derive(Debug)]
pub struct StepOutput {
    pub logits: Var,
    pub state: DecoderState,
    /// The model's own alignment for this step, always on the simplex.
    pub alpha: Var,
}

/// One decoder step: consume the previous token, update the recurrent
/// state, attend, and project `[s_t; c_t]` to vocabulary logits.
pub fn decoder_step(
    tape: &mut Tape,
    model: &BoundModel,
    prev_token: u32,
    state: &DecoderState,
    context: ContextSource,
    enc: &EncoderStates,
    dropout: &mut Option<DropoutCtx>,
) -> Result<StepOutput> {
    let cfg = &model.config;
    if prev_token as usize >= cfg.tgt_vocab {
        return Err(Error::index(
            "decoder_step",
            format!("token id {prev_token} out of vocabulary range {}", cfg.tgt_vocab),
        ));
    }
    let x = tape.gather_row(model.tgt_emb, prev_token as usize)?;
    let mut input = maybe_dropout(tape, x, dropout)?;
    let mut layers = Vec::with_capacity(state.layers.len());
    for (li, cell) in model.dec.iter().enumerate() {
        let (h_prev, c_prev) = state.layers[li];
        let (h, c) = lstm_step(tape, cell, input, h_prev, c_prev)?;
        layers.push((h, c));
        input = h;
        if li + 1 < model.dec.len() {
            input = maybe_dropout(tape, input, dropout)?;
        }
    }
    let s_top = input;
    let alpha = attention_weights(tape, model, s_top, enc)?;
    let ctx = match context {
        ContextSource::SelfAttention => tape.matmul(alpha, enc.states)?,
        ContextSource::Reference(r) => {
            let got = tape.value(r).numel();
            if got != enc.len || tape.value(r).rank() != 1 {
                return Err(Error::shape(
                    "decoder_step",
                    format!("reference alignment length {got} != source length {}", enc.len),
                ));
            }
            tape.matmul(r, enc.states)?
        }
    };
    let out_in = tape.concat(&[s_top, ctx])?;
    let out_in = maybe_dropout(tape, out_in, dropout)?;
    let proj = tape.matmul(model.out_w, out_in)?;
    let logits = tape.add(proj, model.out_b)?;
    Ok(StepOutput { logits, state: DecoderState { layers, step: state.step + 1 }, alpha })
}
