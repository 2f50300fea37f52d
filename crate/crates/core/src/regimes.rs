//! Training regimes.
//!
//! Teacher forcing conditions every step on the reference history; free
//! running on the model's own emissions; scheduled sampling mixes the two
//! per step with probability `eps_ss`. Attention forcing adds a frozen
//! teacher-forcing model: the teacher supplies reference alignments, the
//! student trains on generated history while its decoder contexts are
//! computed from the teacher's alignments (over the student's own encoder
//! states), plus a KL penalty pulling the student's alignments toward the
//! teacher's. The automatic variant runs two student passes per sequence —
//! A on generated history, B on reference history — and backpropagates
//! pass A only when `k * sum KL(ref || B) > sum KL(ref || A)`, i.e. when
//! the generated rollout stayed well enough aligned.

use alloc::format;
use alloc::vec::Vec;


use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{Batch, BOS};
use crate::error::Error;
use crate::math;
use crate::model::{
    bind, decoder_step, encode, init_decoder_state, BoundModel, ContextSource, DropoutCtx,
    EncoderStates, ModelParams,
};
use crate::rng;
use crate::tensor::{self, Tensor};
use crate::Result;

/// Training-mode selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    TeacherForcing,
    FreeRunning,
    ScheduledSampling,
    VanillaAttentionForcing,
    AutomaticAttentionForcing,
}

impl Mode {
    pub fn parse(name: &str) -> Result<Mode> {
        match name {
            "tf" => Ok(Mode::TeacherForcing),
            "fr" => Ok(Mode::FreeRunning),
            "ss" => Ok(Mode::ScheduledSampling),
            "vaf" => Ok(Mode::VanillaAttentionForcing),
            "aaf" => Ok(Mode::AutomaticAttentionForcing),
            other => Err(Error::config(format!(
                "unknown training mode {other:?} (expected tf, fr, ss, vaf or aaf)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::TeacherForcing => "tf",
            Mode::FreeRunning => "fr",
            Mode::ScheduledSampling => "ss",
            Mode::VanillaAttentionForcing => "vaf",
            Mode::AutomaticAttentionForcing => "aaf",
        }
    }

    pub fn needs_teacher(&self) -> bool {
        matches!(self, Mode::VanillaAttentionForcing | Mode::AutomaticAttentionForcing)
    }
}

/// Regime hyperparameters. `k` may be `+inf`, which reduces automatic
/// attention forcing to the vanilla variant.
#[derive(Debug, Clone)]
pub struct RegimeConfig {
    pub mode: Mode,
    /// Attention-loss scale.
    pub gamma: f64,
    /// Pass-selection threshold.
    pub k: f64,
    /// Alignment smoothing constant.
    pub eps_smooth: f64,
    /// Scheduled-sampling reference probability at the start and end of the
    /// forcing phase (linear in between).
    pub ss_start: f64,
    pub ss_end: f64,
    /// Use sampled instead of argmax tokens for generated history.
    pub sample_history: bool,
}

impl RegimeConfig {
    pub fn new(mode: Mode) -> RegimeConfig {
        RegimeConfig {
            mode,
            gamma: 10.0,
            k: 3.0,
            eps_smooth: math::exp(-10.0),
            ss_start: 1.0,
            ss_end: 0.0,
            sample_history: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.k.is_nan() || self.k < 0.0 {
            return Err(Error::config(format!("k must be >= 0 or +inf, got {}", self.k)));
        }
        if !(self.eps_smooth > 0.0 && self.eps_smooth < 1.0) {
            return Err(Error::config(format!(
                "eps_smooth must lie in (0, 1), got {}",
                self.eps_smooth
            )));
        }
        for (name, v) in [("ss_start", self.ss_start), ("ss_end", self.ss_end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.ss_end > self.ss_start {
            return Err(Error::config(
                "scheduled-sampling probability must be non-increasing over epochs",
            ));
        }
        Ok(())
    }

    /// Reference probability for forcing-phase epoch `j` of `total`.
    pub fn ss_epsilon(&self, j: u64, total: u64) -> f64 {
        if total <= 1 {
            return if total == 0 { self.ss_start } else { self.ss_end };
        }
        let frac = j as f64 / (total - 1) as f64;
        self.ss_start + (self.ss_end - self.ss_start) * frac.min(1.0)
    }
}

/// `(1 - eps) * alpha + eps * uniform`: keeps alignments strictly positive
/// so their logs stay finite.
pub fn smooth_alignment(alpha: &Tensor, eps_smooth: f64) -> Result<Tensor> {
    if alpha.rank() != 1 || alpha.numel() == 0 {
        return Err(Error::shape(
            "smooth_alignment",
            format!("nonempty rank-1 alignment required, got {:?}", alpha.shape()),
        ));
    }
    if !(0.0..1.0).contains(&eps_smooth) {
        return Err(Error::domain("smooth_alignment", format!("eps {eps_smooth} outside [0, 1)")));
    }
    let sum: f64 = alpha.data().iter().sum();
    if math::abs(sum - 1.0) > crate::autodiff::SIMPLEX_TOL {
        return Err(Error::domain(
            "smooth_alignment",
            format!("alignment not on the simplex (sum = {sum})"),
        ));
    }
    let u = eps_smooth / alpha.numel() as f64;
    let data = alpha.data().iter().map(|&a| (1.0 - eps_smooth) * a + u).collect();
    Ok(Tensor::vector(data))
}

fn smooth_on_tape(tape: &mut Tape, alpha: Var, eps_smooth: f64) -> Var {
    let len = tape.value(alpha).numel() as f64;
    tape.affine_scalar(alpha, 1.0 - eps_smooth, eps_smooth / len)
}

/// Which pass of automatic attention forcing was backpropagated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassChoice {
    /// Generated history.
    A,
    /// Reference history.
    B,
}

/// Per-sequence loss terms of one training step.
#[derive(Debug, Clone)]
pub struct PassRecord {
    /// Cross-entropy sum over the sequence (the chosen pass, for AAF).
    pub nll_sum: f64,
    /// Smoothed attention-KL sum (0 when the regime has no attention loss).
    pub att_kl_sum: f64,
    /// AAF only: which pass entered the batch loss.
    pub chosen: Option<PassChoice>,
    /// AAF only: the two selection sums, `D_A` (generated history) and
    /// `D_B` (reference history).
    pub d_a: Option<f64>,
    pub d_b: Option<f64>,
    /// Generated rollout `y'_{1:T}` (empty for reference-history regimes).
    pub gen_tokens: Vec<u32>,
}

/// Sequence-level pass selection: pass A iff `k * d_b > d_a`; ties and
/// `k = 0` fall back to pass B; `k = +inf` always picks A (this keeps the
/// the reduction to vanilla attention forcing exact even when `d_b = 0`).
pub fn select_pass_a(k: f64, d_b: f64, d_a: f64) -> bool {
    if k == f64::INFINITY {
        true
    } else {
        k * d_b > d_a
    }
}

/// Batch-level outcome of one regime step.
#[derive(Debug)]
pub struct BatchOutcome {
    /// Mean over sequences of the per-sequence (joint) loss.
    pub loss: f64,
    /// Mean per-sequence NLL sum.
    pub nll: f64,
    /// Mean per-sequence attention-KL sum (attention-forcing regimes).
    pub att_kl: Option<f64>,
    /// Fraction of sequences whose pass A was selected (AAF).
    pub pass_a_rate: Option<f64>,
    pub records: Vec<PassRecord>,
    /// Gradients of `loss` w.r.t. every parameter, in `ModelParams` order.
    pub grads: Option<Vec<Tensor>>,
}

/// Everything a batch step needs besides the data: stream coordinates and
/// train-time switches.
#[derive(Debug, Clone)]
pub struct BatchCtx {
    pub seed: u64,
    pub epoch: u64,
    pub batch_index: u64,
    /// Dropout rate; 0 disables dropout entirely.
    pub dropout: f64,
    /// Scheduled sampling reference probability for this epoch.
    pub eps_ss: f64,
    pub want_grads: bool,
}

impl BatchCtx {
    /// Evaluation context: no dropout, no gradients, fixed streams.
    pub fn eval(seed: u64) -> BatchCtx {
        BatchCtx { seed, epoch: 0, batch_index: 0, dropout: 0.0, eps_ss: 1.0, want_grads: false }
    }

    fn dropout_ctx(&self, tag: u64, seq: u64) -> Option<DropoutCtx> {
        if self.dropout > 0.0 {
            let stream = rng::derive(self.seed, &[tag, self.epoch, self.batch_index, seq]);
            Some(DropoutCtx::new(stream, self.dropout))
        } else {
            None
        }
    }

    fn regime_stream(&self, seq: u64, pass: u64) -> ChaCha8Rng {
        rng::derive(self.seed, &[rng::tag::REGIME, self.epoch, self.batch_index, seq, pass])
    }
}

// ── teacher reference alignments ─────────────────────────────────────

/// Teacher-forced alignments `alpha_{1:T}` for one sequence under a frozen
/// model (dropout off, no gradients).
pub fn teacher_alignments(teacher: &ModelParams, src: &[u32], tgt: &[u32]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let model = bind(&mut tape, teacher, false);
    teacher_alignments_on(&mut tape, &model, src, tgt)
}

fn teacher_alignments_on(
    tape: &mut Tape,
    model: &BoundModel,
    src: &[u32],
    tgt: &[u32],
) -> Result<Vec<Tensor>> {
    let enc = encode(tape, model, src, &mut None)?;
    let mut state = init_decoder_state(tape, model, &enc)?;
    let mut alphas = Vec::with_capacity(tgt.len());
    let mut prev = BOS;
    for &target in tgt {
        let out = decoder_step(tape, model, prev, &state, ContextSource::SelfAttention, &enc, &mut None)?;
        alphas.push(tape.value(out.alpha).clone());
        state = out.state;
        prev = target;
    }
    Ok(alphas)
}

// ── student passes ───────────────────────────────────────────────────

enum HistoryMode<'a> {
    Reference,
    Generated,
    Mixed { eps: f64 },
    /// Externally fixed decoder inputs (`fixed[0]` must be BOS). Used to
    /// evaluate a loss at a frozen rollout, e.g. for finite differences.
    Fixed(&'a [u32]),
}

struct StudentPass {
    nll: Var,
    kl: Option<Var>,
    nll_value: f64,
    kl_value: f64,
    gen_tokens: Vec<u32>,
}

#[allow(clippy::too_many_arguments)]
fn student_pass(
    tape: &mut Tape,
    model: &BoundModel,
    enc: &EncoderStates,
    tgt: &[u32],
    history: HistoryMode<'_>,
    ref_alphas: Option<&[Tensor]>,
    eps_smooth: f64,
    sample_history: bool,
    stream: &mut ChaCha8Rng,
    dropout: &mut Option<DropoutCtx>,
) -> Result<StudentPass> {
    if tgt.is_empty() {
        return Err(Error::contract("student pass over an empty target"));
    }
    if let Some(alphas) = ref_alphas {
        if alphas.len() != tgt.len() {
            return Err(Error::contract(format!(
                "reference alignments cover {} steps, target has {}",
                alphas.len(),
                tgt.len()
            )));
        }
    }
    if let HistoryMode::Fixed(fixed) = &history {
        if fixed.len() != tgt.len() || fixed[0] != BOS {
            return Err(Error::contract(
                "fixed history must have target length and start with BOS",
            ));
        }
    }

    let mut state = init_decoder_state(tape, model, enc)?;
    let mut nll: Option<Var> = None;
    let mut kl: Option<Var> = None;
    let mut gen_tokens: Vec<u32> = Vec::with_capacity(tgt.len());
    for (t, &target) in tgt.iter().enumerate() {
        let prev = if t == 0 {
            BOS
        } else {
            match &history {
                HistoryMode::Reference => tgt[t - 1],
                HistoryMode::Generated => gen_tokens[t - 1],
                HistoryMode::Fixed(fixed) => fixed[t],
                HistoryMode::Mixed { eps } => {
                    if rng::next_f64(stream) < *eps {
                        tgt[t - 1]
                    } else {
                        gen_tokens[t - 1]
                    }
                }
            }
        };
        let context = match ref_alphas {
            Some(alphas) => {
                let leaf = tape.leaf(alphas[t].clone());
                ContextSource::Reference(leaf)
            }
            None => ContextSource::SelfAttention,
        };
        let out = decoder_step(tape, model, prev, &state, context, enc, dropout)?;

        let ce = tape.cross_entropy_from_logits(out.logits, target as usize)?;
        nll = Some(match nll {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
        if let Some(alphas) = ref_alphas {
            let p_leaf = tape.leaf(alphas[t].clone());
            let p = smooth_on_tape(tape, p_leaf, eps_smooth);
            let q = smooth_on_tape(tape, out.alpha, eps_smooth);
            let step_kl = tape.kl_categorical(p, q)?;
            kl = Some(match kl {
                Some(acc) => tape.add(acc, step_kl)?,
                None => step_kl,
            });
        }

        let emitted = if sample_history {
            let probs = tensor::softmax_slice(tape.value(out.logits).data());
            rng::sample_categorical(stream, &probs) as u32
        } else {
            tensor::argmax(tape.value(out.logits).data()) as u32
        };
        gen_tokens.push(emitted);
        state = out.state;
    }

    let nll = nll.expect("nonempty target");
    let nll_value = tape.scalar_value(nll)?;
    let kl_value = match kl {
        Some(v) => tape.scalar_value(v)?,
        None => 0.0,
    };
    Ok(StudentPass { nll, kl, nll_value, kl_value, gen_tokens })
}

// ── batch driver ─────────────────────────────────────────────────────

fn check_teacher(student: &ModelParams, teacher: &ModelParams) -> Result<()> {
    let (s, t) = (student.config(), teacher.config());
    if s.src_vocab != t.src_vocab || s.tgt_vocab != t.tgt_vocab {
        return Err(Error::config(format!(
            "teacher/student vocabulary mismatch: teacher {}x{}, student {}x{}",
            t.src_vocab, t.tgt_vocab, s.src_vocab, s.tgt_vocab
        )));
    }
    Ok(())
}

/// Run one regime step over a batch: per-sequence losses, their mean, and
/// (optionally) its gradients.
pub fn run_batch(
    params: &ModelParams,
    teacher: Option<&ModelParams>,
    batch: &Batch,
    regime: &RegimeConfig,
    ctx: &BatchCtx,
) -> Result<BatchOutcome> {
    regime.validate()?;
    if batch.size() == 0 {
        return Err(Error::contract("empty batch"));
    }
    let teacher = match (regime.mode.needs_teacher(), teacher) {
        (true, Some(t)) => {
            check_teacher(params, t)?;
            Some(t)
        }
        (true, None) => {
            return Err(Error::config(format!(
                "mode {} requires a frozen teacher model",
                regime.mode.name()
            )))
        }
        (false, t) => {
            debug_assert!(t.is_none() || !regime.mode.needs_teacher());
            None
        }
    };

    // Reference alignments from the frozen teacher, one tape for the batch.
    let ref_alphas: Option<Vec<Vec<Tensor>>> = match teacher {
        Some(t) => {
            let mut tape = Tape::new();
            let model = bind(&mut tape, t, false);
            let mut per_seq = Vec::with_capacity(batch.size());
            for i in 0..batch.size() {
                let (src, tgt) = batch.sequence(i);
                per_seq.push(teacher_alignments_on(&mut tape, &model, src, tgt)?);
            }
            Some(per_seq)
        }
        None => None,
    };

    let mut tape = Tape::new();
    let model = bind(&mut tape, params, ctx.want_grads);
    let mut records = Vec::with_capacity(batch.size());
    let mut seq_losses: Vec<Var> = Vec::with_capacity(batch.size());

    for i in 0..batch.size() {
        let (src, tgt) = batch.sequence(i);
        let seq = i as u64;
        let mut enc_drop = ctx.dropout_ctx(rng::tag::DROPOUT_ENC, seq);
        let enc = encode(&mut tape, &model, src, &mut enc_drop)?;
        let refs = ref_alphas.as_ref().map(|r| r[i].as_slice());

        let mut dec_drop_a = ctx.dropout_ctx(rng::tag::DROPOUT_DEC_A, seq);
        let mut stream_a = ctx.regime_stream(seq, 0);
        let (loss, record) = match regime.mode {
            Mode::TeacherForcing | Mode::FreeRunning | Mode::ScheduledSampling => {
                let history = match regime.mode {
                    Mode::TeacherForcing => HistoryMode::Reference,
                    Mode::FreeRunning => HistoryMode::Generated,
                    _ => HistoryMode::Mixed { eps: ctx.eps_ss },
                };
                let keep_rollout = !matches!(regime.mode, Mode::TeacherForcing);
                let pass = student_pass(
                    &mut tape,
                    &model,
                    &enc,
                    tgt,
                    history,
                    None,
                    regime.eps_smooth,
                    regime.sample_history,
                    &mut stream_a,
                    &mut dec_drop_a,
                )?;
                let record = PassRecord {
                    nll_sum: pass.nll_value,
                    att_kl_sum: 0.0,
                    chosen: None,
                    d_a: None,
                    d_b: None,
                    gen_tokens: if keep_rollout { pass.gen_tokens } else { Vec::new() },
                };
                (pass.nll, record)
            }
            Mode::VanillaAttentionForcing => {
                let pass = student_pass(
                    &mut tape,
                    &model,
                    &enc,
                    tgt,
                    HistoryMode::Generated,
                    refs,
                    regime.eps_smooth,
                    regime.sample_history,
                    &mut stream_a,
                    &mut dec_drop_a,
                )?;
                let kl = pass.kl.expect("attention loss present");
                let scaled = tape.scale(kl, regime.gamma);
                let joint = tape.add(pass.nll, scaled)?;
                let record = PassRecord {
                    nll_sum: pass.nll_value,
                    att_kl_sum: pass.kl_value,
                    chosen: None,
                    d_a: None,
                    d_b: None,
                    gen_tokens: pass.gen_tokens,
                };
                (joint, record)
            }
            Mode::AutomaticAttentionForcing => {
                let pass_a = student_pass(
                    &mut tape,
                    &model,
                    &enc,
                    tgt,
                    HistoryMode::Generated,
                    refs,
                    regime.eps_smooth,
                    regime.sample_history,
                    &mut stream_a,
                    &mut dec_drop_a,
                )?;
                let mut dec_drop_b = ctx.dropout_ctx(rng::tag::DROPOUT_DEC_B, seq);
                let mut stream_b = ctx.regime_stream(seq, 1);
                let pass_b = student_pass(
                    &mut tape,
                    &model,
                    &enc,
                    tgt,
                    HistoryMode::Reference,
                    refs,
                    regime.eps_smooth,
                    regime.sample_history,
                    &mut stream_b,
                    &mut dec_drop_b,
                )?;
                let (d_a, d_b) = (pass_a.kl_value, pass_b.kl_value);
                let choose_a = select_pass_a(regime.k, d_b, d_a);
                let (pass, choice) =
                    if choose_a { (&pass_a, PassChoice::A) } else { (&pass_b, PassChoice::B) };
                let kl = pass.kl.expect("attention loss present");
                let scaled = tape.scale(kl, regime.gamma);
                let joint = tape.add(pass.nll, scaled)?;
                let record = PassRecord {
                    nll_sum: pass.nll_value,
                    att_kl_sum: pass.kl_value,
                    chosen: Some(choice),
                    d_a: Some(d_a),
                    d_b: Some(d_b),
                    gen_tokens: pass_a.gen_tokens.clone(),
                };
                (joint, record)
            }
        };
        seq_losses.push(loss);
        records.push(record);
    }

    let mut acc = seq_losses[0];
    for &l in &seq_losses[1..] {
        acc = tape.add(acc, l)?;
    }
    let total = tape.scale(acc, 1.0 / batch.size() as f64);

    let grads = if ctx.want_grads {
        let g = tape.backward(total)?;
        Some(
            model
                .param_vars
                .iter()
                .map(|&v| g.get(v).expect("parameter gradient").clone())
                .collect(),
        )
    } else {
        None
    };

    let n = records.len() as f64;
    let nll = records.iter().map(|r| r.nll_sum).sum::<f64>() / n;
    let att_kl = regime
        .mode
        .needs_teacher()
        .then(|| records.iter().map(|r| r.att_kl_sum).sum::<f64>() / n);
    let pass_a_rate = matches!(regime.mode, Mode::AutomaticAttentionForcing).then(|| {
        records.iter().filter(|r| r.chosen == Some(PassChoice::A)).count() as f64 / n
    });
    Ok(BatchOutcome {
        loss: tape.scalar_value(total)?,
        nll,
        att_kl,
        pass_a_rate,
        records,
        grads,
    })
}

// ── spec-level wrappers ──────────────────────────────────────────────

/// Teacher-forcing NLL: sum over time, mean over the batch.
pub fn teacher_forcing_loss(batch: &Batch, params: &ModelParams, ctx: &BatchCtx) -> Result<f64> {
    let regime = RegimeConfig::new(Mode::TeacherForcing);
    Ok(run_batch(params, None, batch, &regime, ctx)?.loss)
}

/// Free-running NLL: generated history, reference targets.
pub fn free_running_loss(batch: &Batch, params: &ModelParams, ctx: &BatchCtx) -> Result<f64> {
    let regime = RegimeConfig::new(Mode::FreeRunning);
    Ok(run_batch(params, None, batch, &regime, ctx)?.loss)
}

/// Scheduled-sampling NLL at reference probability `eps_ss`.
pub fn scheduled_sampling_loss(
    batch: &Batch,
    params: &ModelParams,
    eps_ss: f64,
    ctx: &BatchCtx,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&eps_ss) {
        return Err(Error::config(format!("eps_ss must lie in [0, 1], got {eps_ss}")));
    }
    let regime = RegimeConfig::new(Mode::ScheduledSampling);
    let ctx = BatchCtx { eps_ss, ..ctx.clone() };
    Ok(run_batch(params, None, batch, &regime, &ctx)?.loss)
}

/// Vanilla attention forcing: joint loss `NLL + gamma * KL` and the
/// per-sequence records.
pub fn vanilla_af_losses(
    batch: &Batch,
    student: &ModelParams,
    teacher: &ModelParams,
    gamma: f64,
    ctx: &BatchCtx,
) -> Result<(f64, Vec<PassRecord>)> {
    let regime = RegimeConfig { gamma, ..RegimeConfig::new(Mode::VanillaAttentionForcing) };
    let out = run_batch(student, Some(teacher), batch, &regime, ctx)?;
    Ok((out.loss, out.records))
}

/// Automatic attention forcing: dual-pass selection at threshold `k`.
pub fn automatic_af_losses(
    batch: &Batch,
    student: &ModelParams,
    teacher: &ModelParams,
    gamma: f64,
    k: f64,
    ctx: &BatchCtx,
) -> Result<(f64, Vec<PassRecord>)> {
    let regime =
        RegimeConfig { gamma, k, ..RegimeConfig::new(Mode::AutomaticAttentionForcing) };
    let out = run_batch(student, Some(teacher), batch, &regime, ctx)?;
    Ok((out.loss, out.records))
}

/// Joint loss of a single sequence at a frozen decoder-input rollout
/// (`history[0]` = BOS), dropout off. This is the differentiable function
/// the tape gradient corresponds to, so finite differences of it are the
/// right oracle for gradient checks; it also evaluates either attention-
/// forcing branch by fixing the history to the generated or reference
/// rollout.
#[allow(clippy::too_many_arguments)]
pub fn sequence_loss_fixed_history(
    params: &ModelParams,
    src: &[u32],
    tgt: &[u32],
    history: &[u32],
    ref_alphas: Option<&[Tensor]>,
    gamma: f64,
    eps_smooth: f64,
    want_grads: bool,
) -> Result<(f64, Option<Vec<Tensor>>)> {
    let mut tape = Tape::new();
    let model = bind(&mut tape, params, want_grads);
    let enc = encode(&mut tape, &model, src, &mut None)?;
    let mut stream = rng::derive(0, &[rng::tag::REGIME]);
    let pass = student_pass(
        &mut tape,
        &model,
        &enc,
        tgt,
        HistoryMode::Fixed(history),
        ref_alphas,
        eps_smooth,
        false,
        &mut stream,
        &mut None,
    )?;
    let loss = match pass.kl {
        Some(kl) => {
            let scaled = tape.scale(kl, gamma);
            tape.add(pass.nll, scaled)?
        }
        None => pass.nll,
    };
    let value = tape.scalar_value(loss)?;
    let grads = if want_grads {
        let g = tape.backward(loss)?;
        Some(model.param_vars.iter().map(|&v| g.get(v).expect("param grad").clone()).collect())
    } else {
        None
    };
    Ok((value, grads))
}

/// The generated rollout a vanilla/pass-A run would use at these
/// parameters (argmax history, dropout off), as decoder inputs including
/// the leading BOS.
pub fn generated_history(
    params: &ModelParams,
    teacher: &ModelParams,
    src: &[u32],
    tgt: &[u32],
    eps_smooth: f64,
) -> Result<Vec<u32>> {
    let alphas = teacher_alignments(teacher, src, tgt)?;
    let mut tape = Tape::new();
    let model = bind(&mut tape, params, false);
    let enc = encode(&mut tape, &model, src, &mut None)?;
    let mut stream = rng::derive(0, &[rng::tag::REGIME]);
    let pass = student_pass(
        &mut tape,
        &model,
        &enc,
        tgt,
        HistoryMode::Generated,
        Some(&alphas),
        eps_smooth,
        false,
        &mut stream,
        &mut None,
    )?;
    let mut history = Vec::with_capacity(tgt.len());
    history.push(BOS);
    history.extend_from_slice(&pass.gen_tokens[..tgt.len() - 1]);
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{self, SyntheticTask};
    use crate::model::ModelConfig;

    fn tiny_model(seed: u64) -> ModelParams {
        let cfg = ModelConfig {
            src_vocab: 9,
            tgt_vocab: 9,
            d_emb: 5,
            d_hidden: 6,
            enc_layers: 1,
            dec_layers: 1,
            init_range: 0.3,
        };
        ModelParams::init(&cfg, seed).unwrap()
    }

    fn tiny_batch(seed: u64) -> Batch {
        let corpus = data::gen_synthetic(SyntheticTask::Copy, 4, seed, (2, 4), 5).unwrap();
        let side: Vec<Vec<alloc::string::String>> =
            corpus.pairs.iter().map(|(s, _)| s.clone()).collect();
        let vocab = data::Vocab::build(&side, 1, None);
        let (batches, _) =
            data::make_batches(&corpus, &vocab, &vocab, 16, 1, false, None).unwrap();
        batches.into_iter().next().unwrap()
    }

    #[test]
    fn smoothing_examples() {
        let eps = math::exp(-10.0);
        let smoothed = smooth_alignment(&Tensor::vector(alloc::vec![1.0, 0.0]), eps).unwrap();
        assert!((smoothed.data()[0] - (1.0 - eps / 2.0)).abs() < 1e-18);
        assert!((smoothed.data()[1] - eps / 2.0).abs() < 1e-18);

        let alpha = Tensor::vector(alloc::vec![0.3, 0.7]);
        assert_eq!(smooth_alignment(&alpha, 0.0).unwrap(), alpha);

        let uniform = Tensor::vector(alloc::vec![0.25; 4]);
        let out = smooth_alignment(&uniform, 0.37).unwrap();
        for &v in out.data() {
            assert!((v - 0.25).abs() < 1e-16, "uniform must be a fixed point");
        }
    }

    #[test]
    fn smoothing_stays_on_simplex_and_positive() {
        let eps = math::exp(-10.0);
        let out = smooth_alignment(&Tensor::vector(alloc::vec![0.0, 0.0, 1.0]), eps).unwrap();
        let sum: f64 = out.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(out.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn selection_rule_cases() {
        assert!(select_pass_a(f64::INFINITY, 0.0, 5.0), "k=inf always picks A");
        assert!(!select_pass_a(0.0, 0.7, 0.2), "k=0 never picks A");
        assert!(select_pass_a(3.0, 0.1, 0.25), "3 * 0.1 > 0.25");
        assert!(!select_pass_a(2.0, 0.1, 0.2), "tie goes to pass B");
    }

    #[test]
    fn ss_epsilon_is_linear_and_monotone() {
        let regime = RegimeConfig::new(Mode::ScheduledSampling);
        assert_eq!(regime.ss_epsilon(0, 5), 1.0);
        assert_eq!(regime.ss_epsilon(4, 5), 0.0);
        assert!((regime.ss_epsilon(2, 5) - 0.5).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for j in 0..5 {
            let e = regime.ss_epsilon(j, 5);
            assert!(e <= last);
            last = e;
        }
    }

    #[test]
    fn untrained_tf_loss_is_near_uniform_baseline() {
        let params = tiny_model(3);
        let corpus = data::gen_synthetic(SyntheticTask::Copy, 6, 8, (4, 4), 5).unwrap();
        let side: Vec<Vec<alloc::string::String>> =
            corpus.pairs.iter().map(|(s, _)| s.clone()).collect();
        let vocab = data::Vocab::build(&side, 1, None);
        let (batches, _) = data::make_batches(&corpus, &vocab, &vocab, 16, 1, false, None).unwrap();
        let loss = teacher_forcing_loss(&batches[0], &params, &BatchCtx::eval(0)).unwrap();
        // T = 5 (4 tokens + EOS), V = 9; near-uniform logits at small init.
        let uniform = 5.0 * math::ln(9.0);
        assert!((loss - uniform).abs() / uniform < 0.05, "loss {loss} vs uniform {uniform}");
    }

    #[test]
    fn empty_batch_is_a_contract_error() {
        let params = tiny_model(3);
        let empty = Batch {
            src: alloc::vec![],
            tgt: alloc::vec![],
            src_len: alloc::vec![],
            tgt_len: alloc::vec![],
            src_mask: alloc::vec![],
            tgt_mask: alloc::vec![],
        };
        let err = teacher_forcing_loss(&empty, &params, &BatchCtx::eval(0)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn gamma_zero_reduces_joint_to_nll() {
        let student = tiny_model(3);
        let teacher = tiny_model(4);
        let batch = tiny_batch(5);
        let (joint, records) =
            vanilla_af_losses(&batch, &student, &teacher, 0.0, &BatchCtx::eval(0)).unwrap();
        let nll_mean: f64 =
            records.iter().map(|r| r.nll_sum).sum::<f64>() / records.len() as f64;
        assert_eq!(joint, nll_mean);
        assert!(records.iter().all(|r| r.att_kl_sum >= 0.0));
    }

    #[test]
    fn gamma_scales_the_attention_term_exactly() {
        let student = tiny_model(3);
        let teacher = tiny_model(4);
        let batch = tiny_batch(5);
        let ctx = BatchCtx::eval(0);
        let (joint0, records) = vanilla_af_losses(&batch, &student, &teacher, 0.0, &ctx).unwrap();
        let (joint10, _) = vanilla_af_losses(&batch, &student, &teacher, 10.0, &ctx).unwrap();
        let kl_mean: f64 =
            records.iter().map(|r| r.att_kl_sum).sum::<f64>() / records.len() as f64;
        assert!((joint10 - (joint0 + 10.0 * kl_mean)).abs() < 1e-9);
    }

    #[test]
    fn tied_student_with_reference_history_has_zero_kl() {
        let params = tiny_model(3);
        let batch = tiny_batch(5);
        let (src, tgt) = batch.sequence(0);
        let alphas = teacher_alignments(&params, src, tgt).unwrap();
        let mut history = alloc::vec![BOS];
        history.extend_from_slice(&tgt[..tgt.len() - 1]);
        let eps = math::exp(-10.0);
        // gamma = 1e6 would explode the loss if KL were nonzero.
        let (with_kl, _) = sequence_loss_fixed_history(
            &params,
            src,
            tgt,
            &history,
            Some(&alphas),
            1e6,
            eps,
            false,
        )
        .unwrap();
        let (without, _) =
            sequence_loss_fixed_history(&params, src, tgt, &history, Some(&alphas), 0.0, eps, false)
                .unwrap();
        assert!((with_kl - without).abs() < 1e-9, "KL term must vanish");
    }

    #[test]
    fn aaf_with_infinite_k_matches_vaf_bit_exactly() {
        let student = tiny_model(3);
        let teacher = tiny_model(4);
        let batch = tiny_batch(5);
        let mut ctx = BatchCtx::eval(7);
        ctx.dropout = 0.2; // exercise the dropout streams too
        let (vaf, vaf_records) =
            vanilla_af_losses(&batch, &student, &teacher, 10.0, &ctx).unwrap();
        let (aaf, aaf_records) =
            automatic_af_losses(&batch, &student, &teacher, 10.0, f64::INFINITY, &ctx).unwrap();
        assert_eq!(vaf.to_bits(), aaf.to_bits(), "losses must be bit-identical");
        for (v, a) in vaf_records.iter().zip(&aaf_records) {
            assert_eq!(a.chosen, Some(PassChoice::A));
            assert_eq!(v.nll_sum.to_bits(), a.nll_sum.to_bits());
            assert_eq!(v.att_kl_sum.to_bits(), a.att_kl_sum.to_bits());
            assert_eq!(v.gen_tokens, a.gen_tokens);
        }
    }

    #[test]
    fn aaf_with_zero_k_always_selects_pass_b() {
        let student = tiny_model(3);
        let teacher = tiny_model(4);
        let batch = tiny_batch(5);
        let (_, records) =
            automatic_af_losses(&batch, &student, &teacher, 10.0, 0.0, &BatchCtx::eval(0)).unwrap();
        assert!(records.iter().all(|r| r.chosen == Some(PassChoice::B)));
    }

    #[test]
    fn aaf_kl_sums_are_nonnegative() {
        let student = tiny_model(3);
        let teacher = tiny_model(4);
        let batch = tiny_batch(5);
        let (_, records) =
            automatic_af_losses(&batch, &student, &teacher, 10.0, 3.0, &BatchCtx::eval(0)).unwrap();
        for r in &records {
            let t = r.gen_tokens.len() as f64;
            assert!(r.d_a.unwrap() >= -t * 1e-12);
            assert!(r.d_b.unwrap() >= -t * 1e-12);
        }
    }

    #[test]
    fn negative_k_is_a_config_error() {
        let student = tiny_model(3);
        let teacher = tiny_model(4);
        let batch = tiny_batch(5);
        let err = automatic_af_losses(&batch, &student, &teacher, 10.0, -1.0, &BatchCtx::eval(0))
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn missing_teacher_is_a_config_error() {
        let student = tiny_model(3);
        let batch = tiny_batch(5);
        let regime = RegimeConfig::new(Mode::AutomaticAttentionForcing);
        let err = run_batch(&student, None, &batch, &regime, &BatchCtx::eval(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn scheduled_sampling_endpoints() {
        let params = tiny_model(3);
        let batch = tiny_batch(5);
        let ctx = BatchCtx::eval(0);
        let ss1 = scheduled_sampling_loss(&batch, &params, 1.0, &ctx).unwrap();
        let tf = teacher_forcing_loss(&batch, &params, &ctx).unwrap();
        assert_eq!(ss1.to_bits(), tf.to_bits(), "eps_ss = 1 is teacher forcing");

        let ss0 = scheduled_sampling_loss(&batch, &params, 0.0, &ctx).unwrap();
        let fr = free_running_loss(&batch, &params, &ctx).unwrap();
        assert_eq!(ss0.to_bits(), fr.to_bits(), "eps_ss = 0 is free running");

        let again = scheduled_sampling_loss(&batch, &params, 0.5, &ctx).unwrap();
        let again2 = scheduled_sampling_loss(&batch, &params, 0.5, &ctx).unwrap();
        assert_eq!(again.to_bits(), again2.to_bits(), "seeded draws reproduce");
    }

    #[test]
    fn teacher_is_untouched_by_student_updates() {
        let student = tiny_model(3);
        let teacher = tiny_model(4);
        let snapshot = teacher.clone();
        let batch = tiny_batch(5);
        let mut ctx = BatchCtx::eval(0);
        ctx.want_grads = true;
        let regime = RegimeConfig::new(Mode::AutomaticAttentionForcing);
        let out = run_batch(&student, Some(&teacher), &batch, &regime, &ctx).unwrap();
        assert!(out.grads.is_some());
        assert_eq!(teacher, snapshot);
    }

    #[test]
    fn pass_orders_are_value_identical() {
        // Pass A and pass B share parameters read-only; computing them in
        // isolation reproduces the combined run's values exactly.
        let student = tiny_model(3);
        let teacher = tiny_model(4);
        let batch = tiny_batch(5);
        let ctx = BatchCtx::eval(0);
        let (_, combined) =
            automatic_af_losses(&batch, &student, &teacher, 10.0, 3.0, &ctx).unwrap();
        let (_, only_a) =
            automatic_af_losses(&batch, &student, &teacher, 10.0, f64::INFINITY, &ctx).unwrap();
        let (_, only_b) =
            automatic_af_losses(&batch, &student, &teacher, 10.0, 0.0, &ctx).unwrap();
        for i in 0..combined.len() {
            assert_eq!(combined[i].d_a.unwrap().to_bits(), only_a[i].att_kl_sum.to_bits());
            assert_eq!(combined[i].d_b.unwrap().to_bits(), only_b[i].att_kl_sum.to_bits());
        }
    }
}
