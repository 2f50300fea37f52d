//! Inference-time generation in free running mode: greedy, beam, and
//! ancestral sampling search over the model's own alignments.

use alloc::vec::Vec;

use crate::autodiff::Tape;
use crate::data::{BOS, EOS};
use crate::error::Error;
use crate::math;
use crate::model::{
    bind, decoder_step, encode, init_decoder_state, ContextSource, DecoderState, ModelParams,
};
use crate::rng;
use crate::tensor::{self, Tensor};
use crate::Result;

/// A (possibly partial) decode. `finished` means the model emitted EOS;
/// `log_prob` then includes the EOS step. `tokens` never contains EOS.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
    /// Entropy of the step distribution for every emitted step (EOS step
    /// included when finished).
    pub entropies: Vec<f64>,
}

/// Default rollout cap when a caller has no better bound.
pub fn default_max_len(source_len: usize) -> usize {
    2 * source_len + 10
}

/// Entropy `-sum p ln p` of a categorical distribution (nats).
pub fn step_entropy(dist: &Tensor) -> Result<f64> {
    if dist.rank() != 1 || dist.numel() == 0 {
        return Err(Error::domain("step_entropy", "nonempty rank-1 distribution required"));
    }
    let sum: f64 = dist.data().iter().sum();
    if math::abs(sum - 1.0) > crate::autodiff::SIMPLEX_TOL
        || dist.data().iter().any(|&p| p < -crate::autodiff::SIMPLEX_TOL)
    {
        return Err(Error::domain(
            "step_entropy",
            alloc::format!("distribution not on the simplex (sum = {sum})"),
        ));
    }
    Ok(entropy_of(dist.data()))
}

fn entropy_of(probs: &[f64]) -> f64 {
    probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * math::ln(p)).sum()
}

struct BeamEntry {
    tokens: Vec<u32>,
    log_prob: f64,
    finished: bool,
    entropies: Vec<f64>,
    state: Option<DecoderState>,
}

impl BeamEntry {
    fn into_hypothesis(self) -> Hypothesis {
        Hypothesis {
            tokens: self.tokens,
            log_prob: self.log_prob,
            finished: self.finished,
            entropies: self.entropies,
        }
    }
}

/// Standard beam search over cumulative log-probabilities. `beam_size = 1`
/// is greedy search. No length normalization unless asked for; with the
/// paper-default beam of 1 it makes no difference.
pub fn beam_search(
    src: &[u32],
    params: &ModelParams,
    beam_size: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    beam_search_opts(src, params, beam_size, max_len, false)
}

pub fn beam_search_opts(
    src: &[u32],
    params: &ModelParams,
    beam_size: usize,
    max_len: usize,
    length_normalize: bool,
) -> Result<Hypothesis> {
    if beam_size == 0 {
        return Err(Error::config("beam_size must be >= 1"));
    }
    if max_len == 0 {
        return Err(Error::config("max_len must be >= 1"));
    }
    let mut tape = Tape::new();
    let model = bind(&mut tape, params, false);
    let enc = encode(&mut tape, &model, src, &mut None)?;
    let state = init_decoder_state(&mut tape, &model, &enc)?;

    let mut beam = Vec::with_capacity(beam_size);
    beam.push(BeamEntry {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
        entropies: Vec::new(),
        state: Some(state),
    });

    for _ in 0..max_len {
        if beam.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates: Vec<BeamEntry> = Vec::with_capacity(beam.len() * (beam_size + 1));
        for entry in beam {
            if entry.finished {
                candidates.push(entry);
                continue;
            }
            let prev = *entry.tokens.last().unwrap_or(&BOS);
            let state = entry.state.as_ref().expect("live hypothesis keeps state");
            let out = decoder_step(
                &mut tape,
                &model,
                prev,
                state,
                ContextSource::SelfAttention,
                &enc,
                &mut None,
            )?;
            let logits = tape.value(out.logits).data();
            let lse = tensor::log_sum_exp(logits);
            let entropy = entropy_of(&tensor::softmax_slice(logits));

            // Top `beam_size` tokens of this hypothesis, by step log-prob.
            let mut order: Vec<usize> = (0..logits.len()).collect();
            order.sort_by(|&a, &b| {
                logits[b].partial_cmp(&logits[a]).unwrap_or(core::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            for &tok in order.iter().take(beam_size) {
                let step_lp = logits[tok] - lse;
                let finished = tok as u32 == EOS;
                let mut tokens = entry.tokens.clone();
                if !finished {
                    tokens.push(tok as u32);
                }
                let mut entropies = entry.entropies.clone();
                entropies.push(entropy);
                candidates.push(BeamEntry {
                    tokens,
                    log_prob: entry.log_prob + step_lp,
                    finished,
                    entropies,
                    state: if finished { None } else { Some(out.state.clone()) },
                });
            }
        }
        candidates.sort_by(|a, b| {
            let (sa, sb) = if length_normalize {
                (a.log_prob / a.entropies.len().max(1) as f64,
                 b.log_prob / b.entropies.len().max(1) as f64)
            } else {
                (a.log_prob, b.log_prob)
            };
            sb.partial_cmp(&sa)
                .unwrap_or(core::cmp::Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(beam_size);
        beam = candidates;
    }

    let best = beam
        .into_iter()
        .max_by(|a, b| {
            a.log_prob.partial_cmp(&b.log_prob).unwrap_or(core::cmp::Ordering::Equal)
                .then_with(|| b.tokens.cmp(&a.tokens))
        })
        .expect("beam never empty");
    Ok(best.into_hypothesis())
}

/// Greedy search: beam of one.
pub fn greedy_decode(src: &[u32], params: &ModelParams, max_len: usize) -> Result<Hypothesis> {
    beam_search(src, params, 1, max_len)
}

/// Ancestral sampling from the per-step distributions, deterministic per
/// seed.
pub fn sampling_search(
    src: &[u32],
    params: &ModelParams,
    seed: u64,
    max_len: usize,
) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::config("max_len must be >= 1"));
    }
    let mut stream = rng::derive(seed, &[rng::tag::SAMPLING]);
    let mut tape = Tape::new();
    let model = bind(&mut tape, params, false);
    let enc = encode(&mut tape, &model, src, &mut None)?;
    let mut state = init_decoder_state(&mut tape, &model, &enc)?;

    let mut hyp =
        Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false, entropies: Vec::new() };
    let mut prev = BOS;
    for _ in 0..max_len {
        let out = decoder_step(
            &mut tape,
            &model,
            prev,
            &state,
            ContextSource::SelfAttention,
            &enc,
            &mut None,
        )?;
        let logits = tape.value(out.logits).data();
        let probs = tensor::softmax_slice(logits);
        let tok = rng::sample_categorical(&mut stream, &probs) as u32;
        hyp.log_prob += math::ln(probs[tok as usize]);
        hyp.entropies.push(entropy_of(&probs));
        if tok == EOS {
            hyp.finished = true;
            break;
        }
        hyp.tokens.push(tok);
        state = out.state;
        prev = tok;
    }
    Ok(hyp)
}

/// Re-score a finished output under its own history: per-step log-probs of
/// `tokens` (plus the EOS step when `include_eos`). The states reproduce
/// the free-running decode of the same tokens exactly.
pub fn rescore(
    src: &[u32],
    params: &ModelParams,
    tokens: &[u32],
    include_eos: bool,
) -> Result<f64> {
    let mut tape = Tape::new();
    let model = bind(&mut tape, params, false);
    let enc = encode(&mut tape, &model, src, &mut None)?;
    let mut state = init_decoder_state(&mut tape, &model, &enc)?;
    let mut prev = BOS;
    let mut total = 0.0;
    let score_step = |tape: &mut Tape, state: &DecoderState, prev: u32, tok: u32| -> Result<(f64, DecoderState)> {
        let out =
            decoder_step(tape, &model, prev, state, ContextSource::SelfAttention, &enc, &mut None)?;
        let logits = tape.value(out.logits).data();
        let lp = logits[tok as usize] - tensor::log_sum_exp(logits);
        Ok((lp, out.state))
    };
    for &tok in tokens {
        let (lp, next) = score_step(&mut tape, &state, prev, tok)?;
        total += lp;
        state = next;
        prev = tok;
    }
    if include_eos {
        let (lp, _) = score_step(&mut tape, &state, prev, EOS)?;
        total += lp;
    }
    Ok(total)
}
