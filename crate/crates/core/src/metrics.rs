//! Corpus BLEU (1–4 grams, clipped counts, brevity penalty), pairwise
//! BLEU over sampled output groups, and mean step entropy.
//!
//! The BLEU here follows the usual multi-bleu convention: corpus-level
//! clipped n-gram counts, geometric mean of the four precisions, a hard
//! zero when any precision is zero (no smoothing), case-sensitive
//! whitespace tokens, single reference.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::Error;
use crate::math;
use crate::Result;

pub const MAX_NGRAM: usize = 4;

/// Corpus BLEU with its components. `bleu` lives in `[0, 100]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; MAX_NGRAM],
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuReport {
    /// `key: value` lines, one per field.
    pub fn render(&self) -> alloc::string::String {
        use core::fmt::Write;
        let mut out = alloc::string::String::new();
        let _ = writeln!(out, "bleu: {:.4}", self.bleu);
        for (i, p) in self.precisions.iter().enumerate() {
            let _ = writeln!(out, "p{}: {:.6}", i + 1, p);
        }
        let _ = writeln!(out, "brevity_penalty: {:.6}", self.brevity_penalty);
        let _ = writeln!(out, "candidate_len: {}", self.candidate_len);
        let _ = writeln!(out, "reference_len: {}", self.reference_len);
        out
    }
}

fn ngram_counts<T: Ord>(tokens: &[T], n: usize) -> BTreeMap<&[T], u64> {
    let mut counts: BTreeMap<&[T], u64> = BTreeMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU of aligned candidate/reference token sequences.
/// Empty candidates contribute length 0 and no n-grams (not an error).
pub fn corpus_bleu<T: Ord>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuReport> {
    if candidates.is_empty() {
        return Err(Error::contract("corpus_bleu over an empty corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::contract(alloc::format!(
            "candidate/reference counts differ: {} vs {}",
            candidates.len(),
            references.len()
        )));
    }
    let mut correct = [0u64; MAX_NGRAM];
    let mut total = [0u64; MAX_NGRAM];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, reference) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += reference.len();
        for n in 1..=MAX_NGRAM {
            let cand_counts = ngram_counts(cand, n);
            if cand_counts.is_empty() {
                continue;
            }
            let ref_counts = ngram_counts(reference, n);
            for (gram, &count) in &cand_counts {
                total[n - 1] += count;
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                correct[n - 1] += count.min(clip);
            }
        }
    }

    let mut precisions = [0.0; MAX_NGRAM];
    let mut log_sum = 0.0;
    let mut any_zero = false;
    for n in 0..MAX_NGRAM {
        if total[n] > 0 {
            precisions[n] = correct[n] as f64 / total[n] as f64;
        }
        if correct[n] == 0 {
            any_zero = true;
        } else {
            log_sum += math::ln(precisions[n]);
        }
    }
    let brevity_penalty = if cand_len == 0 {
        0.0
    } else if cand_len < ref_len {
        math::exp(1.0 - ref_len as f64 / cand_len as f64)
    } else {
        1.0
    };
    let bleu = if any_zero || cand_len == 0 {
        0.0
    } else {
        brevity_penalty * math::exp(log_sum / MAX_NGRAM as f64) * 100.0
    };
    Ok(BleuReport { bleu, precisions, brevity_penalty, candidate_len: cand_len, reference_len: ref_len })
}

/// Mean corpus BLEU over all ordered pairs of `M >= 2` output groups that
/// are aligned to the same source set:
/// `1/(M(M-1)) * sum_{n != m} BLEU(group_n, group_m)`.
pub fn pairwise_bleu<T: Ord>(groups: &[Vec<Vec<T>>]) -> Result<f64> {
    let m = groups.len();
    if m < 2 {
        return Err(Error::contract("pairwise_bleu needs at least two groups"));
    }
    let size = groups[0].len();
    if groups.iter().any(|g| g.len() != size) {
        return Err(Error::contract("pairwise_bleu groups must be aligned (equal sizes)"));
    }
    let mut sum = 0.0;
    for a in 0..m {
        for b in 0..m {
            if a != b {
                sum += corpus_bleu(&groups[a], &groups[b])?.bleu;
            }
        }
    }
    Ok(sum / (m * (m - 1)) as f64)
}

/// Arithmetic mean over all recorded steps of all sentences (one flat
/// average, not a mean of per-sentence means).
pub fn mean_entropy(records: &[Vec<f64>]) -> Result<f64> {
    let count: usize = records.iter().map(Vec::len).sum();
    if count == 0 {
        return Err(Error::contract("mean_entropy over zero recorded steps"));
    }
    let sum: f64 = records.iter().flatten().sum();
    Ok(sum / count as f64)
}
