//! Vocabulary construction, synthetic parallel corpora, and batching.
//!
//! Token ids 0..=3 are reserved: PAD, BOS, EOS, UNK. Targets carry an
//! implicit BOS (the decoder's first input) and an explicit EOS as their
//! final position. Sources are encoded as-is.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::rng;
use crate::Result;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

const RESERVED: [&str; 4] = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];

/// Whitespace tokenization; the corpora here make this lossless.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(ToString::to_string).collect()
}

/// Token table with fixed reserved ids. Ids and tokens are a bijection.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: BTreeMap<String, u32>,
}

impl Vocab {
    /// Frequency-sorted vocabulary over one corpus side. Ties break
    /// lexicographically; tokens seen fewer than `min_count` times (or past
    /// `max_size`, which includes the 4 reserved ids) map to UNK.
    pub fn build(side: &[Vec<String>], min_count: usize, max_size: Option<usize>) -> Vocab {
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for sentence in side {
            for token in sentence {
                *counts.entry(token.as_str()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|&(token, count)| count as usize >= min_count.max(1) && !RESERVED.contains(&token))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let budget = max_size.map(|m| m.saturating_sub(RESERVED.len()));
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for (i, (token, _)) in ranked.into_iter().enumerate() {
            if let Some(b) = budget {
                if i >= b {
                    break;
                }
            }
            id_to_token.push(token.to_string());
        }
        Self::from_tokens_unchecked(id_to_token)
    }

    /// Rebuild from a saved token list (one token per id, in id order).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < RESERVED.len() {
            return Err(Error::config("vocabulary shorter than the reserved id range"));
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::config(format!(
                    "reserved id {i} must be {want}, got {}",
                    tokens[i]
                )));
            }
        }
        let unique: BTreeSet<&String> = tokens.iter().collect();
        if unique.len() != tokens.len() {
            return Err(Error::config("duplicate token in vocabulary"));
        }
        Ok(Self::from_tokens_unchecked(tokens))
    }

    fn from_tokens_unchecked(id_to_token: Vec<String>) -> Vocab {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { id_to_token, token_to_id }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.id_to_token
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(UNK_TOKEN)
    }

    /// Tokens in id order, including the reserved ones.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

// ── corpora ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Aligned (source tokens, target tokens) pairs. Pairs with an empty side
/// are dropped at construction.
#[derive(Debug, Clone)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<String>, Vec<String>)>,
    pub split: Split,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<(Vec<String>, Vec<String>)>, split: Split) -> ParallelCorpus {
        let pairs = pairs
            .into_iter()
            .filter(|(s, t)| !s.is_empty() && !t.is_empty())
            .collect();
        ParallelCorpus { pairs, split }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &Vec<String>> {
        self.pairs.iter().map(|(s, _)| s)
    }

    pub fn targets(&self) -> impl Iterator<Item = &Vec<String>> {
        self.pairs.iter().map(|(_, t)| t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticTask {
    Copy,
    Reverse,
    Sort,
    Num2Word,
}

impl SyntheticTask {
    pub fn parse(name: &str) -> Result<SyntheticTask> {
        match name {
            "copy" => Ok(SyntheticTask::Copy),
            "reverse" => Ok(SyntheticTask::Reverse),
            "sort" => Ok(SyntheticTask::Sort),
            "num2word" => Ok(SyntheticTask::Num2Word),
            other => Err(Error::config(format!(
                "unknown synthetic task {other:?} (expected copy, reverse, sort or num2word)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SyntheticTask::Copy => "copy",
            SyntheticTask::Reverse => "reverse",
            SyntheticTask::Sort => "sort",
            SyntheticTask::Num2Word => "num2word",
        }
    }
}

const DIGIT_WORDS: [&str; 10] =
    ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

fn task_alphabet(task: SyntheticTask, alphabet_size: usize) -> Result<Vec<String>> {
    match task {
        SyntheticTask::Num2Word => {
            if alphabet_size == 0 || alphabet_size > 10 {
                return Err(Error::config(format!(
                    "num2word supports alphabet sizes 1..=10, got {alphabet_size}"
                )));
            }
            Ok((0..alphabet_size).map(|d| d.to_string()).collect())
        }
        _ => {
            if alphabet_size == 0 || alphabet_size > 26 {
                return Err(Error::config(format!(
                    "letter tasks support alphabet sizes 1..=26, got {alphabet_size}"
                )));
            }
            Ok((0..alphabet_size)
                .map(|i| char::from(b'a' + i as u8).to_string())
                .collect())
        }
    }
}

fn task_target(task: SyntheticTask, source: &[String]) -> Vec<String> {
    match task {
        SyntheticTask::Copy => source.to_vec(),
        SyntheticTask::Reverse => source.iter().rev().cloned().collect(),
        SyntheticTask::Sort => {
            let mut t = source.to_vec();
            t.sort();
            t
        }
        SyntheticTask::Num2Word => source
            .iter()
            .map(|d| DIGIT_WORDS[d.parse::<usize>().expect("digit token")].to_string())
            .collect(),
    }
}

fn draw_source(
    stream: &mut ChaCha8Rng,
    alphabet: &[String],
    len_range: (usize, usize),
) -> Vec<String> {
    let (lo, hi) = len_range;
    let len = lo + rng::below(stream, hi - lo + 1);
    (0..len).map(|_| alphabet[rng::below(stream, alphabet.len())].clone()).collect()
}

/// Deterministic synthetic corpus for one split tag.
pub fn gen_synthetic(
    task: SyntheticTask,
    n_pairs: usize,
    seed: u64,
    len_range: (usize, usize),
    alphabet_size: usize,
) -> Result<ParallelCorpus> {
    let splits = gen_synthetic_splits(task, (n_pairs, 0, 0), seed, len_range, alphabet_size)?;
    Ok(splits.0)
}

/// Train/dev/test corpora with pairwise-disjoint source sequences, all
/// derived from one seed.
pub fn gen_synthetic_splits(
    task: SyntheticTask,
    sizes: (usize, usize, usize),
    seed: u64,
    len_range: (usize, usize),
    alphabet_size: usize,
) -> Result<(ParallelCorpus, ParallelCorpus, ParallelCorpus)> {
    let (lo, hi) = len_range;
    if lo == 0 || lo > hi {
        return Err(Error::config(format!("invalid length range {lo}..={hi}")));
    }
    let alphabet = task_alphabet(task, alphabet_size)?;
    let total = sizes.0 + sizes.1 + sizes.2;
    let mut stream = rng::derive(seed, &[rng::tag::SYNTH]);
    let mut seen: BTreeSet<Vec<String>> = BTreeSet::new();
    let mut sources: Vec<Vec<String>> = Vec::with_capacity(total);
    let mut attempts: usize = 0;
    let attempt_cap = 1000 * total.max(1);
    while sources.len() < total {
        attempts += 1;
        if attempts > attempt_cap {
            return Err(Error::config(format!(
                "could not draw {total} distinct sources from this task space"
            )));
        }
        let s = draw_source(&mut stream, &alphabet, len_range);
        if seen.insert(s.clone()) {
            sources.push(s);
        }
    }
    let make = |range: core::ops::Range<usize>, split| {
        let pairs = sources[range]
            .iter()
            .map(|s| (s.clone(), task_target(task, s)))
            .collect();
        ParallelCorpus::new(pairs, split)
    };
    let train = make(0..sizes.0, Split::Train);
    let dev = make(sizes.0..sizes.0 + sizes.1, Split::Dev);
    let test = make(sizes.0 + sizes.1..total, Split::Test);
    Ok((train, dev, test))
}

// ── batching ─────────────────────────────────────────────────────────

/// Encode a corpus to id pairs; target rows get EOS appended.
pub fn encode_corpus(
    corpus: &ParallelCorpus,
    vocab_src: &Vocab,
    vocab_tgt: &Vocab,
) -> Vec<(Vec<u32>, Vec<u32>)> {
    corpus
        .pairs
        .iter()
        .map(|(s, t)| {
            let mut tgt = vocab_tgt.encode(t);
            tgt.push(EOS);
            (vocab_src.encode(s), tgt)
        })
        .collect()
}

/// Padded token-id matrices with explicit lengths and masks.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B][L_max]`, PAD-filled past each row's length.
    pub src: Vec<Vec<u32>>,
    /// `[B][T_max]`, each row ends with EOS then PAD-fill.
    pub tgt: Vec<Vec<u32>>,
    pub src_len: Vec<usize>,
    pub tgt_len: Vec<usize>,
    pub src_mask: Vec<Vec<bool>>,
    pub tgt_mask: Vec<Vec<bool>>,
}

impl Batch {
    fn from_rows(rows: &[(Vec<u32>, Vec<u32>)]) -> Batch {
        let l_max = rows.iter().map(|(s, _)| s.len()).max().unwrap_or(0);
        let t_max = rows.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
        let mut batch = Batch {
            src: Vec::with_capacity(rows.len()),
            tgt: Vec::with_capacity(rows.len()),
            src_len: Vec::with_capacity(rows.len()),
            tgt_len: Vec::with_capacity(rows.len()),
            src_mask: Vec::with_capacity(rows.len()),
            tgt_mask: Vec::with_capacity(rows.len()),
        };
        for (s, t) in rows {
            let mut srow = s.clone();
            srow.resize(l_max, PAD);
            let mut trow = t.clone();
            trow.resize(t_max, PAD);
            batch.src_mask.push((0..l_max).map(|i| i < s.len()).collect());
            batch.tgt_mask.push((0..t_max).map(|i| i < t.len()).collect());
            batch.src_len.push(s.len());
            batch.tgt_len.push(t.len());
            batch.src.push(srow);
            batch.tgt.push(trow);
        }
        batch
    }

    pub fn size(&self) -> usize {
        self.src.len()
    }

    /// The `i`-th pair trimmed to its true lengths (no padding).
    pub fn sequence(&self, i: usize) -> (&[u32], &[u32]) {
        (&self.src[i][..self.src_len[i]], &self.tgt[i][..self.tgt_len[i]])
    }
}

/// Batches over pre-encoded id pairs: deterministic shuffle under the
/// given stream, optional length bucketing, over-long pairs skipped (the
/// count is returned alongside).
pub fn batches_from_ids(
    pairs: &[(Vec<u32>, Vec<u32>)],
    batch_size: usize,
    stream: &mut ChaCha8Rng,
    sort_by_length: bool,
    max_len: Option<usize>,
) -> Result<(Vec<Batch>, usize)> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let mut keep: Vec<usize> = Vec::with_capacity(pairs.len());
    let mut skipped = 0usize;
    for (i, (s, t)) in pairs.iter().enumerate() {
        let over = max_len.map(|m| s.len() > m || t.len() > m).unwrap_or(false);
        if over {
            skipped += 1;
        } else {
            keep.push(i);
        }
    }
    rng::shuffle(stream, &mut keep);
    if sort_by_length {
        keep.sort_by_key(|&i| pairs[i].0.len());
    }
    let mut batches: Vec<Batch> = keep
        .chunks(batch_size)
        .map(|chunk| {
            let rows: Vec<(Vec<u32>, Vec<u32>)> =
                chunk.iter().map(|&i| pairs[i].clone()).collect();
            Batch::from_rows(&rows)
        })
        .collect();
    if sort_by_length {
        // Bucketing fixed the within-batch order; vary the batch order.
        rng::shuffle(stream, &mut batches);
    }
    Ok((batches, skipped))
}

/// Batches straight from a token corpus.
pub fn make_batches(
    corpus: &ParallelCorpus,
    vocab_src: &Vocab,
    vocab_tgt: &Vocab,
    batch_size: usize,
    seed: u64,
    sort_by_length: bool,
    max_len: Option<usize>,
) -> Result<(Vec<Batch>, usize)> {
    let ids = encode_corpus(corpus, vocab_src, vocab_tgt);
    let mut stream = rng::derive(seed, &[rng::tag::SHUFFLE, 0]);
    batches_from_ids(&ids, batch_size, &mut stream, sort_by_length, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn vocab_of_single_repeated_token() {
        let vocab = Vocab::build(&[toks("a a a")], 1, None);
        assert_eq!(vocab.len(), 5);
        assert_eq!(vocab.id("a"), 4);
        assert_eq!(vocab.token(4), "a");
    }

    #[test]
    fn vocab_ties_break_lexicographically() {
        let vocab = Vocab::build(&[toks("b a b a")], 1, None);
        assert_eq!(vocab.id("a"), 4);
        assert_eq!(vocab.id("b"), 5);
    }

    #[test]
    fn vocab_max_size_keeps_most_frequent() {
        let side = [toks("e e e d d d c c b a")];
        let vocab = Vocab::build(&side, 1, Some(RESERVED.len() + 2));
        assert_eq!(vocab.len(), 6);
        assert_ne!(vocab.id("e"), UNK);
        assert_ne!(vocab.id("d"), UNK);
        assert_eq!(vocab.id("c"), UNK);
        assert_eq!(vocab.id("a"), UNK);
    }

    #[test]
    fn vocab_min_count_filters_rare_tokens() {
        let vocab = Vocab::build(&[toks("x x y")], 2, None);
        assert_ne!(vocab.id("x"), UNK);
        assert_eq!(vocab.id("y"), UNK);
    }

    #[test]
    fn roundtrip_encodes_and_decodes_modulo_unk() {
        let vocab = Vocab::build(&[toks("a b c")], 1, None);
        let sentence = toks("c a b");
        let back = vocab.decode(&vocab.encode(&sentence));
        assert_eq!(back, sentence);
        let with_unk = vocab.decode(&vocab.encode(&toks("a z")));
        assert_eq!(with_unk, toks("a <unk>"));
    }

    #[test]
    fn synthetic_task_targets() {
        let abc = toks("a b c");
        assert_eq!(task_target(SyntheticTask::Copy, &abc), toks("a b c"));
        assert_eq!(task_target(SyntheticTask::Reverse, &abc), toks("c b a"));
        assert_eq!(task_target(SyntheticTask::Sort, &toks("d a c")), toks("a c d"));
        assert_eq!(task_target(SyntheticTask::Num2Word, &toks("3 1 4")), toks("three one four"));
    }

    #[test]
    fn synthetic_splits_are_disjoint_and_deterministic() {
        let (tr1, dev1, te1) =
            gen_synthetic_splits(SyntheticTask::Copy, (30, 10, 10), 5, (3, 6), 6).unwrap();
        let (tr2, ..) =
            gen_synthetic_splits(SyntheticTask::Copy, (30, 10, 10), 5, (3, 6), 6).unwrap();
        assert_eq!(tr1.pairs, tr2.pairs);
        assert_eq!(tr1.len(), 30);
        assert_eq!(dev1.len(), 10);
        assert_eq!(te1.len(), 10);
        let train_set: BTreeSet<_> = tr1.sources().collect();
        assert!(dev1.sources().all(|s| !train_set.contains(s)));
        assert!(te1.sources().all(|s| !train_set.contains(s)));
    }

    #[test]
    fn unknown_task_is_a_config_error() {
        assert!(matches!(SyntheticTask::parse("cpy"), Err(Error::Config(_))));
    }

    #[test]
    fn single_batch_when_batch_size_covers_corpus() {
        let corpus = gen_synthetic(SyntheticTask::Copy, 7, 3, (2, 4), 5).unwrap();
        let vocab = Vocab::build(&corpus.pairs.iter().map(|(s, _)| s.clone()).collect::<Vec<_>>(), 1, None);
        let (batches, skipped) =
            make_batches(&corpus, &vocab, &vocab, 100, 1, false, None).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(skipped, 0);
        assert_eq!(batches[0].size(), 7);
    }

    #[test]
    fn equal_length_rows_have_no_padding_and_targets_end_with_eos() {
        let pairs = vec![
            (toks("a b"), toks("b a")),
            (toks("c d"), toks("d c")),
        ];
        let corpus = ParallelCorpus::new(pairs, Split::Train);
        let vocab = Vocab::build(&corpus.pairs.iter().map(|(s, _)| s.clone()).collect::<Vec<_>>(), 1, None);
        let (batches, _) = make_batches(&corpus, &vocab, &vocab, 2, 1, false, None).unwrap();
        let batch = &batches[0];
        assert!(batch.src_mask.iter().flatten().all(|&m| m));
        assert!(batch.tgt_mask.iter().flatten().all(|&m| m));
        for i in 0..batch.size() {
            let (_, tgt) = batch.sequence(i);
            assert_eq!(*tgt.last().unwrap(), EOS);
        }
    }

    #[test]
    fn overlong_pairs_are_skipped_and_counted() {
        let pairs = vec![
            (toks("a"), toks("a")),
            (toks("a b c d e"), toks("a b c d e")),
        ];
        let corpus = ParallelCorpus::new(pairs, Split::Train);
        let vocab = Vocab::build(&corpus.pairs.iter().map(|(s, _)| s.clone()).collect::<Vec<_>>(), 1, None);
        let (batches, skipped) =
            make_batches(&corpus, &vocab, &vocab, 4, 1, false, Some(4)).unwrap();
        assert_eq!(skipped, 1);
        assert_eq!(batches.iter().map(Batch::size).sum::<usize>(), 1);
    }

    #[test]
    fn batching_is_deterministic_per_seed() {
        let corpus = gen_synthetic(SyntheticTask::Reverse, 40, 9, (2, 6), 8).unwrap();
        let vocab = Vocab::build(&corpus.pairs.iter().map(|(s, _)| s.clone()).collect::<Vec<_>>(), 1, None);
        let (b1, _) = make_batches(&corpus, &vocab, &vocab, 8, 4, true, None).unwrap();
        let (b2, _) = make_batches(&corpus, &vocab, &vocab, 8, 4, true, None).unwrap();
        let flat = |bs: &[Batch]| bs.iter().flat_map(|b| b.src.clone()).collect::<Vec<_>>();
        assert_eq!(flat(&b1), flat(&b2));
    }
}
