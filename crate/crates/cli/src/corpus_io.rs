//! Parallel corpus and vocabulary files.
//!
//! Corpora are UTF-8 plain text, one sentence per line, as a `.src`/`.tgt`
//! pair sharing a prefix. Vocabulary files hold one token per line in id
//! order.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use seqlab_core::data::{tokenize, ParallelCorpus, Split, Vocab};

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Read `<prefix>.src` / `<prefix>.tgt` as an aligned corpus.
pub fn read_parallel(prefix: &Path, split: Split) -> Result<ParallelCorpus> {
    let src_path = PathBuf::from(format!("{}.src", prefix.display()));
    let tgt_path = PathBuf::from(format!("{}.tgt", prefix.display()));
    let src = read_lines(&src_path)?;
    let tgt = read_lines(&tgt_path)?;
    if src.len() != tgt.len() {
        bail!(
            "aligned files differ in length: {} has {} lines, {} has {}",
            src_path.display(),
            src.len(),
            tgt_path.display(),
            tgt.len()
        );
    }
    let pairs = src
        .iter()
        .zip(&tgt)
        .map(|(s, t)| (tokenize(s), tokenize(t)))
        .collect();
    Ok(ParallelCorpus::new(pairs, split))
}

/// Write a corpus back out as the two aligned text files.
pub fn write_parallel(prefix: &Path, corpus: &ParallelCorpus) -> Result<()> {
    let mut src = String::new();
    let mut tgt = String::new();
    for (s, t) in &corpus.pairs {
        src.push_str(&s.join(" "));
        src.push('\n');
        tgt.push_str(&t.join(" "));
        tgt.push('\n');
    }
    fs::write(format!("{}.src", prefix.display()), src)?;
    fs::write(format!("{}.tgt", prefix.display()), tgt)?;
    Ok(())
}

/// One token per line, id order.
pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut out = String::new();
    for token in vocab.tokens() {
        out.push_str(token);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing vocab {}", path.display()))?;
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let tokens = read_lines(path)?;
    Ok(Vocab::from_tokens(tokens)?)
}
