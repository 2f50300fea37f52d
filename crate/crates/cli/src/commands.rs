//! The four commands: train, translate, evaluate, diversity.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use seqlab_core::data::{self, ParallelCorpus, Split, Vocab};
use seqlab_core::decode;
use seqlab_core::metrics::{self, BleuReport};
use seqlab_core::model::ModelParams;
use seqlab_core::train::{EpochRecord, TrainData, Trainer};

use crate::checkpoint::{load_params, Checkpoint};
use crate::config::RunConfig;
use crate::corpus_io;

/// Corpora named by the run config: synthetic splits or parallel files.
pub fn load_corpora(
    cfg: &RunConfig,
) -> Result<(ParallelCorpus, ParallelCorpus, ParallelCorpus)> {
    if let Some(task) = &cfg.data.task {
        let task = data::SyntheticTask::parse(task)?;
        let splits = data::gen_synthetic_splits(
            task,
            (cfg.data.n_train, cfg.data.n_dev, cfg.data.n_test),
            cfg.training.seed,
            (cfg.data.min_len, cfg.data.max_len),
            cfg.data.alphabet,
        )?;
        Ok(splits)
    } else {
        let train_prefix = cfg.data.train_prefix.as_ref().expect("validated");
        let train = corpus_io::read_parallel(train_prefix, Split::Train)?;
        let dev = match &cfg.data.dev_prefix {
            Some(p) => corpus_io::read_parallel(p, Split::Dev)?,
            None => ParallelCorpus::new(Vec::new(), Split::Dev),
        };
        let test = match &cfg.data.test_prefix {
            Some(p) => corpus_io::read_parallel(p, Split::Test)?,
            None => ParallelCorpus::new(Vec::new(), Split::Test),
        };
        Ok((train, dev, test))
    }
}

#[derive(Serialize)]
struct JsonEpoch<'a> {
    epoch: u64,
    mode: &'a str,
    nll: f64,
    att_kl: Option<f64>,
    pass_a_rate: Option<f64>,
    val_bleu: Option<f64>,
    lr: f64,
}

fn log_line(record: &EpochRecord) -> Result<String> {
    let json = JsonEpoch {
        epoch: record.epoch,
        mode: &record.mode,
        nll: record.nll,
        att_kl: record.att_kl,
        pass_a_rate: record.pass_a_rate,
        val_bleu: record.val_bleu,
        lr: record.lr,
    };
    Ok(serde_json::to_string(&json)?)
}

/// Train per the config; writes `last.ckpt` after every epoch,
/// `teacher.ckpt` at the pretraining boundary (forcing regimes),
/// `final.ckpt` at the end, vocab files, and a JSONL epoch log.
pub fn cmd_train(
    cfg: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    teacher_path: Option<&Path>,
    stop_after: Option<u64>,
) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let (train_corpus, dev_corpus, _test) = load_corpora(cfg)?;
    if train_corpus.is_empty() {
        bail!("training corpus is empty");
    }

    let log_path = out_dir.join("train_log.jsonl");
    let mut trainer = match resume {
        Some(ckpt_path) => {
            let ckpt = Checkpoint::load(ckpt_path)?;
            if ckpt.seed != cfg.training.seed {
                bail!(
                    "checkpoint was trained with seed {}, config says {}",
                    ckpt.seed,
                    cfg.training.seed
                );
            }
            let want = cfg.model_config(ckpt.vocab_src.len(), ckpt.vocab_tgt.len());
            if ckpt.params.config() != &want {
                bail!("checkpoint architecture does not match the configuration");
            }
            let data =
                TrainData::from_corpora(&train_corpus, &dev_corpus, &ckpt.vocab_src, &ckpt.vocab_tgt);
            corpus_io::write_vocab(&out_dir.join("vocab.src.txt"), &ckpt.vocab_src)?;
            corpus_io::write_vocab(&out_dir.join("vocab.tgt.txt"), &ckpt.vocab_tgt)?;
            Trainer::resume(
                cfg.train_config()?,
                data,
                ckpt.params,
                ckpt.opt,
                ckpt.teacher,
                ckpt.completed_epochs,
            )?
        }
        None => {
            let sources: Vec<Vec<String>> =
                train_corpus.pairs.iter().map(|(s, _)| s.clone()).collect();
            let targets: Vec<Vec<String>> =
                train_corpus.pairs.iter().map(|(_, t)| t.clone()).collect();
            let vocab_src =
                Vocab::build(&sources, cfg.data.vocab_min_count, cfg.data.vocab_max_size);
            let vocab_tgt =
                Vocab::build(&targets, cfg.data.vocab_min_count, cfg.data.vocab_max_size);
            corpus_io::write_vocab(&out_dir.join("vocab.src.txt"), &vocab_src)?;
            corpus_io::write_vocab(&out_dir.join("vocab.tgt.txt"), &vocab_tgt)?;
            let teacher = teacher_path.map(load_params).transpose()?;
            let data = TrainData::from_corpora(&train_corpus, &dev_corpus, &vocab_src, &vocab_tgt);
            let model_cfg = cfg.model_config(vocab_src.len(), vocab_tgt.len());
            let trainer = Trainer::new(&model_cfg, cfg.train_config()?, data, teacher)?;
            let _ = fs::remove_file(&log_path);
            trainer
        }
    };

    let vocab_src = corpus_io::read_vocab(&out_dir.join("vocab.src.txt"))?;
    let vocab_tgt = corpus_io::read_vocab(&out_dir.join("vocab.tgt.txt"))?;

    if let Some(limit) = cfg.train_config()?.max_len {
        let skipped = trainer
            .data
            .train
            .iter()
            .filter(|(s, t)| s.len() > limit || t.len() > limit)
            .count();
        if skipped > 0 {
            eprintln!("warning: {skipped} training pairs exceed max_len_filter {limit} and are skipped");
        }
    }

    let save = |trainer: &Trainer, name: &str| -> Result<()> {
        Checkpoint {
            params: trainer.params.clone(),
            opt: trainer.opt.clone(),
            teacher: trainer.teacher.clone(),
            vocab_src: vocab_src.clone(),
            vocab_tgt: vocab_tgt.clone(),
            completed_epochs: trainer.completed_epochs,
            seed: trainer.cfg.seed,
        }
        .save(&out_dir.join(name))
    };

    let mut log_file = fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
    let mut ran = 0u64;
    while !trainer.is_done() && stop_after.map(|s| ran < s).unwrap_or(true) {
        let records = trainer.run(Some(1), &mut |_| {})?;
        let record = &records[0];
        let line = log_line(record)?;
        writeln!(log_file, "{line}")?;
        eprintln!(
            "epoch {:>3} [{}] nll {:.4}{}{} val_bleu {} lr {}",
            record.epoch,
            record.mode,
            record.nll,
            record.att_kl.map(|v| format!(" att_kl {v:.4}")).unwrap_or_default(),
            record.pass_a_rate.map(|v| format!(" pass_a {v:.2}")).unwrap_or_default(),
            record.val_bleu.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into()),
            record.lr,
        );
        save(&trainer, "last.ckpt")?;
        if trainer.teacher.is_some()
            && trainer.completed_epochs == trainer.cfg.epochs_pretrain + 1
            && !out_dir.join("teacher.ckpt").exists()
        {
            let teacher = trainer.teacher.clone().unwrap();
            Checkpoint {
                opt: seqlab_core::optim::AdamState::new(&teacher),
                params: teacher,
                teacher: None,
                vocab_src: vocab_src.clone(),
                vocab_tgt: vocab_tgt.clone(),
                completed_epochs: trainer.cfg.epochs_pretrain,
                seed: trainer.cfg.seed,
            }
            .save(&out_dir.join("teacher.ckpt"))?;
        }
        ran += 1;
    }
    if trainer.is_done() {
        save(&trainer, "final.ckpt")?;
    }
    Ok(())
}

fn decode_line(
    params: &ModelParams,
    vocab_src: &Vocab,
    vocab_tgt: &Vocab,
    line: &str,
    beam: usize,
    sample_seed: Option<u64>,
    max_len: Option<usize>,
) -> Result<(String, Vec<f64>)> {
    let tokens = data::tokenize(line);
    if tokens.is_empty() {
        return Ok((String::new(), Vec::new()));
    }
    let ids = vocab_src.encode(&tokens);
    let cap = match max_len {
        Some(0) | None => decode::default_max_len(ids.len()),
        Some(m) => m,
    };
    let hyp = match sample_seed {
        Some(seed) => decode::sampling_search(&ids, params, seed, cap)?,
        None => decode::beam_search(&ids, params, beam, cap)?,
    };
    Ok((vocab_tgt.decode(&hyp.tokens).join(" "), hyp.entropies))
}

/// Translate a file line by line (parallel across sentences, order kept).
pub fn cmd_translate(
    ckpt_path: &Path,
    input: &Path,
    output: &Path,
    beam: usize,
    sample_seed: Option<u64>,
    entropy_out: Option<&Path>,
    max_len: Option<usize>,
) -> Result<()> {
    if beam == 0 {
        bail!("beam size must be >= 1");
    }
    let ckpt = Checkpoint::load(ckpt_path)?;
    let lines = corpus_io::read_lines(input)?;
    let results: Vec<Result<(String, Vec<f64>)>> = lines
        .par_iter()
        .enumerate()
        .map(|(i, line)| {
            let seed = sample_seed.map(|s| s.wrapping_add(i as u64));
            decode_line(&ckpt.params, &ckpt.vocab_src, &ckpt.vocab_tgt, line, beam, seed, max_len)
        })
        .collect();
    let mut out = String::new();
    let mut entropies = String::new();
    for r in results {
        let (text, ent) = r?;
        out.push_str(&text);
        out.push('\n');
        let rendered: Vec<String> = ent.iter().map(|e| format!("{e}")).collect();
        entropies.push_str(&rendered.join(" "));
        entropies.push('\n');
    }
    fs::write(output, out).with_context(|| format!("writing {}", output.display()))?;
    if let Some(path) = entropy_out {
        fs::write(path, entropies)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct JsonBleu {
    bleu: f64,
    precisions: [f64; 4],
    brevity_penalty: f64,
    candidate_len: usize,
    reference_len: usize,
}

/// Corpus BLEU of a hypotheses file against a references file.
pub fn cmd_evaluate(hyp: &Path, refs: &Path, json_out: Option<&Path>) -> Result<BleuReport> {
    let hyp_lines = corpus_io::read_lines(hyp)?;
    let ref_lines = corpus_io::read_lines(refs)?;
    if hyp_lines.len() != ref_lines.len() {
        bail!(
            "line counts differ: {} has {}, {} has {}",
            hyp.display(),
            hyp_lines.len(),
            refs.display(),
            ref_lines.len()
        );
    }
    let cands: Vec<Vec<String>> = hyp_lines.iter().map(|l| data::tokenize(l)).collect();
    let references: Vec<Vec<String>> = ref_lines.iter().map(|l| data::tokenize(l)).collect();
    let report = metrics::corpus_bleu(&cands, &references)?;
    print!("{}", report.render());
    if let Some(path) = json_out {
        let json = JsonBleu {
            bleu: report.bleu,
            precisions: report.precisions,
            brevity_penalty: report.brevity_penalty,
            candidate_len: report.candidate_len,
            reference_len: report.reference_len,
        };
        fs::write(path, serde_json::to_string_pretty(&json)?)?;
    }
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct DiversityReport {
    pub pairwise_bleu: f64,
    pub mean_entropy: f64,
    pub m: usize,
    pub sentences: usize,
}

/// Sampling-based diversity probe: M seeded sampling runs for pairwise
/// BLEU plus one deterministic beam run for the entropy measure. The M
/// sampled corpora, the beam output and the per-step entropies all land
/// in `out_dir` so the report can be recomputed from files.
pub fn cmd_diversity(
    ckpt_path: &Path,
    input: &Path,
    out_dir: &Path,
    m: usize,
    seed: u64,
    beam: usize,
    max_len: Option<usize>,
) -> Result<DiversityReport> {
    if m < 2 {
        bail!("diversity needs at least 2 sampling runs, got {m}");
    }
    fs::create_dir_all(out_dir)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let lines = corpus_io::read_lines(input)?;
    if lines.is_empty() {
        bail!("diversity over an empty input file");
    }

    // Deterministic beam pass: output + per-step entropies.
    let beam_results: Vec<Result<(String, Vec<f64>)>> = lines
        .par_iter()
        .map(|line| {
            decode_line(&ckpt.params, &ckpt.vocab_src, &ckpt.vocab_tgt, line, beam, None, max_len)
        })
        .collect();
    let mut beam_text = String::new();
    let mut entropy_text = String::new();
    let mut entropy_records: Vec<Vec<f64>> = Vec::with_capacity(lines.len());
    for r in beam_results {
        let (text, ent) = r?;
        beam_text.push_str(&text);
        beam_text.push('\n');
        let rendered: Vec<String> = ent.iter().map(|e| format!("{e}")).collect();
        entropy_text.push_str(&rendered.join(" "));
        entropy_text.push('\n');
        entropy_records.push(ent);
    }
    fs::write(out_dir.join("beam.txt"), beam_text)?;
    fs::write(out_dir.join("entropy.txt"), entropy_text)?;
    let mean_entropy = metrics::mean_entropy(&entropy_records)?;

    // M seeded sampling corpora.
    let mut groups: Vec<Vec<Vec<String>>> = Vec::with_capacity(m);
    for run in 0..m {
        let results: Vec<Result<(String, Vec<f64>)>> = lines
            .par_iter()
            .enumerate()
            .map(|(i, line)| {
                let line_seed = seed.wrapping_add((run as u64) << 32).wrapping_add(i as u64);
                decode_line(
                    &ckpt.params,
                    &ckpt.vocab_src,
                    &ckpt.vocab_tgt,
                    line,
                    1,
                    Some(line_seed),
                    max_len,
                )
            })
            .collect();
        let mut text = String::new();
        let mut group = Vec::with_capacity(lines.len());
        for r in results {
            let (t, _) = r?;
            text.push_str(&t);
            text.push('\n');
            group.push(data::tokenize(&t));
        }
        fs::write(out_dir.join(format!("sample_{run}.txt")), text)?;
        groups.push(group);
    }
    let pairwise = metrics::pairwise_bleu(&groups)?;

    let report =
        DiversityReport { pairwise_bleu: pairwise, mean_entropy, m, sentences: lines.len() };
    println!("pairwise_bleu: {:.4}", report.pairwise_bleu);
    println!("mean_entropy: {:.6}", report.mean_entropy);
    fs::write(out_dir.join("diversity.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Helper shared with the grid runner: path of the binary's own file
/// outputs for a training run.
pub fn final_checkpoint(out_dir: &Path) -> PathBuf {
    out_dir.join("final.ckpt")
}
