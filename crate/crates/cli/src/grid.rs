//! Scripted comparison runs: a (task, regime, k, seed) grid, each cell an
//! independent `seqlab` process pipeline (train, translate, evaluate,
//! diversity), resumable through on-disk cell records, aggregated into
//! mean ± sample-std tables and plot-ready files.

use std::fs;
use std::path::Path;
use std::process::Command;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::commands::final_checkpoint;
use crate::config::RunConfig;
use crate::corpus_io;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub tasks: Vec<String>,
    /// Training regimes to compare (tf | fr | ss | vaf | aaf).
    pub regimes: Vec<String>,
    /// Selection thresholds; applied to the aaf regime only.
    #[serde(default = "default_k_values")]
    pub k_values: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Maximum number of concurrently running cells.
    #[serde(default = "default_parallel")]
    pub parallel: usize,
    /// Template run configuration shared by every cell.
    pub base: RunConfig,
}

fn default_k_values() -> Vec<f64> {
    vec![0.0, 2.5, 3.0, 3.5, f64::INFINITY]
}

fn default_parallel() -> usize {
    1
}

impl GridConfig {
    pub fn load(path: &Path) -> Result<GridConfig> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading grid config {}", path.display()))?;
        Ok(toml::from_str(&text)?)
    }
}

/// One cell of the grid: a full training-plus-evaluation pipeline.
#[derive(Debug, Clone)]
pub struct Cell {
    pub task: String,
    pub regime: String,
    pub k: Option<f64>,
    pub seed: u64,
}

pub fn format_k(k: f64) -> String {
    if k.is_infinite() {
        "inf".to_string()
    } else {
        format!("{k}")
    }
}

impl Cell {
    pub fn id(&self) -> String {
        match self.k {
            Some(k) => format!("{}-{}-k{}-s{}", self.task, self.regime, format_k(k), self.seed),
            None => format!("{}-{}-s{}", self.task, self.regime, self.seed),
        }
    }

    fn run_config(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.data.task = Some(self.task.clone());
        cfg.data.train_prefix = None;
        cfg.training.mode = self.regime.clone();
        cfg.training.seed = self.seed;
        if let Some(k) = self.k {
            cfg.training.k = k;
        }
        cfg
    }
}

/// Result record of one cell, written as its on-disk completion marker.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRecord {
    pub id: String,
    pub task: String,
    pub regime: String,
    /// `"inf"` or a number rendered as text (JSON has no infinities).
    pub k: Option<String>,
    pub seed: u64,
    pub status: String,
    pub bleu: Option<f64>,
    pub pairwise_bleu: Option<f64>,
    pub entropy: Option<f64>,
    /// Pass-A selection rate of the final forcing epoch (AAF cells).
    pub pass_a_rate: Option<f64>,
}

pub fn expand_cells(cfg: &GridConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for task in &cfg.tasks {
        for regime in &cfg.regimes {
            let ks: Vec<Option<f64>> = if regime == "aaf" {
                cfg.k_values.iter().map(|&k| Some(k)).collect()
            } else {
                vec![None]
            };
            for k in ks {
                for &seed in &cfg.seeds {
                    cells.push(Cell {
                        task: task.clone(),
                        regime: regime.clone(),
                        k,
                        seed,
                    });
                }
            }
        }
    }
    cells
}

fn run_step(mut cmd: Command, log: &Path) -> Result<()> {
    let out = cmd.output().with_context(|| format!("spawning {cmd:?}"))?;
    let mut text = String::from_utf8_lossy(&out.stderr).into_owned();
    text.push_str(&String::from_utf8_lossy(&out.stdout));
    fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(log)
        .and_then(|mut f| std::io::Write::write_all(&mut f, text.as_bytes()))?;
    if !out.status.success() {
        bail!("step {cmd:?} exited with {}", out.status);
    }
    Ok(())
}

/// Pass-A rate of the last forcing-phase epoch, from the JSONL train log.
fn last_pass_a_rate(log_path: &Path) -> Option<f64> {
    let text = fs::read_to_string(log_path).ok()?;
    let mut rate = None;
    for line in text.lines() {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(line) {
            if let Some(r) = v.get("pass_a_rate").and_then(|x| x.as_f64()) {
                rate = Some(r);
            }
        }
    }
    rate
}

fn execute_cell(exe: &Path, cell: &Cell, base: &RunConfig, cell_dir: &Path) -> Result<CellRecord> {
    fs::create_dir_all(cell_dir)?;
    let cfg = cell.run_config(base);
    let cfg_path = cell_dir.join("config.toml");
    fs::write(&cfg_path, toml::to_string_pretty(&cfg)?)?;
    let step_log = cell_dir.join("steps.log");

    // Test split materialized for the evaluation steps.
    let (_, _, test) = crate::commands::load_corpora(&cfg)?;
    if test.is_empty() {
        bail!("cell {} has an empty test split", cell.id());
    }
    corpus_io::write_parallel(&cell_dir.join("test"), &test)?;

    let mut train = Command::new(exe);
    train.arg("train").arg("--config").arg(&cfg_path).arg("--out").arg(cell_dir);
    run_step(train, &step_log)?;

    let ckpt = final_checkpoint(cell_dir);
    let mut translate = Command::new(exe);
    translate
        .arg("translate")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--input")
        .arg(cell_dir.join("test.src"))
        .arg("--output")
        .arg(cell_dir.join("hyp.txt"))
        .arg("--beam")
        .arg(cfg.eval.beam_size.to_string());
    run_step(translate, &step_log)?;

    let mut evaluate = Command::new(exe);
    evaluate
        .arg("evaluate")
        .arg("--hypotheses")
        .arg(cell_dir.join("hyp.txt"))
        .arg("--references")
        .arg(cell_dir.join("test.tgt"))
        .arg("--json-out")
        .arg(cell_dir.join("bleu.json"));
    run_step(evaluate, &step_log)?;

    let mut diversity = Command::new(exe);
    diversity
        .arg("diversity")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--input")
        .arg(cell_dir.join("test.src"))
        .arg("--out")
        .arg(cell_dir.join("diversity"))
        .arg("--m")
        .arg(cfg.eval.m_samples.to_string())
        .arg("--seed")
        .arg(cell.seed.to_string());
    run_step(diversity, &step_log)?;

    let bleu: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cell_dir.join("bleu.json"))?)?;
    let div: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cell_dir.join("diversity/diversity.json"))?)?;
    Ok(CellRecord {
        id: cell.id(),
        task: cell.task.clone(),
        regime: cell.regime.clone(),
        k: cell.k.map(format_k),
        seed: cell.seed,
        status: "ok".into(),
        bleu: bleu.get("bleu").and_then(|v| v.as_f64()),
        pairwise_bleu: div.get("pairwise_bleu").and_then(|v| v.as_f64()),
        entropy: div.get("mean_entropy").and_then(|v| v.as_f64()),
        pass_a_rate: last_pass_a_rate(&cell_dir.join("train_log.jsonl")),
    })
}

/// Sample mean and (n-1)-normalized standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

#[derive(Debug, Serialize)]
pub struct GroupSummary {
    pub task: String,
    pub regime: String,
    pub k: Option<String>,
    pub n: usize,
    pub bleu_mean: f64,
    pub bleu_std: Option<f64>,
    pub pairwise_mean: f64,
    pub pairwise_std: Option<f64>,
    pub entropy_mean: f64,
    pub entropy_std: Option<f64>,
    pub pass_a_mean: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

/// Aggregate completed cells into per-group mean ± std rows.
pub fn aggregate(records: &[CellRecord]) -> Vec<GroupSummary> {
    let mut keys: Vec<(String, String, Option<String>)> = Vec::new();
    for r in records {
        let key = (r.task.clone(), r.regime.clone(), r.k.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut out = Vec::new();
    for (task, regime, k) in keys {
        let group: Vec<&CellRecord> = records
            .iter()
            .filter(|r| r.task == task && r.regime == regime && r.k == k && r.status == "ok")
            .collect();
        if group.is_empty() {
            continue;
        }
        let collect = |f: fn(&CellRecord) -> Option<f64>| -> Vec<f64> {
            group.iter().filter_map(|r| f(r)).collect()
        };
        let bleu = collect(|r| r.bleu);
        let pw = collect(|r| r.pairwise_bleu);
        let ent = collect(|r| r.entropy);
        let pa = collect(|r| r.pass_a_rate);
        let (bleu_mean, bleu_std) = mean_std(&bleu);
        let (pairwise_mean, pairwise_std) = mean_std(&pw);
        let (entropy_mean, entropy_std) = mean_std(&ent);
        out.push(GroupSummary {
            task,
            regime,
            k,
            n: group.len(),
            bleu_mean,
            bleu_std,
            pairwise_mean,
            pairwise_std,
            entropy_mean,
            entropy_std,
            pass_a_mean: (!pa.is_empty()).then(|| mean_std(&pa).0),
        });
    }
    out
}

fn write_outputs(out_dir: &Path, records: &[CellRecord]) -> Result<()> {
    let mut jsonl = String::new();
    let mut results = String::from("task\tregime\tk\tseed\tstatus\tbleu\tpairwise_bleu\tentropy\tpass_a_rate\n");
    for r in records {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
        results.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.task,
            r.regime,
            r.k.clone().unwrap_or_else(|| "-".into()),
            r.seed,
            r.status,
            opt(r.bleu),
            opt(r.pairwise_bleu),
            opt(r.entropy),
            opt(r.pass_a_rate),
        ));
    }
    fs::write(out_dir.join("records.jsonl"), jsonl)?;
    fs::write(out_dir.join("results.tsv"), results)?;

    let summaries = aggregate(records);
    let mut summary = String::from(
        "task\tregime\tk\tn\tbleu_mean\tbleu_std\tpairwise_mean\tpairwise_std\tentropy_mean\tentropy_std\tpass_a_mean\n",
    );
    let mut plot_bleu = String::from("label\tmean\tstd\n");
    let mut plot_pairwise = String::from("label\tmean\tstd\n");
    let mut plot_entropy = String::from("label\tmean\tstd\n");
    for s in &summaries {
        let label = match &s.k {
            Some(k) => format!("{}-{}-k{}", s.task, s.regime, k),
            None => format!("{}-{}", s.task, s.regime),
        };
        summary.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{}\t{:.6}\t{}\t{:.6}\t{}\t{}\n",
            s.task,
            s.regime,
            s.k.clone().unwrap_or_else(|| "-".into()),
            s.n,
            s.bleu_mean,
            opt(s.bleu_std),
            s.pairwise_mean,
            opt(s.pairwise_std),
            s.entropy_mean,
            opt(s.entropy_std),
            opt(s.pass_a_mean),
        ));
        plot_bleu.push_str(&format!("{label}\t{:.6}\t{}\n", s.bleu_mean, opt(s.bleu_std)));
        plot_pairwise
            .push_str(&format!("{label}\t{:.6}\t{}\n", s.pairwise_mean, opt(s.pairwise_std)));
        plot_entropy.push_str(&format!("{label}\t{:.6}\t{}\n", s.entropy_mean, opt(s.entropy_std)));
    }
    fs::write(out_dir.join("summary.tsv"), summary)?;
    fs::write(out_dir.join("plot_bleu.tsv"), plot_bleu)?;
    fs::write(out_dir.join("plot_pairwise.tsv"), plot_pairwise)?;
    fs::write(out_dir.join("plot_entropy.tsv"), plot_entropy)?;
    Ok(())
}

/// Run every cell (skipping ones with an existing record), aggregate, and
/// report whether any cell failed.
pub fn run_grid(cfg: &GridConfig, out_dir: &Path, exe: &Path) -> Result<bool> {
    cfg.base.validate().ok(); // cells override the data/task section
    if cfg.tasks.is_empty() || cfg.regimes.is_empty() || cfg.seeds.is_empty() {
        bail!("grid needs at least one task, regime and seed");
    }
    fs::create_dir_all(out_dir)?;
    let cells = expand_cells(cfg);
    eprintln!("grid: {} cells, parallelism {}", cells.len(), cfg.parallel.max(1));

    let mut records: Vec<Option<CellRecord>> = vec![None; cells.len()];
    let mut pending: Vec<usize> = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        let marker = out_dir.join("cells").join(cell.id()).join("cell.json");
        match fs::read_to_string(&marker).ok().and_then(|t| serde_json::from_str(&t).ok()) {
            Some(rec) => {
                eprintln!("cell {}: already complete, skipping", cell.id());
                records[i] = Some(rec);
            }
            None => pending.push(i),
        }
    }

    let parallel = cfg.parallel.max(1);
    for wave in pending.chunks(parallel) {
        let mut ran: Vec<(usize, Result<CellRecord>)> = Vec::with_capacity(wave.len());
        std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|&i| {
                    let cell = &cells[i];
                    let cell_dir = out_dir.join("cells").join(cell.id());
                    scope.spawn(move || (i, execute_cell(exe, cell, &cfg.base, &cell_dir)))
                })
                .collect();
            for h in handles {
                ran.push(h.join().expect("cell thread"));
            }
        });
        for (i, result) in ran {
            let cell = &cells[i];
            let cell_dir = out_dir.join("cells").join(cell.id());
            let record = match result {
                Ok(rec) => {
                    eprintln!("cell {}: ok (bleu {})", cell.id(), opt(rec.bleu));
                    rec
                }
                Err(e) => {
                    eprintln!("cell {}: FAILED: {e:#}", cell.id());
                    fs::create_dir_all(&cell_dir).ok();
                    fs::write(cell_dir.join("failed.txt"), format!("{e:#}\n")).ok();
                    CellRecord {
                        id: cell.id(),
                        task: cell.task.clone(),
                        regime: cell.regime.clone(),
                        k: cell.k.map(format_k),
                        seed: cell.seed,
                        status: "failed".into(),
                        bleu: None,
                        pairwise_bleu: None,
                        entropy: None,
                        pass_a_rate: None,
                    }
                }
            };
            if record.status == "ok" {
                fs::write(cell_dir.join("cell.json"), serde_json::to_string_pretty(&record)?)?;
            }
            records[i] = Some(record);
        }
    }

    let records: Vec<CellRecord> = records.into_iter().map(|r| r.expect("all cells ran")).collect();
    write_outputs(out_dir, &records)?;
    let failures = records.iter().filter(|r| r.status != "ok").count();
    if failures > 0 {
        eprintln!("grid finished with {failures} failed cells");
    }
    Ok(failures == 0)
}
