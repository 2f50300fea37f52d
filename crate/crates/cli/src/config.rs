//! Run configuration: a TOML file plus command-line overrides (overrides
//! win). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use seqlab_core::model::ModelConfig;
use seqlab_core::regimes::{Mode, RegimeConfig};
use seqlab_core::train::TrainConfig;

fn default_eps_smooth() -> f64 {
    (-10.0f64).exp()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Synthetic task name (copy | reverse | sort | num2word); mutually
    /// exclusive with the file prefixes below.
    pub task: Option<String>,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub alphabet: usize,
    /// Parallel plain-text corpora: <prefix>.src and <prefix>.tgt.
    pub train_prefix: Option<PathBuf>,
    pub dev_prefix: Option<PathBuf>,
    pub test_prefix: Option<PathBuf>,
    pub vocab_min_count: usize,
    pub vocab_max_size: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            task: None,
            n_train: 1000,
            n_dev: 200,
            n_test: 200,
            min_len: 3,
            max_len: 10,
            alphabet: 20,
            train_prefix: None,
            dev_prefix: None,
            test_prefix: None,
            vocab_min_count: 1,
            vocab_max_size: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_emb: usize,
    pub d_hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub init_range: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { d_emb: 64, d_hidden: 64, enc_layers: 1, dec_layers: 1, init_range: 0.1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub mode: String,
    pub epochs_pretrain: u64,
    pub epochs_force: u64,
    pub lr: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub seed: u64,
    pub gamma: f64,
    /// Pass-selection threshold; `inf` reduces AAF to VAF.
    pub k: f64,
    #[serde(default = "default_eps_smooth")]
    pub eps_smooth: f64,
    pub ss_start: f64,
    pub ss_end: f64,
    pub sample_history: bool,
    /// Skip training pairs longer than this (0 = no limit).
    pub max_len_filter: usize,
    pub sort_by_length: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            mode: "tf".into(),
            epochs_pretrain: 30,
            epochs_force: 30,
            lr: 0.002,
            clip_norm: 1.0,
            batch_size: 50,
            dropout: 0.2,
            seed: 1,
            gamma: 10.0,
            k: 3.0,
            eps_smooth: default_eps_smooth(),
            ss_start: 1.0,
            ss_end: 0.0,
            sample_history: false,
            max_len_filter: 0,
            sort_by_length: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub beam_size: usize,
    /// Number of sampling runs for pairwise BLEU.
    pub m_samples: usize,
    /// Hard cap on decode length (0 = `2 * source_len + 10`).
    pub max_decode_len: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { beam_size: 1, m_samples: 5, max_decode_len: 0 }
    }
}

/// The whole run configuration (see the sections for the fields).
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.task, &self.data.train_prefix) {
            (Some(_), Some(_)) => bail!("config: set either data.task or data.train_prefix, not both"),
            (None, None) => bail!("config: one of data.task or data.train_prefix is required"),
            _ => {}
        }
        if self.data.task.is_some() {
            seqlab_core::data::SyntheticTask::parse(self.data.task.as_deref().unwrap())?;
        }
        self.regime_config()?.validate()?;
        if self.eval.beam_size == 0 {
            bail!("config: eval.beam_size must be >= 1");
        }
        if self.eval.m_samples < 2 {
            bail!("config: eval.m_samples must be >= 2");
        }
        Ok(())
    }

    pub fn mode(&self) -> Result<Mode> {
        Ok(Mode::parse(&self.training.mode)?)
    }

    pub fn regime_config(&self) -> Result<RegimeConfig> {
        let t = &self.training;
        Ok(RegimeConfig {
            mode: self.mode()?,
            gamma: t.gamma,
            k: t.k,
            eps_smooth: t.eps_smooth,
            ss_start: t.ss_start,
            ss_end: t.ss_end,
            sample_history: t.sample_history,
        })
    }

    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            d_emb: self.model.d_emb,
            d_hidden: self.model.d_hidden,
            enc_layers: self.model.enc_layers,
            dec_layers: self.model.dec_layers,
            init_range: self.model.init_range,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.training;
        Ok(TrainConfig {
            regime: self.regime_config()?,
            epochs_pretrain: t.epochs_pretrain,
            epochs_force: t.epochs_force,
            lr: t.lr,
            clip_norm: t.clip_norm,
            batch_size: t.batch_size,
            dropout: t.dropout,
            seed: t.seed,
            max_len: (t.max_len_filter > 0).then_some(t.max_len_filter),
            sort_by_length: t.sort_by_length,
            val_beam: self.eval.beam_size,
        })
    }
}

/// Optional per-field overrides collected from the command line.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_dev: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub alphabet: Option<usize>,
    #[arg(long)]
    pub train_prefix: Option<PathBuf>,
    #[arg(long)]
    pub dev_prefix: Option<PathBuf>,
    #[arg(long)]
    pub test_prefix: Option<PathBuf>,
    #[arg(long)]
    pub d_emb: Option<usize>,
    #[arg(long)]
    pub d_hidden: Option<usize>,
    #[arg(long)]
    pub enc_layers: Option<usize>,
    #[arg(long)]
    pub dec_layers: Option<usize>,
    #[arg(long)]
    pub init_range: Option<f64>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub epochs_pretrain: Option<u64>,
    #[arg(long)]
    pub epochs_force: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Selection threshold; accepts `inf`.
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub eps_smooth: Option<f64>,
    #[arg(long)]
    pub ss_start: Option<f64>,
    #[arg(long)]
    pub ss_end: Option<f64>,
    #[arg(long)]
    pub sample_history: Option<bool>,
    #[arg(long)]
    pub max_len_filter: Option<usize>,
    #[arg(long)]
    pub sort_by_length: Option<bool>,
    #[arg(long)]
    pub beam_size: Option<usize>,
    #[arg(long)]
    pub m_samples: Option<usize>,
    #[arg(long)]
    pub max_decode_len: Option<usize>,
}

macro_rules! apply {
    ($cfg:expr, $ovr:expr, $($section:ident . $field:ident),+ $(,)?) => {
        $(if let Some(v) = $ovr.$field.clone() { $cfg.$section.$field = v; })+
    };
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        apply!(cfg, self,
            data.n_train, data.n_dev, data.n_test, data.min_len, data.max_len, data.alphabet,
            model.d_emb, model.d_hidden, model.enc_layers, model.dec_layers, model.init_range,
            training.mode, training.epochs_pretrain, training.epochs_force, training.lr,
            training.clip_norm, training.batch_size, training.dropout, training.seed,
            training.gamma, training.k, training.eps_smooth, training.ss_start, training.ss_end,
            training.sample_history, training.max_len_filter, training.sort_by_length,
            eval.beam_size, eval.m_samples, eval.max_decode_len,
        );
        if let Some(v) = self.task.clone() {
            cfg.data.task = Some(v);
            cfg.data.train_prefix = None;
        }
        if let Some(v) = self.train_prefix.clone() {
            cfg.data.train_prefix = Some(v);
            cfg.data.task = None;
        }
        if let Some(v) = self.dev_prefix.clone() {
            cfg.data.dev_prefix = Some(v);
        }
        if let Some(v) = self.test_prefix.clone() {
            cfg.data.test_prefix = Some(v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_standard_recipe() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.training.lr, 0.002);
        assert_eq!(cfg.training.clip_norm, 1.0);
        assert_eq!(cfg.training.batch_size, 50);
        assert_eq!(cfg.training.dropout, 0.2);
        assert_eq!(cfg.training.gamma, 10.0);
        assert_eq!(cfg.eval.beam_size, 1);
        assert_eq!(cfg.eval.m_samples, 5);
        assert!((cfg.training.eps_smooth - (-10.0f64).exp()).abs() < 1e-18);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[training]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn inf_k_parses() {
        let cfg: RunConfig = toml::from_str("[training]\nk = inf\n").unwrap();
        assert!(cfg.training.k.is_infinite());
    }

    #[test]
    fn task_and_files_are_mutually_exclusive() {
        let cfg: RunConfig =
            toml::from_str("[data]\ntask = \"copy\"\ntrain_prefix = \"x\"\n").unwrap();
        assert!(cfg.validate().is_err());
        let cfg: RunConfig = toml::from_str("[data]\ntask = \"copy\"\n").unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn overrides_win() {
        let mut cfg: RunConfig = toml::from_str("[training]\nseed = 5\n").unwrap();
        let ovr = Overrides { seed: Some(9), mode: Some("aaf".into()), ..Default::default() };
        ovr.apply(&mut cfg);
        assert_eq!(cfg.training.seed, 9);
        assert_eq!(cfg.training.mode, "aaf");
    }
}
