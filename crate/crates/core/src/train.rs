//! Two-phase training driver: teacher-forcing pretraining, then the
//! configured regime at half the learning rate. For the attention-forcing
//! regimes the pretrained parameters are frozen as the teacher, and the
//! student continues from the same checkpoint.

use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{self, Batch, ParallelCorpus, Vocab};
use crate::decode;
use crate::error::Error;
use crate::metrics;
use crate::model::{ModelConfig, ModelParams};
use crate::optim::{adam_step, AdamState};
use crate::regimes::{run_batch, BatchCtx, Mode, RegimeConfig};
use crate::rng;
use crate::Result;

/// Training hyperparameters (architecture lives in [`ModelConfig`]).
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub regime: RegimeConfig,
    pub epochs_pretrain: u64,
    pub epochs_force: u64,
    pub lr: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Pairs longer than this are skipped at batching time.
    pub max_len: Option<usize>,
    pub sort_by_length: bool,
    /// Beam size for the per-epoch validation decode.
    pub val_beam: usize,
}

impl TrainConfig {
    pub fn new(regime: RegimeConfig) -> TrainConfig {
        TrainConfig {
            regime,
            epochs_pretrain: 30,
            epochs_force: 30,
            lr: 0.002,
            clip_norm: 1.0,
            batch_size: 50,
            dropout: 0.2,
            seed: 1,
            max_len: None,
            sort_by_length: false,
            val_beam: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.regime.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(alloc::format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(alloc::format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.val_beam == 0 {
            return Err(Error::config("val_beam must be >= 1"));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> u64 {
        self.epochs_pretrain + self.epochs_force
    }
}

/// Id-encoded corpora ready for the trainer.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<(Vec<u32>, Vec<u32>)>,
    /// Dev sources and raw (EOS-free) dev references for validation BLEU.
    pub dev_src: Vec<Vec<u32>>,
    pub dev_ref: Vec<Vec<u32>>,
}

impl TrainData {
    pub fn from_corpora(
        train: &ParallelCorpus,
        dev: &ParallelCorpus,
        vocab_src: &Vocab,
        vocab_tgt: &Vocab,
    ) -> TrainData {
        let train_ids = data::encode_corpus(train, vocab_src, vocab_tgt);
        let dev_src = dev.pairs.iter().map(|(s, _)| vocab_src.encode(s)).collect();
        let dev_ref = dev.pairs.iter().map(|(_, t)| vocab_tgt.encode(t)).collect();
        TrainData { train: train_ids, dev_src, dev_ref }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based global epoch index.
    pub epoch: u64,
    /// Mode actually run this epoch ("tf" during pretraining).
    pub mode: String,
    /// Mean per-sequence NLL sum over the epoch.
    pub nll: f64,
    /// Mean per-sequence attention-KL sum (attention-forcing epochs).
    pub att_kl: Option<f64>,
    /// Fraction of sequences trained on pass A (AAF epochs).
    pub pass_a_rate: Option<f64>,
    /// Greedy/beam dev BLEU; absent without a dev set.
    pub val_bleu: Option<f64>,
    pub lr: f64,
}

pub type TrainingLog = Vec<EpochRecord>;

/// Resumable training state. Construct fresh with [`Trainer::new`] or
/// restore every field from a checkpoint and continue.
#[derive(Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub data: TrainData,
    pub params: ModelParams,
    pub opt: AdamState,
    pub teacher: Option<ModelParams>,
    /// Number of completed epochs (global, both phases).
    pub completed_epochs: u64,
}

impl Trainer {
    pub fn new(
        model_cfg: &ModelConfig,
        cfg: TrainConfig,
        data: TrainData,
        teacher: Option<ModelParams>,
    ) -> Result<Trainer> {
        cfg.validate()?;
        if cfg.regime.mode.needs_teacher() && teacher.is_none() && cfg.epochs_pretrain == 0 {
            return Err(Error::config(alloc::format!(
                "mode {} needs a teacher: provide one or set epochs_pretrain > 0",
                cfg.regime.mode.name()
            )));
        }
        // A provided teacher also serves as the student's starting point
        // when there is no pretraining phase of our own.
        let params = match (&teacher, cfg.epochs_pretrain) {
            (Some(t), 0) => t.clone(),
            _ => ModelParams::init(model_cfg, cfg.seed)?,
        };
        let opt = AdamState::new(&params);
        Ok(Trainer { cfg, data, params, opt, teacher, completed_epochs: 0 })
    }

    /// Restore from externally held state (checkpoint resume). The caller
    /// is responsible for passing back the same configuration.
    pub fn resume(
        cfg: TrainConfig,
        data: TrainData,
        params: ModelParams,
        opt: AdamState,
        teacher: Option<ModelParams>,
        completed_epochs: u64,
    ) -> Result<Trainer> {
        cfg.validate()?;
        Ok(Trainer { cfg, data, params, opt, teacher, completed_epochs })
    }

    pub fn is_done(&self) -> bool {
        self.completed_epochs >= self.cfg.total_epochs()
    }

    /// Mode and learning rate for a global epoch index.
    fn phase(&self, epoch: u64) -> (Mode, f64) {
        if epoch < self.cfg.epochs_pretrain {
            (Mode::TeacherForcing, self.cfg.lr)
        } else {
            let lr = if self.cfg.epochs_pretrain > 0 { self.cfg.lr / 2.0 } else { self.cfg.lr };
            (self.cfg.regime.mode, lr)
        }
    }

    /// Run up to `stop_after` epochs (all remaining when `None`), invoking
    /// `on_epoch` after each one. Returns the records of the epochs run.
    pub fn run(
        &mut self,
        stop_after: Option<u64>,
        on_epoch: &mut dyn FnMut(&EpochRecord),
    ) -> Result<TrainingLog> {
        if self.data.train.is_empty() && !self.is_done() {
            return Err(Error::contract("training corpus is empty"));
        }
        let mut log = TrainingLog::new();
        let mut ran = 0u64;
        while !self.is_done() && stop_after.map(|s| ran < s).unwrap_or(true) {
            let epoch = self.completed_epochs;
            let (mode, lr) = self.phase(epoch);
            if mode.needs_teacher() && self.teacher.is_none() {
                if epoch == self.cfg.epochs_pretrain {
                    self.teacher = Some(self.params.clone());
                } else {
                    return Err(Error::config(
                        "resumed into the forcing phase without a teacher model",
                    ));
                }
            }
            let record = self.run_epoch(epoch, mode, lr)?;
            self.completed_epochs += 1;
            on_epoch(&record);
            log.push(record);
            ran += 1;
        }
        Ok(log)
    }

    fn run_epoch(&mut self, epoch: u64, mode: Mode, lr: f64) -> Result<EpochRecord> {
        let cfg = &self.cfg;
        let regime = RegimeConfig { mode, ..cfg.regime.clone() };
        let eps_ss = if mode == Mode::ScheduledSampling {
            regime.ss_epsilon(epoch.saturating_sub(cfg.epochs_pretrain), cfg.epochs_force)
        } else {
            1.0
        };
        let mut stream = rng::derive(cfg.seed, &[rng::tag::SHUFFLE, epoch]);
        let (batches, _skipped) = data::batches_from_ids(
            &self.data.train,
            cfg.batch_size,
            &mut stream,
            cfg.sort_by_length,
            cfg.max_len,
        )?;
        if batches.is_empty() {
            return Err(Error::contract("no batches left after length filtering"));
        }

        let mut nll_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut pass_a = 0.0;
        let mut n_seqs = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let ctx = BatchCtx {
                seed: cfg.seed,
                epoch,
                batch_index: bi as u64,
                dropout: cfg.dropout,
                eps_ss,
                want_grads: true,
            };
            let out = run_batch(&self.params, self.teacher.as_ref(), batch, &regime, &ctx)?;
            let grads = out.grads.as_ref().expect("gradients requested");
            adam_step(&mut self.params, grads, &mut self.opt, lr, cfg.clip_norm)?;
            let b = batch.size() as f64;
            n_seqs += b;
            nll_sum += out.nll * b;
            kl_sum += out.att_kl.unwrap_or(0.0) * b;
            pass_a += out.pass_a_rate.unwrap_or(0.0) * b;
        }

        let val_bleu = self.validation_bleu()?;
        Ok(EpochRecord {
            epoch: epoch + 1,
            mode: String::from(mode.name()),
            nll: nll_sum / n_seqs,
            att_kl: mode.needs_teacher().then_some(kl_sum / n_seqs),
            pass_a_rate: (mode == Mode::AutomaticAttentionForcing).then_some(pass_a / n_seqs),
            val_bleu,
            lr,
        })
    }

    /// Free-running decode of the dev set scored against the references.
    pub fn validation_bleu(&self) -> Result<Option<f64>> {
        if self.data.dev_src.is_empty() {
            return Ok(None);
        }
        let mut hyps = Vec::with_capacity(self.data.dev_src.len());
        for src in &self.data.dev_src {
            let max_len = decode::default_max_len(src.len());
            let hyp = decode::beam_search(src, &self.params, self.cfg.val_beam, max_len)?;
            hyps.push(hyp.tokens);
        }
        let report = metrics::corpus_bleu(&hyps, &self.data.dev_ref)?;
        Ok(Some(report.bleu))
    }
}

/// Teacher-forced alignment matrices of a trained model over id pairs
/// (diagnostic surface for attention-geometry checks).
pub fn alignment_matrices(
    params: &ModelParams,
    pairs: &[(Vec<u32>, Vec<u32>)],
) -> Result<Vec<Vec<crate::tensor::Tensor>>> {
    pairs
        .iter()
        .map(|(src, tgt)| crate::regimes::teacher_alignments(params, src, tgt))
        .collect()
}

/// Convenience entry point: build a trainer, run every epoch, return the
/// final parameters and the full log.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: TrainConfig,
    data: TrainData,
    teacher: Option<ModelParams>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(ModelParams, Option<ModelParams>, TrainingLog)> {
    let mut trainer = Trainer::new(model_cfg, cfg, data, teacher)?;
    let log = trainer.run(None, on_epoch)?;
    Ok((trainer.params, trainer.teacher, log))
}

/// A batch over the whole (already encoded) corpus, for loss probes.
pub fn full_batch(pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<Batch> {
    let mut stream = rng::derive(0, &[rng::tag::SHUFFLE]);
    let (mut batches, _) = data::batches_from_ids(pairs, pairs.len().max(1), &mut stream, false, None)?;
    batches.pop().ok_or_else(|| Error::contract("empty corpus"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticTask;

    fn setup(task: SyntheticTask, n: usize, seed: u64) -> (ModelConfig, TrainData, Vocab) {
        let (train, dev, _) =
            data::gen_synthetic_splits(task, (n, n / 5, 0), seed, (2, 5), 6).unwrap();
        let side: Vec<Vec<alloc::string::String>> =
            train.pairs.iter().map(|(s, _)| s.clone()).collect();
        let vocab = Vocab::build(&side, 1, None);
        let mut cfg = ModelConfig::new(vocab.len(), vocab.len());
        cfg.d_emb = 12;
        cfg.d_hidden = 12;
        let data = TrainData::from_corpora(&train, &dev, &vocab, &vocab);
        (cfg, data, vocab)
    }

    #[test]
    fn zero_epochs_returns_initialized_params_and_empty_log() {
        let (model_cfg, data, _) = setup(SyntheticTask::Copy, 20, 3);
        let mut cfg = TrainConfig::new(RegimeConfig::new(Mode::TeacherForcing));
        cfg.epochs_pretrain = 0;
        cfg.epochs_force = 0;
        let (params, _, log) = train(&model_cfg, cfg.clone(), data, None, &mut |_| {}).unwrap();
        assert!(log.is_empty());
        let fresh = ModelParams::init(&model_cfg, cfg.seed).unwrap();
        assert_eq!(params, fresh);
    }

    #[test]
    fn teacher_needed_without_pretraining_is_a_config_error() {
        let (model_cfg, data, _) = setup(SyntheticTask::Copy, 20, 3);
        let mut cfg = TrainConfig::new(RegimeConfig::new(Mode::AutomaticAttentionForcing));
        cfg.epochs_pretrain = 0;
        cfg.epochs_force = 2;
        let err = Trainer::new(&model_cfg, cfg, data, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn tf_loss_decreases_over_a_few_epochs() {
        let (model_cfg, data, _) = setup(SyntheticTask::Copy, 40, 5);
        let mut cfg = TrainConfig::new(RegimeConfig::new(Mode::TeacherForcing));
        cfg.epochs_pretrain = 4;
        cfg.epochs_force = 0;
        cfg.batch_size = 10;
        cfg.dropout = 0.0;
        let (_, _, log) = train(&model_cfg, cfg, data, None, &mut |_| {}).unwrap();
        assert_eq!(log.len(), 4);
        assert!(log.last().unwrap().nll < log[0].nll, "loss should drop");
        assert_eq!(log[0].mode, "tf");
        assert_eq!(log[0].epoch, 1);
    }

    #[test]
    fn lr_halves_in_the_forcing_phase_and_modes_switch() {
        let (model_cfg, data, _) = setup(SyntheticTask::Copy, 20, 7);
        let mut cfg = TrainConfig::new(RegimeConfig::new(Mode::AutomaticAttentionForcing));
        cfg.epochs_pretrain = 1;
        cfg.epochs_force = 1;
        cfg.batch_size = 10;
        let (_, teacher, log) = train(&model_cfg, cfg.clone(), data, None, &mut |_| {}).unwrap();
        assert!(teacher.is_some(), "teacher snapshotted at the boundary");
        assert_eq!(log[0].mode, "tf");
        assert_eq!(log[0].lr, cfg.lr);
        assert_eq!(log[1].mode, "aaf");
        assert_eq!(log[1].lr, cfg.lr / 2.0);
        assert!(log[1].pass_a_rate.is_some());
        assert!(log[1].att_kl.is_some());
    }

    #[test]
    fn stop_after_plus_resume_matches_straight_run() {
        let (model_cfg, data, _) = setup(SyntheticTask::Copy, 20, 9);
        let mut cfg = TrainConfig::new(RegimeConfig::new(Mode::VanillaAttentionForcing));
        cfg.epochs_pretrain = 2;
        cfg.epochs_force = 2;
        cfg.batch_size = 10;

        let (straight, _, _) =
            train(&model_cfg, cfg.clone(), data.clone(), None, &mut |_| {}).unwrap();

        let mut first = Trainer::new(&model_cfg, cfg.clone(), data.clone(), None).unwrap();
        first.run(Some(3), &mut |_| {}).unwrap();
        assert_eq!(first.completed_epochs, 3);
        let mut resumed = Trainer::resume(
            cfg,
            data,
            first.params.clone(),
            first.opt.clone(),
            first.teacher.clone(),
            first.completed_epochs,
        )
        .unwrap();
        resumed.run(None, &mut |_| {}).unwrap();
        assert_eq!(resumed.params, straight);
    }

    #[test]
    fn aaf_with_infinite_k_logs_match_vaf() {
        let (model_cfg, data, _) = setup(SyntheticTask::Reverse, 20, 11);
        let mut vaf_cfg = TrainConfig::new(RegimeConfig::new(Mode::VanillaAttentionForcing));
        vaf_cfg.epochs_pretrain = 1;
        vaf_cfg.epochs_force = 2;
        vaf_cfg.batch_size = 10;
        let mut aaf_cfg = vaf_cfg.clone();
        aaf_cfg.regime.mode = Mode::AutomaticAttentionForcing;
        aaf_cfg.regime.k = f64::INFINITY;

        let (p_vaf, _, log_vaf) =
            train(&model_cfg, vaf_cfg, data.clone(), None, &mut |_| {}).unwrap();
        let (p_aaf, _, log_aaf) = train(&model_cfg, aaf_cfg, data, None, &mut |_| {}).unwrap();
        assert_eq!(p_vaf, p_aaf, "parameter trajectories must be identical");
        for (v, a) in log_vaf.iter().zip(&log_aaf) {
            assert_eq!(v.nll.to_bits(), a.nll.to_bits());
            assert_eq!(v.att_kl.map(f64::to_bits), a.att_kl.map(f64::to_bits));
            assert_eq!(v.val_bleu.map(f64::to_bits), a.val_bleu.map(f64::to_bits));
        }
        assert!(log_aaf.last().unwrap().pass_a_rate.unwrap() == 1.0);
    }
}
