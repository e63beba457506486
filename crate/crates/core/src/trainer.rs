//! Batching and the multi-task training loop.
//!
//! Every random choice of step `s` (batch order of its epoch, mask plans,
//! dropout) is drawn from generators seeded by `(seed, epoch)` or
//! `(seed, s)`, so a run resumed from a checkpoint continues exactly as the
//! uninterrupted run would.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UifmError};
use crate::eval::{hr_at_k, rank_sessions, CandidateMode};
use crate::model::Model;
use crate::numeric::{lr_schedule, AdamW, Graph};
use crate::objectives::{bundle, eligible_attributes, total_loss, LossBundle, MaskPlan, ObjectiveConfig};
use crate::scalar::{Precision, Scalar};
use crate::schema::Session;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Older events beyond this length are dropped.
    pub max_seq_len: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Validation and checkpoint interval in steps; 0 disables both until
    /// the end of the run.
    pub eval_every: usize,
    pub objective: ObjectiveConfig,
    /// Per-step probability that a trained entity is embedded without its
    /// ID row, so the metadata path learns to stand alone.
    pub id_dropout: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_seq_len: 50,
            total_steps: 1000,
            warmup_steps: 100,
            peak_lr: 3e-3,
            weight_decay: 0.01,
            seed: 0,
            eval_every: 250,
            objective: ObjectiveConfig::default(),
            id_dropout: 0.15,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, max_positions: usize) -> Result<()> {
        if self.batch_size == 0 || self.max_seq_len < 2 || self.total_steps == 0 {
            return Err(UifmError::Config("batch_size, total_steps must be >= 1 and max_seq_len >= 2".into()));
        }
        if self.max_seq_len > max_positions {
            return Err(UifmError::Config(format!(
                "max_seq_len {} exceeds max_positions {max_positions}",
                self.max_seq_len
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(UifmError::Config("warmup_steps exceeds total_steps".into()));
        }
        if !(self.peak_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(UifmError::Config("peak_lr must be positive and weight_decay >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.id_dropout) {
            return Err(UifmError::Config(format!("id_dropout {} not in [0,1)", self.id_dropout)));
        }
        self.objective.validate()
    }

    /// Learning rate used for 0-based step `step`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        lr_schedule(step + 1, self.warmup_steps, self.total_steps + 1, self.peak_lr)
    }
}

/// Session indices of every batch of one epoch: a seeded shuffle of
/// `0..n`, cut into consecutive chunks (the last may be short).
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch)));
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

fn mix(seed: u64, x: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ x.wrapping_add(0x632b_e59b_d9b4_e019).rotate_left(17)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_auto: f64,
    pub loss_masked_event: f64,
    pub loss_masked_attr: f64,
    pub lambda_event: f64,
    pub lambda_attr: f64,
    pub loss_total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_hr_at_10: Option<f64>,
}

impl StepRecord {
    pub fn losses(&self) -> LossBundle {
        LossBundle {
            auto: self.loss_auto,
            masked_event: self.loss_masked_event,
            masked_attr: self.loss_masked_attr,
            lambda_event: self.lambda_event,
            lambda_attr: self.lambda_attr,
            total: self.loss_total,
        }
    }
}

/// Forward passes executed so far, by attention mode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub causal_passes: usize,
    pub bidirectional_passes: usize,
}

pub struct Trainer<T> {
    pub model: Model<T>,
    pub cfg: TrainConfig,
    pub counters: Counters,
    optimizer: AdamW,
    train: Vec<Session>,
    eligible: Vec<usize>,
}

impl<T: Scalar> Trainer<T> {
    /// Sessions shorter than two events are dropped; the rest are cut to
    /// `max_seq_len`.
    pub fn new(model: Model<T>, cfg: TrainConfig, train: &[Session]) -> Result<Self> {
        cfg.validate(model.config().backbone.max_positions)?;
        let train: Vec<Session> = train.iter().filter(|s| s.len() >= 2).map(|s| s.tail(cfg.max_seq_len)).collect();
        if train.is_empty() {
            return Err(UifmError::InvalidArgument("no training session has two or more events".into()));
        }
        let eligible = eligible_attributes(&model);
        Ok(Trainer {
            model,
            cfg,
            counters: Counters::default(),
            optimizer: AdamW::with_weight_decay(cfg.weight_decay),
            train,
            eligible,
        })
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> usize {
        self.model.store.step as usize
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.batch_size)
    }

    /// Session indices (into the filtered training set) of 0-based step `s`.
    pub fn batch_at(&self, s: usize) -> (usize, usize, Vec<usize>) {
        let per = self.batches_per_epoch();
        let (epoch, k) = (s / per, s % per);
        let mut batches = make_batches(self.train.len(), self.cfg.batch_size, self.cfg.seed, epoch as u64);
        (epoch, k, std::mem::take(&mut batches[k]))
    }

    /// Run one optimizer step.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let s = self.step();
        if s >= self.cfg.total_steps {
            return Err(UifmError::InvalidArgument(format!("already completed {s} of {} steps", self.cfg.total_steps)));
        }
        let (epoch, k, idx) = self.batch_at(s);
        let sessions: Vec<&Session> = idx.iter().map(|&i| &self.train[i]).collect();
        let batch = self.model.pack(&sessions)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed ^ 0xa5a5_a5a5, s as u64));
        let plans: Vec<MaskPlan> = batch
            .layout
            .lengths
            .iter()
            .map(|&len| MaskPlan::sample(len, &self.eligible, &self.cfg.objective, &mut rng))
            .collect();
        let hidden: Option<Vec<bool>> = (self.cfg.id_dropout > 0.0).then(|| {
            let catalog = self.model.catalog();
            (0..catalog.len())
                .map(|i| catalog.is_trained(i as u32) && rng.random::<f64>() < self.cfg.id_dropout)
                .collect()
        });
        let diverged = |detail: String| UifmError::Diverged {
            step: s + 1,
            batch: k,
            detail: format!(
                "{detail}; sessions {}",
                sessions.iter().map(|x| x.user_id.as_str()).collect::<Vec<_>>().join(",")
            ),
        };
        let mut g = Graph::new();
        let (nodes, passes) =
            total_loss(&mut g, &self.model, &batch, &plans, &self.cfg.objective, hidden.as_deref(), Some(&mut rng))
                .map_err(|e| match e {
                    UifmError::NonFinite { op } => diverged(format!("non-finite {op}")),
                    e => e,
                })?;
        self.counters.causal_passes += passes.causal;
        self.counters.bidirectional_passes += passes.bidirectional;
        let losses = bundle(&g, &nodes, &self.cfg.objective);
        if !losses.total.is_finite() {
            return Err(diverged(format!("loss {}", losses.total)));
        }
        self.model.store.zero_grad();
        g.backward(nodes.total, &mut self.model.store).map_err(|e| match e {
            UifmError::NonFinite { op } => diverged(format!("non-finite gradient in {op}")),
            e => e,
        })?;
        if self.model.store.iter().any(|(_, p)| !p.grad.all_finite()) {
            return Err(diverged("non-finite gradient".into()));
        }
        let lr = self.cfg.lr_at(s)?;
        self.optimizer.step(&mut self.model.store, lr)?;
        Ok(StepRecord {
            step: s + 1,
            epoch,
            lr,
            loss_auto: losses.auto,
            loss_masked_event: losses.masked_event,
            loss_masked_attr: losses.masked_attr,
            lambda_event: losses.lambda_event,
            lambda_attr: losses.lambda_attr,
            loss_total: losses.total,
            val_hr_at_10: None,
        })
    }

    /// HR@10 over every position of `sessions`.
    pub fn validate(&self, sessions: &[Session]) -> Result<Option<f64>> {
        let r = rank_sessions(&self.model, sessions, self.cfg.max_seq_len)?;
        let sel = r.select(CandidateMode::FullVocab);
        if sel.is_empty() {
            return Ok(None);
        }
        hr_at_k(&sel, 10).map(Some)
    }

    /// Train until `until` completed steps (capped at `total_steps`).
    /// Every `eval_every` steps and at the last step, validation HR@10 is
    /// added to the record and, with a `run` directory, a checkpoint is
    /// written. Records go to `sink` as they are produced.
    pub fn run(
        &mut self,
        until: usize,
        validation: &[Session],
        run: Option<&RunFiles>,
        mut sink: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let until = until.min(self.cfg.total_steps);
        let mut log = Vec::new();
        while self.step() < until {
            let mut rec = self.train_step()?;
            let periodic = self.cfg.eval_every > 0 && rec.step % self.cfg.eval_every == 0;
            if periodic || rec.step == self.cfg.total_steps {
                if !validation.is_empty() {
                    rec.val_hr_at_10 = self.validate(validation)?;
                }
                if let Some(run) = run {
                    self.model.save(&run.checkpoint(rec.step))?;
                }
            }
            sink(&rec)?;
            log.push(rec);
        }
        Ok(log)
    }
}

/// Layout of a training run directory.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        Ok(RunFiles { dir: dir.to_path_buf() })
    }

    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.dir.join("checkpoints").join(format!("step-{step:06}.ckpt"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }
}

/// JSON-lines writer for step records.
pub struct MetricsLog {
    out: std::io::BufWriter<fs::File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsLog { out: std::io::BufWriter::new(fs::File::create(path)?) })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let f = fs::OpenOptions::new().append(true).create(true).open(path)?;
        Ok(MetricsLog { out: std::io::BufWriter::new(f) })
    }

    pub fn write(&mut self, rec: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|_| UifmError::MissingInput(path.to_path_buf()))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_every_session_once() {
        let b = make_batches(10, 3, 5, 0);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batch_order_is_seeded_per_epoch() {
        assert_eq!(make_batches(50, 8, 1, 3), make_batches(50, 8, 1, 3));
        assert_ne!(make_batches(50, 8, 1, 3), make_batches(50, 8, 1, 4));
        assert_ne!(make_batches(50, 8, 1, 3), make_batches(50, 8, 2, 3));
    }

    #[test]
    fn schedule_stays_positive_through_last_step() {
        let cfg = TrainConfig { total_steps: 10, warmup_steps: 3, ..Default::default() };
        for s in 0..10 {
            assert!(cfg.lr_at(s).unwrap() > 0.0);
        }
        assert!((cfg.lr_at(2).unwrap() - cfg.peak_lr).abs() < 1e-15);
    }

    #[test]
    fn config_bounds() {
        assert!(TrainConfig { max_seq_len: 600, ..Default::default() }.validate(512).is_err());
        assert!(TrainConfig { warmup_steps: 2000, ..Default::default() }.validate(512).is_err());
        assert!(TrainConfig::default().validate(512).is_ok());
    }
}
