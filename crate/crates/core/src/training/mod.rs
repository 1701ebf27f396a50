//! Training loop, offline evaluation, validation split and checkpoints.

pub mod checkpoint;
pub mod metrics;
pub mod split;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, TrainerState};
pub use metrics::{accuracy, auc, MetricsReport};
pub use split::{split_train_validation, ValidationSequence};

use crate::config::{parse_f64, parse_u64, parse_usize};
use crate::error::{Error, Result};
use crate::ingest::UserSequence;
use crate::model::Model;
use crate::numeric::ops::bce_loss;
use crate::numeric::{adam_step, lr_at_step, AdamState, LrSchedule};
use crate::sequences::{assemble_batch, chunk_bounds, Batch, TrainingWindow};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    pub eval_seq_len: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub decay_steps: u64,
    pub max_steps: u64,
    pub eval_every: u64,
    pub patience: u32,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            seq_len: 1024,
            eval_seq_len: 512,
            peak_lr: 2.5e-4,
            warmup_steps: 4000,
            decay_steps: 30000,
            max_steps: 34000,
            eval_every: 1000,
            patience: 3,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "batch_size" => self.batch_size = parse_usize(key, value)?,
            "seq_len" => self.seq_len = parse_usize(key, value)?,
            "eval_seq_len" => self.eval_seq_len = parse_usize(key, value)?,
            "peak_lr" => self.peak_lr = parse_f64(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_u64(key, value)?,
            "decay_steps" => self.decay_steps = parse_u64(key, value)?,
            "max_steps" => self.max_steps = parse_u64(key, value)?,
            "eval_every" => self.eval_every = parse_u64(key, value)?,
            "patience" => self.patience = parse_u64(key, value)? as u32,
            "clip_norm" => self.clip_norm = parse_f64(key, value)?,
            "seed" => self.seed = parse_u64(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn canonical(&self) -> String {
        format!(
            "batch_size={}\nseq_len={}\neval_seq_len={}\npeak_lr={}\nwarmup_steps={}\ndecay_steps={}\n\
             max_steps={}\neval_every={}\npatience={}\nclip_norm={}\nseed={}\n",
            self.batch_size,
            self.seq_len,
            self.eval_seq_len,
            self.peak_lr,
            self.warmup_steps,
            self.decay_steps,
            self.max_steps,
            self.eval_every,
            self.patience,
            self.clip_norm,
            self.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("batch_size", self.batch_size as u64),
            ("seq_len", self.seq_len as u64),
            ("eval_seq_len", self.eval_seq_len as u64),
            ("eval_every", self.eval_every),
            ("patience", self.patience as u64),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.peak_lr <= 0.0 {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::Config("clip_norm must be >= 0".into()));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.peak_lr, self.warmup_steps, self.decay_steps)
    }
}

// ---------------------------------------------------------------- evaluation

/// One scored validation position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredPosition {
    pub row_id: i64,
    pub label: f64,
    pub prob: f64,
}

/// `(window start, score from, window end)` blocks covering positions
/// `start..n`. Each block ends on a bundle boundary and scores at most
/// half a window, so every scored position sees at least `len / 2`
/// events of context when the history allows it.
fn eval_blocks(seq: &UserSequence, start: usize, len: usize) -> Vec<(usize, usize, usize)> {
    let n = seq.len();
    if n <= len {
        return if start < n { vec![(0, start, n)] } else { Vec::new() };
    }
    let step = (len / 2).max(1);
    let mut out = Vec::new();
    let mut s = start;
    while s < n {
        let mut e = (s + step).min(n);
        while e < n && seq.bundle_start(e) != e {
            e += 1;
        }
        if e - s > len {
            e = s + len;
        }
        out.push((e.saturating_sub(len).min(s), s, e));
        s = e;
    }
    out
}

/// Probabilities at every scored validation position, in input order.
pub fn predict_validation(model: &Model, valid: &[ValidationSequence], seq_len: usize) -> Result<Vec<ScoredPosition>> {
    let per_user: Vec<Vec<ScoredPosition>> = valid
        .par_iter()
        .map(|v| -> Result<Vec<ScoredPosition>> {
            let mut out = Vec::new();
            for (ws, s, e) in eval_blocks(&v.seq, v.start, seq_len) {
                let w = TrainingWindow::from_range(&v.seq, ws, e, e - ws);
                let p = model.predict_window(&w)?;
                let mask = w.loss_mask();
                let labels = w.labels();
                for i in (s - ws)..(e - ws) {
                    if mask[i] {
                        out.push(ScoredPosition {
                            row_id: v.seq.row_id[ws + i],
                            label: labels[i],
                            prob: p[i],
                        });
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_user.into_iter().flatten().collect())
}

pub fn report(scored: &[ScoredPosition]) -> Result<MetricsReport> {
    let labels: Vec<f64> = scored.iter().map(|s| s.label).collect();
    let probs: Vec<f64> = scored.iter().map(|s| s.prob).collect();
    let (loss, _) = bce_loss(&probs, &labels, &vec![true; probs.len()])?;
    Ok(MetricsReport {
        auc: auc(&labels, &probs)?,
        accuracy: accuracy(&labels, &probs, 0.5),
        loss,
        count: scored.len(),
    })
}

/// Offline evaluation over the scored tail of each validation user.
pub fn evaluate(model: &Model, valid: &[ValidationSequence], seq_len: usize) -> Result<MetricsReport> {
    report(&predict_validation(model, valid, seq_len)?)
}

// ---------------------------------------------------------------- training

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
    pub val_acc: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "step\tlr\ttrain_loss\tval_loss\tval_auc\tval_acc";

    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.lr, self.train_loss, self.val_loss, self.val_auc, self.val_acc
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<LogRow>,
    pub final_metrics: Option<MetricsReport>,
    pub stopped_early: bool,
}

/// A training window given as `(user, start, end)`.
type Slice = (usize, usize, usize);

struct EpochPlan {
    epoch: u64,
    first_step: u64,
    batches: Vec<Vec<Slice>>,
}

pub struct Trainer<'a> {
    pub model: Model,
    pub state: TrainerState,
    pub config: TrainConfig,
    schedule: LrSchedule,
    train: &'a [UserSequence],
    valid: &'a [ValidationSequence],
    plan: Option<EpochPlan>,
    loss_sum: f64,
    loss_count: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: Model,
        config: TrainConfig,
        train: &'a [UserSequence],
        valid: &'a [ValidationSequence],
    ) -> Result<Self> {
        let state = TrainerState {
            step: 0,
            best_auc: f64::NEG_INFINITY,
            stale_evals: 0,
            adam: AdamState::with_defaults(model.store.params()),
        };
        Self::resume(model, state, config, train, valid)
    }

    pub fn resume(
        model: Model,
        state: TrainerState,
        config: TrainConfig,
        train: &'a [UserSequence],
        valid: &'a [ValidationSequence],
    ) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            schedule: config.schedule()?,
            model,
            state,
            config,
            train,
            valid,
            plan: None,
            loss_sum: 0.0,
            loss_count: 0,
        })
    }

    /// Shuffled batches of one pass over the training users. Each long
    /// user is cut at a fresh random phase; windows without any scored
    /// position are dropped.
    fn epoch_batches(&self, epoch: u64) -> Vec<Vec<Slice>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch);
        let len = self.config.seq_len;
        let mut slices = Vec::new();
        for (u, seq) in self.train.iter().enumerate() {
            let phase = if seq.len() > len { rng.random_range(0..len) } else { 0 };
            for (s, e) in chunk_bounds(seq.len(), len, phase) {
                let scored = (s..e).any(|i| !seq.is_lecture[i] && matches!(seq.answered_correctly[i], 1 | 2));
                if scored {
                    slices.push((u, s, e));
                }
            }
        }
        slices.shuffle(&mut rng);
        slices.chunks(self.config.batch_size).map(|c| c.to_vec()).collect()
    }

    fn batch_for(&mut self, step: u64) -> Result<Batch> {
        let reset = self.plan.as_ref().is_none_or(|p| step < p.first_step);
        if reset {
            self.plan = Some(EpochPlan {
                epoch: 0,
                first_step: 0,
                batches: self.epoch_batches(0),
            });
        }
        loop {
            let plan = self.plan.as_ref().unwrap();
            if plan.batches.is_empty() {
                return Err(Error::Format("no training window has a scored position".into()));
            }
            if step < plan.first_step + plan.batches.len() as u64 {
                break;
            }
            let (epoch, first_step) = (plan.epoch + 1, plan.first_step + plan.batches.len() as u64);
            self.plan = Some(EpochPlan {
                epoch,
                first_step,
                batches: self.epoch_batches(epoch),
            });
        }
        let plan = self.plan.as_ref().unwrap();
        let slices = &plan.batches[(step - plan.first_step) as usize];
        let windows = slices
            .iter()
            .map(|&(u, s, e)| TrainingWindow::from_range(&self.train[u], s, e, self.config.seq_len))
            .collect();
        assemble_batch(windows)
    }

    /// Trains on the batch of a specific step without advancing the
    /// schedule bookkeeping; used by [`Trainer::step`].
    fn apply(&mut self, batch: &Batch) -> Result<StepReport> {
        let step = self.state.step + 1;
        let lr = lr_at_step(step, &self.schedule);
        let bg = self.model.loss_and_grads(batch)?;
        if !bg.loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                lr,
                grad_norm: bg.grads.0.iter().flatten().map(|g| g * g).sum::<f64>().sqrt(),
            });
        }
        let mut grad_norm = 0.0;
        if bg.count > 0 {
            self.model.store.set_grads(&bg.grads);
            grad_norm = if self.config.clip_norm > 0.0 {
                self.model.store.clip_grad_norm(self.config.clip_norm)
            } else {
                self.model.store.grad_norm()
            };
            if !grad_norm.is_finite() {
                return Err(Error::NonFinite { step, lr, grad_norm });
            }
            adam_step(self.model.store.params_mut(), &mut self.state.adam, lr)?;
            self.model.clamp_decays();
        }
        self.state.step = step;
        Ok(StepReport {
            step,
            lr,
            loss: bg.loss,
            grad_norm,
            count: bg.count,
        })
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self) -> Result<StepReport> {
        let batch = self.batch_for(self.state.step)?;
        let r = self.apply(&batch)?;
        self.loss_sum += r.loss * r.count as f64;
        self.loss_count += r.count;
        Ok(r)
    }

    /// Offline metrics on the validation users, if there are any.
    pub fn evaluate(&self) -> Result<Option<MetricsReport>> {
        if self.valid.is_empty() {
            return Ok(None);
        }
        evaluate(&self.model, self.valid, self.config.eval_seq_len).map(Some)
    }

    /// Runs to `max_steps` or early stop, calling `on_eval` with every
    /// metrics row and saving a checkpoint after each evaluation.
    pub fn run(
        &mut self,
        checkpoint: Option<&std::path::Path>,
        mut on_eval: impl FnMut(&LogRow),
    ) -> Result<TrainOutcome> {
        let mut history = Vec::new();
        let mut final_metrics = None;
        let mut stopped_early = false;
        while self.state.step < self.config.max_steps {
            let r = self.step()?;
            let due = r.step % self.config.eval_every == 0 || r.step == self.config.max_steps;
            if !due {
                continue;
            }
            let metrics = match self.evaluate() {
                Ok(m) => m,
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
            let train_loss = if self.loss_count > 0 {
                self.loss_sum / self.loss_count as f64
            } else {
                f64::NAN
            };
            self.loss_sum = 0.0;
            self.loss_count = 0;
            let row = LogRow {
                step: r.step,
                lr: r.lr,
                train_loss,
                val_loss: metrics.map_or(f64::NAN, |m| m.loss),
                val_auc: metrics.map_or(f64::NAN, |m| m.auc),
                val_acc: metrics.map_or(f64::NAN, |m| m.accuracy),
            };
            on_eval(&row);
            history.push(row);
            final_metrics = metrics;
            if let Some(m) = metrics {
                if m.auc > self.state.best_auc {
                    self.state.best_auc = m.auc;
                    self.state.stale_evals = 0;
                } else {
                    self.state.stale_evals += 1;
                }
            }
            if let Some(path) = checkpoint {
                save_checkpoint(path, &self.model, Some(&self.state))?;
            }
            if self.state.stale_evals >= self.config.patience {
                stopped_early = true;
                break;
            }
        }
        Ok(TrainOutcome {
            history,
            final_metrics,
            stopped_early,
        })
    }
}

/// Projects every decay exponent of `model` onto `w >= 0`.
pub fn clamp_decay(model: &mut Model) {
    model.clamp_decays();
}
