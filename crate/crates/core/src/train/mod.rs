//! Dataset construction, optimization and evaluation.
//!
//! Training is single-sample graphs accumulated into mini-batch gradients in
//! a fixed order, so a run is bit-reproducible from its seed regardless of
//! how many threads the process was given.

mod data;
mod optim;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::write_bytes;
use crate::rng::{derive_seed, rng_from_seed};
use crate::vit::{argmax, forward_compact, init_params, loss_and_gradients, save_checkpoint, Checkpoint, CheckpointMeta, Mode, ViTConfig, ViTParams};

pub use data::{
    build_dataset, duration_ms, manifest_to_string, parse_manifest, read_manifest, split_counts, strata, synthesize, write_manifest, DatasetSpec,
    Labeled, ManifestSamples, SampleRow, Samples, Split, MANIFEST_FILE,
};
pub use optim::{adam_step, lr_at_epoch, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub gamma: f64,
    pub step_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub l2_lambda: f64,
    pub batch: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 2e-3,
            gamma: 0.5,
            step_epochs: 12,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            l2_lambda: 1e-4,
            batch: 32,
            epochs: 80,
            dropout: 0.10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr0, self.gamma, self.adam_eps].iter().all(|v| v.is_finite() && *v > 0.0);
        let betas = [self.beta1, self.beta2].iter().all(|b| (0.0..1.0).contains(b));
        if !positive || !betas || self.step_epochs == 0 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::invalid("lr0, gamma, adam_eps, step_epochs, batch and epochs must be positive; betas in [0, 1)"));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::invalid(format!("l2_lambda {} must be non-negative", self.l2_lambda)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Mean cross-entropy.
    pub loss: f64,
    pub samples: usize,
}

impl Metrics {
    /// Plain-text confusion table, rows true class, columns predicted.
    pub fn confusion_table(&self, labels: &[&str]) -> String {
        let name = |i: usize| labels.get(i).map(|s| s.to_string()).unwrap_or_else(|| i.to_string());
        let w = (0..self.confusion.len()).map(|i| name(i).len()).max().unwrap_or(1).max(6);
        let mut out = format!("{:>w$}", "true\\pred");
        for j in 0..self.confusion.len() {
            out.push_str(&format!(" {:>w$}", name(j)));
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            out.push_str(&format!("{:>w$}", name(i), w = w.max(9)));
            for v in row {
                out.push_str(&format!(" {v:>w$}"));
            }
            out.push('\n');
        }
        out
    }
}

fn softmax_ce(logits: &[f32], label: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = max + logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    lse - logits[label] as f64
}

/// Eval-mode accuracy, confusion and loss over `samples`.
pub fn evaluate<S: Samples + ?Sized>(params: &ViTParams<f32>, cfg: &ViTConfig, samples: &S) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let mut confusion = vec![vec![0usize; cfg.n_classes]; cfg.n_classes];
    let mut loss = 0.0;
    for i in 0..samples.len() {
        let s = samples.get(i)?;
        let out = forward_compact(&s.input, params, cfg, Mode::Eval, 0, false)?;
        let logits = &out.logits;
        confusion[s.label][argmax(logits)] += 1;
        loss += softmax_ce(logits, s.label);
    }
    let n = samples.len();
    let correct: usize = (0..cfg.n_classes).map(|c| confusion[c][c]).sum();
    Ok(Metrics { accuracy: correct as f64 / n as f64, confusion, loss: loss / n as f64, samples: n })
}

/// One line of `history.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    /// Mean cross-entropy of the training forwards (dropout active).
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Mean loss and accuracy of one pass over the training set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
    pub steps: usize,
}

/// Model, optimizer state and epoch counter of a run in progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: ViTConfig,
    pub train_config: TrainConfig,
    pub params: ViTParams<f32>,
    pub state: AdamState,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    /// Fresh weights. The model's dropout rate is taken from `train_config`.
    pub fn new(config: &ViTConfig, train_config: &TrainConfig) -> Result<Self> {
        train_config.validate()?;
        let config = ViTConfig { dropout_rate: train_config.dropout, ..config.clone() };
        let params = init_params(&config, derive_seed(train_config.seed, 0))?;
        let state = AdamState::new(&params);
        Ok(Trainer { config, train_config: train_config.clone(), params, state, epoch: 0 })
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(ck: &Checkpoint, train_config: &TrainConfig) -> Result<Self> {
        train_config.validate()?;
        let state = ck.optimizer.clone().ok_or_else(|| Error::invalid("checkpoint has no optimizer state to resume from"))?;
        state.check_matches(&ck.params)?;
        let config = ViTConfig { dropout_rate: train_config.dropout, ..ck.config.clone() };
        Ok(Trainer { config, train_config: train_config.clone(), params: ck.params.clone(), state, epoch: ck.meta.epoch })
    }

    pub fn lr(&self) -> f64 {
        lr_at_epoch(self.epoch, &self.train_config)
    }

    /// Sample order for the current epoch; a pure function of seed and epoch.
    fn order(&self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_from_seed(derive_seed(self.train_config.seed, (1 << 32) | self.epoch as u64)));
        idx
    }

    /// Runs at most `max_steps` optimizer steps of the current epoch and
    /// advances the epoch counter when the epoch is finished.
    pub fn run_epoch_limited<S: Samples + ?Sized>(&mut self, train: &S, max_steps: usize) -> Result<EpochStats> {
        if train.is_empty() {
            return Err(Error::invalid("training split is empty"));
        }
        let lr = self.lr();
        let order = self.order(train.len());
        let dropout_stream = derive_seed(self.train_config.seed, (2 << 32) | self.epoch as u64);
        let (mut loss_sum, mut correct, mut seen, mut steps) = (0.0f64, 0usize, 0usize, 0usize);
        let complete = order.len().div_ceil(self.train_config.batch) <= max_steps;
        for batch in order.chunks(self.train_config.batch).take(max_steps) {
            let mut acc: Vec<Vec<f32>> = self.params.arrays().iter().map(|t| vec![0.0; t.len()]).collect();
            for &i in batch {
                let s = train.get(i)?;
                let (loss, logits, grads) =
                    loss_and_gradients(&s.input, s.label, &self.params, &self.config, Mode::Train, derive_seed(dropout_stream, i as u64))?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss at epoch {} sample {i}", self.epoch)));
                }
                loss_sum += loss as f64;
                correct += usize::from(argmax(&logits) == s.label);
                seen += 1;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += *y;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f32;
            for a in &mut acc {
                a.iter_mut().for_each(|x| *x *= scale);
            }
            adam_step(&mut self.params, &acc, &mut self.state, lr, &self.train_config)?;
            steps += 1;
        }
        if complete {
            self.epoch += 1;
        }
        Ok(EpochStats { loss: loss_sum / seen as f64, accuracy: correct as f64 / seen as f64, steps })
    }

    pub fn run_epoch<S: Samples + ?Sized>(&mut self, train: &S) -> Result<EpochStats> {
        self.run_epoch_limited(train, usize::MAX)
    }

    pub fn checkpoint(&self, meta: CheckpointMeta, with_optimizer: bool) -> Checkpoint {
        Checkpoint { config: self.config.clone(), params: self.params.clone(), meta, optimizer: with_optimizer.then(|| self.state.clone()) }
    }
}

pub const HISTORY_FILE: &str = "history.jsonl";
pub const BEST_CHECKPOINT: &str = "best.mdvt";
pub const LAST_CHECKPOINT: &str = "last.mdvt";

/// What a finished [`train`] run leaves behind (also written to `out_dir`).
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    pub best: Checkpoint,
    pub last: Checkpoint,
}

pub fn parse_history(text: &str) -> Result<Vec<HistoryRow>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(Error::from)).collect()
}

fn history_text(rows: &[HistoryRow]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Trains to `train_config.epochs`, writing `history.jsonl`, the
/// best-validation checkpoint `best.mdvt` and the resumable `last.mdvt`
/// after every epoch. With `resume`, history rows past the checkpoint's
/// epoch are discarded and training picks up from there.
pub fn train<S: Samples + ?Sized>(
    train_set: &S,
    val_set: &S,
    config: &ViTConfig,
    train_config: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation splits must be non-empty"));
    }
    fs::create_dir_all(out_dir)?;
    let history_path = out_dir.join(HISTORY_FILE);
    let (mut trainer, mut history, mut best) = match resume {
        None => (Trainer::new(config, train_config)?, Vec::new(), None),
        Some(ck) => {
            let t = Trainer::resume(ck, train_config)?;
            let mut h = match fs::read_to_string(&history_path) {
                Ok(text) => parse_history(&text)?,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
                Err(e) => return Err(e.into()),
            };
            h.retain(|r| r.epoch < t.epoch);
            let best = match crate::vit::load_checkpoint(&out_dir.join(BEST_CHECKPOINT)) {
                Ok(b) if b.meta.epoch <= t.epoch => Some(b),
                _ => None,
            };
            (t, h, best)
        }
    };
    let mut last = trainer.checkpoint(CheckpointMeta { seed: train_config.seed, ..CheckpointMeta::default() }, true);
    while trainer.epoch < train_config.epochs {
        let lr = trainer.lr();
        let epoch = trainer.epoch;
        let stats = trainer.run_epoch(train_set)?;
        let val = evaluate(&trainer.params, &trainer.config, val_set)?;
        history.push(HistoryRow { epoch, lr, train_loss: stats.loss, train_acc: stats.accuracy, val_loss: val.loss, val_acc: val.accuracy });
        let best_acc = best.as_ref().map_or(f64::NEG_INFINITY, |b: &Checkpoint| b.meta.val_acc);
        let meta = CheckpointMeta { epoch: trainer.epoch, val_acc: val.accuracy, best_val_acc: best_acc.max(val.accuracy), seed: train_config.seed };
        if val.accuracy > best_acc {
            let ck = trainer.checkpoint(meta.clone(), false);
            save_checkpoint(&out_dir.join(BEST_CHECKPOINT), &ck)?;
            best = Some(ck);
        }
        last = trainer.checkpoint(meta, true);
        save_checkpoint(&out_dir.join(LAST_CHECKPOINT), &last)?;
        write_bytes(&history_path, history_text(&history)?.as_bytes())?;
    }
    let best = best.unwrap_or_else(|| Checkpoint { optimizer: None, ..last.clone() });
    Ok(TrainOutcome { history, best, last })
}
