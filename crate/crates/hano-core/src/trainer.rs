//! Optimization loop: Adam with decoupled weight decay, a one-cycle
//! learning-rate schedule, seeded shuffling, train/val/test protocol with
//! best-by-validation checkpoint retention, and per-epoch error metrics
//! plus frequency-spectrum tracking.
//!
//! Determinism contract: with a fixed seed and config, everything in the
//! returned history is bitwise reproducible except the wall-time `seconds`
//! column. Validation selection uses the mean relative L² error (the
//! headline metric); `val_size = 0` keeps the final-epoch parameters.

use crate::data::dataset::Sample;
use crate::diffcore::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::model::{HanoConfig, ModelState};
use crate::spectral::{
    freq_error_spectrum, rel_h1, rel_h1_grad, rel_l2, rel_l2_grad, spectrum_csv_row, SpectrumRow,
    SPECTRUM_CSV_HEADER,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

/// Adam first-moment decay.
pub const ADAM_BETA1: f64 = 0.9;
/// Adam second-moment decay.
pub const ADAM_BETA2: f64 = 0.999;
/// Adam denominator guard.
pub const ADAM_EPS: f64 = 1e-8;
/// Fraction of total steps spent in linear warm-up.
pub const WARMUP_FRACTION: f64 = 0.3;
/// The warm-up starts at `max_lr / WARMUP_START_FACTOR`.
pub const WARMUP_START_FACTOR: f64 = 25.0;
/// Column layout of the per-epoch history CSV.
pub const HISTORY_CSV_HEADER: &str =
    "epoch,train_loss,train_l2,test_l2,train_h1,test_h1,lr,seconds";

/// Which relative error the training objective minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Relative L² distance of node values.
    L2,
    /// Relative frequency-weighted first-order seminorm distance.
    H1,
}

impl LossKind {
    fn value_and_grad(self, pred: &GridField, target: &GridField) -> Result<(f64, GridField)> {
        match self {
            LossKind::L2 => rel_l2_grad(pred, target),
            LossKind::H1 => rel_h1_grad(pred, target),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::L2 => "l2",
            LossKind::H1 => "h1",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<LossKind> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(LossKind::L2),
            "h1" => Ok(LossKind::H1),
            other => Err(Error::invalid(format!(
                "unknown loss {other:?}; expected \"l2\" or \"h1\""
            ))),
        }
    }
}

/// Optimization hyperparameters and data split sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate of the one-cycle schedule.
    pub max_lr: f64,
    /// Learning rate at the final step.
    pub final_lr: f64,
    /// Decoupled weight-decay coefficient.
    pub weight_decay: f64,
    /// Samples per optimizer step (the last batch of an epoch may be short).
    pub batch: usize,
    pub epochs: usize,
    pub loss: LossKind,
    /// Drives initialization, shuffling, and therefore the whole run.
    pub seed: u64,
    /// Leading samples used for optimization.
    pub train_size: usize,
    /// Samples after the train split used for checkpoint selection
    /// (0 keeps the final epoch).
    pub val_size: usize,
    /// Samples after the validation split used for reporting.
    pub test_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_lr: 1e-3,
            final_lr: 1e-5,
            weight_decay: 1e-4,
            batch: 8,
            epochs: 50,
            loss: LossKind::L2,
            seed: 0,
            train_size: 0,
            val_size: 0,
            test_size: 0,
        }
    }
}

impl TrainConfig {
    /// Check rates, sizes, and that the splits fit into `available` samples.
    pub fn validate(&self, available: usize) -> Result<()> {
        for (name, v) in [
            ("max_lr", self.max_lr),
            ("final_lr", self.final_lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if self.final_lr > self.max_lr {
            return Err(Error::invalid(format!(
                "final_lr {} exceeds max_lr {}",
                self.final_lr, self.max_lr
            )));
        }
        if self.batch == 0 || self.epochs == 0 || self.train_size == 0 {
            return Err(Error::invalid(
                "batch, epochs, and train_size must all be positive".to_string(),
            ));
        }
        let need = self.train_size + self.val_size + self.test_size;
        if need > available {
            return Err(Error::invalid(format!(
                "splits need {need} samples but the dataset holds {available}"
            )));
        }
        Ok(())
    }
}

/// One-cycle schedule: linear warm-up from `max_lr / 25` to `max_lr` over
/// the first 30% of steps, then cosine annealing down to `final_lr` at the
/// last step. Continuous at the junction.
pub fn one_cycle_lr(step: usize, total_steps: usize, max_lr: f64, final_lr: f64) -> Result<f64> {
    if total_steps == 0 || step >= total_steps {
        return Err(Error::invalid(format!(
            "schedule step {step} out of range for {total_steps} total steps"
        )));
    }
    let last = (total_steps - 1) as f64;
    let warmup_end = WARMUP_FRACTION * total_steps as f64;
    let s = step as f64;
    let cosine = |t: f64| final_lr + (max_lr - final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    if last <= warmup_end {
        // Schedule too short for a warm-up phase: anneal over everything.
        if last == 0.0 {
            return Ok(final_lr);
        }
        return Ok(cosine(s / last));
    }
    if s < warmup_end {
        let start = max_lr / WARMUP_START_FACTOR;
        Ok(start + (max_lr - start) * s / warmup_end)
    } else {
        Ok(cosine((s - warmup_end) / (last - warmup_end)))
    }
}

/// Adam optimizer state with decoupled weight decay
/// (`θ ← θ − lr·wd·θ` applied before each moment update).
#[derive(Debug, Clone)]
pub struct Adam {
    weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u32,
}

impl Adam {
    /// Fresh optimizer with zero moments, shaped after `store`.
    pub fn new(store: &ParamStore, weight_decay: f64) -> Result<Adam> {
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(Error::invalid(format!(
                "weight decay must be finite and nonnegative, got {weight_decay}"
            )));
        }
        Ok(Adam {
            weight_decay,
            m: store.iter().map(|(_, t)| t.zeros_like()).collect(),
            v: store.iter().map(|(_, t)| t.zeros_like()).collect(),
            t: 0,
        })
    }

    /// Apply one update using the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be finite and nonnegative, got {lr}"
            )));
        }
        if store.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters but the store holds {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..store.len() {
            let (theta, grad) = store.value_and_grad_mut(ParamId::from_index(i));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((th, &g), ms), vs) in theta
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *th -= lr * self.weight_decay * *th;
                *ms = ADAM_BETA1 * *ms + (1.0 - ADAM_BETA1) * g;
                *vs = ADAM_BETA2 * *vs + (1.0 - ADAM_BETA2) * g * g;
                *th -= lr * (*ms / bc1) / ((*vs / bc2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// One history row (the CSV layout in [`HISTORY_CSV_HEADER`]).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Mean per-sample training loss accumulated during the epoch.
    pub train_loss: f64,
    /// Mean relative L² error on the train split after the epoch.
    pub train_l2: f64,
    /// Mean relative L² error on the test split (NaN when no test split).
    pub test_l2: f64,
    pub train_h1: f64,
    pub test_h1: f64,
    /// Learning rate at the last optimizer step of the epoch.
    pub lr: f64,
    /// Wall time of the epoch; exempt from the determinism contract.
    pub seconds: f64,
}

/// Error spectrum of one split at one epoch (epoch 0 = before training).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumTrace {
    pub epoch: usize,
    pub split: String,
    pub rows: Vec<SpectrumRow>,
}

/// Everything a run records.
#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// In emission order: per epoch first the train split, then the test
    /// split. Empty when spectrum tracking is disabled.
    pub spectra: Vec<SpectrumTrace>,
}

/// Mean relative L² and relative H¹ errors over a split
/// (mean of per-sample errors, not a ratio of means).
pub fn evaluate(state: &ModelState, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let mut l2_sum = 0.0;
    let mut h1_sum = 0.0;
    for s in samples {
        let pred = state.forward(&s.a)?;
        l2_sum += rel_l2(&pred, &s.u)?;
        h1_sum += rel_h1(&pred, &s.u)?;
    }
    let n = samples.len() as f64;
    Ok((l2_sum / n, h1_sum / n))
}

fn spectrum_for(
    state: &ModelState,
    samples: &[Sample],
    epoch: usize,
    split: &str,
    k: usize,
) -> Result<SpectrumTrace> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        preds.push(state.forward(&s.a)?);
        targets.push(s.u.clone());
    }
    Ok(SpectrumTrace {
        epoch,
        split: split.to_string(),
        rows: freq_error_spectrum(&preds, &targets, k)?,
    })
}

/// Run the full optimization loop over `samples`, split as
/// `[train | val | test]` in order. `spectrum_k > 0` additionally records
/// the error spectrum at the `spectrum_k` dominating frequencies for the
/// train and test splits, before training (epoch 0) and after every epoch.
pub fn train(
    model_config: &HanoConfig,
    samples: &[Sample],
    config: &TrainConfig,
    spectrum_k: usize,
) -> Result<(ModelState, TrainHistory)> {
    config.validate(samples.len())?;
    let n = samples[0].a.n();
    for s in samples {
        if s.a.n() != n || s.u.n() != n {
            return Err(Error::shape(
                "all samples in a training set must share one resolution".to_string(),
            ));
        }
    }
    model_config.token_side(n)?;

    let train_split = &samples[..config.train_size];
    let val_split = &samples[config.train_size..config.train_size + config.val_size];
    let test_split = &samples
        [config.train_size + config.val_size..config.train_size + config.val_size + config.test_size];

    let mut state = ModelState::init(model_config.clone(), config.seed)?;
    let mut adam = Adam::new(state.params(), config.weight_decay)?;
    let batches_per_epoch = config.train_size.div_ceil(config.batch);
    let total_steps = config.epochs * batches_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut history = TrainHistory::default();
    if spectrum_k > 0 {
        history
            .spectra
            .push(spectrum_for(&state, train_split, 0, "train", spectrum_k)?);
        if !test_split.is_empty() {
            history
                .spectra
                .push(spectrum_for(&state, test_split, 0, "test", spectrum_k)?);
        }
    }

    let mut indices: Vec<usize> = (0..config.train_size).collect();
    let mut best_val = f64::INFINITY;
    let mut best_params: Option<ParamStore> = None;
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        let clock = Instant::now();
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut last_lr = 0.0;
        for batch in indices.chunks(config.batch) {
            state.params_mut().zero_grads();
            for &idx in batch {
                let sample = &train_split[idx];
                let (pred, trace) = state.forward_traced(&sample.a)?;
                let (loss, d_pred) = config.loss.value_and_grad(&pred, &sample.u)?;
                if !loss.is_finite() {
                    return Err(Error::numerical(format!(
                        "non-finite loss at epoch {epoch}, sample {idx}"
                    )));
                }
                loss_sum += loss;
                state.backward(&trace, &d_pred)?;
            }
            state.params_mut().scale_grads(1.0 / batch.len() as f64);
            if state.params().iter_grads().any(|(_, g)| !g.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite gradient at epoch {epoch}, step {step}"
                )));
            }
            last_lr = one_cycle_lr(step, total_steps, config.max_lr, config.final_lr)?;
            adam.step(state.params_mut(), last_lr)?;
            step += 1;
        }
        if !state.params().all_finite() {
            return Err(Error::numerical(format!(
                "non-finite parameters after epoch {epoch}"
            )));
        }

        let (train_l2, train_h1) = evaluate(&state, train_split)?;
        let (test_l2, test_h1) = if test_split.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            evaluate(&state, test_split)?
        };
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / config.train_size as f64,
            train_l2,
            test_l2,
            train_h1,
            test_h1,
            lr: last_lr,
            seconds: clock.elapsed().as_secs_f64(),
        });
        if spectrum_k > 0 {
            history
                .spectra
                .push(spectrum_for(&state, train_split, epoch, "train", spectrum_k)?);
            if !test_split.is_empty() {
                history
                    .spectra
                    .push(spectrum_for(&state, test_split, epoch, "test", spectrum_k)?);
            }
        }
        if !val_split.is_empty() {
            let (val_l2, _) = evaluate(&state, val_split)?;
            if val_l2 < best_val {
                best_val = val_l2;
                best_params = Some(state.params().clone());
            }
        }
    }

    if let Some(best) = best_params {
        *state.params_mut() = best;
    }
    Ok((state, history))
}

/// Render history rows as CSV (including the header line).
pub fn history_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_CSV_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.train_l2, r.test_l2, r.train_h1, r.test_h1, r.lr, r.seconds
        )
        .expect("string write");
    }
    out
}

/// Render spectrum traces as CSV (including the header line).
pub fn spectrum_csv(spectra: &[SpectrumTrace]) -> String {
    let mut out = String::from(SPECTRUM_CSV_HEADER);
    out.push('\n');
    for trace in spectra {
        for row in &trace.rows {
            out.push_str(&spectrum_csv_row(trace.epoch, &trace.split, row));
            out.push('\n');
        }
    }
    out
}

/// Save a checkpoint through a temp file and rename, so a crash mid-write
/// never leaves a truncated checkpoint at `path`.
pub fn save_checkpoint_atomic(state: &ModelState, path: &Path) -> Result<()> {
    let mut tmp_name = path.as_os_str().to_os_string();
    tmp_name.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp_name);
    state.save_checkpoint(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
