//! Adam optimizer, parameter initialization, and the training loop.
//!
//! Training is bit-reproducible: initialization and epoch shuffles draw from
//! seeds derived with fixed purpose tags, and batch gradients accumulate in
//! fixed-size chunks that are reduced in index order, so results do not
//! depend on the rayon thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, TrainingWindow};
use crate::error::{Error, Result};
use crate::model::{self, GradientBuffer, ModelConfig, ModelParams, TensorId};
use crate::rng::{derive_seed, purpose, SplitMix64};

use std::io::Write;
use std::path::Path;
use std::time::Instant;

/// Windows per accumulation chunk. Partial gradients are computed per chunk
/// (possibly in parallel) and reduced sequentially in index order, which
/// pins the floating-point summation order for any thread count.
const ACCUM_CHUNK: usize = 16;

/// First and second moment estimates for Adam.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl AdamState {
    /// Fresh state with the standard coefficients (0.9, 0.999, 1e-8).
    pub fn new(n_params: usize) -> Self {
        Self::with_coefficients(n_params, 0.9, 0.999, 1e-8)
            .expect("standard Adam coefficients are valid")
    }

    pub fn with_coefficients(
        n_params: usize,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::Config(format!(
                "Adam decay rates must lie in [0, 1), got {beta1} and {beta2}"
            )));
        }
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "Adam epsilon must be positive and finite, got {epsilon}"
            )));
        }
        Ok(Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            beta1,
            beta2,
            epsilon,
        })
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update: moment updates, bias correction, then
/// `theta -= lr * m_hat / (sqrt(v_hat) + epsilon)`.
///
/// Every gradient tensor is scanned for non-finite values before any
/// parameter or moment is touched, so a poisoned batch cannot corrupt state.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradientBuffer,
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<()> {
    if !learning_rate.is_finite() || learning_rate <= 0.0 {
        return Err(Error::Config(format!(
            "learning rate must be positive and finite, got {learning_rate}"
        )));
    }
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch {
            context: "Adam update",
            expected: params.len(),
            actual: grads.len().min(state.m.len()),
        });
    }
    grads.check_finite()?;

    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let theta = params.as_mut_slice();
    for (((t, g), m), v) in theta
        .iter_mut()
        .zip(grads.as_slice())
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *t -= learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Optimization schedule and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub shuffle_seed: u64,
    #[serde(default)]
    pub init_seed: u64,
    /// Checkpoint file rewrite cadence in epochs; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Rescale the mean batch gradient whenever its norm exceeds this.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

fn default_learning_rate() -> f64 {
    1e-4
}

fn default_epochs() -> usize {
    100
}

fn default_batch_size() -> usize {
    128
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_learning_rate(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            shuffle_seed: 0,
            init_seed: 0,
            checkpoint_every: 0,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let Some(limit) = self.max_grad_norm {
            if !limit.is_finite() || limit <= 0.0 {
                return Err(Error::Config(format!(
                    "max_grad_norm must be positive and finite, got {limit}"
                )));
            }
        }
        Ok(())
    }
}

/// Fresh parameters: kernel entries uniform in (-1/sqrt(H), 1/sqrt(H)) drawn
/// in flat layout order with biases skipped; biases start at zero except the
/// forget-gate slice, which starts at one so early cells remember.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let bound = 1.0 / (config.hidden_size as f64).sqrt();
    let mut rng = SplitMix64::new(seed);
    let mut params = ModelParams::zeros(config.hidden_size);
    let h = config.hidden_size;
    for id in TensorId::ALL {
        match id {
            TensorId::EncB | TensorId::DecB => {
                params.tensor_mut(id)[h..2 * h].fill(1.0);
            }
            TensorId::OutB => {}
            _ => {
                for w in params.tensor_mut(id) {
                    *w = bound * (2.0 * rng.next_f64() - 1.0);
                }
            }
        }
    }
    Ok(params)
}

/// Per-epoch metrics. `train_rmse` averages the pre-update batch losses of
/// the epoch; `val_rmse` is the mean validation loss after the epoch (NaN
/// when there is no validation pool); `seconds` is wall time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_rmse: f64,
    pub val_rmse: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

/// CSV export: `epoch,train_rmse,val_rmse,seconds`, floats with 17
/// significant digits.
pub fn write_history_csv<W: Write>(history: &TrainHistory, out: &mut W) -> Result<()> {
    writeln!(out, "epoch,train_rmse,val_rmse,seconds")?;
    for r in &history.records {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e}",
            r.epoch, r.train_rmse, r.val_rmse, r.seconds
        )?;
    }
    Ok(())
}

/// Final parameters and the epoch-by-epoch history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
}

fn check_window_shapes(windows: &[TrainingWindow], config: &ModelConfig) -> Result<()> {
    for w in windows {
        if w.encoder_d.len() != config.encoder_length
            || w.encoder_e.len() != config.encoder_length
        {
            return Err(Error::ShapeMismatch {
                context: "window encoder series vs model config",
                expected: config.encoder_length,
                actual: w.encoder_d.len(),
            });
        }
        if w.decoder_e.len() != config.decoder_length || w.target_d.len() != config.decoder_length
        {
            return Err(Error::ShapeMismatch {
                context: "window decoder series vs model config",
                expected: config.decoder_length,
                actual: w.decoder_e.len(),
            });
        }
    }
    Ok(())
}

/// Mean per-window RMSE under the current parameters, forward passes only.
/// NaN for an empty pool.
pub fn mean_forward_loss(
    params: &ModelParams,
    config: &ModelConfig,
    windows: &[TrainingWindow],
) -> Result<f64> {
    if windows.is_empty() {
        return Ok(f64::NAN);
    }
    let losses: Vec<f64> = windows
        .par_iter()
        .map(|w| -> Result<f64> {
            let preds = model::forward(params, config, w)?;
            model::loss_rmse(&preds, &w.target_d)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Trains a fresh model (seeded by `init_seed`) on the dataset's training
/// pool.
///
/// Each epoch shuffles the pool with a seed derived from the shuffle stream
/// and the 0-based epoch index, walks it in batches, and applies one Adam
/// update per batch using the mean batch gradient. Validation runs forward
/// passes only and never influences the parameters. When `checkpoint_path`
/// is given, the file is rewritten every `checkpoint_every` epochs (if
/// nonzero) and always once more after the last epoch.
pub fn train(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome> {
    train_observed(dataset, model_config, train_config, checkpoint_path, &mut |_| {})
}

/// Like [`train`], but calls `observer` with each epoch's record as soon as
/// the epoch finishes, so long runs can report progress while they happen.
/// The records passed to the observer are the same ones collected into the
/// returned history, in order.
pub fn train_observed(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    checkpoint_path: Option<&Path>,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    model_config.validate()?;
    let init_stream = derive_seed(train_config.init_seed, purpose::INIT);
    let params = init_params(model_config, init_stream)?;
    train_from_observed(
        dataset,
        model_config,
        train_config,
        params,
        checkpoint_path,
        observer,
    )
}

/// Like [`train`], but continues from the given parameters instead of a
/// fresh initialization; `init_seed` is ignored. This is how a run resumes
/// from a checkpoint or anneals the learning rate across stages. Optimizer
/// moments start from zero either way, so a resumed run is not bit-equal
/// to an uninterrupted one.
pub fn train_from(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    initial: ModelParams,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome> {
    train_from_observed(
        dataset,
        model_config,
        train_config,
        initial,
        checkpoint_path,
        &mut |_| {},
    )
}

/// [`train_from`] with the per-epoch observer of [`train_observed`].
pub fn train_from_observed(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    initial: ModelParams,
    checkpoint_path: Option<&Path>,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    model_config.validate()?;
    train_config.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Config("training pool is empty".into()));
    }
    check_window_shapes(&dataset.train, model_config)?;
    check_window_shapes(&dataset.val, model_config)?;
    if initial.hidden_size() != model_config.hidden_size {
        return Err(Error::ShapeMismatch {
            context: "initial parameters",
            expected: model_config.hidden_size,
            actual: initial.hidden_size(),
        });
    }

    let shuffle_stream = derive_seed(train_config.shuffle_seed, purpose::SHUFFLE);
    let mut params = initial;
    let mut adam = AdamState::new(params.len());
    let mut history = TrainHistory::default();

    let n_train = dataset.train.len();
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch_idx in 0..train_config.epochs {
        let epoch = epoch_idx + 1;
        let started = Instant::now();
        let mut shuffle_rng = SplitMix64::new(derive_seed(shuffle_stream, epoch_idx as u64));
        order.sort_unstable();
        shuffle_rng.shuffle(&mut order);

        let mut epoch_loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(train_config.batch_size).enumerate() {
            let current = &params;
            let partials: Vec<(f64, GradientBuffer)> = batch
                .par_chunks(ACCUM_CHUNK)
                .map(|chunk| -> Result<(f64, GradientBuffer)> {
                    let mut acc = GradientBuffer::zeros(model_config.hidden_size);
                    let mut loss_sum = 0.0;
                    for &idx in chunk {
                        let (loss, grads) =
                            model::backward(current, model_config, &dataset.train[idx])?;
                        loss_sum += loss;
                        acc.add(&grads)?;
                    }
                    Ok((loss_sum, acc))
                })
                .collect::<Result<Vec<_>>>()?;

            let mut grads = GradientBuffer::zeros(model_config.hidden_size);
            let mut batch_loss_sum = 0.0;
            for (loss_sum, partial) in &partials {
                batch_loss_sum += loss_sum;
                grads.add(partial)?;
            }
            let batch_len = batch.len() as f64;
            if !batch_loss_sum.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            grads.scale(1.0 / batch_len);
            if let Some(limit) = train_config.max_grad_norm {
                let norm = grads.norm();
                if norm > limit {
                    grads.scale(limit / norm);
                }
            }
            adam_step(&mut params, &grads, &mut adam, train_config.learning_rate)?;
            epoch_loss_sum += batch_loss_sum;
        }

        let train_rmse = epoch_loss_sum / n_train as f64;
        let val_rmse = mean_forward_loss(&params, model_config, &dataset.val)?;
        let record = EpochRecord {
            epoch,
            train_rmse,
            val_rmse,
            seconds: started.elapsed().as_secs_f64(),
        };
        observer(&record);
        history.records.push(record);

        if let Some(path) = checkpoint_path {
            if train_config.checkpoint_every > 0 && epoch % train_config.checkpoint_every == 0 {
                model::write_checkpoint(path, &params, model_config)?;
            }
        }
    }

    if let Some(path) = checkpoint_path {
        model::write_checkpoint(path, &params, model_config)?;
    }
    Ok(TrainOutcome { params, history })
}

/// Outcome of [`finite_difference_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub seeds_checked: usize,
    /// Components whose analytic or numerical gradient cleared the floor.
    pub components_checked: usize,
    pub worst_relative_error: f64,
    /// `(seed, flat parameter index)` of the worst component.
    pub worst_component: Option<(u64, usize)>,
    pub passed: bool,
}

/// Compares analytic gradients against central finite differences of the
/// forward loss on random parameters and windows.
///
/// For each seed, parameters are drawn uniform in (-0.5, 0.5) and one window
/// uniform in (-1, 1); every parameter is then displaced by
/// `1e-5 * max(1, |theta|)` both ways. Components where both gradients stay
/// below `magnitude_floor` are skipped; the rest must agree to `tolerance`
/// in relative error.
pub fn finite_difference_check(
    config: &ModelConfig,
    seeds: &[u64],
    magnitude_floor: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    use crate::dataset::{TrainingWindow, WindowSource};
    use crate::fields::FieldSpec;

    config.validate()?;
    let mut report = GradCheckReport {
        seeds_checked: 0,
        components_checked: 0,
        worst_relative_error: 0.0,
        worst_component: None,
        passed: false,
    };
    for &seed in seeds {
        let mut rng = SplitMix64::new(seed);
        let mut params = ModelParams::zeros(config.hidden_size);
        for v in params.as_mut_slice() {
            *v = 0.5 * (2.0 * rng.next_f64() - 1.0);
        }
        let mut series = |n: usize| -> Vec<f64> {
            (0..n).map(|_| 2.0 * rng.next_f64() - 1.0).collect()
        };
        let window = TrainingWindow {
            encoder_d: series(config.encoder_length),
            encoder_e: series(config.encoder_length),
            decoder_e: series(config.decoder_length),
            target_d: series(config.decoder_length),
            source: WindowSource {
                field: FieldSpec::zero(),
                start: 0,
            },
        };

        let (_, grads) = model::backward(&params, config, &window)?;
        let analytic = grads.as_slice();
        for idx in 0..params.len() {
            let theta = params.as_slice()[idx];
            let step = 1e-5 * theta.abs().max(1.0);
            let loss_at = |value: f64| -> Result<f64> {
                let mut probe = params.clone();
                probe.as_mut_slice()[idx] = value;
                let preds = model::forward(&probe, config, &window)?;
                model::loss_rmse(&preds, &window.target_d)
            };
            let numeric = (loss_at(theta + step)? - loss_at(theta - step)?) / (2.0 * step);
            let scale = analytic[idx].abs().max(numeric.abs());
            if scale <= magnitude_floor {
                continue;
            }
            report.components_checked += 1;
            let rel = (analytic[idx] - numeric).abs() / scale;
            if rel > report.worst_relative_error {
                report.worst_relative_error = rel;
                report.worst_component = Some((seed, idx));
            }
        }
        report.seeds_checked += 1;
    }
    report.passed =
        report.components_checked > 0 && report.worst_relative_error < tolerance;
    Ok(report)
}
