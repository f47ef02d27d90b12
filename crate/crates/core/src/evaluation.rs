//! Forecast quality measurement on held-out drive settings.
//!
//! A [`Forecaster`] sees the first encoder window of the true dipole plus
//! the drive specification and must continue the dipole across a horizon.
//! Losses are RMSEs averaged over fixed-length segments and normalized by
//! the peak magnitude of the true continuation, so cells with different
//! response strengths stay comparable.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{sample_field, FieldFamily, FieldSpec};
use crate::model::{self, ModelConfig, ModelParams};
use crate::physics::{solve_trajectory, QuantumState, TimeGrid, TwoLevelParams, DEFAULT_DT};
use crate::rng::{derive_seed, purpose};

use std::io::Write;

/// Truth peaks below this are treated as silence: the segment-mean RMSE is
/// then reported unnormalized instead of being blown up by the division.
pub const NORMALIZATION_FLOOR: f64 = 1e-6;

/// Continues a dipole series across `horizon` grid nodes.
///
/// `seed_d` holds the true dipole on the first nodes of `grid`; the
/// forecast covers the following `horizon` nodes, and `grid` spans exactly
/// both parts. Implementations must be `Sync`: grid evaluation fans cells
/// out in parallel.
pub trait Forecaster: Sync {
    fn forecast(
        &self,
        seed_d: &[f64],
        field: &FieldSpec,
        grid: &TimeGrid,
        horizon: usize,
    ) -> Result<Vec<f64>>;
}

/// Trained seq2seq model wrapped for evaluation.
pub struct LstmForecaster {
    params: ModelParams,
    config: ModelConfig,
}

impl LstmForecaster {
    pub fn new(params: ModelParams, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if params.hidden_size() != config.hidden_size {
            return Err(Error::ShapeMismatch {
                context: "forecaster parameters vs config hidden size",
                expected: config.hidden_size,
                actual: params.hidden_size(),
            });
        }
        Ok(Self { params, config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
}

impl Forecaster for LstmForecaster {
    fn forecast(
        &self,
        seed_d: &[f64],
        field: &FieldSpec,
        grid: &TimeGrid,
        horizon: usize,
    ) -> Result<Vec<f64>> {
        let e_full = sample_field(field, grid)?;
        model::rollout(&self.params, &self.config, seed_d, &e_full, horizon)
    }
}

/// Upper-bound stub: re-solves the dynamics and returns the exact dipole.
pub struct DynamicsForecaster {
    params: TwoLevelParams,
}

impl DynamicsForecaster {
    pub fn new(params: TwoLevelParams) -> Self {
        Self { params }
    }
}

impl Default for DynamicsForecaster {
    fn default() -> Self {
        Self::new(TwoLevelParams::default())
    }
}

impl Forecaster for DynamicsForecaster {
    fn forecast(
        &self,
        seed_d: &[f64],
        field: &FieldSpec,
        grid: &TimeGrid,
        horizon: usize,
    ) -> Result<Vec<f64>> {
        let trajectory =
            solve_trajectory(&self.params, field, grid, &QuantumState::ground())?;
        if trajectory.len() != seed_d.len() + horizon {
            return Err(Error::ShapeMismatch {
                context: "dynamics forecast grid vs seed plus horizon",
                expected: seed_d.len() + horizon,
                actual: trajectory.len(),
            });
        }
        Ok(trajectory.d()[seed_d.len()..].to_vec())
    }
}

/// Lower-bound stub: predicts silence everywhere.
pub struct ZeroForecaster;

impl Forecaster for ZeroForecaster {
    fn forecast(
        &self,
        _seed_d: &[f64],
        _field: &FieldSpec,
        _grid: &TimeGrid,
        horizon: usize,
    ) -> Result<Vec<f64>> {
        Ok(vec![0.0; horizon])
    }
}

/// Mean per-segment RMSE normalized by the truth's peak magnitude.
///
/// Both series split into `segment_length` chunks (the final chunk may be
/// shorter); each contributes one RMSE to the mean. Truth quieter than
/// [`NORMALIZATION_FLOOR`] leaves the mean unnormalized.
pub fn normalized_test_loss(
    predictions: &[f64],
    truth: &[f64],
    segment_length: usize,
) -> Result<f64> {
    if segment_length == 0 {
        return Err(Error::Config("segment_length must be at least 1".into()));
    }
    if predictions.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            context: "normalized_test_loss series",
            expected: truth.len(),
            actual: predictions.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::TooShort {
            context: "normalized_test_loss",
            needed: 1,
            actual: 0,
        });
    }
    let mut sum = 0.0;
    let mut segments = 0usize;
    for (p, t) in predictions
        .chunks(segment_length)
        .zip(truth.chunks(segment_length))
    {
        sum += model::loss_rmse(p, t)?;
        segments += 1;
    }
    let mean = sum / segments as f64;
    let peak = truth.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
    if peak < NORMALIZATION_FLOOR {
        Ok(mean)
    } else {
        Ok(mean / peak)
    }
}

/// Solves the true dynamics for one drive setting, hands the forecaster the
/// first `encoder_length` dipole samples, and scores the continuation.
pub fn evaluate_cell(
    forecaster: &dyn Forecaster,
    field: &FieldSpec,
    encoder_length: usize,
    horizon: usize,
    segment_length: usize,
) -> Result<f64> {
    if encoder_length == 0 || horizon == 0 {
        return Err(Error::Config(
            "encoder_length and horizon must be at least 1".into(),
        ));
    }
    let grid = TimeGrid::new(0.0, DEFAULT_DT, encoder_length + horizon)?;
    let truth = solve_trajectory(
        &TwoLevelParams::default(),
        field,
        &grid,
        &QuantumState::ground(),
    )?;
    let seed_d = &truth.d()[..encoder_length];
    let predictions = forecaster.forecast(seed_d, field, &grid, horizon)?;
    if predictions.len() != horizon {
        return Err(Error::ShapeMismatch {
            context: "forecast length vs horizon",
            expected: horizon,
            actual: predictions.len(),
        });
    }
    normalized_test_loss(&predictions, &truth.d()[encoder_length..], segment_length)
}

/// A square sweep over drive amplitude and frequency for evaluation.
///
/// Axis values run linearly from `min` to `max` (inclusive) and are then
/// shifted by `offset`, which keeps test settings off a training lattice
/// built on the same bounds. For the linear ramp family the amplitude axis
/// feeds the first slope factor and the frequency axis the second.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestGridConfig {
    pub family: FieldFamily,
    #[serde(default = "default_grid_n")]
    pub grid_n: usize,
    pub amp_min: f64,
    pub amp_max: f64,
    pub freq_min: f64,
    pub freq_max: f64,
    #[serde(default = "default_offset")]
    pub offset: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_segment_length")]
    pub segment_length: usize,
    #[serde(default)]
    pub envelope_seed: u64,
    #[serde(default = "default_components")]
    pub envelope_components: u32,
}

fn default_grid_n() -> usize {
    20
}

fn default_offset() -> f64 {
    0.038
}

fn default_horizon() -> usize {
    10_000
}

fn default_segment_length() -> usize {
    100
}

fn default_components() -> u32 {
    4
}

impl TestGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_n == 0 {
            return Err(Error::Config("grid_n must be at least 1".into()));
        }
        for (name, lo, hi) in [
            ("amplitude", self.amp_min, self.amp_max),
            ("frequency", self.freq_min, self.freq_max),
        ] {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::Config(format!(
                    "{name} bounds must be finite and ordered, got [{lo}, {hi}]"
                )));
            }
        }
        if !self.offset.is_finite() {
            return Err(Error::Config("offset must be finite".into()));
        }
        if self.horizon == 0 || self.segment_length == 0 {
            return Err(Error::Config(
                "horizon and segment_length must be at least 1".into(),
            ));
        }
        if self.family == FieldFamily::RandomPulse && self.envelope_components == 0 {
            return Err(Error::Config(
                "envelope_components must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn axis(&self, lo: f64, hi: f64) -> Vec<f64> {
        if self.grid_n == 1 {
            return vec![lo + self.offset];
        }
        let step = (hi - lo) / (self.grid_n - 1) as f64;
        (0..self.grid_n)
            .map(|k| lo + step * k as f64 + self.offset)
            .collect()
    }

    pub fn amplitude_axis(&self) -> Vec<f64> {
        self.axis(self.amp_min, self.amp_max)
    }

    pub fn frequency_axis(&self) -> Vec<f64> {
        self.axis(self.freq_min, self.freq_max)
    }

    /// Drive spec of one cell, row-major over (amplitude, frequency).
    pub fn cell_field(&self, cell_index: usize) -> Result<FieldSpec> {
        let amps = self.amplitude_axis();
        let freqs = self.frequency_axis();
        if cell_index >= amps.len() * freqs.len() {
            return Err(Error::Config(format!(
                "cell index {cell_index} outside the {}x{} grid",
                amps.len(),
                freqs.len()
            )));
        }
        let amplitude = amps[cell_index / freqs.len()];
        let frequency = freqs[cell_index % freqs.len()];
        let spec = match self.family {
            FieldFamily::Zero => FieldSpec::zero(),
            FieldFamily::Sine => FieldSpec::sine(amplitude, frequency),
            FieldFamily::Pulse => FieldSpec::pulse(amplitude, frequency),
            FieldFamily::RandomPulse => FieldSpec::random_pulse(
                amplitude,
                frequency,
                derive_seed(
                    derive_seed(self.envelope_seed, purpose::CELL),
                    cell_index as u64,
                ),
                self.envelope_components,
            ),
            FieldFamily::Linear => FieldSpec::linear(amplitude, frequency),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Normalized losses over the evaluation sweep, row-major over
/// (amplitude, frequency). Failed cells hold NaN.
#[derive(Clone, Debug)]
pub struct LossMatrix {
    amplitudes: Vec<f64>,
    frequencies: Vec<f64>,
    losses: Vec<f64>,
}

impl LossMatrix {
    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn loss(&self, amp_idx: usize, freq_idx: usize) -> f64 {
        self.losses[amp_idx * self.frequencies.len() + freq_idx]
    }

    /// Median over the finite cells; None when every cell failed.
    pub fn median_finite(&self) -> Option<f64> {
        let mut finite: Vec<f64> = self.losses.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return None;
        }
        finite.sort_by(|a, b| a.partial_cmp(b).expect("finite values compare"));
        let mid = finite.len() / 2;
        Some(if finite.len() % 2 == 1 {
            finite[mid]
        } else {
            0.5 * (finite[mid - 1] + finite[mid])
        })
    }
}

/// Scores every cell of the sweep. Cells run in parallel; a failing cell is
/// logged to stderr and scored NaN instead of aborting the sweep.
pub fn evaluate_grid(
    forecaster: &dyn Forecaster,
    config: &TestGridConfig,
    encoder_length: usize,
) -> Result<LossMatrix> {
    config.validate()?;
    let amplitudes = config.amplitude_axis();
    let frequencies = config.frequency_axis();
    let cells = amplitudes.len() * frequencies.len();
    let losses: Vec<f64> = (0..cells)
        .into_par_iter()
        .map(|cell| {
            let outcome = config.cell_field(cell).and_then(|field| {
                evaluate_cell(
                    forecaster,
                    &field,
                    encoder_length,
                    config.horizon,
                    config.segment_length,
                )
            });
            match outcome {
                Ok(loss) => loss,
                Err(err) => {
                    let amp = amplitudes[cell / frequencies.len()];
                    let freq = frequencies[cell % frequencies.len()];
                    eprintln!(
                        "warning: cell {cell} (amplitude {amp:.6}, frequency {freq:.6}) failed: {err}"
                    );
                    f64::NAN
                }
            }
        })
        .collect();
    Ok(LossMatrix {
        amplitudes,
        frequencies,
        losses,
    })
}

/// CSV export: `amplitude,frequency,loss`, one row per cell, row-major.
pub fn export_matrix_csv<W: Write>(matrix: &LossMatrix, out: &mut W) -> Result<()> {
    writeln!(out, "amplitude,frequency,loss")?;
    for (i, &a) in matrix.amplitudes.iter().enumerate() {
        for (j, &f) in matrix.frequencies.iter().enumerate() {
            writeln!(out, "{:.16e},{:.16e},{:.16e}", a, f, matrix.loss(i, j))?;
        }
    }
    Ok(())
}

/// CSV export of a truth/forecast overlay: `t,E,d_true,d_pred` per node.
pub fn export_comparison_csv<W: Write>(
    grid: &TimeGrid,
    e: &[f64],
    d_true: &[f64],
    d_pred: &[f64],
    out: &mut W,
) -> Result<()> {
    let n = grid.n_points();
    for (name, series) in [("field", e), ("true dipole", d_true), ("forecast", d_pred)] {
        if series.len() != n {
            return Err(Error::ShapeMismatch {
                context: match name {
                    "field" => "comparison field series",
                    "true dipole" => "comparison true dipole series",
                    _ => "comparison forecast series",
                },
                expected: n,
                actual: series.len(),
            });
        }
    }
    writeln!(out, "t,E,d_true,d_pred")?;
    for k in 0..n {
        writeln!(
            out,
            "{:.16e},{:.16e},{:.16e},{:.16e}",
            grid.time(k),
            e[k],
            d_true[k],
            d_pred[k]
        )?;
    }
    Ok(())
}
