//! Training-data generation: a grid of driven waves is solved once each,
//! then sliced into fixed-length windows at seeded random offsets.
//!
//! All randomness flows from one master seed through [`crate::rng::derive_seed`]
//! with fixed purpose tags, so regenerating a dataset from the same config is
//! bit-identical regardless of wave count or iteration order.

use serde::{Deserialize, Serialize};

use crate::container::{ContainerReader, ContainerWriter};
use crate::error::{Error, Result};
use crate::fields::{FieldFamily, FieldSpec};
use crate::physics::{solve_trajectory, QuantumState, TimeGrid, Trajectory, TwoLevelParams};
use crate::rng::{derive_seed, purpose, SplitMix64};

use std::path::Path;

/// Dataset container magic.
pub const DATASET_MAGIC: [u8; 4] = *b"TLSD";
/// Newest dataset format revision this build writes and reads.
pub const DATASET_VERSION: u16 = 1;

/// Where a window was cut from: the drive of its source wave and the index of
/// the first encoder sample in that wave's trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSource {
    pub field: FieldSpec,
    pub start: usize,
}

/// One supervised example: seed dipole/field pair for the encoder, field and
/// target dipole continuation for the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingWindow {
    pub encoder_d: Vec<f64>,
    pub encoder_e: Vec<f64>,
    pub decoder_e: Vec<f64>,
    pub target_d: Vec<f64>,
    pub source: WindowSource,
}

impl TrainingWindow {
    /// Encoder plus decoder length.
    pub fn window_length(&self) -> usize {
        self.encoder_d.len() + self.target_d.len()
    }
}

/// Recipe for a dataset: which waves to solve and how to slice them.
///
/// Waves enumerate amplitude-major: all frequencies for the first amplitude,
/// then all for the second, and so on. For the linear ramp family the
/// amplitude axis feeds the first slope factor and the frequency axis the
/// second.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub family: FieldFamily,
    pub amplitudes: Vec<f64>,
    pub frequencies: Vec<f64>,
    pub windows_per_wave: usize,
    #[serde(default = "default_window_length")]
    pub window_length: usize,
    #[serde(default = "default_encoder_length")]
    pub encoder_length: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_envelope_components")]
    pub envelope_components: u32,
}

fn default_window_length() -> usize {
    200
}

fn default_encoder_length() -> usize {
    100
}

fn default_val_fraction() -> f64 {
    0.1
}

fn default_envelope_components() -> u32 {
    4
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.amplitudes.is_empty() || self.frequencies.is_empty() {
            return Err(Error::Config(
                "amplitudes and frequencies must be nonempty".into(),
            ));
        }
        if !self.amplitudes.iter().chain(&self.frequencies).all(|v| v.is_finite()) {
            return Err(Error::Config(
                "amplitudes and frequencies must be finite".into(),
            ));
        }
        if self.windows_per_wave == 0 {
            return Err(Error::Config("windows_per_wave must be at least 1".into()));
        }
        if self.window_length < 2 {
            return Err(Error::Config("window_length must be at least 2".into()));
        }
        if self.encoder_length == 0 || self.encoder_length >= self.window_length {
            return Err(Error::Config(format!(
                "encoder_length must lie in 1..window_length, got {} of {}",
                self.encoder_length, self.window_length
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.family == FieldFamily::RandomPulse && self.envelope_components == 0 {
            return Err(Error::Config(
                "envelope_components must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Decoder (target) length implied by the window split.
    pub fn decoder_length(&self) -> usize {
        self.window_length - self.encoder_length
    }

    /// Number of waves on the amplitude-frequency grid.
    pub fn wave_count(&self) -> usize {
        self.amplitudes.len() * self.frequencies.len()
    }
}

/// Generated windows split into training and validation pools.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<TrainingWindow>,
    pub val: Vec<TrainingWindow>,
}

impl Dataset {
    pub fn total_windows(&self) -> usize {
        self.train.len() + self.val.len()
    }
}

/// Field specs of every wave in the dataset's amplitude-major order.
///
/// Random-pulse envelope seeds derive from the master seed and the wave
/// index, so each wave gets its own reproducible envelope.
pub fn wave_specs(config: &DatasetConfig) -> Result<Vec<FieldSpec>> {
    config.validate()?;
    let envelope_base = derive_seed(config.seed, purpose::ENVELOPE);
    let mut specs = Vec::with_capacity(config.wave_count());
    for &amplitude in &config.amplitudes {
        for &frequency in &config.frequencies {
            let wave_idx = specs.len() as u64;
            let spec = match config.family {
                FieldFamily::Zero => FieldSpec::zero(),
                FieldFamily::Sine => FieldSpec::sine(amplitude, frequency),
                FieldFamily::Pulse => FieldSpec::pulse(amplitude, frequency),
                FieldFamily::RandomPulse => FieldSpec::random_pulse(
                    amplitude,
                    frequency,
                    derive_seed(envelope_base, wave_idx),
                    config.envelope_components,
                ),
                FieldFamily::Linear => FieldSpec::linear(amplitude, frequency),
            };
            spec.validate()?;
            specs.push(spec);
        }
    }
    Ok(specs)
}

/// Cuts `n_windows` windows from one trajectory at seeded random offsets,
/// sampling start positions uniformly with replacement.
pub fn extract_windows(
    trajectory: &Trajectory,
    n_windows: usize,
    window_length: usize,
    encoder_length: usize,
    rng: &mut SplitMix64,
    source_field: &FieldSpec,
) -> Result<Vec<TrainingWindow>> {
    if encoder_length == 0 || encoder_length >= window_length {
        return Err(Error::Config(format!(
            "encoder_length must lie in 1..window_length, got {encoder_length} of {window_length}"
        )));
    }
    let len = trajectory.len();
    if len < window_length {
        return Err(Error::TooShort {
            context: "trajectory for window extraction",
            needed: window_length,
            actual: len,
        });
    }
    let span = (len - window_length + 1) as u64;
    let mut windows = Vec::with_capacity(n_windows);
    for _ in 0..n_windows {
        let start = rng.next_below(span) as usize;
        let mid = start + encoder_length;
        let end = start + window_length;
        windows.push(TrainingWindow {
            encoder_d: trajectory.d()[start..mid].to_vec(),
            encoder_e: trajectory.e()[start..mid].to_vec(),
            decoder_e: trajectory.e()[mid..end].to_vec(),
            target_d: trajectory.d()[mid..end].to_vec(),
            source: WindowSource {
                field: source_field.clone(),
                start,
            },
        });
    }
    Ok(windows)
}

/// Shuffles the pooled windows and splits off `round(val_fraction * n)` of
/// them as the validation set (taken from the shuffled tail).
pub fn split_train_val(
    mut windows: Vec<TrainingWindow>,
    val_fraction: f64,
    rng: &mut SplitMix64,
) -> (Vec<TrainingWindow>, Vec<TrainingWindow>) {
    rng.shuffle(&mut windows);
    let n = windows.len();
    let n_val = ((val_fraction * n as f64).round() as usize).min(n);
    let val = windows.split_off(n - n_val);
    (windows, val)
}

/// Solves every wave on the default grid from the ground state and assembles
/// the shuffled train/validation pools.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let specs = wave_specs(config)?;
    let params = TwoLevelParams::default();
    let grid = TimeGrid::default_grid();
    let windows_base = derive_seed(config.seed, purpose::WINDOWS);
    let mut pooled = Vec::with_capacity(specs.len() * config.windows_per_wave);
    for (wave_idx, spec) in specs.iter().enumerate() {
        let trajectory = solve_trajectory(&params, spec, &grid, &QuantumState::ground())?;
        let mut wave_rng = SplitMix64::new(derive_seed(windows_base, wave_idx as u64));
        pooled.extend(extract_windows(
            &trajectory,
            config.windows_per_wave,
            config.window_length,
            config.encoder_length,
            &mut wave_rng,
            spec,
        )?);
    }
    let mut split_rng = SplitMix64::new(derive_seed(config.seed, purpose::SPLIT));
    let (train, val) = split_train_val(pooled, config.val_fraction, &mut split_rng);
    Ok(Dataset {
        config: config.clone(),
        train,
        val,
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    config: DatasetConfig,
    grid: TimeGrid,
    params: TwoLevelParams,
    train_count: usize,
    val_count: usize,
}

fn window_payload_len(config: &DatasetConfig) -> usize {
    2 * config.window_length
}

/// Serializes a dataset: TOML metadata, `(wave index, start)` pairs for every
/// window (train pool first), then the window series as one f64 section. Each
/// window stores encoder dipole, encoder field, decoder field, and target
/// dipole back to back.
pub fn dataset_to_bytes(dataset: &Dataset) -> Result<Vec<u8>> {
    dataset.config.validate()?;
    let specs = wave_specs(&dataset.config)?;
    let meta = DatasetMeta {
        config: dataset.config.clone(),
        grid: TimeGrid::default_grid(),
        params: TwoLevelParams::default(),
        train_count: dataset.train.len(),
        val_count: dataset.val.len(),
    };
    let meta_text = toml::to_string(&meta)
        .map_err(|e| Error::Config(format!("dataset metadata: {e}")))?;

    let total = dataset.total_windows();
    let mut pairs = Vec::with_capacity(2 * total);
    let mut payload = Vec::with_capacity(total * window_payload_len(&dataset.config));
    for window in dataset.train.iter().chain(&dataset.val) {
        let wave_idx = specs
            .iter()
            .position(|s| *s == window.source.field)
            .ok_or_else(|| {
                Error::Config("window source field is not on the dataset's wave grid".into())
            })?;
        let start = u32::try_from(window.source.start)
            .map_err(|_| Error::Config("window start exceeds the index range".into()))?;
        pairs.push(wave_idx as u32);
        pairs.push(start);
        if window.window_length() != dataset.config.window_length
            || window.encoder_d.len() != dataset.config.encoder_length
            || window.encoder_e.len() != window.encoder_d.len()
            || window.decoder_e.len() != window.target_d.len()
        {
            return Err(Error::ShapeMismatch {
                context: "window series vs dataset config",
                expected: dataset.config.window_length,
                actual: window.window_length(),
            });
        }
        payload.extend_from_slice(&window.encoder_d);
        payload.extend_from_slice(&window.encoder_e);
        payload.extend_from_slice(&window.decoder_e);
        payload.extend_from_slice(&window.target_d);
    }

    let mut writer = ContainerWriter::new(DATASET_MAGIC, DATASET_VERSION);
    writer.section(meta_text.as_bytes());
    writer.section_u32(&pairs);
    writer.section_f64(&payload);
    Ok(writer.finish())
}

/// Parses a dataset image, validating structure, counts, and window shapes.
pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut reader = ContainerReader::open(bytes, DATASET_MAGIC, DATASET_VERSION)?;
    let meta_bytes = reader.section("dataset metadata")?;
    let meta_text = std::str::from_utf8(meta_bytes)
        .map_err(|e| Error::Config(format!("dataset metadata is not UTF-8: {e}")))?;
    let meta: DatasetMeta = toml::from_str(meta_text)
        .map_err(|e| Error::Config(format!("dataset metadata: {e}")))?;
    meta.config.validate()?;
    meta.grid.validate()?;
    let specs = wave_specs(&meta.config)?;

    let pairs = reader.section_u32("dataset window sources")?;
    let payload = reader.section_f64("dataset window series")?;
    let total = meta.train_count + meta.val_count;
    if pairs.len() != 2 * total {
        return Err(Error::ShapeMismatch {
            context: "dataset window source pairs",
            expected: 2 * total,
            actual: pairs.len(),
        });
    }
    let stride = window_payload_len(&meta.config);
    if payload.len() != total * stride {
        return Err(Error::ShapeMismatch {
            context: "dataset window series",
            expected: total * stride,
            actual: payload.len(),
        });
    }

    let enc = meta.config.encoder_length;
    let win = meta.config.window_length;
    let max_start = meta.grid.n_points().saturating_sub(win);
    let mut windows = Vec::with_capacity(total);
    for k in 0..total {
        let wave_idx = pairs[2 * k] as usize;
        let start = pairs[2 * k + 1] as usize;
        let field = specs
            .get(wave_idx)
            .ok_or_else(|| {
                Error::Config(format!(
                    "window {k} references wave {wave_idx}, but the grid has {} waves",
                    specs.len()
                ))
            })?
            .clone();
        if start > max_start {
            return Err(Error::Config(format!(
                "window {k} starts at {start}, beyond the last valid offset {max_start}"
            )));
        }
        let base = k * stride;
        let chunk = &payload[base..base + stride];
        windows.push(TrainingWindow {
            encoder_d: chunk[..enc].to_vec(),
            encoder_e: chunk[enc..2 * enc].to_vec(),
            decoder_e: chunk[2 * enc..enc + win].to_vec(),
            target_d: chunk[enc + win..].to_vec(),
            source: WindowSource { field, start },
        });
    }
    let val = windows.split_off(meta.train_count);
    Ok(Dataset {
        config: meta.config,
        train: windows,
        val,
    })
}

/// Writes a dataset file.
pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let bytes = dataset_to_bytes(dataset)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a dataset file.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    dataset_from_bytes(&bytes)
}
