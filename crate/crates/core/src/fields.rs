//! Driving-field families.
//!
//! A [`FieldSpec`] names one member of a small family of scalar fields E(t).
//! Specs are plain serializable data; evaluation goes through a
//! [`FieldEvaluator`], which precomputes the random-pulse envelope once so
//! that per-node evaluation is cheap and bit-stable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::{TimeGrid, DEFAULT_N_POINTS, DEFAULT_SPAN};
use crate::rng::SplitMix64;

use std::f64::consts::TAU;

/// Number of grid nodes scanned to normalize a random envelope. Matches the
/// default time grid, so the normalized envelope peaks at exactly 1 on it.
const ENVELOPE_SCAN_POINTS: usize = DEFAULT_N_POINTS;

/// Supported field shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldFamily {
    /// E(t) = 0.
    Zero,
    /// E(t) = A sin(w t).
    Sine,
    /// E(t) = A sin^2(w t / 20) sin(w t).
    Pulse,
    /// E(t) = A s(t) sin(w t) with a seeded random envelope s.
    #[serde(rename = "random")]
    RandomPulse,
    /// E(t) = 0.01 a1 a2 t.
    Linear,
}

/// Full description of one driving field.
///
/// Carries parameters for every family; members not used by `family` are
/// stored and round-tripped but never read during evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub family: FieldFamily,
    /// Peak amplitude A. Must be finite and nonnegative.
    #[serde(default = "default_one")]
    pub amplitude: f64,
    /// Carrier angular frequency w. Must be finite and nonnegative.
    #[serde(default = "default_one")]
    pub frequency: f64,
    /// First slope factor of the linear ramp.
    #[serde(default = "default_one")]
    pub linear_a1: f64,
    /// Second slope factor of the linear ramp.
    #[serde(default = "default_one")]
    pub linear_a2: f64,
    /// Seed of the random-pulse envelope.
    #[serde(default)]
    pub envelope_seed: u64,
    /// Number of sine components in the random-pulse envelope.
    #[serde(default = "default_components")]
    pub envelope_components: u32,
}

fn default_one() -> f64 {
    1.0
}

fn default_components() -> u32 {
    4
}

impl FieldSpec {
    pub fn zero() -> Self {
        Self {
            family: FieldFamily::Zero,
            amplitude: 0.0,
            frequency: 0.0,
            linear_a1: 1.0,
            linear_a2: 1.0,
            envelope_seed: 0,
            envelope_components: default_components(),
        }
    }

    pub fn sine(amplitude: f64, frequency: f64) -> Self {
        Self {
            family: FieldFamily::Sine,
            amplitude,
            frequency,
            ..Self::zero()
        }
    }

    pub fn pulse(amplitude: f64, frequency: f64) -> Self {
        Self {
            family: FieldFamily::Pulse,
            amplitude,
            frequency,
            ..Self::zero()
        }
    }

    pub fn random_pulse(
        amplitude: f64,
        frequency: f64,
        envelope_seed: u64,
        envelope_components: u32,
    ) -> Self {
        Self {
            family: FieldFamily::RandomPulse,
            amplitude,
            frequency,
            envelope_seed,
            envelope_components,
            ..Self::zero()
        }
    }

    pub fn linear(a1: f64, a2: f64) -> Self {
        Self {
            family: FieldFamily::Linear,
            amplitude: 0.0,
            frequency: 0.0,
            linear_a1: a1,
            linear_a2: a2,
            envelope_seed: 0,
            envelope_components: default_components(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.amplitude.is_finite() || self.amplitude < 0.0 {
            return Err(Error::Config(format!(
                "field amplitude must be finite and nonnegative, got {}",
                self.amplitude
            )));
        }
        if !self.frequency.is_finite() || self.frequency < 0.0 {
            return Err(Error::Config(format!(
                "field frequency must be finite and nonnegative, got {}",
                self.frequency
            )));
        }
        if !self.linear_a1.is_finite() || !self.linear_a2.is_finite() {
            return Err(Error::Config("linear ramp factors must be finite".into()));
        }
        if self.family == FieldFamily::RandomPulse && self.envelope_components == 0 {
            return Err(Error::Config(
                "random pulse needs at least one envelope component".into(),
            ));
        }
        Ok(())
    }
}

/// Parameters of a seeded random envelope.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSpec {
    pub seed: u64,
    /// Number of sine components, at least 1.
    pub components: u32,
    /// Length of the time interval the envelope is normalized over.
    pub duration: f64,
}

impl EnvelopeSpec {
    pub fn new(seed: u64, components: u32) -> Self {
        Self {
            seed,
            components,
            duration: DEFAULT_SPAN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::Config("envelope needs at least one component".into()));
        }
        if !self.duration.is_finite() || self.duration <= 0.0 {
            return Err(Error::Config(format!(
                "envelope duration must be positive, got {}",
                self.duration
            )));
        }
        Ok(())
    }
}

/// Precomputed random envelope.
///
/// Component k (1-based) contributes `a_k sin(TAU k t / duration + phi_k)`
/// with `a_k` uniform in [0, 1) and `phi_k` uniform in [0, TAU), drawn
/// interleaved (a_1, phi_1, a_2, phi_2, ...) from a SplitMix64 stream seeded
/// with `spec.seed`. The absolute value of the sum is divided by its maximum
/// over the scan grid `t_j = j * duration / 10100`, j = 0..10100, so the
/// normalized envelope is nonnegative with grid peak exactly 1.
#[derive(Clone, Debug)]
pub struct RandomEnvelope {
    amplitudes: Vec<f64>,
    phases: Vec<f64>,
    duration: f64,
    norm: f64,
}

impl RandomEnvelope {
    pub fn new(spec: &EnvelopeSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = SplitMix64::new(spec.seed);
        let n = spec.components as usize;
        let mut amplitudes = Vec::with_capacity(n);
        let mut phases = Vec::with_capacity(n);
        for _ in 0..n {
            amplitudes.push(rng.next_f64());
            phases.push(TAU * rng.next_f64());
        }
        let mut envelope = Self {
            amplitudes,
            phases,
            duration: spec.duration,
            norm: 1.0,
        };
        let step = spec.duration / ENVELOPE_SCAN_POINTS as f64;
        let mut max = 0.0_f64;
        for j in 0..ENVELOPE_SCAN_POINTS {
            max = max.max(envelope.raw(step * j as f64).abs());
        }
        // All-zero component draw: leave the envelope identically zero.
        envelope.norm = if max > 0.0 { max } else { 1.0 };
        Ok(envelope)
    }

    /// Unnormalized component sum s(t).
    fn raw(&self, t: f64) -> f64 {
        let base = TAU * t / self.duration;
        let mut sum = 0.0;
        for (k, (&a, &phi)) in self.amplitudes.iter().zip(&self.phases).enumerate() {
            sum += a * ((k + 1) as f64 * base + phi).sin();
        }
        sum
    }

    /// Normalized envelope value at time `t`, intended for t in [0, duration].
    pub fn eval(&self, t: f64) -> f64 {
        self.raw(t).abs() / self.norm
    }
}

/// One-shot random envelope evaluation. Builds the envelope (including the
/// normalization scan) on every call; use [`RandomEnvelope`] directly when
/// evaluating many times.
pub fn random_envelope(spec: &EnvelopeSpec, t: f64) -> Result<f64> {
    Ok(RandomEnvelope::new(spec)?.eval(t))
}

/// Reusable field evaluator with the envelope built up front.
#[derive(Clone, Debug)]
pub struct FieldEvaluator {
    spec: FieldSpec,
    envelope: Option<RandomEnvelope>,
}

impl FieldEvaluator {
    pub fn new(spec: &FieldSpec) -> Result<Self> {
        spec.validate()?;
        let envelope = if spec.family == FieldFamily::RandomPulse {
            Some(RandomEnvelope::new(&EnvelopeSpec::new(
                spec.envelope_seed,
                spec.envelope_components,
            ))?)
        } else {
            None
        };
        Ok(Self {
            spec: spec.clone(),
            envelope,
        })
    }

    pub fn spec(&self) -> &FieldSpec {
        &self.spec
    }

    /// Field value E(t).
    pub fn eval(&self, t: f64) -> f64 {
        let spec = &self.spec;
        match spec.family {
            FieldFamily::Zero => 0.0,
            FieldFamily::Sine => spec.amplitude * (spec.frequency * t).sin(),
            FieldFamily::Pulse => {
                let s = (spec.frequency * t / 20.0).sin();
                spec.amplitude * s * s * (spec.frequency * t).sin()
            }
            FieldFamily::RandomPulse => {
                let envelope = self.envelope.as_ref().expect("envelope built in new");
                spec.amplitude * envelope.eval(t) * (spec.frequency * t).sin()
            }
            FieldFamily::Linear => 0.01 * spec.linear_a1 * spec.linear_a2 * t,
        }
    }
}

/// One-shot field evaluation. For random pulses this rebuilds the envelope;
/// prefer [`FieldEvaluator`] or [`sample_field`] in loops.
pub fn eval_field(spec: &FieldSpec, t: f64) -> Result<f64> {
    Ok(FieldEvaluator::new(spec)?.eval(t))
}

/// Field sampled on every node of `grid`, bit-identical to calling
/// [`FieldEvaluator::eval`] node by node.
pub fn sample_field(spec: &FieldSpec, grid: &TimeGrid) -> Result<Vec<f64>> {
    let evaluator = FieldEvaluator::new(spec)?;
    Ok((0..grid.n_points()).map(|k| evaluator.eval(grid.time(k))).collect())
}
