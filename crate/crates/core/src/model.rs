//! Conditional sequence-to-sequence LSTM over dipole series.
//!
//! The encoder consumes `[d, E]` pairs across the seed window; its final
//! hidden/cell state initializes the decoder, which consumes its own previous
//! prediction together with the current field value and emits one dipole per
//! step through a scalar readout. Parameters live in one flat vector whose
//! layout is fixed by [`TensorId`] order, so the optimizer, checkpoint codec,
//! and finite-difference checks all address the same storage.

use serde::{Deserialize, Serialize};

use crate::container::{ContainerReader, ContainerWriter};
use crate::dataset::TrainingWindow;
use crate::error::{Error, Result};

use std::ops::Range;
use std::path::Path;

/// Per-step model input width: dipole plus field value.
pub const INPUT_DIM: usize = 2;

/// Epsilon inside the RMSE derivative guard.
pub const LOSS_EPSILON: f64 = 1e-12;

/// Checkpoint container magic.
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TLSM";
/// Newest checkpoint format revision this build writes and reads.
pub const CHECKPOINT_VERSION: u16 = 1;

/// First decoder input choice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SosPolicy {
    /// Feed the last dipole of the encoder window.
    #[default]
    LastObservedDipole,
    /// Feed a literal zero.
    FixedZero,
}

/// Architecture description; everything a checkpoint needs to rebuild the net.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_size: usize,
    #[serde(default = "default_seq_len")]
    pub encoder_length: usize,
    #[serde(default = "default_seq_len")]
    pub decoder_length: usize,
    #[serde(default)]
    pub sos_policy: SosPolicy,
}

fn default_seq_len() -> usize {
    100
}

impl ModelConfig {
    pub fn new(hidden_size: usize) -> Self {
        Self {
            hidden_size,
            encoder_length: default_seq_len(),
            decoder_length: default_seq_len(),
            sos_policy: SosPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 {
            return Err(Error::Config("hidden_size must be at least 1".into()));
        }
        if self.encoder_length == 0 || self.decoder_length == 0 {
            return Err(Error::Config(
                "encoder_length and decoder_length must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Tensors of the flat parameter vector, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorId {
    EncWx,
    EncWh,
    EncB,
    DecWx,
    DecWh,
    DecB,
    OutW,
    OutB,
}

impl TensorId {
    pub const ALL: [TensorId; 8] = [
        TensorId::EncWx,
        TensorId::EncWh,
        TensorId::EncB,
        TensorId::DecWx,
        TensorId::DecWh,
        TensorId::DecB,
        TensorId::OutW,
        TensorId::OutB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TensorId::EncWx => "enc_wx",
            TensorId::EncWh => "enc_wh",
            TensorId::EncB => "enc_b",
            TensorId::DecWx => "dec_wx",
            TensorId::DecWh => "dec_wh",
            TensorId::DecB => "dec_b",
            TensorId::OutW => "out_w",
            TensorId::OutB => "out_b",
        }
    }
}

/// Encoder or decoder weight selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LstmSide {
    Encoder,
    Decoder,
}

/// Flat-vector offsets for a given hidden size.
///
/// Gate rows are ordered input, forget, cell, output; each weight matrix is
/// row-major with one row per gate unit.
#[derive(Clone, Copy)]
struct Layout {
    h: usize,
}

impl Layout {
    fn new(h: usize) -> Self {
        Self { h }
    }

    fn lstm_block(h: usize) -> usize {
        4 * h * INPUT_DIM + 4 * h * h + 4 * h
    }

    fn total(h: usize) -> usize {
        2 * Self::lstm_block(h) + h + 1
    }

    fn range(&self, id: TensorId) -> Range<usize> {
        let h = self.h;
        let wx = 4 * h * INPUT_DIM;
        let wh = 4 * h * h;
        let block = Self::lstm_block(h);
        match id {
            TensorId::EncWx => 0..wx,
            TensorId::EncWh => wx..wx + wh,
            TensorId::EncB => wx + wh..block,
            TensorId::DecWx => block..block + wx,
            TensorId::DecWh => block + wx..block + wx + wh,
            TensorId::DecB => block + wx + wh..2 * block,
            TensorId::OutW => 2 * block..2 * block + h,
            TensorId::OutB => 2 * block + h..2 * block + h + 1,
        }
    }
}

/// Borrowed view of one LSTM's tensors.
struct LstmView<'a> {
    wx: &'a [f64],
    wh: &'a [f64],
    b: &'a [f64],
}

/// All model parameters in one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    hidden: usize,
    data: Vec<f64>,
}

impl ModelParams {
    /// Zero-filled parameters for the given hidden size.
    pub fn zeros(hidden_size: usize) -> Self {
        assert!(hidden_size >= 1, "hidden size must be at least 1");
        Self {
            hidden: hidden_size,
            data: vec![0.0; Layout::total(hidden_size)],
        }
    }

    /// Wraps an existing flat vector, checking length and finiteness.
    pub fn from_vec(hidden_size: usize, data: Vec<f64>) -> Result<Self> {
        let expected = Layout::total(hidden_size);
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "model parameter vector",
                expected,
                actual: data.len(),
            });
        }
        let params = Self {
            hidden: hidden_size,
            data,
        };
        for id in TensorId::ALL {
            if !params.tensor(id).iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient { tensor: id.name() });
            }
        }
        Ok(params)
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tensor(&self, id: TensorId) -> &[f64] {
        &self.data[Layout::new(self.hidden).range(id)]
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> &mut [f64] {
        let range = Layout::new(self.hidden).range(id);
        &mut self.data[range]
    }

    fn lstm(&self, side: LstmSide) -> LstmView<'_> {
        match side {
            LstmSide::Encoder => LstmView {
                wx: self.tensor(TensorId::EncWx),
                wh: self.tensor(TensorId::EncWh),
                b: self.tensor(TensorId::EncB),
            },
            LstmSide::Decoder => LstmView {
                wx: self.tensor(TensorId::DecWx),
                wh: self.tensor(TensorId::DecWh),
                b: self.tensor(TensorId::DecB),
            },
        }
    }
}

/// Gradient with the same shape and layout as [`ModelParams`].
#[derive(Clone, Debug)]
pub struct GradientBuffer {
    hidden: usize,
    data: Vec<f64>,
}

impl GradientBuffer {
    pub fn zeros(hidden_size: usize) -> Self {
        assert!(hidden_size >= 1, "hidden size must be at least 1");
        Self {
            hidden: hidden_size,
            data: vec![0.0; Layout::total(hidden_size)],
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tensor(&self, id: TensorId) -> &[f64] {
        &self.data[Layout::new(self.hidden).range(id)]
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> &mut [f64] {
        let range = Layout::new(self.hidden).range(id);
        &mut self.data[range]
    }

    /// Adds `other` element-wise.
    pub fn add(&mut self, other: &GradientBuffer) -> Result<()> {
        if other.data.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                context: "gradient accumulation",
                expected: self.data.len(),
                actual: other.data.len(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Multiplies every component by `factor`.
    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Euclidean norm over all components.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rejects the first tensor containing a non-finite component.
    pub fn check_finite(&self) -> Result<()> {
        for id in TensorId::ALL {
            if !self.tensor(id).iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient { tensor: id.name() });
            }
        }
        Ok(())
    }
}

/// Hidden and cell activations of one LSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl HiddenState {
    pub fn zeros(hidden_size: usize) -> Self {
        Self {
            h: vec![0.0; hidden_size],
            c: vec![0.0; hidden_size],
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Dot product with a fixed four-lane association so results never depend on
/// call site or thread count.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let a4 = a.chunks_exact(4);
    let b4 = b.chunks_exact(4);
    let tail = a4.remainder().iter().zip(b4.remainder()).map(|(x, y)| x * y);
    for (ca, cb) in a4.clone().zip(b4.clone()) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail.sum::<f64>()
}

/// One LSTM step. Writes post-activation gates (input, forget, cell, output),
/// the new cell state, its tanh, and the new hidden state into the buffers.
#[allow(clippy::too_many_arguments)]
fn cell_forward(
    view: &LstmView<'_>,
    h_size: usize,
    x0: f64,
    x1: f64,
    h_prev: &[f64],
    c_prev: &[f64],
    gates: &mut [f64],
    c_new: &mut [f64],
    tanh_c: &mut [f64],
    h_new: &mut [f64],
) {
    for (g_idx, (wh_row, gate)) in view.wh.chunks_exact(h_size).zip(gates.iter_mut()).enumerate() {
        *gate = view.b[g_idx]
            + view.wx[2 * g_idx] * x0
            + view.wx[2 * g_idx + 1] * x1
            + dot(wh_row, h_prev);
    }
    let (gi, rest) = gates.split_at_mut(h_size);
    let (gf, rest) = rest.split_at_mut(h_size);
    let (gg, go) = rest.split_at_mut(h_size);
    for j in 0..h_size {
        let i = sigmoid(gi[j]);
        let f = sigmoid(gf[j]);
        let g = gg[j].tanh();
        let o = sigmoid(go[j]);
        gi[j] = i;
        gf[j] = f;
        gg[j] = g;
        go[j] = o;
        let c = f * c_prev[j] + i * g;
        c_new[j] = c;
        let tc = c.tanh();
        tanh_c[j] = tc;
        h_new[j] = o * tc;
    }
}

/// Reverse of [`cell_forward`]. Accumulates weight gradients, overwrites
/// `dh_prev`/`dc_prev` with the state gradients, and returns the input
/// gradients (dx0, dx1).
#[allow(clippy::too_many_arguments)]
fn cell_backward(
    view: &LstmView<'_>,
    h_size: usize,
    x0: f64,
    x1: f64,
    h_prev: &[f64],
    c_prev: &[f64],
    gates: &[f64],
    tanh_c: &[f64],
    dh: &[f64],
    dc_next: &[f64],
    g_wx: &mut [f64],
    g_wh: &mut [f64],
    g_b: &mut [f64],
    dgates: &mut [f64],
    dh_prev: &mut [f64],
    dc_prev: &mut [f64],
) -> (f64, f64) {
    let gi = &gates[..h_size];
    let gf = &gates[h_size..2 * h_size];
    let gg = &gates[2 * h_size..3 * h_size];
    let go = &gates[3 * h_size..];
    for j in 0..h_size {
        let o = go[j];
        let tc = tanh_c[j];
        let dc = dh[j] * o * (1.0 - tc * tc) + dc_next[j];
        let i = gi[j];
        let f = gf[j];
        let g = gg[j];
        dgates[j] = dc * g * i * (1.0 - i);
        dgates[h_size + j] = dc * c_prev[j] * f * (1.0 - f);
        dgates[2 * h_size + j] = dc * i * (1.0 - g * g);
        dgates[3 * h_size + j] = dh[j] * tc * o * (1.0 - o);
        dc_prev[j] = dc * f;
    }
    dh_prev.fill(0.0);
    let mut dx0 = 0.0;
    let mut dx1 = 0.0;
    for g_idx in 0..4 * h_size {
        let dg = dgates[g_idx];
        g_b[g_idx] += dg;
        g_wx[2 * g_idx] += dg * x0;
        g_wx[2 * g_idx + 1] += dg * x1;
        dx0 += dg * view.wx[2 * g_idx];
        dx1 += dg * view.wx[2 * g_idx + 1];
        let row = &view.wh[g_idx * h_size..(g_idx + 1) * h_size];
        let g_row = &mut g_wh[g_idx * h_size..(g_idx + 1) * h_size];
        for (gw, &hp) in g_row.iter_mut().zip(h_prev) {
            *gw += dg * hp;
        }
        for (dhp, &w) in dh_prev.iter_mut().zip(row) {
            *dhp += dg * w;
        }
    }
    (dx0, dx1)
}

fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

fn check_model(params: &ModelParams, config: &ModelConfig) -> Result<()> {
    config.validate()?;
    check_len(
        "model parameters vs config hidden size",
        config.hidden_size,
        params.hidden_size(),
    )
}

/// One public LSTM step on either side of the model.
pub fn lstm_cell(
    params: &ModelParams,
    side: LstmSide,
    x: &[f64],
    state: &HiddenState,
) -> Result<HiddenState> {
    check_len("lstm_cell input", INPUT_DIM, x.len())?;
    let h = params.hidden_size();
    check_len("lstm_cell hidden state", h, state.h.len())?;
    check_len("lstm_cell cell state", h, state.c.len())?;
    let view = params.lstm(side);
    let mut gates = vec![0.0; 4 * h];
    let mut tanh_c = vec![0.0; h];
    let mut next = HiddenState::zeros(h);
    let (h_new, c_new) = (&mut next.h, &mut next.c);
    cell_forward(
        &view, h, x[0], x[1], &state.h, &state.c, &mut gates, c_new, &mut tanh_c, h_new,
    );
    Ok(next)
}

/// Runs the encoder over the seed window from the zero state and returns its
/// final hidden/cell state.
pub fn encode(
    params: &ModelParams,
    config: &ModelConfig,
    encoder_d: &[f64],
    encoder_e: &[f64],
) -> Result<HiddenState> {
    check_model(params, config)?;
    check_len("encode encoder_d", config.encoder_length, encoder_d.len())?;
    check_len("encode encoder_e", config.encoder_length, encoder_e.len())?;
    let h = params.hidden_size();
    let view = params.lstm(LstmSide::Encoder);
    let mut state = HiddenState::zeros(h);
    let mut next = HiddenState::zeros(h);
    let mut gates = vec![0.0; 4 * h];
    let mut tanh_c = vec![0.0; h];
    for (&d, &e) in encoder_d.iter().zip(encoder_e) {
        cell_forward(
            &view, h, d, e, &state.h, &state.c, &mut gates, &mut next.c, &mut tanh_c, &mut next.h,
        );
        std::mem::swap(&mut state, &mut next);
    }
    Ok(state)
}

/// Runs the decoder from `initial` with autoregressive feedback: step k
/// consumes its previous prediction (or `sos_d` at k = 0) plus
/// `decoder_e[k]`, and emits one dipole through the scalar readout.
pub fn decode(
    params: &ModelParams,
    initial: &HiddenState,
    sos_d: f64,
    decoder_e: &[f64],
) -> Result<Vec<f64>> {
    let h = params.hidden_size();
    check_len("decode initial hidden state", h, initial.h.len())?;
    check_len("decode initial cell state", h, initial.c.len())?;
    if decoder_e.is_empty() {
        return Err(Error::TooShort {
            context: "decode field input",
            needed: 1,
            actual: 0,
        });
    }
    let view = params.lstm(LstmSide::Decoder);
    let out_w = params.tensor(TensorId::OutW);
    let out_b = params.tensor(TensorId::OutB)[0];
    let mut state = initial.clone();
    let mut next = HiddenState::zeros(h);
    let mut gates = vec![0.0; 4 * h];
    let mut tanh_c = vec![0.0; h];
    let mut predictions = Vec::with_capacity(decoder_e.len());
    let mut prev_d = sos_d;
    for &e in decoder_e {
        cell_forward(
            &view, h, prev_d, e, &state.h, &state.c, &mut gates, &mut next.c, &mut tanh_c,
            &mut next.h,
        );
        std::mem::swap(&mut state, &mut next);
        let pred = dot(out_w, &state.h) + out_b;
        predictions.push(pred);
        prev_d = pred;
    }
    Ok(predictions)
}

fn sos_value(config: &ModelConfig, encoder_d: &[f64]) -> f64 {
    match config.sos_policy {
        SosPolicy::LastObservedDipole => *encoder_d.last().expect("encoder window is nonempty"),
        SosPolicy::FixedZero => 0.0,
    }
}

/// Encoder plus decoder over one training window.
pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    window: &TrainingWindow,
) -> Result<Vec<f64>> {
    check_model(params, config)?;
    check_len("forward decoder_e", config.decoder_length, window.decoder_e.len())?;
    let state = encode(params, config, &window.encoder_d, &window.encoder_e)?;
    decode(
        params,
        &state,
        sos_value(config, &window.encoder_d),
        &window.decoder_e,
    )
}

/// Root-mean-square error between two equal-length series.
pub fn loss_rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_len("loss_rmse targets", predictions.len(), targets.len())?;
    if predictions.is_empty() {
        return Err(Error::TooShort {
            context: "loss_rmse",
            needed: 1,
            actual: 0,
        });
    }
    let sum: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sum / predictions.len() as f64).sqrt())
}

/// Switches for [`backward_with`].
#[derive(Clone, Copy, Debug, Default)]
pub struct BackwardOptions {
    /// Treat each fed-back prediction as a constant input: gradients do not
    /// flow through the autoregressive path. Diagnostic ablation only.
    pub detach_feedback: bool,
}

/// RMSE loss and its full gradient over one window. See [`backward_with`].
pub fn backward(
    params: &ModelParams,
    config: &ModelConfig,
    window: &TrainingWindow,
) -> Result<(f64, GradientBuffer)> {
    backward_with(params, config, window, BackwardOptions::default())
}

/// Backpropagation through the decoder (readout, feedback path, recurrence),
/// the encoder-to-decoder state handoff, and the encoder, in that order.
/// Gradients are rejected with the offending tensor's name if any component
/// comes out non-finite.
pub fn backward_with(
    params: &ModelParams,
    config: &ModelConfig,
    window: &TrainingWindow,
    options: BackwardOptions,
) -> Result<(f64, GradientBuffer)> {
    check_model(params, config)?;
    let h = config.hidden_size;
    let enc_len = config.encoder_length;
    let dec_len = config.decoder_length;
    check_len("backward encoder_d", enc_len, window.encoder_d.len())?;
    check_len("backward encoder_e", enc_len, window.encoder_e.len())?;
    check_len("backward decoder_e", dec_len, window.decoder_e.len())?;
    check_len("backward target_d", dec_len, window.target_d.len())?;

    let enc_view = params.lstm(LstmSide::Encoder);
    let dec_view = params.lstm(LstmSide::Decoder);
    let out_w = params.tensor(TensorId::OutW);
    let out_b = params.tensor(TensorId::OutB)[0];

    // Cached encoder pass.
    let mut enc_gates = vec![0.0; enc_len * 4 * h];
    let mut enc_c = vec![0.0; enc_len * h];
    let mut enc_tanh_c = vec![0.0; enc_len * h];
    let mut enc_h = vec![0.0; enc_len * h];
    let zeros = vec![0.0; h];
    for k in 0..enc_len {
        let (h_head, h_tail) = enc_h.split_at_mut(k * h);
        let (c_head, c_tail) = enc_c.split_at_mut(k * h);
        let (h_prev, c_prev) = if k == 0 {
            (&zeros[..], &zeros[..])
        } else {
            (&h_head[(k - 1) * h..], &c_head[(k - 1) * h..])
        };
        cell_forward(
            &enc_view,
            h,
            window.encoder_d[k],
            window.encoder_e[k],
            h_prev,
            c_prev,
            &mut enc_gates[k * 4 * h..(k + 1) * 4 * h],
            &mut c_tail[..h],
            &mut enc_tanh_c[k * h..(k + 1) * h],
            &mut h_tail[..h],
        );
    }

    // Cached decoder pass with autoregressive inputs.
    let sos = sos_value(config, &window.encoder_d);
    let mut dec_gates = vec![0.0; dec_len * 4 * h];
    let mut dec_c = vec![0.0; dec_len * h];
    let mut dec_tanh_c = vec![0.0; dec_len * h];
    let mut dec_h = vec![0.0; dec_len * h];
    let mut dec_x0 = vec![0.0; dec_len];
    let mut predictions = vec![0.0; dec_len];
    let enc_final_h = &enc_h[(enc_len - 1) * h..];
    let enc_final_c = &enc_c[(enc_len - 1) * h..];
    for k in 0..dec_len {
        dec_x0[k] = if k == 0 { sos } else { predictions[k - 1] };
        let (h_head, h_tail) = dec_h.split_at_mut(k * h);
        let (c_head, c_tail) = dec_c.split_at_mut(k * h);
        let (h_prev, c_prev) = if k == 0 {
            (enc_final_h, enc_final_c)
        } else {
            (&h_head[(k - 1) * h..], &c_head[(k - 1) * h..])
        };
        cell_forward(
            &dec_view,
            h,
            dec_x0[k],
            window.decoder_e[k],
            h_prev,
            c_prev,
            &mut dec_gates[k * 4 * h..(k + 1) * 4 * h],
            &mut c_tail[..h],
            &mut dec_tanh_c[k * h..(k + 1) * h],
            &mut h_tail[..h],
        );
        predictions[k] = dot(out_w, &h_tail[..h]) + out_b;
    }

    // Loss and its derivative with the guarded denominator.
    let mean_sq: f64 = predictions
        .iter()
        .zip(&window.target_d)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / dec_len as f64;
    let loss = mean_sq.sqrt();
    let dloss_scale = 1.0 / (dec_len as f64 * (mean_sq + LOSS_EPSILON).sqrt());

    let mut grads = GradientBuffer::zeros(h);
    let mut dgates = vec![0.0; 4 * h];
    let mut dh = vec![0.0; h];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dh_prev = vec![0.0; h];
    let mut dc_prev = vec![0.0; h];

    // Decoder backward, latest step first.
    let mut feedback_carry = 0.0;
    let layout = Layout::new(h);
    for k in (0..dec_len).rev() {
        let dpred = (predictions[k] - window.target_d[k]) * dloss_scale + feedback_carry;
        let h_k = &dec_h[k * h..(k + 1) * h];
        {
            let g_out_w = &mut grads.data[layout.range(TensorId::OutW)];
            for (gw, &hv) in g_out_w.iter_mut().zip(h_k) {
                *gw += dpred * hv;
            }
        }
        grads.data[layout.range(TensorId::OutB)][0] += dpred;
        for j in 0..h {
            dh[j] = dh_next[j] + dpred * out_w[j];
        }
        let (h_prev, c_prev) = if k == 0 {
            (enc_final_h, enc_final_c)
        } else {
            (&dec_h[(k - 1) * h..k * h], &dec_c[(k - 1) * h..k * h])
        };
        let (g_wx_range, g_wh_range, g_b_range) = (
            layout.range(TensorId::DecWx),
            layout.range(TensorId::DecWh),
            layout.range(TensorId::DecB),
        );
        let (dx0, _dx1) = {
            let data = &mut grads.data;
            let (gwx, rest) = data[g_wx_range.start..g_b_range.end].split_at_mut(4 * h * INPUT_DIM);
            let (gwh, gb) = rest.split_at_mut(4 * h * h);
            debug_assert_eq!(gwh.len(), g_wh_range.len());
            cell_backward(
                &dec_view,
                h,
                dec_x0[k],
                window.decoder_e[k],
                h_prev,
                c_prev,
                &dec_gates[k * 4 * h..(k + 1) * 4 * h],
                &dec_tanh_c[k * h..(k + 1) * h],
                &dh,
                &dc_next,
                gwx,
                gwh,
                gb,
                &mut dgates,
                &mut dh_prev,
                &mut dc_prev,
            )
        };
        std::mem::swap(&mut dh_next, &mut dh_prev);
        std::mem::swap(&mut dc_next, &mut dc_prev);
        feedback_carry = if k > 0 && !options.detach_feedback {
            dx0
        } else {
            0.0
        };
    }

    // Encoder backward; the decoder's initial-state gradients seed it.
    for k in (0..enc_len).rev() {
        dh.copy_from_slice(&dh_next);
        let (h_prev, c_prev) = if k == 0 {
            (&zeros[..], &zeros[..])
        } else {
            (&enc_h[(k - 1) * h..k * h], &enc_c[(k - 1) * h..k * h])
        };
        let (g_wx_range, g_b_range) = (
            layout.range(TensorId::EncWx),
            layout.range(TensorId::EncB),
        );
        {
            let data = &mut grads.data;
            let (gwx, rest) = data[g_wx_range.start..g_b_range.end].split_at_mut(4 * h * INPUT_DIM);
            let (gwh, gb) = rest.split_at_mut(4 * h * h);
            cell_backward(
                &enc_view,
                h,
                window.encoder_d[k],
                window.encoder_e[k],
                h_prev,
                c_prev,
                &enc_gates[k * 4 * h..(k + 1) * 4 * h],
                &enc_tanh_c[k * h..(k + 1) * h],
                &dh,
                &dc_next,
                gwx,
                gwh,
                gb,
                &mut dgates,
                &mut dh_prev,
                &mut dc_prev,
            );
        }
        std::mem::swap(&mut dh_next, &mut dh_prev);
        std::mem::swap(&mut dc_next, &mut dc_prev);
    }

    grads.check_finite()?;
    Ok((loss, grads))
}

/// Autoregressive forecast across `horizon` steps.
///
/// The model sees `seed_d` (exactly one encoder window) and the field series
/// `e_full`, which must hold exactly `encoder_length + horizon` samples.
/// Each block re-encodes the most recent window of the running stream (seed
/// plus predictions so far) and decodes up to `decoder_length` new values;
/// the final block may be shorter. With `horizon == decoder_length` the
/// result is bit-identical to [`forward`] on the same inputs.
pub fn rollout(
    params: &ModelParams,
    config: &ModelConfig,
    seed_d: &[f64],
    e_full: &[f64],
    horizon: usize,
) -> Result<Vec<f64>> {
    check_model(params, config)?;
    let enc_len = config.encoder_length;
    check_len("rollout seed_d", enc_len, seed_d.len())?;
    if horizon == 0 {
        return Err(Error::Config("rollout horizon must be at least 1".into()));
    }
    check_len("rollout e_full", enc_len + horizon, e_full.len())?;

    let mut stream = Vec::with_capacity(enc_len + horizon);
    stream.extend_from_slice(seed_d);
    let mut produced = 0;
    while produced < horizon {
        let block = config.decoder_length.min(horizon - produced);
        let start = produced;
        let enc_d = &stream[start..start + enc_len];
        let enc_e = &e_full[start..start + enc_len];
        let state = encode(params, config, enc_d, enc_e)?;
        let sos = sos_value(config, enc_d);
        let dec_e = &e_full[start + enc_len..start + enc_len + block];
        let block_preds = decode(params, &state, sos, dec_e)?;
        stream.extend_from_slice(&block_preds);
        produced += block;
    }
    Ok(stream.split_off(enc_len))
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
}

/// Serializes a checkpoint: TOML metadata section, then the flat parameter
/// vector as one little-endian f64 section, in [`TensorId`] order.
pub fn checkpoint_to_bytes(params: &ModelParams, config: &ModelConfig) -> Result<Vec<u8>> {
    check_model(params, config)?;
    let meta = toml::to_string(&CheckpointMeta { model: *config })
        .map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
    let mut writer = ContainerWriter::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
    writer.section(meta.as_bytes());
    writer.section_f64(params.as_slice());
    Ok(writer.finish())
}

/// Parses a checkpoint image, validating magic, version, checksum, metadata,
/// parameter count, and finiteness.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ModelParams, ModelConfig)> {
    let mut reader = ContainerReader::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let meta_bytes = reader.section("checkpoint metadata")?;
    let meta_text = std::str::from_utf8(meta_bytes)
        .map_err(|e| Error::Config(format!("checkpoint metadata is not UTF-8: {e}")))?;
    let meta: CheckpointMeta = toml::from_str(meta_text)
        .map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
    meta.model.validate()?;
    let data = reader.section_f64("checkpoint parameters")?;
    let params = ModelParams::from_vec(meta.model.hidden_size, data)?;
    Ok((params, meta.model))
}

/// Writes a checkpoint file.
pub fn write_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<()> {
    let bytes = checkpoint_to_bytes(params, config)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a checkpoint file.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, ModelConfig)> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{TrainingWindow, WindowSource};
    use crate::fields::FieldSpec;
    use crate::rng::SplitMix64;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn random_params(hidden: usize, seed: u64) -> ModelParams {
        let mut rng = SplitMix64::new(seed);
        let mut params = ModelParams::zeros(hidden);
        for v in params.as_mut_slice() {
            *v = 0.8 * (2.0 * rng.next_f64() - 1.0);
        }
        params
    }

    fn synthetic_window(config: &ModelConfig, seed: u64) -> TrainingWindow {
        let mut rng = SplitMix64::new(seed);
        let mut series = |n: usize| -> Vec<f64> {
            (0..n).map(|_| 2.0 * rng.next_f64() - 1.0).collect()
        };
        TrainingWindow {
            encoder_d: series(config.encoder_length),
            encoder_e: series(config.encoder_length),
            decoder_e: series(config.decoder_length),
            target_d: series(config.decoder_length),
            source: WindowSource {
                field: FieldSpec::zero(),
                start: 0,
            },
        }
    }

    #[test]
    fn parameter_count_matches_layout() {
        let params = ModelParams::zeros(8);
        assert_eq!(params.len(), 713);
        let total: usize = TensorId::ALL.iter().map(|&id| params.tensor(id).len()).sum();
        assert_eq!(total, params.len());
        assert_eq!(params.tensor(TensorId::EncWx).len(), 4 * 8 * 2);
        assert_eq!(params.tensor(TensorId::EncWh).len(), 4 * 8 * 8);
        assert_eq!(params.tensor(TensorId::OutW).len(), 8);
        assert_eq!(params.tensor(TensorId::OutB).len(), 1);
    }

    #[test]
    fn zero_weight_cell_halves_cell_state() {
        let params = ModelParams::zeros(4);
        let mut state = HiddenState::zeros(4);
        state.c = vec![0.4, -1.0, 2.0, 0.0];
        let next = lstm_cell(&params, LstmSide::Encoder, &[0.3, -0.7], &state).unwrap();
        for j in 0..4 {
            close(next.c[j], 0.5 * state.c[j], 1e-15);
            close(next.h[j], 0.5 * (0.5 * state.c[j]).tanh(), 1e-15);
        }
    }

    #[test]
    fn saturated_gates_preserve_or_erase_state() {
        let mut params = ModelParams::zeros(2);
        // Forget gate wide open, input and output gates shut.
        for (j, b) in params.tensor_mut(TensorId::EncB).iter_mut().enumerate() {
            *b = if (2..4).contains(&j) { 100.0 } else { -100.0 };
        }
        let mut state = HiddenState::zeros(2);
        state.c = vec![1.25, -0.5];
        let next = lstm_cell(&params, LstmSide::Encoder, &[0.0, 0.0], &state).unwrap();
        close(next.c[0], 1.25, 1e-12);
        close(next.c[1], -0.5, 1e-12);
        assert!(next.h[0].abs() < 1e-12);
        assert!(next.h[1].abs() < 1e-12);
    }

    #[test]
    fn cell_rejects_bad_shapes() {
        let params = ModelParams::zeros(4);
        let state = HiddenState::zeros(4);
        assert!(matches!(
            lstm_cell(&params, LstmSide::Encoder, &[1.0], &state),
            Err(Error::ShapeMismatch { .. })
        ));
        let bad_state = HiddenState::zeros(3);
        assert!(matches!(
            lstm_cell(&params, LstmSide::Encoder, &[1.0, 2.0], &bad_state),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn zero_weight_encoder_keeps_zero_state() {
        let config = ModelConfig {
            hidden_size: 4,
            encoder_length: 100,
            decoder_length: 100,
            sos_policy: SosPolicy::LastObservedDipole,
        };
        let params = ModelParams::zeros(4);
        let window = synthetic_window(&config, 3);
        let state = encode(&params, &config, &window.encoder_d, &window.encoder_e).unwrap();
        assert!(state.h.iter().all(|&v| v == 0.0));
        assert!(state.c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_ignores_decoder_weights() {
        let config = ModelConfig::new(5);
        let window = synthetic_window(&config, 4);
        let params = random_params(5, 10);
        let mut tweaked = params.clone();
        for v in tweaked.tensor_mut(TensorId::DecWh) {
            *v += 1.0;
        }
        for v in tweaked.tensor_mut(TensorId::OutW) {
            *v -= 0.5;
        }
        let a = encode(&params, &config, &window.encoder_d, &window.encoder_e).unwrap();
        let b = encode(&tweaked, &config, &window.encoder_d, &window.encoder_e).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dead_readout_decodes_zeros() {
        let config = ModelConfig::new(6);
        let mut params = random_params(6, 11);
        for v in params.tensor_mut(TensorId::OutW) {
            *v = 0.0;
        }
        params.tensor_mut(TensorId::OutB)[0] = 0.0;
        let window = synthetic_window(&config, 12);
        let preds = forward(&params, &config, &window).unwrap();
        assert!(preds.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn single_step_decode_is_cell_plus_readout() {
        let params = random_params(4, 20);
        let initial = HiddenState {
            h: vec![0.1, -0.2, 0.3, 0.4],
            c: vec![-0.5, 0.6, 0.7, -0.8],
        };
        let sos = 0.37;
        let e0 = -0.41;
        let preds = decode(&params, &initial, sos, &[e0]).unwrap();
        let next = lstm_cell(&params, LstmSide::Decoder, &[sos, e0], &initial).unwrap();
        let expected = dot(params.tensor(TensorId::OutW), &next.h)
            + params.tensor(TensorId::OutB)[0];
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].to_bits(), expected.to_bits());
    }

    #[test]
    fn forward_is_pure_and_ignores_targets() {
        let config = ModelConfig::new(6);
        let params = random_params(6, 30);
        let window = synthetic_window(&config, 31);
        let a = forward(&params, &config, &window).unwrap();
        let b = forward(&params, &config, &window).unwrap();
        assert_eq!(a, b);
        let mut perturbed = window.clone();
        for t in &mut perturbed.target_d {
            *t += 5.0;
        }
        let c = forward(&params, &config, &perturbed).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn forward_composes_encode_and_decode() {
        let config = ModelConfig::new(7);
        let params = random_params(7, 32);
        let window = synthetic_window(&config, 33);
        let state = encode(&params, &config, &window.encoder_d, &window.encoder_e).unwrap();
        let manual = decode(
            &params,
            &state,
            *window.encoder_d.last().unwrap(),
            &window.decoder_e,
        )
        .unwrap();
        let preds = forward(&params, &config, &window).unwrap();
        assert_eq!(preds, manual);
    }

    #[test]
    fn sos_policy_changes_first_input_only() {
        let mut config = ModelConfig::new(5);
        let params = random_params(5, 40);
        let window = synthetic_window(&config, 41);
        let with_last = forward(&params, &config, &window).unwrap();
        config.sos_policy = SosPolicy::FixedZero;
        let with_zero = forward(&params, &config, &window).unwrap();
        assert_ne!(with_last, with_zero);
        // Same inputs with a zero last dipole make the two policies agree.
        let mut zero_tail = window.clone();
        *zero_tail.encoder_d.last_mut().unwrap() = 0.0;
        config.sos_policy = SosPolicy::LastObservedDipole;
        let a = forward(&params, &config, &zero_tail).unwrap();
        config.sos_policy = SosPolicy::FixedZero;
        let b = forward(&params, &config, &zero_tail).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_rmse_basics() {
        assert_eq!(loss_rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        close(loss_rmse(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0, 1e-15);
        close(
            loss_rmse(&[3.0, -1.0], &[0.0, 0.0]).unwrap(),
            (5.0f64).sqrt(),
            1e-15,
        );
        assert!(loss_rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(loss_rmse(&[], &[]).is_err());
    }

    #[test]
    fn backward_zero_residual_zero_gradient() {
        let config = ModelConfig::new(4);
        // Zero params predict identically zero; zero targets follow suit.
        let params = ModelParams::zeros(4);
        let mut window = synthetic_window(&config, 50);
        window.target_d = vec![0.0; config.decoder_length];
        let (loss, grads) = backward(&params, &config, &window).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_loss_matches_forward_loss() {
        let config = ModelConfig::new(6);
        let params = random_params(6, 60);
        let window = synthetic_window(&config, 61);
        let (loss, _) = backward(&params, &config, &window).unwrap();
        let preds = forward(&params, &config, &window).unwrap();
        let reference = loss_rmse(&preds, &window.target_d).unwrap();
        assert_eq!(loss.to_bits(), reference.to_bits());
    }

    #[test]
    fn detaching_feedback_changes_gradients() {
        let config = ModelConfig::new(6);
        let params = random_params(6, 70);
        let window = synthetic_window(&config, 71);
        let (_, full) = backward(&params, &config, &window).unwrap();
        let (_, detached) = backward_with(
            &params,
            &config,
            &window,
            BackwardOptions {
                detach_feedback: true,
            },
        )
        .unwrap();
        let diff: f64 = full
            .as_slice()
            .iter()
            .zip(detached.as_slice())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6, "feedback path carries no gradient ({diff})");
    }

    #[test]
    fn activations_and_readout_stay_bounded() {
        let config = ModelConfig::new(8);
        let params = random_params(8, 80);
        let window = synthetic_window(&config, 81);
        let state = encode(&params, &config, &window.encoder_d, &window.encoder_e).unwrap();
        assert!(state.h.iter().all(|v| v.abs() <= 1.0));
        let bound: f64 = params.tensor(TensorId::OutW).iter().map(|w| w.abs()).sum::<f64>()
            + params.tensor(TensorId::OutB)[0].abs();
        let preds = forward(&params, &config, &window).unwrap();
        assert!(preds.iter().all(|p| p.abs() <= bound));
    }

    #[test]
    fn rollout_single_block_equals_forward() {
        let config = ModelConfig::new(6);
        let params = random_params(6, 90);
        let window = synthetic_window(&config, 91);
        let mut e_full = window.encoder_e.clone();
        e_full.extend_from_slice(&window.decoder_e);
        let rolled = rollout(
            &params,
            &config,
            &window.encoder_d,
            &e_full,
            config.decoder_length,
        )
        .unwrap();
        let forwarded = forward(&params, &config, &window).unwrap();
        assert_eq!(rolled.len(), forwarded.len());
        for (a, b) in rolled.iter().zip(&forwarded) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rollout_field_accounting_is_exact() {
        let config = ModelConfig::new(4);
        let params = random_params(4, 100);
        let seed: Vec<f64> = (0..100).map(|k| (k as f64 * 0.01).sin()).collect();
        let horizon = 250;
        let e_full = vec![0.3; 100 + horizon];
        let preds = rollout(&params, &config, &seed, &e_full, horizon).unwrap();
        assert_eq!(preds.len(), horizon);
        // One sample short or long must be rejected.
        assert!(matches!(
            rollout(&params, &config, &seed, &e_full[..349], horizon),
            Err(Error::ShapeMismatch { .. })
        ));
        let long = vec![0.3; 351];
        assert!(matches!(
            rollout(&params, &config, &seed, &long, horizon),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            rollout(&params, &config, &seed, &e_full, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rollout_partial_final_block() {
        let config = ModelConfig::new(4);
        let params = random_params(4, 110);
        let seed: Vec<f64> = (0..100).map(|k| (k as f64 * 0.02).cos()).collect();
        let e_full = vec![0.1; 100 + 130];
        let preds = rollout(&params, &config, &seed, &e_full, 130).unwrap();
        assert_eq!(preds.len(), 130);
        // The first 100 match a plain 100-step rollout bit for bit.
        let first = rollout(&params, &config, &seed, &e_full[..200], 100).unwrap();
        for (a, b) in preds[..100].iter().zip(&first) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let config = ModelConfig {
            hidden_size: 5,
            encoder_length: 17,
            decoder_length: 9,
            sos_policy: SosPolicy::FixedZero,
        };
        let params = random_params(5, 120);
        let bytes = checkpoint_to_bytes(&params, &config).unwrap();
        let (restored, restored_config) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(restored_config, config);
        assert_eq!(restored.as_slice().len(), params.as_slice().len());
        for (a, b) in restored.as_slice().iter().zip(params.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let again = checkpoint_to_bytes(&restored, &restored_config).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let config = ModelConfig::new(3);
        let params = random_params(3, 130);
        let bytes = checkpoint_to_bytes(&params, &config).unwrap();

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(
            checkpoint_from_bytes(&wrong_magic),
            Err(Error::BadMagic { .. })
        ));

        let mut newer = bytes.clone();
        newer[4] = 0xFF;
        let err = checkpoint_from_bytes(&newer).unwrap_err();
        assert!(matches!(
            err,
            Error::UnsupportedVersion { .. } | Error::ChecksumMismatch { .. }
        ));

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(
            checkpoint_from_bytes(&flipped),
            Err(Error::ChecksumMismatch { .. })
        ));

        assert!(matches!(
            checkpoint_from_bytes(&bytes[..bytes.len() - 9]),
            Err(Error::Truncated { .. } | Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_rejects_nan_parameters() {
        let config = ModelConfig::new(3);
        let mut params = random_params(3, 140);
        params.tensor_mut(TensorId::DecWh)[5] = f64::NAN;
        // Serialization succeeds; parsing must flag the poisoned tensor.
        let meta = toml::to_string(&CheckpointMeta { model: config }).unwrap();
        let mut writer = ContainerWriter::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        writer.section(meta.as_bytes());
        writer.section_f64(params.as_slice());
        let bytes = writer.finish();
        let err = checkpoint_from_bytes(&bytes).unwrap_err();
        assert!(matches!(
            err,
            Error::NonFiniteGradient { tensor: "dec_wh" }
        ));
    }
}
