//! Deterministic INT8 post-training quantization of the folded MLP,
//! integer inference kernels and quantization-aware fine-tuning.
//!
//! Scales are symmetric powers of two: a tensor with fraction bits `f`
//! stores `real ~= q * 2^-f` with `q` in `[-128, 127]`. Rounding is half to
//! even everywhere; accumulators are int32, biases int32 at the combined
//! input+weight scale, and requantization is an exact integer shift. The
//! final layer dequantizes its accumulator and applies a float sigmoid.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError, Provenance, Tensor, TensorData};
use crate::nn::{Dataset, FakeQuant, MlpModel, TrainConfig, TrainError, TrainHistory};
use crate::window::WindowFeature;

/// Fraction bits assigned to all-zero tensors.
pub const ZERO_TENSOR_FRACTION_BITS: i32 = 7;
/// Default calibration sample size.
pub const DEFAULT_CALIBRATION_SIZE: usize = 1024;
/// Fraction-bit magnitude beyond which calibration is considered degenerate.
const MAX_FRACTION_BITS: i32 = 62;

/// Power-of-two scale of one tensor: `real ~= q * 2^-fraction_bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorQuant {
    pub fraction_bits: i32,
}

impl TensorQuant {
    pub fn scale(&self) -> f64 {
        2f64.powi(-self.fraction_bits)
    }

    /// `clamp(round_half_to_even(x * 2^f), -128, 127)`.
    pub fn quantize_value(&self, x: f64) -> i8 {
        let scaled = x * 2f64.powi(self.fraction_bits);
        scaled.round_ties_even().clamp(-128.0, 127.0) as i8
    }

    pub fn dequantize_value(&self, q: i8) -> f64 {
        q as f64 * self.scale()
    }
}

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("model must be batch-norm folded before quantization")]
    NotFolded,
    #[error("empty calibration set")]
    EmptyCalibration,
    #[error("input width {found}, model expects {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("layer {layer}: calibrated fraction bits {fraction_bits} degenerate (tensor max-abs {max_abs})")]
    DegenerateScale { layer: usize, fraction_bits: i32, max_abs: f64 },
    #[error("layer {layer}: bias {value} overflows int32 at fraction bits {fraction_bits}; calibration failed")]
    BiasOverflow { layer: usize, value: f64, fraction_bits: i32 },
    #[error("scale chaining broken at layer {0}: input scale differs from producer output scale")]
    ScaleChain(usize),
    #[error("quantized model is inconsistent: {0}")]
    BadModel(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Calibrated fraction bits: one weight scale per layer and one activation
/// scale per layer input. `input_f[0]` is always 0 (raw signed window bytes).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantScales {
    pub weight_f: Vec<i32>,
    pub input_f: Vec<i32>,
}

impl QuantScales {
    /// Output fraction bits of layer `k`: the next layer's input scale for
    /// hidden layers, the raw accumulator scale for the final layer.
    pub fn output_f(&self, k: usize) -> i32 {
        if k + 1 < self.input_f.len() {
            self.input_f[k + 1]
        } else {
            self.input_f[k] + self.weight_f[k]
        }
    }

    pub fn to_fake_quant(&self) -> FakeQuant {
        FakeQuant { weight_f: self.weight_f.clone(), act_f: self.input_f.clone() }
    }
}

/// Calibration inputs as a float matrix fed through the folded model.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub features: Array2<f32>,
}

impl CalibrationSet {
    /// Evenly-strided deterministic sample of at most `size` windows.
    pub fn from_windows(windows: &[WindowFeature], size: usize) -> Result<Self, QuantError> {
        if windows.is_empty() || size == 0 {
            return Err(QuantError::EmptyCalibration);
        }
        let take = size.min(windows.len());
        let width = windows[0].values.len();
        let mut features = Array2::zeros((take, width));
        for i in 0..take {
            let src = &windows[i * windows.len() / take];
            for (j, &v) in src.values.iter().enumerate() {
                features[[i, j]] = v as f32;
            }
        }
        Ok(Self { features })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Largest `f` such that `max_abs * 2^f <= 127`; all-zero tensors get the
/// fixed convention value.
fn fraction_bits_for(max_abs: f64) -> i32 {
    if max_abs == 0.0 {
        return ZERO_TENSOR_FRACTION_BITS;
    }
    let mut f = (127.0 / max_abs).log2().floor() as i32;
    while max_abs * 2f64.powi(f + 1) <= 127.0 {
        f += 1;
    }
    while max_abs * 2f64.powi(f) > 127.0 {
        f -= 1;
    }
    f
}

/// Chooses per-tensor fraction bits: weight scales from the tensor max-abs,
/// activation scales from post-ReLU activations observed on the
/// calibration set run through the float model.
pub fn calibrate(model: &MlpModel, calib: &CalibrationSet) -> Result<QuantScales, QuantError> {
    if !model.is_folded() {
        return Err(QuantError::NotFolded);
    }
    if calib.is_empty() {
        return Err(QuantError::EmptyCalibration);
    }
    if calib.features.ncols() != model.input_width() {
        return Err(QuantError::WidthMismatch {
            expected: model.input_width(),
            found: calib.features.ncols(),
        });
    }

    let mut weight_f = Vec::with_capacity(model.layers.len());
    for (k, dense) in model.layers.iter().enumerate() {
        let max_abs = dense.weight.iter().fold(0f64, |m, &w| m.max((w as f64).abs()));
        let f = fraction_bits_for(max_abs);
        if f.abs() > MAX_FRACTION_BITS {
            return Err(QuantError::DegenerateScale { layer: k, fraction_bits: f, max_abs });
        }
        weight_f.push(f);
    }

    // Raw signed window bytes are integers: fraction bits 0 by construction.
    let mut input_f = vec![0i32];
    let acts = hidden_activations(model, &calib.features);
    for (k, act) in acts.iter().enumerate() {
        let max_abs = act.iter().fold(0f64, |m, &a| m.max((a as f64).abs()));
        let f = fraction_bits_for(max_abs);
        if f.abs() > MAX_FRACTION_BITS {
            return Err(QuantError::DegenerateScale { layer: k + 1, fraction_bits: f, max_abs });
        }
        input_f.push(f);
    }
    Ok(QuantScales { weight_f, input_f })
}

/// Post-ReLU activations of every hidden layer in inference mode.
fn hidden_activations(model: &MlpModel, features: &Array2<f32>) -> Vec<Array2<f32>> {
    let mut out = Vec::with_capacity(model.layers.len() - 1);
    let mut a = features.clone();
    for (k, dense) in model.layers.iter().enumerate() {
        if k + 1 == model.layers.len() {
            break;
        }
        let mut z = a.dot(&dense.weight.t());
        z += &dense.bias;
        let act = z.mapv(|v| v.max(0.0));
        out.push(act.clone());
        a = act;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayer {
    pub weight: Array2<i8>,
    pub bias: Vec<i32>,
    pub weight_quant: TensorQuant,
    pub input_quant: TensorQuant,
    pub output_quant: TensorQuant,
}

/// Folded, INT8-quantized network. Immutable once built; `qforward` is a
/// pure function safe to call concurrently.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    pub layer_units: Vec<usize>,
    pub layers: Vec<QuantLayer>,
    pub source_model_sha256: Option<String>,
}

/// Quantizes a folded model at calibrated scales. Weight values round half
/// to even with int8 saturation; biases land in int32 at the combined scale
/// and overflow is an error rather than a wrap.
pub fn quantize(
    model: &MlpModel,
    scales: &QuantScales,
    source_model_sha256: Option<String>,
) -> Result<QuantModel, QuantError> {
    if !model.is_folded() {
        return Err(QuantError::NotFolded);
    }
    let mut layers = Vec::with_capacity(model.layers.len());
    for (k, dense) in model.layers.iter().enumerate() {
        let w_quant = TensorQuant { fraction_bits: scales.weight_f[k] };
        let in_quant = TensorQuant { fraction_bits: scales.input_f[k] };
        let out_quant = TensorQuant { fraction_bits: scales.output_f(k) };

        let weight = dense.weight.mapv(|w| w_quant.quantize_value(w as f64));
        let bias_bits = in_quant.fraction_bits + w_quant.fraction_bits;
        let mut bias = Vec::with_capacity(dense.bias.len());
        for &b in dense.bias.iter() {
            let scaled = (b as f64 * 2f64.powi(bias_bits)).round_ties_even();
            if scaled > i32::MAX as f64 || scaled < i32::MIN as f64 {
                return Err(QuantError::BiasOverflow {
                    layer: k,
                    value: b as f64,
                    fraction_bits: bias_bits,
                });
            }
            bias.push(scaled as i32);
        }
        layers.push(QuantLayer {
            weight,
            bias,
            weight_quant: w_quant,
            input_quant: in_quant,
            output_quant: out_quant,
        });
    }
    let q = QuantModel {
        layer_units: model.spec.layer_units.clone(),
        layers,
        source_model_sha256,
    };
    q.validate()?;
    Ok(q)
}

/// Exact integer `round_half_to_even(acc * 2^e)` with int8 saturation.
fn requantize(acc: i32, e: i32) -> i8 {
    let v = acc as i128;
    let shifted: i128 = if e >= 0 {
        // Any non-zero accumulator saturates once shifted past the int8
        // range; cap the shift so the i128 product cannot overflow.
        if e >= 64 {
            if v == 0 {
                0
            } else if v > 0 {
                i128::from(i32::MAX)
            } else {
                i128::from(i32::MIN)
            }
        } else {
            v << e
        }
    } else {
        let shift = -e;
        if shift >= 120 {
            0
        } else {
            let d = 1i128 << shift;
            let q = v.div_euclid(d);
            let r = v.rem_euclid(d);
            match (2 * r).cmp(&d) {
                std::cmp::Ordering::Greater => q + 1,
                std::cmp::Ordering::Less => q,
                std::cmp::Ordering::Equal => {
                    if q % 2 == 0 {
                        q
                    } else {
                        q + 1
                    }
                }
            }
        }
    };
    shifted.clamp(-128, 127) as i8
}

impl QuantModel {
    pub fn input_width(&self) -> usize {
        self.layer_units[0]
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if self.layer_units.len() < 2 || self.layers.len() != self.layer_units.len() - 1 {
            return Err(QuantError::BadModel("layer count".to_string()));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            let (out_n, in_n) = (self.layer_units[k + 1], self.layer_units[k]);
            if layer.weight.dim() != (out_n, in_n) || layer.bias.len() != out_n {
                return Err(QuantError::BadModel(format!("layer {k} tensor shapes")));
            }
        }
        if self.layers[0].input_quant.fraction_bits != 0 {
            return Err(QuantError::ScaleChain(0));
        }
        for k in 1..self.layers.len() {
            if self.layers[k].input_quant != self.layers[k - 1].output_quant {
                return Err(QuantError::ScaleChain(k));
            }
        }
        let last = self.layers.last().unwrap();
        if last.output_quant.fraction_bits
            != last.input_quant.fraction_bits + last.weight_quant.fraction_bits
        {
            return Err(QuantError::ScaleChain(self.layers.len() - 1));
        }
        Ok(())
    }

    /// Pure integer inference: int32 accumulate, shift-requantize with
    /// round-half-to-even, ReLU in the integer domain, and one final float
    /// sigmoid on the dequantized accumulator.
    pub fn qforward(&self, x: &[i8]) -> Result<f64, QuantError> {
        if x.len() != self.input_width() {
            return Err(QuantError::WidthMismatch {
                expected: self.input_width(),
                found: x.len(),
            });
        }
        let mut v: Vec<i32> = x.iter().map(|&b| b as i32).collect();
        for (k, layer) in self.layers.iter().enumerate() {
            let last = k + 1 == self.layers.len();
            let in_n = self.layer_units[k];
            let out_n = self.layer_units[k + 1];
            let weights = layer.weight.as_slice().expect("standard layout");

            if last {
                debug_assert_eq!(out_n, 1);
                let row = &weights[..in_n];
                let acc = layer.bias[0]
                    + row.iter().zip(&v).map(|(&w, &x)| w as i32 * x).sum::<i32>();
                let bits = layer.input_quant.fraction_bits + layer.weight_quant.fraction_bits;
                let logit = acc as f64 * 2f64.powi(-bits);
                return Ok(stable_sigmoid(logit));
            }

            let shift = layer.output_quant.fraction_bits
                - layer.input_quant.fraction_bits
                - layer.weight_quant.fraction_bits;
            let mut next = vec![0i32; out_n];
            for (j, slot) in next.iter_mut().enumerate() {
                let row = &weights[j * in_n..(j + 1) * in_n];
                let acc = layer.bias[j]
                    + row.iter().zip(&v).map(|(&w, &x)| w as i32 * x).sum::<i32>();
                *slot = requantize(acc, shift).max(0) as i32;
            }
            v = next;
        }
        unreachable!("final layer returns")
    }

    /// Scores a slice of windows in order.
    pub fn score_windows(&self, windows: &[WindowFeature]) -> Result<Vec<f64>, QuantError> {
        windows.iter().map(|w| self.qforward(&w.values)).collect()
    }

    pub fn to_container(&self, provenance: Provenance) -> Container {
        let meta = serde_json::json!({
            "layer_units": self.layer_units,
            "weight_fraction_bits":
                self.layers.iter().map(|l| l.weight_quant.fraction_bits).collect::<Vec<_>>(),
            "input_fraction_bits":
                self.layers.iter().map(|l| l.input_quant.fraction_bits).collect::<Vec<_>>(),
            "output_fraction_bits":
                self.layers.iter().map(|l| l.output_quant.fraction_bits).collect::<Vec<_>>(),
        });
        let mut provenance = provenance;
        if provenance.source_model_sha256.is_none() {
            provenance.source_model_sha256 = self.source_model_sha256.clone();
        }
        let mut c = Container::new(KIND_QUANT, meta, provenance);
        for (k, layer) in self.layers.iter().enumerate() {
            c.push(Tensor::new(
                format!("layer{k}.weight"),
                vec![layer.weight.nrows(), layer.weight.ncols()],
                TensorData::I8(layer.weight.iter().copied().collect()),
            ));
            c.push(Tensor::new(
                format!("layer{k}.bias"),
                vec![layer.bias.len()],
                TensorData::I32(layer.bias.clone()),
            ));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, QuantError> {
        c.expect_kind(KIND_QUANT)?;
        let meta_vec = |key: &str| -> Result<Vec<i32>, QuantError> {
            serde_json::from_value(
                c.meta.get(key).cloned().ok_or_else(|| {
                    QuantError::BadModel(format!("missing {key} in header"))
                })?,
            )
            .map_err(|e| QuantError::BadModel(format!("bad {key}: {e}")))
        };
        let layer_units: Vec<usize> = serde_json::from_value(
            c.meta
                .get("layer_units")
                .cloned()
                .ok_or_else(|| QuantError::BadModel("missing layer_units".to_string()))?,
        )
        .map_err(|e| QuantError::BadModel(format!("bad layer_units: {e}")))?;
        let weight_f = meta_vec("weight_fraction_bits")?;
        let input_f = meta_vec("input_fraction_bits")?;
        let output_f = meta_vec("output_fraction_bits")?;
        let count = layer_units.len().saturating_sub(1);
        if weight_f.len() != count || input_f.len() != count || output_f.len() != count {
            return Err(QuantError::BadModel("fraction bit table length".to_string()));
        }

        let mut layers = Vec::with_capacity(count);
        for k in 0..count {
            let (out_n, in_n) = (layer_units[k + 1], layer_units[k]);
            let (wshape, wdata) = c.i8_tensor(&format!("layer{k}.weight"))?;
            if wshape != [out_n, in_n] {
                return Err(QuantError::BadModel(format!("layer{k}.weight shape")));
            }
            let weight = Array2::from_shape_vec((out_n, in_n), wdata.to_vec()).unwrap();
            let (_, bdata) = c.i32_tensor(&format!("layer{k}.bias"))?;
            if bdata.len() != out_n {
                return Err(QuantError::BadModel(format!("layer{k}.bias length")));
            }
            layers.push(QuantLayer {
                weight,
                bias: bdata.to_vec(),
                weight_quant: TensorQuant { fraction_bits: weight_f[k] },
                input_quant: TensorQuant { fraction_bits: input_f[k] },
                output_quant: TensorQuant { fraction_bits: output_f[k] },
            });
        }
        let q = Self {
            layer_units,
            layers,
            source_model_sha256: c.provenance.source_model_sha256.clone(),
        };
        q.validate()?;
        Ok(q)
    }

    pub fn save(&self, path: &std::path::Path, provenance: Provenance) -> Result<(), QuantError> {
        Ok(self.to_container(provenance).write_file(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, QuantError> {
        Self::from_container(&Container::read_file(path)?)
    }
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Quantization-aware fine-tuning: trains the folded model with
/// quantize-dequantize of weights and activations at the fixed calibrated
/// scales (straight-through gradients), then re-quantizes. The returned
/// model is never worse than plain quantization on the validation set; if
/// fine-tuning regressed, the plain quantization is kept.
pub fn finetune_qat(
    folded: &MlpModel,
    scales: &QuantScales,
    train_windows: &[WindowFeature],
    val_windows: &[WindowFeature],
    cfg: &TrainConfig,
    source_model_sha256: Option<String>,
) -> Result<(QuantModel, TrainHistory), QuantError> {
    if !folded.is_folded() {
        return Err(QuantError::NotFolded);
    }
    let plain = quantize(folded, scales, source_model_sha256.clone())?;
    if cfg.epochs == 0 {
        return Ok((plain, TrainHistory::default()));
    }

    let train_data = Dataset::from_windows(train_windows);
    let val_data = Dataset::from_windows(val_windows);
    let fq = scales.to_fake_quant();
    let (tuned, history) = crate::nn::train_impl(
        folded.clone(),
        &train_data,
        &val_data,
        cfg,
        Some(&fq),
        |_, _, _| {},
    )?;
    let tuned_q = quantize(&tuned, scales, source_model_sha256)?;

    let acc = |m: &QuantModel| -> Result<f64, QuantError> {
        let scores = m.score_windows(val_windows)?;
        let hits = scores
            .iter()
            .zip(val_windows)
            .filter(|(&s, w)| (s >= 0.5) == w.label.is_attack())
            .count();
        Ok(hits as f64 / val_windows.len() as f64)
    };
    if acc(&tuned_q)? >= acc(&plain)? {
        Ok((tuned_q, history))
    } else {
        Ok((plain, history))
    }
}

pub const KIND_QUANT: &str = "mlp-quant";
