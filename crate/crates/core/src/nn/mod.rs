//! Float MLP: topology, initialization, forward pass, batch-norm folding
//! and checkpoint serialization. Training lives in [`train`], gradient
//! verification in [`grad`].

mod grad;
pub(crate) mod math;
mod train;

pub use grad::gradient_check;
pub use math::FakeQuant;
pub(crate) use train::train_impl;
pub use train::{
    evaluate_dataset, train, train_with_observer, Dataset, EarlyStopConfig, EpochStats,
    TrainConfig, TrainError, TrainHistory,
};

use ndarray::{Array1, Array2, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError, Provenance, Tensor, TensorData};

/// Layer widths of the detector networks, input to output.
pub const DETECTOR_UNITS: [usize; 6] = [40, 256, 128, 64, 32, 1];

/// Network topology plus regularization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layer_units: Vec<usize>,
    pub dropout_rate: f32,
    pub batchnorm: bool,
    pub bn_epsilon: f32,
    pub bn_momentum: f32,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            layer_units: DETECTOR_UNITS.to_vec(),
            dropout_rate: 0.2,
            batchnorm: true,
            bn_epsilon: 1e-3,
            bn_momentum: 0.99,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("at least input and output layers are required")]
    TooFewLayers,
    #[error("output layer has {0} units, expected 1")]
    OutputNotOne(usize),
    #[error("layer widths must be non-zero")]
    ZeroWidth,
    #[error("dropout rate {0} outside [0,1)")]
    DropoutRange(f32),
    #[error("batch-norm epsilon {0} must be positive")]
    EpsilonRange(f32),
    #[error("batch-norm momentum {0} outside [0,1)")]
    MomentumRange(f32),
}

impl ModelSpec {
    pub fn with_units(layer_units: Vec<usize>) -> Self {
        Self { layer_units, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.layer_units.len() < 2 {
            return Err(SpecError::TooFewLayers);
        }
        if *self.layer_units.last().unwrap() != 1 {
            return Err(SpecError::OutputNotOne(*self.layer_units.last().unwrap()));
        }
        if self.layer_units.iter().any(|&u| u == 0) {
            return Err(SpecError::ZeroWidth);
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(SpecError::DropoutRange(self.dropout_rate));
        }
        if !(self.bn_epsilon > 0.0) {
            return Err(SpecError::EpsilonRange(self.bn_epsilon));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(SpecError::MomentumRange(self.bn_momentum));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_units[0]
    }

    pub fn layer_count(&self) -> usize {
        self.layer_units.len() - 1
    }

    /// Weight and bias element count over all dense layers.
    pub fn dense_param_count(&self) -> usize {
        self.layer_units.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Learnable parameter count including batch-norm gamma/beta.
    pub fn param_count(&self) -> usize {
        let bn: usize = if self.batchnorm {
            self.layer_units[1..self.layer_units.len() - 1].iter().map(|u| 2 * u).sum()
        } else {
            0
        };
        self.dense_param_count() + bn
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
}

/// Execution mode: `Train` uses batch statistics and dropout, `Infer` uses
/// running statistics and no dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input width {found}, model expects {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("checkpoint is inconsistent: {0}")]
    BadCheckpoint(String),
}

/// Multi-layer perceptron over element type `F`. `norms` has one entry per
/// dense layer; the final entry is always `None` (no norm after the output
/// layer), and folding clears the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub spec: ModelSpec,
    pub layers: Vec<Dense<F>>,
    pub norms: Vec<Option<BatchNorm<F>>>,
}

/// Training-precision model.
pub type MlpModel = Mlp<f32>;

impl MlpModel {
    /// Fan-in-scaled uniform weight init, zero biases, identity batch norm.
    /// Deterministic per seed.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self, SpecError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.layer_count());
        let mut norms = Vec::with_capacity(spec.layer_count());
        for (k, pair) in spec.layer_units.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f32).sqrt();
            let weight =
                Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-bound..bound));
            let bias = Array1::zeros(fan_out);
            layers.push(Dense { weight, bias });
            let is_hidden = k + 1 < spec.layer_count();
            norms.push(if spec.batchnorm && is_hidden {
                Some(BatchNorm {
                    gamma: Array1::ones(fan_out),
                    beta: Array1::zeros(fan_out),
                    running_mean: Array1::zeros(fan_out),
                    running_var: Array1::ones(fan_out),
                })
            } else {
                None
            });
        }
        Ok(Self { spec, layers, norms })
    }

    /// Single-input forward pass. `seed` drives dropout in `Train` mode and
    /// is ignored in `Infer` mode, which is a pure function of `(model, x)`.
    pub fn forward(&self, x: &[f32], mode: Mode, seed: u64) -> Result<f64, NnError> {
        if x.len() != self.spec.input_width() {
            return Err(NnError::WidthMismatch {
                expected: self.spec.input_width(),
                found: x.len(),
            });
        }
        let input = Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap();
        let probs = match mode {
            Mode::Infer => math::forward_batch(self, &input, Mode::Infer, None, None).probs,
            Mode::Train => {
                let masks = if self.spec.dropout_rate > 0.0 {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    Some(math::dropout_masks(self, 1, self.spec.dropout_rate, &mut rng))
                } else {
                    None
                };
                math::forward_batch(self, &input, Mode::Train, masks.as_deref(), None).probs
            }
        };
        Ok(probs[[0, 0]] as f64)
    }

    /// Inference-mode probability for one input.
    pub fn predict(&self, x: &[f32]) -> Result<f64, NnError> {
        self.forward(x, Mode::Infer, 0)
    }

    /// Batched inference-mode probabilities.
    pub fn predict_batch(&self, x: &Array2<f32>) -> Result<Vec<f64>, NnError> {
        if x.ncols() != self.spec.input_width() {
            return Err(NnError::WidthMismatch {
                expected: self.spec.input_width(),
                found: x.ncols(),
            });
        }
        let cache = math::forward_batch(self, x, Mode::Infer, None, None);
        Ok(cache.probs.column(0).iter().map(|&p| p as f64).collect())
    }

    pub fn to_f64(&self) -> Mlp<f64> {
        Mlp {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|d| Dense {
                    weight: d.weight.mapv(|v| v as f64),
                    bias: d.bias.mapv(|v| v as f64),
                })
                .collect(),
            norms: self
                .norms
                .iter()
                .map(|n| {
                    n.as_ref().map(|bn| BatchNorm {
                        gamma: bn.gamma.mapv(|v| v as f64),
                        beta: bn.beta.mapv(|v| v as f64),
                        running_mean: bn.running_mean.mapv(|v| v as f64),
                        running_var: bn.running_var.mapv(|v| v as f64),
                    })
                })
                .collect(),
        }
    }

    /// Absorbs inference-mode batch normalization into the preceding dense
    /// layer: `W' = diag(g/sqrt(v+eps)) W`, `b' = g(b-m)/sqrt(v+eps) + beta`.
    /// Inference outputs are preserved; scales are computed in f64.
    pub fn fold_batchnorm(&self) -> MlpModel {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (dense, norm) in self.layers.iter().zip(&self.norms) {
            match norm {
                None => layers.push(dense.clone()),
                Some(bn) => {
                    let eps = self.spec.bn_epsilon as f64;
                    let mut weight = dense.weight.clone();
                    let mut bias = dense.bias.clone();
                    for j in 0..weight.nrows() {
                        let scale = bn.gamma[j] as f64
                            / ((bn.running_var[j] as f64 + eps).sqrt());
                        weight.row_mut(j).mapv_inplace(|w| (w as f64 * scale) as f32);
                        bias[j] = ((dense.bias[j] as f64 - bn.running_mean[j] as f64) * scale
                            + bn.beta[j] as f64) as f32;
                    }
                    layers.push(Dense { weight, bias });
                }
            }
        }
        let mut spec = self.spec.clone();
        spec.batchnorm = false;
        let norms = vec![None; layers.len()];
        MlpModel { spec, layers, norms }
    }

    /// Digest of topology and parameters, independent of provenance.
    pub fn content_sha256(&self) -> String {
        let mut bytes = serde_json::to_vec(&self.spec).expect("spec serializes");
        for dense in &self.layers {
            for v in dense.weight.iter().chain(dense.bias.iter()) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        for bn in self.norms.iter().flatten() {
            for v in bn
                .gamma
                .iter()
                .chain(bn.beta.iter())
                .chain(bn.running_mean.iter())
                .chain(bn.running_var.iter())
            {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::container::sha256_hex(&bytes)
    }

    /// Packs the model into a checkpoint container. `extra_meta` lands in
    /// the header next to the spec (e.g. training epoch / metrics).
    pub fn to_container(&self, provenance: Provenance, extra_meta: serde_json::Value) -> Container {
        let meta = serde_json::json!({ "spec": self.spec, "training": extra_meta });
        let mut c = Container::new(KIND_FLOAT, meta, provenance);
        for (k, dense) in self.layers.iter().enumerate() {
            c.push(Tensor::new(
                format!("dense{k}.weight"),
                vec![dense.weight.nrows(), dense.weight.ncols()],
                TensorData::F32(dense.weight.iter().copied().collect()),
            ));
            c.push(Tensor::new(
                format!("dense{k}.bias"),
                vec![dense.bias.len()],
                TensorData::F32(dense.bias.to_vec()),
            ));
        }
        for (k, bn) in self.norms.iter().enumerate() {
            if let Some(bn) = bn {
                for (name, arr) in [
                    ("gamma", &bn.gamma),
                    ("beta", &bn.beta),
                    ("running_mean", &bn.running_mean),
                    ("running_var", &bn.running_var),
                ] {
                    c.push(Tensor::new(
                        format!("bn{k}.{name}"),
                        vec![arr.len()],
                        TensorData::F32(arr.to_vec()),
                    ));
                }
            }
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, NnError> {
        c.expect_kind(KIND_FLOAT)?;
        let spec: ModelSpec = serde_json::from_value(
            c.meta.get("spec").cloned().ok_or_else(|| {
                NnError::BadCheckpoint("missing spec in header".to_string())
            })?,
        )
        .map_err(|e| NnError::BadCheckpoint(format!("bad spec: {e}")))?;
        spec.validate()?;

        let mut layers = Vec::with_capacity(spec.layer_count());
        let mut norms = Vec::with_capacity(spec.layer_count());
        for (k, pair) in spec.layer_units.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let (wshape, wdata) = c.f32_tensor(&format!("dense{k}.weight"))?;
            if wshape != [fan_out, fan_in] {
                return Err(NnError::BadCheckpoint(format!(
                    "dense{k}.weight shape {wshape:?}, expected [{fan_out}, {fan_in}]"
                )));
            }
            let weight = Array2::from_shape_vec((fan_out, fan_in), wdata.to_vec()).unwrap();
            let (_, bdata) = c.f32_tensor(&format!("dense{k}.bias"))?;
            if bdata.len() != fan_out {
                return Err(NnError::BadCheckpoint(format!("dense{k}.bias length")));
            }
            layers.push(Dense { weight, bias: Array1::from_vec(bdata.to_vec()) });

            let has_bn = c.tensor(&format!("bn{k}.gamma")).is_ok();
            if has_bn {
                let read = |name: &str| -> Result<Array1<f32>, NnError> {
                    let (_, data) = c.f32_tensor(&format!("bn{k}.{name}"))?;
                    if data.len() != fan_out {
                        return Err(NnError::BadCheckpoint(format!("bn{k}.{name} length")));
                    }
                    Ok(Array1::from_vec(data.to_vec()))
                };
                norms.push(Some(BatchNorm {
                    gamma: read("gamma")?,
                    beta: read("beta")?,
                    running_mean: read("running_mean")?,
                    running_var: read("running_var")?,
                }));
            } else {
                norms.push(None);
            }
        }
        if norms.last().map(|n| n.is_some()).unwrap_or(false) {
            return Err(NnError::BadCheckpoint("norm present on output layer".to_string()));
        }
        Ok(Self { spec, layers, norms })
    }

    pub fn save(&self, path: &std::path::Path, provenance: Provenance) -> Result<(), NnError> {
        Ok(self.to_container(provenance, serde_json::Value::Null).write_file(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, NnError> {
        Self::from_container(&Container::read_file(path)?)
    }
}

impl<F: NdFloat> Mlp<F> {
    pub fn input_width(&self) -> usize {
        self.spec.input_width()
    }

    pub(crate) fn is_folded(&self) -> bool {
        self.norms.iter().all(|n| n.is_none())
    }

    /// Parameter slices in canonical order: per layer weight, bias, then
    /// gamma and beta when present. Matches `Grads::flat_slices`.
    pub(crate) fn param_slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        for (dense, norm) in self.layers.iter_mut().zip(self.norms.iter_mut()) {
            let Dense { weight, bias } = dense;
            out.push(weight.as_slice_mut().expect("contiguous"));
            out.push(bias.as_slice_mut().expect("contiguous"));
            if let Some(BatchNorm { gamma, beta, .. }) = norm.as_mut() {
                out.push(gamma.as_slice_mut().expect("contiguous"));
                out.push(beta.as_slice_mut().expect("contiguous"));
            }
        }
        out
    }
}

pub const KIND_FLOAT: &str = "mlp-float";

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn detector_spec_param_count() {
        // Oracle: sum of out*in + out over consecutive layer pairs.
        let units = DETECTOR_UNITS;
        let expect: usize = units.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        assert_eq!(expect, 53_761);
        assert_eq!(ModelSpec::default().dense_param_count(), expect);
        // Including batch-norm gamma/beta over the four hidden layers.
        assert_eq!(ModelSpec::default().param_count(), expect + 2 * (256 + 128 + 64 + 32));
    }

    #[test]
    fn init_is_deterministic() {
        let a = MlpModel::init(ModelSpec::default(), 9).unwrap();
        let b = MlpModel::init(ModelSpec::default(), 9).unwrap();
        assert_eq!(a, b);
        let c = MlpModel::init(ModelSpec::default(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_bad_output_width() {
        let spec = ModelSpec::with_units(vec![40, 16, 2]);
        assert_eq!(MlpModel::init(spec, 0).unwrap_err(), SpecError::OutputNotOne(2));
    }

    #[test]
    fn zero_model_outputs_half() {
        let mut m = MlpModel::init(ModelSpec::with_units(vec![4, 3, 1]), 0).unwrap();
        for dense in &mut m.layers {
            dense.weight.fill(0.0);
            dense.bias.fill(0.0);
        }
        let p = m.predict(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn hand_computed_toy_forward() {
        // One hidden unit, no batch norm:
        //   h = relu(0.5*x0 - 0.25*x1 + 0.1), out = sigmoid(2h - 1)
        // x = [2, 4] -> h = relu(1 - 1 + 0.1) = 0.1 -> sigmoid(-0.8)
        let mut spec = ModelSpec::with_units(vec![2, 1, 1]);
        spec.batchnorm = false;
        spec.dropout_rate = 0.0;
        let mut m = MlpModel::init(spec, 0).unwrap();
        m.layers[0].weight = array![[0.5, -0.25]];
        m.layers[0].bias = array![0.1];
        m.layers[1].weight = array![[2.0]];
        m.layers[1].bias = array![-1.0];
        let p = m.predict(&[2.0, 4.0]).unwrap();
        let expect = 1.0 / (1.0 + (0.8f64).exp());
        assert!((p - expect).abs() < 1e-6, "{p} vs {expect}");
    }

    #[test]
    fn infer_is_deterministic_train_uses_seed() {
        let m = MlpModel::init(ModelSpec::with_units(vec![10, 8, 1]), 3).unwrap();
        let x: Vec<f32> = (0..10).map(|i| i as f32).collect();
        assert_eq!(m.predict(&x).unwrap(), m.predict(&x).unwrap());
        let a = m.forward(&x, Mode::Train, 1).unwrap();
        let b = m.forward(&x, Mode::Train, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = MlpModel::init(ModelSpec::default(), 0).unwrap();
        assert!(matches!(
            m.predict(&[0.0; 10]),
            Err(NnError::WidthMismatch { expected: 40, found: 10 })
        ));
    }

    #[test]
    fn fold_identity_bn_is_exact() {
        let mut m = MlpModel::init(ModelSpec::with_units(vec![4, 3, 1]), 1).unwrap();
        // Identity normalization with eps forced to zero.
        m.spec.bn_epsilon = 0.0;
        let folded = m.fold_batchnorm();
        assert_eq!(folded.layers[0].weight, m.layers[0].weight);
        assert_eq!(folded.layers[0].bias, m.layers[0].bias);
        assert!(folded.is_folded());
    }

    #[test]
    fn fold_gamma_two_doubles_weights() {
        let mut m = MlpModel::init(ModelSpec::with_units(vec![4, 3, 1]), 1).unwrap();
        m.spec.bn_epsilon = 0.0;
        m.norms[0].as_mut().unwrap().gamma.fill(2.0);
        let folded = m.fold_batchnorm();
        let doubled = m.layers[0].weight.mapv(|w| 2.0 * w);
        assert_eq!(folded.layers[0].weight, doubled);
    }

    #[test]
    fn fold_preserves_inference_outputs() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let mut spec = ModelSpec::with_units(vec![8, 6, 4, 1]);
        spec.dropout_rate = 0.0;
        let mut m = MlpModel::init(spec, 5).unwrap();
        // Non-trivial running statistics.
        for bn in m.norms.iter_mut().flatten() {
            bn.running_mean.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
            bn.running_var.mapv_inplace(|_| rng.gen_range(0.1..2.0));
            bn.gamma.mapv_inplace(|_| rng.gen_range(0.5..1.5));
            bn.beta.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        let folded = m.fold_batchnorm();
        for _ in 0..200 {
            let x: Vec<f32> = (0..8).map(|_| rng.gen_range(-128.0..127.0)).collect();
            let a = m.predict(&x).unwrap();
            let b = folded.predict(&x).unwrap();
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn checkpoint_round_trips() {
        let m = MlpModel::init(ModelSpec::with_units(vec![10, 8, 4, 1]), 21).unwrap();
        let c = m.to_container(Provenance::tool(), serde_json::json!({"epoch": 3}));
        let bytes = c.to_bytes().unwrap();
        let back = MlpModel::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn content_hash_tracks_parameters() {
        let a = MlpModel::init(ModelSpec::with_units(vec![4, 3, 1]), 0).unwrap();
        let mut b = a.clone();
        assert_eq!(a.content_sha256(), b.content_sha256());
        b.layers[0].bias[0] += 1.0;
        assert_ne!(a.content_sha256(), b.content_sha256());
    }
}
