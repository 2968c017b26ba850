//! Generic forward/backward core shared by f32 training and the f64
//! gradient-check path, including optional fake quantization for the
//! quantization-aware fine-tuning pass.

use ndarray::{Array1, Array2, Axis, NdFloat};
use rand::Rng;

use super::{Mlp, Mode};

/// Fixed power-of-two fake-quantization grid: quantize-dequantize applied
/// to weights and hidden activations during fine-tuning. `weight_f[k]` is
/// layer `k`'s weight fraction bits; `act_f[k]` the fraction bits of layer
/// `k`'s input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FakeQuant {
    pub weight_f: Vec<i32>,
    pub act_f: Vec<i32>,
}

/// Round half to even, matching the integer inference kernels.
pub(crate) fn round_half_even<F: NdFloat>(x: F) -> F {
    let floor = x.floor();
    let frac = x - floor;
    let half = F::from(0.5).unwrap();
    if frac > half {
        floor + F::one()
    } else if frac < half {
        floor
    } else {
        let half_floor = floor / F::from(2.0).unwrap();
        if half_floor == half_floor.floor() {
            floor
        } else {
            floor + F::one()
        }
    }
}

/// Quantize-dequantize at `f` fraction bits with int8 saturation. Returns
/// the snapped values and the straight-through mask (1 inside the
/// representable range, 0 where saturated).
pub(crate) fn qdq_array<F: NdFloat>(a: &Array2<F>, f: i32) -> (Array2<F>, Array2<F>) {
    let scale = F::from(2f64.powi(f)).unwrap();
    let inv = F::from(2f64.powi(-f)).unwrap();
    let lo = F::from(-128.0).unwrap();
    let hi = F::from(127.0).unwrap();
    let mut mask = Array2::zeros(a.raw_dim());
    let mut out = a.clone();
    ndarray::Zip::from(&mut out).and(&mut mask).for_each(|v, m| {
        let q = round_half_even(*v * scale);
        *m = if q >= lo && q <= hi { F::one() } else { F::zero() };
        *v = q.max(lo).min(hi) * inv;
    });
    (out, mask)
}

pub(crate) struct BnCache<F> {
    pub zhat: Array2<F>,
    pub inv_std: Array1<F>,
    pub batch_mean: Array1<F>,
    pub batch_var: Array1<F>,
    pub train_mode: bool,
}

pub(crate) struct LayerCache<F> {
    /// Input to this dense layer.
    pub x: Array2<F>,
    pub bn: Option<BnCache<F>>,
    /// Post-norm pre-ReLU activations (hidden layers).
    pub relu_in: Option<Array2<F>>,
    /// Dropout mask holding 0 or 1/keep.
    pub dropout: Option<Array2<F>>,
    /// Straight-through mask of the activation quantize-dequantize.
    pub act_ste: Option<Array2<F>>,
    /// Fake-quantized weights used in the forward pass.
    pub w_eff: Option<Array2<F>>,
    pub w_ste: Option<Array2<F>>,
}

pub(crate) struct ForwardCache<F> {
    pub layers: Vec<LayerCache<F>>,
    pub probs: Array2<F>,
}

pub(crate) fn sigmoid<F: NdFloat>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// Per-hidden-layer inverted dropout masks holding 0 or 1/keep.
pub(crate) fn dropout_masks<F: NdFloat, R: Rng>(
    model: &Mlp<F>,
    batch: usize,
    rate: f32,
    rng: &mut R,
) -> Vec<Array2<F>> {
    let keep = 1.0 - rate as f64;
    let inv_keep = F::from(1.0 / keep).unwrap();
    (0..model.layers.len() - 1)
        .map(|k| {
            let units = model.layers[k].weight.nrows();
            Array2::from_shape_fn((batch, units), |_| {
                if rng.gen_bool(keep) {
                    inv_keep
                } else {
                    F::zero()
                }
            })
        })
        .collect()
}

/// Runs the network on a batch. Hidden layers apply dense, optional batch
/// norm, ReLU, optional dropout and optional fake quantization; the final
/// dense layer feeds a sigmoid.
pub(crate) fn forward_batch<F: NdFloat>(
    model: &Mlp<F>,
    x: &Array2<F>,
    mode: Mode,
    dropout_masks: Option<&[Array2<F>]>,
    fq: Option<&FakeQuant>,
) -> ForwardCache<F> {
    assert_eq!(x.ncols(), model.spec.input_width(), "input width");
    let layer_count = model.layers.len();
    let eps = F::from(model.spec.bn_epsilon as f64).unwrap();

    let mut layers = Vec::with_capacity(layer_count);
    let mut a = x.clone();
    let mut probs = Array2::zeros((x.nrows(), 1));

    for (k, dense) in model.layers.iter().enumerate() {
        let last = k + 1 == layer_count;
        let input = a.clone();

        let (w_eff, w_ste) = match fq {
            Some(fq) => {
                let (w, m) = qdq_array(&dense.weight, fq.weight_f[k]);
                (Some(w), Some(m))
            }
            None => (None, None),
        };
        let mut z = match &w_eff {
            Some(w) => a.dot(&w.t()),
            None => a.dot(&dense.weight.t()),
        };
        z += &dense.bias;

        if last {
            probs = z.mapv(sigmoid);
            layers.push(LayerCache {
                x: input,
                bn: None,
                relu_in: None,
                dropout: None,
                act_ste: None,
                w_eff,
                w_ste,
            });
            break;
        }

        let (y, bn_cache) = match &model.norms[k] {
            None => (z, None),
            Some(bn) => {
                let (mean, var, train_mode) = match mode {
                    Mode::Train => {
                        let inv_b = F::one() / F::from(z.nrows()).unwrap();
                        let mean = z.sum_axis(Axis(0)).mapv(|v| v * inv_b);
                        let centered = &z - &mean;
                        let var =
                            centered.mapv(|v| v * v).sum_axis(Axis(0)).mapv(|v| v * inv_b);
                        (mean, var, true)
                    }
                    Mode::Infer => (bn.running_mean.clone(), bn.running_var.clone(), false),
                };
                let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
                let zhat = (&z - &mean) * &inv_std;
                let y = &zhat * &bn.gamma + &bn.beta;
                (
                    y,
                    Some(BnCache { zhat, inv_std, batch_mean: mean, batch_var: var, train_mode }),
                )
            }
        };

        let mut act = y.mapv(|v| v.max(F::zero()));
        let dropout = match (mode, dropout_masks) {
            (Mode::Train, Some(masks)) => {
                act = &act * &masks[k];
                Some(masks[k].clone())
            }
            _ => None,
        };
        let act_ste = match fq {
            Some(fq) => {
                let (snapped, mask) = qdq_array(&act, fq.act_f[k + 1]);
                act = snapped;
                Some(mask)
            }
            None => None,
        };

        layers.push(LayerCache {
            x: input,
            bn: bn_cache,
            relu_in: Some(y),
            dropout,
            act_ste,
            w_eff,
            w_ste,
        });
        a = act;
    }

    ForwardCache { layers, probs }
}

/// Mean binary cross-entropy with probabilities clamped away from {0,1}.
pub(crate) fn bce_loss<F: NdFloat>(probs: &Array2<F>, labels: &Array1<F>) -> F {
    let eps = F::from(1e-7).unwrap();
    let one = F::one();
    let n = F::from(labels.len()).unwrap();
    let mut total = F::zero();
    for (p, &y) in probs.column(0).iter().zip(labels.iter()) {
        let p = p.max(eps).min(one - eps);
        total = total - (y * p.ln() + (one - y) * (one - p).ln());
    }
    total / n
}

pub(crate) struct Grads<F> {
    pub w: Vec<Array2<F>>,
    pub b: Vec<Array1<F>>,
    pub gamma: Vec<Option<Array1<F>>>,
    pub beta: Vec<Option<Array1<F>>>,
}

impl<F: NdFloat> Grads<F> {
    pub(crate) fn zeros_like(model: &Mlp<F>) -> Self {
        Self {
            w: model.layers.iter().map(|d| Array2::zeros(d.weight.raw_dim())).collect(),
            b: model.layers.iter().map(|d| Array1::zeros(d.bias.raw_dim())).collect(),
            gamma: model
                .norms
                .iter()
                .map(|n| n.as_ref().map(|bn| Array1::zeros(bn.gamma.raw_dim())))
                .collect(),
            beta: model
                .norms
                .iter()
                .map(|n| n.as_ref().map(|bn| Array1::zeros(bn.beta.raw_dim())))
                .collect(),
        }
    }

    /// Gradient slices in the canonical parameter order of
    /// `Mlp::param_slices_mut`.
    pub(crate) fn flat_slices(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        for k in 0..self.w.len() {
            out.push(self.w[k].as_slice().expect("contiguous"));
            out.push(self.b[k].as_slice().expect("contiguous"));
            if let Some(g) = &self.gamma[k] {
                out.push(g.as_slice().expect("contiguous"));
                out.push(self.beta[k].as_ref().unwrap().as_slice().expect("contiguous"));
            }
        }
        out
    }
}

/// Backpropagates the mean-BCE loss through the cached forward pass.
pub(crate) fn backward_batch<F: NdFloat>(
    model: &Mlp<F>,
    cache: &ForwardCache<F>,
    labels: &Array1<F>,
) -> Grads<F> {
    let layer_count = model.layers.len();
    let batch = labels.len();
    let inv_n = F::one() / F::from(batch).unwrap();

    let mut grads = Grads::zeros_like(model);

    // Fused sigmoid + BCE gradient: dL/dz = (p - y) / B.
    let mut dz = cache.probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        dz[[i, 0]] = (dz[[i, 0]] - y) * inv_n;
    }

    for k in (0..layer_count).rev() {
        let lc = &cache.layers[k];
        grads.w[k] = dz.t().dot(&lc.x);
        grads.b[k] = dz.sum_axis(Axis(0));
        if let Some(w_ste) = &lc.w_ste {
            grads.w[k] = &grads.w[k] * w_ste;
        }

        if k == 0 {
            break;
        }

        let w_used = lc.w_eff.as_ref().unwrap_or(&model.layers[k].weight);
        let mut da = dz.dot(w_used);

        let prev = &cache.layers[k - 1];
        if let Some(ste) = &prev.act_ste {
            da = &da * ste;
        }
        if let Some(mask) = &prev.dropout {
            da = &da * mask;
        }
        let relu_in = prev.relu_in.as_ref().expect("hidden layer cache");
        ndarray::Zip::from(&mut da).and(relu_in).for_each(|d, &y| {
            if y <= F::zero() {
                *d = F::zero();
            }
        });

        dz = match &prev.bn {
            None => da,
            Some(bn_cache) => {
                let bn = model.norms[k - 1].as_ref().expect("bn params");
                let dgamma = (&da * &bn_cache.zhat).sum_axis(Axis(0));
                let dbeta = da.sum_axis(Axis(0));
                let dzhat = &da * &bn.gamma;
                let dz_prev = if bn_cache.train_mode {
                    let n = F::from(batch).unwrap();
                    let sum_dzhat = dzhat.sum_axis(Axis(0));
                    let sum_dzhat_zhat = (&dzhat * &bn_cache.zhat).sum_axis(Axis(0));
                    let scaled = dzhat.mapv(|v| v * n) - &sum_dzhat
                        - &bn_cache.zhat * &sum_dzhat_zhat;
                    scaled * &bn_cache.inv_std.mapv(|v| v * inv_n)
                } else {
                    &dzhat * &bn_cache.inv_std
                };
                grads.gamma[k - 1] = Some(dgamma);
                grads.beta[k - 1] = Some(dbeta);
                dz_prev
            }
        };
    }

    grads
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_half_even_ties() {
        assert_eq!(round_half_even(0.5f64), 0.0);
        assert_eq!(round_half_even(1.5f64), 2.0);
        assert_eq!(round_half_even(2.5f64), 2.0);
        assert_eq!(round_half_even(-0.5f64), 0.0);
        assert_eq!(round_half_even(-1.5f64), -2.0);
        assert_eq!(round_half_even(0.49f64), 0.0);
        assert_eq!(round_half_even(0.51f64), 1.0);
        assert_eq!(round_half_even(-127.5f64), -128.0);
    }

    #[test]
    fn qdq_snaps_to_grid_and_masks_saturation() {
        let a = ndarray::array![[0.5f64, 1.5, 0.00390625, -3.0]];
        let (q, mask) = qdq_array(&a, 7);
        assert_eq!(q[[0, 0]], 0.5); // 64/128
        assert_eq!(q[[0, 1]], 127.0 / 128.0); // saturated
        assert_eq!(q[[0, 2]], 0.0); // ties to even
        assert_eq!(q[[0, 3]], -1.0); // saturated at -128/128
        assert_eq!(mask, ndarray::array![[1.0, 0.0, 1.0, 0.0]]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert!(sigmoid(-1000.0f64) >= 0.0);
        assert!(sigmoid(1000.0f64) <= 1.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let probs = ndarray::array![[0.5f64], [0.5]];
        let labels = ndarray::array![1.0f64, 0.0];
        let loss = bce_loss(&probs, &labels);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
