//! Finite-difference verification of the analytic gradients. Both sides
//! run in f64 through the same generic math as training; dropout is off so
//! the loss is a deterministic function of the parameters.

use ndarray::{Array1, Array2};

use super::math;
use super::{Mlp, MlpModel, Mode, NnError};

const FD_STEP: f64 = 1e-4;

fn batch_loss(model: &Mlp<f64>, x: &Array2<f64>, y: &Array1<f64>) -> f64 {
    let cache = math::forward_batch(model, x, Mode::Train, None, None);
    math::bce_loss(&cache.probs, y)
}

/// Compares analytic BCE gradients against central finite differences over
/// every parameter and returns the largest relative error. Intended for
/// small models; cost is two forward passes per parameter.
pub fn gradient_check(
    model: &MlpModel,
    features: &Array2<f32>,
    labels: &[f32],
) -> Result<f64, NnError> {
    if features.ncols() != model.spec.input_width() {
        return Err(NnError::WidthMismatch {
            expected: model.spec.input_width(),
            found: features.ncols(),
        });
    }
    let mut m = model.to_f64();
    let x = features.mapv(|v| v as f64);
    let y = Array1::from_iter(labels.iter().map(|&v| v as f64));

    let cache = math::forward_batch(&m, &x, Mode::Train, None, None);
    let grads = math::backward_batch(&m, &cache, &y);
    let analytic: Vec<Vec<f64>> =
        grads.flat_slices().into_iter().map(|s| s.to_vec()).collect();

    let mut max_err = 0.0f64;
    let tensor_count = analytic.len();
    for t in 0..tensor_count {
        for i in 0..analytic[t].len() {
            let orig = m.param_slices_mut()[t][i];
            m.param_slices_mut()[t][i] = orig + FD_STEP;
            let plus = batch_loss(&m, &x, &y);
            m.param_slices_mut()[t][i] = orig - FD_STEP;
            let minus = batch_loss(&m, &x, &y);
            m.param_slices_mut()[t][i] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[t][i];
            let denom = a.abs().max(numeric.abs());
            let err = if denom < 1e-6 { (a - numeric).abs() } else { (a - numeric).abs() / denom };
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ModelSpec, TrainConfig};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(
        rng: &mut ChaCha8Rng,
        n: usize,
        width: usize,
    ) -> (Array2<f32>, Vec<f32>) {
        let x = Array2::from_shape_fn((n, width), |_| rng.gen_range(-2.0..2.0));
        let y: Vec<f32> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        (x, y)
    }

    #[test]
    fn random_small_models_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for trial in 0..10 {
            // Dense + BN (train mode) + sigmoid/BCE, under 500 parameters.
            let mut spec = ModelSpec::with_units(vec![6, 10, 6, 1]);
            spec.dropout_rate = 0.0;
            assert!(spec.param_count() <= 500);
            let model = MlpModel::init(spec, 200 + trial).unwrap();
            let (x, y) = random_batch(&mut rng, 8, 6);
            let err = gradient_check(&model, &x, &y).unwrap();
            assert!(err < 1e-4, "trial {trial}: relative error {err}");
        }
    }

    #[test]
    fn bn_free_model_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(300);
        let mut spec = ModelSpec::with_units(vec![5, 8, 1]);
        spec.batchnorm = false;
        spec.dropout_rate = 0.0;
        let model = MlpModel::init(spec, 42).unwrap();
        let (x, y) = random_batch(&mut rng, 12, 5);
        let err = gradient_check(&model, &x, &y).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn zero_model_output_bias_gradient_is_mean_residual() {
        // With all weights zero, p = 0.5 everywhere, so the output bias
        // gradient collapses to mean(p - y).
        let mut spec = ModelSpec::with_units(vec![3, 4, 1]);
        spec.dropout_rate = 0.0;
        let mut model = MlpModel::init(spec, 0).unwrap();
        for dense in &mut model.layers {
            dense.weight.fill(0.0);
            dense.bias.fill(0.0);
        }
        let m = model.to_f64();
        let x = array![[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0], [0.0, 1.0, -2.0], [2.0, -1.0, 1.0]];
        let y = array![1.0, 0.0, 1.0, 0.0];
        let cache = crate::nn::math::forward_batch(&m, &x, Mode::Train, None, None);
        let grads = crate::nn::math::backward_batch(&m, &cache, &y);
        let out_bias_grad = grads.b.last().unwrap()[0];
        // Balanced batch at p = 0.5: mean residual is exactly zero.
        assert!(out_bias_grad.abs() < 1e-12, "{out_bias_grad}");
    }

    #[test]
    fn single_parameter_logistic_regression_matches_closed_form() {
        // p = sigmoid(w x); dL/dw = mean((p - y) x).
        let mut spec = ModelSpec::with_units(vec![1, 1]);
        spec.batchnorm = false;
        spec.dropout_rate = 0.0;
        let mut model = MlpModel::init(spec, 0).unwrap();
        model.layers[0].weight[[0, 0]] = 0.7;
        model.layers[0].bias[0] = 0.0;

        let m = model.to_f64();
        let x = array![[1.5], [-2.0], [0.5]];
        let y = array![1.0, 0.0, 1.0];
        let cache = crate::nn::math::forward_batch(&m, &x, Mode::Train, None, None);
        let grads = crate::nn::math::backward_batch(&m, &cache, &y);

        let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
        let w = m.layers[0].weight[[0, 0]];
        let expect: f64 = x
            .column(0)
            .iter()
            .zip(y.iter())
            .map(|(&xi, &yi)| (sigmoid(w * xi) - yi) * xi)
            .sum::<f64>()
            / 3.0;
        assert!((grads.w[0][[0, 0]] - expect).abs() < 1e-12);

        let err = gradient_check(&model, &x.mapv(|v| v as f32), &[1.0, 0.0, 1.0]).unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn gradients_stay_correct_after_some_training() {
        // Guards the optimizer wiring: check gradients at a non-initial
        // point reached by a few Adam steps.
        let mut rng = ChaCha8Rng::seed_from_u64(500);
        let mut spec = ModelSpec::with_units(vec![4, 6, 1]);
        spec.dropout_rate = 0.0;
        let model = MlpModel::init(spec, 9).unwrap();
        let (x, y) = random_batch(&mut rng, 32, 4);
        let windows: Vec<crate::window::WindowFeature> = (0..32)
            .map(|i| crate::window::WindowFeature {
                values: (0..4).map(|j| (x[[i, j]] * 20.0) as i8).collect(),
                label: if y[i] >= 0.5 {
                    crate::canlog::Label::Attack
                } else {
                    crate::canlog::Label::Normal
                },
                newest_timestamp: i as f64,
            })
            .collect();
        let data = crate::nn::Dataset::from_windows(&windows);
        let cfg = TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::default() };
        let (trained, _) = crate::nn::train(model, &data, &data, &cfg).unwrap();
        let err = gradient_check(&trained, &data.features, data.labels.as_slice().unwrap())
            .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
