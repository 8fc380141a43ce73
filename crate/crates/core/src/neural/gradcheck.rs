//! Central finite-difference gradient checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{ForwardCtx, Layer};
use super::loss::softmax_cce;
use super::tensor::Tensor;
use super::NeuralError;

pub const STEP: f64 = 1e-5;

/// Below this norm both gradients are finite-difference noise. The key bias
/// in attention is one such case: softmax ignores a per-row shift, so its
/// true gradient is exactly zero.
pub const ZERO_NORM: f64 = 1e-8;

/// `‖a − n‖ / (‖a‖ + ‖n‖)`, zero when both norms are below [`ZERO_NORM`].
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if na < ZERO_NORM && nn < ZERO_NORM {
        0.0
    } else {
        diff / (na + nn)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    /// `("input", err)` then one entry per trainable parameter.
    pub errors: Vec<(String, f64)>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Checks a layer against the scalar probe loss `Σ r ⊙ layer(x)` for a
/// random fixed `r`. Every input entry and every trainable parameter entry
/// is perturbed.
pub fn check_layer(layer: &mut dyn Layer, x: &Tensor, training: bool, seed: u64) -> Result<GradCheck, NeuralError> {
    let mut rng = crate::rng::stream(seed, "gradcheck/probe");
    let run = |layer: &mut dyn Layer, x: &Tensor| -> Result<Tensor, NeuralError> {
        // A fresh stream per evaluation keeps stochastic layers repeatable.
        let mut r: ChaCha8Rng = crate::rng::stream(seed, "gradcheck/forward");
        layer.forward(x, &mut ForwardCtx { training, rng: &mut r })
    };
    let y = run(layer, x)?;
    let probe = Tensor::from_fn(y.shape(), |_| rng.random_range(-1.0..1.0));
    for p in layer.params_mut() {
        p.grad.fill(0.0);
    }
    let dx = layer.backward(&probe, true)?.expect("input gradient requested");
    let analytic_params: Vec<Vec<f64>> = layer.params().iter().map(|p| p.grad.data().to_vec()).collect();

    let loss = |layer: &mut dyn Layer, x: &Tensor| -> Result<f64, NeuralError> {
        let y = run(layer, x)?;
        layer.backward(&probe, false)?;
        Ok(y.dot(&probe))
    };

    let mut errors = Vec::new();
    let mut numeric = vec![0.0; x.len()];
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + STEP;
        let up = loss(layer, &xp)?;
        xp.data_mut()[i] = orig - STEP;
        let down = loss(layer, &xp)?;
        xp.data_mut()[i] = orig;
        numeric[i] = (up - down) / (2.0 * STEP);
    }
    errors.push(("input".to_string(), relative_error(dx.data(), &numeric)));

    let n_params = layer.params().len();
    for pi in 0..n_params {
        let (name, trainable, len) = {
            let p = &layer.params()[pi];
            (p.name.clone(), p.trainable, p.value.len())
        };
        let analytic = &analytic_params[pi];
        if !trainable {
            continue;
        }
        let mut numeric = vec![0.0; len];
        for i in 0..len {
            let orig = layer.params()[pi].value.data()[i];
            layer.params_mut()[pi].value.data_mut()[i] = orig + STEP;
            let up = loss(layer, x)?;
            layer.params_mut()[pi].value.data_mut()[i] = orig - STEP;
            let down = loss(layer, x)?;
            layer.params_mut()[pi].value.data_mut()[i] = orig;
            numeric[i] = (up - down) / (2.0 * STEP);
        }
        errors.push((name, relative_error(analytic, &numeric)));
    }
    Ok(GradCheck { errors })
}

/// Checks the fused softmax + cross-entropy gradient with respect to the
/// logits.
pub fn check_softmax_cce(logits: &Tensor, labels: &[usize]) -> Result<f64, NeuralError> {
    let analytic = softmax_cce(logits, labels)?.grad;
    let mut z = logits.clone();
    let mut numeric = vec![0.0; z.len()];
    for i in 0..z.len() {
        let orig = z.data()[i];
        z.data_mut()[i] = orig + STEP;
        let up = softmax_cce(&z, labels)?.loss;
        z.data_mut()[i] = orig - STEP;
        let down = softmax_cce(&z, labels)?.loss;
        z.data_mut()[i] = orig;
        numeric[i] = (up - down) / (2.0 * STEP);
    }
    Ok(relative_error(analytic.data(), &numeric))
}

/// Layer families covered by [`random_case`].
pub const LAYER_KINDS: [&str; 9] =
    ["dense", "conv", "depthwise", "separable", "batch_norm", "elu", "pooling", "attention", "softmax_cce"];

/// Builds a randomly shaped small instance of `kind` and runs the check.
/// Returns the worst relative error.
pub fn random_case(kind: &str, seed: u64) -> Result<f64, NeuralError> {
    use super::attention::MultiHeadAttention;
    use super::layers::*;

    let mut rng = crate::rng::stream(seed, &format!("gradcheck/{kind}"));
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (b, c, h, w) = (dim(1, 3), dim(1, 3), dim(1, 4), dim(3, 7));
    let (kh, kw) = (dim(1, h), dim(1, w.min(4)));
    let (units, mult) = (dim(1, 5), dim(1, 2));
    let heads = dim(1, 3);
    let (l, dh) = (dim(1, 4), dim(1, 3));
    let mut init = crate::rng::stream(seed, "gradcheck/init");
    let mut sample = |shape: &[usize]| Tensor::from_fn(shape, |_| init.random_range(-1.5..1.5));
    let padding = if seed % 2 == 0 { Padding::Same } else { Padding::Valid };
    let mut wrng = crate::rng::stream(seed, "gradcheck/weights");

    if kind == "softmax_cce" {
        let logits = sample(&[b, 3]).map(|v| v * 3.0);
        let labels: Vec<usize> = (0..b).map(|i| (seed as usize + i) % 3).collect();
        return check_softmax_cce(&logits, &labels);
    }
    let (mut layer, x, training): (Box<dyn Layer>, Tensor, bool) = match kind {
        "dense" => (Box::new(Dense::new(c * w, units, &mut wrng)), sample(&[b, c * w]), true),
        "conv" => (
            Box::new(Conv2d::new([c, h, w], units, [kh, kw], 1, padding, true, &mut wrng)?),
            sample(&[b, c, h, w]),
            true,
        ),
        "depthwise" => (
            Box::new(Conv2d::new([c, h, w], c * mult, [kh, kw], c, padding, false, &mut wrng)?),
            sample(&[b, c, h, w]),
            true,
        ),
        "separable" => (
            Box::new(SeparableConv2d::new([c, h, w], units, [kh, kw], padding, true, &mut wrng)?),
            sample(&[b, c, h, w]),
            true,
        ),
        "batch_norm" => {
            // Batch statistics need more than one value per channel.
            let shape = [b + 1, c, h, w];
            let mut bn = BatchNorm::new(&shape[1..], 1e-5, 0.1)?;
            let g = sample(&[c]);
            for (p, v) in bn.params_mut().into_iter().zip([g.map(|v| v + 2.0), sample(&[c])]) {
                p.value = v;
            }
            (Box::new(bn), sample(&shape), seed % 4 != 3)
        }
        "elu" => {
            // Keep clear of the kink at zero so the difference quotient is smooth.
            let x = sample(&[b, c, h, w]).map(|v| if v.abs() < 0.01 { v + 0.05 } else { v });
            (Box::new(Elu::new(&[c, h, w], 1.0)), x, true)
        }
        "pooling" => (Box::new(AvgPool2d::new([c, h, w], [kh, kw])?), sample(&[b, c, h, w]), true),
        "attention" => {
            let d = heads * dh;
            (Box::new(MultiHeadAttention::new([l, d], heads, &mut wrng)?), sample(&[b, l, d]), true)
        }
        other => return Err(NeuralError::Config(format!("unknown layer kind {other}"))),
    };
    Ok(check_layer(layer.as_mut(), &x, training, seed)?.max_error())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_kind_passes_a_few_seeds() {
        for kind in LAYER_KINDS {
            for seed in 0..4 {
                let err = random_case(kind, seed).unwrap();
                assert!(err <= 1e-4, "{kind} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn twenty_seeds_per_kind() {
        for kind in LAYER_KINDS {
            let worst = (0..20).map(|s| random_case(kind, 100 + s).unwrap()).fold(0.0, f64::max);
            assert!(worst <= 1e-4, "{kind}: {worst}");
        }
    }

    #[test]
    fn relative_error_floors_tiny_norms() {
        assert_eq!(relative_error(&[1e-12], &[-1e-12]), 0.0);
        assert!((relative_error(&[1.0], &[0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cce_gradient_is_tight() {
        for seed in 0..10 {
            let mut rng = crate::rng::stream(seed, "cce");
            let z = Tensor::from_fn(&[4, 3], |_| rng.random_range(-3.0..3.0));
            assert!(check_softmax_cce(&z, &[0, 1, 2, 0]).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn dense_quadratic_probe() {
        // L = ½‖y‖², so dL/dW = xᵀ y and dL/dx = y Wᵀ.
        let mut rng = crate::rng::stream(1, "dq");
        let mut d = super::super::layers::Dense::new(3, 2, &mut rng);
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.3 - 0.5);
        let mut r = crate::rng::stream(0, "unused");
        let y = d.forward(&x, &mut ForwardCtx { training: true, rng: &mut r }).unwrap();
        let dx = d.backward(&y, true).unwrap().unwrap();
        let loss = |d: &mut super::super::layers::Dense, x: &Tensor| {
            let y = d.forward(x, &mut ForwardCtx { training: true, rng: &mut crate::rng::stream(0, "u") }).unwrap();
            d.backward(&y, false).unwrap();
            0.5 * y.dot(&y)
        };
        let mut numeric = vec![0.0; 6];
        let mut xp = x.clone();
        for i in 0..6 {
            let o = xp.data()[i];
            xp.data_mut()[i] = o + STEP;
            let up = loss(&mut d, &xp);
            xp.data_mut()[i] = o - STEP;
            let down = loss(&mut d, &xp);
            xp.data_mut()[i] = o;
            numeric[i] = (up - down) / (2.0 * STEP);
        }
        assert!(relative_error(dx.data(), &numeric) <= 1e-6);
    }

    #[test]
    fn zero_input_gives_bias_only_gradients() {
        use super::super::layers::Dense;
        let mut rng = crate::rng::stream(2, "zi");
        let mut d = Dense::new(4, 3, &mut rng);
        let x = Tensor::zeros(&[5, 4]);
        let mut r = crate::rng::stream(0, "u");
        let logits = d.forward(&x, &mut ForwardCtx { training: true, rng: &mut r }).unwrap();
        let out = softmax_cce(&logits, &[0, 1, 2, 0, 1]).unwrap();
        d.backward(&out.grad, false).unwrap();
        let ps = d.params();
        assert!(ps[0].grad.data().iter().all(|&g| g == 0.0));
        for k in 0..3 {
            let mean: f64 = out.grad.data().chunks(3).map(|r| r[k]).sum();
            assert!((ps[1].grad.data()[k] - mean).abs() < 1e-15);
        }
    }
}
