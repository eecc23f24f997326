//! Central finite-difference verification of the hand-written backward passes.
//!
//! Checks run in `f64`. The scalar probed is `L = Σ r ⊙ y` for a fixed random
//! `r`, so every output element contributes to every gradient.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::{Layer, LayerSpec, Mode};
use crate::loss::softmax_cross_entropy;
use crate::tensor::{Dims, Tensor};
use crate::Result;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Where the worst error occurred, e.g. `input[17]` or `layer.weight[3]`.
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if self.worst.is_empty() || err > self.max_relative_error {
            self.max_relative_error = err;
            self.worst = label();
        }
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `len` distinct values with magnitudes in `[0.1, 2.0]` and random signs,
/// shuffled. Neighbouring magnitudes are `1.9 / len` apart, so as long as
/// `len < 950` no finite-difference probe can reorder two values or cross
/// the ReLU kink.
pub fn sample_away_from_kink(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut mags: Vec<f64> = (0..len).map(|i| 0.1 + 1.9 * (i as f64 + 0.5) / len as f64).collect();
    mags.shuffle(rng);
    mags.into_iter()
        .map(|m| if rng.gen_bool(0.5) { m } else { -m })
        .collect()
}

fn probe_loss(layer: &mut Layer<f64>, x: &Tensor<f64>, r: &[f64]) -> Result<f64> {
    let y = layer.forward(x, Mode::Train)?;
    Ok(y.data().iter().zip(r).map(|(a, b)| a * b).sum())
}

/// Compares analytic and numeric gradients of one freshly built layer with
/// respect to its input and all of its parameters (train mode).
pub fn grad_check(spec: &LayerSpec, input_shape: Dims, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer: Layer<f64> = spec.build("probe", &mut rng);
    for p in layer.params_mut() {
        let is_gamma = p.name.ends_with(".gamma");
        for v in p.value.data_mut() {
            *v = if is_gamma {
                rng.gen_range(0.5..1.5)
            } else {
                rng.gen_range(-1.0..1.0)
            };
        }
    }
    let len: usize = input_shape.iter().product();
    let x = Tensor::new(input_shape, sample_away_from_kink(len, &mut rng))?;
    let out_dims = spec.output_dims(input_shape)?;
    let r: Vec<f64> = (0..out_dims.iter().product::<usize>())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();

    let y = layer.forward(&x, Mode::Train)?;
    let dx = layer.backward(&Tensor::new(y.dims(), r.clone())?)?;
    let analytic_params: Vec<(String, Vec<f64>)> = layer
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.grad.data().to_vec()))
        .collect();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for i in 0..len {
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let lp = probe_loss(&mut layer, &xp, &r)?;
        xp.data_mut()[i] -= 2.0 * FD_STEP;
        let lm = probe_loss(&mut layer, &xp, &r)?;
        report.record(|| format!("input[{i}]"), dx.data()[i], (lp - lm) / (2.0 * FD_STEP));
    }
    for (pi, (name, analytic)) in analytic_params.iter().enumerate() {
        for (i, &a) in analytic.iter().enumerate() {
            let original = layer.params()[pi].value.data()[i];
            layer.params_mut()[pi].value.data_mut()[i] = original + FD_STEP;
            let lp = probe_loss(&mut layer, &x, &r)?;
            layer.params_mut()[pi].value.data_mut()[i] = original - FD_STEP;
            let lm = probe_loss(&mut layer, &x, &r)?;
            layer.params_mut()[pi].value.data_mut()[i] = original;
            report.record(|| format!("{name}[{i}]"), a, (lp - lm) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}

/// Gradient check of mean softmax cross-entropy with respect to the logits.
pub fn grad_check_cross_entropy(batch: usize, classes: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::from_fn([batch, classes, 1, 1], |_, _, _, _| rng.gen_range(-3.0..3.0));
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
    let grad = softmax_cross_entropy(&logits, &labels)?.grad();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for i in 0..logits.len() {
        let mut lp = logits.clone();
        lp.data_mut()[i] += FD_STEP;
        let mut lm = logits.clone();
        lm.data_mut()[i] -= FD_STEP;
        let numeric = (softmax_cross_entropy(&lp, &labels)?.loss - softmax_cross_entropy(&lm, &labels)?.loss) / (2.0 * FD_STEP);
        report.record(|| format!("logits[{i}]"), grad.data()[i], numeric);
    }
    Ok(report)
}
