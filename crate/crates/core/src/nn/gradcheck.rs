//! Central-difference gradient verification.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::backprop::{classifier_gradients, dae_gradients, ClassifierGrads, LayerGrads};
use super::layers::{sigmoid_scalar, softmax, LayerParams, LogisticLayer};
use super::matrix::{matmul_nn, matmul_nt, Matrix};
use super::NeumaierSum;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates checked; every coordinate when the parameter vector is shorter.
    pub samples: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            samples: 200,
            tolerance: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter index where the maximum occurred.
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss` around `theta`.
pub fn grad_check(
    loss: impl Fn(&[f64]) -> f64,
    analytic: &[f64],
    theta: &[f64],
    opts: &GradCheckOptions,
) -> GradCheckReport {
    assert_eq!(analytic.len(), theta.len(), "gradient length");
    let indices: Vec<usize> = if theta.len() <= opts.samples {
        (0..theta.len()).collect()
    } else {
        let mut idx = sample(&mut rng::seeded(opts.seed), theta.len(), opts.samples).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut probe = theta.to_vec();
    let mut worst = (0.0f64, 0usize);
    for &i in &indices {
        let orig = probe[i];
        probe[i] = orig + opts.step;
        let up = loss(&probe);
        probe[i] = orig - opts.step;
        let down = loss(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * opts.step);
        let err = relative_error(analytic[i], numeric);
        if err > worst.0 || err.is_nan() {
            worst = (if err.is_nan() { f64::INFINITY } else { err }, i);
        }
    }
    GradCheckReport {
        max_relative_error: worst.0,
        worst_index: worst.1,
        checked: indices.len(),
        passed: worst.0 < opts.tolerance,
    }
}

pub fn flatten_layer(layer: &LayerParams) -> Vec<f64> {
    [layer.w.data(), &layer.b, &layer.c].concat()
}

pub fn unflatten_layer(theta: &[f64], n_inputs: usize, n_hidden: usize) -> LayerParams {
    let nw = n_inputs * n_hidden;
    LayerParams {
        w: Matrix::from_vec(n_hidden, n_inputs, theta[..nw].to_vec()).expect("sized"),
        b: theta[nw..nw + n_hidden].to_vec(),
        c: theta[nw + n_hidden..nw + n_hidden + n_inputs].to_vec(),
    }
}

pub fn flatten_layer_grads(g: &LayerGrads) -> Vec<f64> {
    [g.w.data(), &g.b, &g.c].concat()
}

/// `W₁, b₁, …, W_L, b_L, V, d`. Reconstruction biases are not part of the
/// supervised network.
pub fn flatten_classifier(layers: &[LayerParams], output: &LogisticLayer) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(l.w.data());
        out.extend_from_slice(&l.b);
    }
    out.extend_from_slice(output.v.data());
    out.extend_from_slice(&output.d);
    out
}

pub fn unflatten_classifier(
    theta: &[f64],
    template: &[LayerParams],
    output: &LogisticLayer,
) -> (Vec<LayerParams>, LogisticLayer) {
    let mut pos = 0;
    let mut take = |n: usize| {
        let s = theta[pos..pos + n].to_vec();
        pos += n;
        s
    };
    let layers = template
        .iter()
        .map(|l| LayerParams {
            w: Matrix::from_vec(l.w.rows(), l.w.cols(), take(l.w.data().len())).expect("sized"),
            b: take(l.b.len()),
            c: l.c.clone(),
        })
        .collect();
    let v = Matrix::from_vec(output.v.rows(), output.v.cols(), take(output.v.data().len()))
        .expect("sized");
    let d = take(output.d.len());
    (layers, LogisticLayer { v, d })
}

pub fn flatten_classifier_grads(g: &ClassifierGrads) -> Vec<f64> {
    let mut out = Vec::new();
    for (w, b) in g.layers.iter().map(|l| l.as_ref().expect("all layers requested")) {
        out.extend_from_slice(w.data());
        out.extend_from_slice(b);
    }
    let (v, d) = g.output.as_ref().expect("output requested");
    out.extend_from_slice(v.data());
    out.extend_from_slice(d);
    out
}

// Objective differences.
//
// A central difference of a loss near 300 (or of one whose gradient entry is
// 1e-8) drowns in rounding once the loss is formed in one piece. The helpers
// below propagate each activation together with its change under the probe
// step and close every nonlinearity with an identity that is accurate relative
// to the change itself:
//
//   s(a + δ) − s(a)               = s(a + δ) s(−a) (1 − e^(−δ))
//   softplus(a + δ) − softplus(a) = ln(1 + s(a) (e^δ − 1))
//   lse(z + δ) − lse(z)           = ln(1 + Σ_k softmax(z)_k (e^(δ_k) − 1))
//
// The result is L(θ + Δ) − L(θ) for the same objective the trainer minimizes.

fn sigmoid_diff(a: f64, delta: f64) -> f64 {
    sigmoid_scalar(a + delta) * sigmoid_scalar(-a) * -(-delta).exp_m1()
}

fn softplus_diff(a: f64, delta: f64) -> f64 {
    (sigmoid_scalar(a) * delta.exp_m1()).ln_1p()
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

/// `(x, dx) ↦ (mul(x, w) + b, change of that under dx, dw, db)`.
fn affine_diff(
    mul: fn(&Matrix, &Matrix) -> Matrix,
    (x, dx): (&Matrix, &Matrix),
    (w, b): (&Matrix, &[f64]),
    (dw, db): (&Matrix, &[f64]),
) -> (Matrix, Matrix) {
    let mut a = mul(x, w);
    a.add_row_vector(b);
    let mut da = add(&mul(&add(x, dx), dw), &mul(dx, w));
    da.add_row_vector(db);
    (a, da)
}

fn sigmoid_layer_diff(a: &Matrix, da: &Matrix) -> (Matrix, Matrix) {
    let mut h = a.clone();
    h.map_inplace(sigmoid_scalar);
    let dh = a.data().iter().zip(da.data()).map(|(&a, &d)| sigmoid_diff(a, d)).collect();
    (h, Matrix::from_vec(a.rows(), a.cols(), dh).expect("same shape"))
}

/// Change of the denoising objective when `layer` moves by `step`.
fn dae_objective_diff(layer: &LayerParams, step: &LayerParams, clean: &Matrix, corrupted: &Matrix) -> f64 {
    let zero = Matrix::zeros(corrupted.rows(), corrupted.cols());
    let (a, da) = affine_diff(
        matmul_nt,
        (corrupted, &zero),
        (&layer.w, &layer.b),
        (&step.w, &step.b),
    );
    let (h, dh) = sigmoid_layer_diff(&a, &da);
    let (z, dz) = affine_diff(matmul_nn, (&h, &dh), (&layer.w, &layer.c), (&step.w, &step.c));
    let mut sum = NeumaierSum::default();
    for ((&z, &d), &x) in z.data().iter().zip(dz.data()).zip(clean.data()) {
        sum.add(softplus_diff(z, d) - x * d);
    }
    sum.value() / clean.rows() as f64
}

/// Change of the classification objective under a step of every parameter.
fn classifier_objective_diff(
    (layers, output): (&[LayerParams], &LogisticLayer),
    (steps, output_step): (&[LayerParams], &LogisticLayer),
    x: &Matrix,
    labels: &[usize],
) -> f64 {
    let mut h = x.clone();
    let mut dh = Matrix::zeros(x.rows(), x.cols());
    for (l, s) in layers.iter().zip(steps) {
        let (a, da) = affine_diff(matmul_nt, (&h, &dh), (&l.w, &l.b), (&s.w, &s.b));
        (h, dh) = sigmoid_layer_diff(&a, &da);
    }
    let (z, dz) = affine_diff(
        matmul_nt,
        (&h, &dh),
        (&output.v, &output.d),
        (&output_step.v, &output_step.d),
    );
    let mut sum = NeumaierSum::default();
    for (r, &y) in labels.iter().enumerate() {
        let p = softmax(z.row(r));
        let growth: f64 = p.iter().zip(dz.row(r)).map(|(p, d)| p * d.exp_m1()).sum();
        sum.add(growth.ln_1p() - dz.get(r, y));
    }
    sum.value() / x.rows() as f64
}

fn difference(theta: &[f64], base: &[f64]) -> Vec<f64> {
    theta.iter().zip(base).map(|(t, b)| t - b).collect()
}

/// Checks the denoising objective of one layer with a fixed corruption.
pub fn check_dae(
    layer: &LayerParams,
    clean: &Matrix,
    corrupted: &Matrix,
    opts: &GradCheckOptions,
) -> GradCheckReport {
    let (_, grads) = dae_gradients(layer, clean, corrupted);
    let (n_in, n_hid) = (layer.n_inputs(), layer.n_hidden());
    let base = flatten_layer(layer);
    grad_check(
        |theta| {
            let step = unflatten_layer(&difference(theta, &base), n_in, n_hid);
            dae_objective_diff(layer, &step, clean, corrupted)
        },
        &flatten_layer_grads(&grads),
        &base,
        opts,
    )
}

/// Checks the supervised objective over every hidden layer and the output.
pub fn check_classifier(
    layers: &[LayerParams],
    output: &LogisticLayer,
    x: &Matrix,
    labels: &[usize],
    opts: &GradCheckOptions,
) -> GradCheckReport {
    let all = vec![true; layers.len()];
    let (_, grads) = classifier_gradients(layers, output, x, labels, &all, true);
    let base = flatten_classifier(layers, output);
    grad_check(
        |theta| {
            let (steps, output_step) = unflatten_classifier(&difference(theta, &base), layers, output);
            classifier_objective_diff((layers, output), (&steps, &output_step), x, labels)
        },
        &flatten_classifier_grads(&grads),
        &base,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = rng::seeded(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(0.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        let theta: Vec<f64> = (0..50).map(|i| (i as f64 - 25.0) * 0.037).collect();
        let loss = |t: &[f64]| {
            0.5 * t.iter().zip(&theta).map(|(v, c)| v * v - c * c).sum::<f64>()
        };
        let report = grad_check(loss, &theta, &theta, &GradCheckOptions::default());
        assert_eq!(report.checked, 50);
        assert!(report.max_relative_error < 1e-9, "{report:?}");
    }

    #[test]
    fn single_layer_autoencoder() {
        let mut rng = rng::seeded(4);
        let layer = LayerParams::init(400, 30, &mut rng);
        let clean = random_batch(5, 400, 5);
        let mut corrupted = clean.clone();
        for v in corrupted.data_mut() {
            if rng.random_bool(0.1) {
                *v = 0.0;
            }
        }
        let report = check_dae(&layer, &clean, &corrupted, &GradCheckOptions::default());
        assert_eq!(report.checked, 200);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn small_classifier() {
        let mut rng = rng::seeded(8);
        let layers = vec![
            LayerParams::init(12, 6, &mut rng),
            LayerParams::init(6, 5, &mut rng),
        ];
        let output = LogisticLayer::init(5, 2, &mut rng);
        let x = random_batch(7, 12, 9);
        let labels = [0, 1, 1, 0, 1, 0, 0];
        let report = check_classifier(&layers, &output, &x, &labels, &GradCheckOptions::default());
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut rng = rng::seeded(1);
        let layer = LayerParams::init(10, 4, &mut rng);
        let clean = random_batch(3, 10, 2);
        let (_, grads) = dae_gradients(&layer, &clean, &clean);
        let mut analytic = flatten_layer_grads(&grads);
        analytic[7] *= 2.0;
        let report = grad_check(
            |t| super::super::backprop::dae_objective(&unflatten_layer(t, 10, 4), &clean, &clean),
            &analytic,
            &flatten_layer(&layer),
            &GradCheckOptions::default(),
        );
        assert!(!report.passed);
        assert_eq!(report.worst_index, 7);
        assert!(report.max_relative_error > 0.1);
    }

    #[test]
    fn partial_requests_match_full() {
        let mut rng = rng::seeded(3);
        let layers: Vec<LayerParams> = (0..3).map(|_| LayerParams::init(6, 6, &mut rng)).collect();
        let output = LogisticLayer::init(6, 2, &mut rng);
        let x = random_batch(4, 6, 3);
        let labels = [1, 0, 1, 1];
        let (_, full) = classifier_gradients(&layers, &output, &x, &labels, &[true; 3], true);
        let (_, part) =
            classifier_gradients(&layers, &output, &x, &labels, &[false, true, false], false);
        assert!(part.layers[0].is_none() && part.layers[2].is_none() && part.output.is_none());
        assert_eq!(part.layers[1], full.layers[1]);
    }

    fn random_step(len: usize, scale: f64, seed: u64) -> Vec<f64> {
        let mut rng = rng::seeded(seed);
        (0..len).map(|_| rng.random_range(-scale..scale)).collect()
    }

    #[test]
    fn dae_difference_matches_direct_evaluation() {
        use super::super::backprop::dae_objective;
        let mut rng = rng::seeded(11);
        let layer = LayerParams::init(30, 8, &mut rng);
        let clean = random_batch(4, 30, 12);
        let corrupted = random_batch(4, 30, 13);
        let base = flatten_layer(&layer);
        let step = random_step(base.len(), 0.05, 14);
        let moved: Vec<f64> = base.iter().zip(&step).map(|(a, b)| a + b).collect();
        let direct = dae_objective(&unflatten_layer(&moved, 30, 8), &clean, &corrupted)
            - dae_objective(&layer, &clean, &corrupted);
        let step = unflatten_layer(&difference(&moved, &base), 30, 8);
        let diff = dae_objective_diff(&layer, &step, &clean, &corrupted);
        assert!((diff - direct).abs() < 1e-12 * direct.abs().max(1.0), "{diff} vs {direct}");
        let none = unflatten_layer(&vec![0.0; base.len()], 30, 8);
        assert_eq!(dae_objective_diff(&layer, &none, &clean, &corrupted), 0.0);
    }

    #[test]
    fn classifier_difference_matches_direct_evaluation() {
        use super::super::backprop::classifier_objective;
        let mut rng = rng::seeded(21);
        let layers = vec![LayerParams::init(12, 6, &mut rng), LayerParams::init(6, 5, &mut rng)];
        let output = LogisticLayer::init(5, 2, &mut rng);
        let x = random_batch(6, 12, 22);
        let labels = [0, 1, 1, 0, 0, 1];
        let base = flatten_classifier(&layers, &output);
        let step = random_step(base.len(), 0.05, 23);
        let moved: Vec<f64> = base.iter().zip(&step).map(|(a, b)| a + b).collect();
        let (ml, mo) = unflatten_classifier(&moved, &layers, &output);
        let direct = classifier_objective(&ml, &mo, &x, &labels)
            - classifier_objective(&layers, &output, &x, &labels);
        let (sl, so) = unflatten_classifier(&difference(&moved, &base), &layers, &output);
        let diff = classifier_objective_diff((&layers, &output), (&sl, &so), &x, &labels);
        assert!((diff - direct).abs() < 1e-12 * direct.abs().max(1.0), "{diff} vs {direct}");
    }

    #[test]
    fn deep_classifier_passes_across_seeds() {
        for seed in 0..12 {
            let mut rng = rng::seeded(seed);
            let layers = vec![
                LayerParams::init(400, 50, &mut rng),
                LayerParams::init(50, 50, &mut rng),
                LayerParams::init(50, 50, &mut rng),
            ];
            let output = LogisticLayer::init(50, 2, &mut rng);
            let x = random_batch(10, 400, seed + 100);
            let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
            let opts = GradCheckOptions { seed, ..Default::default() };
            let report = check_classifier(&layers, &output, &x, &labels, &opts);
            assert!(report.passed, "seed {seed}: {report:?}");
        }
    }
}
