//! Objectives and their analytic gradients.
//!
//! The denoising objective is the batch mean of the per-sample *summed*
//! cross-entropy, i.e. `d · reconstruction_loss`; it has the same minimizer as
//! the per-component mean but keeps gradient magnitudes independent of the
//! patch size. The classification objective is the batch mean softmax NLL.

use super::layers::{softplus, LayerParams, LogisticLayer};
use super::matrix::{matmul_nn, matmul_tn, Matrix};
use super::NeumaierSum;

/// Gradient of one autoencoder layer, laid out like [`LayerParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// Gradients of the supervised objective. `None` entries were not requested.
#[derive(Debug, Clone)]
pub struct ClassifierGrads {
    /// `(dW, db)` per hidden layer; the reconstruction bias takes no gradient.
    pub layers: Vec<Option<(Matrix, Vec<f64>)>>,
    pub output: Option<(Matrix, Vec<f64>)>,
}

/// Batch-mean summed cross-entropy of reconstructing `clean` from `corrupted`.
pub fn dae_objective(layer: &LayerParams, clean: &Matrix, corrupted: &Matrix) -> f64 {
    let h = layer.encode_batch(corrupted);
    let a = layer.decode_preactivation_batch(&h);
    let mut sum = NeumaierSum::default();
    for (&ai, &xi) in a.data().iter().zip(clean.data()) {
        sum.add(softplus(ai) - xi * ai);
    }
    sum.value() / clean.rows() as f64
}

/// Objective and gradient of the tied-weight denoising autoencoder.
///
/// The weight gradient collects both the encoder and the decoder paths, which
/// share the single matrix `W`.
pub fn dae_gradients(layer: &LayerParams, clean: &Matrix, corrupted: &Matrix) -> (f64, LayerGrads) {
    let n = clean.rows() as f64;
    let h = layer.encode_batch(corrupted);
    let a = layer.decode_preactivation_batch(&h);

    let mut loss = NeumaierSum::default();
    let mut delta_out = a.clone();
    for ((d, &ai), &xi) in delta_out.data_mut().iter_mut().zip(a.data()).zip(clean.data()) {
        loss.add(softplus(ai) - xi * ai);
        *d = (super::layers::sigmoid_scalar(ai) - xi) / n;
    }

    // dL/dh = δ_out · Wᵀ, through the sigmoid.
    let mut delta_h = super::matrix::matmul_nt(&delta_out, &layer.w);
    for (d, &hv) in delta_h.data_mut().iter_mut().zip(h.data()) {
        *d *= hv * (1.0 - hv);
    }

    let mut w = matmul_tn(&h, &delta_out);
    let enc = matmul_tn(&delta_h, corrupted);
    for (a, b) in w.data_mut().iter_mut().zip(enc.data()) {
        *a += b;
    }
    let grads = LayerGrads {
        w,
        b: delta_h.column_sums(),
        c: delta_out.column_sums(),
    };
    (loss.value() / n, grads)
}

/// Hidden activations of every layer; entry 0 is the input itself.
pub fn forward_stack(layers: &[LayerParams], x: &Matrix) -> Vec<Matrix> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(x.clone());
    for layer in layers {
        let next = layer.encode_batch(acts.last().expect("non-empty"));
        acts.push(next);
    }
    acts
}

fn nll_and_delta(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = logits.rows() as f64;
    let mut loss = NeumaierSum::default();
    let mut delta = logits.clone();
    for (r, &y) in labels.iter().enumerate() {
        let z = logits.row(r);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss.add(lse - z[y]);
        let cols = logits.cols();
        for (k, d) in delta.data_mut()[r * cols..(r + 1) * cols].iter_mut().enumerate() {
            let p = (z[k] - lse).exp();
            *d = (p - f64::from(u8::from(k == y))) / n;
        }
    }
    (loss.value() / n, delta)
}

/// Batch-mean negative log-likelihood of `labels` (class indices).
pub fn classifier_objective(
    layers: &[LayerParams],
    output: &LogisticLayer,
    x: &Matrix,
    labels: &[usize],
) -> f64 {
    let acts = forward_stack(layers, x);
    let logits = output.logits_batch(acts.last().expect("non-empty"));
    nll_and_delta(&logits, labels).0
}

/// Objective and gradients of the supervised network.
///
/// Only gradients flagged in `want_layers` / `want_output` are materialized;
/// backpropagation stops below the lowest requested layer.
pub fn classifier_gradients(
    layers: &[LayerParams],
    output: &LogisticLayer,
    x: &Matrix,
    labels: &[usize],
    want_layers: &[bool],
    want_output: bool,
) -> (f64, ClassifierGrads) {
    debug_assert_eq!(want_layers.len(), layers.len());
    let acts = forward_stack(layers, x);
    let top = acts.last().expect("non-empty");
    let logits = output.logits_batch(top);
    let (loss, delta_logits) = nll_and_delta(&logits, labels);

    let output_grads =
        want_output.then(|| (matmul_tn(&delta_logits, top), delta_logits.column_sums()));

    let mut layer_grads: Vec<Option<(Matrix, Vec<f64>)>> = vec![None; layers.len()];
    if let Some(lowest) = want_layers.iter().position(|&t| t) {
        // δ at the top hidden layer's pre-activation.
        let mut delta = matmul_nn(&delta_logits, &output.v);
        for l in (lowest..layers.len()).rev() {
            let h = &acts[l + 1];
            for (d, &hv) in delta.data_mut().iter_mut().zip(h.data()) {
                *d *= hv * (1.0 - hv);
            }
            if want_layers[l] {
                layer_grads[l] = Some((matmul_tn(&delta, &acts[l]), delta.column_sums()));
            }
            if l > lowest {
                delta = matmul_nn(&delta, &layers[l].w);
            }
        }
    }
    (
        loss,
        ClassifierGrads {
            layers: layer_grads,
            output: output_grads,
        },
    )
}
