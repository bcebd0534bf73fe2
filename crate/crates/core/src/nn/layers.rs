use rand::Rng as _;

use super::matrix::{matmul_nn, matmul_nt, Matrix};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Reconstructions are clamped this far from 0 and 1 before taking logs.
pub const LOSS_CLAMP: f64 = 1e-12;

/// Logistic function, evaluated without overflow for any finite input.
#[inline]
pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| sigmoid_scalar(v)).collect()
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// One tied-weight denoising autoencoder layer.
///
/// `w` maps inputs to hidden units (`hidden × inputs`); decoding uses its
/// transpose, so there is exactly one weight matrix per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl LayerParams {
    /// `W ~ U(±√(6 / (fan_in + fan_out)))`, zero biases.
    pub fn init(n_inputs: usize, n_hidden: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (n_inputs + n_hidden) as f64).sqrt();
        let data = (0..n_inputs * n_hidden)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            w: Matrix::from_vec(n_hidden, n_inputs, data).expect("sized"),
            b: vec![0.0; n_hidden],
            c: vec![0.0; n_inputs],
        }
    }

    pub fn zeros(n_inputs: usize, n_hidden: usize) -> Self {
        Self {
            w: Matrix::zeros(n_hidden, n_inputs),
            b: vec![0.0; n_hidden],
            c: vec![0.0; n_inputs],
        }
    }

    pub fn new(w: Matrix, b: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        if b.len() != w.rows() || c.len() != w.cols() {
            return Err(Error::DimensionMismatch(format!(
                "W is {}x{}, b has {}, c has {}",
                w.rows(),
                w.cols(),
                b.len(),
                c.len()
            )));
        }
        Ok(Self { w, b, c })
    }

    pub fn n_inputs(&self) -> usize {
        self.w.cols()
    }

    pub fn n_hidden(&self) -> usize {
        self.w.rows()
    }

    pub fn all_finite(&self) -> bool {
        self.w.all_finite() && self.b.iter().chain(&self.c).all(|v| v.is_finite())
    }

    /// `s(b + W x)`.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_inputs() {
            return Err(Error::DimensionMismatch(format!(
                "encode: input has {} values, layer expects {}",
                x.len(),
                self.n_inputs()
            )));
        }
        Ok((0..self.n_hidden())
            .map(|k| sigmoid_scalar(self.b[k] + super::matrix::dot(self.w.row(k), x)))
            .collect())
    }

    /// `s(c + Wᵀ h)`.
    pub fn decode(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.n_hidden() {
            return Err(Error::DimensionMismatch(format!(
                "decode: code has {} values, layer has {} hidden units",
                h.len(),
                self.n_hidden()
            )));
        }
        let mut out = self.c.clone();
        for (k, &hk) in h.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.w.row(k)) {
                *o += hk * w;
            }
        }
        Ok(out.into_iter().map(sigmoid_scalar).collect())
    }

    /// Hidden codes for a batch (one sample per row).
    pub fn encode_batch(&self, x: &Matrix) -> Matrix {
        let mut a = matmul_nt(x, &self.w);
        a.add_row_vector(&self.b);
        a.map_inplace(sigmoid_scalar);
        a
    }

    /// Pre-activation of the reconstruction for a batch of codes.
    pub fn decode_preactivation_batch(&self, h: &Matrix) -> Matrix {
        let mut a = matmul_nn(h, &self.w);
        a.add_row_vector(&self.c);
        a
    }

    pub fn decode_batch(&self, h: &Matrix) -> Matrix {
        let mut a = self.decode_preactivation_batch(h);
        a.map_inplace(sigmoid_scalar);
        a
    }
}

/// Softmax output layer, `classes × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticLayer {
    pub v: Matrix,
    pub d: Vec<f64>,
}

impl LogisticLayer {
    pub fn init(n_inputs: usize, n_classes: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (n_inputs + n_classes) as f64).sqrt();
        let data = (0..n_inputs * n_classes)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            v: Matrix::from_vec(n_classes, n_inputs, data).expect("sized"),
            d: vec![0.0; n_classes],
        }
    }

    pub fn zeros(n_inputs: usize, n_classes: usize) -> Self {
        Self {
            v: Matrix::zeros(n_classes, n_inputs),
            d: vec![0.0; n_classes],
        }
    }

    pub fn new(v: Matrix, d: Vec<f64>) -> Result<Self> {
        if d.len() != v.rows() {
            return Err(Error::DimensionMismatch(format!(
                "V has {} classes, d has {}",
                v.rows(),
                d.len()
            )));
        }
        Ok(Self { v, d })
    }

    pub fn n_inputs(&self) -> usize {
        self.v.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.v.rows()
    }

    pub fn all_finite(&self) -> bool {
        self.v.all_finite() && self.d.iter().all(|v| v.is_finite())
    }

    pub fn logits_batch(&self, h: &Matrix) -> Matrix {
        let mut a = matmul_nt(h, &self.v);
        a.add_row_vector(&self.d);
        a
    }

    pub fn probabilities(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.n_inputs() {
            return Err(Error::DimensionMismatch(format!(
                "output layer expects {} inputs, got {}",
                self.n_inputs(),
                h.len()
            )));
        }
        let z: Vec<f64> = (0..self.n_classes())
            .map(|k| self.d[k] + super::matrix::dot(self.v.row(k), h))
            .collect();
        Ok(softmax(&z))
    }
}

/// Mean binary cross-entropy per component, `x̂` clamped to `[1e-12, 1 - 1e-12]`.
pub fn reconstruction_loss(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::DimensionMismatch(format!(
            "reconstruction has {} values, input {}",
            x_hat.len(),
            x.len()
        )));
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    Ok(cross_entropy_sum(x, x_hat) / x.len() as f64)
}

pub(crate) fn cross_entropy_sum(x: &[f64], x_hat: &[f64]) -> f64 {
    let mut sum = super::NeumaierSum::default();
    for (&t, &p) in x.iter().zip(x_hat) {
        let p = p.clamp(LOSS_CLAMP, 1.0 - LOSS_CLAMP);
        sum.add(-(t * p.ln() + (1.0 - t) * (1.0 - p).ln()));
    }
    sum.value()
}

/// Plain gradient descent: `θ ← θ − η ∇`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], learning_rate: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} parameters, {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= learning_rate * g;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert_eq!(sigmoid_scalar(500.0), 1.0);
        assert!(sigmoid_scalar(-800.0) >= 0.0);
        for z in [-30.0, -3.2, -0.1, 0.7, 12.0] {
            assert!((sigmoid_scalar(-z) - (1.0 - sigmoid_scalar(z))).abs() < 1e-12);
        }
        assert_eq!(sigmoid(&[0.0, 0.0]), vec![0.5, 0.5]);
        assert_relative_eq!(softplus(800.0), 800.0);
        assert_relative_eq!(softplus(0.0), std::f64::consts::LN_2);
    }

    #[test]
    fn zero_layer_gives_half() {
        let layer = LayerParams::zeros(5, 3);
        assert_eq!(layer.encode(&[0.3; 5]).unwrap(), vec![0.5; 3]);
        assert_eq!(layer.decode(&[0.0; 3]).unwrap(), vec![0.5; 5]);
    }

    #[test]
    fn scalar_encode() {
        let layer = LayerParams::new(
            Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
            vec![-1.0],
            vec![0.0],
        )
        .unwrap();
        assert!((layer.encode(&[1.0]).unwrap()[0] - 0.731059).abs() < 1e-6);
    }

    #[test]
    fn two_input_decode_by_hand() {
        // W = [0.5, -1.5], c = [0.1, 0.2], h = [0.8]
        let layer = LayerParams::new(
            Matrix::from_vec(1, 2, vec![0.5, -1.5]).unwrap(),
            vec![0.0],
            vec![0.1, 0.2],
        )
        .unwrap();
        let out = layer.decode(&[0.8]).unwrap();
        let expect = [
            1.0 / (1.0 + (-(0.1 + 0.4f64)).exp()),
            1.0 / (1.0 + (-(0.2 - 1.2f64)).exp()),
        ];
        assert!((out[0] - expect[0]).abs() < 1e-15);
        assert!((out[1] - expect[1]).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let layer = LayerParams::zeros(4, 2);
        assert!(layer.encode(&[0.0; 3]).is_err());
        assert!(layer.decode(&[0.0; 4]).is_err());
        assert!(reconstruction_loss(&[0.0], &[0.0, 1.0]).is_err());
        assert!(sgd_step(&mut [0.0], &[1.0, 2.0], 0.1).is_err());
        assert!(LayerParams::new(Matrix::zeros(2, 3), vec![0.0; 3], vec![0.0; 3]).is_err());
    }

    #[test]
    fn loss_values() {
        assert!(reconstruction_loss(&[0.0, 0.0], &[0.0, 0.0]).unwrap() < 1e-11);
        assert!(reconstruction_loss(&[1.0, 1.0], &[1.0, 1.0]).unwrap() < 1e-11);
        assert!((reconstruction_loss(&[1.0], &[0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = [1.0];
        sgd_step(&mut p, &[2.0], 0.1).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
        let mut q = [1.0, -2.0];
        sgd_step(&mut q, &[0.0, 0.0], 0.5).unwrap();
        assert_eq!(q, [1.0, -2.0]);
        sgd_step(&mut q, &[3.0, 4.0], 0.0).unwrap();
        assert_eq!(q, [1.0, -2.0]);
    }

    #[test]
    fn batch_matches_single() {
        let mut rng = crate::rng::seeded(2);
        let layer = LayerParams::init(7, 4, &mut rng);
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..7).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let h = layer.encode_batch(&x);
        let z = layer.decode_batch(&h);
        for (i, r) in rows.iter().enumerate() {
            let hs = layer.encode(r).unwrap();
            let zs = layer.decode(&hs).unwrap();
            for (a, b) in hs.iter().zip(h.row(i)) {
                assert!((a - b).abs() < 1e-14);
            }
            for (a, b) in zs.iter().zip(z.row(i)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    proptest! {
        #[test]
        fn loss_is_non_negative(
            pairs in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..50)
        ) {
            let (x, xh): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert!(reconstruction_loss(&x, &xh).unwrap() >= 0.0);
        }

        #[test]
        fn encode_length_is_rows(inputs in 1usize..30, hidden in 1usize..30, seed in any::<u64>()) {
            let layer = LayerParams::init(inputs, hidden, &mut crate::rng::seeded(seed));
            prop_assert_eq!(layer.encode(&vec![0.5; inputs]).unwrap().len(), hidden);
            prop_assert_eq!(layer.decode(&vec![0.5; hidden]).unwrap().len(), inputs);
        }
    }
}
