//! Dense row-major matrices and the three products backprop needs.
//!
//! Kernels split work across output rows only, so every output element is
//! accumulated in a fixed order and results do not depend on thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Below this many multiply-adds a product runs on the calling thread.
const PARALLEL_WORK: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged matrix rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols.max(1)).map(<[f64]>::to_vec).collect()
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64 + Sync) {
        if self.data.len() >= PARALLEL_WORK {
            self.data.par_iter_mut().for_each(|v| *v = f(*v));
        } else {
            self.data.iter_mut().for_each(|v| *v = f(*v));
        }
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) {
        debug_assert_eq!(bias.len(), self.cols);
        for row in self.data.chunks_mut(self.cols.max(1)) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
    }

    /// Sum over rows.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.data.chunks(self.cols.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Four-accumulator dot product with a fixed summation order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn for_each_row(out: &mut [f64], cols: usize, work: usize, f: impl Fn(usize, &mut [f64]) + Sync) {
    if cols == 0 {
        return;
    }
    if work >= PARALLEL_WORK {
        out.par_chunks_mut(cols).enumerate().for_each(|(i, r)| f(i, r));
    } else {
        out.chunks_mut(cols).enumerate().for_each(|(i, r)| f(i, r));
    }
}

/// `a · bᵀ` for `a: n×k`, `b: m×k`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dimensions");
    let mut out = Matrix::zeros(a.rows, b.rows);
    let work = a.rows * b.rows * a.cols;
    for_each_row(&mut out.data, b.rows, work, |i, row| {
        let ai = a.row(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(ai, b.row(j));
        }
    });
    out
}

/// `a · b` for `a: n×k`, `b: k×m`.
pub fn matmul_nn(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "matmul_nn inner dimensions");
    let mut out = Matrix::zeros(a.rows, b.cols);
    let work = a.rows * a.cols * b.cols;
    for_each_row(&mut out.data, b.cols, work, |i, row| {
        for (k, &coef) in a.row(i).iter().enumerate() {
            axpy(coef, b.row(k), row);
        }
    });
    out
}

/// `aᵀ · b` for `a: n×k`, `b: n×m`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows, b.rows, "matmul_tn outer dimensions");
    let mut out = Matrix::zeros(a.cols, b.cols);
    let work = a.rows * a.cols * b.cols;
    for_each_row(&mut out.data, b.cols, work, |k, row| {
        for n in 0..a.rows {
            axpy(a.get(n, k), b.row(n), row);
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                out.data[i * b.cols() + j] = (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum();
            }
        }
        out
    }

    fn transpose(m: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(m.cols(), m.rows());
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                out.data[j * m.rows() + i] = m.get(i, j);
            }
        }
        out
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = crate::rng::seeded(seed);
        let data = (0..rows * cols)
            .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn close(a: &Matrix, b: &Matrix) -> bool {
        a.rows() == b.rows()
            && a.cols() == b.cols()
            && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    proptest! {
        #[test]
        fn products_match_naive(n in 1usize..9, k in 1usize..11, m in 1usize..7, seed in any::<u64>()) {
            let a = random(n, k, seed);
            let b = random(k, m, seed ^ 1);
            let expected = naive(&a, &b);
            prop_assert!(close(&matmul_nn(&a, &b), &expected));
            prop_assert!(close(&matmul_nt(&a, &transpose(&b)), &expected));
            prop_assert!(close(&matmul_tn(&transpose(&a), &b), &expected));
        }
    }

    #[test]
    fn large_product_is_thread_independent() {
        let a = random(64, 300, 1);
        let b = random(80, 300, 2);
        let par = matmul_nt(&a, &b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(|| matmul_nt(&a, &b));
        assert_eq!(par, serial);
    }

    #[test]
    fn shape_checks() {
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.column_sums(), vec![4.0, 6.0]);
        assert_eq!(m.to_rows(), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
    }
}
