//! Scale-normalized Laplacian of Gaussian blob detection.
//!
//! A particle of radius `r` responds most strongly at scale `t = r / 1.5`, so the
//! detector evaluates a band of radii `r - δ ..= r + δ`, stacks the responses and
//! keeps local maxima over the 3×3×3 space-scale neighborhood. A dark blob on a
//! bright background is an intensity minimum, so its response is positive.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{GrayImage, Plane};

/// Ratio between a particle radius and the scale at which the LoG peaks on it.
pub const RADIUS_TO_SCALE: f64 = 1.5;

/// Gaussian kernels are truncated at this many standard deviations.
pub const KERNEL_TRUNCATION: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleBank {
    radii: Vec<f64>,
    scales: Vec<f64>,
    delta: usize,
}

impl ScaleBank {
    /// Radii `r - δ, …, r + δ` in unit steps, mapped to scales `r_i / 1.5`.
    pub fn build(nominal_radius: f64, delta: usize) -> Result<Self> {
        if !nominal_radius.is_finite() || nominal_radius - (delta as f64) < 2.0 {
            return Err(Error::param(
                "radius",
                format!("smallest radius {nominal_radius} - {delta} is below 2 pixels"),
            ));
        }
        let radii: Vec<f64> = (0..=2 * delta)
            .map(|i| nominal_radius - delta as f64 + i as f64)
            .collect();
        Self::from_radii(&radii).map(|mut bank| {
            bank.delta = delta;
            bank
        })
    }

    /// Bank over an explicit, strictly increasing radius list.
    pub fn from_radii(radii: &[f64]) -> Result<Self> {
        if radii.is_empty() {
            return Err(Error::param("radius", "empty radius list"));
        }
        if radii.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::param("radius", "radii must be positive"));
        }
        if radii.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param("radius", "radii must be strictly increasing"));
        }
        Ok(Self {
            radii: radii.to_vec(),
            scales: radii.iter().map(|r| r / RADIUS_TO_SCALE).collect(),
            delta: 0,
        })
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn delta(&self) -> usize {
        self.delta
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }
}

/// One LoG response plane per scale of a bank.
#[derive(Debug, Clone)]
pub struct ResponseStack {
    pub planes: Vec<Plane>,
    pub scales: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub response: f64,
}

/// Normalized 1D Gaussian with standard deviation `sigma`, truncated at `ceil(4σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param("scale", format!("must be positive, got {sigma}")));
    }
    let radius = (KERNEL_TRUNCATION * sigma).ceil() as isize;
    let denom = 2.0 * sigma * sigma;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / denom).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    Ok(k)
}

fn convolve_rows(src: &Plane, kernel: &[f64]) -> Plane {
    let (w, h) = (src.width(), src.height());
    let r = kernel.len() / 2;
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let line = &src.data()[y * w..(y + 1) * w];
        let mut padded = Vec::with_capacity(w + 2 * r);
        padded.extend(std::iter::repeat_n(line[0], r));
        padded.extend_from_slice(line);
        padded.extend(std::iter::repeat_n(line[w - 1], r));
        for (x, dst) in row.iter_mut().enumerate() {
            *dst = padded[x..x + kernel.len()]
                .iter()
                .zip(kernel)
                .map(|(a, b)| a * b)
                .sum();
        }
    });
    Plane::new(w, h, out).expect("dimensions preserved")
}

fn convolve_cols(src: &Plane, kernel: &[f64]) -> Plane {
    let (w, h) = (src.width(), src.height());
    let r = kernel.len() as isize / 2;
    let data = src.data();
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (j, &kv) in kernel.iter().enumerate() {
            let sy = (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
            let line = &data[sy * w..(sy + 1) * w];
            for (dst, &v) in row.iter_mut().zip(line) {
                *dst += kv * v;
            }
        }
    });
    Plane::new(w, h, out).expect("dimensions preserved")
}

/// Gaussian scale-space sample `L(·, t)` with `t` the standard deviation.
///
/// Separable; borders replicate the edge pixel.
pub fn gaussian_smooth_plane(src: &Plane, t: f64) -> Result<Plane> {
    let kernel = gaussian_kernel(t)?;
    Ok(convolve_cols(&convolve_rows(src, &kernel), &kernel))
}

pub fn gaussian_smooth(img: &GrayImage, t: f64) -> Result<Plane> {
    gaussian_smooth_plane(img.as_plane(), t)
}

/// `t² (L_xx + L_yy)` with [1, -2, 1] second differences on the smoothed plane.
/// An intensity minimum has a positive Laplacian, so dark blobs come out positive.
pub fn log_response_plane(src: &Plane, t: f64) -> Result<Plane> {
    let smooth = gaussian_smooth_plane(src, t)?;
    let (w, h) = (smooth.width(), smooth.height());
    let norm = t * t;
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let yi = y as isize;
        for (x, dst) in row.iter_mut().enumerate() {
            let xi = x as isize;
            let c = smooth.get(x, y);
            let lxx = smooth.get_clamped(xi - 1, yi) - 2.0 * c + smooth.get_clamped(xi + 1, yi);
            let lyy = smooth.get_clamped(xi, yi - 1) - 2.0 * c + smooth.get_clamped(xi, yi + 1);
            *dst = norm * (lxx + lyy);
        }
    });
    Ok(Plane::new(w, h, out).expect("dimensions preserved"))
}

pub fn log_response(img: &GrayImage, t: f64) -> Result<Plane> {
    log_response_plane(img.as_plane(), t)
}

pub fn response_stack(src: &Plane, bank: &ScaleBank) -> Result<ResponseStack> {
    let planes = bank
        .scales()
        .par_iter()
        .map(|&t| log_response_plane(src, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(ResponseStack {
        planes,
        scales: bank.scales().to_vec(),
    })
}

pub fn detect(img: &GrayImage, bank: &ScaleBank, threshold: f64) -> Result<Vec<Detection>> {
    if bank.is_empty() {
        return Err(Error::Empty("scale bank"));
    }
    let stack = response_stack(img.as_plane(), bank)?;
    Ok(detect_in_stack(&stack, threshold))
}

/// Space-scale local maxima of a response stack at or above `threshold`.
///
/// A sample qualifies when it is `>=` every existing neighbor in its 3×3×3
/// neighborhood and `>` at least one. Equal-valued qualifying samples that touch
/// form a plateau, and only its lexicographically smallest `(y, x, scale)` member
/// is kept. Output is in `(y, x, scale)` order.
pub fn detect_in_stack(stack: &ResponseStack, threshold: f64) -> Vec<Detection> {
    let n_scales = stack.planes.len();
    if n_scales == 0 {
        return Vec::new();
    }
    let (w, h) = (stack.planes[0].width(), stack.planes[0].height());

    // (y, x, s) keys sort lexicographically as the tie-breaking rule requires.
    let mut candidates: Vec<(usize, usize, usize)> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let mut found = Vec::new();
            for x in 0..w {
                for s in 0..n_scales {
                    if is_local_max(stack, x, y, s, threshold) {
                        found.push((y, x, s));
                    }
                }
            }
            found
        })
        .collect();
    candidates.sort_unstable();

    let index: HashMap<(usize, usize, usize), usize> =
        candidates.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let mut parent: Vec<usize> = (0..candidates.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for (i, &(y, x, s)) in candidates.iter().enumerate() {
        let v = stack.planes[s].get(x, y);
        for (nx, ny, ns) in neighbors(x, y, s, w, h, n_scales) {
            if let Some(&j) = index.get(&(ny, nx, ns)) {
                if stack.planes[ns].get(nx, ny) == v {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    // Roots stay at the smallest key since candidates are sorted.
                    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                    parent[hi] = lo;
                }
            }
        }
    }

    candidates
        .iter()
        .enumerate()
        .filter(|&(i, _)| find(&mut parent, i) == i)
        .map(|(_, &(y, x, s))| Detection {
            x: x as f64,
            y: y as f64,
            radius: RADIUS_TO_SCALE * stack.scales[s],
            response: stack.planes[s].get(x, y),
        })
        .collect()
}

fn neighbors(
    x: usize,
    y: usize,
    s: usize,
    w: usize,
    h: usize,
    n_scales: usize,
) -> impl Iterator<Item = (usize, usize, usize)> {
    let xs = x.saturating_sub(1)..=(x + 1).min(w - 1);
    let ys = y.saturating_sub(1)..=(y + 1).min(h - 1);
    let ss = s.saturating_sub(1)..=(s + 1).min(n_scales - 1);
    ss.flat_map(move |ns| {
        let xs = xs.clone();
        ys.clone()
            .flat_map(move |ny| xs.clone().map(move |nx| (nx, ny, ns)))
    })
    .filter(move |&n| n != (x, y, s))
}

fn is_local_max(stack: &ResponseStack, x: usize, y: usize, s: usize, threshold: f64) -> bool {
    let v = stack.planes[s].get(x, y);
    if !(v >= threshold) {
        return false;
    }
    let (w, h) = (stack.planes[0].width(), stack.planes[0].height());
    let mut strictly_above_one = false;
    for (nx, ny, ns) in neighbors(x, y, s, w, h, stack.planes.len()) {
        let n = stack.planes[ns].get(nx, ny);
        if n > v {
            return false;
        }
        if n < v {
            strictly_above_one = true;
        }
    }
    strictly_above_one
}

/// Detections CSV: `x,y,radius,response`, reals at 6 significant digits.
pub fn detections_csv(dets: &[Detection]) -> String {
    use crate::eval::format_sig;
    let mut out = String::from("x,y,radius,response\n");
    for d in dets {
        out.push_str(&format!(
            "{},{},{},{}\n",
            format_sig(d.x, 6),
            format_sig(d.y, 6),
            format_sig(d.radius, 6),
            format_sig(d.response, 6)
        ));
    }
    out
}

pub fn save_detections(dets: &[Detection], path: impl AsRef<std::path::Path>) -> Result<()> {
    crate::eval::write_text(path.as_ref(), &detections_csv(dets))
}

pub fn load_detections(path: impl AsRef<std::path::Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| -> Result<f64> {
            record
                .get(i)
                .and_then(|f| f.parse::<f64>().ok())
                .ok_or_else(|| Error::Csv {
                    path: path.to_path_buf(),
                    line,
                    reason: format!("expected 4 numeric fields, got `{}`", record.iter().collect::<Vec<_>>().join(",")),
                })
        };
        out.push(Detection {
            x: field(0)?,
            y: field(1)?,
            radius: field(2)?,
            response: field(3)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn random_plane(w: usize, h: usize, seed: u64) -> Plane {
        let mut rng = crate::rng::seeded(seed);
        let data = (0..w * h)
            .map(|_| rand::Rng::random_range(&mut rng, 0.0..255.0))
            .collect();
        Plane::new(w, h, data).unwrap()
    }

    /// Direct 2D convolution with the outer-product kernel and clamped borders.
    fn brute_force_smooth(src: &Plane, sigma: f64) -> Plane {
        let r = (KERNEL_TRUNCATION * sigma).ceil() as isize;
        let mut k2 = Vec::new();
        let mut total = 0.0;
        for j in -r..=r {
            for i in -r..=r {
                let v = (-((i * i + j * j) as f64) / (2.0 * sigma * sigma)).exp();
                k2.push((i, j, v));
                total += v;
            }
        }
        let (w, h) = (src.width(), src.height());
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let s: f64 = k2
                    .iter()
                    .map(|&(i, j, v)| v / total * src.get_clamped(x + i, y + j))
                    .sum();
                out.push(s);
            }
        }
        Plane::new(w, h, out).unwrap()
    }

    fn dark_disk(size: usize, cx: f64, cy: f64, r: f64) -> GrayImage {
        let mut data = vec![180.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                if d <= r {
                    data[y * size + x] = 30.0;
                }
            }
        }
        GrayImage::new(size, size, data).unwrap()
    }

    #[test]
    fn bank_from_nominal_radius() {
        let b = ScaleBank::build(4.0, 1).unwrap();
        assert_eq!(b.radii(), &[3.0, 4.0, 5.0]);
        assert_relative_eq!(b.scales()[0], 2.0);
        assert_relative_eq!(b.scales()[1], 8.0 / 3.0);
        assert_relative_eq!(b.scales()[2], 10.0 / 3.0);
        let single = ScaleBank::build(4.0, 0).unwrap();
        assert_eq!(single.len(), 1);
        assert!((single.scales()[0] - 2.667).abs() < 1e-3);
        assert!(ScaleBank::build(2.0, 1).is_err());
    }

    #[test]
    fn kernel_sums_to_one_and_truncates() {
        let k = gaussian_kernel(2.0).unwrap();
        assert_eq!(k.len(), 17);
        assert_relative_eq!(k.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert!(gaussian_kernel(0.0).is_err());
        assert!(gaussian_kernel(-1.0).is_err());
    }

    #[test]
    fn smoothing_constant_is_constant() {
        let img = GrayImage::filled(23, 17, 77.0).unwrap();
        let out = gaussian_smooth(&img, 3.1).unwrap();
        assert!(out.data().iter().all(|v| (v - 77.0).abs() < 1e-9));
    }

    #[test]
    fn impulse_yields_kernel_peak() {
        let mut data = vec![0.0; 41 * 41];
        data[20 * 41 + 20] = 1.0;
        let plane = Plane::new(41, 41, data).unwrap();
        let out = gaussian_smooth_plane(&plane, 2.0).unwrap();
        // Peak of the normalized truncated 2D kernel, evaluated directly.
        let mut total = 0.0;
        for j in -8i32..=8 {
            for i in -8i32..=8 {
                total += (-f64::from(i * i + j * j) / 8.0).exp();
            }
        }
        assert!((out.get(20, 20) - 1.0 / total).abs() < 1e-12);
    }

    #[test]
    fn separable_matches_brute_force() {
        let src = random_plane(32, 32, 11);
        for sigma in [0.7, 2.0, 3.3] {
            let a = gaussian_smooth_plane(&src, sigma).unwrap();
            let b = brute_force_smooth(&src, sigma);
            let diff = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-9, "sigma {sigma}: {diff}");
        }
    }

    #[test]
    fn log_of_constant_is_zero() {
        let img = GrayImage::filled(30, 20, 200.0).unwrap();
        let r = log_response(&img, 2.5).unwrap();
        assert!(r.data().iter().all(|v| v.abs() < 1e-9));
        assert!(log_response(&img, 0.0).is_err());
    }

    #[test]
    fn inversion_negates_response() {
        let src = random_plane(40, 30, 5);
        let inv = src.map(|v| 255.0 - v);
        let a = log_response_plane(&src, 2.0).unwrap();
        let b = log_response_plane(&inv, 2.0).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p + q).abs() < 1e-9);
        }
    }

    #[test]
    fn dark_disk_peaks_at_center() {
        let img = dark_disk(41, 20.0, 20.0, 4.0);
        let r = log_response(&img, 4.0 / 1.5).unwrap();
        let center = r.get(20, 20);
        assert!(center > 0.0);
        let max = r.data().iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(center, max);
    }

    #[test]
    fn constant_image_has_no_detections() {
        let img = GrayImage::filled(40, 40, 100.0).unwrap();
        let bank = ScaleBank::build(4.0, 1).unwrap();
        assert!(detect(&img, &bank, 0.0).unwrap().is_empty());
    }

    #[test]
    fn single_disk_detected_once() {
        let img = dark_disk(64, 31.0, 33.0, 4.0);
        let bank = ScaleBank::build(4.0, 1).unwrap();
        let dets = detect(&img, &bank, 5.0).unwrap();
        assert_eq!(dets.len(), 1, "{dets:?}");
        let d = dets[0];
        assert!((d.x - 31.0).abs() <= 1.0 && (d.y - 33.0).abs() <= 1.0);
        assert!(d.response >= 5.0);
        assert!(bank.radii().contains(&d.radius));
    }

    #[test]
    fn plateau_keeps_smallest_key() {
        // Two equal adjacent peaks in a single-scale stack.
        let mut data = vec![0.0; 25];
        data[2 * 5 + 2] = 3.0;
        data[2 * 5 + 3] = 3.0;
        let stack = ResponseStack {
            planes: vec![Plane::new(5, 5, data).unwrap()],
            scales: vec![2.0],
        };
        let dets = detect_in_stack(&stack, 1.0);
        assert_eq!(dets.len(), 1);
        assert_eq!((dets[0].x, dets[0].y), (2.0, 2.0));
        assert_eq!(dets[0].radius, 3.0);
    }

    #[test]
    fn plateau_across_scales_keeps_lowest_scale() {
        let mut a = vec![0.0; 9];
        a[4] = 2.0;
        let stack = ResponseStack {
            planes: vec![Plane::new(3, 3, a.clone()).unwrap(), Plane::new(3, 3, a).unwrap()],
            scales: vec![2.0, 3.0],
        };
        let dets = detect_in_stack(&stack, 0.5);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].radius, 3.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn response_is_linear(a in -3.0f64..3.0, seed in any::<u64>()) {
            let src = random_plane(24, 20, seed);
            let base = log_response_plane(&src, 1.7).unwrap();
            let scaled = log_response_plane(&src.map(|v| a * v), 1.7).unwrap();
            for (p, q) in base.data().iter().zip(scaled.data()) {
                prop_assert!((a * p - q).abs() < 1e-8);
            }
        }

        #[test]
        fn response_is_translation_equivariant(dx in 0usize..6, dy in 0usize..6, seed in any::<u64>()) {
            let (w, h) = (60usize, 60usize);
            let big = random_plane(w + dx, h + dy, seed);
            let crop = |ox: usize, oy: usize| {
                let mut d = Vec::with_capacity(w * h);
                for y in 0..h {
                    for x in 0..w {
                        d.push(big.get(x + ox, y + oy));
                    }
                }
                Plane::new(w, h, d).unwrap()
            };
            let t = 1.5;
            let margin = (KERNEL_TRUNCATION * t).ceil() as usize + 1;
            let a = log_response_plane(&crop(0, 0), t).unwrap();
            let b = log_response_plane(&crop(dx, dy), t).unwrap();
            for y in margin + dy..h - margin {
                for x in margin + dx..w - margin {
                    prop_assert!((a.get(x, y) - b.get(x - dx, y - dy)).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn detections_clear_threshold_and_nest(seed in any::<u64>()) {
            let src = random_plane(40, 40, seed).map(|v| v.round());
            let img = GrayImage::new(40, 40, src.into_data()).unwrap();
            let bank = ScaleBank::build(3.0, 1).unwrap();
            let low = detect(&img, &bank, 5.0).unwrap();
            let high = detect(&img, &bank, 25.0).unwrap();
            prop_assert!(low.iter().all(|d| d.response >= 5.0));
            prop_assert!(high.iter().all(|d| d.response >= 25.0));
            for d in &high {
                prop_assert!(low.contains(d));
            }
        }
    }
}
