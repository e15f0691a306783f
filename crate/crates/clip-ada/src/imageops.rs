//! Pixel-level primitives: the image tensor type, bilinear resampling and
//! Gaussian smoothing.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// An `H x W x 3` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.shape()[2] != 3 {
            return Err(Error::ShapeMismatch {
                what: "image channels",
                expected: "3".into(),
                got: format!("{}", data.shape()[2]),
            });
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::ShapeMismatch {
                what: "image value range",
                expected: "[0, 1]".into(),
                got: "out-of-range value".into(),
            });
        }
        Ok(Self { data })
    }

    /// Clamp values into `[0, 1]` and wrap. For synthetic sources whose
    /// arithmetic may drift slightly out of range.
    pub fn from_clamped(mut data: Array3<f64>) -> Self {
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self { data }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self {
            data: Array3::from_elem((height, width, 3), value.clamp(0.0, 1.0)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }
}

fn taps(src_len: usize, dst_len: usize, dst_idx: usize) -> (usize, usize, f64) {
    // Half-pixel-center convention; weights always sum to one, so constants
    // are preserved exactly.
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst_idx as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Bilinear resample of a 2-d map.
pub fn bilinear_resize(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = (src.nrows(), src.ncols());
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0, "bilinear sizes");
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    for i in 0..out_h {
        let (y0, y1, ty) = taps(h, out_h, i);
        for j in 0..out_w {
            let (x0, x1, tx) = taps(w, out_w, j);
            let top = src[(y0, x0)] * (1.0 - tx) + src[(y0, x1)] * tx;
            let bot = src[(y1, x0)] * (1.0 - tx) + src[(y1, x1)] * tx;
            out[(i, j)] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`]: scatters an output-sized cotangent back to
/// the source grid.
pub fn bilinear_resize_vjp(
    src_h: usize,
    src_w: usize,
    out_h: usize,
    out_w: usize,
    cotangent: &Array2<f64>,
) -> Array2<f64> {
    let mut grad = Array2::<f64>::zeros((src_h, src_w));
    for i in 0..out_h {
        let (y0, y1, ty) = taps(src_h, out_h, i);
        for j in 0..out_w {
            let (x0, x1, tx) = taps(src_w, out_w, j);
            let g = cotangent[(i, j)];
            grad[(y0, x0)] += g * (1.0 - ty) * (1.0 - tx);
            grad[(y0, x1)] += g * (1.0 - ty) * tx;
            grad[(y1, x0)] += g * ty * (1.0 - tx);
            grad[(y1, x1)] += g * ty * tx;
        }
    }
    grad
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    // Truncated at 4 sigma.
    let radius = (4.0 * sigma).ceil() as usize;
    let mut k = Vec::with_capacity(2 * radius + 1);
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        k.push((-0.5 * (d / sigma).powi(2)).exp());
    }
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn fold(mut i: i64, n: i64) -> usize {
    // Symmetric reflection (edge repeated): -1 -> 0, n -> n-1.
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur with symmetric boundary reflection. `sigma == 0`
/// returns the input unchanged.
pub fn gaussian_blur(map: &Array2<f64>, sigma: f64) -> Array2<f64> {
    assert!(sigma >= 0.0, "sigma must be nonnegative");
    if sigma == 0.0 {
        return map.clone();
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as i64;
    let (h, w) = (map.nrows() as i64, map.ncols() as i64);

    let mut rows = Array2::<f64>::zeros(map.raw_dim());
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * map[(i as usize, fold(j + t as i64 - radius, w))];
            }
            rows[(i as usize, j as usize)] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros(map.raw_dim());
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * rows[(fold(i + t as i64 - radius, h), j as usize)];
            }
            out[(i as usize, j as usize)] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bilinear_preserves_constants() {
        let src = Array2::from_elem((3, 5), 0.42);
        let out = bilinear_resize(&src, 17, 11);
        assert!(out.iter().all(|&v| (v - 0.42).abs() < 1e-15));
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let src = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let out = bilinear_resize(&src, 2, 2);
        assert_eq!(src, out);
    }

    #[test]
    fn bilinear_vjp_is_adjoint() {
        // <A x, y> == <x, A^T y> for random x, y.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array2::from_shape_fn((5, 7), |_| rng.random_range(-1.0..1.0f64));
        let y = Array2::from_shape_fn((13, 9), |_| rng.random_range(-1.0..1.0f64));
        let ax = bilinear_resize(&x, 13, 9);
        let aty = bilinear_resize_vjp(5, 7, 13, 9, &y);
        let lhs: f64 = (&ax * &y).sum();
        let rhs: f64 = (&x * &aty).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn blur_preserves_constants_and_mean() {
        let c = Array2::from_elem((32, 32), 0.3);
        let blurred = gaussian_blur(&c, 2.0);
        assert!(blurred.iter().all(|&v| (v - 0.3).abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Array2::from_shape_fn((32, 32), |_| rng.random_range(0.0..1.0f64));
        let blurred = gaussian_blur(&m, 2.0);
        let mean_in = m.mean().unwrap();
        let mean_out = blurred.mean().unwrap();
        assert!((mean_in - mean_out).abs() < 1e-12);
    }

    #[test]
    fn blur_sigma_zero_is_identity() {
        let m = arr2(&[[0.1, 0.9], [0.4, 0.6]]);
        assert_eq!(gaussian_blur(&m, 0.0), m);
    }

    #[test]
    fn image_tensor_rejects_out_of_range() {
        let bad = Array3::from_elem((2, 2, 3), 1.5);
        assert!(ImageTensor::new(bad).is_err());
        let ok = Array3::from_elem((2, 2, 3), 0.5);
        assert!(ImageTensor::new(ok).is_ok());
    }
}
