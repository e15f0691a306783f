//! From the final similarity map to a full-resolution anomaly score map and
//! a scalar image score: bilinear interpolation to input resolution,
//! Gaussian smoothing, then the mean of the top-K pixels.

use ndarray::Array2;

use crate::alignment::SimilarityMap;
use crate::imageops::{bilinear_resize, gaussian_blur};

/// Default smoothing strength, in pixels.
pub const DEFAULT_SIGMA: f64 = 4.0;

/// Default number of top pixels averaged into the image score.
pub const DEFAULT_K_TOP: usize = 500;

/// Full-resolution anomaly map plus the scalar image score.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub pixels: Array2<f64>,
    pub image_score: f64,
}

/// Interpolate the map to `(height, width)` and smooth it with a Gaussian of
/// standard deviation `sigma` (`0` skips the blur); output clipped to `[0, 1]`.
pub fn postprocess(map: &SimilarityMap, height: usize, width: usize, sigma: f64) -> Array2<f64> {
    let up = bilinear_resize(map.values(), height, width);
    let smoothed = if sigma > 0.0 {
        gaussian_blur(&up, sigma)
    } else {
        up
    };
    smoothed.mapv(|v| v.clamp(0.0, 1.0))
}

/// Mean of the `k_top` largest map values; saturates to the global mean when
/// `k_top` covers the whole map.
pub fn image_score(pixels: &Array2<f64>, k_top: usize) -> f64 {
    assert!(k_top >= 1, "k_top must be at least 1");
    let n = pixels.len();
    if k_top >= n {
        return pixels.sum() / n as f64;
    }
    let mut values: Vec<f64> = pixels.iter().copied().collect();
    // Partition so the k_top largest sit at the front.
    values.select_nth_unstable_by(k_top - 1, |a, b| b.partial_cmp(a).expect("finite scores"));
    values[..k_top].iter().sum::<f64>() / k_top as f64
}

/// Convenience: postprocess and score in one step.
pub fn score_map(
    map: &SimilarityMap,
    height: usize,
    width: usize,
    sigma: f64,
    k_top: usize,
) -> ScoreMap {
    let pixels = postprocess(map, height, width, sigma);
    let image_score = image_score(&pixels, k_top);
    ScoreMap { pixels, image_score }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn constant_map_stays_constant() {
        let map = SimilarityMap::from_logits(Array2::from_elem((14, 14), logit(0.37)));
        let out = postprocess(&map, 224, 224, 4.0);
        assert_eq!(out.shape(), &[224, 224]);
        assert!(out.iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn sigma_zero_matches_bilinear_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Array2::from_shape_fn((14, 14), |_| rng.random_range(-2.0..2.0));
        let map = SimilarityMap::from_logits(logits);
        let out = postprocess(&map, 224, 224, 0.0);

        // Independent bilinear gather, half-pixel convention.
        let src = map.values();
        let scale = 14.0 / 224.0;
        for i in 0..224 {
            for j in 0..224 {
                let y = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, 13.0);
                let x = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, 13.0);
                let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(13), (x0 + 1).min(13));
                let (ty, tx) = (y - y0 as f64, x - x0 as f64);
                let expect = src[(y0, x0)] * (1.0 - ty) * (1.0 - tx)
                    + src[(y0, x1)] * (1.0 - ty) * tx
                    + src[(y1, x0)] * ty * (1.0 - tx)
                    + src[(y1, x1)] * ty * tx;
                assert!((out[(i, j)] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn blur_preserves_mean_on_random_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Array2::from_shape_fn((14, 14), |_| rng.random_range(-2.0..2.0));
        let map = SimilarityMap::from_logits(logits);
        let plain = postprocess(&map, 112, 112, 0.0);
        let smoothed = postprocess(&map, 112, 112, 3.0);
        assert!((plain.mean().unwrap() - smoothed.mean().unwrap()).abs() < 1e-6);
    }

    #[test]
    fn image_score_saturates_to_global_mean() {
        let pixels = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64 / 16.0);
        let mean = pixels.mean().unwrap();
        assert!((image_score(&pixels, 16) - mean).abs() < 1e-12);
        assert!((image_score(&pixels, 17) - mean).abs() < 1e-12);
    }

    #[test]
    fn top_k_matches_sort_oracle() {
        let pixels =
            Array2::from_shape_vec((2, 2), vec![0.9, 0.8, 0.1, 0.1]).unwrap();
        assert_eq!(image_score(&pixels, 2), (0.9 + 0.8) / 2.0);
        assert!((image_score(&pixels, 2) - 0.85).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let big = Array2::from_shape_fn((20, 20), |_| rng.random_range(0.0..1.0));
        for k in [1, 7, 100, 399] {
            let mut sorted: Vec<f64> = big.iter().copied().collect();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let oracle = sorted[..k].iter().sum::<f64>() / k as f64;
            assert!((image_score(&big, k) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn raising_a_pixel_never_lowers_the_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pixels = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..0.9));
        for k in [1, 5, 64] {
            let before = image_score(&pixels, k);
            let mut bumped = pixels.clone();
            bumped[(3, 4)] += 0.1;
            assert!(image_score(&bumped, k) >= before);
        }
    }

    #[test]
    fn top_k_is_scale_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pixels = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..1.0));
        for k in [1, 9, 33] {
            let base = image_score(&pixels, k);
            let scaled = pixels.mapv(|v| 2.5 * v);
            assert!((image_score(&scaled, k) - 2.5 * base).abs() < 1e-12);
        }
    }

    #[test]
    fn output_shape_is_input_resolution() {
        let map = SimilarityMap::from_logits(Array2::zeros((4, 4)));
        for (h, w) in [(64, 64), (224, 224), (96, 128)] {
            assert_eq!(postprocess(&map, h, w, 2.0).shape(), &[h, w]);
        }
    }
}
