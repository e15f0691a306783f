//! Self-supervision signal: normal images are perturbed with textured
//! regions cut out by thresholded gradient noise, producing an anomalous
//! image together with its exact pixel mask and the patch-level supervision
//! grid. Everything is a pure function of (inputs, rng state).

use std::path::PathBuf;

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::imageops::ImageTensor;

/// Knobs of the perturbation generator.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    /// Inclusive range of the per-axis noise frequency exponent; each axis
    /// draws `k` here and uses `2^k` lattice cells.
    pub perlin_scale_range: (u32, u32),
    /// Noise threshold above which a pixel joins the mask.
    pub binarize_threshold: f64,
    /// Uniform range of the blending opacity `beta`.
    pub opacity_range: (f64, f64),
    /// Probability that a drawn sample is anomalous.
    pub anomaly_probability: f64,
    /// Minimum anomalous-pixel fraction for a patch cell to count as
    /// anomalous in the supervision grid.
    pub tau_patch: f64,
    /// Directory of texture images; when absent, textures are jittered,
    /// tile-shuffled copies of the source itself.
    pub texture_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            perlin_scale_range: (1, 6),
            binarize_threshold: 0.5,
            opacity_range: (0.15, 1.0),
            anomaly_probability: 0.5,
            tau_patch: 0.3,
            texture_dir: None,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.opacity_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "opacity range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        if !(0.0 < self.anomaly_probability && self.anomaly_probability <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "anomaly probability {} must be in (0, 1]",
                self.anomaly_probability
            )));
        }
        if self.perlin_scale_range.0 > self.perlin_scale_range.1 {
            return Err(Error::InvalidConfig("empty perlin scale range".into()));
        }
        if !(0.0 < self.tau_patch && self.tau_patch <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "tau_patch {} must be in (0, 1]",
                self.tau_patch
            )));
        }
        Ok(())
    }

    /// `anomaly_probability = 0` is allowed only for all-clean streams; the
    /// general validation treats it as a holdout switch.
    pub fn with_anomaly_probability(mut self, p: f64) -> Self {
        self.anomaly_probability = p;
        self
    }
}

/// A perturbed image with pixel and patch ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: ImageTensor,
    /// `H x W` binary pixel mask; nonzero iff the sample is anomalous.
    pub mask_full: Array2<u8>,
    /// `(H/patch) x (W/patch)` supervision grid from area-fraction pooling.
    pub mask_patch: Array2<u8>,
    pub is_anomalous: bool,
}

/// Classic 2-d gradient noise with the `sqrt(2)` amplitude normalization, so
/// values land in roughly `[-1, 1]`.
pub fn perlin2d(h: usize, w: usize, fy: usize, fx: usize, rng: &mut impl Rng) -> Array2<f64> {
    assert!(fy >= 1 && fx >= 1, "perlin frequency");
    let mut grads = Array2::<(f64, f64)>::from_elem((fy + 1, fx + 1), (0.0, 0.0));
    for g in grads.iter_mut() {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        *g = (angle.cos(), angle.sin());
    }
    let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);

    Array2::from_shape_fn((h, w), |(y, x)| {
        let v = y as f64 / h as f64 * fy as f64;
        let u = x as f64 / w as f64 * fx as f64;
        let (cy, cx) = (v.floor() as usize, u.floor() as usize);
        let (ty, tx) = (v - cy as f64, u - cx as f64);
        let dot = |gy: usize, gx: usize, dy: f64, dx: f64| {
            let (gxv, gyv) = grads[(gy, gx)];
            gxv * dx + gyv * dy
        };
        let n00 = dot(cy, cx, ty, tx);
        let n01 = dot(cy, cx + 1, ty, tx - 1.0);
        let n10 = dot(cy + 1, cx, ty - 1.0, tx);
        let n11 = dot(cy + 1, cx + 1, ty - 1.0, tx - 1.0);
        let (wy, wx) = (fade(ty), fade(tx));
        let top = n00 * (1.0 - wx) + n01 * wx;
        let bot = n10 * (1.0 - wx) + n11 * wx;
        std::f64::consts::SQRT_2 * (top * (1.0 - wy) + bot * wy)
    })
}

/// Thresholded multi-frequency gradient noise; resamples on an empty result
/// and falls back to a random rectangle after ten dry tries.
pub fn generate_mask(
    cfg: &SynthesisConfig,
    h: usize,
    w: usize,
    rng: &mut impl Rng,
) -> Array2<u8> {
    let (lo, hi) = cfg.perlin_scale_range;
    for _ in 0..10 {
        let ky = rng.random_range(lo..=hi);
        let kx = rng.random_range(lo..=hi);
        let noise = perlin2d(h, w, 1 << ky, 1 << kx, rng);
        let mask = noise.mapv(|v| u8::from(v > cfg.binarize_threshold));
        if mask.iter().any(|&m| m == 1) {
            return mask;
        }
    }
    // Rectangle fallback keeps the anomalous contract (nonempty mask).
    let rh = ((h as f64) * rng.random_range(0.1..0.3)).ceil() as usize;
    let rw = ((w as f64) * rng.random_range(0.1..0.3)).ceil() as usize;
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    let mut mask = Array2::<u8>::zeros((h, w));
    mask.slice_mut(ndarray::s![top..top + rh, left..left + rw])
        .fill(1);
    mask
}

/// `out = (1 - mask) * source + mask * (beta * texture + (1 - beta) * source)`.
/// Pixels outside the mask are bit-identical to the source.
pub fn blend(
    source: &ImageTensor,
    texture: &ImageTensor,
    mask: &Array2<u8>,
    beta: f64,
) -> Result<ImageTensor> {
    if source.data().shape() != texture.data().shape() {
        return Err(Error::ShapeMismatch {
            what: "blend texture",
            expected: format!("{:?}", source.data().shape()),
            got: format!("{:?}", texture.data().shape()),
        });
    }
    if mask.shape() != [source.height(), source.width()] {
        return Err(Error::ShapeMismatch {
            what: "blend mask",
            expected: format!("{}x{}", source.height(), source.width()),
            got: format!("{:?}", mask.shape()),
        });
    }
    if !(0.0 < beta && beta <= 1.0) {
        return Err(Error::InvalidConfig(format!("beta {beta} out of (0, 1]")));
    }
    let mut out = source.data().clone();
    for ((h, w, c), px) in out.indexed_iter_mut() {
        if mask[(h, w)] != 0 {
            *px = beta * texture.data()[(h, w, c)] + (1.0 - beta) * *px;
        }
    }
    Ok(ImageTensor::from_clamped(out))
}

/// Area-fraction pooling of a pixel mask down to the patch grid: a cell is
/// anomalous when at least `tau` of its pixels are.
pub fn mask_to_patch_grid(mask: &Array2<u8>, patch_size: usize, tau: f64) -> Array2<u8> {
    let (h, w) = (mask.nrows(), mask.ncols());
    assert!(
        h % patch_size == 0 && w % patch_size == 0,
        "mask not divisible by patch size"
    );
    let (gh, gw) = (h / patch_size, w / patch_size);
    let area = (patch_size * patch_size) as f64;
    Array2::from_shape_fn((gh, gw), |(gy, gx)| {
        let mut count = 0usize;
        for py in 0..patch_size {
            for px in 0..patch_size {
                count += mask[(gy * patch_size + py, gx * patch_size + px)] as usize;
            }
        }
        u8::from(count as f64 / area >= tau)
    })
}

/// Jittered, tile-shuffled copy of the source used as the anomaly texture
/// when no external texture folder is configured.
pub fn self_augment_texture(source: &ImageTensor, rng: &mut impl Rng) -> ImageTensor {
    let (h, w) = (source.height(), source.width());
    let tile = [8usize, 4, 2, 1]
        .into_iter()
        .find(|t| h % t == 0 && w % t == 0)
        .unwrap_or(1);
    let (gh, gw) = (h / tile, w / tile);

    let mut order: Vec<usize> = (0..gh * gw).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }

    let invert = rng.random_range(0.0..1.0) < 0.5;
    let scale: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.4));
    let offset: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.25..0.25));

    let mut out = Array3::<f64>::zeros((h, w, 3));
    for (dst, &src_idx) in order.iter().enumerate() {
        let (dy, dx) = (dst / gw * tile, dst % gw * tile);
        let (sy, sx) = (src_idx / gw * tile, src_idx % gw * tile);
        for py in 0..tile {
            for px in 0..tile {
                for c in 0..3 {
                    let mut v = source.data()[(sy + py, sx + px, c)];
                    if invert {
                        v = 1.0 - v;
                    }
                    out[(dy + py, dx + px, c)] = v * scale[c] + offset[c];
                }
            }
        }
    }
    ImageTensor::from_clamped(out)
}

/// Draw one training sample from a normal source image.
///
/// With probability `anomaly_probability` the image is perturbed inside a
/// generated mask; otherwise the clean image is returned with zero masks.
/// `texture` supplies the anomaly appearance when an external texture was
/// loaded; `None` falls back to self-augmentation.
pub fn make_sample(
    source: &ImageTensor,
    cfg: &SynthesisConfig,
    patch_size: usize,
    texture: Option<&ImageTensor>,
    rng: &mut impl Rng,
) -> Result<SyntheticSample> {
    let (h, w) = (source.height(), source.width());
    if h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::PatchDivisibility {
            height: h,
            width: w,
            patch_size,
        });
    }
    let anomalous = rng.random_range(0.0..1.0) < cfg.anomaly_probability;
    if !anomalous {
        return Ok(SyntheticSample {
            image: source.clone(),
            mask_full: Array2::zeros((h, w)),
            mask_patch: Array2::zeros((h / patch_size, w / patch_size)),
            is_anomalous: false,
        });
    }

    let mask = generate_mask(cfg, h, w, rng);
    let beta = rng.random_range(cfg.opacity_range.0..=cfg.opacity_range.1);
    let texture = match texture {
        Some(t) => t.clone(),
        None => self_augment_texture(source, rng),
    };
    let image = blend(source, &texture, &mask, beta)?;
    let mask_patch = mask_to_patch_grid(&mask, patch_size, cfg.tau_patch);
    Ok(SyntheticSample {
        image,
        mask_full: mask,
        mask_patch,
        is_anomalous: true,
    })
}
