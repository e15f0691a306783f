//! Seeded synthetic image streams for desk-scale runs: smooth "normal"
//! sources plus high-contrast textures, so perturbed regions are cleanly
//! separable from clean ones. Used by tests, the acceptance suite and the
//! Python smoke script.

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::BackendDescriptor;
use crate::imageops::ImageTensor;
use crate::synthesis::{make_sample, SyntheticSample, SynthesisConfig};

/// Small-dimension descriptor matched to [`toy_stream`] image sizes.
pub fn toy_descriptor() -> BackendDescriptor {
    BackendDescriptor {
        patch_size: 8,
        feature_stage: 7,
        raw_dim: 12,
        shared_dim: 8,
        text_token_dim: 8,
    }
}

/// A ready-to-train synthetic world.
pub struct ToyStream {
    pub sources: Vec<ImageTensor>,
    pub textures: Vec<ImageTensor>,
    pub synthesis: SynthesisConfig,
}

/// Smooth low-variance source image.
fn smooth_source(size: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let base: f64 = rng.random_range(0.3..0.5);
    let slope_y: f64 = rng.random_range(-0.1..0.1);
    let slope_x: f64 = rng.random_range(-0.1..0.1);
    let data = Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        base + slope_y * y as f64 / size as f64
            + slope_x * x as f64 / size as f64
            + 0.02 * c as f64
    });
    ImageTensor::from_clamped(data)
}

/// High-contrast checkerboard texture.
fn contrast_texture(size: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let cell = *[1usize, 2, 4].get(rng.random_range(0..3)).unwrap();
    let lo: f64 = rng.random_range(0.0..0.1);
    let hi: f64 = rng.random_range(0.85..1.0);
    let data = Array3::from_shape_fn((size, size, 3), |(y, x, _)| {
        if ((y / cell) + (x / cell)) % 2 == 0 {
            hi
        } else {
            lo
        }
    });
    ImageTensor::from_clamped(data)
}

/// Build `n` sources, four textures and a synthesis config tuned for clean
/// separability (strong opacity, explicit textures).
pub fn toy_stream(n: usize, size: usize, seed: u64) -> ToyStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7075_6c73);
    let sources = (0..n).map(|_| smooth_source(size, &mut rng)).collect();
    let textures = (0..4).map(|_| contrast_texture(size, &mut rng)).collect();
    let synthesis = SynthesisConfig {
        opacity_range: (0.6, 1.0),
        anomaly_probability: 0.6,
        seed,
        ..Default::default()
    };
    ToyStream {
        sources,
        textures,
        synthesis,
    }
}

/// Draw a held-out labeled set from fresh sources with the stream's
/// synthesis settings (anomaly probability forced to one half).
pub fn toy_holdout(
    stream: &ToyStream,
    n: usize,
    size: usize,
    patch_size: usize,
    seed: u64,
) -> Vec<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x686f_6c64);
    let cfg = SynthesisConfig {
        anomaly_probability: 0.5,
        ..stream.synthesis.clone()
    };
    (0..n)
        .map(|_| {
            let source = smooth_source(size, &mut rng);
            let t = rng.random_range(0..stream.textures.len());
            make_sample(&source, &cfg, patch_size, Some(&stream.textures[t]), &mut rng)
                .expect("toy sample")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_seeded() {
        let a = toy_stream(3, 32, 1);
        let b = toy_stream(3, 32, 1);
        assert_eq!(a.sources[2].data(), b.sources[2].data());
        assert_eq!(a.textures[0].data(), b.textures[0].data());
        let c = toy_stream(3, 32, 2);
        assert_ne!(a.sources[0].data(), c.sources[0].data());
    }

    #[test]
    fn holdout_contains_both_labels() {
        let stream = toy_stream(4, 32, 3);
        let held = toy_holdout(&stream, 40, 32, 8, 9);
        let anomalous = held.iter().filter(|s| s.is_anomalous).count();
        assert!(anomalous > 5 && anomalous < 35);
    }
}
