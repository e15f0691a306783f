//! Frozen vision-language encoders behind a uniform interface.
//!
//! Two implementations are provided: a weights-file-backed transformer pair
//! ([`pretrained::PretrainedBackend`]) and a seeded two-layer toy pair
//! ([`toy::ToyBackend`]) that makes the whole training loop testable without
//! pretrained weights. Backends are immutable after construction; gradients
//! flow *through* them (into prompt vectors and projection layers) but never
//! *into* them.

pub mod bpe;
pub mod pretrained;
pub mod toy;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::imageops::ImageTensor;
use crate::prompting::PromptAssembly;
use crate::tape::{Tape, Var};

/// Static dimensions of an encoder pair.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct BackendDescriptor {
    /// Side length of a square image patch, in pixels.
    pub patch_size: usize,
    /// 1-indexed transformer block whose output (class token dropped, before
    /// the final layer norm) is taken as the visual representation.
    pub feature_stage: usize,
    /// Width of the raw patch features emitted by the image encoder.
    pub raw_dim: usize,
    /// Shared text-image embedding width; equals the text encoder output.
    pub shared_dim: usize,
    /// Width of a single text token embedding.
    pub text_token_dim: usize,
}

impl Default for BackendDescriptor {
    fn default() -> Self {
        Self {
            patch_size: 16,
            feature_stage: 7,
            raw_dim: 768,
            shared_dim: 512,
            text_token_dim: 512,
        }
    }
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.feature_stage == 0
            || self.raw_dim == 0
            || self.shared_dim == 0
            || self.text_token_dim == 0
        {
            return Err(Error::InvalidConfig(
                "backend dimensions must all be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-patch visual embeddings from the image encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureMap {
    /// `N_p x dim` feature rows, patches in raster order.
    pub features: Array2<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Transformer stage the features were taken from.
    pub stage_index: usize,
}

impl PatchFeatureMap {
    /// Side of the square patch grid; errors when the grid is rectangular.
    pub fn grid_side(&self) -> Result<usize> {
        if self.grid_h != self.grid_w {
            return Err(Error::ShapeMismatch {
                what: "patch grid",
                expected: "square grid".into(),
                got: format!("{}x{}", self.grid_h, self.grid_w),
            });
        }
        Ok(self.grid_h)
    }

    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Output of the text encoder: one row per prompt category.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    /// `K x C`; `K = 1` in the unified setting.
    pub matrix: Array2<f64>,
}

impl TextEmbedding {
    pub fn k(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Tokenization plus the frozen token-embedding table of a text encoder.
pub trait TextTokenizer {
    /// Token ids for `text`, including any special tokens the encoder
    /// expects around the content.
    fn encode(&self, text: &str) -> Result<Vec<u32>>;

    /// Token ids for `text` without special tokens.
    fn encode_content(&self, text: &str) -> Result<Vec<u32>>;

    /// Number of special tokens prepended by [`TextTokenizer::encode`].
    fn leading_special_count(&self) -> usize {
        0
    }

    /// End-of-text token id, when the vocabulary has one.
    fn eot_id(&self) -> Option<u32> {
        None
    }

    /// Frozen embedding rows for `ids`, shape `(len, token_dim)`.
    fn embed(&self, ids: &[u32]) -> Result<Array2<f64>>;

    fn context_limit(&self) -> usize;

    fn token_dim(&self) -> usize;
}

/// A frozen image/text encoder pair.
///
/// The `*_on` methods record the forward pass on a [`Tape`] so that callers
/// can differentiate through the encoders with respect to their *inputs*
/// (attention-modulated images, learnable prompt slots); the encoder weights
/// themselves always enter the tape as constants.
pub trait VisionTextBackend {
    fn descriptor(&self) -> &BackendDescriptor;

    fn tokenizer(&self) -> &dyn TextTokenizer;

    /// Patch features of `image` at the configured stage, `(N_p, raw_dim)`.
    /// The class token (when the encoder has one) is excluded.
    fn encode_image_on(&self, tape: &mut Tape, image: Var) -> Result<Var>;

    /// Text embedding `(K, shared_dim)` for an assembled prompt sequence.
    /// `sequence` must be the 2-d `(len, token_dim)` slice of a `K = 1`
    /// assembly; `assembly` supplies pooling metadata.
    fn encode_text_on(&self, tape: &mut Tape, sequence: Var, assembly: &PromptAssembly)
        -> Result<Var>;

    /// Order-stable hash of every frozen weight; training must not change it.
    fn parameter_fingerprint(&self) -> u64;

    /// Eager convenience wrapper over [`VisionTextBackend::encode_image_on`].
    fn encode_image(&self, image: &ImageTensor) -> Result<PatchFeatureMap> {
        let patch = self.descriptor().patch_size;
        let (h, w) = (image.height(), image.width());
        if h % patch != 0 || w % patch != 0 {
            return Err(Error::PatchDivisibility {
                height: h,
                width: w,
                patch_size: patch,
            });
        }
        let mut tape = Tape::new();
        let img = tape.constant(image.data().clone());
        let feats = self.encode_image_on(&mut tape, img)?;
        Ok(PatchFeatureMap {
            features: tape.value2(feats),
            grid_h: h / patch,
            grid_w: w / patch,
            stage_index: self.descriptor().feature_stage,
        })
    }

    /// Eager convenience wrapper over [`VisionTextBackend::encode_text_on`].
    fn encode_text(&self, assembly: &PromptAssembly) -> Result<TextEmbedding> {
        let limit = self.tokenizer().context_limit();
        if assembly.len() > limit {
            return Err(Error::ContextOverflow {
                length: assembly.len(),
                limit,
            });
        }
        let mut tape = Tape::new();
        let mut rows = Vec::with_capacity(assembly.k());
        for k in 0..assembly.k() {
            let seq = tape.constant(assembly.sequence_2d(k));
            let v = self.encode_text_on(&mut tape, seq, assembly)?;
            rows.push(tape.value2(v));
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        let matrix = ndarray::concatenate(ndarray::Axis(0), &views).expect("text rows");
        Ok(TextEmbedding { matrix })
    }
}

/// FNV-1a over a byte stream; used for frozen-weight fingerprints.
pub fn fnv1a64(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Fingerprint helper over a sequence of named f64 tensors.
pub fn fingerprint_tensors<'a>(
    tensors: impl IntoIterator<Item = (&'a str, &'a [f64])>,
) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for (name, data) in tensors {
        hash = fnv1a64(name.bytes().chain(std::iter::once(0u8)))
            ^ hash.rotate_left(13);
        for v in data {
            for b in v.to_le_bytes() {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        }
    }
    hash
}

pub use toy::{make_toy_backend, ToyBackend};
