//! A seeded, differentiable, two-layer encoder pair. Small enough to
//! finite-difference, deterministic enough to hash, and shaped exactly like
//! the pretrained pair so the full pipeline runs without any weights file.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::{
    fingerprint_tensors, BackendDescriptor, TextTokenizer, VisionTextBackend,
};
use crate::error::{Error, Result};
use crate::prompting::PromptAssembly;
use crate::tape::{Tape, Var};

/// Deterministic word-hash tokenizer with a seeded frozen embedding table.
pub struct HashTokenizer {
    table: Array2<f64>,
    context_limit: usize,
}

impl HashTokenizer {
    pub fn new(vocab: usize, token_dim: usize, context_limit: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x746f6b656e);
        let normal = Normal::new(0.0, 0.05).expect("valid std");
        let table = Array2::from_shape_fn((vocab, token_dim), |_| normal.sample(&mut rng));
        Self {
            table,
            context_limit,
        }
    }

    fn word_id(&self, word: &str) -> u32 {
        (crate::backbone::fnv1a64(word.bytes()) % self.table.nrows() as u64) as u32
    }

    pub fn vocab_size(&self) -> usize {
        self.table.nrows()
    }

    pub(crate) fn table(&self) -> &Array2<f64> {
        &self.table
    }
}

impl TextTokenizer for HashTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        self.encode_content(text)
    }

    fn encode_content(&self, text: &str) -> Result<Vec<u32>> {
        let ids: Vec<u32> = text
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| self.word_id(w))
            .collect();
        if ids.is_empty() {
            return Err(Error::Tokenizer(format!("no encodable tokens in {text:?}")));
        }
        Ok(ids)
    }

    fn embed(&self, ids: &[u32]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.table.ncols()));
        for (row, &id) in ids.iter().enumerate() {
            if id as usize >= self.table.nrows() {
                return Err(Error::Tokenizer(format!("token id {id} out of vocabulary")));
            }
            out.row_mut(row).assign(&self.table.row(id as usize));
        }
        Ok(out)
    }

    fn context_limit(&self) -> usize {
        self.context_limit
    }

    fn token_dim(&self) -> usize {
        self.table.ncols()
    }
}

/// Two-layer tanh MLP encoders over patch pixels (image side) and mean-pooled
/// token embeddings (text side).
pub struct ToyBackend {
    desc: BackendDescriptor,
    tokenizer: HashTokenizer,
    img_w1: Array2<f64>,
    img_b1: Array1<f64>,
    img_w2: Array2<f64>,
    img_b2: Array1<f64>,
    txt_w1: Array2<f64>,
    txt_b1: Array1<f64>,
    txt_w2: Array2<f64>,
    txt_b2: Array1<f64>,
}

pub const TOY_HIDDEN: usize = 32;
pub const TOY_VOCAB: usize = 4096;
pub const TOY_CONTEXT_LIMIT: usize = 77;

/// Build a fixed-seed toy encoder pair with the given dimensions.
pub fn make_toy_backend(seed: u64, dims: BackendDescriptor) -> Result<ToyBackend> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patch_dim = dims.patch_size * dims.patch_size * 3;
    let hidden = TOY_HIDDEN;

    let layer = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("valid std");
        Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
    };

    let img_w1 = layer(patch_dim, hidden, &mut rng);
    let img_w2 = layer(hidden, dims.raw_dim, &mut rng);
    let txt_w1 = layer(dims.text_token_dim, hidden, &mut rng);
    let txt_w2 = layer(hidden, dims.shared_dim, &mut rng);
    let bias = |n: usize, rng: &mut ChaCha8Rng| {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        Array1::from_shape_fn(n, |_| normal.sample(rng))
    };
    let img_b1 = bias(hidden, &mut rng);
    let img_b2 = bias(dims.raw_dim, &mut rng);
    let txt_b1 = bias(hidden, &mut rng);
    let txt_b2 = bias(dims.shared_dim, &mut rng);

    let tokenizer = HashTokenizer::new(TOY_VOCAB, dims.text_token_dim, TOY_CONTEXT_LIMIT, seed);

    Ok(ToyBackend {
        desc: dims,
        tokenizer,
        img_w1,
        img_b1,
        img_w2,
        img_b2,
        txt_w1,
        txt_b1,
        txt_w2,
        txt_b2,
    })
}

impl VisionTextBackend for ToyBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.desc
    }

    fn tokenizer(&self) -> &dyn TextTokenizer {
        &self.tokenizer
    }

    fn encode_image_on(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let shape = tape.value(image).shape().to_vec();
        let patch = self.desc.patch_size;
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::ShapeMismatch {
                what: "image tensor",
                expected: "(H, W, 3)".into(),
                got: format!("{shape:?}"),
            });
        }
        if shape[0] % patch != 0 || shape[1] % patch != 0 {
            return Err(Error::PatchDivisibility {
                height: shape[0],
                width: shape[1],
                patch_size: patch,
            });
        }
        let patches = tape.patchify(image, patch);
        let w1 = tape.constant(self.img_w1.clone());
        let b1 = tape.constant(self.img_b1.clone());
        let w2 = tape.constant(self.img_w2.clone());
        let b2 = tape.constant(self.img_b2.clone());
        let h = tape.matmul(patches, w1);
        let h = tape.add_bias(h, b1);
        let h = tape.tanh(h);
        let out = tape.matmul(h, w2);
        Ok(tape.add_bias(out, b2))
    }

    fn encode_text_on(
        &self,
        tape: &mut Tape,
        sequence: Var,
        assembly: &PromptAssembly,
    ) -> Result<Var> {
        let len = tape.value(sequence).shape()[0];
        if len > self.tokenizer.context_limit() {
            return Err(Error::ContextOverflow {
                length: len,
                limit: self.tokenizer.context_limit(),
            });
        }
        if tape.value(sequence).shape()[1] != self.desc.text_token_dim {
            return Err(Error::ShapeMismatch {
                what: "text token dim",
                expected: format!("{}", self.desc.text_token_dim),
                got: format!("{}", tape.value(sequence).shape()[1]),
            });
        }
        let _ = assembly; // mean pooling uses every slot
        let w1 = tape.constant(self.txt_w1.clone());
        let b1 = tape.constant(self.txt_b1.clone());
        let w2 = tape.constant(self.txt_w2.clone());
        let b2 = tape.constant(self.txt_b2.clone());
        let h = tape.matmul(sequence, w1);
        let h = tape.add_bias(h, b1);
        let h = tape.tanh(h);
        let pooled = tape.mean_axis0(h);
        let hidden = tape.value(pooled).len();
        let pooled = tape.reshape(pooled, &[1, hidden]);
        let out = tape.matmul(pooled, w2);
        Ok(tape.add_bias(out, b2))
    }

    fn parameter_fingerprint(&self) -> u64 {
        fingerprint_tensors([
            ("img_w1", self.img_w1.as_slice().unwrap()),
            ("img_b1", self.img_b1.as_slice().unwrap()),
            ("img_w2", self.img_w2.as_slice().unwrap()),
            ("img_b2", self.img_b2.as_slice().unwrap()),
            ("txt_w1", self.txt_w1.as_slice().unwrap()),
            ("txt_b1", self.txt_b1.as_slice().unwrap()),
            ("txt_w2", self.txt_w2.as_slice().unwrap()),
            ("txt_b2", self.txt_b2.as_slice().unwrap()),
            ("token_table", self.tokenizer.table().as_slice().unwrap()),
        ])
    }
}
