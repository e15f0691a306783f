//! Text-prompt construction: a fixed template embedded once, with a bank of
//! learnable vectors spliced in at a configurable position. Only the bank is
//! trainable; every template slot stays constant.

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::backbone::TextTokenizer;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Default class-free template. The placeholder class word is replaced by the
/// learnable vectors at training time, so the string carries no category name.
pub const DEFAULT_TEMPLATE: &str =
    "A photo of a damaged object with defects for anomaly detection";

/// Prefix after which learnable vectors are inserted by default.
pub const DEFAULT_INSERT_PREFIX: &str = "A photo of a";

/// Standard deviation of the seeded Gaussian prompt initialization.
pub const PROMPT_INIT_STD: f64 = 0.02;

/// A tokenized and embedded text template.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplate {
    pub text: String,
    pub token_ids: Vec<u32>,
    /// `(K, L, D)` embedded tokens; `K = 1` for a shared template.
    pub embedded: Array3<f64>,
    /// Position of the end-of-text token within `token_ids`, when present.
    pub eot_index: Option<usize>,
}

impl PromptTemplate {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn token_dim(&self) -> usize {
        self.embedded.shape()[2]
    }
}

/// The trainable prompt vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnablePromptBank {
    /// `(S, K, D)` vectors; the only trainable parameters of this module.
    pub vectors: Array3<f64>,
    /// Template token index after which the vectors are inserted.
    pub insert_position: usize,
}

impl LearnablePromptBank {
    pub fn s_prompt(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn token_dim(&self) -> usize {
        self.vectors.shape()[2]
    }

    pub fn with_insert_position(mut self, position: usize) -> Self {
        self.insert_position = position;
        self
    }

    /// `(S, D)` view of the `K = 1` bank, the layout placed on the tape.
    pub fn vectors_2d(&self) -> Array2<f64> {
        assert_eq!(self.k(), 1, "2-d bank view requires K = 1");
        self.vectors
            .index_axis(Axis(1), 0)
            .to_owned()
    }

    pub fn set_from_2d(&mut self, flat: &Array2<f64>) {
        assert_eq!(self.k(), 1, "2-d bank update requires K = 1");
        self.vectors
            .index_axis_mut(Axis(1), 0)
            .assign(&flat.view());
    }
}

/// Template tokens with the learnable vectors spliced in.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptAssembly {
    /// `(K, L + S, D)` full input sequence for the text encoder.
    pub sequence: Array3<f64>,
    /// First slot occupied by a learnable vector.
    pub learnable_start: usize,
    /// Number of learnable slots.
    pub s_prompt: usize,
    /// Slot of the end-of-text token after insertion, when the template has
    /// one; pooling backends use it to pick the output row.
    pub eot_slot: Option<usize>,
}

impl PromptAssembly {
    pub fn len(&self) -> usize {
        self.sequence.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn k(&self) -> usize {
        self.sequence.shape()[0]
    }

    pub fn token_dim(&self) -> usize {
        self.sequence.shape()[2]
    }

    /// Slot range `[start, end)` holding learnable vectors.
    pub fn learnable_span(&self) -> (usize, usize) {
        (self.learnable_start, self.learnable_start + self.s_prompt)
    }

    /// The `(len, D)` sequence of one category row.
    pub fn sequence_2d(&self, k: usize) -> Array2<f64> {
        self.sequence.index_axis(Axis(0), k).to_owned()
    }
}

/// Tokenize and embed a template string.
pub fn build_template(text: &str, tokenizer: &dyn TextTokenizer) -> Result<PromptTemplate> {
    if text.trim().is_empty() {
        return Err(Error::Tokenizer("template text is empty".into()));
    }
    let token_ids = tokenizer.encode(text)?;
    let embedded = tokenizer.embed(&token_ids)?;
    let l = token_ids.len();
    let d = tokenizer.token_dim();
    let eot_index = tokenizer
        .eot_id()
        .and_then(|eot| token_ids.iter().rposition(|&id| id == eot));
    Ok(PromptTemplate {
        text: text.to_string(),
        token_ids,
        embedded: embedded
            .into_shape_with_order((1, l, d))
            .expect("template embedding shape"),
        eot_index,
    })
}

/// Draw a seeded bank of `s_prompt` learnable vectors, each `K x D`,
/// i.i.d. Gaussian with standard deviation [`PROMPT_INIT_STD`].
pub fn init_prompt_bank(
    s_prompt: usize,
    k: usize,
    d: usize,
    seed: u64,
) -> Result<LearnablePromptBank> {
    if s_prompt == 0 {
        return Err(Error::InvalidConfig(
            "prompt bank needs at least one vector".into(),
        ));
    }
    if k == 0 || d == 0 {
        return Err(Error::InvalidConfig("prompt bank dims must be positive".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, PROMPT_INIT_STD).expect("valid std");
    let vectors = Array3::from_shape_fn((s_prompt, k, d), |_| normal.sample(&mut rng));
    Ok(LearnablePromptBank {
        vectors,
        insert_position: 0,
    })
}

/// Insert position just after a tokenized prefix of the template, the spot
/// the removed class word would have occupied.
pub fn default_insert_position(
    tokenizer: &dyn TextTokenizer,
    prefix: &str,
) -> Result<usize> {
    let content = tokenizer.encode_content(prefix)?;
    Ok(tokenizer.leading_special_count() + content.len().saturating_sub(1))
}

/// Splice the bank into the template: slots `0..=x` of the template, then the
/// `S` learnable vectors, then the remaining template slots.
pub fn assemble(template: &PromptTemplate, bank: &LearnablePromptBank) -> Result<PromptAssembly> {
    let l = template.len();
    let x = bank.insert_position;
    if x > l {
        return Err(Error::PositionOutOfRange { position: x, limit: l });
    }
    if template.token_dim() != bank.token_dim() {
        return Err(Error::ShapeMismatch {
            what: "prompt token dim",
            expected: format!("{}", template.token_dim()),
            got: format!("{}", bank.token_dim()),
        });
    }
    let k = bank.k();
    let s = bank.s_prompt();
    let d = bank.token_dim();
    // x = L appends at the end (trailing-slot convention).
    let prefix_len = (x + 1).min(l);

    let mut sequence = Array3::<f64>::zeros((k, l + s, d));
    for ki in 0..k {
        // The template is shared across categories (built with K = 1).
        let t = template.embedded.index_axis(Axis(0), 0);
        for p in 0..prefix_len {
            sequence
                .index_axis_mut(Axis(0), ki)
                .row_mut(p)
                .assign(&t.row(p));
        }
        for si in 0..s {
            sequence
                .index_axis_mut(Axis(0), ki)
                .row_mut(prefix_len + si)
                .assign(&bank.vectors.index_axis(Axis(0), si).row(ki));
        }
        for p in prefix_len..l {
            sequence
                .index_axis_mut(Axis(0), ki)
                .row_mut(p + s)
                .assign(&t.row(p));
        }
    }

    let eot_slot = template.eot_index.map(|idx| {
        if idx < prefix_len {
            idx
        } else {
            idx + s
        }
    });

    Ok(PromptAssembly {
        sequence,
        learnable_start: prefix_len,
        s_prompt: s,
        eot_slot,
    })
}

/// Record the spliced sequence on a tape with the bank as the only
/// differentiable part. `bank_var` must hold the `(S, D)` bank view.
pub fn assembly_on_tape(
    tape: &mut Tape,
    template: &PromptTemplate,
    bank_var: Var,
    insert_position: usize,
) -> Result<Var> {
    let l = template.len();
    if insert_position > l {
        return Err(Error::PositionOutOfRange {
            position: insert_position,
            limit: l,
        });
    }
    let prefix_len = (insert_position + 1).min(l);
    let t = template.embedded.index_axis(Axis(0), 0).to_owned();

    let mut parts = Vec::with_capacity(3);
    if prefix_len > 0 {
        let prefix = t.slice(ndarray::s![0..prefix_len, ..]).to_owned();
        parts.push(tape.constant(prefix));
    }
    parts.push(bank_var);
    if prefix_len < l {
        let suffix = t.slice(ndarray::s![prefix_len.., ..]).to_owned();
        parts.push(tape.constant(suffix));
    }
    Ok(tape.concat_rows(&parts))
}
