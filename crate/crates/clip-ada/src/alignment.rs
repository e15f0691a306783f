//! Text-patch alignment: projected patch features are scored against the
//! text embedding (sigmoid of the dot product), supervised with binary
//! cross-entropy, and sharpened by re-encoding the image modulated by the
//! previous map. Projection stages never share weights; the map from stage
//! `t-1` feeds stage `t`.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::{PatchFeatureMap, TextEmbedding, VisionTextBackend};
use crate::error::{Error, Result};
use crate::imageops::ImageTensor;
use crate::prompting::{assemble, assembly_on_tape, LearnablePromptBank, PromptTemplate};
use crate::tape::{sigmoid, Tape, Var};

/// Logits are clamped to this magnitude before the sigmoid and the loss.
pub const LOGIT_CLAMP: f64 = 50.0;

/// Affine map from raw backbone features to the shared text-image space.
/// One instance per refinement stage; weights are never shared.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionLayer {
    /// `(raw_dim, shared_dim)`
    pub weight: Array2<f64>,
    /// `(shared_dim,)`
    pub bias: Array1<f64>,
    /// 0 for the coarse stage, `1..=N` for refinement stages.
    pub stage_id: usize,
}

impl ProjectionLayer {
    pub fn seeded(raw_dim: usize, shared_dim: usize, stage_id: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (stage_id as u64).wrapping_mul(0x9e3779b9));
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        Self {
            weight: Array2::from_shape_fn((raw_dim, shared_dim), |_| normal.sample(&mut rng)),
            bias: Array1::zeros(shared_dim),
            stage_id,
        }
    }

    pub fn raw_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn shared_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Sigmoid-normalized text-patch alignment grid, values strictly in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    logits: Array2<f64>,
    values: Array2<f64>,
}

impl SimilarityMap {
    pub fn from_logits(logits: Array2<f64>) -> Self {
        let values = logits.mapv(|z| sigmoid(z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)));
        Self { logits, values }
    }

    /// Build from probabilities in the open interval `(0, 1)`.
    pub fn from_values(values: &Array2<f64>) -> Result<Self> {
        if values.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::ShapeMismatch {
                what: "similarity values",
                expected: "open interval (0, 1)".into(),
                got: "boundary or out-of-range value".into(),
            });
        }
        Ok(Self::from_logits(values.mapv(|v| (v / (1.0 - v)).ln())))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn side(&self) -> usize {
        self.values.nrows()
    }
}

/// The full projection set: the coarse stage plus `N` refinement stages.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinementStack {
    /// Coarse-stage projection (stage 0).
    pub initial: ProjectionLayer,
    /// Refinement projections, stage `t` at index `t - 1`.
    pub refine: Vec<ProjectionLayer>,
}

impl RefinementStack {
    pub fn seeded(n_refine: usize, raw_dim: usize, shared_dim: usize, seed: u64) -> Self {
        Self {
            initial: ProjectionLayer::seeded(raw_dim, shared_dim, 0, seed),
            refine: (1..=n_refine)
                .map(|stage| ProjectionLayer::seeded(raw_dim, shared_dim, stage, seed))
                .collect(),
        }
    }

    pub fn n_refine(&self) -> usize {
        self.refine.len()
    }

    /// All stages in order, the coarse stage first.
    pub fn stages(&self) -> impl Iterator<Item = &ProjectionLayer> {
        std::iter::once(&self.initial).chain(self.refine.iter())
    }

    pub fn stages_mut(&mut self) -> impl Iterator<Item = &mut ProjectionLayer> {
        std::iter::once(&mut self.initial).chain(self.refine.iter_mut())
    }

    pub fn parameter_count(&self) -> usize {
        self.stages().map(ProjectionLayer::parameter_count).sum()
    }
}

/// Project raw patch features into the shared space.
pub fn project(raw: &PatchFeatureMap, proj: &ProjectionLayer) -> Result<PatchFeatureMap> {
    if raw.dim() != proj.raw_dim() {
        return Err(Error::ShapeMismatch {
            what: "projection input",
            expected: format!("{} columns", proj.raw_dim()),
            got: format!("{} columns", raw.dim()),
        });
    }
    Ok(PatchFeatureMap {
        features: raw.features.dot(&proj.weight) + &proj.bias,
        grid_h: raw.grid_h,
        grid_w: raw.grid_w,
        stage_index: raw.stage_index,
    })
}

/// Sigmoid of per-patch feature / text-embedding dot products, reshaped to
/// the square patch grid.
pub fn similarity_map(features: &PatchFeatureMap, text: &TextEmbedding) -> Result<SimilarityMap> {
    if features.dim() != text.dim() {
        return Err(Error::ShapeMismatch {
            what: "similarity dims",
            expected: format!("feature dim {}", text.dim()),
            got: format!("feature dim {}", features.dim()),
        });
    }
    if text.k() != 1 {
        return Err(Error::ShapeMismatch {
            what: "text embedding rows",
            expected: "1 (unified setting)".into(),
            got: format!("{}", text.k()),
        });
    }
    let side = features.grid_side()?;
    let logits_col = features.features.dot(&text.matrix.t());
    let logits = logits_col
        .into_shape_with_order((side, side))
        .expect("similarity reshape");
    Ok(SimilarityMap::from_logits(logits))
}

/// Mean-reduced binary cross-entropy between a similarity map and a binary
/// mask, evaluated in logit space for stability.
pub fn alignment_loss(map: &SimilarityMap, gt: &Array2<u8>) -> Result<f64> {
    if map.values().shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            what: "alignment loss",
            expected: format!("{:?}", map.values().shape()),
            got: format!("{:?}", gt.shape()),
        });
    }
    let n = gt.len() as f64;
    let mut loss = 0.0;
    for (&z, &y) in map.logits().iter().zip(gt.iter()) {
        let zc = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        let y = f64::from(y.min(1));
        loss += y * softplus(-zc) + (1.0 - y) * softplus(zc);
    }
    Ok(loss / n)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// One refinement pass: modulate the image by the previous map (upsampled to
/// image resolution), re-encode, project through this stage's own layer, and
/// score against the same text embedding.
pub fn refine_once(
    image: &ImageTensor,
    prev: &SimilarityMap,
    backend: &dyn VisionTextBackend,
    proj: &ProjectionLayer,
    text: &TextEmbedding,
) -> Result<SimilarityMap> {
    let mut tape = Tape::new();
    let prev_var = tape.constant(prev.values().clone());
    let img = tape.constant(image.data().clone());
    let text_var = tape.constant(text.matrix.clone());
    let weight = tape.constant(proj.weight.clone());
    let bias = tape.constant(proj.bias.clone());
    let logits = refine_logits_on_tape(
        &mut tape, backend, prev_var, img, weight, bias, text_var, image,
    )?;
    Ok(SimilarityMap::from_logits(tape.value2(logits)))
}

/// Tape-level single refinement stage; returns the `(s, s)` logits.
#[allow(clippy::too_many_arguments)]
fn refine_logits_on_tape(
    tape: &mut Tape,
    backend: &dyn VisionTextBackend,
    prev_map: Var,
    image: Var,
    weight: Var,
    bias: Var,
    text: Var,
    image_dims: &ImageTensor,
) -> Result<Var> {
    let up = tape.bilinear_up(prev_map, image_dims.height(), image_dims.width());
    let attended = tape.mul_chan(up, image);
    let raw = backend.encode_image_on(tape, attended)?;
    similarity_logits_on_tape(tape, raw, weight, bias, text)
}

/// Tape-level projection + dot-product scoring; returns `(s, s)` logits.
fn similarity_logits_on_tape(
    tape: &mut Tape,
    raw: Var,
    weight: Var,
    bias: Var,
    text: Var,
) -> Result<Var> {
    let projected = tape.matmul(raw, weight);
    let projected = tape.add_bias(projected, bias);
    let text_t = tape.transpose(text);
    let logits_col = tape.matmul(projected, text_t);
    let n_patches = tape.value(logits_col).shape()[0];
    let side = (n_patches as f64).sqrt().round() as usize;
    if side * side != n_patches {
        return Err(Error::ShapeMismatch {
            what: "patch grid",
            expected: "square patch count".into(),
            got: format!("{n_patches} patches"),
        });
    }
    Ok(tape.reshape(logits_col, &[side, side]))
}

/// Tape handles for one full forward pass.
pub struct ForwardVars {
    /// Text embedding `(1, C)`.
    pub text: Var,
    /// Stage logits, coarse first; length `n_refine + 1`.
    pub logits: Vec<Var>,
    /// Stage maps (clamped sigmoids of the logits), same order.
    pub maps: Vec<Var>,
}

/// Record the full coarse-plus-refinement forward pass on a tape.
///
/// `bank_var` holds the `(S, D)` prompt bank and `stack_vars` the per-stage
/// `(weight, bias)` pairs; passing them as tape params makes the whole pass
/// differentiable end to end, including the attention product.
pub fn forward_on_tape(
    tape: &mut Tape,
    backend: &dyn VisionTextBackend,
    image: &ImageTensor,
    template: &PromptTemplate,
    bank_insert_position: usize,
    bank_var: Var,
    stack_vars: &[(Var, Var)],
    detach_attention: bool,
) -> Result<ForwardVars> {
    assert!(!stack_vars.is_empty(), "stack needs at least the coarse stage");

    // Assembly metadata (pool slot) comes from an eager assembly of the same
    // shape; the tape sequence itself is rebuilt from the bank var.
    let s_prompt = tape.value(bank_var).shape()[0];
    let d = tape.value(bank_var).shape()[1];
    let meta_bank = LearnablePromptBank {
        vectors: tape
            .value(bank_var)
            .clone()
            .into_shape_with_order((s_prompt, 1, d))
            .expect("bank shape"),
        insert_position: bank_insert_position,
    };
    let assembly = assemble(template, &meta_bank)?;
    let limit = backend.tokenizer().context_limit();
    if assembly.len() > limit {
        return Err(Error::ContextOverflow {
            length: assembly.len(),
            limit,
        });
    }

    let seq = assembly_on_tape(tape, template, bank_var, bank_insert_position)?;
    let text = backend.encode_text_on(tape, seq, &assembly)?;

    let img = tape.constant(image.data().clone());
    let raw = backend.encode_image_on(tape, img)?;
    let (w0, b0) = stack_vars[0];
    let coarse_logits = similarity_logits_on_tape(tape, raw, w0, b0, text)?;
    let coarse_map = tape.sigmoid_clamp(coarse_logits, LOGIT_CLAMP);

    let mut logits = vec![coarse_logits];
    let mut maps = vec![coarse_map];
    for &(w, b) in &stack_vars[1..] {
        let prev = *maps.last().unwrap();
        let prev = if detach_attention {
            let frozen = tape.value(prev).clone();
            tape.constant(frozen)
        } else {
            prev
        };
        let stage_logits =
            refine_logits_on_tape(tape, backend, prev, img, w, b, text, image)?;
        logits.push(stage_logits);
        maps.push(tape.sigmoid_clamp(stage_logits, LOGIT_CLAMP));
    }
    Ok(ForwardVars { text, logits, maps })
}

/// Eager full forward pass: the coarse map and every refined map.
pub fn forward_full(
    image: &ImageTensor,
    template: &PromptTemplate,
    bank: &LearnablePromptBank,
    stack: &RefinementStack,
    backend: &dyn VisionTextBackend,
) -> Result<(SimilarityMap, Vec<SimilarityMap>)> {
    let mut tape = Tape::new();
    let bank_var = tape.constant(bank.vectors_2d());
    let stack_vars: Vec<(Var, Var)> = stack
        .stages()
        .map(|p| {
            (
                tape.constant(p.weight.clone()),
                tape.constant(p.bias.clone()),
            )
        })
        .collect();
    let fwd = forward_on_tape(
        &mut tape,
        backend,
        image,
        template,
        bank.insert_position,
        bank_var,
        &stack_vars,
        false,
    )?;
    let mut all = fwd
        .logits
        .iter()
        .map(|&l| SimilarityMap::from_logits(tape.value2(l)));
    let coarse = all.next().expect("coarse map");
    Ok((coarse, all.collect()))
}
