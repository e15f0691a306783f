//! Weights-file-backed encoder pair: a ViT image encoder read out at an
//! intermediate stage, and a causal text transformer pooled at the
//! end-of-text slot. Weights, vocabulary and merge rules all come from a
//! single container file (see the README for the tensor naming scheme), so
//! converted CLIP-style checkpoints drop in without code changes.

use std::path::Path;

use ndarray::{Array1, Array2, Ix1, Ix2};

use crate::backbone::bpe::BpeTokenizer;
use crate::backbone::{
    fingerprint_tensors, BackendDescriptor, TextTokenizer, VisionTextBackend,
};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::prompting::PromptAssembly;
use crate::tape::{Tape, Var};

const LN_EPS: f64 = 1e-5;

struct Linear {
    weight: Array2<f64>,
    bias: Option<Array1<f64>>,
}

impl Linear {
    fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.constant(self.weight.clone());
        let y = tape.matmul(x, w);
        match &self.bias {
            Some(b) => {
                let b = tape.constant(b.clone());
                tape.add_bias(y, b)
            }
            None => y,
        }
    }
}

struct LayerNormParams {
    gamma: Array1<f64>,
    beta: Array1<f64>,
}

impl LayerNormParams {
    fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.constant(self.gamma.clone());
        let b = tape.constant(self.beta.clone());
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

struct Block {
    ln1: LayerNormParams,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNormParams,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    /// Pre-norm residual transformer block. `mask` is added to the attention
    /// logits when present (causal text path).
    fn apply(&self, tape: &mut Tape, x: Var, mask: Option<&Array2<f64>>) -> Var {
        let normed = self.ln1.apply(tape, x);
        let q = self.q.apply(tape, normed);
        let k = self.k.apply(tape, normed);
        let v = self.v.apply(tape, normed);

        let width = tape.value(q).shape()[1];
        let head_dim = width / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mask_var = mask.map(|m| tape.constant(m.clone()));

        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim);
            let kh = tape.slice_cols(k, h * head_dim, head_dim);
            let vh = tape.slice_cols(v, h * head_dim, head_dim);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let scores = match mask_var {
                Some(m) => tape.add(scores, m),
                None => scores,
            };
            let probs = tape.softmax_rows(scores);
            head_outputs.push(tape.matmul(probs, vh));
        }
        let merged = tape.concat_cols(&head_outputs);
        let attended = self.out.apply(tape, merged);
        let x = tape.add(x, attended);

        let normed = self.ln2.apply(tape, x);
        let hidden = self.fc1.apply(tape, normed);
        let hidden = tape.quick_gelu(hidden);
        let mlp = self.fc2.apply(tape, hidden);
        tape.add(x, mlp)
    }
}

pub struct PretrainedBackend {
    desc: BackendDescriptor,
    tokenizer: BpeTokenizer,

    patch_embed: Linear,
    class_embedding: Array1<f64>,
    visual_pos: Array2<f64>,
    ln_pre: LayerNormParams,
    visual_blocks: Vec<Block>,

    text_pos: Array2<f64>,
    text_blocks: Vec<Block>,
    ln_final: LayerNormParams,
    text_projection: Array2<f64>,

    fingerprint: u64,
}

fn load_vec(c: &Container, name: &str) -> Result<Array1<f64>> {
    Ok(c.require(name)?
        .view()
        .into_dimensionality::<Ix1>()
        .map_err(|_| Error::Container(format!("tensor {name:?} must be 1-d")))?
        .to_owned())
}

fn load_mat(c: &Container, name: &str) -> Result<Array2<f64>> {
    Ok(c.require(name)?
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Container(format!("tensor {name:?} must be 2-d")))?
        .to_owned())
}

fn load_linear(c: &Container, prefix: &str) -> Result<Linear> {
    let weight = load_mat(c, &format!("{prefix}.weight"))?;
    let bias = match c.tensor(&format!("{prefix}.bias")) {
        Some(_) => Some(load_vec(c, &format!("{prefix}.bias"))?),
        None => None,
    };
    Ok(Linear { weight, bias })
}

fn load_ln(c: &Container, prefix: &str) -> Result<LayerNormParams> {
    Ok(LayerNormParams {
        gamma: load_vec(c, &format!("{prefix}.gamma"))?,
        beta: load_vec(c, &format!("{prefix}.beta"))?,
    })
}

fn load_block(c: &Container, prefix: &str, heads: usize) -> Result<Block> {
    Ok(Block {
        ln1: load_ln(c, &format!("{prefix}.ln1"))?,
        q: load_linear(c, &format!("{prefix}.attn.q"))?,
        k: load_linear(c, &format!("{prefix}.attn.k"))?,
        v: load_linear(c, &format!("{prefix}.attn.v"))?,
        out: load_linear(c, &format!("{prefix}.attn.out"))?,
        ln2: load_ln(c, &format!("{prefix}.ln2"))?,
        fc1: load_linear(c, &format!("{prefix}.mlp.fc1"))?,
        fc2: load_linear(c, &format!("{prefix}.mlp.fc2"))?,
        heads,
    })
}

fn causal_mask(len: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((len, len));
    for i in 0..len {
        for j in i + 1..len {
            m[(i, j)] = f64::NEG_INFINITY;
        }
    }
    m
}

impl PretrainedBackend {
    pub fn load(path: &Path) -> Result<Self> {
        let container = Container::load(path)?;
        Self::from_container(&container)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let desc = BackendDescriptor {
            patch_size: c.meta_u64("patch_size")? as usize,
            feature_stage: c.meta_u64("feature_stage")? as usize,
            raw_dim: c.meta_u64("visual_width")? as usize,
            shared_dim: c.meta_u64("embed_dim")? as usize,
            text_token_dim: c.meta_u64("text_width")? as usize,
        };
        desc.validate()?;
        let visual_heads = c.meta_u64("visual_heads")? as usize;
        let text_heads = c.meta_u64("text_heads")? as usize;
        let visual_depth = c.meta_u64("visual_depth")? as usize;
        let text_depth = c.meta_u64("text_depth")? as usize;
        let context_limit = c.meta_u64("context_limit")? as usize;
        if desc.feature_stage > visual_depth {
            return Err(Error::Container(format!(
                "feature stage {} exceeds visual depth {}",
                desc.feature_stage, visual_depth
            )));
        }

        let vocab: Vec<String> = c
            .meta
            .get("vocab")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::Container("missing vocabulary list".into()))?
            .iter()
            .map(|v| v.as_str().unwrap_or_default().to_string())
            .collect();
        let merges: Vec<String> = c
            .meta
            .get("merges")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::Container("missing merge list".into()))?
            .iter()
            .map(|v| v.as_str().unwrap_or_default().to_string())
            .collect();
        let token_table = load_mat(c, "text.token_embedding")?;
        if token_table.ncols() != desc.text_token_dim {
            return Err(Error::Container("token embedding width mismatch".into()));
        }
        let tokenizer = BpeTokenizer::new(vocab, merges, token_table, context_limit)?;

        // Only the blocks up to the feature stage are ever run on the image
        // side, but all stored blocks load so conversion errors surface here.
        let mut visual_blocks = Vec::with_capacity(visual_depth);
        for i in 0..visual_depth {
            visual_blocks.push(load_block(c, &format!("visual.block{i}"), visual_heads)?);
        }
        let mut text_blocks = Vec::with_capacity(text_depth);
        for i in 0..text_depth {
            text_blocks.push(load_block(c, &format!("text.block{i}"), text_heads)?);
        }

        let backend = Self {
            patch_embed: load_linear(c, "visual.patch_embed")?,
            class_embedding: load_vec(c, "visual.class_embedding")?,
            visual_pos: load_mat(c, "visual.pos_embedding")?,
            ln_pre: load_ln(c, "visual.ln_pre")?,
            visual_blocks,
            text_pos: load_mat(c, "text.pos_embedding")?,
            text_blocks,
            ln_final: load_ln(c, "text.ln_final")?,
            text_projection: load_mat(c, "text.projection")?,
            tokenizer,
            fingerprint: 0,
            desc,
        };
        let fingerprint = backend.compute_fingerprint();
        Ok(Self {
            fingerprint,
            ..backend
        })
    }

    fn compute_fingerprint(&self) -> u64 {
        let mut tensors: Vec<(String, Vec<f64>)> = Vec::new();
        let mut push = |name: String, data: &Array2<f64>| {
            tensors.push((name, data.iter().copied().collect()));
        };
        push("patch_embed".into(), &self.patch_embed.weight);
        push("visual_pos".into(), &self.visual_pos);
        push("text_pos".into(), &self.text_pos);
        push("text_projection".into(), &self.text_projection);
        for (i, b) in self.visual_blocks.iter().enumerate() {
            push(format!("v{i}.q"), &b.q.weight);
            push(format!("v{i}.out"), &b.out.weight);
            push(format!("v{i}.fc1"), &b.fc1.weight);
        }
        for (i, b) in self.text_blocks.iter().enumerate() {
            push(format!("t{i}.q"), &b.q.weight);
            push(format!("t{i}.out"), &b.out.weight);
            push(format!("t{i}.fc1"), &b.fc1.weight);
        }
        fingerprint_tensors(
            tensors
                .iter()
                .map(|(n, d)| (n.as_str(), d.as_slice())),
        )
    }
}

impl VisionTextBackend for PretrainedBackend {
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
        let n_patches = (shape[0] / patch) * (shape[1] / patch);
        if n_patches + 1 != self.visual_pos.nrows() {
            return Err(Error::ShapeMismatch {
                what: "visual position embedding",
                expected: format!("{} rows", n_patches + 1),
                got: format!("{} rows", self.visual_pos.nrows()),
            });
        }

        let patches = tape.patchify(image, patch);
        let embedded = self.patch_embed.apply(tape, patches);
        let class_row = tape.constant(
            self.class_embedding
                .clone()
                .into_shape_with_order((1, self.desc.raw_dim))
                .expect("class embedding shape"),
        );
        let tokens = tape.concat_rows(&[class_row, embedded]);
        let pos = tape.constant(self.visual_pos.clone());
        let tokens = tape.add(tokens, pos);
        let mut x = self.ln_pre.apply(tape, tokens);
        for block in &self.visual_blocks[..self.desc.feature_stage] {
            x = block.apply(tape, x, None);
        }
        // Class token dropped: per-patch features only.
        Ok(tape.slice_rows(x, 1, n_patches))
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
        if len > self.text_pos.nrows() {
            return Err(Error::ContextOverflow {
                length: len,
                limit: self.text_pos.nrows(),
            });
        }
        let pos = tape.constant(self.text_pos.slice(ndarray::s![..len, ..]).to_owned());
        let mut x = tape.add(sequence, pos);
        let mask = causal_mask(len);
        for block in &self.text_blocks {
            x = block.apply(tape, x, Some(&mask));
        }
        let x = self.ln_final.apply(tape, x);
        let pool = assembly.eot_slot.unwrap_or(len - 1).min(len - 1);
        let pooled = tape.slice_rows(x, pool, 1);
        let proj = tape.constant(self.text_projection.clone());
        Ok(tape.matmul(pooled, proj))
    }

    fn parameter_fingerprint(&self) -> u64 {
        self.fingerprint
    }
}
