//! End-to-end training of the prompt bank and projection stack against the
//! combined alignment objective. The backbone stays frozen; every run is a
//! pure function of (dataset order, seed), which makes checkpoint resume
//! bit-compatible with an uninterrupted run.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayD, Ix1, Ix2, Ix3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{
    alignment_loss, forward_on_tape, RefinementStack, SimilarityMap, LOGIT_CLAMP,
};
use crate::backbone::{BackendDescriptor, VisionTextBackend};
use crate::container::Container;
use crate::datasets::{DatasetIndex, Split};
use crate::error::{Error, Result};
use crate::imageops::ImageTensor;
use crate::prompting::{
    build_template, default_insert_position, init_prompt_bank, LearnablePromptBank,
    PromptTemplate, DEFAULT_INSERT_PREFIX, DEFAULT_TEMPLATE,
};
use crate::synthesis::{make_sample, SynthesisConfig};
use crate::tape::{Tape, Var};

/// Optimization schedule and model-shape settings; snapshotted into every
/// checkpoint.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub batch_size: usize,
    /// Weight of each refined-map loss term.
    pub lambda_refine: f64,
    pub n_refine: usize,
    /// Decoupled weight decay, applied to projection layers only.
    pub weight_decay: f64,
    pub seed: u64,
    pub k_top: usize,
    pub sigma: f64,
    /// Number of learnable prompt vectors.
    pub s_prompt: usize,
    /// Template slot after which the vectors are inserted; `None` resolves to
    /// the slot after the template's leading article phrase.
    pub insert_position: Option<usize>,
    pub template: String,
    pub image_size: usize,
    /// Optional hard cap on optimization steps (testing knob).
    pub max_steps: Option<u64>,
    /// Ablation switch: stop gradients at the attention product.
    pub detach_attention: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 800,
            lr: 2e-4,
            lr_milestones: vec![400, 700],
            lr_decay: 0.2,
            batch_size: 16,
            lambda_refine: 1.0,
            n_refine: 1,
            weight_decay: 1e-4,
            seed: 0,
            k_top: crate::inference::DEFAULT_K_TOP,
            sigma: crate::inference::DEFAULT_SIGMA,
            s_prompt: 4,
            insert_position: None,
            template: DEFAULT_TEMPLATE.to_string(),
            image_size: 224,
            max_steps: None,
            detach_attention: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.lambda_refine < 0.0 {
            return Err(Error::InvalidConfig("lambda_refine must be nonnegative".into()));
        }
        if !(self.lr > 0.0 && self.lr_decay > 0.0) {
            return Err(Error::InvalidConfig("learning rate terms must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.s_prompt == 0 {
            return Err(Error::InvalidConfig("s_prompt must be at least 1".into()));
        }
        if self.k_top == 0 {
            return Err(Error::InvalidConfig("k_top must be at least 1".into()));
        }
        if self.sigma < 0.0 {
            return Err(Error::InvalidConfig("sigma must be nonnegative".into()));
        }
        let strictly_increasing = self
            .lr_milestones
            .windows(2)
            .all(|w| w[0] < w[1]);
        let below_epochs = self.lr_milestones.iter().all(|&m| m < self.epochs);
        if !strictly_increasing || !below_epochs {
            return Err(Error::InvalidConfig(
                "lr milestones must be strictly increasing and below epochs".into(),
            ));
        }
        Ok(())
    }

    /// Step-decay schedule: the base rate times `lr_decay` per passed
    /// milestone (a milestone takes effect at its own epoch).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

/// Combined objective: coarse-map BCE plus `lambda` times each refined-map
/// BCE against the same patch-level mask.
pub fn total_loss(
    coarse: &SimilarityMap,
    refined: &[SimilarityMap],
    gt: &Array2<u8>,
    lambda: f64,
) -> Result<f64> {
    let mut loss = alignment_loss(coarse, gt)?;
    for map in refined {
        loss += lambda * alignment_loss(map, gt)?;
    }
    Ok(loss)
}

/// Tape version of [`total_loss`] over per-stage logit vars.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    stage_logits: &[Var],
    gt: &Array2<u8>,
    lambda: f64,
) -> Var {
    let targets: ArrayD<f64> = gt.mapv(|v| f64::from(v.min(1))).into_dyn();
    let mut acc = tape.bce_with_logits_mean(stage_logits[0], &targets, LOGIT_CLAMP);
    for &logits in &stage_logits[1..] {
        let term = tape.bce_with_logits_mean(logits, &targets, LOGIT_CLAMP);
        let weighted = tape.scale(term, lambda);
        acc = tape.add(acc, weighted);
    }
    acc
}

/// Trainable parameters: the prompt bank and the projection stack.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub bank: LearnablePromptBank,
    pub stack: RefinementStack,
}

impl ModelParams {
    pub fn init(cfg: &TrainConfig, desc: &BackendDescriptor, insert_position: usize) -> Result<Self> {
        let bank = init_prompt_bank(cfg.s_prompt, 1, desc.text_token_dim, cfg.seed)?
            .with_insert_position(insert_position);
        let stack = RefinementStack::seeded(
            cfg.n_refine,
            desc.raw_dim,
            desc.shared_dim,
            cfg.seed.wrapping_add(1),
        );
        Ok(Self { bank, stack })
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.bank.vectors.len() + self.stack.parameter_count()
    }
}

/// Trainable parameter count for given shapes:
/// `S*K*D + (N+1) * (raw*shared + shared)`.
pub fn parameter_budget(
    s_prompt: usize,
    k: usize,
    d: usize,
    n_refine: usize,
    raw_dim: usize,
    shared_dim: usize,
) -> usize {
    s_prompt * k * d + (n_refine + 1) * (raw_dim * shared_dim + shared_dim)
}

/// AdamW moment buffers, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, ArrayD<f64>>,
    pub v: BTreeMap<String, ArrayD<f64>>,
    pub t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    /// One decoupled-weight-decay adaptive step on a single tensor.
    fn update(
        &mut self,
        name: &str,
        param: &mut ArrayD<f64>,
        grad: &ArrayD<f64>,
        lr: f64,
        weight_decay: f64,
    ) {
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(param.raw_dim()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(param.raw_dim()));
        let t = self.t as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        ndarray::Zip::from(&mut *param)
            .and(&mut *m)
            .and(&mut *v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let mhat = *m / bias1;
                let vhat = *v / bias2;
                *p -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + weight_decay * *p);
            });
    }
}

/// Where training images come from; lets tests drive the loop from memory.
pub trait ImageSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn load(&self, i: usize) -> Result<ImageTensor>;
}

/// Normal train-split images of a dataset index, loaded lazily.
pub struct FsImageSource {
    paths: Vec<std::path::PathBuf>,
    height: usize,
    width: usize,
}

impl FsImageSource {
    pub fn from_index(index: &DatasetIndex, height: usize, width: usize) -> Self {
        Self {
            paths: index
                .records
                .iter()
                .filter(|r| r.split == Split::Train)
                .map(|r| r.path.clone())
                .collect(),
            height,
            width,
        }
    }
}

impl ImageSource for FsImageSource {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn load(&self, i: usize) -> Result<ImageTensor> {
        crate::datasets::load_image(&self.paths[i], self.height, self.width)
    }
}

/// In-memory image list.
pub struct MemImageSource {
    pub images: Vec<ImageTensor>,
}

impl ImageSource for MemImageSource {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn load(&self, i: usize) -> Result<ImageTensor> {
        Ok(self.images[i].clone())
    }
}

/// Everything needed to continue or deploy a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub descriptor: BackendDescriptor,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub sample_counter: u64,
    /// Resolved insert position used throughout the run.
    pub insert_position: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// A finished (or capped) run: final checkpoint plus the per-step loss log.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub step_losses: Vec<StepLoss>,
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    // splitmix64 over the packed inputs
    let mut z = a
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(b.rotate_left(17))
        .wrapping_add(c.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

const STREAM_EPOCH: u64 = 0xE90C;
const STREAM_SAMPLE: u64 = 0x5A17;

struct TrainState {
    params: ModelParams,
    adam: AdamState,
    epoch: usize,
    global_step: u64,
    sample_counter: u64,
    insert_position: usize,
}

/// Train from scratch.
pub fn train(
    cfg: &TrainConfig,
    backend: &dyn VisionTextBackend,
    source: &dyn ImageSource,
    synthesis: &SynthesisConfig,
    textures: &[ImageTensor],
) -> Result<TrainRun> {
    cfg.validate()?;
    synthesis.validate()?;
    if source.is_empty() {
        return Err(Error::Layout("training source has no images".into()));
    }
    let template = build_template(&cfg.template, backend.tokenizer())?;
    let insert_position = resolve_insert_position(cfg, backend, &template)?;
    let params = ModelParams::init(cfg, backend.descriptor(), insert_position)?;
    let mut state = TrainState {
        params,
        adam: AdamState::default(),
        epoch: 0,
        global_step: 0,
        sample_counter: 0,
        insert_position,
    };
    let losses = run_epochs(cfg, backend, source, synthesis, textures, &template, &mut state)?;
    Ok(TrainRun {
        checkpoint: state_into_checkpoint(cfg, backend, state),
        step_losses: losses,
    })
}

/// Continue a checkpointed run to its configured epoch count. Resuming at or
/// past the final epoch is a no-op.
pub fn resume(
    checkpoint: &Checkpoint,
    backend: &dyn VisionTextBackend,
    source: &dyn ImageSource,
    synthesis: &SynthesisConfig,
    textures: &[ImageTensor],
) -> Result<TrainRun> {
    let cfg = &checkpoint.config;
    cfg.validate()?;
    check_compatible(checkpoint, backend)?;
    if checkpoint.epoch >= cfg.epochs {
        return Ok(TrainRun {
            checkpoint: checkpoint.clone(),
            step_losses: Vec::new(),
        });
    }
    let template = build_template(&cfg.template, backend.tokenizer())?;
    let mut state = TrainState {
        params: checkpoint.params.clone(),
        adam: checkpoint.adam.clone(),
        epoch: checkpoint.epoch,
        global_step: checkpoint.global_step,
        sample_counter: checkpoint.sample_counter,
        insert_position: checkpoint.insert_position,
    };
    let losses = run_epochs(cfg, backend, source, synthesis, textures, &template, &mut state)?;
    Ok(TrainRun {
        checkpoint: state_into_checkpoint(cfg, backend, state),
        step_losses: losses,
    })
}

fn resolve_insert_position(
    cfg: &TrainConfig,
    backend: &dyn VisionTextBackend,
    template: &PromptTemplate,
) -> Result<usize> {
    let x = match cfg.insert_position {
        Some(x) => x,
        None => default_insert_position(backend.tokenizer(), DEFAULT_INSERT_PREFIX)?
            .min(template.len()),
    };
    if x > template.len() {
        return Err(Error::PositionOutOfRange {
            position: x,
            limit: template.len(),
        });
    }
    Ok(x)
}

fn check_compatible(ckpt: &Checkpoint, backend: &dyn VisionTextBackend) -> Result<()> {
    if &ckpt.descriptor != backend.descriptor() {
        return Err(Error::IncompatibleConfig(
            "checkpoint backend dimensions do not match this backend".into(),
        ));
    }
    if ckpt.params.stack.n_refine() != ckpt.config.n_refine {
        return Err(Error::IncompatibleConfig(format!(
            "checkpoint has {} refinement stages but its config says {}",
            ckpt.params.stack.n_refine(),
            ckpt.config.n_refine
        )));
    }
    if ckpt.params.bank.s_prompt() != ckpt.config.s_prompt {
        return Err(Error::IncompatibleConfig(
            "prompt bank size does not match the config snapshot".into(),
        ));
    }
    Ok(())
}

fn state_into_checkpoint(
    cfg: &TrainConfig,
    backend: &dyn VisionTextBackend,
    state: TrainState,
) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        descriptor: backend.descriptor().clone(),
        params: state.params,
        adam: state.adam,
        epoch: state.epoch,
        global_step: state.global_step,
        sample_counter: state.sample_counter,
        insert_position: state.insert_position,
    }
}

fn run_epochs(
    cfg: &TrainConfig,
    backend: &dyn VisionTextBackend,
    source: &dyn ImageSource,
    synthesis: &SynthesisConfig,
    textures: &[ImageTensor],
    template: &PromptTemplate,
    state: &mut TrainState,
) -> Result<Vec<StepLoss>> {
    let patch = backend.descriptor().patch_size;
    let mut losses = Vec::new();

    'epochs: while state.epoch < cfg.epochs {
        let lr = cfg.lr_at_epoch(state.epoch);
        let mut order: Vec<usize> = (0..source.len()).collect();
        let mut epoch_rng =
            ChaCha8Rng::seed_from_u64(mix(cfg.seed, STREAM_EPOCH, state.epoch as u64));
        order.shuffle(&mut epoch_rng);

        for batch in order.chunks(cfg.batch_size) {
            let loss = train_step(
                cfg, backend, source, synthesis, textures, template, state, patch, batch, lr,
            )?;
            state.global_step += 1;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: state.global_step,
                });
            }
            losses.push(StepLoss {
                step: state.global_step,
                epoch: state.epoch,
                lr,
                loss,
            });
            log::debug!(
                "step {} epoch {} lr {:.2e} loss {:.6}",
                state.global_step,
                state.epoch,
                lr,
                loss
            );
            if let Some(cap) = cfg.max_steps {
                if state.global_step >= cap {
                    state.epoch += 1;
                    break 'epochs;
                }
            }
        }
        state.epoch += 1;
    }
    Ok(losses)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    cfg: &TrainConfig,
    backend: &dyn VisionTextBackend,
    source: &dyn ImageSource,
    synthesis: &SynthesisConfig,
    textures: &[ImageTensor],
    template: &PromptTemplate,
    state: &mut TrainState,
    patch: usize,
    batch: &[usize],
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bank_var = tape.param(state.params.bank.vectors_2d());
    let stack_vars: Vec<(Var, Var)> = state
        .params
        .stack
        .stages()
        .map(|p| (tape.param(p.weight.clone()), tape.param(p.bias.clone())))
        .collect();

    let mut batch_loss: Option<Var> = None;
    for &idx in batch {
        let image = source.load(idx)?;
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix(cfg.seed, STREAM_SAMPLE, state.sample_counter));
        state.sample_counter += 1;
        let texture = if textures.is_empty() {
            None
        } else {
            Some(&textures[rng.random_range(0..textures.len())])
        };
        let sample = make_sample(&image, synthesis, patch, texture, &mut rng)?;

        let fwd = forward_on_tape(
            &mut tape,
            backend,
            &sample.image,
            template,
            state.insert_position,
            bank_var,
            &stack_vars,
            cfg.detach_attention,
        )?;
        let loss = total_loss_on_tape(&mut tape, &fwd.logits, &sample.mask_patch, cfg.lambda_refine);
        batch_loss = Some(match batch_loss {
            Some(acc) => tape.add(acc, loss),
            None => loss,
        });
    }
    let summed = batch_loss.expect("non-empty batch");
    let mean_loss = tape.scale(summed, 1.0 / batch.len() as f64);
    let loss_value = tape.scalar(mean_loss);

    let grads = tape.backward(mean_loss);
    state.adam.t += 1;

    let zero_like = |p: &ArrayD<f64>| ArrayD::zeros(p.raw_dim());
    // Prompt bank: no weight decay.
    let mut bank_2d: ArrayD<f64> = state.params.bank.vectors_2d().into_dyn();
    let bank_grad = grads
        .wrt(bank_var)
        .cloned()
        .unwrap_or_else(|| zero_like(&bank_2d));
    state
        .adam
        .update("prompt.vectors", &mut bank_2d, &bank_grad, lr, 0.0);
    let bank_2d: Array2<f64> = bank_2d.into_dimensionality::<Ix2>().expect("bank rank");
    state.params.bank.set_from_2d(&bank_2d);

    // Projection stages: decoupled weight decay on weights and biases.
    for (stage, &(w_var, b_var)) in state.params.stack.stages_mut().zip(stack_vars.iter()) {
        let mut w: ArrayD<f64> = stage.weight.clone().into_dyn();
        let gw = grads.wrt(w_var).cloned().unwrap_or_else(|| zero_like(&w));
        state.adam.update(
            &format!("proj.{}.weight", stage.stage_id),
            &mut w,
            &gw,
            lr,
            cfg.weight_decay,
        );
        stage.weight = w.into_dimensionality::<Ix2>().expect("weight rank");

        let mut b: ArrayD<f64> = stage.bias.clone().into_dyn();
        let gb = grads.wrt(b_var).cloned().unwrap_or_else(|| zero_like(&b));
        state.adam.update(
            &format!("proj.{}.bias", stage.stage_id),
            &mut b,
            &gb,
            lr,
            cfg.weight_decay,
        );
        stage.bias = b.into_dimensionality::<Ix1>().expect("bias rank");
    }
    Ok(loss_value)
}

const CHECKPOINT_KIND: &str = "checkpoint";

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "config": serde_json::to_value(&self.config)
                .map_err(|e| Error::Container(e.to_string()))?,
            "descriptor": serde_json::to_value(&self.descriptor)
                .map_err(|e| Error::Container(e.to_string()))?,
            "epoch": self.epoch,
            "global_step": self.global_step,
            "sample_counter": self.sample_counter,
            "insert_position": self.insert_position,
            "adam_t": self.adam.t,
        });
        let mut c = Container::new(meta);
        c.insert("prompt.vectors", self.params.bank.vectors.clone().into_dyn());
        for stage in self.params.stack.stages() {
            c.insert(
                format!("proj.{}.weight", stage.stage_id),
                stage.weight.clone().into_dyn(),
            );
            c.insert(
                format!("proj.{}.bias", stage.stage_id),
                stage.bias.clone().into_dyn(),
            );
        }
        for (name, m) in &self.adam.m {
            c.insert(format!("adam.m.{name}"), m.clone());
        }
        for (name, v) in &self.adam.v {
            c.insert(format!("adam.v.{name}"), v.clone());
        }
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        if c.meta_str("kind")? != CHECKPOINT_KIND {
            return Err(Error::Container(format!(
                "{} is not a checkpoint container",
                path.display()
            )));
        }
        let config: TrainConfig = serde_json::from_value(
            c.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Container("missing config snapshot".into()))?,
        )
        .map_err(|e| Error::Container(e.to_string()))?;
        let descriptor: BackendDescriptor = serde_json::from_value(
            c.meta
                .get("descriptor")
                .cloned()
                .ok_or_else(|| Error::Container("missing descriptor snapshot".into()))?,
        )
        .map_err(|e| Error::Container(e.to_string()))?;

        let vectors = c
            .require("prompt.vectors")?
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|_| Error::Container("prompt.vectors must be 3-d".into()))?
            .to_owned();
        let insert_position = c.meta_u64("insert_position")? as usize;
        let bank = LearnablePromptBank {
            vectors,
            insert_position,
        };

        let mut stages = Vec::new();
        for stage_id in 0..=config.n_refine {
            let weight = c
                .require(&format!("proj.{stage_id}.weight"))?
                .view()
                .into_dimensionality::<Ix2>()
                .map_err(|_| Error::Container("projection weight must be 2-d".into()))?
                .to_owned();
            let bias = c
                .require(&format!("proj.{stage_id}.bias"))?
                .view()
                .into_dimensionality::<Ix1>()
                .map_err(|_| Error::Container("projection bias must be 1-d".into()))?
                .to_owned();
            stages.push(crate::alignment::ProjectionLayer {
                weight,
                bias,
                stage_id,
            });
        }
        let initial = stages.remove(0);
        let stack = RefinementStack {
            initial,
            refine: stages,
        };

        let mut adam = AdamState {
            t: c.meta_u64("adam_t")?,
            ..Default::default()
        };
        for name in c.names() {
            if let Some(param) = name.strip_prefix("adam.m.") {
                adam.m.insert(param.to_string(), c.require(name)?.clone());
            } else if let Some(param) = name.strip_prefix("adam.v.") {
                adam.v.insert(param.to_string(), c.require(name)?.clone());
            }
        }

        Ok(Self {
            config,
            descriptor,
            params: ModelParams { bank, stack },
            adam,
            epoch: c.meta_u64("epoch")? as usize,
            global_step: c.meta_u64("global_step")?,
            sample_counter: c.meta_u64("sample_counter")?,
            insert_position,
        })
    }
}

/// Load every image in a directory as a texture bank.
pub fn load_textures(dir: &Path, height: usize, width: usize) -> Result<Vec<ImageTensor>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| ["png", "jpg", "jpeg", "bmp"].contains(&e.to_lowercase().as_str()))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Layout(format!(
            "texture directory {} has no images",
            dir.display()
        )));
    }
    paths
        .iter()
        .map(|p| crate::datasets::load_image(p, height, width))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{make_toy_backend, VisionTextBackend};
    use crate::toydata;

    fn toy_cfg(epochs: usize, n_refine: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            lr: 5e-3,
            lr_milestones: vec![],
            lr_decay: 0.2,
            batch_size: 4,
            lambda_refine: 1.0,
            n_refine,
            weight_decay: 1e-4,
            seed: 7,
            k_top: 64,
            sigma: 1.0,
            s_prompt: 3,
            insert_position: Some(2),
            template: "find the damaged region in this object".into(),
            image_size: 32,
            max_steps: None,
            detach_attention: false,
        }
    }

    fn toy_world() -> (
        crate::backbone::ToyBackend,
        MemImageSource,
        SynthesisConfig,
        Vec<ImageTensor>,
    ) {
        let backend = make_toy_backend(11, toydata::toy_descriptor()).unwrap();
        let stream = toydata::toy_stream(12, 32, 5);
        (backend, MemImageSource { images: stream.sources }, stream.synthesis, stream.textures)
    }

    #[test]
    fn schedule_matches_the_preset_contract() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at_epoch(0), 2e-4);
        assert_eq!(cfg.lr_at_epoch(399), 2e-4);
        assert!((cfg.lr_at_epoch(400) - 4e-5).abs() < 1e-18);
        assert!((cfg.lr_at_epoch(699) - 4e-5).abs() < 1e-18);
        assert!((cfg.lr_at_epoch(700) - 8e-6).abs() < 1e-18);
        assert!((cfg.lr_at_epoch(799) - 8e-6).abs() < 1e-18);
    }

    #[test]
    fn config_validation_rejects_bad_milestones() {
        let mut cfg = toy_cfg(10, 0);
        cfg.lr_milestones = vec![3, 3];
        assert!(cfg.validate().is_err());
        cfg.lr_milestones = vec![3, 12];
        assert!(cfg.validate().is_err());
        cfg.lr_milestones = vec![3, 7];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn total_loss_reductions() {
        let m0 = SimilarityMap::from_logits(Array2::from_elem((2, 2), 0.3));
        let m1 = SimilarityMap::from_logits(Array2::from_elem((2, 2), -0.9));
        let gt = Array2::from_shape_fn((2, 2), |(i, _)| i as u8);

        let l0 = alignment_loss(&m0, &gt).unwrap();
        let l1 = alignment_loss(&m1, &gt).unwrap();

        // lambda = 0 and an empty refinement list both reduce to the coarse term.
        assert_eq!(total_loss(&m0, &[m1.clone()], &gt, 0.0).unwrap(), l0);
        assert_eq!(total_loss(&m0, &[], &gt, 1.0).unwrap(), l0);

        // Two-term sum oracle.
        let both = total_loss(&m0, &[m1], &gt, 0.7).unwrap();
        assert!((both - (l0 + 0.7 * l1)).abs() < 1e-12);
    }

    #[test]
    fn loss_is_linear_in_lambda() {
        let m0 = SimilarityMap::from_logits(Array2::from_elem((2, 2), 0.1));
        let m1 = SimilarityMap::from_logits(Array2::from_elem((2, 2), 0.8));
        let gt = Array2::<u8>::ones((2, 2));
        let at = |lam: f64| total_loss(&m0, &[m1.clone()], &gt, lam).unwrap();
        let (a, b, c) = (at(0.0), at(1.0), at(2.0));
        assert!(((b - a) - (c - b)).abs() < 1e-12);
    }

    #[test]
    fn short_training_descends_and_freezes_backbone() {
        let (backend, source, synthesis, textures) = toy_world();
        let fp_before = backend.parameter_fingerprint();

        let mut cfg = toy_cfg(6, 1);
        cfg.max_steps = Some(40);
        let run = train(&cfg, &backend, &source, &synthesis, &textures).unwrap();
        assert!(!run.step_losses.is_empty());
        let first = run.step_losses.first().unwrap().loss;
        let last = run.step_losses.last().unwrap().loss;
        assert!(last < first, "loss did not descend: {first} -> {last}");
        assert_eq!(backend.parameter_fingerprint(), fp_before);
        // Only prompt and projection tensors are trainable.
        assert_eq!(
            run.checkpoint.params.trainable_parameter_count(),
            parameter_budget(3, 1, 8, 1, 12, 8)
        );
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (backend, source, synthesis, textures) = toy_world();
        let cfg = toy_cfg(2, 1);
        let run = train(&cfg, &backend, &source, &synthesis, &textures).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.cada");
        run.checkpoint.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, run.checkpoint);
    }

    #[test]
    fn split_run_equals_straight_run() {
        let (backend, source, synthesis, textures) = toy_world();

        let straight = train(&toy_cfg(4, 1), &backend, &source, &synthesis, &textures).unwrap();

        let half = train(&toy_cfg(2, 1), &backend, &source, &synthesis, &textures).unwrap();
        // Same schedule target, continued from the saved state.
        let mut continued_ckpt = half.checkpoint.clone();
        continued_ckpt.config.epochs = 4;
        let resumed = resume(&continued_ckpt, &backend, &source, &synthesis, &textures).unwrap();

        assert_eq!(
            resumed.checkpoint.params, straight.checkpoint.params,
            "split run diverged from the straight run"
        );
        assert_eq!(resumed.checkpoint.adam, straight.checkpoint.adam);
        assert_eq!(resumed.checkpoint.global_step, straight.checkpoint.global_step);
    }

    #[test]
    fn resume_at_final_epoch_is_a_noop() {
        let (backend, source, synthesis, textures) = toy_world();
        let run = train(&toy_cfg(2, 0), &backend, &source, &synthesis, &textures).unwrap();
        let again = resume(&run.checkpoint, &backend, &source, &synthesis, &textures).unwrap();
        assert!(again.step_losses.is_empty());
        assert_eq!(again.checkpoint, run.checkpoint);
    }

    #[test]
    fn mismatched_refinement_count_is_rejected() {
        let (backend, source, synthesis, textures) = toy_world();
        let run = train(&toy_cfg(1, 1), &backend, &source, &synthesis, &textures).unwrap();
        let mut tampered = run.checkpoint.clone();
        tampered.config.n_refine = 2;
        tampered.config.epochs = 3;
        assert!(matches!(
            resume(&tampered, &backend, &source, &synthesis, &textures),
            Err(Error::IncompatibleConfig(_))
        ));
    }

    #[test]
    fn default_budget_is_under_the_table_bound() {
        // Defaults with two refinement stages stay below 1.2 M trainables.
        let count = parameter_budget(4, 1, 512, 2, 768, 512);
        assert!(count < 1_200_000, "parameter budget {count}");
    }
}
