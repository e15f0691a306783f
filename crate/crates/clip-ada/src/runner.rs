//! Checkpoint-driven scoring: rebuild the prompt pipeline from a checkpoint,
//! score single images or a whole test split, and feed the metrics module.

use std::collections::HashMap;

use ndarray::Array2;

use crate::alignment::forward_full;
use crate::backbone::VisionTextBackend;
use crate::datasets::{load_image, load_mask, DatasetIndex, Split};
use crate::error::{Error, Result};
use crate::imageops::ImageTensor;
use crate::inference::{score_map, ScoreMap};
use crate::metrics::{evaluate, EvalReport, RecordOutput};
use crate::prompting::{build_template, PromptTemplate};
use crate::trainer::Checkpoint;

/// A checkpoint bound to its backend, ready to score images.
pub struct Scorer<'a> {
    backend: &'a dyn VisionTextBackend,
    checkpoint: &'a Checkpoint,
    template: PromptTemplate,
}

impl<'a> Scorer<'a> {
    pub fn new(checkpoint: &'a Checkpoint, backend: &'a dyn VisionTextBackend) -> Result<Self> {
        if backend.descriptor() != &checkpoint.descriptor {
            return Err(Error::IncompatibleConfig(
                "checkpoint was trained with different backend dimensions".into(),
            ));
        }
        let template = build_template(&checkpoint.config.template, backend.tokenizer())?;
        Ok(Self {
            backend,
            checkpoint,
            template,
        })
    }

    pub fn image_size(&self) -> usize {
        self.checkpoint.config.image_size
    }

    /// Full-resolution anomaly map and image score. The last refinement map
    /// is the scored one (the coarse map when no refinement stages exist).
    pub fn score(&self, image: &ImageTensor) -> Result<ScoreMap> {
        let cfg = &self.checkpoint.config;
        let params = &self.checkpoint.params;
        let (coarse, refined) = forward_full(
            image,
            &self.template,
            &params.bank,
            &params.stack,
            self.backend,
        )?;
        let last = refined.last().unwrap_or(&coarse);
        Ok(score_map(
            last,
            image.height(),
            image.width(),
            cfg.sigma,
            cfg.k_top,
        ))
    }

    /// Score every test record of an index, pairing each map with its
    /// ground-truth pixel labels.
    pub fn score_index(&self, index: &DatasetIndex) -> Result<HashMap<usize, RecordOutput>> {
        let size = self.image_size();
        let mut outputs = HashMap::new();
        for (i, record) in index.records.iter().enumerate() {
            if record.split != Split::Test {
                continue;
            }
            let image = load_image(&record.path, size, size)?;
            let scored = self.score(&image)?;
            let pixel_labels = match &record.mask_path {
                Some(path) => load_mask(path, size, size)?,
                None => Array2::zeros((size, size)),
            };
            outputs.insert(
                i,
                RecordOutput {
                    image_score: scored.image_score,
                    pixel_scores: scored.pixels,
                    pixel_labels,
                },
            );
        }
        Ok(outputs)
    }

    /// Score a test split and aggregate the per-category metrics.
    pub fn evaluate_index(&self, index: &DatasetIndex) -> Result<EvalReport> {
        let outputs = self.score_index(index)?;
        evaluate(index, &outputs)
    }
}
