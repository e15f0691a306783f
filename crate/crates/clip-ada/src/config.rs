//! Run configuration: a human-readable TOML file with `mvtec` and `visa`
//! presets, plus backend construction from the `backend = { toy = ... }` /
//! `{ pretrained = ... }` key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{make_toy_backend, BackendDescriptor, VisionTextBackend};
use crate::error::{Error, Result};
use crate::synthesis::SynthesisConfig;
use crate::trainer::TrainConfig;

/// Environment variable pointing at the pretrained-weights cache directory.
pub const CACHE_ENV: &str = "CLIP_ADA_CACHE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// `mvtec` or `visa` directory layout.
    pub name: String,
    pub root: Option<PathBuf>,
    /// Per-category train-split fraction for the data-scale study.
    pub fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: "mvtec".into(),
            root: None,
            fraction: 1.0,
            seed: 0,
        }
    }
}

/// Exactly one of `toy` (a seed) or `pretrained` (a weights path or cache id).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub toy: Option<u64>,
    pub pretrained: Option<String>,
}

impl BackendConfig {
    pub fn toy(seed: u64) -> Self {
        Self {
            toy: Some(seed),
            pretrained: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.toy, &self.pretrained) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(Error::InvalidConfig(
                "backend needs exactly one of `toy = <seed>` or `pretrained = <path>`".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub backend: BackendConfig,
    /// Encoder dimensions for the toy backend; the pretrained backend reads
    /// its own dimensions from the weights file.
    pub dims: BackendDescriptor,
    pub train: TrainConfig,
    pub synthesis: SynthesisConfig,
}

impl RunConfig {
    /// Built-in preset by name (`mvtec` or `visa`).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mvtec" => Ok(Self {
                dataset: DatasetConfig {
                    name: "mvtec".into(),
                    ..Default::default()
                },
                backend: BackendConfig::toy(0),
                dims: BackendDescriptor::default(),
                train: TrainConfig::default(),
                synthesis: SynthesisConfig::default(),
            }),
            "visa" => Ok(Self {
                dataset: DatasetConfig {
                    name: "visa".into(),
                    ..Default::default()
                },
                backend: BackendConfig::toy(0),
                dims: BackendDescriptor::default(),
                train: TrainConfig {
                    epochs: 500,
                    lr: 4e-4,
                    lr_milestones: vec![250],
                    batch_size: 64,
                    ..Default::default()
                },
                synthesis: SynthesisConfig::default(),
            }),
            other => Err(Error::InvalidConfig(format!("unknown preset {other:?}"))),
        }
    }

    /// Resolve a `--config` argument: a preset name (optionally prefixed with
    /// `presets/`) or a TOML file path.
    pub fn resolve(spec: &str) -> Result<Self> {
        let preset_name = spec.strip_prefix("presets/").unwrap_or(spec);
        if !Path::new(spec).is_file() && matches!(preset_name, "mvtec" | "visa") {
            return Self::preset(preset_name);
        }
        let text = std::fs::read_to_string(spec).map_err(|e| {
            Error::InvalidConfig(format!("cannot read config {spec:?}: {e}"))
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.backend.validate()?;
        self.dims.validate()?;
        self.train.validate()?;
        self.synthesis.validate()?;
        if !(self.dataset.fraction > 0.0 && self.dataset.fraction <= 1.0) {
            return Err(Error::FractionOutOfRange(self.dataset.fraction));
        }
        if !matches!(self.dataset.name.as_str(), "mvtec" | "visa") {
            return Err(Error::InvalidConfig(format!(
                "unknown dataset layout {:?}",
                self.dataset.name
            )));
        }
        Ok(())
    }

    /// Construct the configured backend.
    pub fn make_backend(&self) -> Result<Box<dyn VisionTextBackend>> {
        self.backend.validate()?;
        if let Some(seed) = self.backend.toy {
            return Ok(Box::new(make_toy_backend(seed, self.dims.clone())?));
        }
        let id = self.backend.pretrained.as_deref().expect("validated");
        let path = resolve_weights(id)?;
        Ok(Box::new(crate::backbone::pretrained::PretrainedBackend::load(&path)?))
    }
}

/// Resolve a pretrained-weights argument: an existing path, or an id looked
/// up in the `CLIP_ADA_CACHE` directory (with and without `.cada`).
pub fn resolve_weights(id: &str) -> Result<PathBuf> {
    let direct = PathBuf::from(id);
    if direct.is_file() {
        return Ok(direct);
    }
    if let Ok(cache) = std::env::var(CACHE_ENV) {
        for candidate in [
            Path::new(&cache).join(id),
            Path::new(&cache).join(format!("{id}.cada")),
        ] {
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
    }
    Err(Error::Layout(format!(
        "pretrained weights {id:?} not found (checked the path and ${CACHE_ENV})"
    )))
}

/// Flag-level overrides applied on top of a resolved config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub backend: Option<String>,
    pub dataset_root: Option<PathBuf>,
    pub fraction: Option<f64>,
    pub seed: Option<u64>,
    pub n_refine: Option<usize>,
    pub k_top: Option<usize>,
    pub sigma: Option<f64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_steps: Option<u64>,
    pub image_size: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(spec) = &self.backend {
            cfg.backend = parse_backend_spec(spec)?;
        }
        if let Some(root) = &self.dataset_root {
            cfg.dataset.root = Some(root.clone());
        }
        if let Some(f) = self.fraction {
            cfg.dataset.fraction = f;
        }
        if let Some(s) = self.seed {
            cfg.dataset.seed = s;
            cfg.train.seed = s;
            cfg.synthesis.seed = s;
        }
        if let Some(n) = self.n_refine {
            cfg.train.n_refine = n;
        }
        if let Some(k) = self.k_top {
            cfg.train.k_top = k;
        }
        if let Some(s) = self.sigma {
            cfg.train.sigma = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
            cfg.train.lr_milestones.retain(|&m| m < e);
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(m) = self.max_steps {
            cfg.train.max_steps = Some(m);
        }
        if let Some(s) = self.image_size {
            cfg.train.image_size = s;
        }
        cfg.validate()
    }
}

/// Parse `toy:<seed>` / `pretrained:<path-or-id>` command-line backend specs.
pub fn parse_backend_spec(spec: &str) -> Result<BackendConfig> {
    if let Some(seed) = spec.strip_prefix("toy:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad toy seed in {spec:?}")))?;
        return Ok(BackendConfig::toy(seed));
    }
    if let Some(id) = spec.strip_prefix("pretrained:") {
        return Ok(BackendConfig {
            toy: None,
            pretrained: Some(id.to_string()),
        });
    }
    Err(Error::InvalidConfig(format!(
        "backend spec {spec:?} must be toy:<seed> or pretrained:<path>"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_published_schedules() {
        let mvtec = RunConfig::preset("mvtec").unwrap();
        assert_eq!(mvtec.train.epochs, 800);
        assert_eq!(mvtec.train.lr, 2e-4);
        assert_eq!(mvtec.train.lr_milestones, vec![400, 700]);
        assert_eq!(mvtec.train.batch_size, 16);
        assert_eq!(mvtec.train.lr_decay, 0.2);

        let visa = RunConfig::preset("visa").unwrap();
        assert_eq!(visa.train.epochs, 500);
        assert_eq!(visa.train.lr, 4e-4);
        assert_eq!(visa.train.lr_milestones, vec![250]);
        assert_eq!(visa.train.batch_size, 64);

        assert!(RunConfig::preset("imagenet").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::preset("visa").unwrap();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn resolve_accepts_preset_paths() {
        assert!(RunConfig::resolve("presets/mvtec").is_ok());
        assert!(RunConfig::resolve("mvtec").is_ok());
        assert!(RunConfig::resolve("/nonexistent/path.toml").is_err());
    }

    #[test]
    fn backend_spec_parsing() {
        assert_eq!(parse_backend_spec("toy:7").unwrap(), BackendConfig::toy(7));
        let p = parse_backend_spec("pretrained:weights.cada").unwrap();
        assert_eq!(p.pretrained.as_deref(), Some("weights.cada"));
        assert!(parse_backend_spec("onnx:x").is_err());
        assert!(parse_backend_spec("toy:abc").is_err());
    }

    #[test]
    fn backend_config_needs_exactly_one() {
        assert!(BackendConfig::default().validate().is_err());
        let both = BackendConfig {
            toy: Some(0),
            pretrained: Some("x".into()),
        };
        assert!(both.validate().is_err());
        assert!(BackendConfig::toy(0).validate().is_ok());
    }

    #[test]
    fn overrides_apply_and_revalidate() {
        let mut cfg = RunConfig::preset("mvtec").unwrap();
        let ov = Overrides {
            backend: Some("toy:3".into()),
            fraction: Some(0.1),
            epochs: Some(2),
            n_refine: Some(2),
            ..Default::default()
        };
        ov.apply(&mut cfg).unwrap();
        assert_eq!(cfg.backend, BackendConfig::toy(3));
        assert_eq!(cfg.dataset.fraction, 0.1);
        assert_eq!(cfg.train.epochs, 2);
        // Milestones above the new epoch count are dropped.
        assert!(cfg.train.lr_milestones.is_empty());

        let bad = Overrides {
            fraction: Some(2.0),
            ..Default::default()
        };
        assert!(bad.apply(&mut cfg).is_err());
    }

    #[test]
    fn weight_resolution_uses_cache_env() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("toy-weights.cada"), b"stub").unwrap();
        std::env::set_var(CACHE_ENV, dir.path());
        let found = resolve_weights("toy-weights").unwrap();
        assert_eq!(found, dir.path().join("toy-weights.cada"));
        std::env::remove_var(CACHE_ENV);
        assert!(resolve_weights("toy-weights").is_err());
    }
}
