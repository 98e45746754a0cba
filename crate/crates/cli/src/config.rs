//! Run configuration: TOML with one table per subsystem.
//!
//! Every key is optional and falls back to [`RunConfig::default`]; unknown
//! keys are errors. The resolved configuration is written next to every
//! run's outputs.

use std::path::{Path, PathBuf};

use graphprior::energy::SgldConfig;
use graphprior::scenes::SceneConfig;
use graphprior::training::{LossWeights, Mode, ModelConfig, SgdConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: String,
    pub scene: SceneSection,
    pub prior: PriorSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sgld: SgldSection,
    pub paths: PathsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub num_classes: usize,
    pub num_templates: usize,
    pub classes_per_template: usize,
    pub templates_per_scene: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub feature_dim: usize,
    pub class_embedding_noise: f64,
    pub label_noise: f64,
    pub distractor_rate: f64,
    pub box_jitter: f64,
    pub rare_class_fraction: f64,
    pub rare_offset: f64,
    pub probe_noise: f64,
    pub frequency_bias: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    /// Mixes every prior entry towards one: `(1 - eps)·T + eps`.
    pub smoothing_eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub num_train: usize,
    pub num_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub mp_dims: Vec<usize>,
    pub leaky_slope: f64,
    pub ds_iters: usize,
    pub ds_tol: f64,
    pub energy_edge_dim: usize,
    pub energy_pool_dim: usize,
    pub energy_hidden_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Per-group gradient norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub loss_weights: [f64; 5],
    pub energy_reg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgldSection {
    pub steps: usize,
    pub step_size: f64,
    pub noise_var: f64,
    pub update_nodes: bool,
    pub update_edges: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub annotations: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Gpr.as_str().to_string(),
            scene: SceneSection::default(),
            prior: PriorSection::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            sgld: SgldSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl Default for SceneSection {
    fn default() -> Self {
        let s = SceneConfig::default();
        Self {
            num_classes: s.num_classes,
            num_templates: s.num_templates,
            classes_per_template: s.classes_per_template,
            templates_per_scene: s.templates_per_scene,
            objects_min: s.objects_per_scene.0,
            objects_max: s.objects_per_scene.1,
            feature_dim: s.feature_dim,
            class_embedding_noise: s.class_embedding_noise,
            label_noise: s.label_noise,
            distractor_rate: s.distractor_rate,
            box_jitter: s.box_jitter,
            rare_class_fraction: s.rare_class_fraction,
            rare_offset: s.rare_offset,
            probe_noise: s.probe_noise,
            frequency_bias: s.frequency_bias,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            num_train: 500,
            num_test: 100,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            mp_dims: m.mp_dims,
            leaky_slope: m.leaky_slope,
            ds_iters: m.ds_iters,
            ds_tol: m.ds_tol,
            energy_edge_dim: m.energy_edge_dim,
            energy_pool_dim: m.energy_pool_dim,
            energy_hidden_dim: m.energy_hidden_dim,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            lr: t.optimizer.lr,
            momentum: t.optimizer.momentum,
            weight_decay: t.optimizer.weight_decay,
            grad_clip: t.grad_clip.unwrap_or(0.0),
            loss_weights: t.loss_weights.terms,
            energy_reg: t.loss_weights.energy_reg,
        }
    }
}

impl Default for SgldSection {
    fn default() -> Self {
        let s = SgldConfig::default();
        Self {
            steps: s.steps,
            step_size: s.step_size,
            noise_var: s.noise_var,
            update_nodes: s.update_nodes,
            update_edges: s.update_edges,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| CliError::new("config", format!("{}: {}", path.display(), e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.mode()?;
        self.scene_config().validate()?;
        self.train_config()?.validate()?;
        if !(0.0..=1.0).contains(&self.prior.smoothing_eps) {
            return Err(CliError::new("config", "prior.smoothing_eps must lie in [0, 1]"));
        }
        if self.data.num_train == 0 || self.data.num_test == 0 {
            return Err(CliError::new(
                "config",
                "data.num_train and data.num_test must be positive",
            ));
        }
        Ok(())
    }

    pub fn mode(&self) -> Result<Mode, CliError> {
        self.mode
            .parse()
            .map_err(|_| CliError::new("config", format!("unknown mode {:?}", self.mode)))
    }

    pub fn scene_config(&self) -> SceneConfig {
        let s = &self.scene;
        SceneConfig {
            num_classes: s.num_classes,
            num_templates: s.num_templates,
            classes_per_template: s.classes_per_template,
            templates_per_scene: s.templates_per_scene,
            objects_per_scene: (s.objects_min, s.objects_max),
            feature_dim: s.feature_dim,
            class_embedding_noise: s.class_embedding_noise,
            label_noise: s.label_noise,
            distractor_rate: s.distractor_rate,
            box_jitter: s.box_jitter,
            rare_class_fraction: s.rare_class_fraction,
            rare_offset: s.rare_offset,
            probe_noise: s.probe_noise,
            frequency_bias: s.frequency_bias,
        }
    }

    pub fn sgld_config(&self) -> SgldConfig {
        let s = &self.sgld;
        SgldConfig {
            steps: s.steps,
            step_size: s.step_size,
            noise_var: s.noise_var,
            update_nodes: s.update_nodes,
            update_edges: s.update_edges,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            mp_dims: m.mp_dims.clone(),
            leaky_slope: m.leaky_slope,
            ds_iters: m.ds_iters,
            ds_tol: m.ds_tol,
            energy_edge_dim: m.energy_edge_dim,
            energy_pool_dim: m.energy_pool_dim,
            energy_hidden_dim: m.energy_hidden_dim,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        Ok(TrainConfig {
            mode: self.mode()?,
            epochs: t.epochs,
            optimizer: SgdConfig {
                lr: t.lr,
                momentum: t.momentum,
                weight_decay: t.weight_decay,
            },
            sgld: self.sgld_config(),
            seed: self.seed,
            loss_weights: LossWeights {
                terms: t.loss_weights,
                energy_reg: t.energy_reg,
            },
            model: self.model_config(),
            grad_clip: (t.grad_clip > 0.0).then_some(t.grad_clip),
            ..TrainConfig::default()
        })
    }
}
