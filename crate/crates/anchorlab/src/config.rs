//! Run configuration. Optional fields are filled in by [`prepare`], and the
//! filled-in config is what a run writes to `resolved_config.json`.

use std::path::{Path, PathBuf};

use anchorlab_core::datasets::{
    self, BlobSpec, ImbalanceSpec, LabeledDataset, NoiseKind, NoiseSampling, NoiseSpec,
};
use anchorlab_core::losses::{self, LossSpec, LossVariant};
use anchorlab_core::prototypes::{self, ProtoGenConfig, PrototypeSet};
use anchorlab_core::rng;
use anchorlab_core::trainer::{Activation, ClassifierConfig, GroupThresholds, ModelConfig, OptimConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::{formats, loaders};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub prototypes: PrototypeSource,
    pub dataset: DatasetRecipe,
    #[serde(default)]
    pub model: ModelSection,
    pub optim: OptimConfig,
    pub loss: LossRecipe,
    #[serde(default)]
    pub analysis: AnalysisToggles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum PrototypeSource {
    #[default]
    ClosedForm,
    Optimized {
        #[serde(default)]
        config: ProtoGenConfig,
    },
    File {
        path: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobRecipe {
    pub k: usize,
    pub m: usize,
    pub per_class: usize,
    pub center_scale: f64,
    pub noise_sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseRecipe {
    pub kind: NoiseKind,
    pub eta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_map: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub sampling: NoiseSampling,
}

/// Blobs, then optional imbalance of the training split, then optional label
/// noise on the training split. The evaluation split stays balanced and clean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRecipe {
    pub blobs: BlobRecipe,
    /// Evaluation samples per class; half of `per_class` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imbalance: Option<ImbalanceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imbalance_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseRecipe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetRecipe {
    Synthetic(SynthRecipe),
    Bundle {
        train: String,
        eval: String,
    },
    Idx {
        train_images: String,
        train_labels: String,
        eval_images: String,
        eval_labels: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k: Option<usize>,
    },
    Csv {
        train: String,
        eval: String,
        #[serde(default = "default_label_column")]
        label_column: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k: Option<usize>,
    },
}

fn default_label_column() -> String {
    "label".into()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    #[default]
    Anchored,
    Learnable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    /// The class count when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub classifier: ClassifierMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier_seed: Option<u64>,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden_dims: default_hidden(),
            feature_dim: None,
            activation: Activation::default(),
            classifier: ClassifierMode::default(),
            init_seed: None,
            classifier_seed: None,
        }
    }
}

/// A loss spec whose scale, margins and anchoring may be derived from the
/// rest of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossRecipe {
    pub variant: LossVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    /// Take the scale from the training noise rate; overrides `scale`.
    #[serde(default)]
    pub noise_aware_scale: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margins: Option<Vec<f64>>,
    /// LDAM constant `C`; margins become `C n_j^{-1/4}` from the training
    /// counts and override `margins`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ldam_constant: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focal_gamma: Option<f64>,
    /// On for NSL and off otherwise when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_normalize: Option<bool>,
    /// Follows the classifier mode when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchored: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisToggles {
    pub margins: bool,
    pub calibration: bool,
    pub ece_bins: usize,
    pub norms: bool,
    pub norm_bins: usize,
    pub grouped: bool,
    pub thresholds: GroupThresholds,
}

impl Default for AnalysisToggles {
    fn default() -> Self {
        AnalysisToggles {
            margins: true,
            calibration: true,
            ece_bins: anchorlab_core::analysis::DEFAULT_ECE_BINS,
            norms: true,
            norm_bins: 20,
            grouped: true,
            thresholds: GroupThresholds::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        formats::read_json(path)
    }
}

/// Everything a training run needs, built from a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Prepared {
    pub resolved: RunConfig,
    pub train: LabeledDataset,
    pub eval: LabeledDataset,
    pub prototypes: Option<PrototypeSet>,
    pub model: ModelConfig,
    pub init_seed: u64,
    pub optim: OptimConfig,
    pub loss: LossSpec,
}

/// Seed salts; each stochastic stage gets its own stream of the master seed.
mod salt {
    pub const BLOBS: u64 = 1;
    pub const IMBALANCE: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const CLASSIFIER: u64 = 5;
    pub const SHUFFLE: u64 = 6;
}

impl SynthRecipe {
    /// Materialize every seed and the holdout size.
    pub fn resolve(&self, master: u64) -> SynthRecipe {
        let mut r = self.clone();
        r.blobs.seed.get_or_insert(rng::derive(master, salt::BLOBS));
        r.holdout_per_class.get_or_insert(self.blobs.per_class.div_ceil(2));
        if r.imbalance.is_some() {
            r.imbalance_seed.get_or_insert(rng::derive(master, salt::IMBALANCE));
        }
        if let Some(n) = r.noise.as_mut() {
            n.seed.get_or_insert(rng::derive(master, salt::NOISE));
        }
        r
    }

    /// Build the (train, eval) pair of a resolved recipe.
    pub fn build(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let b = &self.blobs;
        let spec = BlobSpec {
            k: b.k,
            m: b.m,
            per_class: b.per_class,
            center_scale: b.center_scale,
            noise_sigma: b.noise_sigma,
            seed: b.seed.unwrap_or(0),
        };
        let (mut train, eval) = datasets::synth_blobs_split(&spec, self.holdout_per_class.unwrap_or(0))?;
        if let Some(imb) = &self.imbalance {
            train = datasets::apply_imbalance(&train, imb, self.imbalance_seed.unwrap_or(0))?;
        }
        if let Some(n) = &self.noise {
            let spec = NoiseSpec {
                kind: n.kind,
                eta: n.eta,
                class_map: n.class_map.clone(),
                seed: n.seed.unwrap_or(0),
                sampling: n.sampling,
            };
            train = datasets::apply_noise(&train, &spec)?;
        }
        Ok((train, eval))
    }

    pub fn noise_rate(&self) -> f64 {
        self.noise.as_ref().map_or(0.0, |n| n.eta)
    }
}

fn resolve_path(base: Option<&Path>, p: &str) -> PathBuf {
    let path = PathBuf::from(p);
    match base {
        Some(b) if path.is_relative() => b.join(path),
        _ => path,
    }
}

/// Resolve defaults, load or synthesize the data and build the prototype
/// set. Relative paths are taken against `base`.
pub fn prepare(cfg: &RunConfig, base: Option<&Path>) -> Result<Prepared> {
    let mut resolved = cfg.clone();
    let seed = cfg.seed;

    let (train, eval) = match &mut resolved.dataset {
        DatasetRecipe::Synthetic(recipe) => {
            *recipe = recipe.resolve(seed);
            recipe.build()?
        }
        DatasetRecipe::Bundle { train, eval } => (
            formats::read_bundle(&resolve_path(base, train))?,
            formats::read_bundle(&resolve_path(base, eval))?,
        ),
        DatasetRecipe::Idx {
            train_images,
            train_labels,
            eval_images,
            eval_labels,
            k,
        } => {
            let train = loaders::load_idx(&resolve_path(base, train_images), &resolve_path(base, train_labels), *k)?;
            let k = k.get_or_insert(train.k());
            let eval = loaders::load_idx(&resolve_path(base, eval_images), &resolve_path(base, eval_labels), Some(*k))?;
            (train, eval)
        }
        DatasetRecipe::Csv {
            train,
            eval,
            label_column,
            k,
        } => {
            let tr = loaders::load_csv(&resolve_path(base, train), label_column, *k)?;
            let k = k.get_or_insert(tr.k());
            let ev = loaders::load_csv(&resolve_path(base, eval), label_column, Some(*k))?;
            (tr, ev)
        }
    };
    if train.k() != eval.k() || train.input_dim() != eval.input_dim() {
        return Err(CliError::Usage("training and evaluation sets disagree in k or input dimension".into()));
    }
    let k = train.k();

    let model = &mut resolved.model;
    let d = *model.feature_dim.get_or_insert(k);
    let init_seed = *model.init_seed.get_or_insert(rng::derive(seed, salt::INIT));
    let anchored = model.classifier == ClassifierMode::Anchored;
    let prototypes = if anchored {
        let p = match &resolved.prototypes {
            PrototypeSource::ClosedForm => prototypes::generate_closed_form(k, d)?,
            PrototypeSource::Optimized { config } => prototypes::generate_optimized(k, d, config)?,
            PrototypeSource::File { path } => formats::read_prototypes(&resolve_path(base, path))?,
        };
        if p.k() != k || p.d() != d {
            return Err(CliError::Core(anchorlab_core::Error::DimMismatch(format!(
                "prototype set is {}x{}, run needs {k}x{d}",
                p.k(),
                p.d()
            ))));
        }
        Some(p)
    } else {
        model.classifier_seed.get_or_insert(rng::derive(seed, salt::CLASSIFIER));
        None
    };
    let model_cfg = ModelConfig {
        input_dim: train.input_dim(),
        hidden_dims: model.hidden_dims.clone(),
        feature_dim: d,
        activation: model.activation,
        classifier: match &prototypes {
            Some(p) => ClassifierConfig::Anchored { prototypes: p.clone() },
            None => ClassifierConfig::Learnable {
                k,
                seed: model.classifier_seed.unwrap_or(0),
            },
        },
    };

    resolved.optim.seed.get_or_insert(rng::derive(seed, salt::SHUFFLE));
    if resolved.optim.cosine_annealing {
        resolved.optim.t_max.get_or_insert(resolved.optim.epochs);
    }

    let recipe = &mut resolved.loss;
    let known_eta = match &resolved.dataset {
        DatasetRecipe::Synthetic(s) => Some(s.noise_rate()),
        _ => None,
    };
    let nsl = recipe.variant == LossVariant::Nsl;
    if recipe.noise_aware_scale || (nsl && recipe.scale.is_none()) {
        match known_eta {
            Some(eta) => recipe.scale = Some(losses::noise_aware_scale(eta)?),
            None if recipe.noise_aware_scale => {
                return Err(CliError::Usage(
                    "noise_aware_scale needs a synthetic recipe with a known noise rate".into(),
                ))
            }
            None => {}
        }
    }
    let feature_normalize = *recipe.feature_normalize.get_or_insert(nsl);
    if let Some(c) = recipe.ldam_constant {
        recipe.margins = Some(losses::ldam_margins(&train.class_counts(), c)?);
    }
    let anchored_loss = *recipe.anchored.get_or_insert(anchored);
    let scale = *recipe.scale.get_or_insert(1.0);
    let loss = LossSpec {
        variant: recipe.variant,
        scale,
        margins: recipe.margins.clone(),
        q: recipe.q,
        focal_gamma: recipe.focal_gamma,
        feature_normalize,
        anchored: anchored_loss,
    };
    loss.validate()?;

    Ok(Prepared {
        optim: resolved.optim.clone(),
        resolved,
        train,
        eval,
        prototypes,
        model: model_cfg,
        init_seed,
        loss,
    })
}
