//! Experiment configuration: one TOML file describing data, model, objective,
//! optimisation and outputs. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, preprocess, synth_domain_pair, Dataset, Domain, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::{
    preset, FeatureGan, ImageGan, LambdaConfig, RoutingRules, StagePlan, PRESET_NAMES,
};
use crate::models::{ArchSpec, CriticNorm, ModelBundle, SharingPlan};
use crate::trainer::{mix_seed, TrainConfig};

/// Environment variable overriding `output.run_dir`.
pub const RUN_DIR_ENV: &str = "RUN_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

/// Digit files in IDX format. Relative paths resolve against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxFiles {
    pub source_images: PathBuf,
    pub source_labels: PathBuf,
    pub target_images: PathBuf,
    pub target_labels: PathBuf,
    /// Held-out target split; the training split is used when absent.
    #[serde(default)]
    pub target_test_images: Option<PathBuf>,
    #[serde(default)]
    pub target_test_labels: Option<PathBuf>,
    /// Keep only the first `n` samples.
    #[serde(default)]
    pub source_limit: Option<usize>,
    #[serde(default)]
    pub target_limit: Option<usize>,
    #[serde(default = "default_size")]
    pub size: usize,
}

fn default_size() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub idx: Option<IdxFiles>,
    /// Size of the synthetic held-out target split (default: `target_count`).
    #[serde(default)]
    pub test_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_arch")]
    pub arch: String,
    #[serde(default)]
    pub critic_norm: CriticNorm,
    #[serde(default)]
    pub sharing: SharingPlan,
    /// Initialisation seed.
    #[serde(default)]
    pub seed: u64,
}

fn default_arch() -> String {
    "compact".into()
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: default_arch(),
            critic_norm: CriticNorm::None,
            sharing: SharingPlan::default(),
            seed: 0,
        }
    }
}

/// Either a named preset or explicit coefficients; the GAN settings apply to
/// every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub lambdas: Option<LambdaConfig>,
    #[serde(default)]
    pub image_gan: Option<ImageGan>,
    #[serde(default)]
    pub feature_gan: Option<FeatureGan>,
    #[serde(default)]
    pub gp_coefficient: Option<f64>,
    #[serde(default)]
    pub routing: RoutingRules,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub run_dir: PathBuf,
    /// Steps between evaluations; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Steps between checkpoints; 0 saves only at stage ends and the end.
    pub checkpoint_every: usize,
    /// Images per exported translation grid.
    pub grid_images: usize,
    pub grid_columns: usize,
    /// Write the latent PCA embedding at the end.
    pub embeddings: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/default"),
            eval_every: 500,
            checkpoint_every: 0,
            grid_images: 32,
            grid_columns: 8,
            embeddings: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub trainer: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Source and target training data plus the labelled target evaluation split.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub source: Dataset,
    pub target: Dataset,
    pub target_test: Dataset,
}

impl DatasetConfig {
    /// Reads a standalone dataset description (the keys of a `[dataset]` block).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = toml::Deserializer::parse(&text)
            .map_err(|e| Error::config("<document>", e.message().to_string()))?;
        let mut cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = format!("dataset.{}", e.path());
            Error::config(path, e.into_inner().message().trim().to_string())
        })?;
        cfg.validate()?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub(crate) fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(idx) = &mut self.idx {
            fix(&mut idx.source_images);
            fix(&mut idx.source_labels);
            fix(&mut idx.target_images);
            fix(&mut idx.target_labels);
            idx.target_test_images.as_mut().map(fix);
            idx.target_test_labels.as_mut().map(fix);
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DatasetKind::Synthetic => {
                let spec = self.synthetic.as_ref().ok_or_else(|| {
                    Error::config("dataset.synthetic", "required for kind = \"synthetic\"")
                })?;
                spec.validate()?;
                if self.test_count == Some(0) {
                    return Err(Error::config("dataset.test_count", "must be > 0"));
                }
            }
            DatasetKind::Idx => {
                let idx = self
                    .idx
                    .as_ref()
                    .ok_or_else(|| Error::config("dataset.idx", "required for kind = \"idx\""))?;
                if idx.size == 0 {
                    return Err(Error::config("dataset.idx.size", "must be > 0"));
                }
                if idx.target_test_images.is_some() != idx.target_test_labels.is_some() {
                    return Err(Error::config(
                        "dataset.idx.target_test_labels",
                        "test images and labels go together",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<ExperimentData> {
        match self.kind {
            DatasetKind::Synthetic => {
                let spec = self.synthetic.expect("validated");
                let (source, target) = synth_domain_pair(&spec)?;
                let test_spec = SyntheticSpec {
                    source_count: spec.num_classes,
                    target_count: self.test_count.unwrap_or(spec.target_count),
                    seed: mix_seed(spec.seed, 0x7e57),
                    ..spec
                };
                let (_, target_test) = synth_domain_pair(&test_spec)?;
                Ok(ExperimentData {
                    source,
                    target,
                    target_test,
                })
            }
            DatasetKind::Idx => {
                let idx = self.idx.as_ref().expect("validated");
                let read = |images: &Path,
                            labels: &Path,
                            domain,
                            limit: Option<usize>|
                 -> Result<Dataset> {
                    let ds = load_idx(images, labels, domain)?;
                    let ds = limit.map_or(ds.clone(), |n| ds.head(n));
                    preprocess(&ds, idx.size)
                };
                let source = read(
                    &idx.source_images,
                    &idx.source_labels,
                    Domain::Source,
                    idx.source_limit,
                )?;
                let target = read(
                    &idx.target_images,
                    &idx.target_labels,
                    Domain::Target,
                    idx.target_limit,
                )?;
                let target_test = match (&idx.target_test_images, &idx.target_test_labels) {
                    (Some(i), Some(l)) => read(i, l, Domain::Target, None)?,
                    _ => target.clone(),
                };
                let k = source.num_classes.max(target.num_classes);
                let with_k = |mut d: Dataset| {
                    d.num_classes = k;
                    d
                };
                Ok(ExperimentData {
                    source: with_k(source),
                    target: with_k(target),
                    target_test: with_k(target_test),
                })
            }
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates. Errors name the offending key path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| Error::config("<document>", e.message().to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.dataset.resolve_paths(base);
        }
        Ok(cfg)
    }

    /// Applies the `RUN_DIR` override.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(RUN_DIR_ENV) {
            self.output.run_dir = PathBuf::from(dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        ArchSpec::by_name(&self.model.arch, 2, self.model.critic_norm)
            .map_err(|e| Error::config("model.arch", e.to_string()))?;
        match (&self.loss.preset, &self.loss.lambdas) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "loss.lambdas",
                    "give either a preset or lambdas, not both",
                ))
            }
            (None, None) => {
                return Err(Error::config(
                    "loss.preset",
                    "give a preset or explicit lambdas",
                ))
            }
            _ => {}
        }
        if let Some(name) = &self.loss.preset {
            if name != "source_only" && !PRESET_NAMES.contains(&name.as_str()) {
                return Err(Error::config(
                    "loss.preset",
                    format!(
                        "unknown preset `{name}`; known: {}, source_only",
                        PRESET_NAMES.join(", ")
                    ),
                ));
            }
        }
        if let Some(gp) = self.loss.gp_coefficient {
            if !(gp >= 0.0 && gp.is_finite()) {
                return Err(Error::config(
                    "loss.gp_coefficient",
                    "must be a finite value >= 0",
                ));
            }
        }
        self.trainer.validate()?;
        self.plan()?.validate(self.model.sharing.tie_encoders)?;
        if self.output.grid_columns == 0 {
            return Err(Error::config("output.grid_columns", "must be > 0"));
        }
        Ok(())
    }

    /// The stage plan after applying the GAN overrides.
    pub fn plan(&self) -> Result<StagePlan> {
        let mut plan = match (&self.loss.preset, &self.loss.lambdas) {
            (Some(name), _) => preset(name)?,
            (None, Some(l)) => StagePlan::single(*l),
            (None, None) => {
                return Err(Error::config(
                    "loss.preset",
                    "give a preset or explicit lambdas",
                ))
            }
        };
        for stage in &mut plan.stages {
            let l = &mut stage.lambdas;
            if let Some(g) = self.loss.image_gan {
                l.image_gan = g;
            }
            if let Some(g) = self.loss.feature_gan {
                l.feature_gan = g;
            }
            if let Some(gp) = self.loss.gp_coefficient {
                l.gp_coefficient = gp;
            }
        }
        Ok(plan)
    }

    /// Trainer settings with the loss block's routing applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            routing: self.loss.routing,
            ..self.trainer.clone()
        }
    }

    pub fn build_bundle(&self, num_classes: usize) -> Result<ModelBundle<f32>> {
        let arch = ArchSpec::by_name(&self.model.arch, num_classes, self.model.critic_norm)?;
        ModelBundle::build(arch, self.model.sharing, self.model.seed)
    }

    /// The resolved configuration as TOML, written into every run directory.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<document>", e.to_string()))
    }

    pub fn load_data(&self) -> Result<ExperimentData> {
        self.dataset.load_data()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[dataset]
kind = "synthetic"
[dataset.synthetic]
kind = "gaussian2d"
num_classes = 3
source_count = 30
target_count = 30

[loss]
preset = "i2i_full"
"#;

    #[test]
    fn minimal_config_and_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.model.arch, "compact");
        assert_eq!(cfg.trainer.learning_rate, 2e-4);
        assert_eq!(cfg.trainer.adam_beta1, 0.5);
        assert_eq!(cfg.plan().unwrap(), preset("i2i_full").unwrap());
        let echo = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&echo).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_names_its_path() {
        let text = MINIMAL.replace(
            "preset = \"i2i_full\"",
            "preset = \"i2i_full\"\nlambda_typo = 1.0",
        );
        match ExperimentConfig::from_toml(&text) {
            Err(Error::Config { path, message }) => {
                assert_eq!(path, "loss.lambda_typo", "{message}");
                assert!(message.contains("lambda_typo"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let text = MINIMAL.replace("num_classes = 3", "num_classes = 3\nsparkle = true");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("dataset.synthetic"), "{err}");
    }

    #[test]
    fn negative_lambda_names_its_path() {
        let text = MINIMAL.replace("preset = \"i2i_full\"", "[loss.lambdas]\ncycle = -1.0");
        match ExperimentConfig::from_toml(&text) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "loss.lambdas.cycle"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn conflicting_or_missing_objective() {
        let both = MINIMAL.replace(
            "preset = \"i2i_full\"",
            "preset = \"adda\"\n[loss.lambdas]\ncycle = 1.0",
        );
        assert!(ExperimentConfig::from_toml(&both).is_err());
        let unknown = MINIMAL.replace("i2i_full", "magic");
        assert!(ExperimentConfig::from_toml(&unknown)
            .unwrap_err()
            .to_string()
            .contains("loss.preset"));
        let bad_lr = format!("{MINIMAL}\n[trainer]\nlearning_rate = 0.0\n");
        assert_eq!(
            ExperimentConfig::from_toml(&bad_lr)
                .unwrap_err()
                .exit_code(),
            1
        );
    }

    #[test]
    fn synthetic_data_has_held_out_split() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let d = cfg.load_data().unwrap();
        assert_eq!(
            (d.source.len(), d.target.len(), d.target_test.len()),
            (30, 30, 30)
        );
        assert_ne!(d.target.values(), d.target_test.values());
        assert_eq!(d.target_test.domain, Domain::Target);
    }

    #[test]
    fn gan_overrides_reach_every_stage() {
        let text = MINIMAL.replace(
            "i2i_full\"",
            "adda\"\nimage_gan = \"least_squares\"\ngp_coefficient = 0.0",
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        for s in cfg.plan().unwrap().stages {
            assert_eq!(s.lambdas.image_gan, ImageGan::LeastSquares);
            assert_eq!(s.lambdas.gp_coefficient, 0.0);
        }
    }
}
