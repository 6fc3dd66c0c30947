//! Run configuration loaded from JSON.

use std::path::{Path, PathBuf};

use inverso_core::alignment::AlignConfig;
use inverso_core::baselines::OptimizeConfig;
use inverso_core::editing::SvmConfig;
use inverso_core::encoder::EncoderConfig;
use inverso_core::evalsuite::EvalConfig;
use inverso_core::generator::GeneratorConfig;
use inverso_core::perceptual::EmbedderConfig;
use inverso_core::training::TrainConfig;
use inverso_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditingConfig {
    /// Generator samples used for fitting.
    pub samples: usize,
    /// Number of synthetic attributes fitted by `fit-directions svm`.
    pub attributes: usize,
    pub pca_components: usize,
    pub svm: SvmConfig,
}

impl Default for EditingConfig {
    fn default() -> Self {
        Self { samples: 2000, attributes: 4, pca_components: 8, svm: SvmConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub sessions: usize,
    /// Directory of a built UI to serve at `/`.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), port: 8080, sessions: 256, static_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    /// Generator samples drawn by `gen-pairs`.
    pub pairs: usize,
    pub generator: GeneratorConfig,
    pub align: AlignConfig,
    /// Derived from the generator when absent.
    pub encoder: Option<EncoderConfig>,
    pub training: TrainConfig,
    pub embedder: EmbedderConfig,
    pub editing: EditingConfig,
    pub optimize: OptimizeConfig,
    pub eval: EvalConfig,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_dir: PathBuf::from("run"),
            pairs: 20_000,
            generator: GeneratorConfig::default(),
            align: AlignConfig::default(),
            encoder: None,
            training: TrainConfig::default(),
            embedder: EmbedderConfig::default(),
            editing: EditingConfig::default(),
            optimize: OptimizeConfig::default(),
            eval: EvalConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses `path`, rejecting unknown keys and missing referenced paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = &cfg.serve.static_dir {
            if !dir.is_dir() {
                return Err(Error::Config(format!("serve.static_dir {} does not exist", dir.display())));
            }
        }
        Ok(cfg)
    }

    /// Propagates the top-level seed into every section.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.generator.seed = seed;
        self.align.seed = seed;
        self.training.seed = seed;
        self.optimize.seed = seed;
        self.eval.seed = seed;
        if let Some(e) = &mut self.encoder {
            e.seed = seed;
        }
        self
    }

    pub fn encoder_config(&self, generator: &GeneratorConfig) -> Result<EncoderConfig> {
        match &self.encoder {
            Some(e) => Ok(e.clone()),
            None => EncoderConfig::for_generator(generator, self.seed),
        }
    }

    /// Alignment settings matched to a generator's resolution and latent size.
    pub fn align_config(&self, generator: &GeneratorConfig) -> AlignConfig {
        AlignConfig { resolution: generator.resolution, latent_dim: generator.latent_dim, ..self.align.clone() }
    }
}
