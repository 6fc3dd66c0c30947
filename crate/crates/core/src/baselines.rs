//! Optimization-based inversion into W.

use candle_core::Var;
use candle_nn::Optimizer;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::generator::{Generator, ImageTensor, LatentW};
use crate::nn;
use crate::perceptual::PerceptualEmbedder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub lambda_l2: f64,
    pub lambda_lpips: f64,
    /// Mapped samples averaged for the default starting point.
    pub init_samples: usize,
    pub seed: u64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self { steps: 500, learning_rate: 0.01, lambda_l2: 1.0, lambda_lpips: 0.2, init_samples: 10_000, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Optimized {
    pub w: LatentW,
    /// Loss before each step.
    pub history: Vec<f64>,
}

/// Adam on `w` minimising `λ₂·MSE(I, G(w)) + λ_lpips·perceptual(I, G(w))`,
/// averaged over the batch, starting from `init` or the mean mapped latent.
pub fn optimize_w(
    images: &ImageTensor,
    generator: &Generator,
    embedder: &PerceptualEmbedder,
    cfg: &OptimizeConfig,
    init: Option<&LatentW>,
) -> Result<Optimized> {
    if cfg.steps == 0 {
        return Err(Error::Config("optimization needs at least one step".into()));
    }
    let b = images.batch();
    let start = match init {
        Some(w) => w.tensor().to_dtype(generator.dtype())?,
        None => mean_init(generator, b, cfg)?.into_tensor(),
    };
    if start.dims() != [b, generator.latent_dim()] {
        return Err(shape_err(format!("init {:?} does not match {b} images", start.dims())));
    }
    let target = ImageTensor::new(images.tensor().to_dtype(generator.dtype())?)?;
    let reference = embedder.reference(&target)?;
    let w = Var::from_tensor(&start)?;
    let mut opt = candle_nn::AdamW::new(vec![w.clone()], candle_nn::ParamsAdamW { lr: cfg.learning_rate, weight_decay: 0.0, ..Default::default() })?;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let rec = generator.render_w(&LatentW::new(w.as_tensor().clone())?)?;
        let (dist, _) = embedder.compare(&reference, &rec)?;
        let mse = (rec.tensor() - target.tensor())?.sqr()?.flatten_from(1)?.mean(1)?;
        let loss = ((mse * cfg.lambda_l2)? + (dist * cfg.lambda_lpips)?)?.mean_all()?;
        let value = nn::scalar_f64(&loss)?;
        if !value.is_finite() {
            let tail: Vec<String> = history.iter().rev().take(5).map(|v: &f64| format!("{v:.6}")).collect();
            return Err(Error::Diverged { step, detail: format!("optimization loss {value}; previous {}", tail.join(", ")) });
        }
        history.push(value);
        opt.backward_step(&loss)?;
    }
    Ok(Optimized { w: LatentW::new(w.as_tensor().detach())?, history })
}

/// `window`-step trailing means of `values`.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    values.windows(window.min(values.len()).max(1)).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect()
}

/// The generator's mean mapped latent repeated for `batch` images.
pub fn mean_init(generator: &Generator, batch: usize, cfg: &OptimizeConfig) -> Result<LatentW> {
    let w = generator.mean_w(cfg.init_samples, cfg.seed)?;
    LatentW::new(w.tensor().broadcast_as((batch, generator.latent_dim()))?.contiguous()?)
}
