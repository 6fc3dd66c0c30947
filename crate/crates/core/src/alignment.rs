//! Contrastive image/latent alignment.
//!
//! A convolutional image encoder and a small transformer over `w` tokens each
//! feed a linear projection head; both embeddings are unit-normalised and
//! compared with a learnable temperature. The symmetric InfoNCE objective
//! mixes the image→latent and latent→image directions with weight `λ`.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::attention::TokenSplit;
use crate::checkpoint;
use crate::error::{shape_err, Error, Result};
use crate::generator::{ImageTensor, LatentW, PairDataset};
use crate::nn::{self, BatchSampler, ParamStore};

pub const MIN_TEMPERATURE: f64 = 0.01;
pub const MAX_TEMPERATURE: f64 = 100.0;
const LRELU: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub resolution: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub lambda_mix: f64,
    pub init_temperature: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Decoupled weight decay on weight matrices.
    pub weight_decay: f64,
    /// Group size for validation retrieval.
    pub eval_way: usize,
    /// Channels of the stride-2 convolutions taking the image down to 4×4.
    pub image_channels: Vec<usize>,
    pub hidden_dim: usize,
    pub latent_tokens: usize,
    pub latent_width: usize,
    pub latent_heads: usize,
    pub latent_depth: usize,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            latent_dim: 128,
            embed_dim: 128,
            lambda_mix: 0.5,
            init_temperature: 0.07,
            batch_size: 128,
            steps: 2000,
            learning_rate: 2e-3,
            weight_decay: 0.5,
            eval_way: 64,
            image_channels: vec![16, 32, 64, 64],
            hidden_dim: 256,
            latent_tokens: 8,
            latent_width: 64,
            latent_heads: 4,
            latent_depth: 1,
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.lambda_mix) {
            return bad(format!("lambda_mix {} outside [0, 1]", self.lambda_mix));
        }
        if !(MIN_TEMPERATURE..=MAX_TEMPERATURE).contains(&self.init_temperature) {
            return bad(format!("init_temperature {} outside [{MIN_TEMPERATURE}, {MAX_TEMPERATURE}]", self.init_temperature));
        }
        if !self.resolution.is_power_of_two() || self.resolution < 4 {
            return bad(format!("resolution {} must be a power of two ≥ 4", self.resolution));
        }
        let downs = (self.resolution / 4).trailing_zeros() as usize;
        if self.image_channels.len() != downs {
            return bad(format!("image_channels needs {downs} entries for resolution {}", self.resolution));
        }
        if self.latent_tokens == 0 || self.latent_dim % self.latent_tokens != 0 {
            return bad(format!("latent_dim {} not divisible into {} tokens", self.latent_dim, self.latent_tokens));
        }
        TokenSplit { dim: self.latent_width, heads: self.latent_heads, tokens: 1 }.validate()?;
        if self.embed_dim == 0 || self.batch_size == 0 || self.hidden_dim == 0 || self.eval_way == 0 {
            return bad("embed_dim, hidden_dim, batch_size and eval_way must be positive".into());
        }
        Ok(())
    }
}

/// Which side of the similarity matrix supplies the softmax rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ImageToLatent,
    LatentToImage,
}

fn check_pair(img: &Tensor, lat: &Tensor) -> Result<usize> {
    let (s, e) = img.dims2()?;
    let (s2, e2) = lat.dims2()?;
    if s != s2 || e != e2 {
        return Err(shape_err(format!("embedding batches {:?} and {:?} differ", img.dims(), lat.dims())));
    }
    if s == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(s)
}

/// Mean negative log-softmax of the matched pair's similarity over the batch.
/// `temperature` is a scalar tensor so gradients can reach it.
pub fn directional_loss(img: &Tensor, lat: &Tensor, temperature: &Tensor, direction: Direction) -> Result<Tensor> {
    let s = check_pair(img, lat)?;
    let (rows, cols) = match direction {
        Direction::ImageToLatent => (img, lat),
        Direction::LatentToImage => (lat, img),
    };
    let logits = rows.matmul(&cols.t()?)?.broadcast_div(temperature)?;
    let log_p = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
    let eye = Tensor::eye(s, log_p.dtype(), log_p.device())?;
    Ok((log_p * eye)?.sum_all()?.affine(-1.0 / s as f64, 0.0)?)
}

/// `λ·L(I→w) + (1−λ)·L(w→I)`.
pub fn contrastive_loss(img: &Tensor, lat: &Tensor, temperature: &Tensor, lambda: f64) -> Result<Tensor> {
    let a = directional_loss(img, lat, temperature, Direction::ImageToLatent)?;
    let b = directional_loss(img, lat, temperature, Direction::LatentToImage)?;
    Ok(((a * lambda)? + (b * (1.0 - lambda))?)?)
}

/// Fraction of rows whose matched column has strictly the highest similarity.
pub fn retrieval_accuracy(img: &Tensor, lat: &Tensor) -> Result<f64> {
    let s = check_pair(img, lat)?;
    let sim = img.matmul(&lat.t()?)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let hits = (0..s).filter(|&i| (0..s).all(|j| j == i || sim[i][i] > sim[i][j])).count();
    Ok(hits as f64 / s as f64)
}

pub struct AlignModel {
    config: AlignConfig,
    params: ParamStore,
}

impl AlignModel {
    pub fn new(config: AlignConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut rng = nn::rng(config.seed);
        let mut p = ParamStore::new(dtype, device);
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();

        let mut c_in = 3;
        for (i, &c) in config.image_channels.iter().enumerate() {
            p.normal(&mut rng, &format!("image.conv{i}.weight"), &[c, c_in, 3, 3], he(c_in * 9))?;
            p.zeros(&format!("image.conv{i}.bias"), &[c])?;
            c_in = c;
        }
        let flat = c_in * 16;
        p.normal(&mut rng, "image.fc.weight", &[flat, config.hidden_dim], he(flat))?;
        p.zeros("image.fc.bias", &[config.hidden_dim])?;
        p.normal(&mut rng, "image.head.weight", &[config.hidden_dim, config.embed_dim], 1.0 / (config.hidden_dim as f64).sqrt())?;
        p.zeros("image.head.bias", &[config.embed_dim])?;

        let token = config.latent_dim / config.latent_tokens;
        let width = config.latent_width;
        p.normal(&mut rng, "latent.embed.weight", &[token, width], 1.0 / (token as f64).sqrt())?;
        p.zeros("latent.embed.bias", &[width])?;
        p.normal(&mut rng, "latent.pos", &[config.latent_tokens, width], 0.02)?;
        for l in 0..config.latent_depth {
            for ln in ["ln1", "ln2"] {
                p.fill(&format!("latent.{l}.{ln}.gain"), &[width], 1.0)?;
                p.zeros(&format!("latent.{l}.{ln}.bias"), &[width])?;
            }
            for proj in ["q", "k", "v", "o"] {
                p.normal(&mut rng, &format!("latent.{l}.attn.{proj}"), &[width, width], 1.0 / (width as f64).sqrt())?;
            }
            p.normal(&mut rng, &format!("latent.{l}.mlp.fc1"), &[width, 2 * width], he(width))?;
            p.zeros(&format!("latent.{l}.mlp.b1"), &[2 * width])?;
            p.normal(&mut rng, &format!("latent.{l}.mlp.fc2"), &[2 * width, width], 1.0 / (2.0 * width as f64).sqrt())?;
            p.zeros(&format!("latent.{l}.mlp.b2"), &[width])?;
        }
        p.fill("latent.ln.gain", &[width], 1.0)?;
        p.zeros("latent.ln.bias", &[width])?;
        p.normal(&mut rng, "latent.head.weight", &[width, config.embed_dim], 1.0 / (width as f64).sqrt())?;
        p.zeros("latent.head.bias", &[config.embed_dim])?;

        p.fill("log_temperature", &[], config.init_temperature.ln())?;
        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &AlignConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// A view sharing storage whose outputs never carry parameter gradients.
    pub fn frozen(&self) -> Self {
        Self { config: self.config.clone(), params: self.params.frozen() }
    }

    fn p(&self, name: &str) -> Result<Tensor> {
        self.params.get(name)
    }

    /// `t = exp(log t)`, clamped to the allowed range.
    pub fn temperature(&self) -> Result<Tensor> {
        Ok(self.p("log_temperature")?.clamp(MIN_TEMPERATURE.ln(), MAX_TEMPERATURE.ln())?.exp()?)
    }

    pub fn temperature_value(&self) -> Result<f64> {
        Ok(nn::scalar_f64(&self.temperature()?)?)
    }

    /// Unit-norm image embeddings, B×embed_dim.
    pub fn embed_image(&self, images: &ImageTensor) -> Result<Tensor> {
        let x = images.tensor();
        let (_, c, h, w) = x.dims4()?;
        let r = self.config.resolution;
        if c != 3 || h != r || w != r {
            return Err(shape_err(format!("alignment expects 3×{r}×{r} images, got {:?}", x.dims())));
        }
        let mut x = x.to_dtype(self.params.dtype())?;
        for i in 0..self.config.image_channels.len() {
            let y = nn::conv_bias(&x, &self.p(&format!("image.conv{i}.weight"))?, &self.p(&format!("image.conv{i}.bias"))?, 2, 1)?;
            x = nn::leaky_relu(&y, LRELU)?;
        }
        let x = x.flatten_from(1)?;
        let x = nn::leaky_relu(&nn::linear(&x, &self.p("image.fc.weight")?, Some(&self.p("image.fc.bias")?))?, LRELU)?;
        let e = nn::linear(&x, &self.p("image.head.weight")?, Some(&self.p("image.head.bias")?))?;
        Ok(nn::l2_normalize(&e, 1e-12)?)
    }

    /// Unit-norm latent embeddings, B×embed_dim.
    pub fn embed_latent(&self, w: &LatentW) -> Result<Tensor> {
        let cfg = &self.config;
        let (b, d) = w.tensor().dims2()?;
        if d != cfg.latent_dim {
            return Err(shape_err(format!("alignment expects {}-dim latents, got {d}", cfg.latent_dim)));
        }
        let tokens = w.tensor().to_dtype(self.params.dtype())?.reshape((b, cfg.latent_tokens, d / cfg.latent_tokens))?;
        let mut x = nn::linear(&tokens, &self.p("latent.embed.weight")?, Some(&self.p("latent.embed.bias")?))?
            .broadcast_add(&self.p("latent.pos")?)?;
        let split = TokenSplit { dim: cfg.latent_width, heads: cfg.latent_heads, tokens: 1 };
        for l in 0..cfg.latent_depth {
            let p = |n: &str| self.p(&format!("latent.{l}.{n}"));
            let h = nn::layer_norm(&x, &p("ln1.gain")?, &p("ln1.bias")?, 1e-5)?;
            let q = nn::linear(&h, &p("attn.q")?, None)?;
            let k = nn::linear(&h, &p("attn.k")?, None)?;
            let v = nn::linear(&h, &p("attn.v")?, None)?;
            let a = nn::linear(&split.attend(&q, &k, &v)?, &p("attn.o")?, None)?;
            x = (x + a)?;
            let h = nn::layer_norm(&x, &p("ln2.gain")?, &p("ln2.bias")?, 1e-5)?;
            let h = nn::leaky_relu(&nn::linear(&h, &p("mlp.fc1")?, Some(&p("mlp.b1")?))?, LRELU)?;
            x = (x + nn::linear(&h, &p("mlp.fc2")?, Some(&p("mlp.b2")?))?)?;
        }
        let x = nn::layer_norm(&x, &self.p("latent.ln.gain")?, &self.p("latent.ln.bias")?, 1e-5)?.mean(1)?;
        let e = nn::linear(&x, &self.p("latent.head.weight")?, Some(&self.p("latent.head.bias")?))?;
        Ok(nn::l2_normalize(&e, 1e-12)?)
    }

    /// Eq. (λ-mixed InfoNCE) over one batch of pairs.
    pub fn align_loss(&self, images: &ImageTensor, latents: &LatentW) -> Result<Tensor> {
        let img = self.embed_image(images)?;
        let lat = self.embed_latent(latents)?;
        contrastive_loss(&img, &lat, &self.temperature()?, self.config.lambda_mix)
    }

    /// Same value as `align_loss`, but gradients reach only the inputs.
    pub fn frozen_align_loss(&self, images: &ImageTensor, latents: &LatentW) -> Result<Tensor> {
        self.frozen().align_loss(images, latents)
    }

    pub fn retrieval(&self, images: &ImageTensor, latents: &LatentW) -> Result<f64> {
        retrieval_accuracy(&self.embed_image(images)?, &self.embed_latent(latents)?)
    }

    /// Mean top-1 retrieval over consecutive `way`-sized groups of `indices`;
    /// a trailing partial group is dropped unless it is the only one.
    pub fn dataset_retrieval(&self, data: &PairDataset, indices: &[usize], way: usize) -> Result<f64> {
        if indices.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let groups: Vec<&[usize]> = if indices.len() < way { vec![indices] } else { indices.chunks_exact(way).collect() };
        let mut total = 0.0;
        for g in &groups {
            let (img, w) = data.batch(g, self.params.dtype())?;
            total += self.retrieval(&img, &w)?;
        }
        Ok(total / groups.len() as f64)
    }

    pub fn save(&self, dir: &Path, metadata: serde_json::Value) -> Result<()> {
        checkpoint::save(dir, "align", self.config.seed, &self.config, &self.params, metadata)?;
        Ok(())
    }

    pub fn load(dir: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let manifest = checkpoint::load_kind(dir, "align")?;
        let model = Self::new(manifest.config()?, dtype, device)?;
        checkpoint::restore(dir, &manifest, &model.params)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AlignStep {
    pub step: usize,
    pub loss: f64,
    pub retrieval_top1: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AlignHistory {
    pub steps: Vec<AlignStep>,
    pub val_retrieval_top1: f64,
}

impl AlignHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for row in &self.steps {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean loss over a trailing window ending at each step.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let losses: Vec<f64> = self.steps.iter().map(|s| s.loss).collect();
        (window..=losses.len()).map(|end| losses[end - window..end].iter().sum::<f64>() / window as f64).collect()
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Minimises the alignment loss with Adam (cosine-decayed learning rate) on
/// seeded minibatches of the training split; reports final `eval_way`-way validation
/// retrieval.
pub fn pretrain(data: &PairDataset, config: AlignConfig) -> Result<(AlignModel, AlignHistory)> {
    pretrain_with(data, config, |_| {})
}

/// As [`pretrain`], calling `progress` after every step.
pub fn pretrain_with(data: &PairDataset, config: AlignConfig, mut progress: impl FnMut(&AlignStep)) -> Result<(AlignModel, AlignHistory)> {
    if data.train.is_empty() {
        return Err(Error::Dataset("alignment pretraining needs at least one training pair".into()));
    }
    if data.resolution() != config.resolution || data.latents.dims()[1] != config.latent_dim {
        return Err(shape_err("dataset does not match the alignment config"));
    }
    let model = AlignModel::new(config.clone(), DType::F32, &Device::Cpu)?;
    let mut opt = nn::Adam::new(&model.params, config.learning_rate, config.weight_decay)?;
    let mut sampler = BatchSampler::new(data.train.clone(), config.seed.wrapping_add(1));
    let mut history = AlignHistory::default();
    let log_t = model.params.var("log_temperature").cloned().ok_or_else(|| Error::Config("missing temperature".into()))?;
    for step in 0..config.steps {
        opt.set_learning_rate(nn::cosine_lr(config.learning_rate, step, config.steps));
        let idx = sampler.next_batch(config.batch_size);
        let (img, w) = data.batch(&idx, DType::F32)?;
        let img_e = model.embed_image(&img)?;
        let lat_e = model.embed_latent(&w)?;
        let loss = contrastive_loss(&img_e, &lat_e, &model.temperature()?, config.lambda_mix)?;
        let value = nn::scalar_f64(&loss)?;
        if !value.is_finite() {
            return Err(Error::Diverged { step, detail: format!("alignment loss {value}") });
        }
        opt.backward_step(&loss)?;
        log_t.set(&log_t.as_tensor().clamp(MIN_TEMPERATURE.ln(), MAX_TEMPERATURE.ln())?)?;
        let row = AlignStep { step, loss: value, retrieval_top1: retrieval_accuracy(&img_e, &lat_e)? };
        progress(&row);
        history.steps.push(row);
    }
    if !data.val.is_empty() {
        history.val_retrieval_top1 = model.dataset_retrieval(data, &data.val, config.eval_way)?;
    }
    Ok((model, history))
}
