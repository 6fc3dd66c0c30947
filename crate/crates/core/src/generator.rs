//! Frozen toy style-based generator.
//!
//! A mapping MLP turns `z` into `w`; the synthesis network starts from a
//! learned 4×4 constant and applies `2·log2(res) − 3` AdaIN-modulated 3×3
//! convolutions (one at 4×4, two per higher resolution, the first of each pair
//! upsampling), followed by a style-modulated 1×1 RGB head. Style row `j`
//! drives convolution `j`; the last row drives the RGB head, so
//! `N = 2·log2(res) − 2`.
//!
//! A degenerate single-affine-layer architecture is also available so tests
//! can compare against closed-form answers.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, IndexOp, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{shape_err, Error, Result};
use crate::nn::{self, ParamStore};

const LRELU: f64 = 0.2;
const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Style,
    /// One affine map `w⁺ → f` followed by one affine map `f → image`.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub architecture: Architecture,
    pub resolution: usize,
    pub latent_dim: usize,
    pub mapping_layers: usize,
    /// Channels at 4×4, 8×8, …, resolution×resolution.
    pub channels: Vec<usize>,
    /// Convolution ordinal (0-based) whose output is the F-space slot.
    pub f_layer: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Style,
            resolution: 64,
            latent_dim: 128,
            mapping_layers: 4,
            channels: vec![32, 32, 16, 8, 4],
            f_layer: 4,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// The single-affine-layer configuration used by closed-form tests.
    pub fn linear(resolution: usize, latent_dim: usize, feature_channels: usize, seed: u64) -> Self {
        let levels = resolution.trailing_zeros() as usize - 1;
        let mut channels = vec![1; levels];
        channels[0] = feature_channels;
        Self {
            architecture: Architecture::Linear,
            resolution,
            latent_dim,
            mapping_layers: 2,
            channels,
            f_layer: 0,
            seed,
        }
    }

    fn log2_res(&self) -> usize {
        self.resolution.trailing_zeros() as usize
    }

    pub fn num_styles(&self) -> usize {
        2 * self.log2_res() - 2
    }

    pub fn num_layers(&self) -> usize {
        match self.architecture {
            Architecture::Style => self.num_styles() - 1,
            Architecture::Linear => 1,
        }
    }

    fn layer_level(&self, layer: usize) -> usize {
        layer.div_ceil(2)
    }

    /// (channels, height, width) of convolution `layer`'s output.
    pub fn layer_shape(&self, layer: usize) -> Result<(usize, usize, usize)> {
        if layer >= self.num_layers() {
            return Err(Error::Range(format!("layer {layer} (generator has {} layers)", self.num_layers())));
        }
        Ok(match self.architecture {
            Architecture::Style => {
                let level = self.layer_level(layer);
                let side = 4 << level;
                (self.channels[level], side, side)
            }
            Architecture::Linear => (self.channels[0], 4, 4),
        })
    }

    pub fn f_shape(&self) -> Result<(usize, usize, usize)> {
        self.layer_shape(self.f_layer)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.resolution.is_power_of_two() || self.resolution < 8 {
            return bad(format!("resolution {} must be a power of two ≥ 8", self.resolution));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        if self.channels.len() != self.log2_res() - 1 {
            return bad(format!(
                "channel schedule needs {} entries (4×4 … {}×{}), got {}",
                self.log2_res() - 1,
                self.resolution,
                self.resolution,
                self.channels.len()
            ));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return bad("all channel counts must be positive".into());
        }
        match self.architecture {
            Architecture::Style => {
                if self.f_layer < 1 || self.f_layer >= self.num_layers() {
                    return bad(format!("f_layer {} must lie in [1, {})", self.f_layer, self.num_layers()));
                }
            }
            Architecture::Linear => {
                if self.f_layer != 0 {
                    return bad("the linear architecture has a single layer (f_layer = 0)".into());
                }
            }
        }
        Ok(())
    }
}

macro_rules! batched_newtype {
    ($(#[$m:meta])* $name:ident, $rank:expr) => {
        $(#[$m])*
        #[derive(Debug, Clone)]
        pub struct $name(Tensor);

        impl $name {
            pub fn new(t: Tensor) -> Result<Self> {
                if t.rank() != $rank {
                    return Err(shape_err(format!("{} expects rank {}, got {:?}", stringify!($name), $rank, t.dims())));
                }
                Ok(Self(t))
            }

            pub fn tensor(&self) -> &Tensor {
                &self.0
            }

            pub fn into_tensor(self) -> Tensor {
                self.0
            }

            pub fn batch(&self) -> usize {
                self.0.dims()[0]
            }

            pub fn is_finite(&self) -> Result<bool> {
                Ok(nn::to_f64_vec(&self.0)?.iter().all(|v| v.is_finite()))
            }
        }
    };
}

batched_newtype!(
    /// Batch of input noise vectors, B×d.
    LatentZ, 2
);
batched_newtype!(
    /// Batch of foundation latents, B×d.
    LatentW, 2
);
batched_newtype!(
    /// Batch of per-layer latents (or residuals of that shape), B×N×d.
    LatentWPlus, 3
);
batched_newtype!(
    /// Batch of images, B×3×res×res, values in [−1, 1].
    ImageTensor, 4
);

impl LatentW {
    pub fn dim(&self) -> usize {
        self.0.dims()[1]
    }
}

impl LatentWPlus {
    pub fn rows(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn row(&self, i: usize) -> Result<LatentW> {
        LatentW::new(self.0.i((.., i, ..))?.contiguous()?)
    }
}

/// Activation of one synthesis layer, B×c×h×w.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Tensor,
    pub layer: usize,
}

impl FeatureMap {
    pub fn new(values: Tensor, layer: usize) -> Result<Self> {
        if values.rank() != 4 {
            return Err(shape_err(format!("feature map must be rank 4, got {:?}", values.dims())));
        }
        Ok(Self { values, layer })
    }

    pub fn batch(&self) -> usize {
        self.values.dims()[0]
    }
}

pub struct Synthesis {
    pub image: ImageTensor,
    pub features: Vec<FeatureMap>,
}

/// Per-dimension statistics of mapped latents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WStats {
    pub samples: usize,
    pub seed: u64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
}

impl Generator {
    pub fn new(config: GeneratorConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut rng = nn::rng(config.seed);
        let mut p = ParamStore::new(dtype, device);
        let d = config.latent_dim;
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();

        for i in 0..config.mapping_layers {
            p.normal(&mut rng, &format!("mapping.{i}.weight"), &[d, d], he(d))?;
            p.zeros(&format!("mapping.{i}.bias"), &[d])?;
        }
        match config.architecture {
            Architecture::Style => {
                let c0 = config.channels[0];
                p.normal(&mut rng, "synthesis.const", &[1, c0, 4, 4], 1.0)?;
                let mut c_in = c0;
                for j in 0..config.num_layers() {
                    let c_out = config.channels[config.layer_level(j)];
                    p.normal(&mut rng, &format!("synthesis.{j}.conv.weight"), &[c_out, c_in, 3, 3], he(c_in * 9))?;
                    p.zeros(&format!("synthesis.{j}.conv.bias"), &[c_out])?;
                    p.normal(&mut rng, &format!("synthesis.{j}.style.weight"), &[d, 2 * c_out], 1.0 / (d as f64).sqrt())?;
                    p.zeros(&format!("synthesis.{j}.style.bias"), &[2 * c_out])?;
                    c_in = c_out;
                }
                p.normal(&mut rng, "to_rgb.style.weight", &[d, c_in], 1.0 / (d as f64).sqrt())?;
                p.zeros("to_rgb.style.bias", &[c_in])?;
                p.normal(&mut rng, "to_rgb.weight", &[3, c_in, 1, 1], 0.5 / (c_in as f64).sqrt())?;
                p.zeros("to_rgb.bias", &[3])?;
            }
            Architecture::Linear => {
                let (c, h, w) = config.f_shape()?;
                let f = c * h * w;
                let n = config.num_styles() * d;
                let out = 3 * config.resolution * config.resolution;
                p.normal(&mut rng, "linear.feature.weight", &[n, f], 1.0 / (n as f64).sqrt())?;
                p.normal(&mut rng, "linear.feature.bias", &[f], 0.1)?;
                p.normal(&mut rng, "linear.image.weight", &[f, out], 0.5 / (f as f64).sqrt())?;
                p.normal(&mut rng, "linear.image.bias", &[out], 0.1)?;
            }
        }
        Ok(Self { config, params: p.frozen() })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn num_styles(&self) -> usize {
        self.config.num_styles()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn p(&self, name: &str) -> Result<Tensor> {
        self.params.get(name)
    }

    pub fn map_latent(&self, z: &LatentZ) -> Result<LatentW> {
        let d = self.config.latent_dim;
        let (_, zd) = z.tensor().dims2()?;
        if zd != d {
            return Err(shape_err(format!("z has length {zd}, generator expects {d}")));
        }
        let z = z.tensor().to_dtype(self.dtype())?;
        let norm = (z.sqr()?.mean_keepdim(1)? + NORM_EPS)?.sqrt()?;
        let mut x = z.broadcast_div(&norm)?;
        for i in 0..self.config.mapping_layers {
            let y = nn::linear(&x, &self.p(&format!("mapping.{i}.weight"))?, Some(&self.p(&format!("mapping.{i}.bias"))?))?;
            x = nn::leaky_relu(&y, LRELU)?;
        }
        LatentW::new(x)
    }

    pub fn broadcast(&self, w: &LatentW) -> Result<LatentWPlus> {
        let (b, d) = w.tensor().dims2()?;
        let n = self.num_styles();
        LatentWPlus::new(w.tensor().unsqueeze(1)?.broadcast_as((b, n, d))?.contiguous()?)
    }

    fn check_w_plus(&self, w_plus: &LatentWPlus) -> Result<()> {
        let (_, n, d) = w_plus.tensor().dims3()?;
        if n != self.num_styles() || d != self.config.latent_dim {
            return Err(shape_err(format!(
                "w⁺ is {n}×{d}, generator expects {}×{}",
                self.num_styles(),
                self.config.latent_dim
            )));
        }
        Ok(())
    }

    fn check_feature(&self, f: &FeatureMap, batch: usize) -> Result<()> {
        let (c, h, w) = self.config.f_shape()?;
        if f.layer != self.config.f_layer {
            return Err(shape_err(format!("feature annotates layer {}, F-space slot is layer {}", f.layer, self.config.f_layer)));
        }
        if f.values.dims() != [batch, c, h, w] {
            return Err(shape_err(format!("feature has shape {:?}, expected {:?}", f.values.dims(), [batch, c, h, w])));
        }
        Ok(())
    }

    fn style_layer(&self, j: usize, x: &Tensor, style: &Tensor) -> Result<Tensor> {
        let x = if j % 2 == 1 { nn::upsample2x(x)? } else { x.clone() };
        let x = nn::conv_bias(&x, &self.p(&format!("synthesis.{j}.conv.weight"))?, &self.p(&format!("synthesis.{j}.conv.bias"))?, 1, 1)?;
        let x = nn::leaky_relu(&x, LRELU)?;
        let (_, c, _, _) = x.dims4()?;
        let y = nn::linear(style, &self.p(&format!("synthesis.{j}.style.weight"))?, Some(&self.p(&format!("synthesis.{j}.style.bias"))?))?;
        let scale = (y.narrow(1, 0, c)? + 1.0)?;
        let shift = y.narrow(1, c, c)?;
        Ok(nn::channel_affine(&nn::instance_norm(&x, NORM_EPS)?, &scale, &shift)?)
    }

    fn to_rgb(&self, x: &Tensor, style: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let s = nn::linear(style, &self.p("to_rgb.style.weight")?, Some(&self.p("to_rgb.style.bias")?))?;
        let s = (s + 1.0)?;
        let zero = Tensor::zeros((b, c), x.dtype(), x.device())?;
        let y = nn::conv_bias(&nn::channel_affine(x, &s, &zero)?, &self.p("to_rgb.weight")?, &self.p("to_rgb.bias")?, 1, 0)?;
        Ok(nn::tanh(&y)?)
    }

    fn linear_feature(&self, w_plus: &Tensor) -> Result<Tensor> {
        let b = w_plus.dims()[0];
        let (c, h, w) = self.config.f_shape()?;
        let flat = w_plus.reshape((b, ()))?;
        let f = nn::linear(&flat, &self.p("linear.feature.weight")?, Some(&self.p("linear.feature.bias")?))?;
        Ok(f.reshape((b, c, h, w))?)
    }

    fn linear_image(&self, feature: &Tensor) -> Result<Tensor> {
        let b = feature.dims()[0];
        let r = self.config.resolution;
        let flat = feature.reshape((b, ()))?;
        let img = nn::linear(&flat, &self.p("linear.image.weight")?, Some(&self.p("linear.image.bias")?))?;
        Ok(img.reshape((b, 3, r, r))?)
    }

    /// Runs synthesis layers `start..` from activation `x`, optionally stopping
    /// after layer `stop` and optionally recording every activation.
    fn run(
        &self,
        w_plus: &Tensor,
        mut x: Tensor,
        start: usize,
        stop: Option<usize>,
        features: &mut Option<Vec<FeatureMap>>,
        f_override: Option<&FeatureMap>,
    ) -> Result<Tensor> {
        let end = stop.map_or(self.config.num_layers(), |s| s + 1);
        for j in start..end {
            let style = w_plus.i((.., j, ..))?;
            x = self.style_layer(j, &x, &style)?;
            if let Some(f) = f_override.filter(|f| f.layer == j) {
                x = f.values.clone();
            }
            if let Some(fs) = features.as_mut() {
                fs.push(FeatureMap::new(x.clone(), j)?);
            }
        }
        Ok(x)
    }

    fn constant(&self, batch: usize) -> Result<Tensor> {
        let c = self.p("synthesis.const")?;
        let (_, ch, h, w) = c.dims4()?;
        Ok(c.broadcast_as((batch, ch, h, w))?.contiguous()?)
    }

    /// Full synthesis pass; with `f_override`, the F-slot activation is
    /// replaced before later layers run.
    pub fn synthesize(&self, w_plus: &LatentWPlus, f_override: Option<&FeatureMap>) -> Result<Synthesis> {
        self.check_w_plus(w_plus)?;
        let b = w_plus.batch();
        let wp = w_plus.tensor().to_dtype(self.dtype())?;
        if let Some(f) = f_override {
            self.check_feature(f, b)?;
        }
        match self.config.architecture {
            Architecture::Style => {
                let mut features = Some(Vec::with_capacity(self.config.num_layers()));
                let x = self.run(&wp, self.constant(b)?, 0, None, &mut features, f_override)?;
                let image = self.to_rgb(&x, &wp.i((.., self.num_styles() - 1, ..))?)?;
                Ok(Synthesis { image: ImageTensor::new(image)?, features: features.unwrap_or_default() })
            }
            Architecture::Linear => {
                let f = match f_override {
                    Some(f) => f.values.clone(),
                    None => self.linear_feature(&wp)?,
                };
                let image = self.linear_image(&f)?;
                Ok(Synthesis { image: ImageTensor::new(image)?, features: vec![FeatureMap::new(f, 0)?] })
            }
        }
    }

    /// `G(w⁺)` without retaining intermediate features.
    pub fn render(&self, w_plus: &LatentWPlus) -> Result<ImageTensor> {
        self.check_w_plus(w_plus)?;
        let b = w_plus.batch();
        let wp = w_plus.tensor().to_dtype(self.dtype())?;
        match self.config.architecture {
            Architecture::Style => {
                let x = self.run(&wp, self.constant(b)?, 0, None, &mut None, None)?;
                ImageTensor::new(self.to_rgb(&x, &wp.i((.., self.num_styles() - 1, ..))?)?)
            }
            Architecture::Linear => ImageTensor::new(self.linear_image(&self.linear_feature(&wp)?)?),
        }
    }

    /// `G(broadcast(w))`.
    pub fn render_w(&self, w: &LatentW) -> Result<ImageTensor> {
        self.render(&self.broadcast(w)?)
    }

    /// `G(w⁺, f)`: starts from `f` at the F slot and runs only the later layers.
    pub fn render_with_feature(&self, w_plus: &LatentWPlus, f: &FeatureMap) -> Result<ImageTensor> {
        self.check_w_plus(w_plus)?;
        self.check_feature(f, w_plus.batch())?;
        let wp = w_plus.tensor().to_dtype(self.dtype())?;
        match self.config.architecture {
            Architecture::Style => {
                let x = self.run(&wp, f.values.clone(), f.layer + 1, None, &mut None, None)?;
                ImageTensor::new(self.to_rgb(&x, &wp.i((.., self.num_styles() - 1, ..))?)?)
            }
            Architecture::Linear => ImageTensor::new(self.linear_image(&f.values)?),
        }
    }

    pub fn layer_feature(&self, w_plus: &LatentWPlus, layer: usize) -> Result<FeatureMap> {
        self.config.layer_shape(layer)?;
        self.check_w_plus(w_plus)?;
        let wp = w_plus.tensor().to_dtype(self.dtype())?;
        match self.config.architecture {
            Architecture::Style => {
                let x = self.run(&wp, self.constant(w_plus.batch())?, 0, Some(layer), &mut None, None)?;
                FeatureMap::new(x, layer)
            }
            Architecture::Linear => FeatureMap::new(self.linear_feature(&wp)?, 0),
        }
    }

    /// The F-slot feature `G^k(w⁺)`.
    pub fn f_feature(&self, w_plus: &LatentWPlus) -> Result<FeatureMap> {
        self.layer_feature(w_plus, self.config.f_layer)
    }

    pub fn sample_z(&self, count: usize, seed: u64) -> Result<LatentZ> {
        let mut rng = nn::rng(seed);
        LatentZ::new(nn::randn(&mut rng, &[count, self.config.latent_dim], self.dtype(), self.device())?)
    }

    pub fn sample_w(&self, count: usize, seed: u64) -> Result<LatentW> {
        self.map_latent(&self.sample_z(count, seed)?)
    }

    pub fn w_statistics(&self, samples: usize, seed: u64) -> Result<WStats> {
        let w = self.sample_w(samples, seed)?.into_tensor().to_dtype(DType::F64)?;
        let mean = w.mean(0)?;
        let std = w.broadcast_sub(&mean)?.sqr()?.mean(0)?.sqrt()?;
        Ok(WStats { samples, seed, mean: mean.to_vec1()?, std: std.to_vec1()? })
    }

    /// Mean of `samples` mapped latents, the usual starting point for optimisation.
    pub fn mean_w(&self, samples: usize, seed: u64) -> Result<LatentW> {
        let w = self.sample_w(samples, seed)?;
        LatentW::new(w.tensor().mean_keepdim(0)?)
    }

    /// Synthesises `count` (image, w) pairs in chunks, with a seeded 90/10
    /// train/validation split.
    pub fn sample_pairs(&self, count: usize, seed: u64) -> Result<PairDataset> {
        if count == 0 {
            return Err(Error::Dataset("pair count must be positive".into()));
        }
        let w = self.sample_w(count, seed)?;
        let mut images = Vec::new();
        let chunk = 64;
        let mut start = 0;
        while start < count {
            let len = chunk.min(count - start);
            let wc = LatentW::new(w.tensor().narrow(0, start, len)?)?;
            images.push(self.render_w(&wc)?.into_tensor().to_dtype(DType::F32)?);
            start += len;
        }
        let images = Tensor::cat(&images, 0)?;
        let (train, val) = split_indices(count, seed);
        Ok(PairDataset {
            images,
            latents: w.into_tensor().to_dtype(DType::F32)?,
            train,
            val,
            seed,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, "generator", self.config.seed, &self.config, &self.params, serde_json::Value::Null)?;
        Ok(())
    }

    pub fn load(dir: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let manifest = checkpoint::load_kind(dir, "generator")?;
        let config: GeneratorConfig = manifest.config()?;
        let g = Self::new(config, dtype, device)?;
        checkpoint::restore(dir, &manifest, &g.params)?;
        Ok(g)
    }
}

/// Seeded shuffle into train/validation indices; validation gets a tenth
/// (at least one when there are two or more pairs).
pub fn split_indices(count: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..count).collect();
    let mut rng = nn::rng(seed ^ SPLIT_SALT);
    idx.shuffle(&mut rng);
    let n_val = if count >= 2 { (count / 10).max(1) } else { 0 };
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

const SPLIT_SALT: u64 = 0x5eed_0000_0000_5171;

/// (image, w) pairs synthesised by a generator.
pub struct PairDataset {
    /// count×3×res×res, `f32`.
    pub images: Tensor,
    /// count×d, `f32`.
    pub latents: Tensor,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct PairManifest {
    format_version: u32,
    kind: String,
    count: usize,
    resolution: usize,
    latent_dim: usize,
    seed: u64,
    images: String,
    latents: String,
    train: Vec<usize>,
    val: Vec<usize>,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.images.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolution(&self) -> usize {
        self.images.dims()[3]
    }

    /// Gathers the pairs at `indices`, converted to `dtype`.
    pub fn batch(&self, indices: &[usize], dtype: DType) -> Result<(ImageTensor, LatentW)> {
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        let idx = Tensor::new(idx.as_slice(), self.images.device())?;
        let images = self.images.index_select(&idx, 0)?.to_dtype(dtype)?;
        let latents = self.latents.index_select(&idx, 0)?.to_dtype(dtype)?;
        Ok((ImageTensor::new(images)?, LatentW::new(latents)?))
    }

    /// Bytes of the two raw blobs for a dataset of this size.
    pub fn blob_bytes(count: usize, resolution: usize, latent_dim: usize) -> u64 {
        (count as u64) * ((3 * resolution * resolution + latent_dim) as u64) * 4
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        checkpoint::write_f32_blob(&dir.join("images.f32"), &checkpoint::tensor_to_f32(&self.images)?)?;
        checkpoint::write_f32_blob(&dir.join("latents.f32"), &checkpoint::tensor_to_f32(&self.latents)?)?;
        let manifest = PairManifest {
            format_version: checkpoint::FORMAT_VERSION,
            kind: "pairs".into(),
            count: self.len(),
            resolution: self.resolution(),
            latent_dim: self.latents.dims()[1],
            seed: self.seed,
            images: "images.f32".into(),
            latents: "latents.f32".into(),
            train: self.train.clone(),
            val: self.val.clone(),
        };
        fs::write(dir.join(checkpoint::MANIFEST), serde_json::to_string(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(checkpoint::MANIFEST))?;
        let m: PairManifest = serde_json::from_str(&text)?;
        if m.kind != "pairs" || m.format_version != checkpoint::FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("{} is not a pair dataset", dir.display())));
        }
        let images = checkpoint::read_f32_blob(&dir.join(&m.images))?;
        let latents = checkpoint::read_f32_blob(&dir.join(&m.latents))?;
        let r = m.resolution;
        let images = Tensor::from_vec(images, (m.count, 3, r, r), &Device::Cpu)?;
        let latents = Tensor::from_vec(latents, (m.count, m.latent_dim), &Device::Cpu)?;
        Ok(Self { images, latents, train: m.train, val: m.val, seed: m.seed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dtype: DType) -> Generator {
        let cfg = GeneratorConfig { resolution: 32, latent_dim: 16, channels: vec![8, 8, 6, 4], f_layer: 3, ..Default::default() };
        Generator::new(cfg, dtype, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        nn::scalar_f64(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap()
    }

    #[test]
    fn default_config_matches_documented_shapes() {
        let cfg = GeneratorConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_styles(), 10);
        assert_eq!(cfg.num_layers(), 9);
        assert_eq!(cfg.f_shape().unwrap(), (16, 16, 16));
        assert!(matches!(cfg.layer_shape(9), Err(Error::Range(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = GeneratorConfig { resolution: 48, ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg = GeneratorConfig { channels: vec![4, 4, 0, 4, 4], ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg = GeneratorConfig { f_layer: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg = GeneratorConfig { f_layer: 9, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mapping_is_deterministic_and_non_constant() {
        let g = small(DType::F32);
        let z = g.sample_z(100, 3).unwrap();
        let a = g.map_latent(&z).unwrap();
        let b = g.map_latent(&z).unwrap();
        assert_eq!(a.tensor().to_vec2::<f32>().unwrap(), b.tensor().to_vec2::<f32>().unwrap());

        let mut zv = z.tensor().to_vec2::<f32>().unwrap();
        for row in zv.iter_mut() {
            row[0] += 1.0;
        }
        let z2 = LatentZ::new(Tensor::new(zv, &Device::Cpu).unwrap()).unwrap();
        let c = g.map_latent(&z2).unwrap().tensor().to_vec2::<f32>().unwrap();
        let a = a.tensor().to_vec2::<f32>().unwrap();
        let changed = a.iter().zip(&c).filter(|(x, y)| x != y).count();
        assert!(changed >= 95, "only {changed} of 100 samples changed");
    }

    #[test]
    fn map_latent_rejects_wrong_length() {
        let g = small(DType::F32);
        let z = LatentZ::new(Tensor::zeros((2, 5), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert!(matches!(g.map_latent(&z), Err(Error::Shape(_))));
    }

    #[test]
    fn broadcast_repeats_rows() {
        let g = small(DType::F32);
        let zero = LatentW::new(Tensor::zeros((2, 16), DType::F32, &Device::Cpu).unwrap()).unwrap();
        let wp = g.broadcast(&zero).unwrap();
        assert_eq!(wp.tensor().dims(), &[2, 8, 16]);
        assert_eq!(nn::scalar_f64(&wp.tensor().abs().unwrap().max_all().unwrap()).unwrap(), 0.0);

        let w = g.sample_w(3, 1).unwrap();
        let wp = g.broadcast(&w).unwrap();
        for i in 0..wp.rows() {
            assert_eq!(max_diff(wp.row(i).unwrap().tensor(), w.tensor()), 0.0);
        }
        let plain = g.render_w(&w).unwrap();
        let via = g.synthesize(&wp, None).unwrap().image;
        assert_eq!(max_diff(plain.tensor(), via.tensor()), 0.0);
    }

    #[test]
    fn self_override_is_a_no_op() {
        for dtype in [DType::F32, DType::F64] {
            let g = small(dtype);
            let mut rng = nn::rng(5);
            let wp = LatentWPlus::new(nn::randn(&mut rng, &[4, 8, 16], dtype, &Device::Cpu).unwrap()).unwrap();
            let base = g.synthesize(&wp, None).unwrap();
            let f = g.f_feature(&wp).unwrap();
            let over = g.synthesize(&wp, Some(&f)).unwrap();
            assert!(max_diff(base.image.tensor(), over.image.tensor()) <= 1e-6);
            let direct = g.render_with_feature(&wp, &f).unwrap();
            assert!(max_diff(base.image.tensor(), direct.tensor()) <= 1e-6);
        }
    }

    #[test]
    fn override_changes_downstream_only() {
        let g = small(DType::F64);
        let wp = g.broadcast(&g.sample_w(2, 9).unwrap()).unwrap();
        let base = g.synthesize(&wp, None).unwrap();
        let f = g.f_feature(&wp).unwrap();
        let bumped = FeatureMap::new((f.values + 0.5).unwrap(), f.layer).unwrap();
        let over = g.synthesize(&wp, Some(&bumped)).unwrap();
        for j in 0..g.config().f_layer {
            assert_eq!(max_diff(&base.features[j].values, &over.features[j].values), 0.0);
        }
        assert!(max_diff(base.image.tensor(), over.image.tensor()) > 1e-3);
    }

    #[test]
    fn override_with_wrong_shape_is_rejected() {
        let g = small(DType::F32);
        let wp = g.broadcast(&g.sample_w(2, 1).unwrap()).unwrap();
        let f = g.f_feature(&wp).unwrap();
        let narrow = FeatureMap::new(f.values.narrow(1, 0, 2).unwrap(), f.layer).unwrap();
        assert!(matches!(g.synthesize(&wp, Some(&narrow)), Err(Error::Shape(_))));
        let wrong_layer = FeatureMap::new(f.values.clone(), f.layer + 1).unwrap();
        assert!(matches!(g.render_with_feature(&wp, &wrong_layer), Err(Error::Shape(_))));
    }

    #[test]
    fn distinct_latents_give_distinct_images() {
        let g = small(DType::F32);
        let img = g.render_w(&g.sample_w(20, 2).unwrap()).unwrap().into_tensor();
        let v = img.flatten_from(1).unwrap().to_vec2::<f32>().unwrap();
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                assert_ne!(v[i], v[j]);
            }
        }
        let all = nn::to_f64_vec(&img).unwrap();
        assert!(all.iter().all(|x| x.abs() <= 1.0));
    }

    #[test]
    fn linear_generator_matches_closed_form() {
        let cfg = GeneratorConfig::linear(8, 4, 2, 11);
        let g = Generator::new(cfg, DType::F64, &Device::Cpu).unwrap();
        let mut rng = nn::rng(12);
        let wp = LatentWPlus::new(nn::randn(&mut rng, &[2, 4, 4], DType::F64, &Device::Cpu).unwrap()).unwrap();
        let out = g.synthesize(&wp, None).unwrap();

        let mat = |n: &str| g.params().get(n).unwrap().to_vec2::<f64>().unwrap();
        let vec = |n: &str| g.params().get(n).unwrap().to_vec1::<f64>().unwrap();
        let (a, a0, b, b0) = (mat("linear.feature.weight"), vec("linear.feature.bias"), mat("linear.image.weight"), vec("linear.image.bias"));
        let x = wp.tensor().flatten_from(1).unwrap().to_vec2::<f64>().unwrap();
        let img = out.image.tensor().flatten_from(1).unwrap().to_vec2::<f64>().unwrap();
        let feat = out.features[0].values.flatten_from(1).unwrap().to_vec2::<f64>().unwrap();
        for s in 0..2 {
            let f: Vec<f64> = (0..a0.len()).map(|j| a0[j] + (0..x[s].len()).map(|i| x[s][i] * a[i][j]).sum::<f64>()).collect();
            for j in 0..f.len() {
                assert!((f[j] - feat[s][j]).abs() < 1e-12);
            }
            for o in 0..b0.len() {
                let expect = b0[o] + (0..f.len()).map(|j| f[j] * b[j][o]).sum::<f64>();
                assert!((expect - img[s][o]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_feature_matches_synthesis_features() {
        let g = small(DType::F32);
        let wp = g.broadcast(&g.sample_w(3, 4).unwrap()).unwrap();
        let syn = g.synthesize(&wp, None).unwrap();
        for layer in 0..g.config().num_layers() {
            let f = g.layer_feature(&wp, layer).unwrap();
            let (c, h, w) = g.config().layer_shape(layer).unwrap();
            assert_eq!(f.values.dims(), &[3, c, h, w]);
            assert_eq!(max_diff(&f.values, &syn.features[layer].values), 0.0);
        }
        let again = g.f_feature(&wp).unwrap();
        assert_eq!(max_diff(&again.values, &syn.features[g.config().f_layer].values), 0.0);
        assert!(matches!(g.layer_feature(&wp, 99), Err(Error::Range(_))));
    }

    #[test]
    fn single_pair_resynthesises_exactly() {
        let g = small(DType::F32);
        let ds = g.sample_pairs(1, 7).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!((ds.train.len(), ds.val.len()), (1, 0));
        let (img, w) = ds.batch(&[0], DType::F32).unwrap();
        let again = g.render_w(&w).unwrap();
        assert_eq!(max_diff(img.tensor(), again.tensor()), 0.0);
    }

    #[test]
    fn pairs_are_seed_deterministic_with_disjoint_split() {
        let g = small(DType::F32);
        let a = g.sample_pairs(70, 3).unwrap();
        let b = g.sample_pairs(70, 3).unwrap();
        assert_eq!(max_diff(&a.images, &b.images), 0.0);
        assert_eq!(max_diff(&a.latents, &b.latents), 0.0);
        assert_eq!(a.train, b.train);
        assert_eq!(a.val.len(), 7);
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..70).collect::<Vec<_>>());
        let c = g.sample_pairs(70, 4).unwrap();
        assert!(max_diff(&a.latents, &c.latents) > 0.0);
        assert!(g.sample_pairs(0, 1).is_err());
    }

    #[test]
    fn pair_blob_budget_for_twenty_thousand_pairs() {
        let bytes = PairDataset::blob_bytes(20_000, 64, 128);
        assert_eq!(bytes, 20_000 * (3 * 64 * 64 + 128) * 4);
        assert!(bytes < 1_000_000_000);
    }

    #[test]
    fn pair_dataset_round_trips_on_disk() {
        let g = small(DType::F32);
        let ds = g.sample_pairs(12, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = PairDataset::load(dir.path()).unwrap();
        assert_eq!(max_diff(&ds.images, &back.images), 0.0);
        assert_eq!(ds.val, back.val);
        let bytes = std::fs::metadata(dir.path().join("images.f32")).unwrap().len()
            + std::fs::metadata(dir.path().join("latents.f32")).unwrap().len();
        assert_eq!(bytes, PairDataset::blob_bytes(12, 32, 16));
    }

    #[test]
    fn w_statistics_are_reproducible() {
        let g = small(DType::F32);
        let a = g.w_statistics(10_000, 1).unwrap();
        let b = g.w_statistics(10_000, 1).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.mean.len(), 16);
        assert!(a.std.iter().all(|s| s.is_finite() && *s > 0.0));
        let m = g.mean_w(10_000, 1).unwrap();
        let mv = nn::to_f64_vec(m.tensor()).unwrap();
        for (x, y) in mv.iter().zip(&a.mean) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn checkpoint_round_trip_reproduces_images() {
        let g = small(DType::F32);
        let dir = tempfile::tempdir().unwrap();
        g.save(dir.path()).unwrap();
        let back = Generator::load(dir.path(), DType::F32, &Device::Cpu).unwrap();
        let w = g.sample_w(2, 5).unwrap();
        assert_eq!(max_diff(g.render_w(&w).unwrap().tensor(), back.render_w(&w).unwrap().tensor()), 0.0);
        assert_eq!(g.params().checksum().unwrap(), back.params().checksum().unwrap());
    }
}
