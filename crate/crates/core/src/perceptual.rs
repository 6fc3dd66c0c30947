//! Frozen random convolutional embedder used as a stand-in for pretrained
//! perceptual and identity networks.
//!
//! The perceptual distance unit-normalises each tap's activations along the
//! channel axis, sums squared differences over channels, averages over
//! positions and then over taps. The identity vector is a linear read-out of
//! the spatially pooled last tap.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::generator::ImageTensor;
use crate::nn::{self, ParamStore};

const NORM_EPS: f64 = 1e-10;
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    /// Output channels of each convolution; every convolution is a tap.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    /// Leaky-ReLU slope; 1 makes the network linear.
    pub slope: f64,
    pub id_dim: usize,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self { channels: vec![16, 32, 32], kernel: 3, stride: 2, slope: 0.2, id_dim: 64, seed: 0x1d }
    }
}

pub struct PerceptualEmbedder {
    config: EmbedderConfig,
    params: ParamStore,
}

impl PerceptualEmbedder {
    pub fn new(config: EmbedderConfig, dtype: DType, device: &Device) -> Result<Self> {
        if config.channels.is_empty() || config.kernel % 2 == 0 || config.stride == 0 || config.id_dim == 0 {
            return Err(Error::Config("embedder needs taps, an odd kernel, a positive stride and id_dim".into()));
        }
        let mut rng = nn::rng(config.seed);
        let mut p = ParamStore::new(dtype, device);
        let mut c_in = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            let fan_in = c_in * config.kernel * config.kernel;
            p.normal(&mut rng, &format!("tap{i}.weight"), &[c, c_in, config.kernel, config.kernel], (2.0 / fan_in as f64).sqrt())?;
            c_in = c;
        }
        p.normal(&mut rng, "id.weight", &[c_in, config.id_dim], 1.0 / (c_in as f64).sqrt())?;
        Ok(Self { config, params: p.frozen() })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Overwrites a weight, for hand-built embedders in tests and fixtures.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        self.params.assign(name, value)
    }

    pub fn taps(&self, images: &ImageTensor) -> Result<Vec<Tensor>> {
        let mut x = images.tensor().to_dtype(self.params.dtype())?;
        let mut taps = Vec::with_capacity(self.config.channels.len());
        for i in 0..self.config.channels.len() {
            let y = nn::conv2d(&x, &self.params.get(&format!("tap{i}.weight"))?, self.config.stride, self.config.kernel / 2)?;
            x = if self.config.slope == 1.0 { y } else { nn::leaky_relu(&y, self.config.slope)? };
            taps.push(x.clone());
        }
        Ok(taps)
    }

    fn identity_from_taps(&self, taps: &[Tensor]) -> Result<Tensor> {
        let last = taps.last().ok_or_else(|| Error::Config("no taps".into()))?;
        let pooled = last.flatten_from(2)?.mean(D::Minus1)?;
        Ok(nn::linear(&pooled, &self.params.get("id.weight")?, None)?)
    }

    /// Identity vectors `R(I)`, B×id_dim.
    pub fn identity(&self, images: &ImageTensor) -> Result<Tensor> {
        self.identity_from_taps(&self.taps(images)?)
    }

    /// Per-image perceptual distance between two batches, shape (B).
    pub fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<Tensor> {
        same_shape(a, b)?;
        distance_from_taps(&self.taps(a)?, &self.taps(b)?)
    }

    /// Per-image cosine of identity vectors, shape (B).
    pub fn id_similarity(&self, a: &ImageTensor, b: &ImageTensor) -> Result<Tensor> {
        same_shape(a, b)?;
        cosine(&self.identity(a)?, &self.identity(b)?)
    }

    /// Precomputes taps and identity for a target batch compared against
    /// several reconstructions.
    pub fn reference(&self, images: &ImageTensor) -> Result<Reference> {
        let taps = self.taps(images)?;
        let identity = self.identity_from_taps(&taps)?;
        Ok(Reference { taps, identity, shape: images.tensor().dims().to_vec() })
    }

    /// (perceptual distance, identity cosine) of `images` against a reference, each (B).
    pub fn compare(&self, reference: &Reference, images: &ImageTensor) -> Result<(Tensor, Tensor)> {
        if images.tensor().dims() != reference.shape.as_slice() {
            return Err(shape_err(format!("image batch {:?} vs reference {:?}", images.tensor().dims(), reference.shape)));
        }
        let taps = self.taps(images)?;
        let identity = self.identity_from_taps(&taps)?;
        Ok((distance_from_taps(&reference.taps, &taps)?, cosine(&reference.identity, &identity)?))
    }
}

/// Cached embedder outputs for a fixed image batch.
pub struct Reference {
    taps: Vec<Tensor>,
    identity: Tensor,
    shape: Vec<usize>,
}

fn same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.tensor().dims() != b.tensor().dims() {
        return Err(shape_err(format!("image batches {:?} and {:?} differ", a.tensor().dims(), b.tensor().dims())));
    }
    Ok(())
}

fn unit_channels(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)? + NORM_EPS)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

fn distance_from_taps(a: &[Tensor], b: &[Tensor]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (x, y) in a.iter().zip(b) {
        let d = (unit_channels(x)? - unit_channels(y)?)?.sqr()?.sum(1)?.flatten_from(1)?.mean(1)?;
        total = Some(match total {
            Some(t) => (t + d)?,
            None => d,
        });
    }
    let total = total.ok_or_else(|| Error::Config("no taps".into()))?;
    Ok((total / a.len() as f64)?)
}

/// Row-wise cosine similarity guarded by [`COSINE_EPS`].
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    Ok(dot.div(&((na * nb)? + COSINE_EPS)?)?)
}
