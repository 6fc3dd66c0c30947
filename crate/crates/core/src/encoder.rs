//! Inversion encoder.
//!
//! A strided convolutional pyramid yields T3 (finest), T2 and T1 (coarsest).
//! `w` comes from a map2style head on T1, the coarse residual Δw⁺ from
//! per-level heads (first rows from T1, middle rows from T2, the rest from
//! T3). Each row of w⁺ is `w` plus cross-attention of `w` over the matching
//! residual row; `f` is a convolutional head over T3 plus cross-attention of
//! every T3 position over `w`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::{CrossAttention, TokenSplit};
use crate::checkpoint;
use crate::error::{shape_err, Error, Result};
use crate::generator::{FeatureMap, Generator, GeneratorConfig, ImageTensor, LatentW, LatentWPlus};
use crate::nn::{self, ParamStore};

const LRELU: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub resolution: usize,
    pub latent_dim: usize,
    pub num_styles: usize,
    pub heads: usize,
    /// Tokens each `d`-vector is cut into inside the attention blocks.
    pub token_split: usize,
    pub stem_channels: usize,
    /// Channels of T3, T2 and T1.
    pub pyramid_channels: [usize; 3],
    pub t3_resolution: usize,
    /// Residual rows taken from T1 and from T2; the remainder come from T3.
    pub style_split: [usize; 2],
    /// Generator layer, channels and side of the F-space slot.
    pub f_layer: usize,
    pub f_channels: usize,
    pub f_resolution: usize,
    /// Ablation switches: without W⁺ attention, w⁺ = w + Δw⁺; without F
    /// attention, the F head sees T3 alone.
    pub wplus_attention: bool,
    pub f_attention: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::for_generator(&GeneratorConfig::default(), 0).expect("default generator config is valid")
    }
}

impl EncoderConfig {
    /// Sizes matched to `generator`, with default attention and pyramid settings.
    pub fn for_generator(generator: &GeneratorConfig, seed: u64) -> Result<Self> {
        let (f_channels, f_resolution, _) = generator.f_shape()?;
        let n = generator.num_styles();
        let t1 = (3 * n).div_ceil(10).max(1);
        let t2 = (4 * n / 10).max(1);
        Ok(Self {
            resolution: generator.resolution,
            latent_dim: generator.latent_dim,
            num_styles: n,
            heads: 4,
            token_split: 1,
            stem_channels: 32,
            pyramid_channels: [32, 64, 64],
            t3_resolution: f_resolution.min(generator.resolution / 2),
            style_split: [t1, t2],
            f_layer: generator.f_layer,
            f_channels,
            f_resolution,
            wplus_attention: true,
            f_attention: true,
            seed,
        })
    }

    pub fn split(&self) -> TokenSplit {
        TokenSplit { dim: self.latent_dim, heads: self.heads, tokens: self.token_split }
    }

    pub fn t1_resolution(&self) -> usize {
        self.t3_resolution / 4
    }

    pub fn t3_rows(&self) -> usize {
        self.num_styles - self.style_split[0] - self.style_split[1]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.split().validate()?;
        let pow2 = |v: usize| v.is_power_of_two();
        if !pow2(self.resolution) || !pow2(self.t3_resolution) || !pow2(self.f_resolution) {
            return bad("resolutions must be powers of two".into());
        }
        if self.t3_resolution < 4 || self.t3_resolution > self.resolution / 2 {
            return bad(format!("t3_resolution {} must lie in [4, {}]", self.t3_resolution, self.resolution / 2));
        }
        if self.f_resolution > self.t3_resolution {
            return bad(format!("f_resolution {} exceeds t3_resolution {}", self.f_resolution, self.t3_resolution));
        }
        if self.style_split[0] + self.style_split[1] >= self.num_styles || self.style_split.contains(&0) {
            return bad(format!("style split {:?} must leave rows for every level of {}", self.style_split, self.num_styles));
        }
        if self.stem_channels == 0 || self.pyramid_channels.contains(&0) || self.f_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }

    fn check_generator(&self, g: &GeneratorConfig) -> Result<()> {
        let (c, h, _) = g.f_shape()?;
        if g.resolution != self.resolution
            || g.latent_dim != self.latent_dim
            || g.num_styles() != self.num_styles
            || g.f_layer != self.f_layer
            || c != self.f_channels
            || h != self.f_resolution
        {
            return Err(Error::Config("encoder and generator configs disagree".into()));
        }
        Ok(())
    }
}

/// Pyramid features, each B×c×s×s.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub t1: Tensor,
    pub t2: Tensor,
    pub t3: Tensor,
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub w: LatentW,
    pub w_plus: LatentWPlus,
    pub f: FeatureMap,
}

impl InversionResult {
    pub fn from_parts(w: LatentW, w_plus: LatentWPlus, f: FeatureMap) -> Self {
        Self { w, w_plus, f }
    }
}

/// An inversion plus the intermediates that produced it.
#[derive(Debug, Clone)]
pub struct DetailedInversion {
    pub result: InversionResult,
    pub pyramid: Pyramid,
    pub delta_w_plus: LatentWPlus,
}

/// The three reconstructions `G(w)`, `G(w⁺)` and `G(w⁺, f)`.
#[derive(Debug, Clone)]
pub struct Reconstructions {
    pub w: ImageTensor,
    pub w_plus: ImageTensor,
    pub f: ImageTensor,
}

impl Reconstructions {
    pub fn all(&self) -> [&ImageTensor; 3] {
        [&self.w, &self.w_plus, &self.f]
    }
}

pub struct Encoder {
    config: EncoderConfig,
    params: ParamStore,
    wplus_block: CrossAttention,
    f_block: CrossAttention,
}

impl Encoder {
    /// Builds a fresh encoder; `w_avg` (1×d or d) seeds the bias of the `w` head.
    pub fn new(config: EncoderConfig, w_avg: Option<&Tensor>, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut rng = nn::rng(config.seed);
        let mut p = ParamStore::new(dtype, device);
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let [c3, c2, c1] = config.pyramid_channels;
        let d = config.latent_dim;

        let mut conv = |p: &mut ParamStore, name: &str, c_in: usize, c_out: usize| -> Result<()> {
            p.normal(&mut rng, &format!("{name}.weight"), &[c_out, c_in, 3, 3], he(c_in * 9))?;
            p.zeros(&format!("{name}.bias"), &[c_out])
        };
        conv(&mut p, "stem", 3, config.stem_channels)?;
        let mut c_in = config.stem_channels;
        for i in 0..Self::t3_downs(&config) {
            conv(&mut p, &format!("t3.down{i}"), c_in, c3)?;
            c_in = c3;
        }
        conv(&mut p, "t3.conv", c3, c3)?;
        conv(&mut p, "t2.down", c3, c2)?;
        conv(&mut p, "t2.conv", c2, c2)?;
        conv(&mut p, "t1.down", c2, c1)?;
        conv(&mut p, "t1.conv", c1, c1)?;

        let t1_side = config.t1_resolution();
        let heads = [
            ("w", c1, t1_side, 1),
            ("t1", c1, t1_side, config.style_split[0]),
            ("t2", c2, t1_side * 2, config.style_split[1]),
            ("t3", c3, config.t3_resolution, config.t3_rows()),
        ];
        for (name, c, side, _) in heads {
            for i in 0..side.trailing_zeros() as usize {
                conv(&mut p, &format!("m2s.{name}.conv{i}"), c, c)?;
            }
        }
        for (name, c, _, rows) in heads {
            p.normal(&mut rng, &format!("m2s.{name}.fc.weight"), &[c, rows * d], 1.0 / (c as f64).sqrt())?;
            p.zeros(&format!("m2s.{name}.fc.bias"), &[rows * d])?;
        }
        if let Some(avg) = w_avg {
            p.assign("m2s.w.fc.bias", &avg.flatten_all()?)?;
        }

        let split = config.split();
        let wplus_block = CrossAttention::init(&mut p, &mut rng, "attn.wplus", d, split)?;
        let f_block = CrossAttention::init(&mut p, &mut rng, "attn.f", c3, split)?;

        let mut conv = |p: &mut ParamStore, name: &str, c_in: usize, c_out: usize| -> Result<()> {
            p.normal(&mut rng, &format!("{name}.weight"), &[c_out, c_in, 3, 3], he(c_in * 9))?;
            p.zeros(&format!("{name}.bias"), &[c_out])
        };
        for i in 0..Self::f_downs(&config) {
            conv(&mut p, &format!("fhead.down{i}"), c3, c3)?;
        }
        conv(&mut p, "fhead.conv", c3, c3)?;
        conv(&mut p, "fhead.out", c3, config.f_channels)?;

        Ok(Self { config, params: p, wplus_block, f_block })
    }

    /// A fresh encoder sized for `generator`, with its `w` head centred on the
    /// generator's mean latent.
    pub fn for_generator(generator: &Generator, config: EncoderConfig, dtype: DType) -> Result<Self> {
        config.check_generator(generator.config())?;
        let avg = generator.mean_w(10_000, generator.config().seed ^ 0xa5a5)?;
        Self::new(config, Some(avg.tensor()), dtype, generator.device())
    }

    fn t3_downs(config: &EncoderConfig) -> usize {
        (config.resolution / 2 / config.t3_resolution).trailing_zeros() as usize
    }

    fn f_downs(config: &EncoderConfig) -> usize {
        (config.t3_resolution / config.f_resolution).trailing_zeros() as usize
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn wplus_block(&self) -> &CrossAttention {
        &self.wplus_block
    }

    pub fn f_block(&self) -> &CrossAttention {
        &self.f_block
    }

    fn conv(&self, x: &Tensor, name: &str, stride: usize, act: bool) -> Result<Tensor> {
        let y = nn::conv_bias(x, &self.params.get(&format!("{name}.weight"))?, &self.params.get(&format!("{name}.bias"))?, stride, 1)?;
        Ok(if act { nn::leaky_relu(&y, LRELU)? } else { y })
    }

    pub fn extract_pyramid(&self, images: &ImageTensor) -> Result<Pyramid> {
        let (_, c, h, w) = images.tensor().dims4()?;
        let r = self.config.resolution;
        if c != 3 || h != r || w != r {
            return Err(shape_err(format!("encoder expects 3×{r}×{r} images, got {:?}", images.tensor().dims())));
        }
        let mut x = self.conv(&images.tensor().to_dtype(self.params.dtype())?, "stem", 2, true)?;
        for i in 0..Self::t3_downs(&self.config) {
            x = self.conv(&x, &format!("t3.down{i}"), 2, true)?;
        }
        let t3 = self.conv(&x, "t3.conv", 1, true)?;
        let t2 = self.conv(&self.conv(&t3, "t2.down", 2, true)?, "t2.conv", 1, true)?;
        let t1 = self.conv(&self.conv(&t2, "t1.down", 2, true)?, "t1.conv", 1, true)?;
        Ok(Pyramid { t1, t2, t3 })
    }

    /// Strided convolutions down to 1×1, then a linear map to `rows·d`; B×rows×d.
    fn map2style(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        let (b, _, side, _) = x.dims4()?;
        let mut x = x.clone();
        for i in 0..side.trailing_zeros() as usize {
            x = self.conv(&x, &format!("m2s.{name}.conv{i}"), 2, true)?;
        }
        let y = nn::linear(&x.flatten_from(1)?, &self.params.get(&format!("m2s.{name}.fc.weight"))?, Some(&self.params.get(&format!("m2s.{name}.fc.bias"))?))?;
        Ok(y.reshape((b, (), self.config.latent_dim))?)
    }

    pub fn predict_w(&self, t1: &Tensor) -> Result<LatentW> {
        let (_, c, s, _) = t1.dims4()?;
        if c != self.config.pyramid_channels[2] || s != self.config.t1_resolution() {
            return Err(shape_err(format!("T1 has shape {:?}", t1.dims())));
        }
        LatentW::new(self.map2style("w", t1)?.squeeze(1)?)
    }

    pub fn coarse_residuals(&self, pyramid: &Pyramid) -> Result<LatentWPlus> {
        let rows = [self.map2style("t1", &pyramid.t1)?, self.map2style("t2", &pyramid.t2)?, self.map2style("t3", &pyramid.t3)?];
        LatentWPlus::new(Tensor::cat(&rows, 1)?)
    }

    /// Row `i` of the result is `w + Attention(w, Δw⁺ᵢ)`; without W⁺ attention,
    /// `w + Δw⁺ᵢ`.
    pub fn wplus_attention(&self, w: &LatentW, delta: &LatentWPlus) -> Result<LatentWPlus> {
        let (b, d) = w.tensor().dims2()?;
        let (b2, n, d2) = delta.tensor().dims3()?;
        if b != b2 || d != d2 || d != self.config.latent_dim {
            return Err(shape_err(format!("w {:?} and Δw⁺ {:?} do not match", w.tensor().dims(), delta.tensor().dims())));
        }
        let base = w.tensor().unsqueeze(1)?.broadcast_as((b, n, d))?;
        if !self.config.wplus_attention {
            return LatentWPlus::new((base + delta.tensor())?);
        }
        let queries = base.contiguous()?.reshape((b * n, 1, d))?;
        let sources = delta.tensor().reshape((b * n, 1, d))?;
        let a = self.wplus_block.forward(&self.params, &queries, &sources)?.reshape((b, n, d))?;
        LatentWPlus::new((base + a)?)
    }

    /// The F head's input: T3 plus the attention of every T3 position over `w`.
    pub fn f_head_input(&self, t3: &Tensor, w: &LatentW) -> Result<Tensor> {
        let (b, c, h, s) = t3.dims4()?;
        if c != self.config.pyramid_channels[0] || h != self.config.t3_resolution || s != h {
            return Err(shape_err(format!("T3 has shape {:?}", t3.dims())));
        }
        if !self.config.f_attention {
            return Ok(t3.clone());
        }
        let (bw, d) = w.tensor().dims2()?;
        if bw != b || d != self.config.latent_dim {
            return Err(shape_err(format!("w has shape {:?}", w.tensor().dims())));
        }
        let queries = t3.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let sources = w.tensor().unsqueeze(1)?;
        let a = self.f_block.forward(&self.params, &queries, &sources)?;
        let a = a.transpose(1, 2)?.contiguous()?.reshape((b, c, h, s))?;
        Ok((t3 + a)?)
    }

    pub fn f_attention(&self, t3: &Tensor, w: &LatentW) -> Result<FeatureMap> {
        let mut x = self.f_head_input(t3, w)?;
        for i in 0..Self::f_downs(&self.config) {
            x = self.conv(&x, &format!("fhead.down{i}"), 2, true)?;
        }
        let x = self.conv(&x, "fhead.conv", 1, true)?;
        FeatureMap::new(self.conv(&x, "fhead.out", 1, false)?, self.config.f_layer)
    }

    pub fn invert(&self, images: &ImageTensor) -> Result<InversionResult> {
        Ok(self.invert_detailed(images)?.result)
    }

    pub fn invert_detailed(&self, images: &ImageTensor) -> Result<DetailedInversion> {
        let pyramid = self.extract_pyramid(images)?;
        let w = self.predict_w(&pyramid.t1)?;
        let delta_w_plus = self.coarse_residuals(&pyramid)?;
        let w_plus = self.wplus_attention(&w, &delta_w_plus)?;
        let f = self.f_attention(&pyramid.t3, &w)?;
        Ok(DetailedInversion { result: InversionResult { w, w_plus, f }, pyramid, delta_w_plus })
    }

    pub fn save(&self, dir: &Path, metadata: serde_json::Value) -> Result<()> {
        checkpoint::save(dir, "encoder", self.config.seed, &self.config, &self.params, metadata)?;
        Ok(())
    }

    pub fn load(dir: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let manifest = checkpoint::load_kind(dir, "encoder")?;
        let enc = Self::new(manifest.config()?, None, dtype, device)?;
        checkpoint::restore(dir, &manifest, &enc.params)?;
        Ok(enc)
    }

    /// Copies every parameter value from `other` (same config).
    pub fn copy_from(&self, other: &Encoder) -> Result<()> {
        for (name, var) in other.params.iter() {
            self.params.assign(name, var.as_tensor())?;
        }
        Ok(())
    }
}

/// `G(w)`, `G(w⁺)` and `G(w⁺, f)` for an inversion.
pub fn reconstruct(generator: &Generator, result: &InversionResult) -> Result<Reconstructions> {
    Ok(Reconstructions {
        w: generator.render_w(&result.w)?,
        w_plus: generator.render(&result.w_plus)?,
        f: generator.render_with_feature(&result.w_plus, &result.f)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_generator() -> Generator {
        let cfg = GeneratorConfig { resolution: 32, latent_dim: 16, channels: vec![8, 8, 6, 4], f_layer: 3, ..Default::default() };
        Generator::new(cfg, DType::F64, &Device::Cpu).unwrap()
    }

    fn small_encoder(g: &Generator, token_split: usize, heads: usize) -> Encoder {
        let mut cfg = EncoderConfig::for_generator(g.config(), 3).unwrap();
        cfg.token_split = token_split;
        cfg.heads = heads;
        cfg.stem_channels = 8;
        cfg.pyramid_channels = [8, 8, 8];
        Encoder::for_generator(g, cfg, DType::F64).unwrap()
    }

    fn images(g: &Generator, n: usize, seed: u64) -> ImageTensor {
        g.render_w(&g.sample_w(n, seed).unwrap()).unwrap()
    }

    #[test]
    fn default_config_matches_generator() {
        let cfg = EncoderConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.style_split, [3, 4]);
        assert_eq!(cfg.t3_rows(), 3);
        assert_eq!((cfg.t3_resolution, cfg.f_channels, cfg.f_resolution), (16, 16, 16));
    }

    #[test]
    fn shapes_follow_config() {
        let g = small_generator();
        let e = small_encoder(&g, 1, 2);
        let d = e.invert_detailed(&images(&g, 2, 1)).unwrap();
        let r = &d.result;
        assert_eq!(d.pyramid.t3.dims(), &[2, 8, 16, 16]);
        assert_eq!(d.pyramid.t2.dims(), &[2, 8, 8, 8]);
        assert_eq!(d.pyramid.t1.dims(), &[2, 8, 4, 4]);
        assert_eq!(r.w.tensor().dims(), &[2, 16]);
        assert_eq!(r.w_plus.tensor().dims(), &[2, 8, 16]);
        assert_eq!(d.delta_w_plus.rows(), 8);
        assert_eq!(r.f.values.dims(), &[2, 6, 16, 16]);
        assert_eq!(r.f.layer, 3);
    }

    #[test]
    fn inversion_is_deterministic() {
        let g = small_generator();
        let e = small_encoder(&g, 2, 2);
        let img = images(&g, 2, 2);
        let a = e.invert(&img).unwrap();
        let b = e.invert(&img).unwrap();
        assert_eq!(nn::to_f64_vec(a.f.values.as_ref()).unwrap(), nn::to_f64_vec(&b.f.values).unwrap());
        assert_eq!(nn::to_f64_vec(a.w_plus.tensor()).unwrap(), nn::to_f64_vec(b.w_plus.tensor()).unwrap());
    }

    #[test]
    fn fresh_encoder_has_identity_residuals() {
        let g = small_generator();
        let e = small_encoder(&g, 2, 2);
        let d = e.invert_detailed(&images(&g, 3, 4)).unwrap();
        let r = &d.result;
        let a = g.render(&r.w_plus).unwrap();
        let b = g.render_w(&r.w).unwrap();
        let diff = nn::scalar_f64(&(a.tensor() - b.tensor()).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(diff <= 1e-6);
        let head_in = e.f_head_input(&d.pyramid.t3, &r.w).unwrap();
        assert_eq!(nn::to_f64_vec(&head_in).unwrap(), nn::to_f64_vec(&d.pyramid.t3).unwrap());
    }

    #[test]
    fn zeroed_heads_give_zero_residual() {
        let g = small_generator();
        let e = small_encoder(&g, 1, 1);
        for name in ["t1", "t2", "t3"] {
            for part in ["weight", "bias"] {
                let key = format!("m2s.{name}.fc.{part}");
                let shape = e.params().var(&key).unwrap().dims().to_vec();
                e.params().assign(&key, &Tensor::zeros(shape, DType::F64, &Device::Cpu).unwrap()).unwrap();
            }
        }
        let d = e.invert_detailed(&images(&g, 2, 5)).unwrap();
        assert_eq!(nn::scalar_f64(&d.delta_w_plus.tensor().abs().unwrap().max_all().unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn ablated_wplus_adds_residual_directly() {
        let g = small_generator();
        let mut cfg = EncoderConfig::for_generator(g.config(), 3).unwrap();
        cfg.wplus_attention = false;
        cfg.f_attention = false;
        let e = Encoder::for_generator(&g, cfg, DType::F64).unwrap();
        let d = e.invert_detailed(&images(&g, 2, 6)).unwrap();
        let r = &d.result;
        let want = g.broadcast(&r.w).unwrap().tensor().add(d.delta_w_plus.tensor()).unwrap();
        assert_eq!(nn::to_f64_vec(r.w_plus.tensor()).unwrap(), nn::to_f64_vec(&want).unwrap());
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let g = small_generator();
        let e = small_encoder(&g, 1, 1);
        let img = ImageTensor::new(Tensor::zeros((1, 3, 16, 16), DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert!(matches!(e.invert(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let g = small_generator();
        let e = small_encoder(&g, 2, 1);
        let dir = tempfile::tempdir().unwrap();
        e.save(dir.path(), serde_json::Value::Null).unwrap();
        let back = Encoder::load(dir.path(), DType::F64, &Device::Cpu).unwrap();
        let img = images(&g, 1, 7);
        let a = e.invert(&img).unwrap();
        let b = back.invert(&img).unwrap();
        let diff = nn::scalar_f64(&(a.f.values - b.f.values).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(diff < 1e-5);
    }
}
