//! Encoder losses and the training loop.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::alignment::{csv_err, AlignModel};
use crate::encoder::{Encoder, EncoderConfig, InversionResult};
use crate::error::{shape_err, Error, Result};
use crate::generator::{FeatureMap, Generator, ImageTensor, LatentWPlus, PairDataset};
use crate::metrics;
use crate::nn::{self, BatchSampler};
use crate::perceptual::{PerceptualEmbedder, Reference};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_id: f64,
    pub lambda_freg: f64,
    pub lambda_align: f64,
    pub lambda_lpips: f64,
    pub lambda_l2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_rec: 1.0, lambda_id: 0.1, lambda_freg: 0.01, lambda_align: 1.0, lambda_lpips: 0.2, lambda_l2: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_rec, self.lambda_id, self.lambda_freg, self.lambda_align, self.lambda_lpips, self.lambda_l2];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn zero() -> Self {
        Self { lambda_rec: 0.0, lambda_id: 0.0, lambda_freg: 0.0, lambda_align: 0.0, lambda_lpips: 0.0, lambda_l2: 0.0 }
    }
}

/// Which reconstructions the encoder is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `G(w)` only.
    W,
    /// `G(w)` and `G(w⁺)`.
    WPlus,
    /// `G(w)`, `G(w⁺)`, `G(w⁺, f)` and the F regulariser.
    Full,
}

fn mse_per_image(a: &ImageTensor, b: &ImageTensor) -> Result<Tensor> {
    Ok((a.tensor() - b.tensor())?.sqr()?.flatten_from(1)?.mean(1)?)
}

/// `Σᵢ (λ_lpips·perceptual(I, recᵢ) + λ₂·MSE(I, recᵢ))`, averaged over the batch.
pub fn rec_loss(target: &ImageTensor, recs: &[&ImageTensor], embedder: &PerceptualEmbedder, weights: &LossWeights) -> Result<Tensor> {
    let reference = embedder.reference(target)?;
    Ok(rec_and_id(target, &reference, recs, embedder, weights)?.0)
}

/// `Σᵢ (1 − cos(R(I), R(recᵢ)))`, averaged over the batch.
pub fn id_loss(target: &ImageTensor, recs: &[&ImageTensor], embedder: &PerceptualEmbedder) -> Result<Tensor> {
    let reference = embedder.reference(target)?;
    let w = LossWeights { lambda_lpips: 0.0, ..Default::default() };
    Ok(rec_and_id(target, &reference, recs, embedder, &w)?.1)
}

fn rec_and_id(
    target: &ImageTensor,
    reference: &Reference,
    recs: &[&ImageTensor],
    embedder: &PerceptualEmbedder,
    weights: &LossWeights,
) -> Result<(Tensor, Tensor)> {
    let mut rec: Option<Tensor> = None;
    let mut id: Option<Tensor> = None;
    for r in recs {
        if r.tensor().dims() != target.tensor().dims() {
            return Err(shape_err(format!("reconstruction {:?} vs target {:?}", r.tensor().dims(), target.tensor().dims())));
        }
        let (dist, cos) = embedder.compare(reference, r)?;
        let term = ((dist * weights.lambda_lpips)? + (mse_per_image(target, r)? * weights.lambda_l2)?)?.mean_all()?;
        let idt = cos.affine(-1.0, 1.0)?.mean_all()?;
        rec = Some(match rec {
            Some(t) => (t + term)?,
            None => term,
        });
        id = Some(match id {
            Some(t) => (t + idt)?,
            None => idt,
        });
    }
    match (rec, id) {
        (Some(r), Some(i)) => Ok((r, i)),
        _ => Err(Error::EmptyBatch),
    }
}

/// `‖f − G^k(w⁺)‖²` summed over feature elements, averaged over the batch.
pub fn f_reg_loss(f: &FeatureMap, generator: &Generator, w_plus: &LatentWPlus) -> Result<Tensor> {
    let target = generator.f_feature(w_plus)?;
    f_reg_against(f, &target)
}

fn f_reg_against(f: &FeatureMap, target: &FeatureMap) -> Result<Tensor> {
    if f.values.dims() != target.values.dims() {
        return Err(shape_err(format!("f {:?} vs generator feature {:?}", f.values.dims(), target.values.dims())));
    }
    Ok((&f.values - &target.values)?.sqr()?.flatten_from(1)?.sum(1)?.mean_all()?)
}

/// Unweighted loss terms of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub rec: f64,
    pub id: f64,
    pub freg: f64,
    pub align: f64,
    pub total: f64,
}

impl LossComponents {
    /// Sum of weighted terms; equals `total` up to rounding.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        w.lambda_rec * self.rec + w.lambda_id * self.id + w.lambda_freg * self.freg + w.lambda_align * self.align
    }
}

/// `λ_rec·L_rec + λ_id·L_id + λ_freg·L_freg + λ_align·L_align` for one
/// minibatch, with the alignment term (when a model is given) contrasting
/// the predicted `w` against the input images across the batch.
pub fn total_loss(
    images: &ImageTensor,
    result: &InversionResult,
    generator: &Generator,
    align: Option<&AlignModel>,
    embedder: &PerceptualEmbedder,
    weights: &LossWeights,
    objective: Objective,
) -> Result<(Tensor, LossComponents)> {
    let reference = embedder.reference(images)?;
    let rec_w = generator.render_w(&result.w)?;
    let zero = Tensor::zeros((), images.tensor().dtype(), images.tensor().device())?;
    let (rec, id, freg) = match objective {
        Objective::W => {
            let (rec, id) = rec_and_id(images, &reference, &[&rec_w], embedder, weights)?;
            (rec, id, zero.clone())
        }
        Objective::WPlus => {
            let rec_wp = generator.render(&result.w_plus)?;
            let (rec, id) = rec_and_id(images, &reference, &[&rec_w, &rec_wp], embedder, weights)?;
            (rec, id, zero.clone())
        }
        Objective::Full => {
            let syn = generator.synthesize(&result.w_plus, None)?;
            let rec_f = generator.render_with_feature(&result.w_plus, &result.f)?;
            let (rec, id) = rec_and_id(images, &reference, &[&rec_w, &syn.image, &rec_f], embedder, weights)?;
            let freg = f_reg_against(&result.f, &syn.features[generator.config().f_layer])?;
            (rec, id, freg)
        }
    };
    let align_term = match align {
        Some(model) => model.frozen_align_loss(images, &result.w)?,
        None => zero,
    };
    let total = ((((rec.clone() * weights.lambda_rec)? + (id.clone() * weights.lambda_id)?)? + (freg.clone() * weights.lambda_freg)?)?
        + (align_term.clone() * weights.lambda_align)?)?;
    let comps = LossComponents {
        rec: nn::scalar_f64(&rec)?,
        id: nn::scalar_f64(&id)?,
        freg: nn::scalar_f64(&freg)?,
        align: nn::scalar_f64(&align_term)?,
        total: nn::scalar_f64(&total)?,
    };
    Ok((total, comps))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub objective: Objective,
    /// Whether the frozen alignment loss is applied.
    pub use_align: bool,
    pub val_every: usize,
    pub val_samples: usize,
    /// Save a checkpoint every this many steps (0 disables intermediate saves).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 800,
            batch_size: 32,
            learning_rate: 1e-4,
            weights: LossWeights::default(),
            objective: Objective::Full,
            use_align: true,
            val_every: 200,
            val_samples: 256,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub step: usize,
    pub l_rec: f64,
    pub l_id: f64,
    pub l_freg: f64,
    pub l_align: f64,
    pub total: f64,
    pub val_psnr_w: Option<f64>,
    pub val_psnr_wplus: Option<f64>,
    pub val_psnr_f: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<TrainRow>,
}

impl TrainHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for row in &self.rows {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// The last validation triple (w, w⁺, f).
    pub fn final_validation(&self) -> Option<[f64; 3]> {
        self.rows.iter().rev().find_map(|r| Some([r.val_psnr_w?, r.val_psnr_wplus?, r.val_psnr_f?]))
    }
}

/// Mean PSNR of `G(w)`, `G(w⁺)` and `G(w⁺, f)` over `indices`.
pub fn validation_psnr(encoder: &Encoder, generator: &Generator, data: &PairDataset, indices: &[usize]) -> Result<[f64; 3]> {
    if indices.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sums = [0.0; 3];
    for chunk in indices.chunks(64) {
        let (img, _) = data.batch(chunk, encoder.params().dtype())?;
        let result = encoder.invert(&img)?;
        let recs = crate::encoder::reconstruct(generator, &result)?;
        for (s, r) in sums.iter_mut().zip(recs.all()) {
            *s += metrics::psnr(&img, r)?.iter().sum::<f64>();
        }
    }
    Ok(sums.map(|s| s / indices.len() as f64))
}

/// Everything `train_encoder` needs besides the configs.
pub struct TrainInputs<'a> {
    pub generator: &'a Generator,
    pub align: Option<&'a AlignModel>,
    pub embedder: &'a PerceptualEmbedder,
    pub data: &'a PairDataset,
    /// Where periodic and final checkpoints go, if anywhere.
    pub out_dir: Option<PathBuf>,
}

/// Trains a fresh encoder with Adam on seeded minibatches of the training split.
pub fn train_encoder(inputs: &TrainInputs, encoder_config: EncoderConfig, cfg: &TrainConfig) -> Result<(Encoder, TrainHistory)> {
    train_encoder_with(inputs, encoder_config, cfg, |_| {})
}

/// As [`train_encoder`], calling `progress` after every step.
pub fn train_encoder_with(
    inputs: &TrainInputs,
    encoder_config: EncoderConfig,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&TrainRow),
) -> Result<(Encoder, TrainHistory)> {
    cfg.weights.validate()?;
    let data = inputs.data;
    if data.train.is_empty() {
        return Err(Error::Dataset("encoder training needs at least one training pair".into()));
    }
    let align = if cfg.use_align { inputs.align } else { None };
    if cfg.use_align && align.is_none() {
        return Err(Error::Config("use_align is set but no alignment model was given".into()));
    }
    let encoder = Encoder::for_generator(inputs.generator, encoder_config, DType::F32)?;
    let mut opt = nn::adam(encoder.params(), cfg.learning_rate)?;
    let mut sampler = BatchSampler::new(data.train.clone(), cfg.seed.wrapping_add(7));
    let val: Vec<usize> = data.val.iter().take(cfg.val_samples).copied().collect();
    let mut history = TrainHistory::default();

    for step in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch_size);
        let (images, _) = data.batch(&idx, DType::F32)?;
        let result = encoder.invert(&images)?;
        let (loss, c) = total_loss(&images, &result, inputs.generator, align, inputs.embedder, &cfg.weights, cfg.objective)?;
        if !c.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("rec {} id {} freg {} align {} total {}", c.rec, c.id, c.freg, c.align, c.total),
            });
        }
        opt.backward_step(&loss)?;

        let mut row = TrainRow { step, l_rec: c.rec, l_id: c.id, l_freg: c.freg, l_align: c.align, total: c.total, ..Default::default() };
        let last = step + 1 == cfg.steps;
        if !val.is_empty() && (last || (cfg.val_every > 0 && (step + 1) % cfg.val_every == 0)) {
            let [a, b, f] = validation_psnr(&encoder, inputs.generator, data, &val)?;
            row.val_psnr_w = Some(a);
            row.val_psnr_wplus = Some(b);
            row.val_psnr_f = Some(f);
        }
        if let Some(dir) = &inputs.out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && !last {
                encoder.save(&dir.join(format!("step-{:06}", step + 1)), serde_json::json!({ "step": step + 1 }))?;
            }
        }
        progress(&row);
        history.rows.push(row);
    }
    if let Some(dir) = &inputs.out_dir {
        encoder.save(dir, serde_json::json!({ "steps": cfg.steps, "train": cfg }))?;
        history.write_csv(&dir.join("history.csv"))?;
    }
    Ok((encoder, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::AlignConfig;
    use crate::generator::GeneratorConfig;
    use crate::perceptual::EmbedderConfig;
    use candle_core::{Device, Var};

    fn small_generator(dtype: DType) -> Generator {
        let cfg = GeneratorConfig { resolution: 16, latent_dim: 8, channels: vec![6, 6, 4], f_layer: 2, ..Default::default() };
        Generator::new(cfg, dtype, &Device::Cpu).unwrap()
    }

    fn small_encoder_config(g: &Generator) -> EncoderConfig {
        let mut cfg = EncoderConfig::for_generator(g.config(), 1).unwrap();
        cfg.stem_channels = 4;
        cfg.pyramid_channels = [4, 4, 4];
        cfg.heads = 2;
        cfg.token_split = 2;
        cfg
    }

    fn embedder(dtype: DType) -> PerceptualEmbedder {
        PerceptualEmbedder::new(EmbedderConfig { channels: vec![4, 4], id_dim: 4, ..Default::default() }, dtype, &Device::Cpu).unwrap()
    }

    fn images(g: &Generator, n: usize, seed: u64) -> ImageTensor {
        g.render_w(&g.sample_w(n, seed).unwrap()).unwrap()
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.lambda_rec, w.lambda_id, w.lambda_freg, w.lambda_align), (1.0, 0.1, 0.01, 1.0));
        assert_eq!((w.lambda_lpips, w.lambda_l2), (0.2, 1.0));
    }

    #[test]
    fn rec_loss_cases() {
        let g = small_generator(DType::F64);
        let e = embedder(DType::F64);
        let img = images(&g, 2, 1);
        let w = LossWeights::default();
        assert!(nn::scalar_f64(&rec_loss(&img, &[&img, &img, &img], &e, &w).unwrap()).unwrap().abs() < 1e-12);

        let shifted = ImageTensor::new((img.tensor() + 0.5).unwrap()).unwrap();
        let no_lpips = LossWeights { lambda_lpips: 0.0, ..w };
        let v = nn::scalar_f64(&rec_loss(&img, &[&img, &shifted, &img], &e, &no_lpips).unwrap()).unwrap();
        assert!((v - 0.25).abs() < 1e-12);
        let doubled = LossWeights { lambda_l2: 2.0, ..no_lpips };
        let v2 = nn::scalar_f64(&rec_loss(&img, &[&img, &shifted, &img], &e, &doubled).unwrap()).unwrap();
        assert!((v2 - 2.0 * v).abs() < 1e-12);
    }

    #[test]
    fn id_loss_cases() {
        let g = small_generator(DType::F64);
        let e = embedder(DType::F64);
        let a = images(&g, 2, 1);
        let b = images(&g, 2, 2);
        assert!(nn::scalar_f64(&id_loss(&a, &[&a, &a, &a], &e).unwrap()).unwrap().abs() < 1e-6);
        let v = nn::scalar_f64(&id_loss(&a, &[&b, &b, &b], &e).unwrap()).unwrap();
        assert!((0.0..=6.0).contains(&v));

        let hand = PerceptualEmbedder::new(
            EmbedderConfig { channels: vec![2], kernel: 1, stride: 1, slope: 1.0, id_dim: 2, seed: 0 },
            DType::F64,
            &Device::Cpu,
        )
        .unwrap();
        let pick = Tensor::new(&[[1f64, 0., 0.], [0., 1., 0.]], &Device::Cpu).unwrap().reshape((2, 3, 1, 1)).unwrap();
        hand.assign("tap0.weight", &pick).unwrap();
        hand.assign("id.weight", &Tensor::eye(2, DType::F64, &Device::Cpu).unwrap()).unwrap();
        let flat = |rgb: [f64; 3]| {
            let v: Vec<f64> = rgb.iter().flat_map(|&c| std::iter::repeat_n(c, 16)).collect();
            ImageTensor::new(Tensor::from_vec(v, (1, 3, 4, 4), &Device::Cpu).unwrap()).unwrap()
        };
        let (red, green) = (flat([1.0, 0.0, 0.0]), flat([0.0, 1.0, 0.0]));
        let v = nn::scalar_f64(&id_loss(&red, &[&green, &green, &green], &hand).unwrap()).unwrap();
        assert!((v - 3.0).abs() < 1e-12);
    }

    #[test]
    fn f_reg_cases() {
        let g = small_generator(DType::F64);
        let wp = g.broadcast(&g.sample_w(2, 3).unwrap()).unwrap();
        let f = g.f_feature(&wp).unwrap();
        assert_eq!(nn::scalar_f64(&f_reg_loss(&f, &g, &wp).unwrap()).unwrap(), 0.0);
        let bumped = FeatureMap::new((f.values.clone() + 1.0).unwrap(), f.layer).unwrap();
        let n = f.values.elem_count() / 2;
        let v = nn::scalar_f64(&f_reg_loss(&bumped, &g, &wp).unwrap()).unwrap();
        assert!((v - n as f64).abs() < 1e-9);
    }

    fn setup() -> (Generator, AlignModel, PerceptualEmbedder, Encoder) {
        let g = small_generator(DType::F64);
        let acfg = AlignConfig {
            resolution: 16,
            latent_dim: 8,
            embed_dim: 4,
            image_channels: vec![4, 4],
            hidden_dim: 8,
            latent_tokens: 2,
            latent_width: 4,
            latent_heads: 1,
            ..Default::default()
        };
        let a = AlignModel::new(acfg, DType::F64, &Device::Cpu).unwrap();
        let e = embedder(DType::F64);
        let enc = Encoder::for_generator(&g, small_encoder_config(&g), DType::F64).unwrap();
        (g, a, e, enc)
    }

    #[test]
    fn total_loss_breakdown_and_zero_weights() {
        let (g, a, e, enc) = setup();
        let img = images(&g, 3, 4);
        let r = enc.invert(&img).unwrap();
        let w = LossWeights::default();
        let (t, c) = total_loss(&img, &r, &g, Some(&a), &e, &w, Objective::Full).unwrap();
        assert!((c.recombine(&w) - c.total).abs() < 1e-6);
        assert!((nn::scalar_f64(&t).unwrap() - c.total).abs() < 1e-12);
        assert!(c.rec >= 0.0 && c.id >= 0.0 && c.freg >= 0.0 && c.align.is_finite());
        let (_, z) = total_loss(&img, &r, &g, Some(&a), &e, &LossWeights::zero(), Objective::Full).unwrap();
        assert_eq!(z.total, 0.0);
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let (g, a, e, enc) = setup();
        let img = images(&g, 2, 5);
        let base = enc.invert(&img).unwrap();
        let wv = Var::from_tensor(base.w.tensor()).unwrap();
        let w = LossWeights::default();
        let loss_at = |wt: &Tensor| {
            let mut r = base.clone();
            r.w = crate::generator::LatentW::new(wt.clone()).unwrap();
            total_loss(&img, &r, &g, Some(&a), &e, &w, Objective::Full).unwrap().0
        };
        let grad = nn::to_f64_vec(loss_at(wv.as_tensor()).backward().unwrap().get(&wv).unwrap()).unwrap();
        let w0 = nn::to_f64_vec(base.w.tensor()).unwrap();
        let mut fd = vec![0.0; w0.len()];
        for i in 0..w0.len() {
            let at = |delta: f64| {
                let mut v = w0.clone();
                v[i] += delta;
                nn::scalar_f64(&loss_at(&Tensor::from_vec(v, (2, 8), &Device::Cpu).unwrap())).unwrap()
            };
            fd[i] = (at(1e-6) - at(-1e-6)) / 2e-6;
        }
        let num: f64 = grad.iter().zip(&fd).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        assert!(num / den < 1e-4, "relative error {}", num / den);
    }

    #[test]
    fn short_training_is_deterministic_and_leaves_frozen_modules_untouched() {
        let g = small_generator(DType::F32);
        let data = g.sample_pairs(48, 2).unwrap();
        let e = embedder(DType::F32);
        let acfg = AlignConfig {
            resolution: 16,
            latent_dim: 8,
            embed_dim: 4,
            image_channels: vec![4, 4],
            hidden_dim: 8,
            latent_tokens: 2,
            latent_width: 4,
            latent_heads: 1,
            ..Default::default()
        };
        let a = AlignModel::new(acfg, DType::F32, &Device::Cpu).unwrap();
        let sums = (g.params().checksum().unwrap(), a.params().checksum().unwrap(), e.params().checksum().unwrap());
        let dir = tempfile::tempdir().unwrap();
        let inputs = TrainInputs { generator: &g, align: Some(&a), embedder: &e, data: &data, out_dir: Some(dir.path().to_path_buf()) };
        let cfg = TrainConfig { steps: 6, batch_size: 8, val_every: 3, val_samples: 4, checkpoint_every: 3, learning_rate: 1e-3, ..Default::default() };
        let (enc, h1) = train_encoder(&inputs, small_encoder_config(&g), &cfg).unwrap();
        let inputs2 = TrainInputs { out_dir: None, ..inputs };
        let (_, h2) = train_encoder(&inputs2, small_encoder_config(&g), &cfg).unwrap();
        assert_eq!(h1.rows.len(), 6);
        assert!(h1.rows.iter().all(|r| r.total.is_finite()));
        assert_eq!(h1.rows[5].total, h2.rows[5].total);
        assert!(h1.rows[2].val_psnr_f.is_some() && h1.rows[3].val_psnr_f.is_none());
        assert!(h1.final_validation().is_some());
        assert_eq!(sums, (g.params().checksum().unwrap(), a.params().checksum().unwrap(), e.params().checksum().unwrap()));

        assert!(dir.path().join("step-000003").join("manifest.json").exists());
        let csv = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
        assert!(csv.starts_with("step,l_rec,l_id,l_freg,l_align,total,val_psnr_w,val_psnr_wplus,val_psnr_f\n"));
        let back = Encoder::load(dir.path(), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(back.params().checksum().unwrap(), enc.params().checksum().unwrap());
    }

    #[test]
    fn align_flag_requires_model() {
        let g = small_generator(DType::F32);
        let data = g.sample_pairs(8, 2).unwrap();
        let e = embedder(DType::F32);
        let inputs = TrainInputs { generator: &g, align: None, embedder: &e, data: &data, out_dir: None };
        let cfg = TrainConfig { steps: 1, ..Default::default() };
        assert!(matches!(train_encoder(&inputs, small_encoder_config(&g), &cfg), Err(Error::Config(_))));
    }
}
