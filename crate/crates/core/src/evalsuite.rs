//! Evaluation and ablation harness producing per-method metric tables.

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Tensor};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::alignment::csv_err;
use crate::baselines::{optimize_w, OptimizeConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, ImageTensor};
use crate::metrics;
use crate::perceptual::PerceptualEmbedder;
use crate::training::{train_encoder_with, Objective, TrainConfig, TrainInputs, TrainRow};

/// Full-scale reference numbers, kept as report metadata only.
pub fn full_scale_reference() -> serde_json::Value {
    serde_json::json!({
        "comparison": { "psnr": 24.50, "ssim": 0.68, "lpips": 0.06, "id": 0.79, "seconds_per_image": 0.080 },
        "ablation_psnr": {
            "Optimization": 16.95,
            "inverso_w w/o L_align": 18.15,
            "inverso_w": 19.36,
            "inverso_w+ w/o W+-attention": 20.61,
            "inverso_w+": 21.23,
            "inverso w/o F-attention": 23.93,
            "inverso": 24.50
        }
    })
}

/// A named image-to-reconstruction function.
pub struct NamedInverter<'a> {
    pub name: String,
    pub run: Box<dyn Fn(&ImageTensor) -> Result<ImageTensor> + 'a>,
}

impl<'a> NamedInverter<'a> {
    pub fn new(name: impl Into<String>, run: impl Fn(&ImageTensor) -> Result<ImageTensor> + 'a) -> Self {
        Self { name: name.into(), run: Box::new(run) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub batch_size: usize,
    /// Measure `seconds_per_image` (left empty otherwise).
    pub timing: bool,
    pub timing_images: usize,
    pub timing_repeats: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { batch_size: 32, timing: true, timing_images: 4, timing_repeats: 3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub variant: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub lpips_proxy: Option<f64>,
    pub id_sim: Option<f64>,
    pub seconds_per_image: Option<f64>,
    /// `ok`, `untrained`, or `failed: <reason>`.
    pub status: String,
}

impl MetricRow {
    fn empty(variant: &str, status: String) -> Self {
        Self { variant: variant.into(), psnr: None, ssim: None, lpips_proxy: None, id_sim: None, seconds_per_image: None, status }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub samples: usize,
    pub seed: u64,
    pub reference: serde_json::Value,
}

impl MetricReport {
    pub fn row(&self, variant: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_markdown(&self) -> String {
        let cell = |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |x| format!("{x:.digits$}"));
        let mut out = String::from("| Method | PSNR ↑ | SSIM ↑ | LPIPS-proxy ↓ | ID-proxy ↑ | Time (s) ↓ |\n|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let name = if r.is_ok() { r.variant.clone() } else { format!("{} ({})", r.variant, r.status) };
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                name,
                cell(r.psnr, 2),
                cell(r.ssim, 3),
                cell(r.lpips_proxy, 4),
                cell(r.id_sim, 3),
                cell(r.seconds_per_image, 4)
            ));
        }
        out
    }

    /// Writes `<stem>.csv`, `<stem>.json` and `<stem>.md` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv()?)?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join(format!("{stem}.md")), self.to_markdown())?;
        Ok(())
    }
}

fn slice(images: &ImageTensor, start: usize, len: usize) -> Result<ImageTensor> {
    ImageTensor::new(images.tensor().narrow(0, start, len)?)
}

fn score(inv: &NamedInverter, images: &ImageTensor, embedder: &PerceptualEmbedder, cfg: &EvalConfig) -> Result<MetricRow> {
    let n = images.batch();
    let (mut p, mut s, mut l, mut i) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for start in (0..n).step_by(cfg.batch_size.max(1)) {
        let batch = slice(images, start, cfg.batch_size.min(n - start))?;
        let rec = (inv.run)(&batch)?;
        let rec = ImageTensor::new(rec.tensor().to_dtype(batch.tensor().dtype())?)?;
        p.extend(metrics::psnr(&batch, &rec)?);
        s.extend(metrics::ssim(&batch, &rec)?);
        l.extend(metrics::lpips_proxy(&batch, &rec, embedder)?);
        i.extend(metrics::id_sim(&batch, &rec, embedder)?);
    }
    let values = [metrics::mean(&p), metrics::mean(&s), metrics::mean(&l), metrics::mean(&i)];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Range(format!("non-finite metric for {}", inv.name)));
    }
    let seconds = if cfg.timing { Some(time_per_image(inv, images, cfg)?) } else { None };
    Ok(MetricRow {
        variant: inv.name.clone(),
        psnr: Some(values[0]),
        ssim: Some(values[1]),
        lpips_proxy: Some(values[2]),
        id_sim: Some(values[3]),
        seconds_per_image: seconds,
        status: "ok".into(),
    })
}

/// Median over repeats of the mean single-image latency, after one warmup call.
pub fn time_per_image(inv: &NamedInverter, images: &ImageTensor, cfg: &EvalConfig) -> Result<f64> {
    let count = cfg.timing_images.clamp(1, images.batch());
    let singles: Vec<ImageTensor> = (0..count).map(|k| slice(images, k, 1)).collect::<Result<_>>()?;
    (inv.run)(&singles[0])?;
    let mut runs = Vec::with_capacity(cfg.timing_repeats.max(1));
    for _ in 0..cfg.timing_repeats.max(1) {
        let t = Instant::now();
        for img in &singles {
            (inv.run)(img)?;
        }
        runs.push(t.elapsed().as_secs_f64() / count as f64);
    }
    runs.sort_by(f64::total_cmp);
    Ok(runs[runs.len() / 2])
}

/// Scores every inverter on `images`; a failing inverter yields a `failed` row.
pub fn evaluate(variants: &[NamedInverter], images: &ImageTensor, embedder: &PerceptualEmbedder, cfg: &EvalConfig) -> Result<MetricReport> {
    if images.batch() == 0 {
        return Err(Error::EmptyBatch);
    }
    let rows = variants
        .iter()
        .map(|inv| {
            score(inv, images, embedder, cfg).unwrap_or_else(|e| {
                log::warn!("evaluation of {} failed: {e}", inv.name);
                MetricRow::empty(&inv.name, format!("failed: {e}"))
            })
        })
        .collect();
    Ok(MetricReport { rows, samples: images.batch(), seed: cfg.seed, reference: full_scale_reference() })
}

/// The seven ablation rows, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Optimization,
    WNoAlign,
    W,
    WPlusNoAttention,
    WPlus,
    FullNoFAttention,
    Full,
}

/// Which reconstruction a variant is scored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    W,
    WPlus,
    F,
}

impl Variant {
    pub const ALL: [Variant; 7] =
        [Variant::Optimization, Variant::WNoAlign, Variant::W, Variant::WPlusNoAttention, Variant::WPlus, Variant::FullNoFAttention, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Optimization => "Optimization",
            Variant::WNoAlign => "inverso_w w/o L_align",
            Variant::W => "inverso_w",
            Variant::WPlusNoAttention => "inverso_w+ w/o W+-attention",
            Variant::WPlus => "inverso_w+",
            Variant::FullNoFAttention => "inverso w/o F-attention",
            Variant::Full => "inverso",
        }
    }

    /// Directory-safe identifier.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Optimization => "optimization",
            Variant::WNoAlign => "w-no-align",
            Variant::W => "w",
            Variant::WPlusNoAttention => "wplus-no-attention",
            Variant::WPlus => "wplus",
            Variant::FullNoFAttention => "full-no-f-attention",
            Variant::Full => "full",
        }
    }

    pub fn level(self) -> Level {
        match self {
            Variant::Optimization | Variant::WNoAlign | Variant::W => Level::W,
            Variant::WPlusNoAttention | Variant::WPlus => Level::WPlus,
            Variant::FullNoFAttention | Variant::Full => Level::F,
        }
    }

    /// Encoder and training settings for this row; `None` for optimization.
    pub fn configs(self, base_encoder: &EncoderConfig, base_train: &TrainConfig) -> Option<(EncoderConfig, TrainConfig)> {
        let mut enc = base_encoder.clone();
        let mut train = base_train.clone();
        match self {
            Variant::Optimization => return None,
            Variant::WNoAlign | Variant::W => {
                train.objective = Objective::W;
                train.use_align = self == Variant::W;
            }
            Variant::WPlusNoAttention | Variant::WPlus => {
                train.objective = Objective::WPlus;
                enc.wplus_attention = self == Variant::WPlus;
            }
            Variant::FullNoFAttention | Variant::Full => {
                train.objective = Objective::Full;
                enc.f_attention = self == Variant::Full;
            }
        }
        Some((enc, train))
    }
}

/// An inverter that computes only what `level` needs.
pub fn encoder_inverter<'a>(name: impl Into<String>, encoder: &'a Encoder, generator: &'a Generator, level: Level) -> NamedInverter<'a> {
    NamedInverter::new(name, move |images: &ImageTensor| {
        let pyramid = encoder.extract_pyramid(images)?;
        let w = encoder.predict_w(&pyramid.t1)?;
        if level == Level::W {
            return generator.render_w(&w);
        }
        let w_plus = encoder.wplus_attention(&w, &encoder.coarse_residuals(&pyramid)?)?;
        if level == Level::WPlus {
            return generator.render(&w_plus);
        }
        let f = encoder.f_attention(&pyramid.t3, &w)?;
        generator.render_with_feature(&w_plus, &f)
    })
}

pub fn optimization_inverter<'a>(generator: &'a Generator, embedder: &'a PerceptualEmbedder, cfg: OptimizeConfig) -> NamedInverter<'a> {
    NamedInverter::new(Variant::Optimization.name(), move |images: &ImageTensor| {
        let out = optimize_w(images, generator, embedder, &cfg, None)?;
        generator.render_w(&out.w)
    })
}

/// Trains (or loads from `root/<slug>` when a checkpoint exists there) each
/// encoder variant in `variants`.
pub fn train_variants(
    inputs: &TrainInputs,
    base_encoder: &EncoderConfig,
    base_train: &TrainConfig,
    variants: &[Variant],
    root: Option<&Path>,
    mut progress: impl FnMut(Variant, &TrainRow),
) -> Result<IndexMap<Variant, Encoder>> {
    let mut out = IndexMap::new();
    for &v in variants {
        let Some((enc_cfg, train_cfg)) = v.configs(base_encoder, base_train) else { continue };
        let dir = root.map(|r| r.join(v.slug()));
        if let Some(d) = &dir {
            if d.join(crate::checkpoint::MANIFEST).exists() {
                out.insert(v, Encoder::load(d, DType::F32, inputs.generator.device())?);
                continue;
            }
        }
        let scoped = TrainInputs { out_dir: dir, ..*inputs };
        let (enc, _) = train_encoder_with(&scoped, enc_cfg, &train_cfg, |row| progress(v, row))?;
        out.insert(v, enc);
    }
    Ok(out)
}

/// Scores all seven rows on `images`; variants without an encoder are listed as untrained.
pub fn ablate(
    generator: &Generator,
    embedder: &PerceptualEmbedder,
    encoders: &IndexMap<Variant, Encoder>,
    images: &ImageTensor,
    optimize: Option<&OptimizeConfig>,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    let mut report = MetricReport { rows: Vec::new(), samples: images.batch(), seed: cfg.seed, reference: full_scale_reference() };
    if images.batch() == 0 {
        return Err(Error::EmptyBatch);
    }
    for v in Variant::ALL {
        let inverter = match (v, optimize) {
            (Variant::Optimization, Some(o)) => Some(optimization_inverter(generator, embedder, o.clone())),
            (Variant::Optimization, None) => None,
            _ => encoders.get(&v).map(|e| encoder_inverter(v.name(), e, generator, v.level())),
        };
        let row = match inverter {
            Some(inv) => evaluate(std::slice::from_ref(&inv), images, embedder, cfg)?.rows.remove(0),
            None => MetricRow::empty(v.name(), "untrained".into()),
        };
        report.rows.push(row);
    }
    Ok(report)
}

/// Validation images of `data` stacked into one batch.
pub fn validation_images(data: &crate::generator::PairDataset, limit: usize) -> Result<ImageTensor> {
    let idx: Vec<usize> = data.val.iter().take(limit).copied().collect();
    if idx.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(data.batch(&idx, DType::F32)?.0)
}

/// Mean of a metric column over rows that have it.
pub fn column_mean(report: &MetricReport, pick: impl Fn(&MetricRow) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = report.rows.iter().filter_map(pick).collect();
    (!v.is_empty()).then(|| metrics::mean(&v))
}

#[doc(hidden)]
pub fn identity_inverter<'a>() -> NamedInverter<'a> {
    NamedInverter::new("identity", |images: &ImageTensor| ImageTensor::new(Tensor::clone(images.tensor())))
}
