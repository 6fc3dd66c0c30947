//! Pipeline stages operating on a run directory.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use inverso_core::alignment::{pretrain_with, AlignModel};
use inverso_core::checkpoint::{tensor_to_f32, write_f32_blob, MANIFEST};
use inverso_core::editing::{
    edit_image, fit_pca_directions, fit_svm_direction, sample_latents, synthetic_attribute_labels, DirectionStore, EditMode, EditRequest,
};
use inverso_core::encoder::{reconstruct, Encoder};
use inverso_core::evalsuite::{self, encoder_inverter, EvalConfig, Level, MetricReport, Variant};
use inverso_core::generator::{Generator, ImageTensor, PairDataset};
use inverso_core::perceptual::PerceptualEmbedder;
use inverso_core::training::{train_encoder_with, TrainInputs};
use inverso_core::{imageio, metrics, Error, Result};

use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionMethod {
    Svm,
    Pca,
}

/// Artifact locations under one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn generator(&self) -> PathBuf {
        self.root.join("generator")
    }

    pub fn pairs(&self) -> PathBuf {
        self.root.join("pairs")
    }

    pub fn align(&self) -> PathBuf {
        self.root.join("align")
    }

    pub fn encoder(&self) -> PathBuf {
        self.root.join("encoder")
    }

    pub fn directions(&self) -> PathBuf {
        self.root.join("directions")
    }

    pub fn invert(&self, stem: &str) -> PathBuf {
        self.root.join("invert").join(stem)
    }

    pub fn edits(&self) -> PathBuf {
        self.root.join("edit")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn ablate(&self) -> PathBuf {
        self.root.join("ablate")
    }
}

fn require(dir: &Path, what: &str, stage: &str) -> Result<()> {
    if dir.join(MANIFEST).exists() || dir.join("directions.json").exists() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!("no {what} at {}; run `inverso {stage}` first", dir.display())))
    }
}

pub struct Pipeline {
    pub config: RunConfig,
    pub dir: RunDir,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Self {
        let dir = RunDir::new(config.run_dir.clone());
        Self { config, dir }
    }

    pub fn generator(&self) -> Result<Generator> {
        require(&self.dir.generator(), "generator", "init-generator")?;
        Generator::load(&self.dir.generator(), DType::F32, &Device::Cpu)
    }

    pub fn embedder(&self) -> Result<PerceptualEmbedder> {
        PerceptualEmbedder::new(self.config.embedder.clone(), DType::F32, &Device::Cpu)
    }

    pub fn encoder(&self) -> Result<Encoder> {
        require(&self.dir.encoder(), "encoder", "train-encoder")?;
        Encoder::load(&self.dir.encoder(), DType::F32, &Device::Cpu)
    }

    pub fn align(&self) -> Result<AlignModel> {
        require(&self.dir.align(), "alignment model", "pretrain-align")?;
        AlignModel::load(&self.dir.align(), DType::F32, &Device::Cpu)
    }

    pub fn pairs(&self) -> Result<PairDataset> {
        if !self.dir.pairs().exists() {
            return Err(Error::Checkpoint(format!("no pairs at {}; run `inverso gen-pairs` first", self.dir.pairs().display())));
        }
        PairDataset::load(&self.dir.pairs())
    }

    pub fn directions(&self) -> Result<DirectionStore> {
        require(&self.dir.directions(), "directions", "fit-directions")?;
        DirectionStore::load(&self.dir.directions())
    }

    pub fn init_generator(&self) -> Result<PathBuf> {
        let g = Generator::new(self.config.generator.clone(), DType::F32, &Device::Cpu)?;
        g.save(&self.dir.generator())?;
        Ok(self.dir.generator())
    }

    pub fn gen_pairs(&self, count: Option<usize>) -> Result<PathBuf> {
        let g = self.generator()?;
        let data = g.sample_pairs(count.unwrap_or(self.config.pairs), self.config.seed)?;
        data.save(&self.dir.pairs())?;
        Ok(self.dir.pairs())
    }

    pub fn pretrain_align(&self, steps: Option<usize>) -> Result<f64> {
        let g = self.generator()?;
        let data = self.pairs()?;
        let mut cfg = self.config.align_config(g.config());
        if let Some(s) = steps {
            cfg.steps = s;
        }
        let (model, history) = pretrain_with(&data, cfg, |s| {
            if (s.step + 1) % 100 == 0 {
                log::info!("align step {} loss {:.4} retrieval {:.3}", s.step + 1, s.loss, s.retrieval_top1);
            }
        })?;
        model.save(&self.dir.align(), serde_json::json!({ "val_retrieval_top1": history.val_retrieval_top1 }))?;
        history.write_csv(&self.dir.align().join("history.csv"))?;
        Ok(history.val_retrieval_top1)
    }

    pub fn train_encoder(&self, steps: Option<usize>, checkpoint_every: Option<usize>, no_align: bool) -> Result<Option<[f64; 3]>> {
        let g = self.generator()?;
        let data = self.pairs()?;
        let embedder = self.embedder()?;
        let mut cfg = self.config.training.clone();
        if let Some(s) = steps {
            cfg.steps = s;
        }
        if let Some(c) = checkpoint_every {
            cfg.checkpoint_every = c;
        }
        if no_align {
            cfg.use_align = false;
        }
        let align = if cfg.use_align { Some(self.align()?) } else { None };
        let inputs = TrainInputs { generator: &g, align: align.as_ref(), embedder: &embedder, data: &data, out_dir: Some(self.dir.encoder()) };
        let (_, history) = train_encoder_with(&inputs, self.config.encoder_config(g.config())?, &cfg, |r| {
            if (r.step + 1) % 50 == 0 {
                log::info!("encoder step {} total {:.4}", r.step + 1, r.total);
            }
        })?;
        Ok(history.final_validation())
    }

    pub fn fit_directions(&self, method: DirectionMethod, samples: Option<usize>, k: Option<usize>) -> Result<Vec<String>> {
        let g = self.generator()?;
        let ed = &self.config.editing;
        let latents = sample_latents(&g, samples.unwrap_or(ed.samples), self.config.seed ^ 0xd1)?;
        let mut store = if self.dir.directions().join("directions.json").exists() { self.directions()? } else { DirectionStore::new() };
        let mut names = Vec::new();
        match method {
            DirectionMethod::Svm => {
                for a in 0..k.unwrap_or(ed.attributes) {
                    let (labels, _) = synthetic_attribute_labels(&latents, self.config.seed.wrapping_add(a as u64))?;
                    let d = fit_svm_direction(&format!("attr{a}"), &latents, &labels, &ed.svm)?;
                    names.push(d.name.clone());
                    store.insert(d);
                }
            }
            DirectionMethod::Pca => {
                for d in fit_pca_directions("pc", &latents, k.unwrap_or(ed.pca_components))? {
                    names.push(d.name.clone());
                    store.insert(d);
                }
            }
        }
        store.save(&self.dir.directions())?;
        Ok(names)
    }

    fn load_input(&self, g: &Generator, image: &Path) -> Result<ImageTensor> {
        imageio::load_image(image, g.config().resolution).map_err(|e| match e {
            Error::Io(io) => Error::Dataset(format!("cannot read {}: {io}", image.display())),
            Error::Image(err) => Error::Dataset(format!("cannot decode {}: {err}", image.display())),
            other => other,
        })
    }

    /// Writes latent blobs, reconstructions and PSNRs for `image`; returns the output directory.
    pub fn invert(&self, image: &Path) -> Result<PathBuf> {
        let g = self.generator()?;
        let enc = self.encoder()?;
        let img = self.load_input(&g, image)?;
        let result = enc.invert(&img)?;
        let recs = reconstruct(&g, &result)?;
        let stem = image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
        let out = self.dir.invert(&stem);
        std::fs::create_dir_all(&out)?;
        write_f32_blob(&out.join("w.f32"), &tensor_to_f32(result.w.tensor())?)?;
        write_f32_blob(&out.join("wplus.f32"), &tensor_to_f32(result.w_plus.tensor())?)?;
        write_f32_blob(&out.join("f.f32"), &tensor_to_f32(&result.f.values)?)?;
        let mut psnr = serde_json::Map::new();
        for (name, rec) in [("w", &recs.w), ("wplus", &recs.w_plus), ("f", &recs.f)] {
            imageio::save_png(&out.join(format!("rec_{name}.png")), rec, 0)?;
            psnr.insert(format!("psnr_{name}"), metrics::psnr(&img, rec)?[0].into());
        }
        std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&psnr)?)?;
        Ok(out)
    }

    pub fn edit(&self, image: &Path, req: &EditRequest, output: Option<&Path>) -> Result<PathBuf> {
        let g = self.generator()?;
        let enc = self.encoder()?;
        let store = self.directions()?;
        store.get(&req.direction)?;
        let img = self.load_input(&g, image)?;
        let edited = edit_image(&enc.invert(&img)?, &g, &store, req)?;
        let path = match output {
            Some(p) => p.to_path_buf(),
            None => {
                let stem = image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
                let mode = match req.mode {
                    EditMode::LatentOnly => "latent_only",
                    EditMode::LatentAndFeature => "latent_and_feature",
                };
                self.dir.edits().join(format!("{stem}_{}_{}_{mode}.png", req.direction, req.alpha))
            }
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        imageio::save_png(&path, &edited, 0)?;
        Ok(path)
    }

    fn eval_images(&self, images: Option<&Path>, limit: usize, resolution: usize) -> Result<ImageTensor> {
        let all = match images {
            Some(dir) => imageio::ingest_images(dir, resolution)?,
            None => evalsuite::validation_images(&self.pairs()?, limit)?,
        };
        let n = all.batch().min(limit.max(1));
        ImageTensor::new(all.tensor().narrow(0, 0, n)?)
    }

    fn eval_config(&self, skip_timing: bool) -> EvalConfig {
        EvalConfig { timing: self.config.eval.timing && !skip_timing, seed: self.config.seed, ..self.config.eval.clone() }
    }

    /// Scores the trained encoder's three reconstruction levels.
    pub fn eval(&self, images: Option<&Path>, limit: usize, skip_timing: bool) -> Result<MetricReport> {
        let g = self.generator()?;
        let enc = self.encoder()?;
        let embedder = self.embedder()?;
        let imgs = self.eval_images(images, limit, g.config().resolution)?;
        let inverters = [
            encoder_inverter("inverso G(w)", &enc, &g, Level::W),
            encoder_inverter("inverso G(w+)", &enc, &g, Level::WPlus),
            encoder_inverter("inverso G(w+, f)", &enc, &g, Level::F),
        ];
        let report = evalsuite::evaluate(&inverters, &imgs, &embedder, &self.eval_config(skip_timing))?;
        report.write(&self.dir.eval(), "eval")?;
        Ok(report)
    }

    /// Trains any missing variant under `ablate/` and scores all seven rows.
    pub fn ablate(&self, limit: usize, skip_timing: bool, with_optimization: bool) -> Result<MetricReport> {
        let g = self.generator()?;
        let data = self.pairs()?;
        let embedder = self.embedder()?;
        let align = self.align()?;
        let inputs = TrainInputs { generator: &g, align: Some(&align), embedder: &embedder, data: &data, out_dir: None };
        let root = self.dir.ablate();
        let encoders = evalsuite::train_variants(&inputs, &self.config.encoder_config(g.config())?, &self.config.training, &Variant::ALL, Some(&root), |v, r| {
            if (r.step + 1) % 50 == 0 {
                log::info!("{} step {} total {:.4}", v.name(), r.step + 1, r.total);
            }
        })?;
        let imgs = self.eval_images(None, limit, g.config().resolution)?;
        let opt = with_optimization.then_some(&self.config.optimize);
        let report = evalsuite::ablate(&g, &embedder, &encoders, &imgs, opt, &self.eval_config(skip_timing))?;
        report.write(&root, "ablation")?;
        Ok(report)
    }
}
