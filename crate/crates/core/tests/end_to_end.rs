use candle_core::{DType, Device};
use inverso_core::alignment::{pretrain, AlignConfig, AlignModel};
use inverso_core::editing::{edit_image, fit_pca_directions, fit_svm_direction, synthetic_attribute_labels, DirectionStore, EditMode, EditRequest, SvmConfig};
use inverso_core::encoder::{reconstruct, Encoder, EncoderConfig};
use inverso_core::evalsuite::{self, EvalConfig, Variant};
use inverso_core::generator::{Generator, GeneratorConfig};
use inverso_core::perceptual::{EmbedderConfig, PerceptualEmbedder};
use inverso_core::training::{train_encoder, TrainConfig, TrainInputs};
use inverso_core::{imageio, nn};

fn tiny_generator() -> Generator {
    let cfg = GeneratorConfig { resolution: 16, latent_dim: 8, channels: vec![6, 6, 4], f_layer: 2, seed: 5, ..Default::default() };
    Generator::new(cfg, DType::F32, &Device::Cpu).unwrap()
}

fn tiny_align() -> AlignConfig {
    AlignConfig {
        resolution: 16,
        latent_dim: 8,
        embed_dim: 8,
        image_channels: vec![4, 4],
        hidden_dim: 16,
        latent_tokens: 2,
        latent_width: 8,
        latent_heads: 2,
        steps: 6,
        batch_size: 8,
        eval_way: 8,
        ..Default::default()
    }
}

fn tiny_encoder(g: &Generator) -> EncoderConfig {
    let mut cfg = EncoderConfig::for_generator(g.config(), 1).unwrap();
    cfg.stem_channels = 4;
    cfg.pyramid_channels = [4, 4, 4];
    cfg.heads = 2;
    cfg
}

fn tiny_embedder() -> PerceptualEmbedder {
    PerceptualEmbedder::new(EmbedderConfig { channels: vec![4, 4], id_dim: 4, ..Default::default() }, DType::F32, &Device::Cpu).unwrap()
}

#[test]
fn train_invert_edit_and_reload() {
    let g = tiny_generator();
    let data = g.sample_pairs(64, 2).unwrap();
    let (align, history) = pretrain(&data, tiny_align()).unwrap();
    assert!(history.val_retrieval_top1.is_finite());

    let tmp = tempfile::tempdir().unwrap();
    align.save(&tmp.path().join("align"), serde_json::Value::Null).unwrap();
    let align = AlignModel::load(&tmp.path().join("align"), DType::F32, &Device::Cpu).unwrap();

    let embedder = tiny_embedder();
    let inputs = TrainInputs { generator: &g, align: Some(&align), embedder: &embedder, data: &data, out_dir: Some(tmp.path().join("encoder")) };
    let cfg = TrainConfig { steps: 4, batch_size: 8, val_every: 2, val_samples: 8, learning_rate: 1e-3, ..Default::default() };
    let (encoder, history) = train_encoder(&inputs, tiny_encoder(&g), &cfg).unwrap();
    assert_eq!(history.rows.len(), 4);
    assert!(history.rows.iter().all(|r| r.total.is_finite()));
    assert!(history.final_validation().is_some());

    let reloaded = Encoder::load(&tmp.path().join("encoder"), DType::F32, &Device::Cpu).unwrap();
    let (images, _) = data.batch(&data.val[..4], DType::F32).unwrap();
    let a = encoder.invert(&images).unwrap();
    let b = reloaded.invert(&images).unwrap();
    assert_eq!(nn::to_f64_vec(&a.f.values).unwrap(), nn::to_f64_vec(&b.f.values).unwrap());

    let latents = g.sample_w(300, 3).unwrap();
    let mut store = DirectionStore::new();
    let (labels, _) = synthetic_attribute_labels(&latents, 4).unwrap();
    store.insert(fit_svm_direction("attr0", &latents, &labels, &SvmConfig::default()).unwrap());
    for d in fit_pca_directions("pc", &latents, 2).unwrap() {
        store.insert(d);
    }
    store.save(&tmp.path().join("directions")).unwrap();
    let store = DirectionStore::load(&tmp.path().join("directions")).unwrap();
    assert_eq!(store.len(), 3);

    let recs = reconstruct(&g, &a).unwrap();
    let zero = EditRequest { direction: "attr0".into(), alpha: 0.0, mode: EditMode::LatentAndFeature };
    let same = edit_image(&a, &g, &store, &zero).unwrap();
    assert_eq!(imageio::encode_png(&same, 0).unwrap(), imageio::encode_png(&recs.f, 0).unwrap());
    let moved = edit_image(&a, &g, &store, &EditRequest { alpha: 2.0, ..zero }).unwrap();
    assert_ne!(imageio::encode_png(&moved, 0).unwrap(), imageio::encode_png(&recs.f, 0).unwrap());
}

#[test]
fn ablation_rows_cover_every_variant() {
    let g = tiny_generator();
    let data = g.sample_pairs(48, 6).unwrap();
    let (align, _) = pretrain(&data, tiny_align()).unwrap();
    let embedder = tiny_embedder();
    let inputs = TrainInputs { generator: &g, align: Some(&align), embedder: &embedder, data: &data, out_dir: None };
    let train = TrainConfig { steps: 2, batch_size: 4, val_every: 0, ..Default::default() };
    let encoders = evalsuite::train_variants(&inputs, &tiny_encoder(&g), &train, &Variant::ALL, None, |_, _| {}).unwrap();
    let (images, _) = data.batch(&data.val[..3], DType::F32).unwrap();
    let optimize = inverso_core::baselines::OptimizeConfig { steps: 3, init_samples: 50, ..Default::default() };
    let cfg = EvalConfig { batch_size: 2, timing: false, ..Default::default() };
    let report = evalsuite::ablate(&g, &embedder, &encoders, &images, Some(&optimize), &cfg).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, Variant::ALL.iter().map(|v| v.name()).collect::<Vec<_>>());
    assert!(report.rows.iter().all(|r| r.status == "ok" && r.psnr.is_some_and(f64::is_finite)));
    let csv = report.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 8);
}
