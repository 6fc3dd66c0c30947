//! Semantic directions in W and their application to inversions.

use std::path::Path;

use candle_core::Tensor;
use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_f32_blob, write_f32_blob};
use crate::encoder::InversionResult;
use crate::error::{shape_err, Error, Result};
use crate::generator::{FeatureMap, Generator, ImageTensor, LatentW, LatentWPlus};
use crate::nn;

pub const DIRECTIONS_FILE: &str = "directions.json";
pub const DIRECTIONS_BLOB: &str = "directions.f32";
const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Svm,
    Pca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub name: String,
    /// Always `"W"`.
    pub space: String,
    pub method: Method,
    pub vector: Vec<f64>,
    /// Standard deviation of sample projections onto `vector`.
    pub sigma: f64,
    pub metadata: serde_json::Value,
}

impl Direction {
    /// Normalises `vector` to unit length.
    pub fn new(name: &str, method: Method, vector: Vec<f64>, sigma: f64, metadata: serde_json::Value) -> Result<Self> {
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Range(format!("direction {name} has zero or non-finite norm")));
        }
        let vector = vector.into_iter().map(|v| v / norm).collect();
        Ok(Self { name: name.into(), space: "W".into(), method, vector, sigma, metadata })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn is_unit(&self) -> bool {
        (self.vector.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= UNIT_TOL
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

fn latent_matrix(latents: &LatentW) -> Result<DMatrix<f64>> {
    let (n, d) = latents.tensor().dims2()?;
    Ok(DMatrix::from_row_slice(n, d, &nn::to_f64_vec(latents.tensor())?))
}

fn projection_std(x: &DMatrix<f64>, v: &[f64]) -> f64 {
    let p = x * DVector::from_column_slice(v);
    let mean = p.mean();
    (p.iter().map(|q| (q - mean).powi(2)).sum::<f64>() / p.len().max(1) as f64).sqrt()
}

/// Solver settings for [`fit_svm_direction`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvmConfig {
    /// L2 penalty on the weight vector.
    pub l2: f64,
    pub iterations: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self { l2: 1e-3, iterations: 1000 }
    }
}

/// Linear SVM (squared hinge + L2, full-batch accelerated gradient descent)
/// on `latents` with ±1 `labels`; the normal points toward the +1 class.
pub fn fit_svm_direction(name: &str, latents: &LatentW, labels: &[f64], cfg: &SvmConfig) -> Result<Direction> {
    let x = latent_matrix(latents)?;
    let (n, d) = x.shape();
    if labels.len() != n {
        return Err(Error::Labels(format!("{} labels for {n} latents", labels.len())));
    }
    if labels.iter().any(|&l| l != 1.0 && l != -1.0) {
        return Err(Error::Labels("labels must be +1 or -1".into()));
    }
    let pos = labels.iter().filter(|&&l| l > 0.0).count();
    if pos < 2 || n - pos < 2 {
        return Err(Error::Labels(format!("need at least two samples per class, got {pos} positive and {} negative", n - pos)));
    }
    let mut xa = DMatrix::from_element(n, d + 1, 1.0);
    xa.view_mut((0, 0), (n, d)).copy_from(&x);
    let y = DVector::from_column_slice(labels);

    // Step size from the Lipschitz bound of the smooth objective.
    let gram = xa.transpose() * &xa / n as f64;
    let top = SymmetricEigen::new(gram).eigenvalues.max();
    let step = 1.0 / (2.0 * top + cfg.l2);

    let grad = |theta: &DVector<f64>| {
        let margins = (&xa * theta).component_mul(&y);
        let slack = margins.map(|m| (1.0 - m).max(0.0));
        let coef = slack.component_mul(&y) * (-2.0 / n as f64);
        let mut g = xa.transpose() * coef;
        for j in 0..d {
            g[j] += cfg.l2 * theta[j];
        }
        g
    };
    let mut theta = DVector::zeros(d + 1);
    let mut prev = theta.clone();
    for k in 0..cfg.iterations {
        let momentum = k as f64 / (k as f64 + 3.0);
        let look = &theta + (&theta - &prev) * momentum;
        prev = theta;
        theta = &look - grad(&look) * step;
    }
    let weights: Vec<f64> = theta.rows(0, d).iter().copied().collect();
    let norm = weights.iter().map(|v| v * v).sum::<f64>().sqrt();
    let unit: Vec<f64> = weights.iter().map(|v| v / norm.max(1e-300)).collect();
    let sigma = projection_std(&x, &unit);
    let margin = 1.0 / norm.max(1e-300);
    Direction::new(name, Method::Svm, unit, sigma, serde_json::json!({ "samples": n, "margin": margin, "bias": theta[d] / norm.max(1e-300) }))
}

/// Top-`k` principal axes of the centred latents, each with its largest
/// coordinate made positive.
pub fn fit_pca_directions(prefix: &str, latents: &LatentW, k: usize) -> Result<Vec<Direction>> {
    let x = latent_matrix(latents)?;
    let (n, d) = x.shape();
    if k == 0 || k > d {
        return Err(Error::Rank(format!("k = {k} must be in 1..={d}")));
    }
    if n < k + 1 {
        return Err(Error::Rank(format!("{n} samples cannot give {k} components")));
    }
    let mean = x.row_mean();
    let mut centred = x.clone();
    for mut row in centred.row_iter_mut() {
        row -= &mean;
    }
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let largest = eig.eigenvalues[order[0]].max(0.0);
    let tol = largest * 1e-10 * d as f64;
    let mut out = Vec::with_capacity(k);
    for (i, &j) in order.iter().take(k).enumerate() {
        let value = eig.eigenvalues[j];
        if value <= tol || largest == 0.0 {
            return Err(Error::Rank(format!("component {i} has eigenvalue {value:e}; latents span fewer than {k} dimensions")));
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
        let dir = Direction::new(&format!("{prefix}{i}"), Method::Pca, v, value.sqrt(), serde_json::json!({ "samples": n, "eigenvalue": value }))?;
        out.push(dir);
    }
    Ok(out)
}

/// ±1 labels from thresholding a seeded random projection of `latents` at
/// its median, plus the (unit) projection itself.
pub fn synthetic_attribute_labels(latents: &LatentW, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    use rand_distr::{Distribution, StandardNormal};
    let x = latent_matrix(latents)?;
    let mut rng = nn::rng(seed);
    let mut u: Vec<f64> = (0..x.ncols()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter_mut().for_each(|v| *v /= norm);
    let p = &x * DVector::from_column_slice(&u);
    let mut sorted: Vec<f64> = p.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    Ok((p.iter().map(|&q| if q >= median { 1.0 } else { -1.0 }).collect(), u))
}

fn direction_tensor(dir: &Direction, like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(dir.vector.clone(), dir.dim(), like.device())?.to_dtype(like.dtype())?)
}

/// `w⁺ + α·σ·v` on every row.
pub fn apply_latent_edit(w_plus: &LatentWPlus, dir: &Direction, alpha: f64) -> Result<LatentWPlus> {
    let t = w_plus.tensor();
    let d = t.dims()[2];
    if d != dir.dim() {
        return Err(shape_err(format!("direction {} has {} dims, latents have {d}", dir.name, dir.dim())));
    }
    let delta = (direction_tensor(dir, t)? * (alpha * dir.sigma))?;
    LatentWPlus::new(t.broadcast_add(&delta)?)
}

/// `f + G^k(ŵ⁺) − G^k(w⁺)` with `k` the layer of `f`.
pub fn feature_edit(f: &FeatureMap, generator: &Generator, w_plus: &LatentWPlus, edited: &LatentWPlus) -> Result<FeatureMap> {
    let before = generator.layer_feature(w_plus, f.layer)?;
    let after = generator.layer_feature(edited, f.layer)?;
    if before.values.dims() != f.values.dims() {
        return Err(shape_err(format!("f {:?} vs layer {} feature {:?}", f.values.dims(), f.layer, before.values.dims())));
    }
    FeatureMap::new((&f.values + (&after.values - &before.values)?)?, f.layer)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    LatentOnly,
    LatentAndFeature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub direction: String,
    pub alpha: f64,
    pub mode: EditMode,
}

/// Named directions in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DirectionStore {
    directions: IndexMap<String, Direction>,
}

#[derive(Serialize, Deserialize)]
struct StoredDirection {
    name: String,
    space: String,
    method: Method,
    sigma: f64,
    offset: usize,
    len: usize,
    metadata: serde_json::Value,
}

impl DirectionStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces by name.
    pub fn insert(&mut self, dir: Direction) {
        self.directions.insert(dir.name.clone(), dir);
    }

    pub fn get(&self, name: &str) -> Result<&Direction> {
        self.directions.get(name).ok_or_else(|| Error::UnknownDirection(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Direction> {
        self.directions.values()
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        for d in self.iter() {
            entries.push(StoredDirection {
                name: d.name.clone(),
                space: d.space.clone(),
                method: d.method,
                sigma: d.sigma,
                offset: blob.len(),
                len: d.dim(),
                metadata: d.metadata.clone(),
            });
            blob.extend(d.vector.iter().map(|&v| v as f32));
        }
        write_f32_blob(&dir.join(DIRECTIONS_BLOB), &blob)?;
        std::fs::write(dir.join(DIRECTIONS_FILE), serde_json::to_string_pretty(&entries)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let entries: Vec<StoredDirection> = serde_json::from_str(&std::fs::read_to_string(dir.join(DIRECTIONS_FILE))?)?;
        let blob = read_f32_blob(&dir.join(DIRECTIONS_BLOB))?;
        let mut store = Self::new();
        for e in entries {
            let values = blob
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| Error::Checkpoint(format!("direction {} lies outside the blob", e.name)))?;
            let mut d = Direction::new(&e.name, e.method, values.iter().map(|&v| v as f64).collect(), e.sigma, e.metadata)?;
            d.space = e.space;
            store.insert(d);
        }
        Ok(store)
    }
}

/// `G(ŵ⁺)` or `G(ŵ⁺, f̂)` for one direction and magnitude.
pub fn edit_image(result: &InversionResult, generator: &Generator, store: &DirectionStore, req: &EditRequest) -> Result<ImageTensor> {
    let dir = store.get(&req.direction)?;
    let edited = apply_latent_edit(&result.w_plus, dir, req.alpha)?;
    match req.mode {
        EditMode::LatentOnly => generator.render(&edited),
        EditMode::LatentAndFeature => {
            let f = feature_edit(&result.f, generator, &result.w_plus, &edited)?;
            generator.render_with_feature(&edited, &f)
        }
    }
}

/// Latents for fitting: `count` rows sampled from the generator.
pub fn sample_latents(generator: &Generator, count: usize, seed: u64) -> Result<LatentW> {
    generator.sample_w(count, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;
    use candle_core::{DType, Device};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn latents(rows: Vec<Vec<f64>>) -> LatentW {
        let (n, d) = (rows.len(), rows[0].len());
        LatentW::new(Tensor::from_vec(rows.concat(), (n, d), &Device::Cpu).unwrap()).unwrap()
    }

    fn planted(seed: u64, n: usize, d: usize) -> (LatentW, Vec<f64>, Vec<f64>) {
        let mut rng = nn::rng(seed);
        let mut u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v /= norm);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        while rows.len() < n {
            let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let p: f64 = x.iter().zip(&u).map(|(a, b)| a * b).sum();
            if p.abs() < 0.5 {
                continue;
            }
            labels.push(p.signum());
            rows.push(x);
        }
        (latents(rows), labels, u)
    }

    #[test]
    fn svm_recovers_planted_normal() {
        let (x, y, u) = planted(3, 400, 16);
        let d = fit_svm_direction("a", &x, &y, &SvmConfig::default()).unwrap();
        assert!(d.is_unit());
        assert!(cosine(&d.vector, &u) >= 0.95, "cosine {}", cosine(&d.vector, &u));
        assert!(d.sigma > 0.0);
    }

    #[test]
    fn svm_flip_and_duplicate() {
        let (x, y, _) = planted(4, 120, 8);
        let cfg = SvmConfig::default();
        let d = fit_svm_direction("a", &x, &y, &cfg).unwrap();
        let flipped: Vec<f64> = y.iter().map(|v| -v).collect();
        let f = fit_svm_direction("a", &x, &flipped, &cfg).unwrap();
        assert!((cosine(&d.vector, &f.vector) + 1.0).abs() < 1e-9);

        let doubled = LatentW::new(Tensor::cat(&[x.tensor(), x.tensor()], 0).unwrap()).unwrap();
        let y2 = [y.clone(), y.clone()].concat();
        let dd = fit_svm_direction("a", &doubled, &y2, &cfg).unwrap();
        for (a, b) in d.vector.iter().zip(&dd.vector) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn svm_label_errors() {
        let (x, _, _) = planted(5, 10, 4);
        assert!(matches!(fit_svm_direction("a", &x, &[1.0; 10], &SvmConfig::default()), Err(Error::Labels(_))));
        assert!(matches!(fit_svm_direction("a", &x, &[1.0; 3], &SvmConfig::default()), Err(Error::Labels(_))));
        let mut odd = vec![1.0; 10];
        odd[0] = 0.5;
        assert!(matches!(fit_svm_direction("a", &x, &odd, &SvmConfig::default()), Err(Error::Labels(_))));
    }

    #[test]
    fn pca_planted_axis_orthonormal_and_sign() {
        let mut rng = nn::rng(9);
        let rows: Vec<Vec<f64>> = (0..500)
            .map(|_| (0..6).map(|j| Distribution::<f64>::sample(&StandardNormal, &mut rng) * if j == 0 { 3.0f64 } else { 1.0 }).collect::<Vec<f64>>())
            .collect();
        let dirs = fit_pca_directions("pc", &latents(rows), 4).unwrap();
        assert!(dirs[0].vector[0].abs() >= 0.95);
        assert!((dirs[0].sigma - 3.0).abs() < 0.5);
        for (i, a) in dirs.iter().enumerate() {
            let lead = a.vector.iter().copied().fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
            assert!(lead > 0.0);
            for (j, b) in dirs.iter().enumerate() {
                let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-6);
            }
        }
        assert_eq!(dirs[3].name, "pc3");
    }

    #[test]
    fn pca_two_points_and_rank() {
        let dirs = fit_pca_directions("p", &latents(vec![vec![1.0, 1.0, 0.0], vec![3.0, 0.0, 0.0]]), 1).unwrap();
        let diff = [2.0, -1.0, 0.0];
        assert!((cosine(&dirs[0].vector, &diff) - 1.0).abs() < 1e-9);
        let flat = latents(vec![vec![1.0, 0.0, 0.0], vec![2.0, 0.0, 0.0], vec![3.0, 0.0, 0.0]]);
        assert!(matches!(fit_pca_directions("p", &flat, 2), Err(Error::Rank(_))));
        assert!(matches!(fit_pca_directions("p", &flat, 4), Err(Error::Rank(_))));
    }

    fn toy_generator() -> Generator {
        let cfg = GeneratorConfig { resolution: 16, latent_dim: 8, channels: vec![6, 6, 4], f_layer: 2, ..Default::default() };
        Generator::new(cfg, DType::F64, &Device::Cpu).unwrap()
    }

    fn unit_direction(d: usize, seed: u64) -> Direction {
        let mut rng = nn::rng(seed);
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Direction::new("dir", Method::Svm, v, 0.7, serde_json::Value::Null).unwrap()
    }

    #[test]
    fn latent_edit_arithmetic() {
        let g = toy_generator();
        let wp = g.broadcast(&g.sample_w(2, 1).unwrap()).unwrap();
        let dir = unit_direction(8, 2);
        let zero = apply_latent_edit(&wp, &dir, 0.0).unwrap();
        assert_eq!(nn::to_f64_vec(zero.tensor()).unwrap(), nn::to_f64_vec(wp.tensor()).unwrap());
        let back = apply_latent_edit(&apply_latent_edit(&wp, &dir, 1.5).unwrap(), &dir, -1.5).unwrap();
        let diff = (back.tensor() - wp.tensor()).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
        let moved = apply_latent_edit(&wp, &dir, 1.0).unwrap();
        let v = Tensor::from_vec(dir.vector.clone(), (8, 1), &Device::Cpu).unwrap();
        let shift = (moved.tensor() - wp.tensor()).unwrap().broadcast_matmul(&v).unwrap();
        for s in nn::to_f64_vec(&shift).unwrap() {
            assert!((s - dir.sigma).abs() < 1e-12);
        }
        assert!(apply_latent_edit(&wp, &unit_direction(5, 1), 1.0).is_err());
    }

    #[test]
    fn feature_edit_identity_and_telescoping() {
        let g = toy_generator();
        let wp = g.broadcast(&g.sample_w(2, 1).unwrap()).unwrap();
        let f = FeatureMap::new((g.f_feature(&wp).unwrap().values + 0.3).unwrap(), g.config().f_layer).unwrap();
        let same = feature_edit(&f, &g, &wp, &wp).unwrap();
        assert_eq!(nn::to_f64_vec(&same.values).unwrap(), nn::to_f64_vec(&f.values).unwrap());
        let edited = apply_latent_edit(&wp, &unit_direction(8, 3), 2.0).unwrap();
        let there = feature_edit(&f, &g, &wp, &edited).unwrap();
        let back = feature_edit(&there, &g, &edited, &wp).unwrap();
        let diff = (&back.values - &f.values).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-6);
    }

    #[test]
    fn feature_edit_matches_linear_oracle() {
        let g = Generator::new(GeneratorConfig::linear(8, 6, 3, 4), DType::F64, &Device::Cpu).unwrap();
        let wp = g.broadcast(&g.sample_w(1, 1).unwrap()).unwrap();
        let dir = unit_direction(6, 5);
        let edited = apply_latent_edit(&wp, &dir, 1.0).unwrap();
        let f = g.f_feature(&wp).unwrap();
        let fe = feature_edit(&f, &g, &wp, &edited).unwrap();
        // The linear generator's feature is affine in w⁺, so the change equals the
        // feature difference of two synthesis passes from a zero baseline.
        let zero = LatentWPlus::new(wp.tensor().zeros_like().unwrap()).unwrap();
        let delta = LatentWPlus::new((edited.tensor() - wp.tensor()).unwrap()).unwrap();
        let a_delta = (g.f_feature(&delta).unwrap().values - g.f_feature(&zero).unwrap().values).unwrap();
        let diff = ((&fe.values - &f.values).unwrap() - a_delta).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-6);
    }

    #[test]
    fn edit_image_modes() {
        let g = toy_generator();
        let w = g.sample_w(1, 7).unwrap();
        let wp = g.broadcast(&w).unwrap();
        let f = FeatureMap::new((g.f_feature(&wp).unwrap().values * 1.1).unwrap(), g.config().f_layer).unwrap();
        let result = InversionResult::from_parts(w, wp.clone(), f.clone());
        let mut store = DirectionStore::new();
        store.insert(unit_direction(8, 8));
        let req = |alpha, mode| EditRequest { direction: "dir".into(), alpha, mode };
        let v = |t: &ImageTensor| nn::to_f64_vec(t.tensor()).unwrap();
        assert_eq!(v(&edit_image(&result, &g, &store, &req(0.0, EditMode::LatentOnly)).unwrap()), v(&g.render(&wp).unwrap()));
        let rec_f = g.render_with_feature(&wp, &f).unwrap();
        assert_eq!(v(&edit_image(&result, &g, &store, &req(0.0, EditMode::LatentAndFeature)).unwrap()), v(&rec_f));
        for alpha in [-2.0, 2.0] {
            assert_ne!(v(&edit_image(&result, &g, &store, &req(alpha, EditMode::LatentAndFeature)).unwrap()), v(&rec_f));
        }
        let missing = EditRequest { direction: "nope".into(), alpha: 1.0, mode: EditMode::LatentOnly };
        assert!(matches!(edit_image(&result, &g, &store, &missing), Err(Error::UnknownDirection(_))));
    }

    #[test]
    fn store_round_trip_and_synthetic_labels() {
        let g = toy_generator();
        let w = sample_latents(&g, 200, 3).unwrap();
        let (labels, _) = synthetic_attribute_labels(&w, 11).unwrap();
        let pos = labels.iter().filter(|&&l| l > 0.0).count();
        assert!((90..=110).contains(&pos));
        let mut store = DirectionStore::new();
        store.insert(fit_svm_direction("attr", &w, &labels, &SvmConfig::default()).unwrap());
        for d in fit_pca_directions("pc", &w, 3).unwrap() {
            store.insert(d);
        }
        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path()).unwrap();
        let back = DirectionStore::load(dir.path()).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in store.iter().zip(back.iter()) {
            assert_eq!((&a.name, a.method, a.sigma), (&b.name, b.method, b.sigma));
            assert!(b.is_unit());
            assert!(cosine(&a.vector, &b.vector) > 1.0 - 1e-9);
        }
    }
}
