//! Per-image reconstruction metrics on the [−1, 1] pixel range.

use crate::error::{shape_err, Result};
use crate::generator::ImageTensor;
use crate::nn;
use crate::perceptual::PerceptualEmbedder;

pub const PSNR_CAP: f64 = 100.0;
pub const PIXEL_RANGE: f64 = 2.0;
pub const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn pair(a: &ImageTensor, b: &ImageTensor) -> Result<(Vec<f64>, Vec<f64>, [usize; 4])> {
    let da = a.tensor().dims();
    if da != b.tensor().dims() {
        return Err(shape_err(format!("image batches {:?} and {:?} differ", da, b.tensor().dims())));
    }
    let dims = [da[0], da[1], da[2], da[3]];
    Ok((nn::to_f64_vec(a.tensor())?, nn::to_f64_vec(b.tensor())?, dims))
}

/// `20·log10(2 / RMSE)` per image, capped at 100 dB.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<Vec<f64>> {
    let (x, y, [n, ..]) = pair(a, b)?;
    let per = x.len() / n.max(1);
    Ok((0..n)
        .map(|i| {
            let s = i * per;
            let mse = x[s..s + per].iter().zip(&y[s..s + per]).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / per as f64;
            psnr_from_mse(mse)
        })
        .collect())
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    let rmse = mse.sqrt();
    if rmse < 1e-10 {
        PSNR_CAP
    } else {
        (20.0 * (PIXEL_RANGE / rmse).log10()).min(PSNR_CAP)
    }
}

/// Mean single-scale SSIM per image over every valid 7×7 uniform window of
/// every channel (population statistics).
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<Vec<f64>> {
    let (x, y, [n, c, h, w]) = pair(a, b)?;
    let win = SSIM_WINDOW.min(h).min(w);
    let c1 = (SSIM_K1 * PIXEL_RANGE).powi(2);
    let c2 = (SSIM_K2 * PIXEL_RANGE).powi(2);
    let area = (win * win) as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut total = 0.0;
        let mut count = 0usize;
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            let at = |v: &[f64], r: usize, q: usize| v[base + r * w + q];
            for r0 in 0..=h - win {
                for q0 in 0..=w - win {
                    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for r in r0..r0 + win {
                        for q in q0..q0 + win {
                            let (p, t) = (at(&x, r, q), at(&y, r, q));
                            sx += p;
                            sy += t;
                            sxx += p * p;
                            syy += t * t;
                            sxy += p * t;
                        }
                    }
                    let (mx, my) = (sx / area, sy / area);
                    let vx = sxx / area - mx * mx;
                    let vy = syy / area - my * my;
                    let cov = sxy / area - mx * my;
                    total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
        out.push(total / count as f64);
    }
    Ok(out)
}

/// Perceptual-proxy distance per image.
pub fn lpips_proxy(a: &ImageTensor, b: &ImageTensor, embedder: &PerceptualEmbedder) -> Result<Vec<f64>> {
    Ok(nn::to_f64_vec(&embedder.distance(a, b)?)?)
}

/// Identity-proxy cosine per image, in [−1, 1].
pub fn id_sim(a: &ImageTensor, b: &ImageTensor, embedder: &PerceptualEmbedder) -> Result<Vec<f64>> {
    Ok(nn::to_f64_vec(&embedder.id_similarity(a, b)?)?.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect())
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}
