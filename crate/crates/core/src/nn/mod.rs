//! Small tensor toolkit shared by every network in the crate.

pub mod conv;
mod elem;
pub mod ops;
mod params;

pub use conv::conv2d;
pub use ops::{channel_affine, instance_norm, leaky_relu, tanh, upsample2x};
pub use params::ParamStore;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Deterministic RNG used for all initialisation and sampling.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws a standard-normal tensor from `rng`.
pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType, device: &Device) -> candle_core::Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(v, shape, device)?.to_dtype(dtype)
}

/// `x · w + b` with `w` stored as (in, out). Accepts any leading batch dims.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> candle_core::Result<Tensor> {
    let y = x.broadcast_matmul(w)?;
    match b {
        Some(b) => y.broadcast_add(b),
        None => Ok(y),
    }
}

/// Convolution with a per-output-channel bias.
pub fn conv_bias(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let y = conv2d(x, w, stride, padding)?;
    let (batch, c) = (y.dims()[0], b.elem_count());
    let shift = b.reshape((1, c))?.broadcast_as((batch, c))?;
    let scale = Tensor::ones((batch, c), y.dtype(), y.device())?;
    channel_affine(&y, &scale, &shift)
}

/// Unit L2 norm along the last dim, guarded by `eps`.
pub fn l2_normalize(x: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    x.broadcast_div(&(norm + eps)?)
}

/// Flattens a tensor to a `Vec<f64>` regardless of its float dtype.
pub fn to_f64_vec(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

pub fn scalar_f64(t: &Tensor) -> candle_core::Result<f64> {
    t.to_dtype(DType::F64)?.to_scalar::<f64>()
}

/// Layer normalisation over the last dim with learned gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let c = x.broadcast_sub(&mean)?;
    let var = c.sqr()?.mean_keepdim(D::Minus1)?;
    c.broadcast_div(&(var + eps)?.sqrt()?)?.broadcast_mul(gain)?.broadcast_add(bias)
}

/// Adam (no weight decay) over every parameter of `store`.
/// Adam with decoupled weight decay applied only to `*.weight` parameters.
pub struct Adam {
    groups: Vec<AdamW>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> candle_core::Result<Self> {
        let (decayed, plain): (Vec<_>, Vec<_>) = store.iter().partition(|(name, _)| weight_decay != 0.0 && name.ends_with("weight"));
        let mut groups = Vec::new();
        for (vars, wd) in [(plain, 0.0), (decayed, weight_decay)] {
            if !vars.is_empty() {
                let vars = vars.into_iter().map(|(_, v)| v.clone()).collect();
                groups.push(AdamW::new(vars, ParamsAdamW { lr, weight_decay: wd, ..Default::default() })?);
            }
        }
        Ok(Self { groups })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.groups.iter_mut().for_each(|g| g.set_learning_rate(lr));
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> candle_core::Result<()> {
        let grads = loss.backward()?;
        self.groups.iter_mut().try_for_each(|g| g.step(&grads))
    }
}

pub fn adam(store: &ParamStore, lr: f64) -> candle_core::Result<Adam> {
    Adam::new(store, lr, 0.0)
}

/// Cosine decay from `base` at step 0 towards zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let progress = step as f64 / total.max(1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Epoch-wise shuffled minibatches over a fixed index pool.
pub struct BatchSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(pool: Vec<usize>, seed: u64) -> Self {
        Self { order: Vec::new(), pos: 0, pool, rng: rng(seed) }
    }

    /// Next `size` indices; reshuffles whenever the current epoch runs out.
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.pool.is_empty() {
            if self.pos == self.order.len() {
                self.order = self.pool.clone();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::arange(0f32, 4., &Device::Cpu).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let y = upsample2x(&x).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v, vec![0., 0., 1., 1., 0., 0., 1., 1., 2., 2., 3., 3., 2., 2., 3., 3.]);
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let mut r = rng(3);
        let x = randn(&mut r, &[2, 3, 5, 5], DType::F64, &Device::Cpu).unwrap();
        let y = instance_norm(&x, 0.0).unwrap().reshape((2, 3, 25)).unwrap();
        let mean = y.mean_keepdim(2).unwrap().abs().unwrap().max_all().unwrap();
        let var = y.sqr().unwrap().mean_keepdim(2).unwrap();
        assert!(scalar_f64(&mean).unwrap() < 1e-12);
        for v in to_f64_vec(&var).unwrap() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = BatchSampler::new((0..10).collect(), 1);
        let mut a = s.next_batch(5);
        a.extend(s.next_batch(5));
        a.sort_unstable();
        assert_eq!(a, (0..10).collect::<Vec<_>>());
        let first = BatchSampler::new((0..10).collect(), 1).next_batch(7);
        let second = BatchSampler::new((0..10).collect(), 1).next_batch(7);
        assert_eq!(first, second);
    }

    #[test]
    fn layer_norm_standardises_rows() {
        let mut r = rng(2);
        let x = randn(&mut r, &[3, 6], DType::F64, &Device::Cpu).unwrap();
        let ones = Tensor::ones(6, DType::F64, &Device::Cpu).unwrap();
        let zeros = Tensor::zeros(6, DType::F64, &Device::Cpu).unwrap();
        let y = layer_norm(&x, &ones, &zeros, 0.0).unwrap();
        let m = y.mean_keepdim(1).unwrap().abs().unwrap().max_all().unwrap();
        assert!(scalar_f64(&m).unwrap() < 1e-12);
    }

    #[test]
    fn leaky_relu_slopes() {
        let x = Tensor::new(&[-2f32, 0., 3.], &Device::Cpu).unwrap();
        let y = leaky_relu(&x, 0.2).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y, vec![-0.4, 0., 3.]);
    }
}
