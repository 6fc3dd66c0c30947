//! Fused elementwise kernels with explicit backward passes.
//!
//! Composing these from candle primitives records several broadcast ops per
//! call, and their backward passes dominated generator time.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor};

use num_traits::{One, Zero};

use super::elem::{contiguous, Elem};
use crate::dispatch_float;

struct LeakyRelu {
    slope: f64,
}

struct LeakyReluGrad {
    slope: f64,
}

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch_float!(s.dtype(), T => {
            let x = contiguous::<T>(s, l)?;
            let slope = T::of(self.slope);
            let y: Vec<T> = x.iter().map(|&v| if v > T::zero() { v } else { v * slope }).collect();
            Ok((T::wrap(y), l.shape().clone()))
        })
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let grad = grad.contiguous()?;
        Ok(Some(arg.apply_op2_no_bwd(&grad, &LeakyReluGrad { slope: self.slope })?))
    }
}

impl CustomOp2 for LeakyReluGrad {
    fn name(&self) -> &'static str {
        "leaky-relu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch_float!(s1.dtype(), T => {
            let x = contiguous::<T>(s1, l1)?;
            let g = contiguous::<T>(s2, l2)?;
            let slope = T::of(self.slope);
            let dx: Vec<T> = x.iter().zip(g).map(|(&v, &g)| if v > T::zero() { g } else { g * slope }).collect();
            Ok((T::wrap(dx), l1.shape().clone()))
        })
    }
}

/// `max(x, slope·x)` for `0 ≤ slope ≤ 1`, elementwise.
pub fn leaky_relu(x: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(LeakyRelu { slope })
}

struct InstanceNorm {
    eps: f64,
}

struct InstanceNormGrad {
    eps: f64,
    plane: usize,
}

fn plane_stats<T: Elem>(x: &[T], eps: f64) -> (T, T) {
    let n = T::of(x.len() as f64);
    let mut mean = T::zero();
    for &v in x {
        mean += v;
    }
    mean = mean / n;
    let mut var = T::zero();
    for &v in x {
        var += (v - mean) * (v - mean);
    }
    let sigma = (var / n + T::of(eps)).sqrt();
    (mean, sigma)
}

impl CustomOp1 for InstanceNorm {
    fn name(&self) -> &'static str {
        "instance-norm"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l.dims();
        if dims.len() != 4 {
            candle_core::bail!("instance norm expects B×C×H×W, got {dims:?}")
        }
        let plane = dims[2] * dims[3];
        dispatch_float!(s.dtype(), T => {
            let x = contiguous::<T>(s, l)?;
            let mut y = vec![T::zero(); x.len()];
            for (xs, ys) in x.chunks_exact(plane).zip(y.chunks_exact_mut(plane)) {
                let (mean, sigma) = plane_stats(xs, self.eps);
                for (o, &v) in ys.iter_mut().zip(xs) {
                    *o = (v - mean) / sigma;
                }
            }
            Ok((T::wrap(y), l.shape().clone()))
        })
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        let grad = grad.contiguous()?;
        Ok(Some(arg.apply_op2_no_bwd(&grad, &InstanceNormGrad { eps: self.eps, plane: h * w })?))
    }
}

impl CustomOp2 for InstanceNormGrad {
    fn name(&self) -> &'static str {
        "instance-norm-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let plane = self.plane;
        dispatch_float!(s1.dtype(), T => {
            let x = contiguous::<T>(s1, l1)?;
            let g = contiguous::<T>(s2, l2)?;
            let n = T::of(plane as f64);
            let mut dx = vec![T::zero(); x.len()];
            for ((xs, gs), ds) in x.chunks_exact(plane).zip(g.chunks_exact(plane)).zip(dx.chunks_exact_mut(plane)) {
                let (mean, sigma) = plane_stats(xs, self.eps);
                let mut mg = T::zero();
                let mut mgy = T::zero();
                for (&v, &gv) in xs.iter().zip(gs) {
                    mg += gv;
                    mgy += gv * (v - mean) / sigma;
                }
                mg = mg / n;
                mgy = mgy / n;
                for ((o, &v), &gv) in ds.iter_mut().zip(xs).zip(gs) {
                    let y = (v - mean) / sigma;
                    *o = (gv - mg - y * mgy) / sigma;
                }
            }
            Ok((T::wrap(dx), l1.shape().clone()))
        })
    }
}

/// Per-sample, per-channel normalisation over the spatial dims of a B×C×H×W tensor.
pub fn instance_norm(x: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(InstanceNorm { eps })
}

struct Upsample2x;
struct Downsum2x;

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample-nearest-2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let &[b, c, h, w] = l.dims() else { candle_core::bail!("upsample expects B×C×H×W") };
        dispatch_float!(s.dtype(), T => {
            let x = contiguous::<T>(s, l)?;
            let mut y = vec![T::zero(); x.len() * 4];
            for (xs, ys) in x.chunks_exact(h * w).zip(y.chunks_exact_mut(4 * h * w)) {
                for r in 0..h {
                    let src = &xs[r * w..(r + 1) * w];
                    let (top, bottom) = ys[2 * r * 2 * w..(2 * r + 2) * 2 * w].split_at_mut(2 * w);
                    for (i, &v) in src.iter().enumerate() {
                        top[2 * i] = v;
                        top[2 * i + 1] = v;
                    }
                    bottom.copy_from_slice(top);
                }
            }
            Ok((T::wrap(y), Shape::from((b, c, 2 * h, 2 * w))))
        })
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Downsum2x)?))
    }
}

impl CustomOp1 for Downsum2x {
    fn name(&self) -> &'static str {
        "downsum-2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let &[b, c, h2, w2] = l.dims() else { candle_core::bail!("downsum expects B×C×H×W") };
        let (h, w) = (h2 / 2, w2 / 2);
        dispatch_float!(s.dtype(), T => {
            let g = contiguous::<T>(s, l)?;
            let mut y = vec![T::zero(); b * c * h * w];
            for (gs, ys) in g.chunks_exact(h2 * w2).zip(y.chunks_exact_mut(h * w)) {
                for r in 0..h {
                    for i in 0..w {
                        let a = (2 * r) * w2 + 2 * i;
                        ys[r * w + i] = gs[a] + gs[a + 1] + gs[a + w2] + gs[a + w2 + 1];
                    }
                }
            }
            Ok((T::wrap(y), Shape::from((b, c, h, w))))
        })
    }
}

/// Nearest-neighbour 2× upsampling of a B×C×H×W tensor.
pub fn upsample2x(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Upsample2x)
}

struct Tanh;
struct TanhGrad;

impl CustomOp1 for Tanh {
    fn name(&self) -> &'static str {
        "tanh"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch_float!(s.dtype(), T => {
            let x = contiguous::<T>(s, l)?;
            Ok((T::wrap(x.iter().map(|v| v.tanh()).collect()), l.shape().clone()))
        })
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.apply_op2_no_bwd(&grad.contiguous()?, &TanhGrad)?))
    }
}

impl CustomOp2 for TanhGrad {
    fn name(&self) -> &'static str {
        "tanh-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch_float!(s1.dtype(), T => {
            let y = contiguous::<T>(s1, l1)?;
            let g = contiguous::<T>(s2, l2)?;
            Ok((T::wrap(y.iter().zip(g).map(|(&y, &g)| g * (T::one() - y * y)).collect()), l1.shape().clone()))
        })
    }
}

/// Elementwise hyperbolic tangent.
pub fn tanh(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Tanh)
}

/// `y[b,c,..] = x[b,c,..]·scale[b,c] + shift[b,c]`.
struct ChannelAffine;
/// `dx[b,c,..] = g[b,c,..]·scale[b,c]`.
struct ChannelScale;
/// `out[b,c] = Σ g[b,c,..]·x[b,c,..]`.
struct ChannelDot;
/// `out[b,c] = Σ g[b,c,..]`.
struct ChannelSum;

fn plane_of(l: &Layout, coeffs: &Layout) -> candle_core::Result<usize> {
    let dims = l.dims();
    if dims.len() < 2 || coeffs.dims() != &dims[..2] {
        candle_core::bail!("channel coefficients {:?} do not match input {:?}", coeffs.dims(), dims)
    }
    Ok(dims[2..].iter().product())
}

impl CustomOp3 for ChannelAffine {
    fn name(&self) -> &'static str {
        "channel-affine"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let plane = plane_of(l1, l2)?;
        plane_of(l1, l3)?;
        dispatch_float!(s1.dtype(), T => {
            let x = contiguous::<T>(s1, l1)?;
            let scale = contiguous::<T>(s2, l2)?;
            let shift = contiguous::<T>(s3, l3)?;
            let mut y = vec![T::zero(); x.len()];
            for (i, (xs, ys)) in x.chunks_exact(plane).zip(y.chunks_exact_mut(plane)).enumerate() {
                let (a, b) = (scale[i], shift[i]);
                for (o, &v) in ys.iter_mut().zip(xs) {
                    *o = v * a + b;
                }
            }
            Ok((T::wrap(y), l1.shape().clone()))
        })
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        shift: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = if x.track_op() { Some(grad.apply_op2_no_bwd(scale, &ChannelScale)?) } else { None };
        let dscale = if scale.track_op() { Some(grad.apply_op2_no_bwd(x, &ChannelDot)?) } else { None };
        let dshift = if shift.track_op() { Some(grad.apply_op1_no_bwd(&ChannelSum)?) } else { None };
        Ok((dx, dscale, dshift))
    }
}

impl CustomOp2 for ChannelScale {
    fn name(&self) -> &'static str {
        "channel-scale"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let plane = plane_of(l1, l2)?;
        dispatch_float!(s1.dtype(), T => {
            let g = contiguous::<T>(s1, l1)?;
            let scale = contiguous::<T>(s2, l2)?;
            let mut y = vec![T::zero(); g.len()];
            for (i, (gs, ys)) in g.chunks_exact(plane).zip(y.chunks_exact_mut(plane)).enumerate() {
                for (o, &v) in ys.iter_mut().zip(gs) {
                    *o = v * scale[i];
                }
            }
            Ok((T::wrap(y), l1.shape().clone()))
        })
    }
}

impl CustomOp2 for ChannelDot {
    fn name(&self) -> &'static str {
        "channel-dot"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.dims();
        let plane: usize = dims[2..].iter().product();
        dispatch_float!(s1.dtype(), T => {
            let g = contiguous::<T>(s1, l1)?;
            let x = contiguous::<T>(s2, l2)?;
            let out: Vec<T> = g
                .chunks_exact(plane)
                .zip(x.chunks_exact(plane))
                .map(|(gs, xs)| {
                    let mut acc = T::zero();
                    for (&a, &b) in gs.iter().zip(xs) {
                        acc += a * b;
                    }
                    acc
                })
                .collect();
            Ok((T::wrap(out), Shape::from((dims[0], dims[1]))))
        })
    }
}

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l.dims();
        let plane: usize = dims[2..].iter().product();
        dispatch_float!(s.dtype(), T => {
            let g = contiguous::<T>(s, l)?;
            let out: Vec<T> = g
                .chunks_exact(plane)
                .map(|gs| {
                    let mut acc = T::zero();
                    for &a in gs {
                        acc += a;
                    }
                    acc
                })
                .collect();
            Ok((T::wrap(out), Shape::from((dims[0], dims[1]))))
        })
    }
}

/// Per-(sample, channel) affine map of a B×C×… tensor with B×C coefficients.
pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op3(&scale.contiguous()?, &shift.contiguous()?, ChannelAffine)
}
