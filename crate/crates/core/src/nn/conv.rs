//! 2-D convolution as an im2col + GEMM custom op.
//!
//! candle's CPU convolution is slow on the narrow channel counts used by the
//! toy networks here, and its backward pass dominates training time. This op
//! keeps the work inside `matrixmultiply` for the forward pass and for both
//! gradients. Only the CPU backend, `f32`/`f64`, unit dilation and a single
//! group are supported.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};


use super::elem::{contiguous, Elem};
use crate::dispatch_float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> candle_core::Result<Self> {
        let (&[batch, c_in, h, w], &[c_out, wc, kh, kw]) = (input, weight) else {
            candle_core::bail!("conv2d expects 4-d input and weight, got {input:?} and {weight:?}")
        };
        if wc != c_in {
            candle_core::bail!("conv2d channel mismatch: input has {c_in}, weight expects {wc}")
        }
        if h + 2 * padding < kh || w + 2 * padding < kw || stride == 0 {
            candle_core::bail!("conv2d kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        Ok(Self { batch, c_in, h, w, c_out, kh, kw, stride, padding, oh, ow })
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn out_shape(&self) -> Shape {
        Shape::from((self.batch, self.c_out, self.oh, self.ow))
    }
}

/// Unfolds one image (C×H×W) into a K×P patch matrix.
fn im2col<T: Elem>(g: &Geometry, img: &[T], cols: &mut [T]) {
    let p = g.p();
    for c in 0..g.c_in {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *out = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a K×P patch matrix back onto one image (C×H×W).
fn col2im<T: Elem>(g: &Geometry, cols: &[T], img: &mut [T]) {
    let p = g.p();
    for c in 0..g.c_in {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward<T: Elem>(g: &Geometry, x: &[T], w: &[T]) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let mut out = vec![T::zero(); g.batch * g.c_out * p];
    let mut cols = vec![T::zero(); k * p];
    let img_len = g.c_in * g.h * g.w;
    for b in 0..g.batch {
        im2col(g, &x[b * img_len..(b + 1) * img_len], &mut cols);
        let dst = &mut out[b * g.c_out * p..(b + 1) * g.c_out * p];
        // out_b (O×P) = W (O×K) · cols (K×P)
        unsafe {
            T::gemm(
                g.c_out, k, p,
                w.as_ptr(), k as isize, 1,
                cols.as_ptr(), p as isize, 1,
                T::zero(),
                dst.as_mut_ptr(), p as isize, 1,
            );
        }
    }
    out
}

fn grad_input<T: Elem>(g: &Geometry, grad: &[T], w: &[T]) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let img_len = g.c_in * g.h * g.w;
    let mut dx = vec![T::zero(); g.batch * img_len];
    let mut cols = vec![T::zero(); k * p];
    for b in 0..g.batch {
        let gb = &grad[b * g.c_out * p..(b + 1) * g.c_out * p];
        // dcols (K×P) = Wᵀ (K×O) · g_b (O×P)
        unsafe {
            T::gemm(
                k, g.c_out, p,
                w.as_ptr(), 1, k as isize,
                gb.as_ptr(), p as isize, 1,
                T::zero(),
                cols.as_mut_ptr(), p as isize, 1,
            );
        }
        col2im(g, &cols, &mut dx[b * img_len..(b + 1) * img_len]);
    }
    dx
}

fn grad_weight<T: Elem>(g: &Geometry, x: &[T], grad: &[T]) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let img_len = g.c_in * g.h * g.w;
    let mut dw = vec![T::zero(); g.c_out * k];
    let mut cols = vec![T::zero(); k * p];
    for b in 0..g.batch {
        im2col(g, &x[b * img_len..(b + 1) * img_len], &mut cols);
        let gb = &grad[b * g.c_out * p..(b + 1) * g.c_out * p];
        // dW (O×K) += g_b (O×P) · colsᵀ (P×K)
        unsafe {
            T::gemm(
                g.c_out, p, k,
                gb.as_ptr(), p as isize, 1,
                cols.as_ptr(), 1, p as isize,
                T::one(),
                dw.as_mut_ptr(), k as isize, 1,
            );
        }
    }
    dw
}

struct Conv2dFwd {
    stride: usize,
    padding: usize,
}

struct Conv2dGradInput {
    geometry: Geometry,
}

struct Conv2dGradWeight {
    geometry: Geometry,
}

impl CustomOp2 for Conv2dFwd {
    fn name(&self) -> &'static str {
        "gemm-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims(), self.stride, self.padding)?;
        dispatch_float!(s1.dtype(), T => {
            let out = forward::<T>(&g, contiguous(s1, l1)?, contiguous(s2, l2)?);
            Ok((T::wrap(out), g.out_shape()))
        })
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let geometry = Geometry::new(x.dims(), w.dims(), self.stride, self.padding)?;
        let grad = grad.contiguous()?;
        // Frozen weights and raw inputs are common; skip gradients nobody reads.
        let dx = if x.track_op() { Some(grad.apply_op2_no_bwd(w, &Conv2dGradInput { geometry })?) } else { None };
        let dw = if w.track_op() { Some(x.apply_op2_no_bwd(&grad, &Conv2dGradWeight { geometry })?) } else { None };
        Ok((dx, dw))
    }
}

impl CustomOp2 for Conv2dGradInput {
    fn name(&self) -> &'static str {
        "gemm-conv2d-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.geometry;
        dispatch_float!(s1.dtype(), T => {
            let dx = grad_input::<T>(g, contiguous(s1, l1)?, contiguous(s2, l2)?);
            Ok((T::wrap(dx), Shape::from((g.batch, g.c_in, g.h, g.w))))
        })
    }
}

impl CustomOp2 for Conv2dGradWeight {
    fn name(&self) -> &'static str {
        "gemm-conv2d-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.geometry;
        dispatch_float!(s1.dtype(), T => {
            let dw = grad_weight::<T>(g, contiguous(s1, l1)?, contiguous(s2, l2)?);
            Ok((T::wrap(dw), Shape::from((g.c_out, g.c_in, g.kh, g.kw))))
        })
    }
}

/// Cross-correlation of `x` (B×C×H×W) with `weight` (O×C×kh×kw).
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let x = x.contiguous()?;
    let weight = weight.contiguous()?;
    x.apply_op2(&weight, Conv2dFwd { stride, padding })
}
