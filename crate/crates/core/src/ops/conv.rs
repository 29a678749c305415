//! Dilated 2-D convolution (cross-correlation) lowered to GEMM via im2col.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Stride 1 with `padding = dilation`, which keeps `H x W` for 3x3 kernels.
    pub const fn same(dilation: usize) -> Self {
        ConvGeometry {
            stride: 1,
            dilation,
            padding: dilation,
        }
    }

    /// Stride 1, no padding; the geometry of pointwise (1x1) convolutions.
    pub const fn pointwise() -> Self {
        ConvGeometry {
            stride: 1,
            dilation: 1,
            padding: 0,
        }
    }

    /// Spatial extent covered by a kernel of `k` taps.
    pub const fn span(&self, k: usize) -> usize {
        self.dilation * (k - 1) + 1
    }

    pub fn output_len(&self, input: usize, k: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        let span = self.span(k);
        if self.stride == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Owned convolution parameters: weight `(C_out, C_in, kH, kW)` and an
/// optional per-output-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub geometry: ConvGeometry,
}

impl<T: Real> ConvParams<T> {
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(input, &self.weight, self.bias.as_deref(), self.geometry)
    }

    pub fn backward(&self, input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
        conv2d_backward(input, &self.weight, self.geometry, grad_out)
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn output_shape<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geometry: ConvGeometry,
) -> Result<Shape> {
    let xs = input.shape();
    let ws = weight.shape();
    if ws.c != xs.c {
        return Err(shape_err!(
            "conv2d: input has {} channels, weight {ws} expects {}",
            xs.c,
            ws.c
        ));
    }
    if geometry.stride == 0 || geometry.dilation == 0 {
        return Err(shape_err!("conv2d: stride and dilation must be positive"));
    }
    let (h, w) = match (
        geometry.output_len(xs.h, ws.h),
        geometry.output_len(xs.w, ws.w),
    ) {
        (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
        _ => {
            return Err(shape_err!(
                "conv2d: input {xs} with kernel {}x{} and {geometry:?} has empty output",
                ws.h,
                ws.w
            ))
        }
    };
    Ok(Shape::new(xs.n, ws.n, h, w))
}

/// Unfolds one sample `(C, H, W)` into `(C*kh*kw, oh*ow)` columns.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeometry,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let cols = oh * ow;
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let dx = (kx * g.dilation) as isize - g.padding as isize;
                let dy = (ky * g.dilation) as isize - g.padding as isize;
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize + dy;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if g.stride == 1 {
                        // valid ox satisfy 0 <= ox + dx < w
                        let lo = (-dx).clamp(0, ow as isize) as usize;
                        let hi = (w as isize - dx).clamp(lo as isize, ow as isize) as usize;
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        if hi > lo {
                            let s0 = (lo as isize + dx) as usize;
                            out_row[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride) as isize + dx;
                            *o = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Folds columns back into a sample, accumulating overlapping taps.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    col: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeometry,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let cols = oh * ow;
    for c in 0..c_in {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                let dx = (kx * g.dilation) as isize - g.padding as isize;
                let dy = (ky * g.dilation) as isize - g.padding as isize;
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let in_row = &src[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        let lo = (-dx).clamp(0, ow as isize) as usize;
                        let hi = (w as isize - dx).clamp(lo as isize, ow as isize) as usize;
                        if hi > lo {
                            let s0 = (lo as isize + dx) as usize;
                            for (d, &v) in dst[s0..s0 + (hi - lo)].iter_mut().zip(&in_row[lo..hi]) {
                                *d += v;
                            }
                        }
                    } else {
                        for (ox, &v) in in_row.iter().enumerate() {
                            let ix = (ox * g.stride) as isize + dx;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(ws: Shape, g: ConvGeometry) -> bool {
    ws.h == 1 && ws.w == 1 && g.stride == 1 && g.padding == 0
}

/// Cross-correlation of `input` with `weight`, plus optional bias.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    geometry: ConvGeometry,
) -> Result<Tensor<T>> {
    let out_shape = output_shape(input, weight, geometry)?;
    let xs = input.shape();
    let ws = weight.shape();
    if let Some(b) = bias {
        if b.len() != ws.n {
            return Err(shape_err!(
                "conv2d: bias has {} entries for {} output channels",
                b.len(),
                ws.n
            ));
        }
    }
    let k = ws.c * ws.h * ws.w;
    let cols = out_shape.plane();
    let mut out = Tensor::zeros(out_shape);
    let pointwise = is_pointwise(ws, geometry);
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); k * cols]
    };
    for n in 0..xs.n {
        let x = input.sample(n);
        let rhs: &[T] = if pointwise {
            x
        } else {
            im2col(
                x,
                xs.c,
                xs.h,
                xs.w,
                ws.h,
                ws.w,
                geometry,
                out_shape.h,
                out_shape.w,
                &mut col,
            );
            &col
        };
        let y = out.sample_mut(n);
        T::gemm(
            ws.n,
            k,
            cols,
            T::one(),
            weight.data(),
            false,
            rhs,
            false,
            T::zero(),
            y,
        );
        if let Some(b) = bias {
            for (plane, &bv) in y.chunks_exact_mut(cols).zip(b) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geometry: ConvGeometry,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let out_shape = output_shape(input, weight, geometry)?;
    grad_out.expect_shape(out_shape, "conv2d_backward grad_out")?;
    let xs = input.shape();
    let ws = weight.shape();
    let k = ws.c * ws.h * ws.w;
    let cols = out_shape.plane();
    let pointwise = is_pointwise(ws, geometry);

    let mut grad_input = Tensor::zeros(xs);
    let mut grad_weight = Tensor::zeros(ws);
    let mut grad_bias = vec![T::zero(); ws.n];
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); k * cols]
    };
    for n in 0..xs.n {
        let gy = grad_out.sample(n);
        for (gb, plane) in grad_bias.iter_mut().zip(gy.chunks_exact(cols)) {
            *gb += plane.iter().copied().sum::<T>();
        }
        let x = input.sample(n);
        let cols_view: &[T] = if pointwise {
            x
        } else {
            im2col(
                x,
                xs.c,
                xs.h,
                xs.w,
                ws.h,
                ws.w,
                geometry,
                out_shape.h,
                out_shape.w,
                &mut col,
            );
            &col
        };
        // dW += dY (C_out x P) * cols^T (P x K)
        T::gemm(
            ws.n,
            cols,
            k,
            T::one(),
            gy,
            false,
            cols_view,
            true,
            T::one(),
            grad_weight.data_mut(),
        );
        // dCols = W^T (K x C_out) * dY (C_out x P)
        if pointwise {
            T::gemm(
                k,
                ws.n,
                cols,
                T::one(),
                weight.data(),
                true,
                gy,
                false,
                T::zero(),
                grad_input.sample_mut(n),
            );
        } else {
            T::gemm(
                k,
                ws.n,
                cols,
                T::one(),
                weight.data(),
                true,
                gy,
                false,
                T::zero(),
                &mut col,
            );
            col2im(
                &col,
                xs.c,
                xs.h,
                xs.w,
                ws.h,
                ws.w,
                geometry,
                out_shape.h,
                out_shape.w,
                grad_input.sample_mut(n),
            );
        }
    }
    Ok(ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}
