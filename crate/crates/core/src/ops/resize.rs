//! Bilinear resampling with half-pixel centres (align-corners off).

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Per-output-coordinate source taps `(lo, hi, weight_of_hi)`.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn upsample_bilinear<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if out_h == 0 || out_w == 0 || s.h == 0 || s.w == 0 {
        return Err(Error::Argument(format!(
            "bilinear resize of {s} to {out_h}x{out_w}"
        )));
    }
    if (s.h, s.w) == (out_h, out_w) {
        return Ok(input.clone());
    }
    let ty = taps(s.h, out_h);
    let tx = taps(s.w, out_w);
    let mut out = Tensor::zeros(s.with_hw(out_h, out_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::of(fy);
                let r0 = &src[y0 * s.w..(y0 + 1) * s.w];
                let r1 = &src[y1 * s.w..(y1 + 1) * s.w];
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::of(fx);
                    let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                    let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
                    dst[oy * out_w + ox] = top + (bottom - top) * fy;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_bilinear`]: scatters output gradients back onto
/// the source taps.
pub fn upsample_bilinear_backward<T: Real>(input_shape: Shape, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input_shape;
    let gs = grad_out.shape();
    if (gs.n, gs.c) != (s.n, s.c) {
        return Err(Error::Shape(format!(
            "resize backward: gradient {gs} for input {s}"
        )));
    }
    if (s.h, s.w) == (gs.h, gs.w) {
        return Ok(grad_out.clone());
    }
    let ty = taps(s.h, gs.h);
    let tx = taps(s.w, gs.w);
    let mut g = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = grad_out.plane(n, c);
            let dst = g.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::of(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::of(fx);
                    let v = src[oy * gs.w + ox];
                    let top = v * (T::one() - fy);
                    let bottom = v * fy;
                    dst[y0 * s.w + x0] += top * (T::one() - fx);
                    dst[y0 * s.w + x1] += top * fx;
                    dst[y1 * s.w + x0] += bottom * (T::one() - fx);
                    dst[y1 * s.w + x1] += bottom * fx;
                }
            }
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f64>::full(Shape::new(1, 2, 3, 5), 0.625);
        let y = upsample_bilinear(&x, 7, 11).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.625));
        assert_eq!(y.mean(), x.mean());
    }

    #[test]
    fn single_pixel_replicates() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 1, 1), 3.0);
        let y = upsample_bilinear(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[3.0; 4]);
    }

    #[test]
    fn half_pixel_grid_on_a_ramp() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
        let y = upsample_bilinear(&x, 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn rejects_empty_target() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        assert!(upsample_bilinear(&x, 0, 4).is_err());
    }

    #[test]
    fn backward_is_adjoint() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 2, 3, 4), |_, c, h, w| ((c * 12 + h * 4 + w) as f64).sin());
        let y = upsample_bilinear(&x, 8, 9).unwrap();
        let gy = Tensor::<f64>::from_fn(y.shape(), |_, c, h, w| ((c * 72 + h * 9 + w) as f64 * 0.3).cos());
        let gx = upsample_bilinear_backward(x.shape(), &gy).unwrap();
        let lhs: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
