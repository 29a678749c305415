//! Fully connected two-label CRF refinement by mean-field inference.
//!
//! Pairwise energies use an appearance kernel (position and colour) plus a
//! smoothness kernel (position only) under Potts compatibility. Messages
//! are summed exactly over all pixel pairs.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ops::sigmoid;
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Probabilities are clipped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the
/// unary log.
pub const PROB_CLAMP: f64 = 1e-5;

/// Image values in `[0, 1]` are scaled to this range before the colour
/// distance, so bandwidths are in 8-bit intensity units.
pub const INTENSITY_SCALE: f64 = 255.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrfParams {
    pub w_appearance: f64,
    pub w_smoothness: f64,
    /// Spatial bandwidth of the appearance kernel, in pixels.
    pub theta_alpha: f64,
    /// Colour bandwidth of the appearance kernel, in intensity units.
    pub theta_beta: f64,
    /// Spatial bandwidth of the smoothness kernel, in pixels.
    pub theta_gamma: f64,
    pub iterations: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            w_appearance: 4.0,
            w_smoothness: 3.0,
            theta_alpha: 30.0,
            theta_beta: 13.0,
            theta_gamma: 3.0,
            iterations: 10,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_appearance", self.w_appearance), ("w_smoothness", self.w_smoothness)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("crf {name} must be finite and non-negative, got {w}")));
            }
        }
        for (name, t) in [
            ("theta_alpha", self.theta_alpha),
            ("theta_beta", self.theta_beta),
            ("theta_gamma", self.theta_gamma),
        ] {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Config(format!("crf {name} must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// One image prepared for message passing.
struct Field {
    h: usize,
    w: usize,
    /// Per-pixel colour in intensity units.
    colour: Vec<[f64; 3]>,
    /// Position-only factors of both kernels, indexed by offset.
    appearance_pos: Vec<f64>,
    smoothness: Vec<f64>,
    colour_coef: f64,
}

impl Field {
    fn new(image: &[f64], h: usize, w: usize, p: &CrfParams) -> Self {
        let plane = h * w;
        let colour = (0..plane)
            .map(|i| {
                [
                    image[i] * INTENSITY_SCALE,
                    image[plane + i] * INTENSITY_SCALE,
                    image[2 * plane + i] * INTENSITY_SCALE,
                ]
            })
            .collect();
        let (ow, oh) = (2 * w - 1, 2 * h - 1);
        let mut appearance_pos = vec![0.0; oh * ow];
        let mut smoothness = vec![0.0; oh * ow];
        let a = 1.0 / (2.0 * p.theta_alpha * p.theta_alpha);
        let g = 1.0 / (2.0 * p.theta_gamma * p.theta_gamma);
        for dy in 0..oh {
            for dx in 0..ow {
                let y = dy as f64 - (h - 1) as f64;
                let x = dx as f64 - (w - 1) as f64;
                let d2 = y * y + x * x;
                appearance_pos[dy * ow + dx] = p.w_appearance * (-a * d2).exp();
                smoothness[dy * ow + dx] = p.w_smoothness * (-g * d2).exp();
            }
        }
        Field {
            h,
            w,
            colour,
            appearance_pos,
            smoothness,
            colour_coef: 1.0 / (2.0 * p.theta_beta * p.theta_beta),
        }
    }

    fn kernel(&self, i: usize, j: usize) -> f64 {
        let (yi, xi) = (i / self.w, i % self.w);
        let (yj, xj) = (j / self.w, j % self.w);
        let off = (yj + self.h - 1 - yi) * (2 * self.w - 1) + (xj + self.w - 1 - xi);
        let (ci, cj) = (self.colour[i], self.colour[j]);
        let dc = (ci[0] - cj[0]).powi(2) + (ci[1] - cj[1]).powi(2) + (ci[2] - cj[2]).powi(2);
        self.appearance_pos[off] * (-self.colour_coef * dc).exp() + self.smoothness[off]
    }
}

/// Pairwise kernel between pixels `i` and `j` (row-major indices) of a
/// single `(1, 3, H, W)` image.
pub fn pairwise_kernel<T: Real>(image: &Tensor<T>, params: &CrfParams, i: usize, j: usize) -> Result<f64> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(shape_err!("expected a 1 x 3 x H x W image, got {s}"));
    }
    if i >= s.plane() || j >= s.plane() {
        return Err(Error::Argument(format!("pixel index out of range for {}x{}", s.h, s.w)));
    }
    let data: Vec<f64> = image.data().iter().map(|v| v.as_f64()).collect();
    Ok(Field::new(&data, s.h, s.w, params).kernel(i, j))
}

/// Mirror-label marginal after `params.iterations` mean-field updates.
/// `image` is `(N, 3, H, W)` in `[0, 1]`; `prob` is `(N, 1, H, W)`.
/// Marginals are reported in the same clamped range as the input, since
/// strong agreement saturates the logistic in floating point.
pub fn crf_refine<T: Real>(image: &Tensor<T>, prob: &Tensor<T>, params: &CrfParams) -> Result<Tensor<T>> {
    params.validate()?;
    let (si, sp) = (image.shape(), prob.shape());
    if si.c != 3 || sp.c != 1 || si.n != sp.n || si.h != sp.h || si.w != sp.w {
        return Err(shape_err!("crf needs N x 3 x H x W image and N x 1 x H x W map, got {si} and {sp}"));
    }
    let plane = sp.plane();
    let mut out = Vec::with_capacity(sp.numel());
    for n in 0..sp.n {
        let img: Vec<f64> = image.sample(n).iter().map(|v| v.as_f64()).collect();
        let field = Field::new(&img, sp.h, sp.w, params);
        let mut q: Vec<f64> = prob
            .sample(n)
            .iter()
            .map(|p| p.as_f64().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
            .collect();
        // energy of background minus energy of mirror
        let unary: Vec<f64> = q.iter().map(|&p| (-(1.0 - p).ln()) - (-p.ln())).collect();
        // without pairwise terms the unary marginal, p itself, is the fixed point
        let iterations = if params.w_appearance == 0.0 && params.w_smoothness == 0.0 {
            0
        } else {
            params.iterations
        };
        let mut next = vec![0.0; plane];
        for _ in 0..iterations {
            for i in 0..plane {
                // Potts: each label is penalized by the kernel-weighted mass
                // of the other label
                let mut balance = 0.0;
                for j in 0..plane {
                    if j != i {
                        balance += field.kernel(i, j) * (2.0 * q[j] - 1.0);
                    }
                }
                next[i] = sigmoid(unary[i] + balance);
            }
            std::mem::swap(&mut q, &mut next);
        }
        out.extend(q.into_iter().map(|v| T::of(v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))));
    }
    Tensor::from_vec(Shape::new(sp.n, 1, sp.h, sp.w), out)
}
