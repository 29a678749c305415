//! Per-channel batch normalization.

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Weight kept by the running average on each update.
    pub momentum: T,
    pub epsilon: T,
}

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-5;

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::of(DEFAULT_MOMENTUM),
            epsilon: T::of(DEFAULT_EPSILON),
        }
    }

    /// Training mode normalizes with batch statistics and folds them into the
    /// running averages; inference mode uses the running averages.
    pub fn forward(
        &mut self,
        input: &Tensor<T>,
        training: bool,
    ) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
        if training {
            let (out, cache) = batch_norm_train(input, &self.gamma, &self.beta, self.epsilon)?;
            update_running(
                &mut self.running_mean,
                &mut self.running_var,
                &cache,
                self.momentum,
            );
            Ok((out, Some(cache)))
        } else {
            let out = batch_norm_infer(
                input,
                &self.gamma,
                &self.beta,
                &self.running_mean,
                &self.running_var,
                self.epsilon,
            )?;
            Ok((out, None))
        }
    }
}

/// Values kept from a training-mode forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
    /// Elements per channel (`N * H * W`).
    pub count: usize,
}

fn check_channels<T>(input_c: usize, gamma: &[T], beta: &[T]) -> Result<()> {
    if gamma.len() != input_c || beta.len() != input_c {
        return Err(shape_err!(
            "batch_norm: {} channels but gamma/beta have {}/{}",
            input_c,
            gamma.len(),
            beta.len()
        ));
    }
    Ok(())
}

pub fn batch_norm_train<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    epsilon: T,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let s = input.shape();
    check_channels(s.c, gamma, beta)?;
    let count = s.n * s.plane();
    if count == 0 {
        return Err(Error::Argument("batch_norm: empty batch".into()));
    }
    let m = T::of(count as f64);
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            acc += input.plane(n, c).iter().copied().sum::<T>();
        }
        mean[c] = acc / m;
        let mut sq = T::zero();
        for n in 0..s.n {
            for &x in input.plane(n, c) {
                let d = x - mean[c];
                sq += d * d;
            }
        }
        var[c] = sq / m;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epsilon).sqrt()).collect();
    let mut normalized = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (mu, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
            let x = input.plane(n, c);
            let xh = normalized.plane_mut(n, c);
            let y = out.plane_mut(n, c);
            for ((d, o), &v) in xh.iter_mut().zip(y.iter_mut()).zip(x) {
                *d = (v - mu) * is;
                *o = g * *d + b;
            }
        }
    }
    Ok((
        out,
        BatchNormCache {
            normalized,
            inv_std,
            mean,
            var,
            count,
        },
    ))
}

pub fn batch_norm_infer<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    epsilon: T,
) -> Result<Tensor<T>> {
    let s = input.shape();
    check_channels(s.c, gamma, beta)?;
    check_channels(s.c, running_mean, running_var)?;
    if s.n == 0 {
        return Err(Error::Argument("batch_norm: empty batch".into()));
    }
    let mut out = input.clone();
    for c in 0..s.c {
        let scale = gamma[c] / (running_var[c] + epsilon).sqrt();
        let shift = beta[c] - running_mean[c] * scale;
        for n in 0..s.n {
            out.plane_mut(n, c)
                .iter_mut()
                .for_each(|v| *v = *v * scale + shift);
        }
    }
    Ok(out)
}

/// `running = momentum * running + (1 - momentum) * batch`, using the
/// unbiased batch variance for the running variance.
pub fn update_running<T: Real>(
    running_mean: &mut [T],
    running_var: &mut [T],
    cache: &BatchNormCache<T>,
    momentum: T,
) {
    let keep = momentum;
    let take = T::one() - momentum;
    let m = cache.count as f64;
    let unbias = if cache.count > 1 {
        T::of(m / (m - 1.0))
    } else {
        T::one()
    };
    for c in 0..running_mean.len() {
        running_mean[c] = keep * running_mean[c] + take * cache.mean[c];
        running_var[c] = keep * running_var[c] + take * cache.var[c] * unbias;
    }
}

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Backward pass of [`batch_norm_train`].
pub fn batch_norm_train_backward<T: Real>(
    grad_out: &Tensor<T>,
    gamma: &[T],
    cache: &BatchNormCache<T>,
) -> Result<BatchNormGrads<T>> {
    let s = cache.normalized.shape();
    grad_out.expect_shape(s, "batch_norm backward")?;
    let m = T::of(cache.count as f64);
    let mut g_gamma = vec![T::zero(); s.c];
    let mut g_beta = vec![T::zero(); s.c];
    for c in 0..s.c {
        for n in 0..s.n {
            for (&dy, &xh) in grad_out.plane(n, c).iter().zip(cache.normalized.plane(n, c)) {
                g_beta[c] += dy;
                g_gamma[c] += dy * xh;
            }
        }
    }
    let mut g_in = Tensor::zeros(s);
    for c in 0..s.c {
        let k = gamma[c] * cache.inv_std[c] / m;
        let (sum_dy, sum_dy_xh) = (g_beta[c], g_gamma[c]);
        for n in 0..s.n {
            let dy = grad_out.plane(n, c);
            let xh = cache.normalized.plane(n, c);
            for ((d, &g), &x) in g_in.plane_mut(n, c).iter_mut().zip(dy).zip(xh) {
                *d = k * (m * g - sum_dy - x * sum_dy_xh);
            }
        }
    }
    Ok(BatchNormGrads {
        input: g_in,
        gamma: g_gamma,
        beta: g_beta,
    })
}

/// Backward pass of [`batch_norm_infer`] (statistics held constant).
pub fn batch_norm_infer_backward<T: Real>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    gamma: &[T],
    running_mean: &[T],
    running_var: &[T],
    epsilon: T,
) -> Result<BatchNormGrads<T>> {
    let s = input.shape();
    grad_out.expect_shape(s, "batch_norm backward")?;
    let mut g_in = Tensor::zeros(s);
    let mut g_gamma = vec![T::zero(); s.c];
    let mut g_beta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let is = T::one() / (running_var[c] + epsilon).sqrt();
        for n in 0..s.n {
            let dy = grad_out.plane(n, c);
            let x = input.plane(n, c);
            for ((d, &g), &v) in g_in.plane_mut(n, c).iter_mut().zip(dy).zip(x) {
                *d = g * gamma[c] * is;
                g_beta[c] += g;
                g_gamma[c] += g * (v - running_mean[c]) * is;
            }
        }
    }
    Ok(BatchNormGrads {
        input: g_in,
        gamma: g_gamma,
        beta: g_beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = Tensor::<f64>::full(Shape::new(2, 3, 4, 4), 5.0);
        let (y, _) = batch_norm_train(&x, &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let x = Tensor::<f64>::from_fn(Shape::new(2, 2, 3, 3), |n, c, h, w| (n + c * h + w) as f64);
        let (y, _) = batch_norm_train(&x, &[0.0, 0.0], &[0.25, -1.5], 1e-5).unwrap();
        assert!(y.plane(0, 0).iter().chain(y.plane(1, 0)).all(|&v| v == 0.25));
        assert!(y.plane(0, 1).iter().chain(y.plane(1, 1)).all(|&v| v == -1.5));
    }

    #[test]
    fn two_value_channel_maps_to_unit_values() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 2.0]).unwrap();
        let (y, cache) = batch_norm_train(&x, &[1.0], &[0.0], 1e-12).unwrap();
        assert_eq!(cache.mean, vec![1.0]);
        assert_eq!(cache.var, vec![1.0]);
        assert!((y.data()[0] + 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_batch_and_channel_mismatch_rejected() {
        let x = Tensor::<f64>::zeros(Shape::new(0, 2, 3, 3));
        assert!(batch_norm_train(&x, &[1.0; 2], &[0.0; 2], 1e-5).is_err());
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 3, 3));
        assert!(batch_norm_train(&x, &[1.0; 3], &[0.0; 3], 1e-5).is_err());
    }

    #[test]
    fn running_stats_follow_exponential_average() {
        let mut state = BatchNormState::<f64>::new(1);
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 2.0]).unwrap();
        state.forward(&x, true).unwrap();
        assert!((state.running_mean[0] - 0.1).abs() < 1e-12);
        // unbiased batch variance of {0, 2} is 2
        assert!((state.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
        let (y, cache) = state.forward(&x, false).unwrap();
        assert!(cache.is_none());
        let expect = (0.0 - state.running_mean[0]) / (state.running_var[0] + 1e-5).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-12);
    }
}
