//! Lovász-hinge IoU surrogate, binary cross-entropy, and the weighted
//! deep-supervision total.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ops::sigmoid;
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    LovaszHinge,
    Bce,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::LovaszHinge => "lovasz_hinge",
            LossKind::Bce => "bce",
        }
    }
}

/// Loss value, its gradient with respect to the logits, and the distance of
/// the evaluation point to the nearest non-differentiable configuration.
#[derive(Clone, Debug)]
pub struct LossEval<T> {
    pub value: T,
    pub grad: Tensor<T>,
    pub margin: T,
}

/// Gradient of the Lovász extension of the Jaccard loss with respect to
/// errors sorted in descending order. `gt_sorted` holds the ground-truth
/// labels in that order.
pub fn lovasz_grad<T: Real>(gt_sorted: &[bool]) -> Vec<T> {
    let positives = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut grad = Vec::with_capacity(gt_sorted.len());
    let mut cum_pos = 0.0;
    let mut cum_neg = 0.0;
    let mut prev = 0.0;
    for &g in gt_sorted {
        if g {
            cum_pos += 1.0;
        } else {
            cum_neg += 1.0;
        }
        let intersection = positives - cum_pos;
        let union = positives + cum_neg;
        let jaccard = 1.0 - intersection / union;
        grad.push(T::of(jaccard - prev));
        prev = jaccard;
    }
    grad
}

fn check_pair<T: Real>(logits: &Tensor<T>, mask: &Tensor<T>) -> Result<Shape> {
    let s = logits.shape();
    if s.c != 1 {
        return Err(shape_err!("loss expects single-channel logits, got {s}"));
    }
    mask.expect_shape(s, "loss mask")?;
    if s.plane() == 0 || s.n == 0 {
        return Err(Error::Argument("loss on an empty image".into()));
    }
    if mask
        .data()
        .iter()
        .any(|&m| m != T::zero() && m != T::one())
    {
        return Err(Error::Argument("loss mask must be binary".into()));
    }
    Ok(s)
}

/// Per-image Lovász hinge, averaged over the batch, with its gradient.
pub fn lovasz_hinge_eval<T: Real>(logits: &Tensor<T>, mask: &Tensor<T>) -> Result<LossEval<T>> {
    let s = check_pair(logits, mask)?;
    let batch = T::of(s.n as f64);
    let mut total = T::zero();
    let mut grad = Tensor::zeros(s);
    let mut margin = T::infinity();
    let mut order: Vec<usize> = Vec::with_capacity(s.plane());
    for n in 0..s.n {
        let x = logits.sample(n);
        let m = mask.sample(n);
        let signs: Vec<T> = m.iter().map(|&v| v + v - T::one()).collect();
        let errors: Vec<T> = x
            .iter()
            .zip(&signs)
            .map(|(&xi, &yi)| T::one() - xi * yi)
            .collect();
        order.clear();
        order.extend(0..errors.len());
        // stable: ties keep pixel order
        order.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap_or(std::cmp::Ordering::Equal));
        let gt_sorted: Vec<bool> = order.iter().map(|&i| m[i] == T::one()).collect();
        let g = lovasz_grad::<T>(&gt_sorted);
        let gi = grad.sample_mut(n);
        for (k, &i) in order.iter().enumerate() {
            let e = errors[i];
            margin = margin.min(e.abs());
            // reordering equal-label pixels leaves the sorted labels intact
            if k + 1 < order.len() && gt_sorted[k] != gt_sorted[k + 1] {
                margin = margin.min(e - errors[order[k + 1]]);
            }
            if e > T::zero() {
                total += e * g[k];
                gi[i] = -signs[i] * g[k] / batch;
            }
        }
    }
    Ok(LossEval {
        value: total / batch,
        grad,
        margin,
    })
}

pub fn lovasz_hinge<T: Real>(logits: &Tensor<T>, mask: &Tensor<T>) -> Result<T> {
    Ok(lovasz_hinge_eval(logits, mask)?.value)
}

/// Mean binary cross-entropy over all pixels, in logit form.
pub fn bce_eval<T: Real>(logits: &Tensor<T>, mask: &Tensor<T>) -> Result<LossEval<T>> {
    let s = check_pair(logits, mask)?;
    let count = T::of(s.numel() as f64);
    let mut total = T::zero();
    let mut grad = Tensor::zeros(s);
    for ((g, &x), &m) in grad.data_mut().iter_mut().zip(logits.data()).zip(mask.data()) {
        total += x.max(T::zero()) - x * m + (-x.abs()).exp().ln_1p();
        *g = (sigmoid(x) - m) / count;
    }
    Ok(LossEval {
        value: total / count,
        grad,
        margin: T::infinity(),
    })
}

pub fn bce<T: Real>(logits: &Tensor<T>, mask: &Tensor<T>) -> Result<T> {
    Ok(bce_eval(logits, mask)?.value)
}

pub fn loss_eval<T: Real>(kind: LossKind, logits: &Tensor<T>, mask: &Tensor<T>) -> Result<LossEval<T>> {
    match kind {
        LossKind::LovaszHinge => lovasz_hinge_eval(logits, mask),
        LossKind::Bce => bce_eval(logits, mask),
    }
}

/// Side-output maps (already at mask resolution), the mask, and the
/// per-level weights.
#[derive(Clone, Debug)]
pub struct SupervisionBundle<T> {
    pub maps: Vec<Tensor<T>>,
    pub mask: Tensor<T>,
    pub weights: Vec<T>,
}

impl<T: Real> SupervisionBundle<T> {
    pub fn validate(&self) -> Result<()> {
        if self.maps.len() != self.weights.len() {
            return Err(Error::Argument(format!(
                "{} maps but {} weights",
                self.maps.len(),
                self.weights.len()
            )));
        }
        for m in &self.maps {
            m.expect_shape(self.mask.shape(), "supervision map")?;
        }
        Ok(())
    }
}

/// `sum_s w_s * L_s` over the side outputs.
pub fn total_loss<T: Real>(bundle: &SupervisionBundle<T>, kind: LossKind) -> Result<T> {
    bundle.validate()?;
    let mut total = T::zero();
    for (map, &w) in bundle.maps.iter().zip(&bundle.weights) {
        total += w * loss_eval(kind, map, &bundle.mask)?.value;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(h: usize, w: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 1, h, w), v.to_vec()).unwrap()
    }

    #[test]
    fn only_mixed_label_ties_are_kinks() {
        // errors 0.5, 0.5 on two mirror pixels, 1.5 on a background pixel
        let same = lovasz_hinge_eval(&t(1, 3, &[0.5, 0.5, 0.5]), &t(1, 3, &[1.0, 1.0, 0.0])).unwrap();
        assert_eq!(same.margin, 0.5);
        let mixed = lovasz_hinge_eval(&t(1, 2, &[0.5, -0.5]), &t(1, 2, &[1.0, 0.0])).unwrap();
        assert_eq!(mixed.margin, 0.0);
    }

    #[test]
    fn lovasz_grad_hand_cases() {
        assert_eq!(lovasz_grad::<f64>(&[true]), vec![1.0]);
        assert_eq!(lovasz_grad::<f64>(&[false, true]), vec![0.5, 0.5]);
        assert_eq!(lovasz_grad::<f64>(&[false, false, false]), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn lovasz_single_pixel_cases() {
        assert_eq!(lovasz_hinge(&t(1, 1, &[2.0]), &t(1, 1, &[1.0])).unwrap(), 0.0);
        assert_eq!(lovasz_hinge(&t(1, 1, &[-1.0]), &t(1, 1, &[1.0])).unwrap(), 2.0);
    }

    #[test]
    fn lovasz_two_pixel_case() {
        // errors [2, 4] sort to [4 (label 0), 2 (label 1)], g = [0.5, 0.5]
        let v = lovasz_hinge(&t(1, 2, &[-1.0, 3.0]), &t(1, 2, &[1.0, 0.0])).unwrap();
        assert_eq!(v, 3.0);
    }

    #[test]
    fn lovasz_averages_per_image() {
        let logits = Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![-1.0, 2.0]).unwrap();
        let mask = Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![1.0, 1.0]).unwrap();
        assert_eq!(lovasz_hinge(&logits, &mask).unwrap(), 1.0);
    }

    #[test]
    fn loss_rejects_bad_inputs() {
        let l = t(1, 2, &[0.0, 0.0]);
        assert!(lovasz_hinge(&l, &t(1, 2, &[0.5, 1.0])).is_err());
        assert!(lovasz_hinge(&l, &t(2, 1, &[0.0, 1.0])).is_err());
        let empty = Tensor::<f64>::zeros(Shape::new(1, 1, 0, 0));
        assert!(lovasz_hinge(&empty, &empty).is_err());
    }

    #[test]
    fn bce_scalar_cases() {
        let half = bce(&t(1, 2, &[0.0, 0.0]), &t(1, 2, &[0.0, 1.0])).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce(&t(1, 1, &[20.0]), &t(1, 1, &[1.0])).unwrap() < 1e-8);
        let v = bce(&t(1, 1, &[-1.0]), &t(1, 1, &[1.0])).unwrap();
        assert!((v - (1.0 + 1f64.exp()).ln()).abs() < 1e-15);
        assert!((v - 1.3133).abs() < 1e-4);
    }

    #[test]
    fn total_loss_weights_levels() {
        let mask = t(1, 2, &[1.0, 0.0]);
        let maps = vec![
            t(1, 2, &[-1.0, 3.0]),
            t(1, 2, &[0.5, 0.2]),
            t(1, 2, &[2.0, -2.0]),
            t(1, 2, &[-0.3, 0.1]),
        ];
        let single: Vec<f64> = maps.iter().map(|m| lovasz_hinge(m, &mask).unwrap()).collect();
        let same = SupervisionBundle {
            maps: vec![maps[0].clone(); 4],
            mask: mask.clone(),
            weights: vec![1.0; 4],
        };
        assert_eq!(total_loss(&same, LossKind::LovaszHinge).unwrap(), 4.0 * single[0]);
        let first_only = SupervisionBundle {
            maps: maps.clone(),
            mask: mask.clone(),
            weights: vec![1.0, 0.0, 0.0, 0.0],
        };
        assert_eq!(total_loss(&first_only, LossKind::LovaszHinge).unwrap(), single[0]);
        let weighted = SupervisionBundle {
            maps,
            mask,
            weights: vec![2.0, 1.0, 1.0, 1.0],
        };
        let expect = 2.0 * single[0] + single[1] + single[2] + single[3];
        assert!((total_loss(&weighted, LossKind::LovaszHinge).unwrap() - expect).abs() < 1e-15);
    }
}
