//! IoU, pixel accuracy, F-beta, MAE and balance error rate.
//!
//! IoU, accuracy and BER are computed from confusion counts summed over the
//! whole evaluation set; F-beta and MAE are per-image values averaged over
//! images. Probabilities are binarized at 0.5 (`>=` counts as mirror).

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

pub const BETA_SQ: f64 = 0.3;
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    /// Mirror pixels in the ground truth.
    pub fn positives(&self) -> u64 {
        self.true_pos + self.false_neg
    }

    /// Non-mirror pixels in the ground truth.
    pub fn negatives(&self) -> u64 {
        self.true_neg + self.false_pos
    }

    pub fn total(&self) -> u64 {
        self.positives() + self.negatives()
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            true_pos: self.true_pos + o.true_pos,
            true_neg: self.true_neg + o.true_neg,
            false_pos: self.false_pos + o.false_pos,
            false_neg: self.false_neg + o.false_neg,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

fn is_on<T: Real>(v: T) -> bool {
    v >= T::of(THRESHOLD)
}

/// Pixel counts of a predicted mask against a ground-truth mask.
pub fn confusion<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(shape_err!("prediction {} vs ground truth {}", pred.shape(), gt.shape()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (is_on(p), is_on(g)) {
            (true, true) => c.true_pos += 1,
            (false, false) => c.true_neg += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
        }
    }
    Ok(c)
}

/// Mirror-class IoU (1 when prediction and ground truth are both empty) and
/// pixel accuracy.
pub fn iou_accuracy(c: &ConfusionCounts) -> (f64, f64) {
    let union = c.true_pos + c.false_pos + c.false_neg;
    let iou = if union == 0 {
        1.0
    } else {
        c.true_pos as f64 / union as f64
    };
    let total = c.total();
    let acc = if total == 0 {
        1.0
    } else {
        (c.true_pos + c.true_neg) as f64 / total as f64
    };
    (iou, acc)
}

/// Weighted harmonic mean of precision and recall; 0 when there are no true
/// positives.
pub fn f_beta(c: &ConfusionCounts, beta_sq: f64) -> Result<f64> {
    if !(beta_sq.is_finite() && beta_sq > 0.0) {
        return Err(Error::Argument(format!("beta squared must be positive, got {beta_sq}")));
    }
    if c.true_pos == 0 {
        return Ok(0.0);
    }
    let precision = c.true_pos as f64 / (c.true_pos + c.false_pos) as f64;
    let recall = c.true_pos as f64 / (c.true_pos + c.false_neg) as f64;
    Ok((1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall))
}

/// Mean absolute difference between a probability map and a binary mask.
pub fn mae<T: Real>(prob: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    if prob.shape() != gt.shape() {
        return Err(shape_err!("prediction {} vs ground truth {}", prob.shape(), gt.shape()));
    }
    if prob.numel() == 0 {
        return Err(Error::Undefined("mae of an empty map".into()));
    }
    let sum: f64 = prob
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let g = if is_on(g) { 1.0 } else { 0.0 };
            (p.as_f64() - g).abs()
        })
        .sum();
    Ok(sum / prob.numel() as f64)
}

/// Balance error rate in percent.
pub fn ber(c: &ConfusionCounts) -> Result<f64> {
    let (np, nn) = (c.positives(), c.negatives());
    if np == 0 || nn == 0 {
        return Err(Error::Undefined(format!(
            "balance error rate needs both classes ({np} mirror, {nn} non-mirror pixels)"
        )));
    }
    let tpr = c.true_pos as f64 / np as f64;
    let tnr = c.true_neg as f64 / nn as f64;
    Ok(100.0 * (1.0 - 0.5 * (tpr + tnr)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageScores {
    pub counts: ConfusionCounts,
    pub f_beta: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub iou: f64,
    pub accuracy: f64,
    pub f_beta: f64,
    pub mae: f64,
    pub ber: f64,
    pub counts: ConfusionCounts,
    pub per_image: Vec<ImageScores>,
}

impl MetricsReport {
    pub fn n_images(&self) -> usize {
        self.per_image.len()
    }

    /// One `key=value` line per metric.
    pub fn records(&self) -> String {
        format!(
            "iou={:.6}\nacc={:.6}\nf_beta={:.6}\nmae={:.6}\nber={:.4}\nn_images={}\n",
            self.iou,
            self.accuracy,
            self.f_beta,
            self.mae,
            self.ber,
            self.n_images()
        )
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>10}", "metric", "value");
        for (k, v) in [
            ("IoU", self.iou),
            ("Acc", self.accuracy),
            ("F_beta", self.f_beta),
            ("MAE", self.mae),
            ("BER", self.ber),
        ] {
            let _ = writeln!(s, "{k:<8} {v:>10.4}");
        }
        let _ = writeln!(s, "{:<8} {:>10}", "images", self.n_images());
        s
    }
}

/// Collects per-image results in insertion order.
#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    per_image: Vec<ImageScores>,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds every image of `(N, 1, H, W)` probability maps and masks.
    pub fn add<T: Real>(&mut self, prob: &Tensor<T>, gt: &Tensor<T>) -> Result<()> {
        let s = prob.shape();
        if s != gt.shape() || s.c != 1 {
            return Err(shape_err!("prediction {s} vs ground truth {}", gt.shape()));
        }
        let single = Shape::new(1, 1, s.h, s.w);
        for n in 0..s.n {
            let p = Tensor::from_vec(single, prob.sample(n).to_vec())?;
            let g = Tensor::from_vec(single, gt.sample(n).to_vec())?;
            let counts = confusion(&p, &g)?;
            self.per_image.push(ImageScores {
                counts,
                f_beta: f_beta(&counts, BETA_SQ)?,
                mae: mae(&p, &g)?,
            });
        }
        Ok(())
    }

    pub fn finish(self) -> Result<MetricsReport> {
        if self.per_image.is_empty() {
            return Err(Error::Data("no images to evaluate".into()));
        }
        let counts = self
            .per_image
            .iter()
            .fold(ConfusionCounts::default(), |a, s| a + s.counts);
        let (iou, accuracy) = iou_accuracy(&counts);
        let n = self.per_image.len() as f64;
        Ok(MetricsReport {
            iou,
            accuracy,
            f_beta: self.per_image.iter().map(|s| s.f_beta).sum::<f64>() / n,
            mae: self.per_image.iter().map(|s| s.mae).sum::<f64>() / n,
            ber: ber(&counts)?,
            counts,
            per_image: self.per_image,
        })
    }
}
