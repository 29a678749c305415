//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Finite-difference step.
    pub step: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that entries whose true
    /// gradient is zero are judged by absolute error.
    pub floor: f64,
    /// Smallest admissible kink margin, in steps. One coordinate can move
    /// many activations, each by more than the step itself.
    pub clearance: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            clearance: 10.0,
        }
    }
}

/// A scalar evaluation together with its distance to the nearest kink.
#[derive(Clone, Copy, Debug)]
pub struct Probe {
    pub value: f64,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: usize,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn relative(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares `analytic` against central differences of `f` at `point`, over
/// `coords` (all coordinates when `None`).
pub fn grad_check(
    f: impl Fn(&[f64]) -> Result<Probe>,
    point: &[f64],
    analytic: &[f64],
    coords: Option<&[usize]>,
    opts: GradCheck,
) -> Result<GradReport> {
    if analytic.len() != point.len() {
        return Err(Error::Shape(format!(
            "{} analytic entries for a {}-dimensional point",
            analytic.len(),
            point.len()
        )));
    }
    let base = f(point)?;
    let required = opts.clearance * opts.step;
    if base.margin < required {
        return Err(Error::NonDifferentiable {
            margin: base.margin,
            required,
        });
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut x = point.to_vec();
    let mut report = GradReport {
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: 0,
    };
    for &i in coords {
        let orig = x[i];
        x[i] = orig + opts.step;
        let plus = f(&x)?.value;
        x[i] = orig - opts.step;
        let minus = f(&x)?.value;
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let rel = relative(analytic[i], numeric, opts.floor);
        report.max_abs_error = report.max_abs_error.max((analytic[i] - numeric).abs());
        if rel > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = rel;
            report.worst = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Deterministic weights in `[-1, 1)` used to reduce tensor outputs to a
/// scalar (`sum(r * y)`), so every output element contributes.
pub fn projection(len: usize, salt: u64) -> Vec<f64> {
    let mut state = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..len)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}

fn project(graph: &Graph<f64>, out: Var, r: &[f64]) -> f64 {
    graph.value(out).data().iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Checks the input gradient of a tensor-valued graph function `y = op(x)`
/// through the projected scalar `sum(r * y)`.
pub fn check_input_gradient(
    op: impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
    x: &Tensor<f64>,
    mode: Mode,
    opts: GradCheck,
) -> Result<GradReport> {
    let mut g = Graph::new(mode);
    let xv = g.input(x.clone());
    let out = op(&mut g, xv)?;
    let r = projection(g.value(out).numel(), 17);
    let seed = Tensor::from_vec(g.shape(out), r.clone())?;
    let grads = g.backward_with(out, seed)?;
    let analytic = grads
        .of(xv)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let shape = x.shape();
    grad_check(
        |p| {
            let mut g = Graph::new(mode);
            let xv = g.input(Tensor::from_vec(shape, p.to_vec())?);
            let out = op(&mut g, xv)?;
            Ok(Probe {
                value: project(&g, out, &r),
                margin: g.kink_margin(),
            })
        },
        x.data(),
        &analytic,
        None,
        opts,
    )
}

/// Checks parameter gradients of a scalar-valued graph function. At most
/// `per_tensor` coordinates of each parameter are probed (evenly strided).
pub fn check_param_gradients(
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    store: &ParamStore<f64>,
    mode: Mode,
    per_tensor: usize,
    opts: GradCheck,
) -> Result<Vec<(String, GradReport)>> {
    let mut g = Graph::new(mode);
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    let mut with_grads = store.clone();
    with_grads.clear_grads();
    grads.accumulate_into(&g, &mut with_grads)?;

    let mut reports = Vec::new();
    for (name, param) in with_grads.iter() {
        let Some(analytic) = param.value.grad() else {
            continue;
        };
        let len = analytic.len();
        let stride = len.div_ceil(per_tensor.max(1)).max(1);
        let coords: Vec<usize> = (0..len).step_by(stride).collect();
        let report = grad_check(
            |p| {
                let mut s = store.clone();
                s.param_mut(name)?.value.data_mut().copy_from_slice(p);
                let mut g = Graph::new(mode);
                let out = f(&mut g, &s)?;
                Ok(Probe {
                    value: g.value(out).data()[0],
                    margin: g.kink_margin(),
                })
            },
            param.value.data(),
            analytic,
            Some(&coords),
            opts,
        )?;
        reports.push((name.to_string(), report));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero_matches_quarter() {
        let f = |x: &[f64]| {
            Ok(Probe {
                value: crate::ops::sigmoid(x[0]),
                margin: f64::INFINITY,
            })
        };
        let r = grad_check(f, &[0.0], &[0.25], None, GradCheck::default()).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let f = |x: &[f64]| {
            Ok(Probe {
                value: x[0] * x[0],
                margin: f64::INFINITY,
            })
        };
        let r = grad_check(f, &[1.5], &[2.0], None, GradCheck::default()).unwrap();
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn rejects_points_near_a_kink() {
        let f = |x: &[f64]| {
            Ok(Probe {
                value: x[0].abs(),
                margin: x[0].abs(),
            })
        };
        let err = grad_check(f, &[1e-7], &[1.0], None, GradCheck::default()).unwrap_err();
        assert!(matches!(err, Error::NonDifferentiable { .. }));
        // clear of the step but not of the required clearance
        let err = grad_check(f, &[5e-5], &[1.0], None, GradCheck::default()).unwrap_err();
        assert!(matches!(err, Error::NonDifferentiable { .. }));
    }

    #[test]
    fn projection_is_deterministic_and_bounded() {
        let a = projection(100, 3);
        assert_eq!(a, projection(100, 3));
        assert!(a.iter().all(|v| (-1.0..1.0).contains(v)));
    }
}
