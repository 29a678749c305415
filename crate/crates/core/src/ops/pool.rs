//! Global (per-channel) and channel-wise (per-site) reductions.

use crate::real::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    /// Mean over `H x W`, one value per channel.
    GlobalAvg,
    GlobalMax,
    /// Mean over `C`, one value per spatial site.
    ChannelAvg,
    ChannelMax,
}

impl PoolKind {
    pub fn output_shape(self, s: Shape) -> Shape {
        match self {
            PoolKind::GlobalAvg | PoolKind::GlobalMax => s.with_hw(1, 1),
            PoolKind::ChannelAvg | PoolKind::ChannelMax => s.with_c(1),
        }
    }

    fn is_max(self) -> bool {
        matches!(self, PoolKind::GlobalMax | PoolKind::ChannelMax)
    }
}

/// Forward result with what the backward pass and kink detection need.
#[derive(Clone, Debug)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    /// Flat input index of each selected maximum (max kinds only).
    pub argmax: Vec<usize>,
    /// Smallest gap between a maximum and the runner-up in its window,
    /// ignoring ties at exactly zero.
    pub margin: T,
}

pub fn pool<T: Real>(input: &Tensor<T>, kind: PoolKind) -> Tensor<T> {
    pool_with_indices(input, kind).output
}

pub fn pool_with_indices<T: Real>(input: &Tensor<T>, kind: PoolKind) -> Pooled<T> {
    let s = input.shape();
    let out_shape = kind.output_shape(s);
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = Vec::new();
    let mut margin = T::infinity();
    let data = input.data();
    let plane = s.plane();

    // Each output reduces a strided window of the input.
    let mut reduce = |indices: &mut dyn Iterator<Item = usize>, len: usize| -> T {
        if kind.is_max() {
            let mut best = T::neg_infinity();
            let mut second = T::neg_infinity();
            let mut at = 0;
            for i in indices {
                let v = data[i];
                if v > best {
                    second = best;
                    best = v;
                    at = i;
                } else if v > second {
                    second = v;
                }
            }
            // ties between exact zeros are clamped relu outputs, which a
            // perturbation inside the relu margin does not move
            if len > 1 && !(best == second && best == T::zero()) {
                margin = margin.min(best - second);
            }
            argmax.push(at);
            best
        } else {
            indices.map(|i| data[i]).sum::<T>() / T::of(len as f64)
        }
    };

    match kind {
        PoolKind::GlobalAvg | PoolKind::GlobalMax => {
            for n in 0..s.n {
                for c in 0..s.c {
                    let base = (n * s.c + c) * plane;
                    let v = reduce(&mut (base..base + plane), plane);
                    out.set(n, c, 0, 0, v);
                }
            }
        }
        PoolKind::ChannelAvg | PoolKind::ChannelMax => {
            for n in 0..s.n {
                for p in 0..plane {
                    let base = n * s.c * plane + p;
                    let v = reduce(&mut (0..s.c).map(|c| base + c * plane), s.c);
                    out.sample_mut(n)[p] = v;
                }
            }
        }
    }
    Pooled {
        output: out,
        argmax,
        margin,
    }
}

pub fn pool_backward<T: Real>(
    input_shape: Shape,
    kind: PoolKind,
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let s = input_shape;
    let mut g = Tensor::zeros(s);
    let plane = s.plane();
    if kind.is_max() {
        for (&i, &go) in argmax.iter().zip(grad_out.data()) {
            g.data_mut()[i] += go;
        }
        return g;
    }
    match kind {
        PoolKind::GlobalAvg => {
            let k = T::one() / T::of(plane as f64);
            for n in 0..s.n {
                for c in 0..s.c {
                    let v = grad_out.at(n, c, 0, 0) * k;
                    g.plane_mut(n, c).fill(v);
                }
            }
        }
        PoolKind::ChannelAvg => {
            let k = T::one() / T::of(s.c as f64);
            for n in 0..s.n {
                let go = grad_out.sample(n).to_vec();
                for c in 0..s.c {
                    for (d, &v) in g.plane_mut(n, c).iter_mut().zip(&go) {
                        *d = v * k;
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_reductions() {
        let c = Tensor::<f64>::full(Shape::new(1, 2, 3, 3), 1.75);
        assert!(pool(&c, PoolKind::GlobalAvg).data().iter().all(|&v| v == 1.75));
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pool(&x, PoolKind::GlobalMax).data(), &[4.0]);
        assert_eq!(pool(&x, PoolKind::GlobalAvg).data(), &[2.5]);
    }

    #[test]
    fn channel_reductions() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 2, 1, 3), |_, c, _, w| (c as f64) * (w as f64 + 1.0));
        assert_eq!(pool(&x, PoolKind::ChannelAvg).data(), &[0.5, 1.0, 1.5]);
        assert_eq!(pool(&x, PoolKind::ChannelMax).data(), &[1.0, 2.0, 3.0]);
        let site = Tensor::<f64>::from_vec(Shape::new(1, 2, 1, 1), vec![0.0, 1.0]).unwrap();
        assert_eq!(pool(&site, PoolKind::ChannelAvg).data(), &[0.5]);
    }

    #[test]
    fn max_backward_routes_to_argmax_and_reports_gap() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 5.0, 4.5, 2.0]).unwrap();
        let p = pool_with_indices(&x, PoolKind::GlobalMax);
        assert_eq!(p.argmax, vec![1]);
        assert_eq!(p.margin, 0.5);
        let g = pool_backward(x.shape(), PoolKind::GlobalMax, &p.argmax, &Tensor::full(Shape::new(1, 1, 1, 1), 2.0));
        assert_eq!(g.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn only_nonzero_ties_are_kinks() {
        let zeros = Tensor::<f64>::from_vec(Shape::new(1, 3, 1, 1), vec![0.0, 0.0, -1.0]).unwrap();
        assert_eq!(pool_with_indices(&zeros, PoolKind::ChannelMax).margin, f64::INFINITY);
        let tie = Tensor::<f64>::from_vec(Shape::new(1, 3, 1, 1), vec![0.5, 0.5, 0.0]).unwrap();
        assert_eq!(pool_with_indices(&tie, PoolKind::ChannelMax).margin, 0.0);
    }

    #[test]
    fn avg_backward_spreads_evenly() {
        let s = Shape::new(1, 4, 1, 2);
        let go = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 2), vec![4.0, 8.0]).unwrap();
        let g = pool_backward(s, PoolKind::ChannelAvg, &[], &go);
        for c in 0..4 {
            assert_eq!(g.plane(0, c), &[1.0, 2.0]);
        }
    }
}
