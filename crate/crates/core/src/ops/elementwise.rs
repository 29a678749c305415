//! Activations, broadcasting arithmetic and channel concatenation.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activate<T: Real>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => input.map(|x| x.max(T::zero())),
        Activation::Sigmoid => input.map(sigmoid),
    }
}

/// Gradient of [`activate`]; relu needs the input, sigmoid the output.
pub fn activate_backward<T: Real>(
    input: &Tensor<T>,
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
    kind: Activation,
) -> Result<Tensor<T>> {
    match kind {
        Activation::Relu => grad_out.zip_map(input, |g, x| if x > T::zero() { g } else { T::zero() }),
        Activation::Sigmoid => grad_out.zip_map(output, |g, y| g * y * (T::one() - y)),
    }
}

/// Smallest `|x|` over the tensor: distance of a relu input to its kink.
pub fn relu_margin<T: Real>(input: &Tensor<T>) -> T {
    input
        .data()
        .iter()
        .fold(T::infinity(), |m, &x| m.min(x.abs()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Result shape of broadcasting `a` against `b`. `N` and `C` broadcast from
/// 1; the spatial plane broadcasts only as a whole (`1 x 1`).
pub fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    fn dim(x: usize, y: usize) -> Option<usize> {
        match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        }
    }
    let plane = if (a.h, a.w) == (b.h, b.w) {
        Some((a.h, a.w))
    } else if (a.h, a.w) == (1, 1) {
        Some((b.h, b.w))
    } else if (b.h, b.w) == (1, 1) {
        Some((a.h, a.w))
    } else {
        None
    };
    match (dim(a.n, b.n), dim(a.c, b.c), plane) {
        (Some(n), Some(c), Some((h, w))) => Ok(Shape::new(n, c, h, w)),
        _ => Err(shape_err!("cannot broadcast {a} with {b}")),
    }
}

fn plane_of<T: Real>(t: &Tensor<T>, n: usize, c: usize) -> &[T] {
    let s = t.shape();
    t.plane(if s.n == 1 { 0 } else { n }, if s.c == 1 { 0 } else { c })
}

pub fn binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: BinaryOp) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let mut out = Tensor::zeros(out_shape);
    let f = |x: T, y: T| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
    };
    for n in 0..out_shape.n {
        for c in 0..out_shape.c {
            let pa = plane_of(a, n, c);
            let pb = plane_of(b, n, c);
            let dst = out.plane_mut(n, c);
            match (pa.len(), pb.len()) {
                (la, lb) if la == lb => {
                    for ((d, &x), &y) in dst.iter_mut().zip(pa).zip(pb) {
                        *d = f(x, y);
                    }
                }
                (1, _) => {
                    for (d, &y) in dst.iter_mut().zip(pb) {
                        *d = f(pa[0], y);
                    }
                }
                _ => {
                    for (d, &x) in dst.iter_mut().zip(pa) {
                        *d = f(x, pb[0]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Sums `grad` (of the broadcast shape) down to `target`.
pub fn reduce_to<T: Real>(grad: &Tensor<T>, target: Shape) -> Result<Tensor<T>> {
    let gs = grad.shape();
    if gs == target {
        return Ok(grad.clone());
    }
    if broadcast_shape(target, gs)? != gs {
        return Err(shape_err!("cannot reduce {gs} to {target}"));
    }
    let mut out = Tensor::zeros(target);
    for n in 0..gs.n {
        for c in 0..gs.c {
            let src = grad.plane(n, c);
            let dst = out.plane_mut(
                if target.n == 1 { 0 } else { n },
                if target.c == 1 { 0 } else { c },
            );
            if dst.len() == src.len() {
                dst.iter_mut().zip(src).for_each(|(d, &g)| *d += g);
            } else {
                dst[0] += src.iter().copied().sum::<T>();
            }
        }
    }
    Ok(out)
}

/// Gradients of [`binary`] with respect to both operands.
pub fn binary_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
    op: BinaryOp,
) -> Result<(Tensor<T>, Tensor<T>)> {
    match op {
        BinaryOp::Add => Ok((
            reduce_to(grad_out, a.shape())?,
            reduce_to(grad_out, b.shape())?,
        )),
        BinaryOp::Sub => Ok((
            reduce_to(grad_out, a.shape())?,
            reduce_to(&grad_out.scale(-T::one()), b.shape())?,
        )),
        BinaryOp::Mul => {
            let ga = binary(grad_out, b, BinaryOp::Mul)?;
            let gb = binary(grad_out, a, BinaryOp::Mul)?;
            Ok((reduce_to(&ga, a.shape())?, reduce_to(&gb, b.shape())?))
        }
    }
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| shape_err!("concat of zero tensors"))?
        .shape();
    let mut c_total = 0;
    for t in inputs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(shape_err!("concat: {s} does not match {first}"));
        }
        c_total += s.c;
    }
    let out_shape = first.with_c(c_total);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for t in inputs {
            data.extend_from_slice(t.sample(n));
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Splits a channel-concatenated gradient back into per-input pieces.
pub fn split_channels<T: Real>(grad: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let gs = grad.shape();
    if widths.iter().sum::<usize>() != gs.c {
        return Err(shape_err!("split of {gs} into widths {widths:?}"));
    }
    let mut parts: Vec<Vec<T>> = widths
        .iter()
        .map(|&c| Vec::with_capacity(gs.n * c * gs.plane()))
        .collect();
    for n in 0..gs.n {
        let sample = grad.sample(n);
        let mut off = 0;
        for (part, &c) in parts.iter_mut().zip(widths) {
            let len = c * gs.plane();
            part.extend_from_slice(&sample[off..off + len]);
            off += len;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(d, &c)| Tensor::from_vec(gs.with_c(c), d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_activations() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 3), vec![-3.0, 0.0, 2.0]).unwrap();
        let r = activate(&x, Activation::Relu);
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        let s = activate(&x, Activation::Sigmoid);
        assert_eq!(s.data()[1], 0.5);
        // 1 / (1 + e^-2)
        assert!((s.data()[2] - 0.880_797_077_977_882_4).abs() < 1e-15);
        assert!((s.data()[2] - 0.8808).abs() < 5e-5);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!(sigmoid(-100.0f32) > 0.0);
    }

    #[test]
    fn sigmoid_backward_at_zero_is_quarter() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 1));
        let y = activate(&x, Activation::Sigmoid);
        let g = activate_backward(&x, &y, &Tensor::full(x.shape(), 1.0), Activation::Sigmoid).unwrap();
        assert_eq!(g.data(), &[0.25]);
    }

    #[test]
    fn broadcast_rules() {
        let big = Shape::new(2, 3, 4, 5);
        assert_eq!(broadcast_shape(big, Shape::new(2, 3, 1, 1)).unwrap(), big);
        assert_eq!(broadcast_shape(Shape::new(2, 1, 4, 5), big).unwrap(), big);
        assert!(broadcast_shape(big, Shape::new(2, 3, 4, 1)).is_err());
        assert!(broadcast_shape(big, Shape::new(2, 2, 4, 5)).is_err());
    }

    #[test]
    fn channel_gate_multiplies_each_plane() {
        let x = Tensor::<f64>::full(Shape::new(1, 2, 2, 2), 3.0);
        let g = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.5, 2.0]).unwrap();
        let y = binary(&x, &g, BinaryOp::Mul).unwrap();
        assert!(y.plane(0, 0).iter().all(|&v| v == 1.5));
        assert!(y.plane(0, 1).iter().all(|&v| v == 6.0));
        let (ga, gb) = binary_backward(&x, &g, &Tensor::full(y.shape(), 1.0), BinaryOp::Mul).unwrap();
        assert!(ga.plane(0, 1).iter().all(|&v| v == 2.0));
        assert_eq!(gb.data(), &[12.0, 12.0]);
    }

    #[test]
    fn concat_then_split_restores_pieces() {
        let a = Tensor::<f64>::from_fn(Shape::new(2, 1, 2, 2), |n, _, h, w| (n * 10 + h * 2 + w) as f64);
        let b = Tensor::<f64>::from_fn(Shape::new(2, 3, 2, 2), |n, c, h, w| -((n * 100 + c * 10 + h * 2 + w) as f64));
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(2, 4, 2, 2));
        assert_eq!(cat.plane(1, 0), a.plane(1, 0));
        assert_eq!(cat.plane(1, 3), b.plane(1, 2));
        let parts = split_channels(&cat, &[1, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
