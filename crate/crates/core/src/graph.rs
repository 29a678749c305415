//! Recording tape over the fixed primitive set.
//!
//! Every builder method evaluates its primitive eagerly and records what the
//! backward pass needs. [`Graph::backward`] replays the tape in reverse,
//! calling each primitive's hand-written adjoint.

use std::collections::{BTreeMap, HashMap};

use crate::error::{shape_err, Error, Result};
use crate::loss::{loss_eval, LossKind};
use crate::ops::{
    self, Activation, BatchNormCache, BinaryOp, ConvGeometry, PoolKind,
};
use crate::params::{NormStatsUpdate, ParamStore};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics in normalization layers.
    Eval,
}

enum Op<T> {
    Input,
    Param(String),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geometry: ConvGeometry,
    },
    NormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache<T>,
    },
    NormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        var: Vec<T>,
        epsilon: T,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Binary {
        a: Var,
        b: Var,
        op: BinaryOp,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    Resize {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    Loss {
        x: Var,
        grad: Tensor<T>,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    epsilon: T,
    kink_margin: T,
    params: HashMap<String, Var>,
    norm_updates: Vec<NormStatsUpdate<T>>,
    op_counts: BTreeMap<&'static str, usize>,
}

impl<T: Real> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            epsilon: T::of(ops::norm::DEFAULT_EPSILON),
            kink_margin: T::infinity(),
            params: HashMap::new(),
            norm_updates: Vec::new(),
            op_counts: BTreeMap::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Var {
        *self.op_counts.entry(name).or_insert(0) += 1;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Smallest distance, over every recorded relu input, max-pool window and
    /// sorted loss error, to a point where the graph is not differentiable.
    pub fn kink_margin(&self) -> T {
        self.kink_margin
    }

    /// Number of times each primitive was recorded.
    pub fn op_counts(&self) -> &BTreeMap<&'static str, usize> {
        &self.op_counts
    }

    pub fn op_count(&self, name: &str) -> usize {
        self.op_counts.get(name).copied().unwrap_or(0)
    }

    /// Batch statistics seen by training-mode normalization layers.
    pub fn take_norm_updates(&mut self) -> Vec<NormStatsUpdate<T>> {
        std::mem::take(&mut self.norm_updates)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, "input")
    }

    /// Leaf for a stored parameter; repeated requests share one leaf.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.push(value, Op::Param(name.to_string()), "param");
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geometry: ConvGeometry) -> Result<Var> {
        let bias = b.map(|b| self.value(b).data());
        let out = ops::conv2d(self.value(x), self.value(w), bias, geometry)?;
        Ok(self.push(out, Op::Conv { x, w, b, geometry }, "conv2d"))
    }

    /// Batch norm with parameters `{prefix}.gamma|beta|running_mean|running_var`.
    pub fn batch_norm(&mut self, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(store, &format!("{prefix}.gamma"))?;
        let beta = self.param(store, &format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (out, cache) = ops::batch_norm_train(
                    self.value(x),
                    self.value(gamma).data(),
                    self.value(beta).data(),
                    self.epsilon,
                )?;
                self.norm_updates.push(NormStatsUpdate {
                    prefix: prefix.to_string(),
                    cache: cache.clone(),
                });
                Ok(self.push(out, Op::NormTrain { x, gamma, beta, cache }, "batch_norm"))
            }
            Mode::Eval => {
                let mean = store.get(&format!("{prefix}.running_mean"))?.data().to_vec();
                let var = store.get(&format!("{prefix}.running_var"))?.data().to_vec();
                let out = ops::batch_norm_infer(
                    self.value(x),
                    self.value(gamma).data(),
                    self.value(beta).data(),
                    &mean,
                    &var,
                    self.epsilon,
                )?;
                let epsilon = self.epsilon;
                Ok(self.push(
                    out,
                    Op::NormEval {
                        x,
                        gamma,
                        beta,
                        mean,
                        var,
                        epsilon,
                    },
                    "batch_norm",
                ))
            }
        }
    }

    pub fn activate(&mut self, x: Var, kind: Activation) -> Var {
        if kind == Activation::Relu {
            let m = ops::relu_margin(self.value(x));
            self.kink_margin = self.kink_margin.min(m);
        }
        let out = ops::activate(self.value(x), kind);
        let name = match kind {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        };
        self.push(out, Op::Act { x, kind }, name)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Sigmoid)
    }

    pub fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let out = ops::binary(self.value(a), self.value(b), op)?;
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        };
        Ok(self.push(out, Op::Binary { a, b, op }, name))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn pool(&mut self, x: Var, kind: PoolKind) -> Var {
        let p = ops::pool_with_indices(self.value(x), kind);
        self.kink_margin = self.kink_margin.min(p.margin);
        self.push(
            p.output,
            Op::Pool {
                x,
                kind,
                argmax: p.argmax,
            },
            "pool",
        )
    }

    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let out = ops::upsample_bilinear(self.value(x), h, w)?;
        Ok(self.push(out, Op::Resize { x }, "upsample_bilinear"))
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&vals)?;
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }, "concat"))
    }

    /// Scalar loss of single-channel logits `x` against a binary mask.
    pub fn loss(&mut self, kind: LossKind, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let eval = loss_eval(kind, self.value(x), mask)?;
        self.kink_margin = self.kink_margin.min(eval.margin);
        let value = Tensor::full(Shape::new(1, 1, 1, 1), eval.value);
        Ok(self.push(value, Op::Loss { x, grad: eval.grad }, kind.name()))
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let val = self.value(v);
            if val.numel() != 1 {
                return Err(shape_err!("weighted_sum term has shape {}", val.shape()));
            }
            total += w * val.data()[0];
        }
        let value = Tensor::full(Shape::new(1, 1, 1, 1), total);
        Ok(self.push(
            value,
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            "weighted_sum",
        ))
    }

    /// Reverse pass seeded with `seed` as the gradient of `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        seed.expect_shape(self.shape(output), "backward seed")?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        fn add_into<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
            match slot {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, &b)| *a += b),
                None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param(_) => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::Conv { x, w, b, geometry } => {
                    let g = ops::conv2d_backward(self.value(*x), self.value(*w), *geometry, &gy)?;
                    add_into(&mut grads[x.0], g.input);
                    add_into(&mut grads[w.0], g.weight);
                    if let Some(b) = b {
                        let bs = self.shape(*b);
                        add_into(&mut grads[b.0], Tensor::from_vec(bs, g.bias)?);
                    }
                }
                Op::NormTrain { x, gamma, beta, cache } => {
                    let gam = self.value(*gamma).data();
                    let g = ops::batch_norm_train_backward(&gy, gam, cache)?;
                    add_into(&mut grads[x.0], g.input);
                    add_into(&mut grads[gamma.0], Tensor::from_vec(self.shape(*gamma), g.gamma)?);
                    add_into(&mut grads[beta.0], Tensor::from_vec(self.shape(*beta), g.beta)?);
                }
                Op::NormEval {
                    x,
                    gamma,
                    beta,
                    mean,
                    var,
                    epsilon,
                } => {
                    let g = ops::batch_norm_infer_backward(
                        self.value(*x),
                        &gy,
                        self.value(*gamma).data(),
                        mean,
                        var,
                        *epsilon,
                    )?;
                    add_into(&mut grads[x.0], g.input);
                    add_into(&mut grads[gamma.0], Tensor::from_vec(self.shape(*gamma), g.gamma)?);
                    add_into(&mut grads[beta.0], Tensor::from_vec(self.shape(*beta), g.beta)?);
                }
                Op::Act { x, kind } => {
                    let g = ops::activate_backward(self.value(*x), &node.value, &gy, *kind)?;
                    add_into(&mut grads[x.0], g);
                }
                Op::Binary { a, b, op } => {
                    let (ga, gb) = ops::binary_backward(self.value(*a), self.value(*b), &gy, *op)?;
                    add_into(&mut grads[a.0], ga);
                    add_into(&mut grads[b.0], gb);
                }
                Op::Pool { x, kind, argmax } => {
                    let g = ops::pool_backward(self.shape(*x), *kind, argmax, &gy);
                    add_into(&mut grads[x.0], g);
                }
                Op::Resize { x } => {
                    let g = ops::upsample_bilinear_backward(self.shape(*x), &gy)?;
                    add_into(&mut grads[x.0], g);
                }
                Op::Concat { xs } => {
                    let widths: Vec<usize> = xs.iter().map(|&v| self.shape(v).c).collect();
                    for (v, g) in xs.iter().zip(ops::split_channels(&gy, &widths)?) {
                        add_into(&mut grads[v.0], g);
                    }
                }
                Op::Loss { x, grad } => {
                    let k = gy.data()[0];
                    add_into(&mut grads[x.0], grad.scale(k));
                }
                Op::WeightedSum { terms } => {
                    let k = gy.data()[0];
                    for &(v, w) in terms {
                        add_into(&mut grads[v.0], Tensor::full(Shape::new(1, 1, 1, 1), k * w));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(Error::Argument(format!(
                "backward from non-scalar {}",
                self.shape(output)
            )));
        }
        self.backward_with(output, Tensor::full(Shape::new(1, 1, 1, 1), T::one()))
    }

    /// Parameter leaves recorded on this graph, by name.
    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.op {
            Op::Param(name) => Some((name.as_str(), Var(i))),
            _ => None,
        })
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Adds the gradient of every parameter leaf into the store. Parameters
    /// the output does not depend on receive an explicit zero gradient.
    pub fn accumulate_into(&self, graph: &Graph<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (name, v) in graph.param_vars() {
            match self.of(v) {
                Some(g) => store.accumulate_grad(name, g.data())?,
                None => {
                    let zeros = vec![T::zero(); graph.value(v).numel()];
                    store.accumulate_grad(name, &zeros)?
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rule_through_mul_and_sum() {
        let mut g = Graph::<f64>::new(Mode::Train);
        let a = g.input(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![2.0, 3.0]).unwrap());
        let b = g.input(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![5.0, 7.0]).unwrap());
        let p = g.mul(a, b).unwrap();
        let q = g.add(p, a).unwrap();
        let seed = Tensor::full(Shape::new(1, 1, 1, 2), 1.0);
        let grads = g.backward_with(q, seed).unwrap();
        assert_eq!(grads.of(a).unwrap().data(), &[6.0, 8.0]);
        assert_eq!(grads.of(b).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn shared_param_leaf_accumulates() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::full(Shape::new(1, 1, 1, 1), 3.0), crate::params::ParamKind::Weight);
        let mut g = Graph::new(Mode::Train);
        let w1 = g.param(&store, "w").unwrap();
        let w2 = g.param(&store, "w").unwrap();
        assert_eq!(w1, w2);
        let sq = g.mul(w1, w2).unwrap();
        let l = g.weighted_sum(&[(sq, 1.0)]).unwrap();
        let grads = g.backward(l).unwrap();
        grads.accumulate_into(&g, &mut store).unwrap();
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[6.0]);
    }

    #[test]
    fn counts_ops_and_tracks_relu_margin() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.input(Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-0.5, 0.25, 2.0]).unwrap());
        g.relu(x);
        g.relu(x);
        assert_eq!(g.op_count("relu"), 2);
        assert_eq!(g.op_count("lovasz_hinge"), 0);
        assert_eq!(g.kink_margin(), 0.25);
    }
}
