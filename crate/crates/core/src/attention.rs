//! Channel-then-spatial attention (CBAM form).
//!
//! Channel attention passes the global average- and max-pooled descriptors
//! through one shared two-layer MLP (reduction `r`, relu hidden layer), sums
//! them and applies a sigmoid. Spatial attention convolves the stacked
//! channel-mean and channel-max maps with a 7x7 kernel and applies a sigmoid.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::{ConvGeometry, PoolKind};
use crate::params::ParamStore;
use crate::real::Real;

pub const SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cbam {
    prefix: String,
    channels: usize,
    reduction: usize,
}

impl Cbam {
    pub fn new(prefix: impl Into<String>, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "attention reduction {reduction} must divide {channels} channels"
            )));
        }
        Ok(Cbam {
            prefix: prefix.into(),
            channels,
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}.weight", self.prefix)
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let hidden = self.channels / self.reduction;
        store.add_conv(rng, &format!("{}.mlp1", self.prefix), hidden, self.channels, 1, false);
        store.add_conv(rng, &format!("{}.mlp2", self.prefix), self.channels, hidden, 1, false);
        store.add_conv(rng, &format!("{}.spatial", self.prefix), 1, 2, SPATIAL_KERNEL, false);
    }

    fn mlp<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, v: Var) -> Result<Var> {
        let w1 = g.param(store, &self.name("mlp1"))?;
        let w2 = g.param(store, &self.name("mlp2"))?;
        let h = g.conv(v, w1, None, ConvGeometry::pointwise())?;
        let h = g.relu(h);
        g.conv(h, w2, None, ConvGeometry::pointwise())
    }

    /// Per-channel weights `(N, C, 1, 1)` in `(0, 1)`.
    pub fn channel_attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let c = g.shape(x).c;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "{}: expected {} channels, got {c}",
                self.prefix, self.channels
            )));
        }
        let avg = g.pool(x, PoolKind::GlobalAvg);
        let max = g.pool(x, PoolKind::GlobalMax);
        let a = self.mlp(g, store, avg)?;
        let m = self.mlp(g, store, max)?;
        let s = g.add(a, m)?;
        Ok(g.sigmoid(s))
    }

    /// Per-site weights `(N, 1, H, W)` in `(0, 1)`.
    pub fn spatial_attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let avg = g.pool(x, PoolKind::ChannelAvg);
        let max = g.pool(x, PoolKind::ChannelMax);
        let stacked = g.concat(&[avg, max])?;
        let w = g.param(store, &self.name("spatial"))?;
        let pad = SPATIAL_KERNEL / 2;
        let logits = g.conv(
            stacked,
            w,
            None,
            ConvGeometry {
                stride: 1,
                dilation: 1,
                padding: pad,
            },
        )?;
        Ok(g.sigmoid(logits))
    }

    /// `x * channel_attention(x)`, then scaled by the spatial attention of
    /// that product.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let ca = self.channel_attention(g, store, x)?;
        let refined = g.mul(x, ca)?;
        let sa = self.spatial_attention(g, store, refined)?;
        g.mul(refined, sa)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use crate::ops::sigmoid;
    use crate::tensor::{Shape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(c: usize, r: usize, seed: u64) -> (Cbam, ParamStore<f64>) {
        let att = Cbam::new("att", c, r).unwrap();
        let mut store = ParamStore::new();
        att.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        (att, store)
    }

    fn zero_all(store: &mut ParamStore<f64>) {
        for (_, p) in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
    }

    fn wavy(shape: Shape) -> Tensor<f64> {
        Tensor::from_fn(shape, |n, c, h, w| {
            ((n * 7 + c * 3) as f64 + 0.37 * h as f64 - 0.61 * w as f64).sin() + 0.1 * c as f64
        })
    }

    #[test]
    fn reduction_must_divide_channels() {
        assert!(Cbam::new("a", 6, 4).is_err());
        assert!(Cbam::new("a", 8, 0).is_err());
        assert!(Cbam::new("a", 8, 4).is_ok());
    }

    #[test]
    fn zero_weights_give_half_gates_and_quarter_output() {
        let (att, mut store) = setup(4, 2, 1);
        zero_all(&mut store);
        let x = wavy(Shape::new(2, 4, 5, 5));
        let mut g = Graph::new(Mode::Eval);
        let xv = g.input(x.clone());
        let ca = att.channel_attention(&mut g, &store, xv).unwrap();
        assert!(g.value(ca).data().iter().all(|&v| v == 0.5));
        let sa = att.spatial_attention(&mut g, &store, xv).unwrap();
        assert!(g.value(sa).data().iter().all(|&v| v == 0.5));
        let y = att.forward(&mut g, &store, xv).unwrap();
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            assert_eq!(*a, b / 4.0);
        }
    }

    #[test]
    fn constant_channels_share_avg_and_max_paths() {
        let (att, store) = setup(4, 2, 2);
        let x = Tensor::from_fn(Shape::new(1, 4, 3, 3), |_, c, _, _| c as f64 - 1.5);
        let mut g = Graph::new(Mode::Eval);
        let xv = g.input(x);
        let ca = att.channel_attention(&mut g, &store, xv).unwrap();
        let pooled = g.pool(xv, PoolKind::GlobalAvg);
        let one = att.mlp(&mut g, &store, pooled).unwrap();
        for (a, m) in g.value(ca).data().iter().zip(g.value(one).data()) {
            assert!((a - sigmoid(2.0 * m)).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_input_gives_constant_spatial_map() {
        let (att, store) = setup(4, 4, 3);
        let mut g = Graph::new(Mode::Eval);
        // only sites whose 7x7 window lies inside the map are unclipped
        let bv = g.input(Tensor::full(Shape::new(1, 4, 15, 15), 0.8));
        let sb = att.spatial_attention(&mut g, &store, bv).unwrap();
        let s = g.value(sb);
        let centre = s.at(0, 0, 7, 7);
        for y in 3..12 {
            for x in 3..12 {
                assert_eq!(s.at(0, 0, y, x), centre);
            }
        }
    }

    #[test]
    fn saturated_gates_pass_input_through() {
        let (att, mut store) = setup(4, 2, 4);
        zero_all(&mut store);
        // positive saturation: constant large logits via all-positive MLP
        // weights on a positive input, and a large positive spatial kernel
        for name in ["att.mlp1.weight", "att.mlp2.weight", "att.spatial.weight"] {
            store.param_mut(name).unwrap().value.data_mut().fill(50.0);
        }
        let x = Tensor::from_fn(Shape::new(1, 4, 4, 4), |_, c, h, w| 1.0 + (c + h + w) as f64 * 0.1);
        let mut g = Graph::new(Mode::Eval);
        let xv = g.input(x.clone());
        let y = att.forward(&mut g, &store, xv).unwrap();
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn logistic(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    #[test]
    fn channel_attention_matches_dense_oracle() {
        let (att, store) = setup(4, 2, 6);
        let x = wavy(Shape::new(2, 4, 3, 5));
        let mut g = Graph::new(Mode::Eval);
        let xv = g.input(x.clone());
        let ca = att.channel_attention(&mut g, &store, xv).unwrap();
        let w1 = store.get("att.mlp1.weight").unwrap().data();
        let w2 = store.get("att.mlp2.weight").unwrap().data();
        let mlp = |v: &[f64]| -> Vec<f64> {
            let hidden: Vec<f64> = (0..2)
                .map(|j| (0..4).map(|c| w1[j * 4 + c] * v[c]).sum::<f64>().max(0.0))
                .collect();
            (0..4).map(|c| (0..2).map(|j| w2[c * 2 + j] * hidden[j]).sum()).collect()
        };
        for n in 0..2 {
            let mut avg = vec![0.0; 4];
            let mut max = vec![f64::NEG_INFINITY; 4];
            for c in 0..4 {
                for h in 0..3 {
                    for w in 0..5 {
                        avg[c] += x.at(n, c, h, w) / 15.0;
                        max[c] = max[c].max(x.at(n, c, h, w));
                    }
                }
            }
            let (a, m) = (mlp(&avg), mlp(&max));
            for c in 0..4 {
                let want = logistic(a[c] + m[c]);
                assert!((g.value(ca).at(n, c, 0, 0) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spatial_attention_matches_dense_oracle() {
        let (att, store) = setup(4, 2, 7);
        let x = wavy(Shape::new(1, 4, 5, 5));
        let mut g = Graph::new(Mode::Eval);
        let xv = g.input(x.clone());
        let sa = att.spatial_attention(&mut g, &store, xv).unwrap();
        let k = store.get("att.spatial.weight").unwrap();
        let pooled = |p: usize, h: usize, w: usize| -> f64 {
            let vals = (0..4).map(|c| x.at(0, c, h, w));
            if p == 0 {
                vals.sum::<f64>() / 4.0
            } else {
                vals.fold(f64::NEG_INFINITY, f64::max)
            }
        };
        for h in 0..5i64 {
            for w in 0..5i64 {
                let mut acc = 0.0;
                for p in 0..2 {
                    for i in 0..7i64 {
                        for j in 0..7i64 {
                            let (y, xx) = (h + i - 3, w + j - 3);
                            if (0..5).contains(&y) && (0..5).contains(&xx) {
                                acc += k.at(0, p, i as usize, j as usize)
                                    * pooled(p, y as usize, xx as usize);
                            }
                        }
                    }
                }
                let got = g.value(sa).at(0, 0, h as usize, w as usize);
                assert!((got - logistic(acc)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positive_scaling_keeps_channel_argmax_under_positive_linear_mlp() {
        let (att, mut store) = setup(4, 2, 8);
        for name in ["att.mlp1.weight", "att.mlp2.weight"] {
            for v in store.param_mut(name).unwrap().value.data_mut() {
                *v = v.abs();
            }
        }
        let x = wavy(Shape::new(1, 4, 4, 4)).map(|v| v.abs() + 0.1);
        let argmax = |t: &Tensor<f64>| {
            (0..t.numel()).fold(0, |b, i| if t.data()[i] > t.data()[b] { i } else { b })
        };
        let mut g = Graph::new(Mode::Eval);
        let xv = g.input(x.clone());
        let base = att.channel_attention(&mut g, &store, xv).unwrap();
        let base = argmax(g.value(base));
        for k in [0.1, 0.5, 2.0] {
            let sv = g.input(x.scale(k));
            let ca = att.channel_attention(&mut g, &store, sv).unwrap();
            assert_eq!(argmax(g.value(ca)), base, "scale {k}");
        }
    }

    #[test]
    fn attention_values_lie_strictly_inside_unit_interval() {
        let (att, store) = setup(8, 4, 5);
        let mut g = Graph::new(Mode::Eval);
        let xv = g.input(wavy(Shape::new(2, 8, 6, 7)));
        let ca = att.channel_attention(&mut g, &store, xv).unwrap();
        let sa = att.spatial_attention(&mut g, &store, xv).unwrap();
        for v in g.value(ca).data().iter().chain(g.value(sa).data()) {
            assert!(*v > 0.0 && *v < 1.0);
        }
        let y = att.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.shape(y), Shape::new(2, 8, 6, 7));
    }
}
