//! Named parameter storage with gradient and momentum slots.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::ops::norm::update_running;
use crate::ops::BatchNormCache;
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

pub const STORE_MAGIC: &[u8; 4] = b"MNP1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn is_norm_affine(self) -> bool {
        matches!(self, ParamKind::NormScale | ParamKind::NormShift)
    }

    fn code(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::NormScale => 2,
            ParamKind::NormShift => 3,
            ParamKind::RunningMean => 4,
            ParamKind::RunningVar => 5,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::NormScale,
            3 => ParamKind::NormShift,
            4 => ParamKind::RunningMean,
            5 => ParamKind::RunningVar,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    /// Current value; its gradient buffer is the gradient slot.
    pub value: Tensor<T>,
    pub kind: ParamKind,
    pub velocity: Option<Vec<T>>,
}

/// Batch statistics observed by a training-mode batch norm, pending
/// application to the running averages named by `prefix`.
#[derive(Clone, Debug)]
pub struct NormStatsUpdate<T> {
    pub prefix: String,
    pub cache: BatchNormCache<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) {
        self.entries.insert(
            name.into(),
            Param {
                value,
                kind,
                velocity: None,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of learnable scalars.
    pub fn learnable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.kind.learnable())
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[T]) -> Result<()> {
        self.param_mut(name)?.value.accumulate_grad(grad)
    }

    pub fn clear_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.value.clear_grad();
        }
    }

    /// Folds observed batch statistics into the running averages.
    pub fn apply_norm_stats(&mut self, updates: &[NormStatsUpdate<T>], momentum: T) -> Result<()> {
        for u in updates {
            let mean_name = format!("{}.running_mean", u.prefix);
            let var_name = format!("{}.running_var", u.prefix);
            let mut mean = self.get(&mean_name)?.data().to_vec();
            let mut var = self.get(&var_name)?.data().to_vec();
            update_running(&mut mean, &mut var, &u.cache, momentum);
            self.param_mut(&mean_name)?.value.data_mut().copy_from_slice(&mean);
            self.param_mut(&var_name)?.value.data_mut().copy_from_slice(&var);
        }
        Ok(())
    }

    /// Element-type conversion of every value; gradients and velocities
    /// are dropped.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            kind: p.kind,
                            velocity: None,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Registers a convolution: He-normal weight (fan-in scaling) and an
    /// optional zero bias.
    pub fn add_conv<R: Rng>(
        &mut self,
        rng: &mut R,
        prefix: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        bias: bool,
    ) {
        let shape = Shape::new(c_out, c_in, k, k);
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let data = (0..shape.numel())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        self.insert(
            format!("{prefix}.weight"),
            Tensor::from_vec(shape, data).expect("sized by construction"),
            ParamKind::Weight,
        );
        if bias {
            self.insert(
                format!("{prefix}.bias"),
                Tensor::zeros(Shape::new(1, c_out, 1, 1)),
                ParamKind::Bias,
            );
        }
    }

    /// Registers a batch norm: unit scale, zero shift, zero mean, unit
    /// variance.
    pub fn add_norm(&mut self, prefix: &str, channels: usize) {
        let v = Shape::new(1, channels, 1, 1);
        self.insert(format!("{prefix}.gamma"), Tensor::full(v, T::one()), ParamKind::NormScale);
        self.insert(format!("{prefix}.beta"), Tensor::zeros(v), ParamKind::NormShift);
        self.insert(format!("{prefix}.running_mean"), Tensor::zeros(v), ParamKind::RunningMean);
        self.insert(format!("{prefix}.running_var"), Tensor::full(v, T::one()), ParamKind::RunningVar);
    }

    /// Layout: magic, `u32` entry count, then per entry a `u16` name length,
    /// the UTF-8 name, a kind byte and the tensor in its flat binary format.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(STORE_MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, p) in &self.entries {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len()).map_err(|_| Error::Format {
                what: "parameter store",
                message: format!("name too long: {name}"),
            })?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[p.kind.code()])?;
            p.value.write_to(&mut w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |message: String| Error::Format {
            what: "parameter store",
            message,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != STORE_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4);
        let mut store = ParamStore::new();
        for _ in 0..count {
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2)?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
            let mut kind = [0u8; 1];
            r.read_exact(&mut kind)?;
            let kind = ParamKind::from_code(kind[0])
                .ok_or_else(|| bad(format!("unknown kind {} for {name}", kind[0])))?;
            let value = Tensor::read_from(&mut r)?;
            store.insert(name, value, kind);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_init_is_seeded_and_sized() {
        let build = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = ParamStore::<f32>::new();
            s.add_conv(&mut rng, "c", 4, 3, 3, true);
            s.add_norm("bn", 4);
            s
        };
        let a = build(7);
        assert_eq!(a, build(7));
        assert_ne!(a, build(8));
        assert_eq!(a.get("c.weight").unwrap().shape(), Shape::new(4, 3, 3, 3));
        assert!(a.get("c.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(a.learnable_count(), 4 * 27 + 4 + 8);
        assert!(a.get("missing").is_err());
    }

    #[test]
    fn store_round_trips_through_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::<f32>::new();
        s.add_conv(&mut rng, "stage1.conv", 2, 2, 3, true);
        s.add_norm("stage1.bn", 2);
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let back = ParamStore::<f32>::read_from(&buf[..]).unwrap();
        assert_eq!(back, s);
        assert!(ParamStore::<f32>::read_from(&buf[..buf.len() - 3]).is_err());
    }
}
