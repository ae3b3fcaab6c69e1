//! Named parameters, tape bindings and the small layer helpers shared by
//! both networks.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::Container;
use crate::tensor::{Padding, Real, Tape, Tensor, Var};

/// Named parameter collection. Convolutions are stored as `<name>.w`
/// `(out, in, k, k)` and `<name>.b` `(1, out, 1, 1)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelWeights<T: Real = f32> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ModelWeights<T> {
    pub fn new() -> Self {
        ModelWeights {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Number of convolution layers under `prefix`.
    pub fn conv_count(&self, prefix: &str) -> usize {
        self.params
            .keys()
            .filter(|k| k.starts_with(prefix) && k.ends_with(".w"))
            .count()
    }

    /// Parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        ModelWeights {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Adds every entry of `other`, replacing same-named ones.
    pub fn merge(&mut self, other: ModelWeights<T>) {
        self.params.extend(other.params);
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn write_to(&self, c: &mut Container) {
        for (name, t) in &self.params {
            c.insert(
                name.clone(),
                t.shape().0.to_vec(),
                t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
            );
        }
    }

    /// Reads every rank-4 entry whose name starts with `down.` or `up.`.
    pub fn read_from(c: &Container) -> Result<Self> {
        let mut w = ModelWeights::new();
        for (name, (dims, data)) in &c.entries {
            if !(name.starts_with("down.") || name.starts_with("up.")) {
                continue;
            }
            let shape: [usize; 4] = dims
                .as_slice()
                .try_into()
                .map_err(|_| Error::shape(format!("parameter {name} has rank {}", dims.len())))?;
            let values = data.iter().map(|v| T::lit(*v as f64)).collect();
            w.insert(name.clone(), Tensor::new(shape, values)?);
        }
        Ok(w)
    }

    /// Records every parameter on `tape`, as a variable when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.variable(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bindings { vars }
    }

    /// Records only the parameters under `prefix` as variables; all others
    /// are constants.
    pub fn bind_trainable(&self, tape: &mut Tape<T>, prefix: &[&str]) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if prefix.iter().any(|p| k.starts_with(p)) {
                    tape.variable(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bindings { vars }
    }
}

/// Tape handles for a bound [`ModelWeights`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients of every bound parameter that received one.
    pub fn grads<T: Real>(&self, tape: &Tape<T>) -> BTreeMap<String, Vec<T>> {
        self.vars
            .iter()
            .filter_map(|(k, v)| tape.grad(*v).map(|g| (k.clone(), g.to_vec())))
            .collect()
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-normal weights scaled by `gain`, zero bias.
    pub fn conv<T: Real>(&mut self, w: &mut ModelWeights<T>, name: &str, c_out: usize, c_in: usize, k: usize, gain: f64) {
        let std = gain * (2.0 / (c_in * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let rng = &mut self.rng;
        let weight = Tensor::from_fn([c_out, c_in, k, k], |_, _, _, _| T::lit(normal.sample(rng)));
        w.insert(format!("{name}.w"), weight);
        w.insert(format!("{name}.b"), Tensor::zeros([1, c_out, 1, 1]));
    }

    /// All-zero weights and bias.
    pub fn zero_conv<T: Real>(&mut self, w: &mut ModelWeights<T>, name: &str, c_out: usize, c_in: usize, k: usize) {
        w.insert(format!("{name}.w"), Tensor::zeros([c_out, c_in, k, k]));
        w.insert(format!("{name}.b"), Tensor::zeros([1, c_out, 1, 1]));
    }
}

/// Zero-padded "same" convolution using `<name>.w` / `<name>.b`.
pub fn conv<T: Real>(tape: &mut Tape<T>, b: &Bindings, name: &str, x: Var) -> Result<Var> {
    conv_stride(tape, b, name, x, 1)
}

pub fn conv_stride<T: Real>(tape: &mut Tape<T>, b: &Bindings, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = b.var(&format!("{name}.w"))?;
    let bias = b.var(&format!("{name}.b"))?;
    let k = tape.shape(w).height();
    tape.conv2d(x, w, Some(bias), stride, Padding::same(k))
}
