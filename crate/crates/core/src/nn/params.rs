use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, Tensor};
use crate::error::{config_err, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State carried between steps but never differentiated (running stats).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub group: usize,
    pub kind: ParamKind,
}

/// Flat, ordered collection of named tensors, partitioned into groups.
///
/// Groups are the units of freezing; they are the model's top-level blocks in
/// definition order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    groups: Vec<String>,
    prefix: Vec<String>,
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std) resampled until within two standard deviations.
    TruncNormal(f64),
    /// Normal(0, sqrt(2 / fan_in)).
    He { fan_in: usize },
    /// Uniform(−1/sqrt(fan_in), 1/sqrt(fan_in)).
    FanInUniform { fan_in: usize },
}

impl Init {
    pub fn sample<F: Element>(self, shape: &[usize], rng: &mut Rng) -> Tensor<F> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, F::one()),
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(shape, |_| loop {
                    let v: f64 = normal.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break F::from_f64(v);
                    }
                })
            }
            Init::He { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("finite std");
                Tensor::from_fn(shape, |_| F::from_f64(normal.sample(rng)))
            }
            Init::FanInUniform { fan_in } => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                let u = Uniform::new_inclusive(-b, b).expect("valid bounds");
                Tensor::from_fn(shape, |_| F::from_f64(u.sample(rng)))
            }
        }
    }
}

impl<F: Element> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            groups: Vec::new(),
            prefix: Vec::new(),
        }
    }

    /// Opens a new freeze group; parameters added afterwards belong to it.
    pub fn begin_group(&mut self, name: &str) -> usize {
        self.groups.push(self.qualified(name));
        self.groups.len() - 1
    }

    /// Runs `f` with `scope.` prepended to every parameter and group name.
    pub fn scoped<T>(&mut self, scope: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(scope.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn qualified(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    fn push(&mut self, name: &str, value: Tensor<F>, kind: ParamKind) -> ParamId {
        if self.groups.is_empty() {
            self.begin_group("root");
        }
        let name = self.qualified(name);
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            group: self.groups.len() - 1,
            kind,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add(&mut self, name: &str, value: Tensor<F>) -> ParamId {
        self.push(name, value, ParamKind::Trainable)
    }

    pub fn add_init(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut Rng) -> ParamId {
        self.add(name, init.sample(shape, rng))
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<F>) -> ParamId {
        self.push(name, value, ParamKind::Buffer)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(config_err!("parameter {} has shape {:?}, got {:?}", p.name, p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn group_names(&self) -> &[String] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.kind == ParamKind::Trainable).map(|p| p.value.numel()).sum()
    }

    /// Same structure, values converted to another element type.
    pub fn cast<G: Element>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    group: p.group,
                    kind: p.kind,
                })
                .collect(),
            groups: self.groups.clone(),
            prefix: Vec::new(),
        }
    }
}
