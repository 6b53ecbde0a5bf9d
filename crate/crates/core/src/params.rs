//! Named parameter storage and its binding onto a tape.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Glorot/Xavier uniform over `(fan_out, fan_in)` of a matrix.
    Glorot,
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn matrix(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, &[rows, cols], Init::Glorot)
    }

    pub fn bias(name: impl Into<String>, len: usize) -> Self {
        Self::new(name, &[len], Init::Zeros)
    }
}

/// Parameters keyed by dotted path, e.g. `blocks.0.theta_p.q.w`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn init(specs: &[ParamSpec], rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        for spec in specs {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, 1.0),
                Init::Glorot => {
                    let [rows, cols] = spec.shape[..] else {
                        return Err(shape_err!("glorot init for non-matrix {}", spec.name));
                    };
                    let limit = (6.0 / (rows + cols) as f64).sqrt();
                    Tensor::from_fn(&spec.shape, |_| rng.gen_range(-limit..limit))
                }
            };
            store.insert(spec.name.clone(), t)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks that names and shapes match `specs` exactly.
    pub fn validate(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for spec in specs {
            let t = self
                .get(&spec.name)
                .ok_or_else(|| Error::Config(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(shape_err!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                ));
            }
        }
        Ok(())
    }
}

/// Parameters registered as leaves on one tape.
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    /// Binds every parameter; names in `frozen` become constants.
    pub fn bind(tape: &mut Tape, store: &ParamStore, frozen: &BTreeSet<String>) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let v = tape.leaf(t.clone(), !frozen.contains(name));
                (name.to_string(), v)
            })
            .collect();
        Binding { vars }
    }

    /// Binding over vars already on a tape.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Binding {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unbound parameter {name}")))
    }

    /// Gradients of all trainable parameters.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| tape.grad(v).map(|g| (name.clone(), g)))
            .collect()
    }
}
