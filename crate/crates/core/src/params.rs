//! Named parameter registry.
//!
//! Parameters live in a flat, deterministically ordered list so optimizer
//! state, checkpoints, and gradient extraction all line up by construction.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// He-style uniform in (-sqrt(6/fan_in), +sqrt(6/fan_in)).
    HeUniform { fan_in: usize },
    Uniform { lo: f64, hi: f64 },
}

/// Declaration list collected from the model config before materialization.
#[derive(Default)]
pub struct ParamSpecs {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl ParamSpecs {
    pub fn declare(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.specs.push((name.into(), shape.to_vec(), init));
    }

    /// Materialize all declared parameters with a seeded generator.
    pub fn build<S: Scalar>(self, seed: u64) -> ModelParams<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::with_capacity(self.specs.len());
        for (name, shape, init) in self.specs {
            let tensor = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, S::ONE),
                Init::HeUniform { fan_in } => {
                    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                    Tensor::from_fn(&shape, |_| S::from_f64(rng.random_range(-bound..bound)))
                }
                Init::Uniform { lo, hi } => {
                    Tensor::from_fn(&shape, |_| S::from_f64(rng.random_range(lo..hi)))
                }
            };
            entries.push((name, tensor));
        }
        ModelParams::from_entries(entries)
    }
}

/// The complete learnable parameter set, in declaration order.
#[derive(Debug, Clone)]
pub struct ModelParams<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn from_entries(entries: Vec<(String, Tensor<S>)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Self { entries, index }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor<S> {
        &self.entries[i].1
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn set_at(&mut self, i: usize, t: Tensor<S>) {
        debug_assert_eq!(self.entries[i].1.shape(), t.shape());
        self.entries[i].1 = t;
    }

    pub fn set(&mut self, name: &str, t: Tensor<S>) -> Result<()> {
        match self.index.get(name) {
            Some(&i) => {
                if self.entries[i].1.shape() != t.shape() {
                    return Err(Error::InvalidInput(format!(
                        "parameter `{name}` shape {:?} does not match stored {:?}",
                        t.shape(),
                        self.entries[i].1.shape()
                    )));
                }
                self.entries[i].1 = t;
                Ok(())
            }
            None => Err(Error::InvalidInput(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams::from_entries(
            self.entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        )
    }

    /// Register every parameter on a tape. With `trainable`, each leaf
    /// becomes a gradient target.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Tape handles for every registered parameter of one forward pass.
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    /// Tape var of a named parameter. Panics on unknown names: parameter
    /// names are internal and fixed by the registration code.
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter `{name}`"),
        }
    }

    pub fn var_at(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}
