//! Named, ordered collections of learnable tensors.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(−a, a)` with `a = 1/√fan_in`.
    Uniform {
        fan_in: usize,
    },
    Ones,
    Zeros,
}

/// One entry of a parameter inventory.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.into(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Parameters {
    tensors: IndexMap<String, Tensor>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draws every entry of an inventory, in order, from a seeded generator.
    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::new();
        for spec in specs {
            let n = spec.numel();
            let data = match spec.init {
                Init::Uniform { fan_in } => {
                    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-a..a)).collect()
                }
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
            };
            params.insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data)?)?;
        }
        Ok(params)
    }

    /// Adds a tensor under a fresh name; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name `{name}`")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Zero tensors with the same inventory.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }

    /// Enters every tensor into `g` as a leaf, in inventory order.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }

    /// Gradients collected from a graph after backward; parameters that
    /// received no gradient get zeros.
    pub fn gradients(&self, g: &Graph, bound: &Bound) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| {
                    let grad = bound
                        .vars
                        .get(k)
                        .and_then(|&var| g.grad(var))
                        .unwrap_or_else(|| Tensor::zeros(v.shape().to_vec()));
                    (k.clone(), grad)
                })
                .collect(),
        }
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_same_inventory(&self, other: &Parameters) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::InvalidConfig(format!(
                "parameter inventories differ in size: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.tensors.iter().zip(&other.tensors) {
            if ka != kb || va.shape() != vb.shape() {
                return Err(Error::InvalidConfig(format!(
                    "parameter inventories differ at `{ka}` {:?} vs `{kb}` {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Graph handles for a bound [`Parameters`] set.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut p = Parameters::new();
        p.insert("b", Tensor::zeros(vec![2])).unwrap();
        p.insert("a", Tensor::zeros(vec![3, 2])).unwrap();
        assert!(p.insert("a", Tensor::zeros(vec![1])).is_err());
        assert_eq!(p.names().collect::<Vec<_>>(), ["b", "a"]);
        assert_eq!(p.count(), 8);
    }

    #[test]
    fn gradients_follow_inventory() {
        let mut p = Parameters::new();
        p.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        p.insert("unused", Tensor::zeros(vec![1])).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, true);
        let w = bound.get("w").unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        let grads = p.gradients(&g, &bound);
        assert_eq!(grads.get("w").unwrap().data(), &[2.0, 4.0]);
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0]);
        assert!(bound.get("missing").is_err());
    }
}
