use indexmap::IndexMap;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::rng::Rng;

/// Named trainable tensors. Iteration follows insertion order, which is also
/// the flattening and checkpoint layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::validation(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn by_index(&self, i: usize) -> &Tensor {
        &self.entries[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in self.entries.values() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Overwrite all values from a flat vector in iteration order.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::shape(
                "flat parameters",
                &[self.num_scalars()],
                &[flat.len()],
            ));
        }
        let mut off = 0;
        for t in self.entries.values_mut() {
            let n = t.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(&v.shape)))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape == vb.shape)
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .map(Tensor::norm_sq)
            .sum::<f64>()
            .sqrt()
    }
}

/// Affine weight `[fan_in, fan_out]` from `N(0, 2 / (fan_in + fan_out))`.
pub fn init_weight(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let sd = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, sd).expect("finite sd");
    Tensor::matrix(
        fan_in,
        fan_out,
        (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect(),
    )
}
