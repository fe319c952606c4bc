use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::matrix::{Mat, MatRef};
use crate::error::{Error, Result};

/// A named parameter tensor. Rank-1 tensors are viewed as a single row.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
    pub frozen: bool,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor {name}: dims must be positive"
            )));
        }
        let expected: usize = dims.iter().product();
        if expected != values.len() {
            return Err(Error::Contract(format!(
                "tensor {name}: {} values for dims {dims:?}",
                values.len()
            )));
        }
        Ok(Self {
            name,
            dims,
            values,
            frozen: false,
        })
    }

    pub fn zeros(name: impl Into<String>, dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self::new(name, dims, vec![0.0; n]).expect("zero tensor with positive dims")
    }

    /// Gaussian init, rounded through `f32` so checkpoints are lossless.
    pub fn normal<R: Rng + ?Sized>(
        name: impl Into<String>,
        dims: Vec<usize>,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let n = dims.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let values = (0..n).map(|_| dist.sample(rng) as f32 as f64).collect();
        Self::new(name, dims, values).expect("normal tensor with positive dims")
    }

    pub fn filled(name: impl Into<String>, dims: Vec<usize>, value: f64) -> Self {
        let n = dims.iter().product();
        Self::new(name, dims, vec![value; n]).expect("filled tensor with positive dims")
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn shape2(&self) -> (usize, usize) {
        match self.dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => {
                let c = *self.dims.last().unwrap();
                (self.values.len() / c, c)
            }
        }
    }

    pub fn view(&self) -> MatRef<'_> {
        let (rows, cols) = self.shape2();
        MatRef {
            rows,
            cols,
            data: &self.values,
        }
    }

    pub fn to_mat(&self) -> Mat {
        self.view().to_owned()
    }
}

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tensor: ParamTensor) -> Result<()> {
        if self.index.contains_key(&tensor.name) {
            return Err(Error::Contract(format!(
                "duplicate tensor name {}",
                tensor.name
            )));
        }
        self.index.insert(tensor.name.clone(), self.tensors.len());
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamTensor> {
        let idx = self.index.remove(name)?;
        let t = self.tensors.remove(idx);
        for v in self.index.values_mut() {
            if *v > idx {
                *v -= 1;
            }
        }
        Some(t)
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&ParamTensor> {
        self.get(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_index(&self, idx: usize) -> &ParamTensor {
        &self.tensors[idx]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn freeze_all(&mut self) {
        for t in &mut self.tensors {
            t.frozen = true;
        }
    }

    /// Sets `frozen = !pred(name)` for every tensor.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for t in &mut self.tensors {
            t.frozen = !pred(&t.name);
        }
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|t| t.values.iter().any(|v| !v.is_finite()))
            .map(|t| t.name.as_str())
    }
}

/// Gradients keyed by tensor name. Frozen tensors never appear.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads(pub BTreeMap<String, Vec<f64>>);

impl Grads {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.get(name).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn accumulate(&mut self, other: &Grads) {
        for (k, v) in &other.0 {
            match self.0.get_mut(k) {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(v) {
                        *a += b;
                    }
                }
                None => {
                    self.0.insert(k.clone(), v.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.0.values_mut() {
            for x in v.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|v| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}
