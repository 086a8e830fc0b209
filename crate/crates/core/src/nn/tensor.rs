use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major f32 array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns when the tensor is viewed as a matrix over its last axis.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.data.len() / cols.max(1), cols)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let (_, c) = self.rows_cols();
        &self.data[i * c..(i + 1) * c]
    }
}

/// Index of a named parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learned parameter: values plus an optional gradient buffer.
#[derive(Debug, Clone)]
pub struct GradTensor {
    pub value: Tensor,
    pub grad: Option<Vec<f32>>,
    pub requires_grad: bool,
}

impl GradTensor {
    pub fn new(value: Tensor) -> Self {
        Self {
            value,
            grad: None,
            requires_grad: true,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

/// Named parameters of a model, in creation order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<GradTensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.params.push(GradTensor::new(value));
        id
    }

    /// Insert a `fan_in`-scaled uniform parameter.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(
            name,
            Tensor::new(shape.to_vec(), data).expect("valid shape"),
        )
    }

    pub fn insert_const(&mut self, name: impl Into<String>, shape: &[usize], v: f32) -> ParamId {
        let n: usize = shape.iter().product();
        self.insert(
            name,
            Tensor::new(shape.to_vec(), vec![v; n]).expect("valid shape"),
        )
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &GradTensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut GradTensor {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&GradTensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut GradTensor> {
        self.id(name).map(move |id| self.get_mut(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &GradTensor)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), self.names[i].as_str(), p))
    }

    /// Mark every parameter whose name satisfies `pred` as trainable, all others frozen.
    pub fn set_trainable(&mut self, mut pred: impl FnMut(&str) -> bool) {
        for (name, p) in self.names.iter().zip(self.params.iter_mut()) {
            p.requires_grad = pred(name);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
