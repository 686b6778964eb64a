//! Named parameter tensors with deterministic iteration order, plus the EMA
//! shadow copy used for target computation.

use super::tensor::Tensor;
use rand::Rng;
use std::collections::HashMap;

/// Insertion-ordered collection of named f32 parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor<f32>) {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.index.get(name).copied().map(move |i| &mut self.tensors[i])
    }

    pub fn set(&mut self, name: &str, t: Tensor<f32>) {
        let i = self.index[name];
        assert_eq!(self.tensors[i].shape, t.shape, "shape change for {name}");
        self.tensors[i] = t;
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Shadow copy of a tracked store; shapes mirror it exactly.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub params: ParamStore,
}

impl EmaState {
    pub fn from_online(online: &ParamStore) -> Self {
        EmaState { params: online.clone() }
    }
}

/// Truncated normal (resample outside two sigma), the default weight init.
pub fn trunc_normal<R: Rng>(rng: &mut R, shape: Vec<usize>, sigma: f32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        // Box-Muller on explicit uniforms keeps the stream reproducible.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            data.push(z as f32 * sigma);
        }
    }
    Tensor::from_vec(shape, data)
}
