use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::Mat;

static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

fn fresh_tag() -> u64 {
    NEXT_TAG.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable matrices.
///
/// Each store carries a process-unique tag so that a graph can hold leaves
/// from several stores at once (the acoustic model and the predictor are
/// trained jointly in the last stage).
pub struct ParamStore {
    tag: u64,
    names: Vec<String>,
    values: Vec<Mat>,
    index: BTreeMap<String, ParamId>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            tag: fresh_tag(),
            names: self.names.clone(),
            values: self.values.clone(),
            index: self.index.clone(),
        }
    }
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.names.len())
            .field("scalars", &self.num_scalars())
            .finish()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            tag: fresh_tag(),
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Exact equality of every value (bitwise on finite floats).
    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.names == other.names && self.values == other.values
    }
}

/// Glorot-uniform initialization.
pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = rand_distr::Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| rng.sample(dist))
}

/// Adam with bias correction; no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Mat> = store.values.iter().map(|v| Array2::zeros(v.dim())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-9,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters with no gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Mat>]) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut store.values[i];
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Option<Mat>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * k);
        }
    }
    norm
}
