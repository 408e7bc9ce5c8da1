//! Named trainable parameters and the Adam optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of named parameters. Names are unique; iteration
/// order is insertion order, which keeps optimizer state and checkpoints
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.push(Param {
            name: name.to_string(),
            value,
            grad,
        });
        self.index.insert(name.to_string(), self.entries.len() - 1);
        Ok(self.entries.len() - 1)
    }

    /// Uniform init in [-bound, bound] where bound = sqrt(1/fan_in).
    pub fn insert_init(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<usize> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn value_at(&self, idx: usize) -> &Tensor {
        &self.entries[idx].value
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Snapshot of all parameter values (for early-stopping restore).
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.entries.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        for (p, s) in self.entries.iter_mut().zip(snapshot) {
            p.value = s.clone();
        }
    }
}

/// Tracks which tape leaves belong to which parameters for one forward
/// pass, so their gradients can be pulled back into the store.
#[derive(Default)]
pub struct ParamBinding {
    bound: Vec<(usize, NodeId)>,
}

impl ParamBinding {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a parameter as a tape leaf and remember the binding.
    pub fn bind(&mut self, g: &mut Graph, store: &ParamStore, name: &str) -> Result<NodeId> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        let id = g.leaf(store.value_at(idx).clone());
        self.bound.push((idx, id));
        Ok(id)
    }

    /// Accumulate tape gradients into the store, scaled (e.g. by 1/batch).
    pub fn collect(&self, g: &Graph, store: &mut ParamStore, scale: f64) {
        for &(idx, id) in &self.bound {
            if let Some(grad) = g.grad(id) {
                let slot = store.entries[idx].grad.data_mut();
                for (s, &d) in slot.iter_mut().zip(grad.data()) {
                    *s += scale * d;
                }
            }
        }
    }
}

/// Adam with global-norm gradient clipping.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            step: 0,
            m: store.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let norm: f64 = store
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|&g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = if norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in store.entries.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let value = p.value.data_mut();
            for (j, &graw) in p.grad.data().iter().enumerate() {
                let g = graw * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                value[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
