//! Parameter storage, layers and the Adam optimiser.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    label: String,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    frozen: bool,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            label: self.label.clone(),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            frozen: self.frozen,
        }
    }
}

impl ParamStore {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            label: label.into(),
            names: Vec::new(),
            tensors: Vec::new(),
            frozen: false,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Tensor> {
        if self.frozen {
            return Err(Error::Frozen(self.label.clone()));
        }
        Ok(&mut self.tensors[id.0])
    }

    pub(crate) fn tensor_at_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Overwrite values from `(name, tensor)` pairs; names and shapes must match exactly.
    pub fn load(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen(self.label.clone()));
        }
        if named.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{}: expected {} tensors, found {}",
                self.label,
                self.tensors.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let idx = self
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("{}: unknown tensor {name}", self.label)))?;
            if t.shape() != self.tensors[idx].shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: tensor {name} has shape {:?}, expected {:?}",
                    self.label,
                    t.shape(),
                    self.tensors[idx].shape()
                )));
            }
            self.tensors[idx] = t;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Bind this store into a graph; parameters become differentiable leaves.
    pub fn trainable(&self) -> Bind<'_> {
        Bind {
            store: self,
            trainable: !self.frozen,
        }
    }

    /// Bind this store as constants: gradients pass through, never into the parameters.
    pub fn constants(&self) -> Bind<'_> {
        Bind {
            store: self,
            trainable: false,
        }
    }
}

/// A parameter store attached to a graph in trainable or constant mode.
#[derive(Clone, Copy)]
pub struct Bind<'a> {
    store: &'a ParamStore,
    trainable: bool,
}

impl Bind<'_> {
    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        let t = self.store.get(id).clone();
        if self.trainable {
            g.param(self.store.id, id.0, t)
        } else {
            g.constant(t)
        }
    }
}

/// PyTorch-style default initialisation: `U(−1/√fan_in, 1/√fan_in)`.
fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f32).sqrt();
    let mut t = Tensor::zeros(shape);
    rng.fill_uniform(t.data_mut(), -bound, bound);
    t
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(&[cout, cin, kernel, kernel], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), init_uniform(&[cout], fan_in, rng));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bind, x: Var) -> Var {
        let w = p.var(g, self.weight);
        let b = p.var(g, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = cout * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(&[cin, cout, kernel, kernel], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), init_uniform(&[cout], fan_in, rng));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bind, x: Var) -> Var {
        let w = p.var(g, self.weight);
        let b = p.var(g, self.bias);
        g.conv_transpose2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut Rng) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(&[dout, din], din, rng),
        );
        let bias = store.add(format!("{name}.bias"), init_uniform(&[dout], din, rng));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bind, x: Var) -> Var {
        let w = p.var(g, self.weight);
        let b = p.var(g, self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// Apply one update; refuses frozen stores and non-finite gradients.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if store.is_frozen() {
            return Err(Error::Frozen(store.label().to_string()));
        }
        if grads.len() != store.len() {
            return Err(Error::LengthMismatch {
                left: grads.len(),
                right: store.len(),
            });
        }
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite(format!("{} gradient", store.label())));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = &mut store.tensors[i];
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= learning_rate * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_store_rejects_updates() {
        let mut rng = Rng::new(0);
        let mut store = ParamStore::new("dec");
        let lin = Linear::new(&mut store, "fc", 3, 2, &mut rng);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        store.freeze();
        let grads = vec![Some(Tensor::zeros(&[2, 3])), Some(Tensor::zeros(&[2]))];
        assert!(matches!(opt.step(&mut store, &grads), Err(Error::Frozen(_))));
        assert!(store.get_mut(lin.weight).is_err());
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::new("q");
        let id = store.add("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 0.1,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..300 {
            let mut g = Graph::new();
            let x = store.trainable().var(&mut g, id);
            let sq = g.mul(x, x);
            let loss = g.mean(sq);
            let grads = g.backward(loss).for_store(store.id(), store.len());
            opt.step(&mut store, &grads).unwrap();
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn hash_tracks_values() {
        let mut a = ParamStore::new("a");
        a.add("w", Tensor::full(&[2], 1.0));
        let mut b = ParamStore::new("b");
        b.add("w", Tensor::full(&[2], 1.0));
        assert_eq!(a.hash(), b.hash());
        b.get_mut(ParamId(0)).unwrap().data_mut()[1] = 1.5;
        assert_ne!(a.hash(), b.hash());
    }
}
