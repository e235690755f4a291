//! Named parameters, tape binding, initialization, and the Adam optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Precision, Tensor};

/// A learnable tensor with a checkpoint-stable name.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Flat registry of model parameters. Insertion order is the checkpoint
/// record order; names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let idx = self.params.len();
        self.by_name.insert(name.clone(), idx);
        self.params.push(Parameter {
            name,
            tensor: tensor.with_grad(),
        });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

/// Per-forward mapping from parameters to tape leaves. Binding the same
/// parameter twice returns the same node, so shared use accumulates
/// gradients by the sum rule.
#[derive(Debug)]
pub struct Binder {
    slots: Vec<Option<TensorId>>,
}

impl Binder {
    pub fn new(store: &ParamStore) -> Self {
        Binder {
            slots: vec![None; store.len()],
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> TensorId {
        if let Some(t) = self.slots[id.0] {
            return t;
        }
        let t = tape.leaf(&store.get(id).tensor);
        self.slots[id.0] = Some(t);
        t
    }

    pub fn bound(&self, id: ParamId) -> Option<TensorId> {
        self.slots[id.0]
    }
}

/// Gradients aligned with a `ParamStore`; `None` where a parameter did not
/// participate in the forward pass.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn zeros(store: &ParamStore) -> Self {
        ParamGrads {
            grads: vec![None; store.len()],
        }
    }

    pub fn collect(tape: &Tape, binder: &Binder, store: &ParamStore) -> Self {
        let mut grads = vec![None; store.len()];
        for (i, slot) in binder.slots.iter().enumerate() {
            if let Some(tid) = slot {
                grads[i] = tape.grad(*tid).map(|g| g.to_vec());
            }
        }
        ParamGrads { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn set(&mut self, id: ParamId, g: Vec<f64>) {
        self.grads[id.0] = Some(g);
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .fold(0.0f64, |m, &x| m.max(x.abs()))
    }
}

// ── initialization ───────────────────────────────────────────────────

/// Normal(0, std) truncated at ±2·std by rejection.
pub fn trunc_normal(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std is positive");
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            data.push(x);
        }
    }
    Tensor::new(shape, data).expect("shape and data agree")
}

// ── Adam ─────────────────────────────────────────────────────────────

/// Adam with bias correction. Moment arrays mirror the store's parameter
/// shapes; `step` counts completed updates.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        AdamState {
            step: 0,
            m: store.params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            v: store.params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn check_shapes(&self, store: &ParamStore) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::OptimizerState(format!(
                "moment count {} does not match parameter count {}",
                self.m.len(),
                store.len()
            )));
        }
        for (i, p) in store.params.iter().enumerate() {
            if self.m[i].len() != p.tensor.numel() || self.v[i].len() != p.tensor.numel() {
                return Err(Error::OptimizerState(format!(
                    "moment shape mismatch for {:?}: {} values vs {}",
                    p.name,
                    self.m[i].len(),
                    p.tensor.numel()
                )));
            }
        }
        Ok(())
    }
}

/// One Adam update over every parameter that has a gradient.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &ParamGrads,
    state: &mut AdamState,
    precision: Precision,
) -> Result<()> {
    state.check_shapes(store)?;
    if grads.grads.len() != store.len() {
        return Err(Error::OptimizerState(format!(
            "gradient count {} does not match parameter count {}",
            grads.grads.len(),
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, p) in store.params.iter_mut().enumerate() {
        let Some(g) = grads.grads[i].as_deref() else { continue };
        if g.len() != p.tensor.numel() {
            return Err(Error::OptimizerState(format!(
                "gradient shape mismatch for {:?}: {} values vs {}",
                p.name,
                g.len(),
                p.tensor.numel()
            )));
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let data = p.tensor.data_mut();
        for j in 0..g.len() {
            m[j] = precision.quantize(state.beta1 * m[j] + (1.0 - state.beta1) * g[j]);
            v[j] = precision.quantize(state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j]);
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] = precision.quantize(data[j] - state.lr * m_hat / (v_hat.sqrt() + state.eps));
        }
    }
    Ok(())
}
