//! Parameter storage, freezing and the Adam optimizer.

use super::tape::{Gradients, Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub frozen: bool,
}

/// Named parameters in a fixed order. `ParamId`s index into this order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            value,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count of the selected parameters.
    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.params[id.0].value.numel()).sum()
    }

    pub fn freeze(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.params[id.0].frozen = true;
        }
    }

    pub fn unfreeze(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.params[id.0].frozen = false;
        }
    }

    /// Places every parameter on the tape. Frozen ones become constants, so
    /// no weight gradient is computed for them while gradients still flow
    /// through them to earlier nodes.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), !p.frozen))
            .collect()
    }

    /// Places every parameter on the tape as a constant (inference).
    pub fn bind_constants(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    /// Extracts per-parameter gradients from a backward pass over `bound`.
    pub fn collect_grads(&self, bound: &[Var], grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        bound.iter().map(|&v| grads.take(v)).collect()
    }

    /// Byte-level fingerprint of the selected parameters (FNV-1a over the raw values).
    pub fn checksum(&self, ids: &[ParamId]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut buf = Vec::new();
        for id in ids {
            buf.clear();
            for &v in self.params[id.0].value.data() {
                v.write_le(&mut buf);
            }
            for &b in &buf {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction over a fixed subset of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    ids: Vec<ParamId>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>, ids: Vec<ParamId>) -> Self {
        let m: Vec<Vec<T>> = ids.iter().map(|id| vec![T::zero(); store.get(*id).value.numel()]).collect();
        Self {
            config,
            v: m.clone(),
            m,
            ids,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update. `grads` is indexed by `ParamId`; frozen parameters and
    /// parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let step = T::of(lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(eps);
        for (slot, id) in self.ids.iter().enumerate() {
            let param = store.get_mut(*id);
            if param.frozen {
                continue;
            }
            let Some(g) = grads.get(id.0).and_then(Option::as_ref) else {
                continue;
            };
            if g.shape() != param.value.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient {:?} for parameter {} of shape {:?}",
                    g.shape(),
                    param.name,
                    param.value.shape()
                )));
            }
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (((p, &g), m), v) in param.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= step * *m / (v.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
