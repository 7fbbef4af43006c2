//! Parameter storage and the decoupled-weight-decay Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// An ordered, named set of parameter tensors.
///
/// Values are kept representable in `f32` whenever they are written by the
/// optimizer, so checkpoints round-trip bit-exactly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let mut value = value;
        round_to_f32(value.data_mut());
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// FNV-1a over the bit patterns of every value; changes iff any bit does.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.value.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Overwrites all values from a flat vector in declaration order.
    pub fn load_flat(&mut self, flat: &[f64]) -> crate::Result<()> {
        crate::error::ensure!(
            flat.len() == self.num_scalars(),
            "parameter payload has {} values, model expects {}",
            flat.len(),
            self.num_scalars()
        );
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn bind(&self, offset: usize, trainable: bool) -> Bind<'_> {
        Bind {
            store: self,
            offset,
            trainable,
        }
    }
}

pub(crate) fn round_to_f32(data: &mut [f64]) {
    for v in data {
        *v = *v as f32 as f64;
    }
}

/// A view of a store for graph construction. Trainable bindings register
/// parameters in gradient slots `offset + index`; frozen ones enter as constants.
#[derive(Clone, Copy)]
pub struct Bind<'a> {
    store: &'a ParamStore,
    offset: usize,
    trainable: bool,
}

impl Bind<'_> {
    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        let t = self.store.get(id).clone();
        if self.trainable {
            g.param(self.offset + id.0, t)
        } else {
            g.constant(t)
        }
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        self.store.get(id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// Adaptive-moment optimizer with decoupled weight decay for one store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from gradients stored at slots `offset + index`.
    /// Parameters without a gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, offset: usize, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            let Some(g) = grads.get(offset + i) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gr), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = (c.beta1 * *mi + (1.0 - c.beta1) * gr) as f32 as f64;
                *vi = (c.beta2 * *vi + (1.0 - c.beta2) * gr * gr) as f32 as f64;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                let updated = *w - lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
                *w = updated as f32 as f64;
            }
        }
    }

    pub(crate) fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub(crate) fn from_parts(config: AdamWConfig, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Self {
        Self { config, step, m, v }
    }
}
