//! Parameterized layers built on the autodiff tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::params::{Bind, ParamId, ParamStore};
use crate::tensor::Tensor;

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rng: &mut impl Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, c_out, c_in * kernel, bound));
        let bias = store.add(format!("{name}.bias"), uniform(rng, c_out, 1, bound));
        Self {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        }
    }

    /// Same-length convolution with odd kernel.
    pub fn same(store: &mut ParamStore, name: &str, rng: &mut impl Rng, c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self::new(store, name, rng, c_in, c_out, kernel, 1, kernel / 2)
    }

    pub fn forward(&self, p: &Bind<'_>, g: &mut Graph, x: Var) -> Var {
        let w = p.var(g, self.weight);
        let b = p.var(g, self.bias);
        let y = g.conv1d(x, w, self.kernel, self.stride, self.pad);
        g.add_bias(y, b)
    }

    pub fn num_params(&self) -> usize {
        self.c_out * self.c_in * self.kernel + self.c_out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvTranspose1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rng: &mut impl Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let bound = 1.0 / ((c_out * kernel) as f64 / stride as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, c_in, c_out * kernel, bound));
        let bias = store.add(format!("{name}.bias"), uniform(rng, c_out, 1, bound));
        Self {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, p: &Bind<'_>, g: &mut Graph, x: Var) -> Var {
        let w = p.var(g, self.weight);
        let b = p.var(g, self.bias);
        let y = g.conv_transpose1d(x, w, self.kernel, self.stride, self.pad);
        g.add_bias(y, b)
    }

    pub fn num_params(&self) -> usize {
        self.c_out * self.c_in * self.kernel + self.c_out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    /// `groups` is clamped to the largest divisor of `channels` not above it.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let mut groups = groups.clamp(1, channels);
        while !channels.is_multiple_of(groups) {
            groups -= 1;
        }
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(channels, 1, 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(channels, 1));
        Self {
            gamma,
            beta,
            channels,
            groups,
        }
    }

    pub fn forward(&self, p: &Bind<'_>, g: &mut Graph, x: Var) -> Var {
        let ga = p.var(g, self.gamma);
        let be = p.var(g, self.beta);
        g.group_norm(x, ga, be, self.groups, 1e-5)
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}

/// Dense layer acting on column vectors `[in, 1] → [out, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut impl Rng, d_in: usize, d_out: usize) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, d_out, d_in, bound));
        let bias = store.add(format!("{name}.bias"), uniform(rng, d_out, 1, bound));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, p: &Bind<'_>, g: &mut Graph, x: Var) -> Var {
        let w = p.var(g, self.weight);
        let b = p.var(g, self.bias);
        let y = g.matmul(w, x);
        g.add_bias(y, b)
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }
}
