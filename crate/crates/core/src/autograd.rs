//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! whatever it needs for the backward pass. Graphs are built per example and
//! thrown away after [`Graph::backward`]; batches are formed by summing the
//! per-example [`Gradients`].
//!
//! Parameters enter a graph through [`Graph::param`] with a caller-chosen
//! gradient slot. Nodes that do not depend on any parameter are never visited
//! during the backward sweep, so frozen sub-networks cost only their forward pass.

use std::sync::Arc;

use rustfft::num_complex::Complex;

use crate::spectral::StftPlan;
use crate::tensor::{gemm, MatRef, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Kernel/stride/padding geometry of a 1-D convolution over `in_len` samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_len: usize,
    pub out_len: usize,
}

impl ConvGeom {
    pub fn conv(in_len: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(
            in_len + 2 * pad >= kernel,
            "convolution input too short: {in_len} with kernel {kernel}"
        );
        Self {
            kernel,
            stride,
            pad,
            in_len,
            out_len: (in_len + 2 * pad - kernel) / stride + 1,
        }
    }

    /// Geometry of the convolution whose adjoint maps `len` frames up to the
    /// transposed-convolution output.
    pub fn transposed(len: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let up = (len - 1) * stride + kernel - 2 * pad;
        Self {
            kernel,
            stride,
            pad,
            in_len: up,
            out_len: len,
        }
    }
}

/// `[C, in_len] → [C·K, out_len]`.
pub(crate) fn im2col(x: &Tensor, g: &ConvGeom) -> Tensor {
    let c = x.rows();
    let mut cols = Tensor::zeros(c * g.kernel, g.out_len);
    for ci in 0..c {
        let src = x.row(ci);
        for k in 0..g.kernel {
            let dst = cols.row_mut(ci * g.kernel + k);
            for (t, d) in dst.iter_mut().enumerate() {
                let pos = (t * g.stride + k) as isize - g.pad as isize;
                if pos >= 0 && (pos as usize) < g.in_len {
                    *d = src[pos as usize];
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: `[C·K, out_len] → [C, in_len]`.
pub(crate) fn col2im(cols: &Tensor, channels: usize, g: &ConvGeom) -> Tensor {
    let mut x = Tensor::zeros(channels, g.in_len);
    for ci in 0..channels {
        for k in 0..g.kernel {
            let src = cols.row(ci * g.kernel + k).to_vec();
            let dst = x.row_mut(ci);
            for (t, s) in src.iter().enumerate() {
                let pos = (t * g.stride + k) as isize - g.pad as isize;
                if pos >= 0 && (pos as usize) < g.in_len {
                    dst[pos as usize] += s;
                }
            }
        }
    }
    x
}

/// Source index pairs and weights for linear resampling along time
/// (half-pixel centers, edges clamped).
pub fn linear_resample_map(from: usize, to: usize) -> Vec<(usize, usize, f64)> {
    (0..to)
        .map(|i| {
            if from == to {
                return (i, i, 0.0);
            }
            let src = ((i as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(from - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

enum Op {
    Constant,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `x[C, L] + b[C, 1]`
    AddBias(Var, Var),
    /// `x · (1 + scale) + shift` with per-channel `scale`, `shift` of shape `[C, 1]`.
    Film {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Tensor,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Silu(Var),
    Gelu(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    Resample {
        x: Var,
        map: Vec<(usize, usize, f64)>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    MseLoss {
        x: Var,
        target: Tensor,
    },
    L1Loss {
        x: Var,
        target: Tensor,
    },
    StftMagL1 {
        x: Var,
        plan: Arc<StftPlan>,
        spectrum: Vec<Complex<f64>>,
        diff_sign: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Parameter gradients indexed by slot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&Tensor> {
        self.slots.get(slot).and_then(Option::as_ref)
    }

    fn add(&mut self, slot: usize, g: &Tensor) {
        if self.slots.len() <= slot {
            self.slots.resize(slot + 1, None);
        }
        match &mut self.slots[slot] {
            Some(acc) => acc.axpy(1.0, g),
            s @ None => *s = Some(g.clone()),
        }
    }

    /// Accumulates another set of gradients into this one.
    pub fn merge(&mut self, other: &Gradients) {
        for (slot, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.add(slot, g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.slots.iter_mut().flatten() {
            *g = g.scale(s);
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = matches!(op, Op::Param(_)) || parents.iter().any(|&p| self.needs(p));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, &[])
    }

    pub fn param(&mut self, slot: usize, t: Tensor) -> Var {
        self.push(t, Op::Param(slot), &[])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b)).expect("add shape");
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b)).expect("sub shape");
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y).expect("mul shape");
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        assert_eq!(bv.shape(), (xv.rows(), 1), "bias shape");
        let mut out = xv.clone();
        for c in 0..out.rows() {
            let bc = bv.get(c, 0);
            out.row_mut(c).iter_mut().for_each(|v| *v += bc);
        }
        self.push(out, Op::AddBias(x, b), &[x, b])
    }

    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xv = self.value(x);
        let (sc, sh) = (self.value(scale), self.value(shift));
        assert_eq!(sc.shape(), (xv.rows(), 1), "film scale shape");
        assert_eq!(sh.shape(), (xv.rows(), 1), "film shift shape");
        let mut out = xv.clone();
        for c in 0..out.rows() {
            let (a, b) = (1.0 + sc.get(c, 0), sh.get(c, 0));
            out.row_mut(c).iter_mut().for_each(|v| *v = *v * a + b);
        }
        self.push(out, Op::Film { x, scale, shift }, &[x, scale, shift])
    }

    /// 1-D convolution; `w` is `[C_out, C_in · K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(wv.cols(), xv.rows() * kernel, "conv weight shape");
        let geom = ConvGeom::conv(xv.cols(), kernel, stride, pad);
        let cols = im2col(xv, &geom);
        let mut out = Tensor::zeros(wv.rows(), geom.out_len);
        gemm(MatRef::new(wv), MatRef::new(&cols), &mut out, false);
        self.push(out, Op::Conv { x, w, geom, cols }, &[x, w])
    }

    /// Transposed 1-D convolution; `w` is `[C_in, C_out · K]`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(wv.rows(), xv.rows(), "transposed conv weight shape");
        assert_eq!(wv.cols() % kernel, 0);
        let c_out = wv.cols() / kernel;
        let geom = ConvGeom::transposed(xv.cols(), kernel, stride, pad);
        let mut cols = Tensor::zeros(wv.cols(), xv.cols());
        gemm(MatRef::new(wv).t(), MatRef::new(xv), &mut cols, false);
        let out = col2im(&cols, c_out, &geom);
        self.push(out, Op::ConvTranspose { x, w, geom }, &[x, w])
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xv = self.value(x);
        let (c, l) = xv.shape();
        assert!(groups >= 1 && c % groups == 0, "channels {c} not divisible by groups {groups}");
        let per = c / groups;
        let n = (per * l) as f64;
        let mut xhat = Tensor::zeros(c, l);
        let mut rstd = Vec::with_capacity(groups);
        for g in 0..groups {
            let rows = g * per..(g + 1) * per;
            let mean = rows.clone().map(|r| xv.row(r).iter().sum::<f64>()).sum::<f64>() / n;
            let var = rows
                .clone()
                .map(|r| xv.row(r).iter().map(|v| (v - mean).powi(2)).sum::<f64>())
                .sum::<f64>()
                / n;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for r in rows {
                for (o, &v) in xhat.row_mut(r).iter_mut().zip(xv.row(r)) {
                    *o = (v - mean) * rs;
                }
            }
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut out = xhat.clone();
        for r in 0..c {
            let (ga, be) = (gv.get(r, 0), bv.get(r, 0));
            out.row_mut(r).iter_mut().for_each(|v| *v = *v * ga + be);
        }
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * sigmoid(a));
        self.push(v, Op::Silu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { slope * a });
        self.push(v, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b)).expect("matmul shape");
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&vals).expect("concat shape");
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Linear interpolation of every row to `to` columns.
    pub fn resample_cols(&mut self, x: Var, to: usize) -> Var {
        let xv = self.value(x);
        let map = linear_resample_map(xv.cols(), to);
        let mut out = Tensor::zeros(xv.rows(), to);
        for r in 0..xv.rows() {
            let src = xv.row(r);
            for (o, &(i0, i1, w)) in out.row_mut(r).iter_mut().zip(&map) {
                *o = src[i0] * (1.0 - w) + src[i1] * w;
            }
        }
        self.push(out, Op::Resample { x, map }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice_cols(start, end);
        self.push(v, Op::SliceCols { x, start }, &[x])
    }

    /// Row `r` of `x` as a `1 × L` node.
    pub fn row(&mut self, x: Var, r: usize) -> Var {
        let xt = self.transpose(x);
        let col = self.slice_cols(xt, r, r + 1);
        self.transpose(col)
    }

    /// Mean squared error against a constant target, as a `1 × 1` tensor.
    pub fn mse_loss(&mut self, x: Var, target: &Tensor) -> Var {
        let xv = self.value(x);
        xv.check_same_shape(target).expect("mse shape");
        let l = xv.sub(target).unwrap().sum_sq() / xv.len().max(1) as f64;
        self.push(
            Tensor::full(1, 1, l),
            Op::MseLoss {
                x,
                target: target.clone(),
            },
            &[x],
        )
    }

    pub fn l1_loss(&mut self, x: Var, target: &Tensor) -> Var {
        let xv = self.value(x);
        xv.check_same_shape(target).expect("l1 shape");
        let l = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / xv.len().max(1) as f64;
        self.push(
            Tensor::full(1, 1, l),
            Op::L1Loss {
                x,
                target: target.clone(),
            },
            &[x],
        )
    }

    /// Mean absolute STFT-magnitude difference of a single-row signal
    /// against precomputed target magnitudes.
    pub fn stft_mag_l1(&mut self, x: Var, plan: Arc<StftPlan>, target_mag: &[f64]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), 1, "stft loss expects a single-row signal");
        let spectrum = plan.spectrum(xv.data());
        assert_eq!(spectrum.len(), target_mag.len(), "stft target shape");
        let n = spectrum.len() as f64;
        let mut loss = 0.0;
        let diff_sign: Vec<f64> = spectrum
            .iter()
            .zip(target_mag)
            .map(|(s, &t)| {
                let d = s.norm() - t;
                loss += d.abs();
                d.signum() / n
            })
            .collect();
        self.push(
            Tensor::full(1, 1, loss / n),
            Op::StftMagL1 {
                x,
                plan,
                spectrum,
                diff_sign,
            },
            &[x],
        )
    }

    /// Back-propagates from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        let seed = Tensor::full(1, 1, 1.0);
        assert_eq!(self.value(out).shape(), (1, 1), "backward expects a scalar output");
        self.backward_with(out, seed)
    }

    pub fn backward_with(&self, out: Var, seed: Tensor) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(seed);
        let mut params = Gradients::default();

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads, &mut params);
        }
        params
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(1.0, &g),
            s @ None => *s = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>], params: &mut Gradients) {
        match &node.op {
            Op::Constant => {}
            Op::Param(slot) => params.add(*slot, g),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.acc(grads, *a, g.zip_map(bv, |x, y| x * y).unwrap());
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g.zip_map(av, |x, y| x * y).unwrap());
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.scale(*s)),
            Op::AddBias(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.needs(*b) {
                    let db = Tensor::from_fn(g.rows(), 1, |r, _| g.row(r).iter().sum());
                    self.acc(grads, *b, db);
                }
            }
            Op::Film { x, scale, shift } => {
                let sc = self.value(*scale);
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for r in 0..dx.rows() {
                        let a = 1.0 + sc.get(r, 0);
                        dx.row_mut(r).iter_mut().for_each(|v| *v *= a);
                    }
                    self.acc(grads, *x, dx);
                }
                if self.needs(*scale) {
                    let xv = self.value(*x);
                    let ds = Tensor::from_fn(g.rows(), 1, |r, _| {
                        g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum()
                    });
                    self.acc(grads, *scale, ds);
                }
                if self.needs(*shift) {
                    let dh = Tensor::from_fn(g.rows(), 1, |r, _| g.row(r).iter().sum());
                    self.acc(grads, *shift, dh);
                }
            }
            Op::Conv { x, w, geom, cols } => {
                let wv = self.value(*w);
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(wv.rows(), wv.cols());
                    gemm(MatRef::new(g), MatRef::new(cols).t(), &mut dw, false);
                    self.acc(grads, *w, dw);
                }
                if self.needs(*x) {
                    let mut dcols = Tensor::zeros(wv.cols(), geom.out_len);
                    gemm(MatRef::new(wv).t(), MatRef::new(g), &mut dcols, false);
                    let c_in = self.value(*x).rows();
                    self.acc(grads, *x, col2im(&dcols, c_in, geom));
                }
            }
            Op::ConvTranspose { x, w, geom } => {
                let wv = self.value(*w);
                let xv = self.value(*x);
                let dcols = im2col(g, geom);
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(wv.rows(), wv.cols());
                    gemm(MatRef::new(xv), MatRef::new(&dcols).t(), &mut dw, false);
                    self.acc(grads, *w, dw);
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    gemm(MatRef::new(wv), MatRef::new(&dcols), &mut dx, false);
                    self.acc(grads, *x, dx);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let (c, l) = g.shape();
                let gv = self.value(*gamma);
                if self.needs(*gamma) {
                    let dg = Tensor::from_fn(c, 1, |r, _| {
                        g.row(r).iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum()
                    });
                    self.acc(grads, *gamma, dg);
                }
                if self.needs(*beta) {
                    let db = Tensor::from_fn(c, 1, |r, _| g.row(r).iter().sum());
                    self.acc(grads, *beta, db);
                }
                if self.needs(*x) {
                    let per = c / groups;
                    let n = (per * l) as f64;
                    let mut dx = Tensor::zeros(c, l);
                    for (grp, &rs) in rstd.iter().enumerate().take(*groups) {
                        let rows = grp * per..(grp + 1) * per;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for r in rows.clone() {
                            let ga = gv.get(r, 0);
                            for (d, xh) in g.row(r).iter().zip(xhat.row(r)) {
                                sum_d += d * ga;
                                sum_dx += d * ga * xh;
                            }
                        }
                        for r in rows {
                            let ga = gv.get(r, 0);
                            let (gr, xr) = (g.row(r), xhat.row(r));
                            for (t, o) in dx.row_mut(r).iter_mut().enumerate() {
                                *o = rs / n * (n * gr[t] * ga - sum_d - xr[t] * sum_dx);
                            }
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Silu(x) => {
                let dx = g
                    .zip_map(self.value(*x), |d, a| {
                        let s = sigmoid(a);
                        d * s * (1.0 + a * (1.0 - s))
                    })
                    .unwrap();
                self.acc(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let dx = g.zip_map(self.value(*x), |d, a| d * gelu_grad(a)).unwrap();
                self.acc(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let dx = g.zip_map(&node.value, |d, y| d * (1.0 - y * y)).unwrap();
                self.acc(grads, *x, dx);
            }
            Op::LeakyRelu(x, slope) => {
                let dx = g
                    .zip_map(self.value(*x), |d, a| if a > 0.0 { d } else { d * slope })
                    .unwrap();
                self.acc(grads, *x, dx);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm(MatRef::new(g), MatRef::new(bv).t(), &mut da, false);
                    self.acc(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(MatRef::new(av).t(), MatRef::new(g), &mut db, false);
                    self.acc(grads, *b, db);
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(d, s)| d * s).sum();
                    for ((o, &d), &s) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = s * (d - dot);
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        let cols = g.cols();
                        let d = Tensor::from_vec(rows, cols, g.data()[off * cols..(off + rows) * cols].to_vec())
                            .unwrap();
                        self.acc(grads, p, d);
                    }
                    off += rows;
                }
            }
            Op::Resample { x, map } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    let gr = g.row(r).to_vec();
                    let dr = dx.row_mut(r);
                    for (d, &(i0, i1, w)) in gr.iter().zip(map) {
                        dr[i0] += d * (1.0 - w);
                        dr[i1] += d * w;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.acc(grads, *x, dx);
            }
            Op::MseLoss { x, target } => {
                let xv = self.value(*x);
                let s = 2.0 * g.get(0, 0) / xv.len().max(1) as f64;
                let dx = xv.zip_map(target, |a, b| s * (a - b)).unwrap();
                self.acc(grads, *x, dx);
            }
            Op::L1Loss { x, target } => {
                let xv = self.value(*x);
                let s = g.get(0, 0) / xv.len().max(1) as f64;
                let dx = xv.zip_map(target, |a, b| s * (a - b).signum()).unwrap();
                self.acc(grads, *x, dx);
            }
            Op::StftMagL1 {
                x,
                plan,
                spectrum,
                diff_sign,
            } => {
                let xv = self.value(*x);
                let up = g.get(0, 0);
                let coef: Vec<f64> = diff_sign.iter().map(|s| s * up).collect();
                let mut dx = vec![0.0; xv.cols()];
                plan.magnitude_vjp(spectrum, &coef, &mut dx);
                self.acc(grads, *x, Tensor::from_vec(1, xv.cols(), dx).unwrap());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite-difference check of d(objective)/d(param) for a graph
    /// builder closure taking one parameter tensor in slot 0.
    fn check_grad(param: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let p = g.param(0, param.clone());
        let out = build(&mut g, p);
        let grads = g.backward(out);
        let analytic = grads.get(0).expect("param gradient").clone();
        let h = 1e-6;
        for i in 0..param.len() {
            let eval = |delta: f64| {
                let mut t = param.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::new();
                let p = g.constant(t);
                let out = build(&mut g, p);
                g.value(out).get(0, 0)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.data()[i];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err < 1e-5, "entry {i}: analytic {an} vs fd {fd}");
        }
    }

    fn pseudo(rows: usize, cols: usize, seed: usize) -> Tensor {
        Tensor::from_fn(rows, cols, |r, c| {
            let k = (r * 31 + c * 17 + seed * 7) % 23;
            k as f64 / 11.0 - 1.0 + 0.01 * seed as f64
        })
    }

    /// Reduces a tensor to a scalar with fixed random-ish weights so every
    /// output entry contributes a distinct gradient.
    fn weighted_sum(g: &mut Graph, v: Var) -> Var {
        let (r, c) = g.value(v).shape();
        let target = pseudo(r, c, 99);
        g.mse_loss(v, &target)
    }

    #[test]
    fn conv_gradients() {
        let x = pseudo(3, 11, 1);
        let w = pseudo(4, 9, 2);
        check_grad(w.clone(), |g, w| {
            let x = g.constant(x.clone());
            let y = g.conv1d(x, w, 3, 2, 1);
            weighted_sum(g, y)
        });
        check_grad(x, |g, x| {
            let w = g.constant(w.clone());
            let y = g.conv1d(x, w, 3, 2, 1);
            weighted_sum(g, y)
        });
    }

    #[test]
    fn conv_transpose_gradients_and_length() {
        let x = pseudo(3, 6, 3);
        let w = pseudo(3, 2 * 4, 4);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv_transpose1d(xv, wv, 4, 2, 1);
        assert_eq!(g.value(y).shape(), (2, 12));
        check_grad(w.clone(), |g, w| {
            let x = g.constant(x.clone());
            let y = g.conv_transpose1d(x, w, 4, 2, 1);
            weighted_sum(g, y)
        });
        check_grad(x, |g, x| {
            let w = g.constant(w.clone());
            let y = g.conv_transpose1d(x, w, 4, 2, 1);
            weighted_sum(g, y)
        });
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        let x = pseudo(2, 9, 5);
        let y = pseudo(3, 5, 6);
        let w = pseudo(3, 2 * 3, 7);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let cx = g.conv1d(xv, wv, 3, 2, 1);
        let yv = g.constant(y.clone());
        let wt = g.constant(w.clone());
        let ty = g.conv_transpose1d(yv, wt, 3, 2, 1);
        let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn norm_and_activation_gradients() {
        let x = pseudo(4, 5, 8);
        let gamma = pseudo(4, 1, 9);
        check_grad(x.clone(), |g, x| {
            let ga = g.constant(gamma.clone());
            let be = g.constant(pseudo(4, 1, 10));
            let y = g.group_norm(x, ga, be, 2, 1e-5);
            weighted_sum(g, y)
        });
        check_grad(gamma, |g, ga| {
            let x = g.constant(x.clone());
            let be = g.constant(pseudo(4, 1, 10));
            let y = g.group_norm(x, ga, be, 2, 1e-5);
            weighted_sum(g, y)
        });
        for act in 0..4 {
            check_grad(x.clone(), |g, x| {
                let y = match act {
                    0 => g.silu(x),
                    1 => g.gelu(x),
                    2 => g.tanh(x),
                    _ => g.leaky_relu(x, 0.2),
                };
                weighted_sum(g, y)
            });
        }
    }

    #[test]
    fn attention_style_gradients() {
        let x = pseudo(3, 4, 11);
        check_grad(x.clone(), |g, x| {
            let xt = g.transpose(x);
            let s = g.matmul(xt, x);
            let s = g.scale(s, 0.5);
            let a = g.softmax_rows(s);
            let at = g.transpose(a);
            let y = g.matmul(x, at);
            weighted_sum(g, y)
        });
    }

    #[test]
    fn film_concat_resample_slice_gradients() {
        let x = pseudo(3, 7, 12);
        let sc = pseudo(3, 1, 13);
        check_grad(sc.clone(), |g, s| {
            let x = g.constant(x.clone());
            let h = g.constant(pseudo(3, 1, 14));
            let y = g.film(x, s, h);
            weighted_sum(g, y)
        });
        check_grad(x.clone(), |g, x| {
            let s = g.constant(sc.clone());
            let h = g.constant(pseudo(3, 1, 14));
            let y = g.film(x, s, h);
            let other = g.constant(pseudo(2, 7, 15));
            let c = g.concat_rows(&[y, other, x]);
            let r = g.resample_cols(c, 4);
            let r2 = g.resample_cols(c, 13);
            let s1 = g.slice_cols(r2, 2, 9);
            let l1 = weighted_sum(g, r);
            let l2 = weighted_sum(g, s1);
            g.add(l1, l2)
        });
    }

    #[test]
    fn loss_gradients() {
        // Irregular input keeps every STFT bin away from |X| = 0.
        let x = Tensor::from_fn(1, 40, |_, c| (c as f64 * 1.37).sin() * 0.4 + 0.05);
        let target = pseudo(1, 40, 17);
        let plan = Arc::new(StftPlan::new(16, 8).unwrap());
        let tmag = plan.magnitude(target.data());
        check_grad(x.clone(), |g, x| {
            let a = g.stft_mag_l1(x, plan.clone(), &tmag);
            let b = g.l1_loss(x, &target);
            g.add(a, b)
        });
    }

    #[test]
    fn resample_identity_when_lengths_match() {
        let x = pseudo(2, 9, 18);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let r = g.resample_cols(v, 9);
        assert_eq!(g.value(r), &x);
    }

    #[test]
    fn frozen_branches_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(pseudo(2, 2, 1));
        let b = g.param(3, pseudo(2, 2, 2));
        let c = g.mul(a, b);
        let l = weighted_sum(&mut g, c);
        let grads = g.backward(l);
        assert!(grads.get(3).is_some());
        assert!(grads.get(0).is_none());
    }
}
