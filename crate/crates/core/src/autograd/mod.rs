// SPDX-License-Identifier: Apache-2.0

//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Var`] is a reference-counted node. Nodes built only from constants
//! record nothing, so inference frees intermediates as soon as they drop.
//! Node ids grow monotonically, which makes descending id order a valid
//! reverse topological order for [`Var::backward`].

pub(crate) mod kernels;

use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;

use crate::dsp::StftPlan;
use crate::tensor::{strides, Tensor};
use kernels::{Conv2dSpec, ConvGeom, ConvT2dSpec};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone)]
pub struct Var(Rc<Node>);

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Elu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Softmax(Var),
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvT2dSpec,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        axis: NormAxis,
    },
    Affine {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Istft {
        x: Var,
        plan: Arc<StftPlan>,
    },
    Scalar {
        x: Var,
        grad: Vec<f64>,
    },
}

/// Which statistics a normalization op uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NormAxis {
    /// Per channel over batch and both spatial axes.
    Batch,
    /// Per (batch, row, column) position over channels.
    Channel,
}

impl Drop for Node {
    fn drop(&mut self) {
        // Unlink long chains iteratively so deep graphs cannot overflow the stack.
        let mut stack: Vec<Var> = Vec::new();
        take_inputs(&mut self.op, &mut stack);
        while let Some(v) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(v.0) {
                take_inputs(&mut node.op, &mut stack);
            }
        }
    }
}

fn take_inputs(op: &mut Op, out: &mut Vec<Var>) {
    let op = std::mem::replace(op, Op::Leaf);
    match op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Bmm { a, b, .. } => {
            out.push(a);
            out.push(b);
        }
        Op::Scale(a, _)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Elu(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Reshape(a)
        | Op::Permute(a, _)
        | Op::Slice(a, _, _)
        | Op::Softmax(a)
        | Op::Istft { x: a, .. }
        | Op::Scalar { x: a, .. } => out.push(a),
        Op::Concat(xs, _) => out.extend(xs),
        Op::Conv2d { x, w, b, .. } | Op::ConvT2d { x, w, b, .. } => {
            out.push(x);
            out.push(w);
            out.extend(b);
        }
        Op::Norm { x, gamma, beta, .. } | Op::Affine { x, gamma, beta, .. } => {
            out.push(x);
            out.push(gamma);
            out.push(beta);
        }
    }
}

impl Op {
    fn inputs(&self) -> Vec<&Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Bmm { a, b, .. } => vec![a, b],
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Elu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Slice(a, _, _)
            | Op::Softmax(a)
            | Op::Istft { x: a, .. }
            | Op::Scalar { x: a, .. } => vec![a],
            Op::Concat(xs, _) => xs.iter().collect(),
            Op::Conv2d { x, w, b, .. } | Op::ConvT2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b.iter());
                v
            }
            Op::Norm { x, gamma, beta, .. } | Op::Affine { x, gamma, beta, .. } => {
                vec![x, gamma, beta]
            }
        }
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Maps every element of `a` to the element of the broadcast operand `b`.
fn bcast_map(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast rank mismatch {a:?} vs {b:?}");
    for (x, y) in a.iter().zip(b) {
        assert!(x == y || *y == 1, "cannot broadcast {b:?} into {a:?}");
    }
    let bs = strides(b);
    let es: Vec<usize> = b
        .iter()
        .zip(&bs)
        .map(|(d, s)| if *d == 1 { 0 } else { *s })
        .collect();
    let n: usize = a.iter().product();
    let nd = a.len();
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(off);
        for k in (0..nd).rev() {
            idx[k] += 1;
            off += es[k];
            if idx[k] < a[k] {
                break;
            }
            off -= es[k] * a[k];
            idx[k] = 0;
        }
    }
    out
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let es: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let mut out = Vec::with_capacity(data.len());
    for _ in 0..data.len() {
        out.push(data[off]);
        for k in (0..nd).rev() {
            idx[k] += 1;
            off += es[k];
            if idx[k] < out_shape[k] {
                break;
            }
            off -= es[k] * out_shape[k];
            idx[k] = 0;
        }
    }
    (out_shape, out)
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_geom(
    x_shape: &[usize],
    w_shape: &[usize],
    groups: usize,
    stride: (usize, usize),
    padding: (usize, usize),
    dilation: (usize, usize),
) -> Conv2dSpec {
    assert_eq!(
        x_shape.len(),
        4,
        "conv2d input must be NCHW, got {x_shape:?}"
    );
    assert_eq!(w_shape.len(), 4, "conv2d weight must be 4-D");
    let (batch, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (cout, cin_g, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    assert!(groups >= 1 && cin % groups == 0 && cout % groups == 0);
    assert_eq!(
        cin_g * groups,
        cin,
        "conv2d weight {w_shape:?} vs input {x_shape:?}"
    );
    let oh = ConvGeom::out_len(h, kh, stride.0, padding.0, dilation.0);
    let ow = ConvGeom::out_len(w, kw, stride.1, padding.1, dilation.1);
    Conv2dSpec {
        batch,
        cin,
        cout,
        groups,
        geom: ConvGeom {
            channels: cin_g,
            h,
            w,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            dh: dilation.0,
            dw: dilation.1,
            oh,
            ow,
        },
    }
}

impl Var {
    fn from_op(value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| v.0.requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            op,
        }))
    }

    fn leaf(value: Tensor, requires_grad: bool) -> Var {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            op: Op::Leaf,
        }))
    }

    /// A trainable leaf.
    pub fn param(value: Tensor) -> Var {
        Self::leaf(value, true)
    }

    pub fn constant(value: Tensor) -> Var {
        Self::leaf(value, false)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.0.value.data()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    fn binary(&self, other: &Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let a = self.value();
        let b = other.value();
        let data = if a.shape() == b.shape() {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| f(*x, *y))
                .collect()
        } else {
            let map = bcast_map(a.shape(), b.shape());
            a.data()
                .iter()
                .zip(&map)
                .map(|(x, j)| f(*x, b.data()[*j]))
                .collect()
        };
        Tensor::new(a.shape().to_vec(), data)
    }

    /// `self + other`; `other` may broadcast along size-1 axes.
    pub fn add(&self, other: &Var) -> Var {
        Self::from_op(
            self.binary(other, |x, y| x + y),
            Op::Add(self.clone(), other.clone()),
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        Self::from_op(
            self.binary(other, |x, y| x - y),
            Op::Sub(self.clone(), other.clone()),
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        Self::from_op(
            self.binary(other, |x, y| x * y),
            Op::Mul(self.clone(), other.clone()),
        )
    }

    pub fn scale(&self, k: f64) -> Var {
        Self::from_op(self.value().map(|v| v * k), Op::Scale(self.clone(), k))
    }

    pub fn sigmoid(&self) -> Var {
        Self::from_op(self.value().map(sigmoid), Op::Sigmoid(self.clone()))
    }

    pub fn tanh(&self) -> Var {
        Self::from_op(self.value().map(f64::tanh), Op::Tanh(self.clone()))
    }

    pub fn elu(&self) -> Var {
        Self::from_op(self.value().map(elu), Op::Elu(self.clone()))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Var {
        let s = self.data().iter().sum();
        Self::from_op(Tensor::scalar(s), Op::Sum(self.clone()))
    }

    /// Mean over `axes`, keeping them as size-1 dimensions.
    pub fn mean_axes(&self, axes: &[usize]) -> Var {
        let shape = self.shape();
        let mut out_shape = shape.to_vec();
        for &a in axes {
            out_shape[a] = 1;
        }
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let map = bcast_map(shape, &out_shape);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (v, j) in self.data().iter().zip(&map) {
            out[*j] += v;
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Self::from_op(Tensor::new(out_shape, out), Op::Mean(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let t = self.value().clone().reshaped(shape);
        Self::from_op(t, Op::Reshape(self.clone()))
    }

    pub fn permute(&self, perm: &[usize]) -> Var {
        assert_eq!(perm.len(), self.shape().len());
        let (shape, data) = permute_data(self.data(), self.shape(), perm);
        Self::from_op(
            Tensor::new(shape, data),
            Op::Permute(self.clone(), perm.to_vec()),
        )
    }

    pub fn concat(xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let base = xs[0].shape().to_vec();
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for x in xs {
            let s = x.shape();
            assert_eq!(s.len(), base.len());
            for (k, (p, q)) in s.iter().zip(&base).enumerate() {
                assert!(
                    k == axis || p == q,
                    "concat shape mismatch {s:?} vs {base:?}"
                );
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for x in xs {
                let chunk = x.shape()[axis] * inner;
                out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Self::from_op(Tensor::new(out_shape, out), Op::Concat(xs.to_vec(), axis))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape();
        assert!(
            start + len <= shape[axis],
            "slice {start}+{len} out of {shape:?} on axis {axis}"
        );
        let (outer, n, inner) = split_at_axis(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        Self::from_op(
            Tensor::new(out_shape, out),
            Op::Slice(self.clone(), axis, start),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var {
        let n = *self.shape().last().expect("softmax of a scalar");
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Self::from_op(
            Tensor::new(self.shape().to_vec(), out),
            Op::Softmax(self.clone()),
        )
    }

    /// Batched product of `[B, m, k]` by `[B, k, n]`; flags transpose the
    /// stored last two axes. Rank-2 operands are treated as `B = 1`.
    pub fn bmm(&self, other: &Var, ta: bool, tb: bool) -> Var {
        let (batch, m, k, n) = bmm_dims(self.shape(), other.shape(), ta, tb);
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &a[i * m * k..(i + 1) * m * k],
                ta,
                &b[i * k * n..(i + 1) * k * n],
                tb,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let shape = if self.shape().len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        Self::from_op(
            Tensor::new(shape, out),
            Op::Bmm {
                a: self.clone(),
                b: other.clone(),
                ta,
                tb,
            },
        )
    }

    /// Grouped 2-D convolution of an NCHW input with `w: [cout, cin/groups, kh, kw]`.
    pub fn conv2d(
        &self,
        w: &Var,
        b: Option<&Var>,
        stride: (usize, usize),
        padding: (usize, usize),
        dilation: (usize, usize),
        groups: usize,
    ) -> Var {
        let spec = conv_geom(self.shape(), w.shape(), groups, stride, padding, dilation);
        if let Some(b) = b {
            assert_eq!(b.shape(), &[spec.cout], "conv2d bias shape");
        }
        let out = kernels::conv2d_forward(&spec, self.data(), w.data(), b.map(|b| b.data()));
        let shape = vec![spec.batch, spec.cout, spec.geom.oh, spec.geom.ow];
        Self::from_op(
            Tensor::new(shape, out),
            Op::Conv2d {
                x: self.clone(),
                w: w.clone(),
                b: b.cloned(),
                spec,
            },
        )
    }

    /// Transposed convolution with `w: [cin, cout, kh, kw]`; `output_padding`
    /// extends the bottom/right edge to reach an exact output size.
    pub fn conv_transpose2d(
        &self,
        w: &Var,
        b: Option<&Var>,
        stride: (usize, usize),
        padding: (usize, usize),
        output_padding: (usize, usize),
    ) -> Var {
        let xs = self.shape();
        let ws = w.shape();
        assert_eq!(xs.len(), 4);
        assert_eq!(ws.len(), 4);
        assert_eq!(
            xs[1], ws[0],
            "conv_transpose2d weight {ws:?} vs input {xs:?}"
        );
        let (batch, cin, sh_, sw_) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
        assert!(
            output_padding.0 < stride.0 && output_padding.1 < stride.1,
            "output padding must be below the stride"
        );
        let big_h = (sh_ - 1) * stride.0 + kh - 2 * padding.0 + output_padding.0;
        let big_w = (sw_ - 1) * stride.1 + kw - 2 * padding.1 + output_padding.1;
        let geom = ConvGeom {
            channels: cout,
            h: big_h,
            w: big_w,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            dh: 1,
            dw: 1,
            oh: sh_,
            ow: sw_,
        };
        assert_eq!(ConvGeom::out_len(big_h, kh, stride.0, padding.0, 1), sh_);
        assert_eq!(ConvGeom::out_len(big_w, kw, stride.1, padding.1, 1), sw_);
        let spec = ConvT2dSpec {
            batch,
            cin,
            cout,
            geom,
        };
        if let Some(b) = b {
            assert_eq!(b.shape(), &[cout], "conv_transpose2d bias shape");
        }
        let out = kernels::conv_t2d_forward(&spec, self.data(), w.data(), b.map(|b| b.data()));
        Self::from_op(
            Tensor::new(vec![batch, cout, big_h, big_w], out),
            Op::ConvT2d {
                x: self.clone(),
                w: w.clone(),
                b: b.cloned(),
                spec,
            },
        )
    }

    /// Training-mode batch normalization of NCHW input; also returns the
    /// per-channel batch mean and biased variance.
    pub fn batch_norm(&self, gamma: &Var, beta: &Var) -> (Var, Vec<f64>, Vec<f64>) {
        self.normalize(gamma, beta, NormAxis::Batch)
    }

    /// Normalization over channels at every (batch, row, column) position
    /// with per-channel affine parameters.
    pub fn channel_layer_norm(&self, gamma: &Var, beta: &Var) -> Var {
        self.normalize(gamma, beta, NormAxis::Channel).0
    }

    fn normalize(&self, gamma: &Var, beta: &Var, axis: NormAxis) -> (Var, Vec<f64>, Vec<f64>) {
        let s = self.shape();
        assert_eq!(s.len(), 4, "normalization expects NCHW");
        let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
        assert_eq!(gamma.shape(), &[c]);
        assert_eq!(beta.shape(), &[c]);
        let x = self.data();
        let groups = match axis {
            NormAxis::Batch => c,
            NormAxis::Channel => b * plane,
        };
        let group_of = |i: usize| -> usize {
            let ch = (i / plane) % c;
            match axis {
                NormAxis::Batch => ch,
                NormAxis::Channel => (i / (c * plane)) * plane + i % plane,
            }
        };
        let count = (x.len() / groups) as f64;
        let mut mean = vec![0.0; groups];
        for (i, v) in x.iter().enumerate() {
            mean[group_of(i)] += v;
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; groups];
        for (i, v) in x.iter().enumerate() {
            let d = v - mean[group_of(i)];
            var[group_of(i)] += d * d;
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let g = gamma.data();
        let bt = beta.data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for (i, v) in x.iter().enumerate() {
            let k = group_of(i);
            let ch = (i / plane) % c;
            xhat[i] = (v - mean[k]) * inv_std[k];
            out[i] = g[ch] * xhat[i] + bt[ch];
        }
        let y = Self::from_op(
            Tensor::new(s.to_vec(), out),
            Op::Norm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
                axis,
            },
        );
        (y, mean, var)
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_frozen(&self, gamma: &Var, beta: &Var, mean: &[f64], var: &[f64]) -> Var {
        let s = self.shape();
        assert_eq!(s.len(), 4, "normalization expects NCHW");
        let (c, plane) = (s[1], s[2] * s[3]);
        assert_eq!(mean.len(), c);
        assert_eq!(var.len(), c);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let g = gamma.data();
        let bt = beta.data();
        let mut xhat = vec![0.0; self.data().len()];
        let mut out = vec![0.0; xhat.len()];
        for (i, v) in self.data().iter().enumerate() {
            let ch = (i / plane) % c;
            xhat[i] = (v - mean[ch]) * inv_std[ch];
            out[i] = g[ch] * xhat[i] + bt[ch];
        }
        Self::from_op(
            Tensor::new(s.to_vec(), out),
            Op::Affine {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
            },
        )
    }

    /// Inverse STFT of `[B, 2, T, F]` real/imaginary planes into `[B, len]`.
    pub fn istft(&self, plan: &Arc<StftPlan>, len: usize) -> Var {
        let s = self.shape();
        assert_eq!(s.len(), 4);
        assert_eq!(s[1], 2, "istft expects real/imag planes");
        assert_eq!(s[3], plan.config().n_bins(), "istft bin count");
        let (b, t, f) = (s[0], s[2], s[3]);
        let plane = t * f;
        let x = self.data();
        let rows: Vec<Vec<f64>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let base = i * 2 * plane;
                plan.synthesize(
                    &x[base..base + plane],
                    &x[base + plane..base + 2 * plane],
                    t,
                    len,
                )
            })
            .collect();
        Self::from_op(
            Tensor::new(vec![b, len], rows.concat()),
            Op::Istft {
                x: self.clone(),
                plan: plan.clone(),
            },
        )
    }

    /// A scalar computed outside the graph together with its gradient.
    pub fn custom_scalar(&self, value: f64, grad: Vec<f64>) -> Var {
        assert_eq!(grad.len(), self.data().len());
        Self::from_op(
            Tensor::scalar(value),
            Op::Scalar {
                x: self.clone(),
                grad,
            },
        )
    }

    /// Reverse sweep from this one-element node.
    pub fn backward(&self) -> Grads {
        assert_eq!(
            self.data().len(),
            1,
            "backward from a non-scalar of shape {:?}",
            self.shape()
        );
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        if !self.requires_grad() {
            return Grads { grads };
        }
        let mut order: Vec<Var> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.id());
        while let Some(v) = stack.pop() {
            for inp in v.0.op.inputs() {
                if inp.requires_grad() && seen.insert(inp.id()) {
                    stack.push(inp.clone());
                }
            }
            order.push(v);
        }
        order.sort_by_key(|v| std::cmp::Reverse(v.id()));
        grads.insert(self.id(), vec![1.0]);
        for v in &order {
            if matches!(v.0.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads.remove(&v.id()) else {
                continue;
            };
            v.propagate(&g, &mut grads);
        }
        Grads { grads }
    }

    fn propagate(&self, g: &[f64], grads: &mut HashMap<u64, Vec<f64>>) {
        let acc = |grads: &mut HashMap<u64, Vec<f64>>, v: &Var, d: Vec<f64>| {
            if !v.requires_grad() {
                return;
            }
            match grads.get_mut(&v.id()) {
                Some(e) => e.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                None => {
                    grads.insert(v.id(), d);
                }
            }
        };
        let out = self.data();
        match &self.0.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.0.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                acc(grads, a, g.to_vec());
                if b.requires_grad() {
                    acc(grads, b, reduce_to(g, a.shape(), b.shape(), sign));
                }
            }
            Op::Mul(a, b) => {
                let bv = b.data();
                let same = a.shape() == b.shape();
                let map = if same {
                    Vec::new()
                } else {
                    bcast_map(a.shape(), b.shape())
                };
                let bidx = |i: usize| if same { i } else { map[i] };
                if a.requires_grad() {
                    acc(
                        grads,
                        a,
                        g.iter()
                            .enumerate()
                            .map(|(i, gi)| gi * bv[bidx(i)])
                            .collect(),
                    );
                }
                if b.requires_grad() {
                    let av = a.data();
                    let mut db = vec![0.0; bv.len()];
                    for (i, gi) in g.iter().enumerate() {
                        db[bidx(i)] += gi * av[i];
                    }
                    acc(grads, b, db);
                }
            }
            Op::Scale(a, k) => acc(grads, a, g.iter().map(|v| v * k).collect()),
            Op::Sigmoid(a) => acc(
                grads,
                a,
                g.iter()
                    .zip(out)
                    .map(|(gi, y)| gi * y * (1.0 - y))
                    .collect(),
            ),
            Op::Tanh(a) => acc(
                grads,
                a,
                g.iter()
                    .zip(out)
                    .map(|(gi, y)| gi * (1.0 - y * y))
                    .collect(),
            ),
            Op::Elu(a) => acc(
                grads,
                a,
                g.iter()
                    .zip(a.data())
                    .zip(out)
                    .map(|((gi, x), y)| if *x > 0.0 { *gi } else { gi * (y + 1.0) })
                    .collect(),
            ),
            Op::Sum(a) => acc(grads, a, vec![g[0]; a.data().len()]),
            Op::Mean(a) => {
                let count = a.data().len() / out.len();
                let map = bcast_map(a.shape(), self.shape());
                let inv = 1.0 / count as f64;
                acc(grads, a, map.iter().map(|j| g[*j] * inv).collect());
            }
            Op::Reshape(a) => acc(grads, a, g.to_vec()),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, p) in perm.iter().enumerate() {
                    inv[*p] = i;
                }
                acc(grads, a, permute_data(g, self.shape(), &inv).1);
            }
            Op::Concat(xs, axis) => {
                let (outer, n, inner) = split_at_axis(self.shape(), *axis);
                let mut off = 0;
                for x in xs {
                    let len = x.shape()[*axis];
                    if x.requires_grad() {
                        let mut d = Vec::with_capacity(x.data().len());
                        for o in 0..outer {
                            let base = o * n * inner + off * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        acc(grads, x, d);
                    }
                    off += len;
                }
            }
            Op::Slice(a, axis, start) => {
                let (outer, n, inner) = split_at_axis(a.shape(), *axis);
                let len = self.shape()[*axis];
                let mut d = vec![0.0; a.data().len()];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(grads, a, d);
            }
            Op::Softmax(a) => {
                let n = *self.shape().last().unwrap();
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = yv * (gv - dot);
                    }
                }
                acc(grads, a, d);
            }
            Op::Bmm { a, b, ta, tb } => {
                let (batch, m, k, n) = bmm_dims(a.shape(), b.shape(), *ta, *tb);
                let av = a.data();
                let bv = b.data();
                if a.requires_grad() {
                    let mut d = vec![0.0; av.len()];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let di = &mut d[i * m * k..(i + 1) * m * k];
                        if *ta {
                            kernels::gemm(k, n, m, bi, *tb, gi, true, 0.0, di);
                        } else {
                            kernels::gemm(m, n, k, gi, false, bi, !tb, 0.0, di);
                        }
                    }
                    acc(grads, a, d);
                }
                if b.requires_grad() {
                    let mut d = vec![0.0; bv.len()];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let di = &mut d[i * k * n..(i + 1) * k * n];
                        if *tb {
                            kernels::gemm(n, m, k, gi, true, ai, *ta, 0.0, di);
                        } else {
                            kernels::gemm(k, m, n, ai, !ta, gi, false, 0.0, di);
                        }
                    }
                    acc(grads, b, d);
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    spec,
                    x.data(),
                    w.data(),
                    g,
                    x.requires_grad(),
                    w.requires_grad(),
                    b.as_ref().is_some_and(|b| b.requires_grad()),
                );
                if let Some(dx) = dx {
                    acc(grads, x, dx);
                }
                if w.requires_grad() {
                    acc(grads, w, dw);
                }
                if let Some(b) = b {
                    if b.requires_grad() {
                        acc(grads, b, db);
                    }
                }
            }
            Op::ConvT2d { x, w, b, spec } => {
                let (dx, dw, db) = kernels::conv_t2d_backward(
                    spec,
                    x.data(),
                    w.data(),
                    g,
                    x.requires_grad(),
                    b.as_ref().is_some_and(|b| b.requires_grad()),
                );
                if let Some(dx) = dx {
                    acc(grads, x, dx);
                }
                if w.requires_grad() {
                    acc(grads, w, dw);
                }
                if let Some(b) = b {
                    if b.requires_grad() {
                        acc(grads, b, db);
                    }
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                axis,
            } => {
                let s = x.shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                let gm = gamma.data();
                let (dgamma, dbeta) = affine_param_grads(g, xhat, c, plane);
                if x.requires_grad() {
                    let groups = inv_std.len();
                    let group_of = |i: usize| -> usize {
                        match axis {
                            NormAxis::Batch => (i / plane) % c,
                            NormAxis::Channel => (i / (c * plane)) * plane + i % plane,
                        }
                    };
                    let count = (g.len() / groups) as f64;
                    let mut sum_d = vec![0.0; groups];
                    let mut sum_dx = vec![0.0; groups];
                    for i in 0..g.len() {
                        let k = group_of(i);
                        let d = g[i] * gm[(i / plane) % c];
                        sum_d[k] += d;
                        sum_dx[k] += d * xhat[i];
                    }
                    let mut dx = vec![0.0; g.len()];
                    for i in 0..g.len() {
                        let k = group_of(i);
                        let d = g[i] * gm[(i / plane) % c];
                        dx[i] = inv_std[k] / count * (count * d - sum_d[k] - xhat[i] * sum_dx[k]);
                    }
                    acc(grads, x, dx);
                }
                acc(grads, gamma, dgamma);
                acc(grads, beta, dbeta);
            }
            Op::Affine {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = x.shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                let gm = gamma.data();
                let (dgamma, dbeta) = affine_param_grads(g, xhat, c, plane);
                if x.requires_grad() {
                    let dx = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| {
                            let ch = (i / plane) % c;
                            gi * gm[ch] * inv_std[ch]
                        })
                        .collect();
                    acc(grads, x, dx);
                }
                acc(grads, gamma, dgamma);
                acc(grads, beta, dbeta);
            }
            Op::Istft { x, plan } => {
                let s = x.shape();
                let (b, t, f) = (s[0], s[2], s[3]);
                let len = self.shape()[1];
                let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..b)
                    .into_par_iter()
                    .map(|i| plan.synthesize_adjoint(&g[i * len..(i + 1) * len], t))
                    .collect();
                let mut d = Vec::with_capacity(b * 2 * t * f);
                for (re, im) in parts {
                    d.extend_from_slice(&re);
                    d.extend_from_slice(&im);
                }
                acc(grads, x, d);
            }
            Op::Scalar { x, grad } => acc(grads, x, grad.iter().map(|v| v * g[0]).collect()),
        }
    }
}

fn affine_param_grads(g: &[f64], xhat: &[f64], c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (i, (gi, xh)) in g.iter().zip(xhat).enumerate() {
        let ch = (i / plane) % c;
        dgamma[ch] += gi * xh;
        dbeta[ch] += gi;
    }
    (dgamma, dbeta)
}

/// Sums `g` (shaped like `a`) down to the broadcast shape `b`, times `sign`.
fn reduce_to(g: &[f64], a: &[usize], b: &[usize], sign: f64) -> Vec<f64> {
    if a == b {
        return g.iter().map(|v| v * sign).collect();
    }
    let map = bcast_map(a, b);
    let mut out = vec![0.0; b.iter().product()];
    for (v, j) in g.iter().zip(&map) {
        out[*j] += sign * v;
    }
    out
}

fn bmm_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> (usize, usize, usize, usize) {
    assert_eq!(a.len(), b.len(), "bmm rank mismatch {a:?} vs {b:?}");
    let (batch, a2, b2) = match a.len() {
        2 => (1, a, b),
        3 => {
            assert_eq!(a[0], b[0], "bmm batch mismatch");
            (a[0], &a[1..], &b[1..])
        }
        _ => panic!("bmm expects rank 2 or 3, got {a:?}"),
    };
    let (m, k) = if ta { (a2[1], a2[0]) } else { (a2[0], a2[1]) };
    let (k2, n) = if tb { (b2[1], b2[0]) } else { (b2[0], b2[1]) };
    assert_eq!(k, k2, "bmm inner dimension mismatch {a:?} x {b:?}");
    (batch, m, k, n)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Gradients from one reverse sweep, keyed by node.
#[derive(Debug, Default)]
pub struct Grads {
    grads: HashMap<u64, Vec<f64>>,
}

impl Grads {
    pub fn get(&self, v: &Var) -> Option<&[f64]> {
        self.grads.get(&v.id()).map(|g| g.as_slice())
    }

    /// Gradient of `v`, or zeros when nothing reached it.
    pub fn get_or_zero(&self, v: &Var) -> Tensor {
        match self.get(v) {
            Some(g) => Tensor::new(v.shape().to_vec(), g.to_vec()),
            None => Tensor::zeros(v.shape()),
        }
    }
}

#[cfg(test)]
mod tests;
