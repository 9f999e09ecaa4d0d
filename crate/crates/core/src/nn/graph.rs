//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tensor::{gemm, inverse_permutation, numel, permute_data, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T>, fixed: bool },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    MeanAxis { x: Var, axis: usize },
    Sum(Var),
    AbsSum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics of a training-mode batch norm, for running-average updates.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    pub count: usize,
}

pub struct Graph<'p, T: Real> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    train: bool,
    track: bool,
    updates: Vec<(ParamId, Tensor<T>)>,
    grads: Vec<Option<Tensor<T>>>,
}

/// Shape of `x` viewed as `[outer, len, inner]` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

impl<'p, T: Real> Graph<'p, T> {
    /// Graph that records gradients for trainable parameters.
    pub fn new(store: &'p ParamStore<T>, train: bool) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            train,
            track: true,
            updates: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Eval-mode graph that tracks no gradients.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        let mut g = Self::new(store, false);
        g.track = false;
        g
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.track && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is wanted (used by gradient checks).
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: self.track,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param,
            needs_grad: self.track && p.trainable(),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn push_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.updates.push((id, value));
    }

    /// Buffer values computed during the pass, in recording order.
    pub fn take_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.updates)
    }

    // Elementwise arithmetic

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, what: &str) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape, y.shape, "{what}: shape mismatch");
        Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |p, q| p + q, "add");
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |p, q| p - q, "sub");
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |p, q| p * q, "mul");
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    fn check_suffix(&self, a: Var, b: Var, what: &str) -> usize {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
            "{what}: {sb:?} is not a suffix of {sa:?}"
        );
        numel(sb)
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Var {
        let n = self.check_suffix(a, b, "add_bcast");
        let y = &self.value(b).data;
        let mut t = self.value(a).clone();
        for row in t.data.chunks_mut(n) {
            for (v, &w) in row.iter_mut().zip(y) {
                *v += w;
            }
        }
        self.push(t, Op::AddBcast(a, b), &[a, b])
    }

    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Var {
        let n = self.check_suffix(a, b, "mul_bcast");
        let y = &self.value(b).data;
        let mut t = self.value(a).clone();
        for row in t.data.chunks_mut(n) {
            for (v, &w) in row.iter_mut().zip(y) {
                *v *= w;
            }
        }
        self.push(t, Op::MulBcast(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let t = self.value(a).map(|v| v * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    // Linear algebra

    /// `[..., k] x [k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, w) = (self.value(a), self.value(b));
        assert_eq!(w.rank(), 2, "matmul: rhs must be a matrix");
        let k = *x.shape.last().expect("matmul: scalar lhs");
        assert_eq!(k, w.shape[0], "matmul: inner dims {:?} x {:?}", x.shape, w.shape);
        let n = w.shape[1];
        let m = x.numel() / k.max(1);
        let mut shape = x.shape.clone();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, &x.data, false, &w.data, false, &mut out, false);
        self.push(Tensor { shape, data: out }, Op::MatMul(a, b), &[a, b])
    }

    /// `[g, m, k] x [g, k, n] -> [g, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.rank() == 3 && y.rank() == 3, "bmm: rank-3 operands");
        let (g, m, k) = (x.shape[0], x.shape[1], x.shape[2]);
        assert_eq!(y.shape[0], g, "bmm: batch");
        assert_eq!(y.shape[1], k, "bmm: inner");
        let n = y.shape[2];
        let mut out = vec![T::zero(); g * m * n];
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &x.data[i * m * k..(i + 1) * m * k],
                false,
                &y.data[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        self.push(
            Tensor {
                shape: vec![g, m, n],
                data: out,
            },
            Op::Bmm(a, b),
            &[a, b],
        )
    }

    // Shape manipulation

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(perm.len(), x.rank(), "permute: rank");
        let shape = perm.iter().map(|&p| x.shape[p]).collect();
        let data = permute_data(&x.data, &x.shape, perm);
        self.push(Tensor { shape, data }, Op::Permute(a, perm.to_vec()), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(numel(shape), x.numel(), "reshape {:?} -> {shape:?}", x.shape);
        let t = Tensor {
            shape: shape.to_vec(),
            data: x.data.clone(),
        };
        self.push(t, Op::Reshape(a), &[a])
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let (outer, l, inner) = split_axis(&x.shape, axis);
        assert!(start + len <= l, "slice {start}+{len} beyond {l}");
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * l + start) * inner;
            data.extend_from_slice(&x.data[base..base + len * inner]);
        }
        let mut shape = x.shape.clone();
        shape[axis] = len;
        self.push(Tensor { shape, data }, Op::Slice { x: a, axis, start }, &[a])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat: no inputs");
        let first = self.shape(xs[0]).to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            assert_eq!(s.len(), first.len(), "concat: rank");
            for (i, (&p, &q)) in s.iter().zip(&first).enumerate() {
                assert!(i == axis || p == q, "concat: {s:?} vs {first:?}");
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let x = self.value(v);
                let l = x.shape[axis];
                data.extend_from_slice(&x.data[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            Tensor { shape, data },
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    // Activations

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(T::zero()));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.tanh());
        self.push(t, Op::Tanh(a), &[a])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
        let half = T::from_f64(0.5);
        let t = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(t, Op::Gelu(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = *x.shape.last().expect("softmax: scalar");
        let mut t = x.clone();
        for row in t.data.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        self.push(t, Op::Softmax(a), &[a])
    }

    // Normalization

    /// Normalizes the last axis; `gamma` and `beta` have that axis's length.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let x = self.value(a);
        let d = *x.shape.last().expect("layer_norm: scalar");
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        assert!(g.len() == d && b.len() == d, "layer_norm: affine size");
        let eps = T::from_f64(eps);
        let dn = T::from_f64(d as f64);
        let rows = x.numel() / d.max(1);
        let (mut mean, mut rstd) = (Vec::with_capacity(rows), Vec::with_capacity(rows));
        let mut out = x.clone();
        for row in out.data.chunks_mut(d) {
            let m = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - m) * r * g[j] + b[j];
            }
            mean.push(m);
            rstd.push(r);
        }
        self.push(
            out,
            Op::LayerNorm {
                x: a,
                gamma,
                beta,
                mean,
                rstd,
            },
            &[a, gamma, beta],
        )
    }

    /// Batch norm over the rows of `[m, c]` using batch statistics.
    pub fn batch_norm_train(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats<T>) {
        let x = self.value(a);
        assert_eq!(x.rank(), 2, "batch_norm: expects [rows, channels]");
        let (m, c) = (x.shape[0], x.shape[1]);
        let mn = T::from_f64(m as f64);
        let mut mean = vec![T::zero(); c];
        for row in x.data.chunks(c) {
            for (acc, &v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for v in &mut mean {
            *v = *v / mn;
        }
        let mut var = vec![T::zero(); c];
        for row in x.data.chunks(c) {
            for ((acc, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        for v in &mut var {
            *v = *v / mn;
        }
        let rstd: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
            .collect();
        let out = self.bn_apply(a, gamma, beta, mean.clone(), rstd, false);
        (out, BatchStats { mean, var, count: m })
    }

    /// Batch norm with fixed statistics (eval mode).
    pub fn batch_norm_fixed(&mut self, a: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Var {
        let rstd = var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
            .collect();
        self.bn_apply(a, gamma, beta, mean.to_vec(), rstd, true)
    }

    fn bn_apply(&mut self, a: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T>, fixed: bool) -> Var {
        let x = self.value(a);
        assert_eq!(x.rank(), 2, "batch_norm: expects [rows, channels]");
        let c = x.shape[1];
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        assert!(g.len() == c && b.len() == c && mean.len() == c, "batch_norm: channel count");
        let mut out = x.clone();
        for row in out.data.chunks_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * rstd[j] * g[j] + b[j];
            }
        }
        self.push(
            out,
            Op::BatchNorm {
                x: a,
                gamma,
                beta,
                mean,
                rstd,
                fixed,
            },
            &[a, gamma, beta],
        )
    }

    // Convolution

    /// `x: [n, c, h, w]`, `w: [o, c, kh, kw]` -> `[n, o, ho, wo]`, zero padding.
    pub fn conv2d(&mut self, a: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (x, k) = (self.value(a), self.value(w));
        assert!(x.rank() == 4 && k.rank() == 4, "conv2d: rank-4 operands");
        let geo = ConvGeometry::new(&x.shape, &k.shape, stride, pad);
        let mut out = vec![T::zero(); geo.n * geo.o * geo.p()];
        let mut cols = vec![T::zero(); geo.ckk() * geo.p()];
        for i in 0..geo.n {
            geo.im2col(&x.data[i * geo.image()..(i + 1) * geo.image()], &mut cols);
            gemm(
                geo.o,
                geo.ckk(),
                geo.p(),
                &k.data,
                false,
                &cols,
                false,
                &mut out[i * geo.o * geo.p()..(i + 1) * geo.o * geo.p()],
                false,
            );
        }
        let shape = vec![geo.n, geo.o, geo.ho, geo.wo];
        self.push(
            Tensor { shape, data: out },
            Op::Conv2d {
                x: a,
                w,
                stride,
                pad,
            },
            &[a, w],
        )
    }

    // Reductions

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let x = self.value(a);
        let (outer, l, inner) = split_axis(&x.shape, axis);
        let ln = T::from_f64(l as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..l {
                let src = &x.data[(o * l + j) * inner..(o * l + j + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for v in &mut data {
            *v = *v / ln;
        }
        let mut shape = x.shape.clone();
        shape.remove(axis);
        self.push(Tensor { shape, data }, Op::MeanAxis { x: a, axis }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn abs_sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().map(|v| v.abs()).sum();
        self.push(Tensor::scalar(s), Op::AbsSum(a), &[a])
    }

    // Backward pass

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.value(loss).numel();
        if n != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&self.nodes[loss.0].value.shape, T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter reached by the last backward pass.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data.iter_mut().zip(d) {
                        *a += b;
                    }
                }
                slot => {
                    *slot = Some(Tensor {
                        shape: self.nodes[v.0].value.shape.clone(),
                        data: d,
                    })
                }
            }
        };
        let gd = &g.data;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, gd.clone());
                acc(*b, gd.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gd.clone());
                acc(*b, gd.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (x, z) = (val(*a), val(*b));
                if wants(*a) {
                    acc(*a, gd.iter().zip(&z.data).map(|(&p, &q)| p * q).collect());
                }
                if wants(*b) {
                    acc(*b, gd.iter().zip(&x.data).map(|(&p, &q)| p * q).collect());
                }
            }
            Op::AddBcast(a, b) => {
                acc(*a, gd.clone());
                if wants(*b) {
                    let n = val(*b).numel();
                    let mut d = vec![T::zero(); n];
                    for row in gd.chunks(n) {
                        for (s, &v) in d.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    acc(*b, d);
                }
            }
            Op::MulBcast(a, b) => {
                let (x, z) = (val(*a), val(*b));
                let n = z.numel();
                if wants(*a) {
                    let mut d = gd.clone();
                    for row in d.chunks_mut(n) {
                        for (v, &w) in row.iter_mut().zip(&z.data) {
                            *v *= w;
                        }
                    }
                    acc(*a, d);
                }
                if wants(*b) {
                    let mut d = vec![T::zero(); n];
                    for (row, xr) in gd.chunks(n).zip(x.data.chunks(n)) {
                        for ((s, &v), &xv) in d.iter_mut().zip(row).zip(xr) {
                            *s += v * xv;
                        }
                    }
                    acc(*b, d);
                }
            }
            Op::Scale(a, c) => acc(*a, gd.iter().map(|&v| v * *c).collect()),
            Op::MatMul(a, b) => {
                let (x, w) = (val(*a), val(*b));
                let (k, n) = (w.shape[0], w.shape[1]);
                let m = x.numel() / k.max(1);
                if wants(*a) {
                    let mut d = vec![T::zero(); m * k];
                    gemm(m, n, k, gd, false, &w.data, true, &mut d, false);
                    acc(*a, d);
                }
                if wants(*b) {
                    let mut d = vec![T::zero(); k * n];
                    gemm(k, m, n, &x.data, true, gd, false, &mut d, false);
                    acc(*b, d);
                }
            }
            Op::Bmm(a, b) => {
                let (x, z) = (val(*a), val(*b));
                let (bg, m, k, n) = (x.shape[0], x.shape[1], x.shape[2], z.shape[2]);
                if wants(*a) {
                    let mut d = vec![T::zero(); bg * m * k];
                    for i in 0..bg {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &z.data[i * k * n..(i + 1) * k * n],
                            true,
                            &mut d[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    acc(*a, d);
                }
                if wants(*b) {
                    let mut d = vec![T::zero(); bg * k * n];
                    for i in 0..bg {
                        gemm(
                            k,
                            m,
                            n,
                            &x.data[i * m * k..(i + 1) * m * k],
                            true,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &mut d[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                    acc(*b, d);
                }
            }
            Op::Permute(a, perm) => {
                acc(*a, permute_data(gd, &y.shape, &inverse_permutation(perm)));
            }
            Op::Reshape(a) => acc(*a, gd.clone()),
            Op::Slice { x, axis, start } => {
                let xs = &val(*x).shape;
                let (outer, l, inner) = split_axis(xs, *axis);
                let len = y.shape[*axis];
                let mut d = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    let base = (o * l + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, d);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(&y.shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let l = val(v).shape[*axis];
                    if wants(v) {
                        let mut d = Vec::with_capacity(outer * l * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[base..base + l * inner]);
                        }
                        acc(v, d);
                    }
                    offset += l;
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(
                    *a,
                    gd.iter()
                        .zip(&x.data)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => acc(
                *a,
                gd.iter()
                    .zip(&y.data)
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect(),
            ),
            Op::Tanh(a) => acc(
                *a,
                gd.iter()
                    .zip(&y.data)
                    .map(|(&g, &t)| g * (T::one() - t * t))
                    .collect(),
            ),
            Op::Gelu(a) => {
                let (c, k) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                let x = val(*a);
                acc(
                    *a,
                    gd.iter()
                        .zip(&x.data)
                        .map(|(&g, &x)| {
                            let t = (c * (x + k * x * x * x)).tanh();
                            let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                            g * (half * (T::one() + t) + half * x * dt)
                        })
                        .collect(),
                );
            }
            Op::Softmax(a) => {
                let n = *y.shape.last().unwrap();
                let mut d = vec![T::zero(); y.numel()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.data.chunks(n)).zip(gd.chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = val(*x);
                let gm = &val(*gamma).data;
                let d = gm.len();
                let dn = T::from_f64(d as f64);
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                for (r, ((xr, gr), dxr)) in xv
                    .data
                    .chunks(d)
                    .zip(gd.chunks(d))
                    .zip(dx.chunks_mut(d))
                    .enumerate()
                {
                    let (m, rs) = (mean[r], rstd[r]);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        let xh = (xr[j] - m) * rs;
                        let dxh = gr[j] * gm[j];
                        dg[j] += gr[j] * xh;
                        db[j] += gr[j];
                        s1 += dxh;
                        s2 += dxh * xh;
                    }
                    for j in 0..d {
                        let xh = (xr[j] - m) * rs;
                        let dxh = gr[j] * gm[j];
                        dxr[j] = rs * (dxh - (s1 + xh * s2) / dn);
                    }
                }
                if wants(*x) {
                    acc(*x, dx);
                }
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
                fixed,
            } => {
                let xv = val(*x);
                let gm = &val(*gamma).data;
                let c = gm.len();
                let m = xv.shape[0];
                let mn = T::from_f64(m as f64);
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                let mut s2 = vec![T::zero(); c];
                for (xr, gr) in xv.data.chunks(c).zip(gd.chunks(c)) {
                    for j in 0..c {
                        let xh = (xr[j] - mean[j]) * rstd[j];
                        dg[j] += gr[j] * xh;
                        db[j] += gr[j];
                        s2[j] += gr[j] * gm[j] * xh;
                    }
                }
                if wants(*x) {
                    let mut dx = vec![T::zero(); xv.numel()];
                    for ((xr, gr), dr) in xv.data.chunks(c).zip(gd.chunks(c)).zip(dx.chunks_mut(c)) {
                        for j in 0..c {
                            let dxh = gr[j] * gm[j];
                            dr[j] = if *fixed {
                                dxh * rstd[j]
                            } else {
                                let xh = (xr[j] - mean[j]) * rstd[j];
                                rstd[j] * (dxh - (db[j] * gm[j] + xh * s2[j]) / mn)
                            };
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (xv, wv) = (val(*x), val(*w));
                let geo = ConvGeometry::new(&xv.shape, &wv.shape, *stride, *pad);
                let (p, ckk, o) = (geo.p(), geo.ckk(), geo.o);
                let mut cols = vec![T::zero(); ckk * p];
                let mut dw = vec![T::zero(); wv.numel()];
                let mut dx = if wants(*x) {
                    vec![T::zero(); xv.numel()]
                } else {
                    Vec::new()
                };
                let mut dcols = vec![T::zero(); ckk * p];
                for i in 0..geo.n {
                    let gi = &gd[i * o * p..(i + 1) * o * p];
                    if wants(*w) {
                        geo.im2col(&xv.data[i * geo.image()..(i + 1) * geo.image()], &mut cols);
                        gemm(o, p, ckk, gi, false, &cols, true, &mut dw, true);
                    }
                    if wants(*x) {
                        gemm(ckk, o, p, &wv.data, true, gi, false, &mut dcols, false);
                        geo.col2im(&dcols, &mut dx[i * geo.image()..(i + 1) * geo.image()]);
                    }
                }
                if wants(*x) {
                    acc(*x, dx);
                }
                acc(*w, dw);
            }
            Op::MeanAxis { x, axis } => {
                let xs = &val(*x).shape;
                let (outer, l, inner) = split_axis(xs, *axis);
                let inv = T::one() / T::from_f64(l as f64);
                let mut d = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    for j in 0..l {
                        let dst = &mut d[(o * l + j) * inner..(o * l + j + 1) * inner];
                        for (t, &s) in dst.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                            *t = s * inv;
                        }
                    }
                }
                acc(*x, d);
            }
            Op::Sum(a) => acc(*a, vec![gd[0]; val(*a).numel()]),
            Op::AbsSum(a) => {
                let x = val(*a);
                acc(
                    *a,
                    x.data
                        .iter()
                        .map(|&v| {
                            if v > T::zero() {
                                gd[0]
                            } else if v < T::zero() {
                                -gd[0]
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                );
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x[1], k[1], "conv2d: input has {} channels, kernel expects {}", x[1], k[1]);
        assert!(stride >= 1, "conv2d: stride must be positive");
        let (h, w, kh, kw) = (x[2], x[3], k[2], k[3]);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d: kernel larger than input");
        Self {
            n: x[0],
            c: x[1],
            h,
            w,
            o: k[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        }
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn image(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Calls `f(col_index, src_index)` for every in-bounds tap of row `row`.
    #[inline]
    fn for_taps(&self, ci: usize, ki: usize, kj: usize, mut f: impl FnMut(usize, usize)) {
        for oy in 0..self.ho {
            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
            if iy < 0 || iy >= self.h as isize {
                continue;
            }
            let base = (ci * self.h + iy as usize) * self.w;
            for ox in 0..self.wo {
                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                if ix < 0 || ix >= self.w as isize {
                    continue;
                }
                f(oy * self.wo + ox, base + ix as usize);
            }
        }
    }

    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let p = self.p();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    dst.fill(T::zero());
                    self.for_taps(ci, ki, kj, |col, src| dst[col] = img[src]);
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let p = self.p();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    self.for_taps(ci, ki, kj, |col, dst| img[dst] += src[col]);
                }
            }
        }
    }
}
