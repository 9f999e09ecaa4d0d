use crate::nn::graph::{Graph, Var};
use crate::nn::init::{kaiming_uniform, lecun_uniform, orthogonal};
use crate::nn::params::{ParamId, ParamKind, ParamStore};
use crate::nn::tensor::{Real, Tensor};
use crate::rng::Rng;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

/// `y = x W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            kaiming_uniform(&[inputs, outputs], inputs, rng),
        );
        let b = store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[outputs]));
        Self { w, b, inputs, outputs }
    }

    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matmul(x, w);
        g.add_bcast(y, b)
    }
}

/// Bias-free 2-D convolution; always followed by batch norm here.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            kaiming_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
        );
        Self {
            w,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        g.conv2d(x, w, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Norm, Tensor::full(&[channels], T::one())),
            beta: store.add(format!("{name}.beta"), ParamKind::Norm, Tensor::zeros(&[channels])),
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[channels])),
            running_var: store.add(
                format!("{name}.running_var"),
                ParamKind::Buffer,
                Tensor::full(&[channels], T::one()),
            ),
            channels,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    /// Normalizes `[rows, channels]`. Train mode uses batch statistics and
    /// records the running-average update on the graph.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        if g.is_train() {
            let (y, stats) = g.batch_norm_train(x, gamma, beta, BN_EPS);
            let m = T::from_f64(BN_MOMENTUM);
            let keep = T::one() - m;
            let n = stats.count as f64;
            let unbias = T::from_f64(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
            let store = g.store();
            let rm = store.value(self.running_mean);
            let rv = store.value(self.running_var);
            let mean = rm.data.iter().zip(&stats.mean).map(|(&r, &b)| keep * r + m * b).collect();
            let var = rv
                .data
                .iter()
                .zip(&stats.var)
                .map(|(&r, &b)| keep * r + m * b * unbias)
                .collect();
            g.push_update(self.running_mean, Tensor { shape: rm.shape.clone(), data: mean });
            g.push_update(self.running_var, Tensor { shape: rv.shape.clone(), data: var });
            y
        } else {
            let store = g.store();
            let (rm, rv) = (store.value(self.running_mean), store.value(self.running_var));
            g.batch_norm_fixed(x, gamma, beta, &rm.data, &rv.data, BN_EPS)
        }
    }

    /// Normalizes the channel axis of `[n, c, h, w]`.
    pub fn forward_spatial<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let t = g.permute(x, &[0, 2, 3, 1]);
        let t = g.reshape(t, &[n * h * w, c]);
        let t = self.forward(g, t);
        let t = g.reshape(t, &[n, h, w, c]);
        g.permute(t, &[0, 3, 1, 2])
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Norm, Tensor::full(&[dim], T::one())),
            beta: store.add(format!("{name}.beta"), ParamKind::Norm, Tensor::zeros(&[dim])),
            dim,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Multi-head self-attention over `[batch, tokens, dim]`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Dense,
    pub proj: Dense,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "attention: {dim} not divisible by {heads} heads");
        Self {
            qkv: Dense::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Dense::new(store, &format!("{name}.proj"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn param_count(&self) -> usize {
        self.qkv.param_count() + self.proj.param_count()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        self.forward_with_scores(g, x).0
    }

    /// Output plus the `[batch * heads, tokens, tokens]` attention matrix.
    pub fn forward_with_scores<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> (Var, Var) {
        let s = g.shape(x).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let (h, dh) = (self.heads, self.dim / self.heads);
        let qkv = self.qkv.forward(g, x);
        let qkv = g.reshape(qkv, &[b, n, 3, h, dh]);
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4]);
        let qkv = g.reshape(qkv, &[3, b * h, n, dh]);
        let part = |g: &mut Graph<'_, T>, i| {
            let t = g.slice(qkv, 0, i, 1);
            g.reshape(t, &[b * h, n, dh])
        };
        let (q, k, v) = (part(g, 0), part(g, 1), part(g, 2));
        let kt = g.permute(k, &[0, 2, 1]);
        let scores = g.bmm(q, kt);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores);
        let out = g.bmm(attn, v);
        let out = g.reshape(out, &[b, h, n, dh]);
        let out = g.permute(out, &[0, 2, 1, 3]);
        let out = g.reshape(out, &[b, n, d]);
        (self.proj.forward(g, out), attn)
    }
}

/// Non-overlapping square patches, flattened and linearly embedded.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Dense,
    pub patch: usize,
    pub channels: usize,
}

impl PatchEmbed {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, patch: usize, dim: usize, rng: &mut Rng) -> Self {
        Self {
            proj: Dense::new(store, &format!("{name}.proj"), channels * patch * patch, dim, rng),
            patch,
            channels,
        }
    }

    pub fn param_count(&self) -> usize {
        self.proj.param_count()
    }

    /// `[b, c, h, w] -> [b, (h/p)(w/p), dim]`, patches in row-major order.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (b, c, h, w, p) = (s[0], s[1], s[2], s[3], self.patch);
        assert!(h % p == 0 && w % p == 0, "patch embed: {h}x{w} not divisible by {p}");
        let t = g.reshape(x, &[b, c, h / p, p, w / p, p]);
        let t = g.permute(t, &[0, 2, 4, 1, 3, 5]);
        let t = g.reshape(t, &[b, (h / p) * (w / p), c * p * p]);
        self.proj.forward(g, t)
    }
}

/// One LSTM layer with gate order (input, forget, cell, output).
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, inputs: usize, hidden: usize, rng: &mut Rng) -> Self {
        let w_ih = store.add(
            format!("{name}.w_ih"),
            ParamKind::Weight,
            lecun_uniform(&[inputs, 4 * hidden], inputs, rng),
        );
        let mut rec = vec![T::zero(); hidden * 4 * hidden];
        for gate in 0..4 {
            let q = orthogonal(hidden, rng);
            for i in 0..hidden {
                for j in 0..hidden {
                    rec[i * 4 * hidden + gate * hidden + j] = T::from_f64(q[i * hidden + j]);
                }
            }
        }
        let w_hh = store.add(
            format!("{name}.w_hh"),
            ParamKind::Weight,
            Tensor {
                shape: vec![hidden, 4 * hidden],
                data: rec,
            },
        );
        let b = store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[4 * hidden]));
        Self {
            w_ih,
            w_hh,
            b,
            inputs,
            hidden,
        }
    }

    pub fn param_count(&self) -> usize {
        4 * self.hidden * (self.inputs + self.hidden + 1)
    }

    /// One step from pre-projected input gates `xg = x W_ih` (`[b, 4h]`).
    fn step<T: Real>(&self, g: &mut Graph<'_, T>, xg: Var, h: Var, c: Var) -> (Var, Var) {
        let hid = self.hidden;
        let (w_hh, b) = (g.param(self.w_hh), g.param(self.b));
        let hg = g.matmul(h, w_hh);
        let z = g.add(xg, hg);
        let z = g.add_bcast(z, b);
        let i = g.slice(z, 1, 0, hid);
        let f = g.slice(z, 1, hid, hid);
        let u = g.slice(z, 1, 2 * hid, hid);
        let o = g.slice(z, 1, 3 * hid, hid);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let u = g.tanh(u);
        let o = g.sigmoid(o);
        let fc = g.mul(f, c);
        let iu = g.mul(i, u);
        let c = g.add(fc, iu);
        let tc = g.tanh(c);
        (g.mul(o, tc), c)
    }

    /// Single cell update on `x: [b, inputs]`.
    pub fn cell<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, h: Var, c: Var) -> (Var, Var) {
        let w_ih = g.param(self.w_ih);
        let xg = g.matmul(x, w_ih);
        self.step(g, xg, h, c)
    }

    /// Runs `[b, t, inputs]` from zero state; returns `[b, t, hidden]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, xs: Var) -> Var {
        let s = g.shape(xs).to_vec();
        let (b, steps) = (s[0], s[1]);
        let w_ih = g.param(self.w_ih);
        let xg = g.matmul(xs, w_ih);
        let mut h = g.input(Tensor::zeros(&[b, self.hidden]));
        let mut c = g.input(Tensor::zeros(&[b, self.hidden]));
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = g.slice(xg, 1, t, 1);
            let x = g.reshape(x, &[b, 4 * self.hidden]);
            (h, c) = self.step(g, x, h, c);
            outs.push(g.reshape(h, &[b, 1, self.hidden]));
        }
        g.concat(&outs, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn lstm_cell_matches_gate_equations() {
        let mut rng = Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let cell = Lstm::new(&mut store, "lstm", 3, 2, &mut rng);
        // Non-zero bias so every term of the gate equations is exercised.
        let bias: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
        store.value_mut(cell.b).data = bias.clone();
        let x = [0.5, -1.0, 0.25];
        let h0 = [0.3, -0.2];
        let c0 = [0.1, 0.7];

        let mut g = Graph::new(&store, false);
        let xv = g.input(Tensor::from_f64(&[1, 3], &x));
        let hv = g.input(Tensor::from_f64(&[1, 2], &h0));
        let cv = g.input(Tensor::from_f64(&[1, 2], &c0));
        let (h1, c1) = cell.cell(&mut g, xv, hv, cv);

        let wi = &store.value(cell.w_ih).data;
        let wh = &store.value(cell.w_hh).data;
        let z: Vec<f64> = (0..8)
            .map(|j| {
                (0..3).map(|k| x[k] * wi[k * 8 + j]).sum::<f64>()
                    + (0..2).map(|k| h0[k] * wh[k * 8 + j]).sum::<f64>()
                    + bias[j]
            })
            .collect();
        for u in 0..2 {
            let i = sigmoid(z[u]);
            let f = sigmoid(z[2 + u]);
            let gg = z[4 + u].tanh();
            let o = sigmoid(z[6 + u]);
            let c = f * c0[u] + i * gg;
            let h = o * c.tanh();
            assert!((g.value(c1).data[u] - c).abs() < 1e-6);
            assert!((g.value(h1).data[u] - h).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_with_one_hot_scores_selects_token() {
        // Token j is e_j * 10 in a 4-dim space; query/key projections make
        // every query attend to token 2; values and output are identity.
        let (n, d) = (4, 4);
        let mut rng = Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let attn = Attention::new(&mut store, "attn", d, 1, &mut rng);
        let mut w = vec![0.0; d * 3 * d];
        for i in 0..d {
            // q = constant 1 in dim 0 for all tokens via bias below; k picks dim 2.
            w[i * 3 * d + d + i] = if i == 2 { 100.0 } else { 0.0 };
            w[i * 3 * d + 2 * d + i] = 1.0;
        }
        store.value_mut(attn.qkv.w).data = w;
        let mut qb = vec![0.0; 3 * d];
        qb[2] = 1.0;
        store.value_mut(attn.qkv.b).data = qb;
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        store.value_mut(attn.proj.w).data = eye;

        let mut tokens = vec![0.0; n * d];
        for j in 0..n {
            tokens[j * d + j] = 10.0;
        }
        let mut g = Graph::new(&store, false);
        let x = g.input(Tensor::from_f64(&[1, n, d], &tokens));
        let (y, scores) = attn.forward_with_scores(&mut g, x);
        let out = g.value(y);
        for j in 0..n {
            for k in 0..d {
                assert!((out.data[j * d + k] - tokens[2 * d + k]).abs() < 1e-9);
            }
        }
        for row in g.value(scores).data.chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn patch_embed_token_count() {
        let mut rng = Rng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        let pe = PatchEmbed::new(&mut store, "pe", 3, 16, 8, &mut rng);
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::zeros(&[1, 3, 256, 256]));
        let y = pe.forward(&mut g, x);
        assert_eq!(g.shape(y), &[1, 257 - 1, 8]);
    }
}
