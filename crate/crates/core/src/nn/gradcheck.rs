//! Central finite-difference checks of the analytic gradients, run on a
//! double-precision copy of each layer.

use rand::Rng as _;
use rand::SeedableRng;

use crate::error::Result;
use crate::nn::graph::{Graph, Var};
use crate::nn::layers::{Attention, BatchNorm, Conv2d, Dense, LayerNorm, Lstm, PatchEmbed};
use crate::nn::params::ParamStore;
use crate::nn::tensor::{numel, Tensor};
use crate::rng::{self, Rng};

pub const EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv,
    BatchNorm,
    LayerNorm,
    Attention,
    PatchEmbed,
    LstmCell,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::Dense,
        LayerKind::Conv,
        LayerKind::BatchNorm,
        LayerKind::LayerNorm,
        LayerKind::Attention,
        LayerKind::PatchEmbed,
        LayerKind::LstmCell,
    ];
}

/// Worst relative error over all gradient tensors of one instance.
#[derive(Debug, Clone, Copy)]
pub struct CheckResult {
    pub max_rel_error: f64,
    pub tensors: usize,
    pub elements: usize,
}

/// `|a - n| / (|a| + |n|)` in the Euclidean norm, 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
        + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

type Forward = dyn Fn(&mut Graph<'_, f64>, Var) -> Var;

fn randomize(store: &mut ParamStore<f64>, rng: &mut Rng) {
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable()).map(|(id, _)| id).collect();
    for id in ids {
        for v in &mut store.value_mut(id).data {
            *v += rng.random_range(-0.5..0.5);
        }
    }
}

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor {
        shape: shape.to_vec(),
        data: (0..numel(shape)).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

/// Compares backprop against central differences for the projection
/// `sum(f(x) * r)` with a random fixed `r`.
pub fn check_function(store: &ParamStore<f64>, x: &Tensor<f64>, train: bool, f: &Forward, rng: &mut Rng) -> Result<CheckResult> {
    let probe = {
        let mut g = Graph::new(store, train);
        let xv = g.input(x.clone());
        let y = f(&mut g, xv);
        random_tensor(&g.value(y).shape, rng)
    };
    let loss_of = |s: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
        let mut g = Graph::new(s, train);
        let xv = g.input(x.clone());
        let y = f(&mut g, xv);
        g.value(y)
            .data
            .iter()
            .zip(&probe.data)
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut g = Graph::new(store, train);
    let xv = g.input_with_grad(x.clone());
    let y = f(&mut g, xv);
    let r = g.input(probe.clone());
    let prod = g.mul(y, r);
    let loss = g.sum(prod);
    g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut tensors = 0;
    let mut elements = 0;

    let analytic_x = g.grad(xv).map(|t| t.data.clone()).unwrap_or_else(|| vec![0.0; x.numel()]);
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data[i] += EPSILON;
        let up = loss_of(store, &xp);
        xp.data[i] -= 2.0 * EPSILON;
        let down = loss_of(store, &xp);
        numeric.push((up - down) / (2.0 * EPSILON));
    }
    worst = worst.max(relative_error(&analytic_x, &numeric));
    tensors += 1;
    elements += numeric.len();

    let grads: Vec<(crate::nn::params::ParamId, Vec<f64>)> = g
        .param_grads()
        .into_iter()
        .map(|(id, t)| (id, t.data.clone()))
        .collect();
    let mut s = store.clone();
    for (id, analytic) in grads {
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = s.value(id).data[i];
            s.value_mut(id).data[i] = orig + EPSILON;
            let up = loss_of(&s, x);
            s.value_mut(id).data[i] = orig - EPSILON;
            let down = loss_of(&s, x);
            s.value_mut(id).data[i] = orig;
            numeric.push((up - down) / (2.0 * EPSILON));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
        tensors += 1;
        elements += numeric.len();
    }
    Ok(CheckResult {
        max_rel_error: worst,
        tensors,
        elements,
    })
}

/// One random instance of a layer type, sized from the seed.
pub fn check_layer(kind: LayerKind, seed: u64) -> Result<CheckResult> {
    let mut rng: Rng = rng::stream(seed, &[rng::label("gradcheck"), kind as u64]);
    let mut init = Rng::seed_from_u64(rng.random());
    let mut store = ParamStore::<f64>::new();
    let batch = rng.random_range(2..=4);
    let (x, train, f): (Tensor<f64>, bool, Box<Forward>) = match kind {
        LayerKind::Dense => {
            let (i, o) = (rng.random_range(1..=6), rng.random_range(1..=6));
            let layer = Dense::new(&mut store, "dense", i, o, &mut init);
            (random_tensor(&[batch, i], &mut rng), false, Box::new(move |g, x| layer.forward(g, x)))
        }
        LayerKind::Conv => {
            let (c, o) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let k = if rng.random_bool(0.5) { 3 } else { 1 };
            let stride = rng.random_range(1..=2);
            let pad = if k == 3 { rng.random_range(0..=1) } else { 0 };
            let size = rng.random_range(4..=6);
            let layer = Conv2d::new(&mut store, "conv", c, o, k, stride, pad, &mut init);
            (
                random_tensor(&[batch, c, size, size], &mut rng),
                false,
                Box::new(move |g, x| layer.forward(g, x)),
            )
        }
        LayerKind::BatchNorm => {
            let c = rng.random_range(1..=5);
            let layer = BatchNorm::new(&mut store, "bn", c);
            let rows = rng.random_range(3..=8);
            (random_tensor(&[rows, c], &mut rng), true, Box::new(move |g, x| layer.forward(g, x)))
        }
        LayerKind::LayerNorm => {
            let d = rng.random_range(2..=6);
            let layer = LayerNorm::new(&mut store, "ln", d);
            (random_tensor(&[batch, 3, d], &mut rng), false, Box::new(move |g, x| layer.forward(g, x)))
        }
        LayerKind::Attention => {
            let heads = rng.random_range(1..=2);
            let d = heads * rng.random_range(2..=3);
            let n = rng.random_range(2..=4);
            let layer = Attention::new(&mut store, "attn", d, heads, &mut init);
            (random_tensor(&[batch, n, d], &mut rng), false, Box::new(move |g, x| layer.forward(g, x)))
        }
        LayerKind::PatchEmbed => {
            let p = rng.random_range(1..=2);
            let size = p * rng.random_range(2..=3);
            let d = rng.random_range(2..=4);
            let layer = PatchEmbed::new(&mut store, "patch", 3, p, d, &mut init);
            (
                random_tensor(&[batch, 3, size, size], &mut rng),
                false,
                Box::new(move |g, x| layer.forward(g, x)),
            )
        }
        LayerKind::LstmCell => {
            let (i, h) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let layer = Lstm::new(&mut store, "lstm", i, h, &mut init);
            let h0 = random_tensor(&[batch, h], &mut rng);
            let c0 = random_tensor(&[batch, h], &mut rng);
            (
                random_tensor(&[batch, i], &mut rng),
                false,
                Box::new(move |g, x| {
                    let hv = g.input(h0.clone());
                    let cv = g.input(c0.clone());
                    let (h1, c1) = layer.cell(g, x, hv, cv);
                    g.concat(&[h1, c1], 1)
                }),
            )
        }
    };
    randomize(&mut store, &mut rng);
    check_function(&store, &x, train, f.as_ref(), &mut rng)
}
