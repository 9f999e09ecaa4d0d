use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::tensor::{numel, Real, Tensor};
use crate::rng::Rng;

/// Uniform in `±sqrt(6 / fan_in)` (ReLU gain).
pub fn kaiming_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    uniform(shape, (6.0 / fan_in.max(1) as f64).sqrt(), rng)
}

/// Uniform in `±sqrt(3 / fan_in)`, unit-gain variant for sigmoid/tanh inputs.
pub fn lecun_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    uniform(shape, (3.0 / fan_in.max(1) as f64).sqrt(), rng)
}

pub fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor<T> {
    let data = (0..numel(shape))
        .map(|_| T::from_f64(rng.random_range(-bound..=bound)))
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Normal with standard deviation `std`, redrawn outside `±2 std`.
pub fn trunc_normal<T: Real>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    let data = (0..numel(shape))
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::from_f64(z * std);
            }
        })
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Square orthogonal matrix from the QR factors of a Gaussian draw.
pub fn orthogonal(n: usize, rng: &mut Rng) -> Vec<f64> {
    let a = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = a.qr();
    let (mut q, r) = (qr.q(), qr.r());
    // Sign fix makes the draw uniform over the orthogonal group.
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(q[(i, j)]);
        }
    }
    out
}
