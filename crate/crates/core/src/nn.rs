//! Minimal dense-network building blocks over a flat parameter vector.
//!
//! Every layer stores offsets into one `Vec<f64>` so that optimizers,
//! checkpoints and finite-difference checks can treat a model as a single
//! array. Weight matrices are row-major `[in][out]`, which turns both the
//! forward pass and the weight gradient into contiguous `axpy` loops.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::Rng;

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four partial sums keep the loop vectorizable while staying deterministic.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Named contiguous tensor inside the flat parameter vector.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Allocates tensors in declaration order.
#[derive(Clone, Default, PartialEq, Debug, Serialize, Deserialize)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub size: usize,
}

impl Layout {
    pub fn alloc(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let offset = self.size;
        let spec = TensorSpec { name: name.into(), offset, shape: shape.to_vec() };
        self.size += spec.len();
        self.tensors.push(spec);
        offset
    }
}

/// Fully connected layer `y = xᵀW + b`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new(layout: &mut Layout, name: &str, inp: usize, out: usize, bias: bool) -> Self {
        let w = layout.alloc(alloc::format!("{name}.w"), &[inp, out]);
        let b = bias.then(|| layout.alloc(alloc::format!("{name}.b"), &[out]));
        Linear { w, b, inp, out }
    }

    #[inline]
    pub fn weight<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w..self.w + self.inp * self.out]
    }

    pub fn forward(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.inp);
        match self.b {
            Some(b) => y.copy_from_slice(&p[b..b + self.out]),
            None => y.fill(0.0),
        }
        let w = self.weight(p);
        for (i, xi) in x.iter().enumerate() {
            if *xi != 0.0 {
                axpy(*xi, &w[i * self.out..(i + 1) * self.out], y);
            }
        }
    }

    /// Accumulate parameter gradients; optionally write the input gradient.
    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], g: &mut [f64], dx: Option<&mut [f64]>) {
        if let Some(b) = self.b {
            axpy(1.0, dy, &mut g[b..b + self.out]);
        }
        let gw = &mut g[self.w..self.w + self.inp * self.out];
        for (i, xi) in x.iter().enumerate() {
            if *xi != 0.0 {
                axpy(*xi, dy, &mut gw[i * self.out..(i + 1) * self.out]);
            }
        }
        if let Some(dx) = dx {
            let w = self.weight(p);
            for (i, d) in dx.iter_mut().enumerate() {
                *d = dot(&w[i * self.out..(i + 1) * self.out], dy);
            }
        }
    }

    /// Glorot-uniform weights scaled by `gain`, zero bias.
    pub fn init(&self, p: &mut [f64], rng: &mut Rng, gain: f64) {
        let a = gain * math::sqrt(6.0 / (self.inp + self.out) as f64);
        for w in &mut p[self.w..self.w + self.inp * self.out] {
            *w = rng.random_range(-a..=a);
        }
        if let Some(b) = self.b {
            p[b..b + self.out].fill(0.0);
        }
    }
}

/// Adam optimizer state over a flat parameter vector.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(size: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: alloc::vec![0.0; size], v: alloc::vec![0.0; size] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        let step = self.lr / bc1;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= step * self.m[i] / (math::sqrt(self.v[i] / bc2) + self.eps);
        }
    }
}

/// Per-feature affine normalization with frozen statistics.
#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub const MIN_STD: f64 = 1e-6;

    pub fn identity(n: usize) -> Self {
        Normalizer { mean: alloc::vec![0.0; n], std: alloc::vec![1.0; n] }
    }

    /// Statistics of the rows yielded by `samples` (each of length `n`).
    pub fn fit<'a>(n: usize, samples: impl Iterator<Item = &'a [f64]> + Clone) -> Self {
        let mut count = 0usize;
        let mut mean = alloc::vec![0.0; n];
        for s in samples.clone() {
            axpy(1.0, s, &mut mean);
            count += 1;
        }
        if count == 0 {
            return Self::identity(n);
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = alloc::vec![0.0; n];
        for s in samples {
            for i in 0..n {
                let d = s[i] - mean[i];
                var[i] += d * d;
            }
        }
        let std = var.iter().map(|v| math::sqrt(v / count as f64).max(Self::MIN_STD)).collect();
        Normalizer { mean, std }
    }

    #[inline]
    pub fn apply(&self, i: usize, x: f64) -> f64 {
        (x - self.mean[i]) / self.std[i]
    }

    #[inline]
    pub fn invert(&self, i: usize, z: f64) -> f64 {
        self.mean[i] + self.std[i] * z
    }
}

/// L2 norm of a gradient vector.
pub fn norm(v: &[f64]) -> f64 {
    math::sqrt(dot(v, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    #[test]
    fn linear_forward_backward_small() {
        let mut layout = Layout::default();
        let lin = Linear::new(&mut layout, "l", 2, 3, true);
        let mut p = alloc::vec![0.0; layout.size];
        // W = [[1,2,3],[4,5,6]], b = [0.5, 0, -1]
        p[..6].copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        p[6..9].copy_from_slice(&[0.5, 0.0, -1.0]);
        let mut y = [0.0; 3];
        lin.forward(&p, &[1.0, -1.0], &mut y);
        assert_eq!(y, [-2.5, -3.0, -4.0]);
        let mut g = alloc::vec![0.0; layout.size];
        let mut dx = [0.0; 2];
        lin.backward(&p, &[1.0, -1.0], &[1.0, 0.0, 2.0], &mut g, Some(&mut dx));
        assert_eq!(dx, [7.0, 16.0]);
        assert_eq!(&g[..6], &[1.0, 0.0, 2.0, -1.0, 0.0, -2.0]);
        assert_eq!(&g[6..9], &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn dot_matches_naive() {
        let mut rng = rng_from_seed(3);
        let a: Vec<f64> = (0..37).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..37).map(|_| rng.random_range(-1.0..1.0)).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = alloc::vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn normalizer_fit() {
        let rows = [[1.0, 10.0], [3.0, 10.0]];
        let n = Normalizer::fit(2, rows.iter().map(|r| &r[..]));
        assert_eq!(n.mean, [2.0, 10.0]);
        assert_eq!(n.std, [1.0, Normalizer::MIN_STD]);
        assert_eq!(n.apply(0, 3.0), 1.0);
        assert_eq!(n.invert(0, 1.0), 3.0);
    }
}
