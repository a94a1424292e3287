use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z`, given the post-activation `a`.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    a + 1.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer; `weights` is row-major `[out_dim x in_dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros(layer: &DenseLayer) -> Self {
        Self {
            weights: vec![0.0; layer.weights.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    pub fn fill_zero(&mut self) {
        self.weights.fill(0.0);
        self.bias.fill(0.0);
    }

    pub fn add_assign(&mut self, other: &LayerGrad) {
        add_into(&mut self.weights, &other.weights);
        add_into(&mut self.bias, &other.bias);
    }

    pub fn scale(&mut self, k: f64) {
        self.weights.iter_mut().chain(&mut self.bias).for_each(|g| *g *= k);
    }
}

#[inline]
pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl DenseLayer {
    /// Uniform initialization in `±1/sqrt(in_dim)` for weights and biases.
    pub fn init(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut SimRng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = || rng.gen_range(-bound..bound);
        let weights = (0..in_dim * out_dim).map(|_| draw()).collect();
        let bias = (0..out_dim).map(|_| draw()).collect();
        Self {
            in_dim,
            out_dim,
            activation,
            weights,
            bias,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|p| p.is_finite())
    }

    #[inline]
    pub fn forward_into(&self, x: &[f64], pre: &mut [f64], post: &mut [f64]) {
        assert_eq!(x.len(), self.in_dim, "layer input width");
        for (o, row) in self.weights.chunks_exact(self.in_dim).enumerate() {
            let z = dot(row, x) + self.bias[o];
            pre[o] = z;
            post[o] = self.activation.apply(z);
        }
    }

    /// Accumulates parameter gradients into `grad` and, if requested, writes
    /// the input gradient into `dx`.
    #[inline]
    pub fn backward_into(
        &self,
        x: &[f64],
        pre: &[f64],
        post: &[f64],
        dpost: &[f64],
        grad: &mut LayerGrad,
        dx: Option<&mut [f64]>,
    ) {
        let dz: Vec<f64> = (0..self.out_dim)
            .map(|o| dpost[o] * self.activation.derivative(pre[o], post[o]))
            .collect();
        self.backward_pre(x, &dz, grad, dx);
    }

    /// Backward pass from the pre-activation gradient `dz`.
    #[inline]
    pub fn backward_pre(&self, x: &[f64], dz: &[f64], grad: &mut LayerGrad, dx: Option<&mut [f64]>) {
        for (o, (grow, &d)) in grad.weights.chunks_exact_mut(self.in_dim).zip(dz).enumerate() {
            grad.bias[o] += d;
            if d != 0.0 {
                for (g, &xi) in grow.iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
        }
        if let Some(dx) = dx {
            dx.fill(0.0);
            for (row, &d) in self.weights.chunks_exact(self.in_dim).zip(dz) {
                if d != 0.0 {
                    for (g, &w) in dx.iter_mut().zip(row) {
                        *g += d * w;
                    }
                }
            }
        }
    }

    /// FLOPs for one evaluation: a multiply-add is 2, bias add and
    /// non-identity activation 1 each per unit.
    pub fn flops(&self) -> u64 {
        let act = if self.activation == Activation::Identity {
            0
        } else {
            self.out_dim
        };
        (2 * self.in_dim * self.out_dim + self.out_dim + act) as u64
    }
}
