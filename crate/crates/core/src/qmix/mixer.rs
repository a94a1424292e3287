//! Monotonic mixer whose weights are produced by a hypernetwork conditioned
//! on the global observation.
//!
//! ```text
//! W1 = |A1 g + c1|  [n x h]     b1 = B1 g + d1  [h]
//! W2 = |A2 g + c2|  [h]         b2 = B2 g + d2  scalar
//! q_tot = W2 . elu(q W1 + b1) + b2
//! ```
//!
//! Mixing weights are absolute values, so `dq_tot/dq_i >= 0` everywhere.

use serde::{Deserialize, Serialize};

use crate::nn::{dot, Activation, DenseLayer, LayerGrad};
use crate::SimRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerNet {
    pub n_agents: usize,
    pub state_dim: usize,
    pub hidden: usize,
    pub hyper_w1: DenseLayer,
    pub hyper_b1: DenseLayer,
    pub hyper_w2: DenseLayer,
    pub hyper_b2: DenseLayer,
}

/// Intermediate values of one mixer evaluation.
#[derive(Debug, Clone)]
pub struct MixerCache {
    pub q: Vec<f64>,
    w1_raw: Vec<f64>,
    w2_raw: Vec<f64>,
    pre: Vec<f64>,
    hid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixerGrad {
    pub hyper_w1: LayerGrad,
    pub hyper_b1: LayerGrad,
    pub hyper_w2: LayerGrad,
    pub hyper_b2: LayerGrad,
}

impl MixerGrad {
    pub fn zeros_like(mix: &MixerNet) -> Self {
        Self {
            hyper_w1: LayerGrad::zeros(&mix.hyper_w1),
            hyper_b1: LayerGrad::zeros(&mix.hyper_b1),
            hyper_w2: LayerGrad::zeros(&mix.hyper_w2),
            hyper_b2: LayerGrad::zeros(&mix.hyper_b2),
        }
    }

    pub fn add_assign(&mut self, other: &MixerGrad) {
        self.hyper_w1.add_assign(&other.hyper_w1);
        self.hyper_b1.add_assign(&other.hyper_b1);
        self.hyper_w2.add_assign(&other.hyper_w2);
        self.hyper_b2.add_assign(&other.hyper_b2);
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        [&self.hyper_w1, &self.hyper_b1, &self.hyper_w2, &self.hyper_b2]
            .into_iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl MixerNet {
    pub fn new(n_agents: usize, state_dim: usize, hidden: usize, rng: &mut SimRng) -> Self {
        let id = Activation::Identity;
        Self {
            n_agents,
            state_dim,
            hidden,
            hyper_w1: DenseLayer::init(state_dim, n_agents * hidden, id, rng),
            hyper_b1: DenseLayer::init(state_dim, hidden, id, rng),
            hyper_w2: DenseLayer::init(state_dim, hidden, id, rng),
            hyper_b2: DenseLayer::init(state_dim, 1, id, rng),
        }
    }

    pub fn layers(&self) -> [&DenseLayer; 4] {
        [&self.hyper_w1, &self.hyper_b1, &self.hyper_w2, &self.hyper_b2]
    }

    pub fn n_params(&self) -> usize {
        self.layers().iter().map(|l| l.n_params()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers().iter().all(|l| l.is_finite())
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers()
            .into_iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        [
            &mut self.hyper_w1,
            &mut self.hyper_b1,
            &mut self.hyper_w2,
            &mut self.hyper_b2,
        ]
        .into_iter()
        .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
        .collect()
    }

    fn affine(layer: &DenseLayer, g: &[f64]) -> Vec<f64> {
        layer
            .weights
            .chunks_exact(layer.in_dim)
            .zip(&layer.bias)
            .map(|(row, b)| dot(row, g) + b)
            .collect()
    }

    pub fn forward(&self, q: &[f64], g: &[f64]) -> (f64, MixerCache) {
        assert_eq!(q.len(), self.n_agents, "mixer q width");
        assert_eq!(g.len(), self.state_dim, "mixer state width");
        let h = self.hidden;
        let w1_raw = Self::affine(&self.hyper_w1, g);
        let b1 = Self::affine(&self.hyper_b1, g);
        let w2_raw = Self::affine(&self.hyper_w2, g);
        let b2 = Self::affine(&self.hyper_b2, g)[0];

        let mut pre = b1;
        for (i, &qi) in q.iter().enumerate() {
            for (p, w) in pre.iter_mut().zip(&w1_raw[i * h..(i + 1) * h]) {
                *p += qi * w.abs();
            }
        }
        let hid: Vec<f64> = pre.iter().map(|&z| Activation::Elu.apply(z)).collect();
        let q_tot = hid.iter().zip(&w2_raw).map(|(a, w)| a * w.abs()).sum::<f64>() + b2;
        (
            q_tot,
            MixerCache {
                q: q.to_vec(),
                w1_raw,
                w2_raw,
                pre,
                hid,
            },
        )
    }

    pub fn q_tot(&self, q: &[f64], g: &[f64]) -> f64 {
        self.forward(q, g).0
    }

    /// Effective (non-negative) mixing weights `(W1, W2)` for state `g`.
    pub fn effective_weights(&self, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let w1 = Self::affine(&self.hyper_w1, g).into_iter().map(f64::abs).collect();
        let w2 = Self::affine(&self.hyper_w2, g).into_iter().map(f64::abs).collect();
        (w1, w2)
    }

    /// Accumulates `dq_tot * d q_tot / d theta` into `grads` and returns `d q_tot / d q * dq_tot`.
    pub fn backward(&self, cache: &MixerCache, g: &[f64], dq_tot: f64, grads: &mut MixerGrad) -> Vec<f64> {
        let h = self.hidden;
        self.hyper_b2.backward_pre(g, &[dq_tot], &mut grads.hyper_b2, None);

        let mut dw2_raw = vec![0.0; h];
        let mut dpre = vec![0.0; h];
        for k in 0..h {
            let w2 = cache.w2_raw[k];
            dw2_raw[k] = dq_tot * cache.hid[k] * sign(w2);
            let dhid = dq_tot * w2.abs();
            dpre[k] = dhid * Activation::Elu.derivative(cache.pre[k], cache.hid[k]);
        }
        self.hyper_w2.backward_pre(g, &dw2_raw, &mut grads.hyper_w2, None);
        self.hyper_b1.backward_pre(g, &dpre, &mut grads.hyper_b1, None);

        let mut dw1_raw = vec![0.0; self.n_agents * h];
        let mut dq = vec![0.0; self.n_agents];
        for (i, &qi) in cache.q.iter().enumerate() {
            let raw = &cache.w1_raw[i * h..(i + 1) * h];
            let out = &mut dw1_raw[i * h..(i + 1) * h];
            let mut acc = 0.0;
            for k in 0..h {
                out[k] = dpre[k] * qi * sign(raw[k]);
                acc += dpre[k] * raw[k].abs();
            }
            dq[i] = acc;
        }
        self.hyper_w1.backward_pre(g, &dw1_raw, &mut grads.hyper_w1, None);
        dq
    }
}
