use serde::{Deserialize, Serialize};

use super::dense::{Activation, DenseLayer, LayerGrad};
use crate::SimRng;

/// Stack of dense layers. Agent value networks map `m + 2` features to `m`
/// action values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

pub type ValueNet = Mlp;

/// Per-layer inputs and activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net.layers.iter().map(LayerGrad::zeros).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        self.layers.iter_mut().for_each(LayerGrad::fill_zero);
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.layers.iter_mut().for_each(|l| l.scale(k));
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&g| g == 0.0))
    }
}

impl Mlp {
    /// `dims = [in, h1, .., out]`; hidden layers use `hidden`, the last layer `output`.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, rng: &mut SimRng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output widths");
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer::init(w[0], w[1], if i == last { output } else { hidden }, rng))
            .collect();
        Self { layers }
    }

    /// All-zero network with relu hidden layers and an identity output.
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "need at least input and output widths");
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                DenseLayer::zeros(w[0], w[1], act)
            })
            .collect();
        Self { layers }
    }

    /// One-hidden-layer agent network: `m + 2 -> hidden (relu) -> m`.
    pub fn agent(m: usize, hidden: usize, rng: &mut SimRng) -> Self {
        Self::new(&[m + 2, hidden, m], Activation::Relu, Activation::Identity, rng)
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::n_params).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(DenseLayer::is_finite)
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, ForwardCache) {
        assert_eq!(x.len(), self.input_width(), "network input width");
        let mut cache = ForwardCache {
            input: x.to_vec(),
            pre: Vec::with_capacity(self.layers.len()),
            post: Vec::with_capacity(self.layers.len()),
        };
        for layer in &self.layers {
            let mut pre = vec![0.0; layer.out_dim];
            let mut post = vec![0.0; layer.out_dim];
            let input = cache.post.last().map_or(x, |p| p.as_slice());
            layer.forward_into(input, &mut pre, &mut post);
            cache.pre.push(pre);
            cache.post.push(post);
        }
        (cache.post.last().cloned().unwrap_or_default(), cache)
    }

    /// Forward pass without keeping a cache.
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_width(), "network input width");
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let mut pre = vec![0.0; layer.out_dim];
            let mut post = vec![0.0; layer.out_dim];
            layer.forward_into(&cur, &mut pre, &mut post);
            cur = post;
        }
        cur
    }

    /// Reverse-mode gradient of `output . dout`; returns parameter and input gradients.
    pub fn backward(&self, cache: &ForwardCache, dout: &[f64]) -> (GradientSet, Vec<f64>) {
        let mut grads = GradientSet::zeros_like(self);
        let dx = self.backward_accumulate(cache, dout, &mut grads);
        (grads, dx)
    }

    /// As [`Mlp::backward`] but adds into existing gradients.
    pub fn backward_accumulate(&self, cache: &ForwardCache, dout: &[f64], grads: &mut GradientSet) -> Vec<f64> {
        assert_eq!(cache.pre.len(), self.layers.len(), "cache does not match network depth");
        assert_eq!(dout.len(), self.output_width(), "output gradient width");
        let mut upstream = dout.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            assert_eq!(cache.pre[idx].len(), layer.out_dim, "cache does not match layer width");
            let input = if idx == 0 { &cache.input } else { &cache.post[idx - 1] };
            let mut dx = vec![0.0; layer.in_dim];
            layer.backward_into(
                input,
                &cache.pre[idx],
                &cache.post[idx],
                &upstream,
                &mut grads.layers[idx],
                Some(&mut dx),
            );
            upstream = dx;
        }
        upstream
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn flops(&self) -> u64 {
        self.layers.iter().map(DenseLayer::flops).sum()
    }
}

/// FLOPs of one inference pass; see [`DenseLayer::flops`] for the convention.
pub fn flops_of(net: &Mlp) -> u64 {
    net.flops()
}
