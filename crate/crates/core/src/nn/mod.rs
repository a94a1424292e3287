//! Minimal dense-network engine: layers with explicit forward/backward,
//! SGD/Adam, a replay ring and FLOP accounting. Everything runs in f64.

mod dense;
mod mlp;
mod optim;
mod replay;

pub use dense::{Activation, DenseLayer, LayerGrad};
pub use mlp::{flops_of, ForwardCache, GradientSet, Mlp, ValueNet};
pub use optim::{OptimizerKind, OptimizerState};
pub use replay::ReplayMemory;

pub(crate) use dense::dot;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot sample from an empty replay memory")]
    EmptyReplay,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use rand::Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn zero_relu_net_outputs_zero() {
        let mut net = Mlp::agent(2, 8, &mut seeded_rng(0, 0));
        for l in &mut net.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        assert_eq!(net.predict(&[1.0, -3.0, 2.0, 0.5]), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_is_identity() {
        let mut layer = DenseLayer::zeros(3, 3, Activation::Identity);
        for i in 0..3 {
            layer.weights[i * 3 + i] = 1.0;
        }
        let net = Mlp { layers: vec![layer] };
        assert_eq!(net.predict(&[0.5, -2.0, 7.0]), vec![0.5, -2.0, 7.0]);
    }

    /// Scalar-loop reference, written against the row-major layout only.
    fn reference_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for l in &net.layers {
            let mut next = Vec::new();
            for o in 0..l.out_dim {
                let mut z = l.bias[o];
                for i in 0..l.in_dim {
                    z += l.weights[o * l.in_dim + i] * cur[i];
                }
                next.push(match l.activation {
                    Activation::Relu => {
                        if z > 0.0 {
                            z
                        } else {
                            0.0
                        }
                    }
                    Activation::Elu => {
                        if z > 0.0 {
                            z
                        } else {
                            z.exp() - 1.0
                        }
                    }
                    Activation::Identity => z,
                });
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn forward_matches_scalar_reference() {
        let mut rng = seeded_rng(1, 0);
        let net = Mlp::new(&[4, 8, 2], Activation::Relu, Activation::Identity, &mut rng);
        for x in [[0.1, -0.2, 0.3, 1.5], [2.0, 0.0, -1.0, 0.25], [-0.7, 0.7, 0.9, -3.0]] {
            let got = net.predict(&x);
            let want = reference_forward(&net, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
            assert_eq!(net.forward(&x).0, got);
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let net = Mlp::agent(3, 8, &mut seeded_rng(2, 0));
        let (_, cache) = net.forward(&[0.3, 1.0, -0.2, 0.5, 0.9]);
        let (g, dx) = net.backward(&cache, &[0.0; 3]);
        assert!(g.is_zero());
        assert!(dx.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn relu_blocks_gradient_at_negative_preactivation() {
        let mut layer = DenseLayer::zeros(1, 1, Activation::Relu);
        layer.weights[0] = 1.0;
        layer.bias[0] = -5.0;
        let net = Mlp { layers: vec![layer] };
        let (_, cache) = net.forward(&[1.0]);
        let (g, dx) = net.backward(&cache, &[1.0]);
        assert!(g.is_zero());
        assert_eq!(dx, vec![0.0]);
    }

    /// Central differences of `f(net) = output . dout` for every parameter and input.
    fn check_gradients(net: &Mlp, x: &[f64], dout: &[f64]) {
        let h = 1e-5;
        let objective = |n: &Mlp, x: &[f64]| dot(&reference_forward(n, x), dout);
        let (_, cache) = net.forward(x);
        let (grads, dx) = net.backward(&cache, dout);
        let analytic = grads.slices();
        let mut probe = net.clone();
        for t in 0..analytic.len() {
            for k in 0..analytic[t].len() {
                let orig = probe.param_slices()[t][k];
                probe.param_slices_mut()[t][k] = orig + h;
                let up = objective(&probe, x);
                probe.param_slices_mut()[t][k] = orig - h;
                let down = objective(&probe, x);
                probe.param_slices_mut()[t][k] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!(
                    rel_err(fd, analytic[t][k]) < 1e-4,
                    "tensor {t}[{k}]: fd {fd} vs {}",
                    analytic[t][k]
                );
            }
        }
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            let fd = (objective(net, &xp) - objective(net, &xm)) / (2.0 * h);
            assert!(rel_err(fd, dx[i]) < 1e-4, "input {i}: fd {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded_rng(3, 0);
        for act in [Activation::Relu, Activation::Elu] {
            for _ in 0..10 {
                let net = Mlp::new(&[5, 8, 3], act, Activation::Identity, &mut rng);
                let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let dout: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                check_gradients(&net, &x, &dout);
            }
        }
    }

    #[test]
    fn sgd_step() {
        let mut p = vec![1.0];
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1);
        opt.step(vec![&mut p], &[&[1.0]]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::adam()] {
            let mut p = vec![0.3, -0.2];
            let mut opt = OptimizerState::new(kind, 1e-4);
            opt.step(vec![&mut p], &[&[0.0, 0.0]]).unwrap();
            assert_eq!(p, vec![0.3, -0.2]);
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = vec![0.0];
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 1e-4);
        opt.step(vec![&mut p], &[&[1.0]]).unwrap();
        // m_hat = v_hat = 1 after bias correction.
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn nan_gradient_aborts_step() {
        let mut p = vec![1.0, 2.0];
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 1e-3);
        assert_eq!(
            opt.step(vec![&mut p], &[&[0.1, f64::NAN]]),
            Err(NnError::NonFiniteGradient { tensor: 0 })
        );
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn replay_evicts_fifo() {
        let mut mem = ReplayMemory::new(3);
        for i in 0..4 {
            mem.push(i);
        }
        assert_eq!(mem.len(), 3);
        assert_eq!(mem.iter_oldest_first().copied().collect::<Vec<_>>(), vec![1, 2, 3]);
        mem.push(4);
        assert_eq!(mem.iter_oldest_first().copied().collect::<Vec<_>>(), vec![2, 3, 4]);
    }

    #[test]
    fn replay_sampling() {
        let mut rng = seeded_rng(4, 0);
        let empty: ReplayMemory<u8> = ReplayMemory::new(2);
        assert_eq!(empty.sample(1, &mut rng).unwrap_err(), NnError::EmptyReplay);

        let mut one = ReplayMemory::new(5);
        one.push(42);
        assert!(one.sample(10, &mut rng).unwrap().iter().all(|&&x| x == 42));

        let mut ten = ReplayMemory::new(10);
        (0..10).for_each(|i| ten.push(i));
        let mut counts = [0usize; 10];
        for &&i in &ten.sample(100_000, &mut rng).unwrap() {
            counts[i] += 1;
        }
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() <= 1_000.0, "count {c}");
        }
    }

    #[test]
    fn flops_convention() {
        let mut rng = seeded_rng(5, 0);
        let one = Mlp::new(&[4, 8], Activation::Relu, Activation::Relu, &mut rng);
        assert_eq!(flops_of(&one), 2 * 4 * 8 + 8 + 8);
        let two = Mlp::new(&[4, 8, 2], Activation::Relu, Activation::Identity, &mut rng);
        assert_eq!(flops_of(&two), 80 + (2 * 8 * 2 + 2));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.2, 0.9]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
