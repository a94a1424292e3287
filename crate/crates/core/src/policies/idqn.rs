//! Independent double-DQN baseline: every device learns from its own reward
//! with no mixer and no gradient coupling between agents.

use crate::env::Scenario;
use crate::nn::argmax;
use crate::qmix::{
    accumulate_batch, train_with, Algorithm, Learner, LearnerGrads, TrainConfig, TrainError, TrainOutcome, Transition,
};
use crate::traffic::TrafficConfig;

/// Sum over agents of each agent's mean squared TD error, with the
/// double-DQN target `r_i + gamma * Q_target(z'_i, argmax_a Q(z'_i, a))`.
pub fn idqn_loss(learner: &Learner, target: &Learner, batch: &[Transition], gamma: f64) -> (f64, LearnerGrads) {
    assert!(!batch.is_empty(), "empty batch");
    let agents = &learner.agents;
    let w = agents.obs_width();
    let m = agents.n_actions();
    let n = batch[0].actions.len();
    let scale = 1.0 / batch.len() as f64;

    accumulate_batch(learner, batch, |t, grads: &mut LearnerGrads| {
        let mut loss = 0.0;
        let mut dout = vec![0.0; m];
        for i in 0..n {
            let x = &t.obs[i * w..(i + 1) * w];
            let (out, cache) = agents.net(i).forward(x);
            let r = t.agent_rewards[i];
            let y = if gamma == 0.0 {
                r
            } else {
                let x_next = &t.next_obs[i * w..(i + 1) * w];
                let a_next = argmax(&agents.net(i).predict(x_next));
                r + gamma * target.agents.net(i).predict(x_next)[a_next]
            };
            let diff = out[t.actions[i]] - y;
            dout.fill(0.0);
            dout[t.actions[i]] = 2.0 * diff * scale;
            let idx = agents.net_index(i);
            agents.networks[idx].backward_accumulate(&cache, &dout, &mut grads.agents[idx]);
            loss += diff * diff * scale;
        }
        loss
    })
}

pub fn idqn_train(scenario: &Scenario, traffic: &TrafficConfig, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with(scenario, traffic, cfg, Algorithm::Idqn, |_| {})
}
