use super::{Decision, DecisionContext, Policy, PolicyTag};

/// Longest-processing-time greedy: devices in descending rate order each go
/// to the currently least-loaded resource. Ties in rate keep device order;
/// ties in load pick the lowest resource index.
pub fn waterfill_assign(rates: &[f64], m: usize) -> Vec<usize> {
    assert!(m >= 1, "need at least one resource");
    let mut order: Vec<usize> = (0..rates.len()).collect();
    order.sort_by(|&a, &b| rates[b].total_cmp(&rates[a]));
    let mut load = vec![0.0f64; m];
    let mut assignment = vec![0; rates.len()];
    for dev in order {
        let mut best = 0;
        for r in 1..m {
            if load[r] < load[best] {
                best = r;
            }
        }
        load[best] += rates[dev];
        assignment[dev] = best;
    }
    assignment
}

/// Largest total rate on any resource under `assignment`.
pub fn max_load(rates: &[f64], assignment: &[usize], m: usize) -> f64 {
    let mut load = vec![0.0; m];
    for (&r, &a) in rates.iter().zip(assignment) {
        load[a] += r;
    }
    load.into_iter().fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WfState {
    /// Rates the base station acted on at the last decision.
    pub estimates: Vec<f64>,
    pub assignment: Vec<usize>,
    pub overhead_slots: u64,
}

impl WfState {
    pub fn new(overhead_slots: u64) -> Self {
        Self {
            estimates: Vec::new(),
            assignment: Vec::new(),
            overhead_slots,
        }
    }
}

/// Recomputes WF's assignment from the devices' reported estimates.
pub fn wf_policy_step(state: &mut WfState, reported: &[f64], m: usize) -> Vec<usize> {
    state.estimates = reported.to_vec();
    state.assignment = waterfill_assign(reported, m);
    state.assignment.clone()
}

/// Water-filling on the true current rates, without signaling overhead.
pub fn wflb_policy_step(true_rates: &[f64], m: usize) -> Vec<usize> {
    waterfill_assign(true_rates, m)
}

/// WF (estimated rates, reserved downlink slots) or its idealized bound WFLB.
#[derive(Debug, Clone)]
pub struct WaterFillPolicy {
    state: WfState,
    ideal: bool,
}

impl WaterFillPolicy {
    pub fn estimated(overhead_slots: u64) -> Self {
        Self {
            state: WfState::new(overhead_slots),
            ideal: false,
        }
    }

    pub fn ideal() -> Self {
        Self {
            state: WfState::new(0),
            ideal: true,
        }
    }

    pub fn state(&self) -> &WfState {
        &self.state
    }
}

impl Policy for WaterFillPolicy {
    fn tag(&self) -> PolicyTag {
        if self.ideal {
            PolicyTag::Wflb
        } else {
            PolicyTag::Wf
        }
    }

    fn reserved_slots(&self) -> u64 {
        self.state.overhead_slots
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Decision {
        let n = ctx.observations.len();
        if self.ideal {
            let rates = &ctx.true_rates[..n];
            self.state.estimates = rates.to_vec();
            self.state.assignment = wflb_policy_step(rates, ctx.m);
            return Decision::Select(self.state.assignment.clone());
        }
        let reported: Vec<f64> = ctx.observations.iter().map(|o| o.lambda_bar).collect();
        Decision::Select(wf_policy_step(&mut self.state, &reported, ctx.m))
    }
}
