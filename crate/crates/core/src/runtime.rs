//! Closed-loop autoregressive control of a [`SimWorld`](crate::physics::SimWorld)
//! with the trained sequence policy, including the Prompt Reset rule.
//!
//! The reset check runs at the start of a control step, before the new state
//! tokens are appended: when it fires, the token history is cleared and the
//! just-observed states become the only timestep the next forward pass sees.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::expert::RATE_LIMIT;
use crate::morphology::{largest_connected_cluster, ConnectivityMask, Morphology};
use crate::physics::{spawn_with_params, SimParams};
use crate::policy::{forward, PolicyWeights, Window, WindowStep, STATE_DIM};
use crate::reward::{step_reward, PositionHistory, RewardConfig};
use crate::trajectory::{Trajectory, TrajectoryStep, TrajectorySource};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ResetRule {
    /// Action-history window, control steps.
    pub window: usize,
    /// Fire when the max per-dimension std falls below this.
    pub std_threshold: f64,
    /// No firing at or before this step.
    pub min_step: usize,
}

impl Default for ResetRule {
    fn default() -> Self {
        ResetRule {
            window: 5,
            std_threshold: 0.2,
            min_step: 50,
        }
    }
}

/// Prompt Reset predicate: fires iff `step > min_step` and the maximum over
/// included action dimensions of the population standard deviation across the
/// `window` most recent action vectors is below the threshold. Dimensions of
/// detached modules are excluded via `include`. Fewer than `window` actions
/// never fire.
pub fn reset_check(
    actions: &[Vec<f64>],
    include: &[bool],
    step: usize,
    rule: &ResetRule,
) -> bool {
    if step <= rule.min_step || actions.len() < rule.window {
        return false;
    }
    let recent = &actions[actions.len() - rule.window..];
    let dims = recent[0].len();
    let mut max_std = f64::NEG_INFINITY;
    let mut any = false;
    for d in 0..dims {
        if !include[d] {
            continue;
        }
        any = true;
        let mean = recent.iter().map(|a| a[d]).sum::<f64>() / rule.window as f64;
        let var = recent
            .iter()
            .map(|a| (a[d] - mean) * (a[d] - mean))
            .sum::<f64>()
            / rule.window as f64;
        let std = libm::sqrt(var);
        if std > max_std {
            max_std = std;
        }
    }
    any && max_std < rule.std_threshold
}

/// Rolling inference state: up to K timesteps of tokens plus the recent-action
/// buffer for the reset rule.
#[derive(Debug, Clone, Default)]
pub struct ControlContext {
    steps: VecDeque<WindowStep>,
    actions: VecDeque<Vec<f64>>,
    pub step_counter: usize,
    pub reset_count: usize,
    cooldown: usize,
    context_steps: usize,
    action_capacity: usize,
}

impl ControlContext {
    pub fn new(context_steps: usize, action_capacity: usize) -> Self {
        ControlContext {
            context_steps,
            action_capacity,
            ..Default::default()
        }
    }

    pub fn history_len(&self) -> usize {
        self.steps.len()
    }

    fn push_states(&mut self, step: WindowStep) {
        if self.steps.len() == self.context_steps {
            self.steps.pop_front();
        }
        self.steps.push_back(step);
    }

    fn set_last_action(&mut self, normalized: Vec<f64>) {
        self.steps.back_mut().expect("state pushed").action = Some(normalized);
    }

    fn push_action(&mut self, executed: Vec<f64>) {
        if self.actions.len() == self.action_capacity {
            self.actions.pop_front();
        }
        self.actions.push_back(executed);
    }

    fn window(&self) -> Window {
        Window {
            steps: self.steps.iter().cloned().collect(),
        }
    }

    fn clear_tokens(&mut self) {
        self.steps.clear();
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpisodeStats {
    pub reset_count: usize,
    pub first_detach_step: Option<usize>,
    pub final_mask: ConnectivityMask,
}

/// Episode wiring: morphology, physics, reward, and whether welds may break.
#[derive(Debug, Clone)]
pub struct RuntimeContext {
    pub morphology: Morphology,
    pub sim: SimParams,
    pub reward: RewardConfig,
    pub breakable: bool,
}

/// Autoregressive closed-loop episode. Actions are de-normalized by the joint
/// limit, clamped, and rate-limited exactly as in expert rollouts.
pub fn run_episode(
    weights: &PolicyWeights,
    ctx: &RuntimeContext,
    seed: u64,
    length: usize,
    reset_rule: Option<&ResetRule>,
) -> (Trajectory, EpisodeStats) {
    let n = ctx.morphology.n_modules();
    let ns = weights.layout.n_slots;
    assert!(n <= ns, "morphology exceeds slot count");
    let limit = ctx.morphology.spec().joint_limit;
    let mut world = spawn_with_params(&ctx.morphology, seed, ctx.breakable, ctx.sim.clone());
    let mut cc = ControlContext::new(
        weights.layout.context_steps,
        reset_rule.map(|r| r.window).unwrap_or(1).max(1),
    );
    let mut history = PositionHistory::new(ctx.reward.window);
    let mut prev_action = vec![0.0; n];
    let mut steps = Vec::with_capacity(length);
    let mut truncated = false;
    let mut first_detach_step = None;
    let initial_active = world.mask().n_active();

    for step_idx in 0..length {
        let pre_states = world.module_states();
        let pre_mask = world.mask();
        let pre_position = world.cluster_position();
        let cluster = largest_connected_cluster(&ctx.morphology, &pre_mask);
        let include: Vec<bool> = (0..n).map(|m| cluster.contains(&m)).collect();

        if let Some(rule) = reset_rule {
            if cc.cooldown > 0 {
                cc.cooldown -= 1;
            } else if reset_check(
                cc.actions.make_contiguous(),
                &include,
                step_idx,
                rule,
            ) {
                cc.clear_tokens();
                cc.reset_count += 1;
                cc.cooldown = rule.window;
            }
        }

        let mut wstep = WindowStep {
            states: vec![[0.0; STATE_DIM]; ns],
            slot_valid: vec![false; ns],
            cluster: vec![false; ns],
            action: None,
        };
        for m in 0..n {
            wstep.states[m] = pre_states[m].to_array();
            wstep.slot_valid[m] = true;
            wstep.cluster[m] = include[m];
        }
        cc.push_states(wstep);

        let (preds, _) = forward(weights, &cc.window());
        let raw = preds.last().expect("at least one step");
        let action: Vec<f64> = (0..n)
            .map(|m| {
                let target = (raw[m] * limit).clamp(-limit, limit);
                prev_action[m] + (target - prev_action[m]).clamp(-RATE_LIMIT, RATE_LIMIT)
            })
            .collect();

        let report = world.step_control(&action);
        let mut normalized = vec![0.0; ns];
        for m in 0..n {
            normalized[m] = action[m] / limit;
        }
        cc.set_last_action(normalized);
        cc.push_action(action.clone());
        cc.step_counter += 1;

        if first_detach_step.is_none() && report.mask.n_active() < initial_active {
            first_detach_step = Some(step_idx);
        }

        history.push(pre_position);
        let reward = step_reward(&history, &pre_mask, &ctx.reward);
        steps.push(TrajectoryStep {
            module_states: pre_states,
            action: action.clone(),
            mask: pre_mask.active.clone(),
            cluster_position: pre_position,
            reward,
        });
        if report.failed {
            truncated = true;
            break;
        }
        prev_action = action;
    }

    let stats = EpisodeStats {
        reset_count: cc.reset_count,
        first_detach_step,
        final_mask: world.mask(),
    };
    (
        Trajectory {
            morphology_id: seed,
            seed,
            source: TrajectorySource::Policy,
            steps,
            truncated,
        },
        stats,
    )
}
