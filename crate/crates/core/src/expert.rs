//! Per-morphology expert policies trained with antithetic evolution
//! strategies.
//!
//! Each expert is a small feed-forward network over a flat proprioceptive
//! observation. Training samples Gaussian perturbation pairs around the
//! current weights, scores each candidate by its mean episodic return, and
//! applies the rank-normalized ES update. The three destruct modes control
//! which welds are breakable during training episodes.

use alloc::vec;
use alloc::vec::Vec;

use crate::morphology::Morphology;
use crate::physics::{spawn_with_params, SimParams, SimWorld};
use crate::reward::{step_reward, PositionHistory, RewardConfig};
use crate::rng;
use crate::trajectory::{Trajectory, TrajectoryStep, TrajectorySource};

/// Maximum change of a joint target per control step, radians.
pub const RATE_LIMIT: f64 = 0.3;

/// Return assigned to an episode that hits the instability abort.
pub const ABORT_RETURN: f64 = -1000.0;

pub const HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum DestructMode {
    /// All welds breakable.
    SelfDestruct,
    /// No weld can ever break.
    NoDestruct,
    /// Only the weld of one designated leaf module is breakable.
    RandomDestruct,
}

/// Two-hidden-layer tanh network; output tanh scaled to the joint limit.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MlpPolicy {
    pub weights: Vec<f64>,
    pub obs_dim: usize,
    pub n_out: usize,
    /// Output scale (the joint limit, rad).
    pub out_scale: f64,
}

impl MlpPolicy {
    pub fn n_params(obs_dim: usize, n_out: usize) -> usize {
        HIDDEN * obs_dim + HIDDEN + HIDDEN * HIDDEN + HIDDEN + n_out * HIDDEN + n_out
    }

    pub fn zeros(obs_dim: usize, n_out: usize, out_scale: f64) -> Self {
        MlpPolicy {
            weights: vec![0.0; Self::n_params(obs_dim, n_out)],
            obs_dim,
            n_out,
            out_scale,
        }
    }

    /// Seeded scaled-normal initialization (1/sqrt(fan_in) per layer, zero
    /// biases).
    pub fn init(obs_dim: usize, n_out: usize, out_scale: f64, seed: u64) -> Self {
        let mut p = Self::zeros(obs_dim, n_out, out_scale);
        let mut r = rng::stream(seed);
        let mut off = 0;
        for (rows, cols) in [(HIDDEN, obs_dim), (HIDDEN, HIDDEN), (n_out, HIDDEN)] {
            let scale = 1.0 / libm::sqrt(cols as f64);
            for w in &mut p.weights[off..off + rows * cols] {
                *w = scale * rng::standard_normal(&mut r);
            }
            off += rows * cols + rows; // biases stay zero
        }
        p
    }

    pub fn act(&self, obs: &[f64]) -> Vec<f64> {
        assert_eq!(obs.len(), self.obs_dim);
        let w = &self.weights;
        let mut off = 0;
        let mut h1 = vec![0.0; HIDDEN];
        for i in 0..HIDDEN {
            let row = &w[off + i * self.obs_dim..off + (i + 1) * self.obs_dim];
            let mut s = 0.0;
            for (a, b) in row.iter().zip(obs) {
                s += a * b;
            }
            h1[i] = s;
        }
        off += HIDDEN * self.obs_dim;
        for i in 0..HIDDEN {
            h1[i] = libm::tanh(h1[i] + w[off + i]);
        }
        off += HIDDEN;
        let mut h2 = vec![0.0; HIDDEN];
        for i in 0..HIDDEN {
            let row = &w[off + i * HIDDEN..off + (i + 1) * HIDDEN];
            let mut s = 0.0;
            for (a, b) in row.iter().zip(&h1) {
                s += a * b;
            }
            h2[i] = s;
        }
        off += HIDDEN * HIDDEN;
        for i in 0..HIDDEN {
            h2[i] = libm::tanh(h2[i] + w[off + i]);
        }
        off += HIDDEN;
        let mut out = vec![0.0; self.n_out];
        for i in 0..self.n_out {
            let row = &w[off + i * HIDDEN..off + (i + 1) * HIDDEN];
            let mut s = 0.0;
            for (a, b) in row.iter().zip(&h2) {
                s += a * b;
            }
            out[i] = self.out_scale * libm::tanh(s + w[off + self.n_out * HIDDEN + i]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ESConfig {
    /// Population size; must be even (antithetic pairs).
    pub population: usize,
    pub noise_std: f64,
    pub learning_rate: f64,
    pub episodes_per_eval: usize,
    /// Episode length, control steps.
    pub episode_length: usize,
    pub generations: usize,
    pub seed: u64,
}

impl Default for ESConfig {
    fn default() -> Self {
        ESConfig {
            population: 64,
            noise_std: 0.05,
            learning_rate: 0.02,
            episodes_per_eval: 2,
            episode_length: 400,
            generations: 300,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainingCurve {
    /// Population mean return per generation.
    pub mean_return: Vec<f64>,
    /// Running maximum of candidate returns (non-decreasing).
    pub best_return: Vec<f64>,
}

/// Everything an episode needs besides the weights: morphology, destruct-mode
/// wiring, physics and reward configuration.
#[derive(Debug, Clone)]
pub struct ExpertContext {
    pub morphology: Morphology,
    pub mode: DestructMode,
    /// Module whose weld stays breakable under RandomDestruct.
    pub designated_leaf: Option<usize>,
    pub sim: SimParams,
    pub reward: RewardConfig,
}

impl ExpertContext {
    pub fn new(
        morphology: Morphology,
        mode: DestructMode,
        seed: u64,
        sim: SimParams,
        reward: RewardConfig,
    ) -> Self {
        let designated_leaf = match mode {
            DestructMode::RandomDestruct => Some(designated_leaf(&morphology, seed)),
            _ => None,
        };
        ExpertContext {
            morphology,
            mode,
            designated_leaf,
            sim,
            reward,
        }
    }

    pub fn obs_dim(&self) -> usize {
        let n = self.morphology.n_modules();
        (n - 1) + 6 + 3 * n
    }

    /// Spawn an episode world with the mode's breakability wiring applied.
    pub fn spawn_episode(&self, seed: u64) -> SimWorld {
        match self.mode {
            DestructMode::NoDestruct => {
                spawn_with_params(&self.morphology, seed, false, self.sim.clone())
            }
            DestructMode::SelfDestruct => {
                spawn_with_params(&self.morphology, seed, true, self.sim.clone())
            }
            DestructMode::RandomDestruct => {
                let mut w =
                    spawn_with_params(&self.morphology, seed, true, self.sim.clone());
                let leaf = self.designated_leaf.expect("designated leaf set");
                let keep = self
                    .morphology
                    .attachments
                    .iter()
                    .position(|a| a.child_module == leaf)
                    .expect("leaf has a parent weld");
                for (i, weld) in w.welds.iter_mut().enumerate() {
                    if i != keep {
                        weld.tau_detach = f64::INFINITY;
                    }
                }
                w
            }
        }
    }
}

/// Uniform choice over leaf modules (modules that are nobody's parent), a
/// function of (morphology, seed) only.
pub fn designated_leaf(m: &Morphology, seed: u64) -> usize {
    let n = m.n_modules();
    let leaves: Vec<usize> = (1..n)
        .filter(|&i| !m.attachments.iter().any(|a| a.parent_module == i))
        .collect();
    assert!(!leaves.is_empty(), "single-module morphology has no weld");
    use rand::Rng;
    let mut r = rng::stream(rng::split(seed, 0x1eaf));
    leaves[r.gen_range(0..leaves.len())]
}

/// Deterministic closed-loop rollout. Actions are rate-limited to
/// [`RATE_LIMIT`] radians per control step. An instability abort marks the
/// trajectory truncated and stops early.
pub fn rollout(
    policy: &MlpPolicy,
    ctx: &ExpertContext,
    seed: u64,
    length: usize,
) -> Trajectory {
    let mut world = ctx.spawn_episode(seed);
    let n = ctx.morphology.n_modules();
    let mut prev_action = vec![0.0; n];
    let mut history = PositionHistory::new(ctx.reward.window);
    let mut steps = Vec::with_capacity(length);
    let mut truncated = false;
    for _ in 0..length {
        let obs = world.expert_observation(&prev_action);
        let raw = policy.act(&obs);
        let action: Vec<f64> = raw
            .iter()
            .zip(&prev_action)
            .map(|(&r, &p)| p + (r - p).clamp(-RATE_LIMIT, RATE_LIMIT))
            .collect();
        let pre_states = world.module_states();
        let pre_mask = world.mask();
        let pre_position = world.cluster_position();
        let report = world.step_control(&action);
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
    Trajectory {
        morphology_id: seed,
        seed,
        source: TrajectorySource::Expert,
        steps,
        truncated,
    }
}

/// Mean episodic return of `policy` over the given episode seeds; an aborted
/// episode scores [`ABORT_RETURN`].
pub fn evaluate(policy: &MlpPolicy, ctx: &ExpertContext, seeds: &[u64], length: usize) -> f64 {
    let mut total = 0.0;
    for &s in seeds {
        let t = rollout(policy, ctx, s, length);
        total += if t.truncated {
            ABORT_RETURN
        } else {
            t.episode_return()
        };
    }
    total / seeds.len() as f64
}

/// Episode seeds shared by every candidate of one generation ("fresh-seeded"
/// per generation, common across the population).
pub fn generation_seeds(cfg: &ESConfig, generation: usize) -> Vec<u64> {
    (0..cfg.episodes_per_eval)
        .map(|e| {
            rng::split(
                cfg.seed,
                0xE5_0000_0000 + (generation as u64) * 1024 + e as u64,
            )
        })
        .collect()
}

/// Antithetic ES state machine: `ask` yields the candidate weight vectors for
/// the current generation, `tell` consumes their returns and applies the
/// rank-normalized update. Callers may evaluate candidates in parallel; the
/// update depends only on the returned scores, so results are independent of
/// evaluation order.
#[derive(Debug, Clone)]
pub struct EsTrainer {
    pub cfg: ESConfig,
    pub theta: Vec<f64>,
    pub generation: usize,
    pub curve: TrainingCurve,
    pub best_return: f64,
    pub best_weights: Vec<f64>,
    noises: Vec<Vec<f64>>,
}

impl EsTrainer {
    pub fn new(theta: Vec<f64>, cfg: ESConfig) -> Self {
        assert!(cfg.population >= 2 && cfg.population % 2 == 0);
        EsTrainer {
            best_weights: theta.clone(),
            theta,
            generation: 0,
            curve: TrainingCurve::default(),
            best_return: f64::NEG_INFINITY,
            noises: Vec::new(),
            cfg,
        }
    }

    pub fn ask(&mut self) -> Vec<Vec<f64>> {
        let half = self.cfg.population / 2;
        let dim = self.theta.len();
        self.noises.clear();
        for i in 0..half {
            let mut r = rng::stream(rng::split(
                self.cfg.seed,
                0xA5_0000_0000 + (self.generation as u64) * 4096 + i as u64,
            ));
            let eps: Vec<f64> = (0..dim).map(|_| rng::standard_normal(&mut r)).collect();
            self.noises.push(eps);
        }
        let mut out = Vec::with_capacity(self.cfg.population);
        for eps in &self.noises {
            for sign in [1.0, -1.0] {
                let c: Vec<f64> = self
                    .theta
                    .iter()
                    .zip(eps)
                    .map(|(&t, &e)| t + sign * self.cfg.noise_std * e)
                    .collect();
                out.push(c);
            }
        }
        out
    }

    pub fn tell(&mut self, candidates: &[Vec<f64>], returns: &[f64]) {
        assert_eq!(returns.len(), self.cfg.population);
        assert_eq!(candidates.len(), self.cfg.population);
        // Centered rank transform in [-0.5, 0.5]; ties broken by index for
        // determinism.
        let pop = returns.len();
        let mut order: Vec<usize> = (0..pop).collect();
        order.sort_by(|&a, &b| {
            returns[a]
                .partial_cmp(&returns[b])
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut util = vec![0.0; pop];
        for (rank, &idx) in order.iter().enumerate() {
            util[idx] = rank as f64 / (pop - 1) as f64 - 0.5;
        }
        if self.cfg.noise_std > 0.0 {
            let scale = self.cfg.learning_rate / (pop as f64 * self.cfg.noise_std);
            for (pair, eps) in self.noises.iter().enumerate() {
                let u = util[2 * pair] - util[2 * pair + 1];
                for (t, &e) in self.theta.iter_mut().zip(eps) {
                    *t += scale * u * e;
                }
            }
        }
        let mean = returns.iter().sum::<f64>() / pop as f64;
        let (gen_best_idx, gen_best) = returns
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, r)| {
                if r > acc.1 {
                    (i, r)
                } else {
                    acc
                }
            });
        if gen_best > self.best_return {
            self.best_return = gen_best;
            self.best_weights = candidates[gen_best_idx].clone();
        }
        self.curve.mean_return.push(mean);
        self.curve.best_return.push(self.best_return);
        self.generation += 1;
        self.noises.clear();
    }
}

/// Serial reference training loop. The std companion runs the same ask/tell
/// protocol with parallel candidate evaluation; results are identical because
/// candidate seeds are fixed.
pub fn train_expert(ctx: &ExpertContext, cfg: &ESConfig) -> (MlpPolicy, TrainingCurve) {
    let obs_dim = ctx.obs_dim();
    let n = ctx.morphology.n_modules();
    let limit = ctx.morphology.spec().joint_limit;
    let init = MlpPolicy::init(obs_dim, n, limit, rng::split(cfg.seed, 0x1217));
    let mut tr = EsTrainer::new(init.weights.clone(), cfg.clone());
    for g in 0..cfg.generations {
        let seeds = generation_seeds(cfg, g);
        let candidates = tr.ask();
        let returns: Vec<f64> = candidates
            .iter()
            .map(|w| {
                let p = MlpPolicy {
                    weights: w.clone(),
                    obs_dim,
                    n_out: n,
                    out_scale: limit,
                };
                evaluate(&p, ctx, &seeds, cfg.episode_length)
            })
            .collect();
        tr.tell(&candidates, &returns);
    }
    (
        MlpPolicy {
            weights: tr.best_weights.clone(),
            obs_dim,
            n_out: n,
            out_scale: limit,
        },
        tr.curve,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::sample_morphology;

    fn ctx(mode: DestructMode, seed: u64) -> ExpertContext {
        let m = sample_morphology(3, 4).unwrap();
        ExpertContext::new(m, mode, seed, SimParams::default(), RewardConfig::default())
    }

    #[test]
    fn rollout_is_deterministic() {
        let c = ctx(DestructMode::SelfDestruct, 0);
        let p = MlpPolicy::init(c.obs_dim(), 4, 1.57, 9);
        let a = rollout(&p, &c, 5, 60);
        let b = rollout(&p, &c, 5, 60);
        assert_eq!(a, b);
        assert!(a.len() <= 60);
        assert!(a.mask_monotone());
    }

    #[test]
    fn rate_limit_respected() {
        let c = ctx(DestructMode::SelfDestruct, 0);
        let p = MlpPolicy::init(c.obs_dim(), 4, 1.57, 2);
        let t = rollout(&p, &c, 1, 40);
        let mut prev = alloc::vec![0.0; 4];
        for s in &t.steps {
            for (a, p) in s.action.iter().zip(&prev) {
                assert!((a - p).abs() <= RATE_LIMIT + 1e-12);
            }
            prev = s.action.clone();
        }
    }

    #[test]
    fn no_destruct_mask_stays_all_ones() {
        let c = ctx(DestructMode::NoDestruct, 0);
        let p = MlpPolicy::init(c.obs_dim(), 4, 1.57, 3);
        let t = rollout(&p, &c, 2, 100);
        for s in &t.steps {
            assert!(s.mask.iter().all(|&m| m));
        }
    }

    #[test]
    fn random_destruct_leaf_is_seed_function() {
        let m = sample_morphology(3, 4).unwrap();
        for seed in 0..20 {
            assert_eq!(designated_leaf(&m, seed), designated_leaf(&m, seed));
        }
        // Leaves are never the root and never a parent.
        for seed in 0..50 {
            let l = designated_leaf(&m, seed);
            assert!(l > 0);
            assert!(!m.attachments.iter().any(|a| a.parent_module == l));
        }
    }

    #[test]
    fn random_destruct_spawn_leaves_one_finite_threshold() {
        let c = ctx(DestructMode::RandomDestruct, 7);
        let w = c.spawn_episode(0);
        let finite = w.welds.iter().filter(|w| w.tau_detach.is_finite()).count();
        assert_eq!(finite, 1);
    }

    #[test]
    fn zero_noise_never_changes_weights() {
        let cfg = ESConfig {
            population: 8,
            noise_std: 0.0,
            generations: 1,
            ..ESConfig::default()
        };
        let theta = alloc::vec![0.3; 40];
        let mut tr = EsTrainer::new(theta.clone(), cfg);
        let cands = tr.ask();
        let rets: Vec<f64> = (0..8).map(|i| i as f64).collect();
        tr.tell(&cands, &rets);
        assert_eq!(tr.theta, theta);
    }

    #[test]
    fn update_invariant_to_return_offset() {
        let cfg = ESConfig {
            population: 8,
            generations: 1,
            seed: 5,
            ..ESConfig::default()
        };
        let theta = alloc::vec![0.1; 30];
        let mut t1 = EsTrainer::new(theta.clone(), cfg.clone());
        let mut t2 = EsTrainer::new(theta, cfg);
        let c1 = t1.ask();
        let c2 = t2.ask();
        let rets: Vec<f64> = alloc::vec![3.0, -1.0, 0.5, 9.0, 2.0, 2.5, -4.0, 7.0];
        let shifted: Vec<f64> = rets.iter().map(|r| r + 123.456).collect();
        t1.tell(&c1, &rets);
        t2.tell(&c2, &shifted);
        assert_eq!(t1.theta, t2.theta);
    }

    #[test]
    fn best_so_far_curve_is_non_decreasing() {
        let cfg = ESConfig {
            population: 4,
            generations: 3,
            seed: 2,
            ..ESConfig::default()
        };
        let mut tr = EsTrainer::new(alloc::vec![0.0; 10], cfg);
        use rand::Rng;
        let mut r = rng::stream(4);
        for _ in 0..5 {
            let c = tr.ask();
            let rets: Vec<f64> = (0..4).map(|_| r.gen_range(-10.0..10.0)).collect();
            tr.tell(&c, &rets);
        }
        for w in tr.curve.best_return.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn mlp_output_within_limits() {
        use rand::Rng;
        let p = MlpPolicy::init(21, 4, 1.5, 11);
        let mut r = rng::stream(8);
        for _ in 0..50 {
            let obs: Vec<f64> = (0..21).map(|_| r.gen_range(-3.0..3.0)).collect();
            for a in p.act(&obs) {
                assert!(a.abs() <= 1.5);
            }
        }
    }

    /// Short smoke training on a tiny budget: ES improves the population mean
    /// on the locomotion objective (not a convergence claim).
    #[test]
    fn smoke_training_runs_and_is_deterministic() {
        let c = ctx(DestructMode::NoDestruct, 0);
        let cfg = ESConfig {
            population: 4,
            episodes_per_eval: 1,
            episode_length: 30,
            generations: 2,
            seed: 3,
            ..ESConfig::default()
        };
        let (p1, curve1) = train_expert(&c, &cfg);
        let (p2, curve2) = train_expert(&c, &cfg);
        assert_eq!(p1, p2);
        assert_eq!(curve1, curve2);
        assert_eq!(curve1.mean_return.len(), 2);
    }
}
