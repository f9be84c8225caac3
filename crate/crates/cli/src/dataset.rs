//! Dataset collection, indexing, and window sampling for sequence-policy
//! training: closed-loop expert rollouts plus open-loop sinusoidal proxy
//! rollouts on reduced morphologies under perturbed physics.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use molt_core::expert::{rollout, ExpertContext, MlpPolicy};
use molt_core::math::{Quat, Vec3};
use molt_core::morphology::{largest_connected_cluster, ConnectivityMask, Morphology};
use molt_core::physics::{spawn_with_params, SimParams, SimWorld};
use molt_core::policy::{TokenLayout, Window, WindowStep, STATE_DIM};
use molt_core::reward::{step_reward, PositionHistory, RewardConfig};
use molt_core::rng;
use molt_core::trajectory::{Trajectory, TrajectoryStep, TrajectorySource};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::DatasetConfig;
use crate::formats::{read_trajectories, TrajectoryFile};

// ---------------------------------------------------------------- collection

/// Roll out one expert with distinct seeds until `steps_per_config`
/// state-action pairs are stored. Truncated trajectories shorter than
/// `2 * context_steps` are discarded; the stop condition guarantees a total
/// in `[steps_per_config, steps_per_config + episode_length)`.
pub fn collect_expert_trajectories(
    ctx: &ExpertContext,
    policy: &MlpPolicy,
    steps_per_config: usize,
    episode_length: usize,
    context_steps: usize,
    seed: u64,
) -> Vec<Trajectory> {
    let mut out = Vec::new();
    let mut stored = 0usize;
    let mut episode = 0u64;
    while stored < steps_per_config {
        let t = rollout(policy, ctx, rng::split(seed, 0xDA7A_0000 + episode), episode_length);
        episode += 1;
        if t.truncated && t.len() < 2 * context_steps {
            continue;
        }
        stored += t.len();
        out.push(t);
    }
    out
}

/// Rotate all bodies about the vertical axis through their centroid.
fn apply_initial_yaw(world: &mut SimWorld, angle: f64) {
    let n = world.bodies.len() as f64;
    let mut c = Vec3::ZERO;
    for b in &world.bodies {
        c = c + b.position;
    }
    c = c * (1.0 / n);
    let r = Quat::from_axis_angle(Vec3::Z, angle);
    for b in &mut world.bodies {
        let rel = b.position - c;
        b.position = c + r.rotate(rel);
        b.orientation = r.mul_quat(b.orientation).normalized();
        b.linear_velocity = r.rotate(b.linear_velocity);
        b.angular_velocity = r.rotate(b.angular_velocity);
    }
}

/// One open-loop proxy rollout: `a_i(t) = A sin(2π f t + i φ)` with
/// A = 0.5 rad, f = 1 Hz, φ = π/2, on a (reduced) morphology whose welds are
/// locked, under perturbed physics and a random initial yaw.
pub fn proxy_rollout(
    m: &Morphology,
    base: &SimParams,
    reward_cfg: &RewardConfig,
    ds: &DatasetConfig,
    seed: u64,
    length: usize,
) -> Trajectory {
    const AMP: f64 = 0.5;
    const FREQ: f64 = 1.0;
    const PHASE: f64 = core::f64::consts::FRAC_PI_2;
    let mut r = rng::stream(rng::split(seed, 0x9607));
    let mut params = base.clone();
    let jit = |r: &mut rng::Stream, span: f64| 1.0 + r.gen_range(-span..=span);
    params.ground_friction *= jit(&mut r, ds.proxy_friction_jitter);
    params.servo_kp *= jit(&mut r, ds.proxy_gain_jitter);
    params.servo_kd *= jit(&mut r, ds.proxy_gain_jitter);
    let yaw = r.gen_range(0.0..core::f64::consts::TAU);

    let n = m.n_modules();
    let limit = m.spec().joint_limit;
    let mut world = spawn_with_params(m, seed, false, params);
    apply_initial_yaw(&mut world, yaw);
    let mut history = PositionHistory::new(reward_cfg.window);
    let mut steps = Vec::with_capacity(length);
    let mut truncated = false;
    for k in 0..length {
        let t = k as f64 * world.params.control_dt;
        let action: Vec<f64> = (0..n)
            .map(|i| {
                (AMP * (core::f64::consts::TAU * FREQ * t + i as f64 * PHASE).sin())
                    .clamp(-limit, limit)
            })
            .collect();
        let pre_states = world.module_states();
        let pre_mask = world.mask();
        let pre_position = world.cluster_position();
        let report = world.step_control(&action);
        history.push(pre_position);
        let reward = step_reward(&history, &pre_mask, reward_cfg);
        steps.push(TrajectoryStep {
            module_states: pre_states,
            action,
            mask: pre_mask.active.clone(),
            cluster_position: pre_position,
            reward,
        });
        if report.failed {
            truncated = true;
            break;
        }
    }
    Trajectory {
        morphology_id: seed,
        seed,
        source: TrajectorySource::ProxyOpenLoop,
        steps,
        truncated,
    }
}

pub fn collect_proxy_rollouts(
    m: &Morphology,
    base: &SimParams,
    reward_cfg: &RewardConfig,
    ds: &DatasetConfig,
    seed: u64,
    length: usize,
) -> Vec<Trajectory> {
    (0..ds.proxy_per_morphology)
        .map(|i| proxy_rollout(m, base, reward_cfg, ds, rng::split(seed, 0x960_1000 + i as u64), length))
        .collect()
}

// ------------------------------------------------------------------ indexing

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileSummary {
    pub file: String,
    pub morphology_seed: u64,
    pub n_trajectories: usize,
    pub n_pairs: usize,
}

/// Per-source file lists plus the mixing probability, stored as JSON next to
/// the trajectory files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub config_hash: String,
    pub p_real: f64,
    pub expert: Vec<FileSummary>,
    pub proxy: Vec<FileSummary>,
}

impl DatasetIndex {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

// ------------------------------------------------------------------ sampling

/// Trajectories of one source file held in memory for sampling.
#[derive(Debug, Clone)]
pub struct SourceBuffer {
    pub morphology: Morphology,
    pub trajectories: Vec<Trajectory>,
}

/// In-memory dataset with flat per-source trajectory indices.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub p_real: f64,
    pub expert: Vec<SourceBuffer>,
    pub proxy: Vec<SourceBuffer>,
    expert_flat: Vec<(usize, usize)>,
    proxy_flat: Vec<(usize, usize)>,
}

fn flatten(buffers: &[SourceBuffer], min_len: usize) -> Vec<(usize, usize)> {
    let mut flat = Vec::new();
    for (bi, b) in buffers.iter().enumerate() {
        for (ti, t) in b.trajectories.iter().enumerate() {
            if t.len() >= min_len {
                flat.push((bi, ti));
            }
        }
    }
    flat
}

impl Dataset {
    pub fn new(
        p_real: f64,
        expert: Vec<SourceBuffer>,
        proxy: Vec<SourceBuffer>,
        context_steps: usize,
    ) -> Self {
        let expert_flat = flatten(&expert, context_steps);
        let proxy_flat = flatten(&proxy, context_steps);
        Dataset {
            p_real,
            expert,
            proxy,
            expert_flat,
            proxy_flat,
        }
    }

    pub fn load(dir: &Path, index: &DatasetIndex, context_steps: usize) -> Result<Self> {
        let read_all = |files: &[FileSummary]| -> Result<Vec<SourceBuffer>> {
            files
                .iter()
                .map(|f| {
                    let tf = read_trajectories(&dir.join(&f.file))?;
                    Ok(SourceBuffer {
                        morphology: tf.morphology,
                        trajectories: tf.trajectories,
                    })
                })
                .collect()
        };
        Ok(Dataset::new(
            index.p_real,
            read_all(&index.expert)?,
            read_all(&index.proxy)?,
            context_steps,
        ))
    }

    pub fn n_pairs(&self) -> (usize, usize) {
        let count = |b: &[SourceBuffer]| b.iter().map(|s| s.trajectories.iter().map(Trajectory::len).sum::<usize>()).sum();
        (count(&self.expert), count(&self.proxy))
    }
}

/// Which source a sampled window came from, for mixing-ratio checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampledSource {
    Expert,
    Proxy,
}

/// Draw one K-step training window. With probability `p_real` the window
/// comes from the proxy buffer, otherwise from the expert buffer; a uniform
/// trajectory, then a uniform start with K steps remaining. Windows never
/// span trajectory boundaries; cluster membership is recomputed from the
/// stored mask.
pub fn sample_training_window(
    ds: &Dataset,
    layout: &TokenLayout,
    r: &mut rng::Stream,
) -> Result<(Window, SampledSource)> {
    let use_proxy = ds.p_real > 0.0 && r.gen_range(0.0..1.0) < ds.p_real;
    let (buffers, flat, source) = if use_proxy {
        (&ds.proxy, &ds.proxy_flat, SampledSource::Proxy)
    } else {
        (&ds.expert, &ds.expert_flat, SampledSource::Expert)
    };
    if flat.is_empty() {
        bail!(
            "no {} trajectories of at least {} steps",
            if use_proxy { "proxy" } else { "expert" },
            layout.context_steps
        );
    }
    let (bi, ti) = flat[r.gen_range(0..flat.len())];
    let buffer = &buffers[bi];
    let traj = &buffer.trajectories[ti];
    let k = layout.context_steps;
    let start = r.gen_range(0..=traj.len() - k);
    Ok((
        window_from_trajectory(&buffer.morphology, traj, start, layout),
        source,
    ))
}

/// Build one supervised window from trajectory steps `[start, start+K)`.
pub fn window_from_trajectory(
    m: &Morphology,
    traj: &Trajectory,
    start: usize,
    layout: &TokenLayout,
) -> Window {
    let n = m.n_modules();
    let ns = layout.n_slots;
    let limit = m.spec().joint_limit;
    let steps = traj.steps[start..start + layout.context_steps]
        .iter()
        .map(|s| {
            let mask = ConnectivityMask {
                active: s.mask.clone(),
            };
            let cluster = largest_connected_cluster(m, &mask);
            let mut w = WindowStep {
                states: vec![[0.0; STATE_DIM]; ns],
                slot_valid: vec![false; ns],
                cluster: vec![false; ns],
                action: None,
            };
            let mut action = vec![0.0; ns];
            for i in 0..n {
                w.states[i] = s.module_states[i].to_array();
                w.slot_valid[i] = true;
                w.cluster[i] = cluster.contains(&i);
                action[i] = s.action[i] / limit;
            }
            w.action = Some(action);
            w
        })
        .collect();
    Window { steps }
}

pub fn sample_batch(
    ds: &Dataset,
    layout: &TokenLayout,
    batch: usize,
    r: &mut rng::Stream,
) -> Result<Vec<Window>> {
    (0..batch)
        .map(|_| sample_training_window(ds, layout, r).map(|(w, _)| w))
        .collect()
}

// ---------------------------------------------------------------- validation

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub files: usize,
    pub trajectories: usize,
    pub pairs: usize,
}

/// Full scan of every indexed file: hashes match the index, counts agree,
/// masks are monotone, and every trajectory fits its morphology.
pub fn validate_dataset(dir: &Path, index: &DatasetIndex) -> Result<ValidationReport> {
    let mut report = ValidationReport::default();
    for (summaries, source) in [
        (&index.expert, TrajectorySource::Expert),
        (&index.proxy, TrajectorySource::ProxyOpenLoop),
    ] {
        for s in summaries {
            let path: PathBuf = dir.join(&s.file);
            let tf: TrajectoryFile = read_trajectories(&path)
                .with_context(|| format!("validating {}", path.display()))?;
            if tf.config_hash != index.config_hash {
                bail!("{}: config hash mismatch", s.file);
            }
            if tf.source != source {
                bail!("{}: wrong source tag", s.file);
            }
            if tf.trajectories.len() != s.n_trajectories {
                bail!("{}: trajectory count mismatch", s.file);
            }
            let pairs: usize = tf.trajectories.iter().map(Trajectory::len).sum();
            if pairs != s.n_pairs {
                bail!("{}: pair count mismatch", s.file);
            }
            for (i, t) in tf.trajectories.iter().enumerate() {
                if !t.mask_monotone() {
                    bail!("{}: trajectory {i} reactivates a weld", s.file);
                }
                if t.is_empty() {
                    bail!("{}: trajectory {i} is empty", s.file);
                }
            }
            report.files += 1;
            report.trajectories += tf.trajectories.len();
            report.pairs += pairs;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use molt_core::eval::best_10s_speed;
    use molt_core::expert::DestructMode;
    use molt_core::morphology::{reduced_morphology, sample_morphology};

    fn small_ctx(seed: u64) -> ExpertContext {
        ExpertContext::new(
            sample_morphology(seed, 4).unwrap(),
            DestructMode::SelfDestruct,
            seed,
            SimParams::default(),
            RewardConfig::default(),
        )
    }

    #[test]
    fn expert_collection_hits_pair_budget() {
        let ctx = small_ctx(3);
        let policy = MlpPolicy::init(ctx.obs_dim(), 4, ctx.morphology.spec().joint_limit, 7);
        let budget = 150;
        let episode = 60;
        let trajs = collect_expert_trajectories(&ctx, &policy, budget, episode, 5, 11);
        let pairs: usize = trajs.iter().map(Trajectory::len).sum();
        assert!(pairs >= budget && pairs < budget + episode, "pairs = {pairs}");
        for t in &trajs {
            assert!(!t.truncated || t.len() >= 10);
        }
    }

    #[test]
    fn proxy_rollout_is_deterministic_and_tagged() {
        let m = sample_morphology(5, 2).unwrap();
        let ds = DatasetConfig::default();
        let a = proxy_rollout(&m, &SimParams::default(), &RewardConfig::default(), &ds, 9, 80);
        let b = proxy_rollout(&m, &SimParams::default(), &RewardConfig::default(), &ds, 9, 80);
        assert_eq!(a, b);
        assert_eq!(a.source, TrajectorySource::ProxyOpenLoop);
        assert_eq!(a.len(), 80);
        // Locked welds: the mask never loses an edge.
        assert!(a.steps.iter().all(|s| s.mask.iter().all(|m| *m)));
    }

    #[test]
    fn proxy_two_module_rollout_moves() {
        // A 2-module reduced morphology driven for 20 s displaces the
        // cluster mean by at least 2 cm.
        let full = sample_morphology(12, 4).unwrap();
        let mask = ConnectivityMask {
            active: vec![false, true, false],
        };
        let (m, _) = reduced_morphology(&full, &mask);
        let m = if m.n_modules() >= 2 {
            m
        } else {
            sample_morphology(12, 2).unwrap()
        };
        let ds = DatasetConfig::default();
        let t = proxy_rollout(&m, &SimParams::default(), &RewardConfig::default(), &ds, 4, 400);
        assert!(!t.truncated);
        let pos = t.positions();
        let disp = (pos[pos.len() - 1] - pos[0]).norm();
        assert!(disp > 0.02, "displacement {disp}");
        assert!(best_10s_speed(&pos, 0.05).speed > 0.0);
    }

    #[test]
    fn perturbations_change_the_rollout() {
        let m = sample_morphology(5, 2).unwrap();
        let ds = DatasetConfig::default();
        let a = proxy_rollout(&m, &SimParams::default(), &RewardConfig::default(), &ds, 1, 40);
        let b = proxy_rollout(&m, &SimParams::default(), &RewardConfig::default(), &ds, 2, 40);
        assert_ne!(a.steps.last().unwrap().cluster_position, b.steps.last().unwrap().cluster_position);
    }

    fn toy_dataset(p_real: f64) -> Dataset {
        let ctx = small_ctx(3);
        let policy = MlpPolicy::init(ctx.obs_dim(), 4, ctx.morphology.spec().joint_limit, 7);
        let expert = vec![SourceBuffer {
            morphology: ctx.morphology.clone(),
            trajectories: collect_expert_trajectories(&ctx, &policy, 120, 60, 5, 1),
        }];
        let pm = sample_morphology(5, 2).unwrap();
        let ds = DatasetConfig::default();
        let proxy = vec![SourceBuffer {
            morphology: pm.clone(),
            trajectories: collect_proxy_rollouts(
                &pm,
                &SimParams::default(),
                &RewardConfig::default(),
                &DatasetConfig {
                    proxy_per_morphology: 3,
                    ..ds
                },
                2,
                40,
            ),
        }];
        Dataset::new(p_real, expert, proxy, 5)
    }

    #[test]
    fn extreme_mixing_ratios() {
        let layout = TokenLayout::default();
        let mut r = rng::stream(9);
        let ds0 = toy_dataset(0.0);
        for _ in 0..50 {
            let (_, s) = sample_training_window(&ds0, &layout, &mut r).unwrap();
            assert_eq!(s, SampledSource::Expert);
        }
        let ds1 = toy_dataset(1.0);
        for _ in 0..50 {
            let (_, s) = sample_training_window(&ds1, &layout, &mut r).unwrap();
            assert_eq!(s, SampledSource::Proxy);
        }
    }

    #[test]
    fn missing_proxy_data_is_an_error() {
        let mut ds = toy_dataset(1.0);
        ds.proxy_flat.clear();
        let layout = TokenLayout::default();
        let mut r = rng::stream(3);
        assert!(sample_training_window(&ds, &layout, &mut r).is_err());
    }

    #[test]
    fn windows_fit_trajectories_and_clusters_match() {
        let ds = toy_dataset(0.3);
        let layout = TokenLayout::default();
        let mut r = rng::stream(17);
        for _ in 0..100 {
            let (w, _) = sample_training_window(&ds, &layout, &mut r).unwrap();
            assert_eq!(w.steps.len(), layout.context_steps);
            for step in &w.steps {
                assert_eq!(step.states.len(), layout.n_slots);
                let action = step.action.as_ref().unwrap();
                assert!(action.iter().all(|a| a.abs() <= 1.0 + 1e-12));
                // Cluster membership implies slot validity.
                for i in 0..layout.n_slots {
                    assert!(!step.cluster[i] || step.slot_valid[i]);
                }
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_under_seed() {
        let ds = toy_dataset(0.3);
        let layout = TokenLayout::default();
        let mut r1 = rng::stream(5);
        let mut r2 = rng::stream(5);
        let a = sample_batch(&ds, &layout, 16, &mut r1).unwrap();
        let b = sample_batch(&ds, &layout, 16, &mut r2).unwrap();
        assert_eq!(a, b);
    }
}
