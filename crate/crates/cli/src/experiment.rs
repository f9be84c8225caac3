//! The three evaluation studies and their exports.
//!
//! - E1 (in-distribution): per training morphology, expert policies trained
//!   with learned destruction vs random destruction, compared on episode
//!   displacement with a one-sided paired t-test across morphologies.
//! - E2 (out-of-distribution): held-out morphologies driven by the sequence
//!   policy distilled from self-destruct data vs the one distilled from
//!   no-destruct data, compared on best-10 s-segment speed with a one-sided
//!   Welch test over per-morphology means.
//! - E3 (ablation): E2's self-destruct arm re-run with the prompt-reset rule
//!   disabled; frozen-episode incidence (final 5 s displacement below 1 cm)
//!   is tallied per arm.

use std::path::Path;

use anyhow::Result;
use molt_core::eval::{best_10s_speed, tail_displacement};
use molt_core::expert::{rollout, DestructMode, ExpertContext, MlpPolicy};
use molt_core::morphology::Morphology;
use molt_core::physics::SimParams;
use molt_core::policy::PolicyWeights;
use molt_core::reward::RewardConfig;
use molt_core::rng;
use molt_core::runtime::{run_episode, ResetRule, RuntimeContext};
use molt_core::stats::{paired_t_test_one_sided, welch_t_test_one_sided};
use molt_core::trajectory::Trajectory;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub study: String,
    pub morphology_seed: u64,
    pub condition: String,
    pub trial: usize,
    /// Net displacement of the cluster mean over the episode, metres.
    pub displacement: f64,
    /// Best 10 s segment speed, m/s.
    pub best_10s: f64,
    pub frozen: bool,
    pub reset_count: usize,
    pub first_detach_step: Option<i64>,
    pub final_active_welds: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study: String,
    pub rows: Vec<TrialRow>,
    /// Per-condition mean of the study metric.
    pub condition_means: Vec<(String, f64)>,
    pub t: f64,
    pub p: f64,
    /// True when the favoured condition's mean is at least the baseline's.
    pub direction_ok: bool,
}

/// A per-trial position trace pending export.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceExport {
    /// File stem: `<morphology>_<condition>_<trial>`.
    pub name: String,
    pub trajectory: Trajectory,
}

fn displacement_of(t: &Trajectory) -> f64 {
    let pos = t.positions();
    if pos.len() < 2 {
        return 0.0;
    }
    (pos[pos.len() - 1] - pos[0]).norm()
}

fn row_from_trajectory(
    study: &str,
    morphology_seed: u64,
    condition: &str,
    trial: usize,
    t: &Trajectory,
    dt: f64,
    eval_cfg: &EvalConfig,
    reset_count: usize,
    first_detach_step: Option<usize>,
    final_active_welds: usize,
) -> TrialRow {
    let pos = t.positions();
    TrialRow {
        study: study.into(),
        morphology_seed,
        condition: condition.into(),
        trial,
        displacement: displacement_of(t),
        best_10s: best_10s_speed(&pos, dt).speed,
        frozen: tail_displacement(&pos, dt, eval_cfg.frozen_window_s) < eval_cfg.frozen_threshold_m,
        reset_count,
        first_detach_step: first_detach_step.map(|s| s as i64),
        final_active_welds,
        truncated: t.truncated,
    }
}

// ------------------------------------------------------------------------ E1

/// Per-morphology inputs of the in-distribution study.
#[derive(Debug, Clone)]
pub struct E1Input {
    pub morphology_seed: u64,
    pub morphology: Morphology,
    pub self_policy: MlpPolicy,
    pub random_policy: MlpPolicy,
    /// Seed that selected the designated leaf during random-destruct
    /// training; reused so evaluation matches the training wiring.
    pub leaf_seed: u64,
}

pub fn run_e1(
    inputs: &[E1Input],
    sim: &SimParams,
    reward: &RewardConfig,
    eval_cfg: &EvalConfig,
    seed: u64,
    pool: &rayon::ThreadPool,
) -> Result<(StudyReport, Vec<TraceExport>)> {
    let dt = sim.control_dt;
    let mut jobs = Vec::new();
    for input in inputs {
        for (condition, mode) in [
            ("self_destruct", DestructMode::SelfDestruct),
            ("random_destruct", DestructMode::RandomDestruct),
        ] {
            for trial in 0..eval_cfg.e1_seeds {
                jobs.push((input, condition, mode, trial));
            }
        }
    }
    let results: Vec<(TrialRow, TraceExport)> = pool.install(|| {
        jobs.par_iter()
            .map(|(input, condition, mode, trial)| {
                let ctx = ExpertContext::new(
                    input.morphology.clone(),
                    *mode,
                    input.leaf_seed,
                    sim.clone(),
                    reward.clone(),
                );
                let policy = match *mode {
                    DestructMode::RandomDestruct => &input.random_policy,
                    _ => &input.self_policy,
                };
                let episode_seed = rng::split(
                    seed,
                    0xE1_0000
                        + input.morphology_seed.wrapping_mul(251)
                        + (*trial as u64) * 2
                        + u64::from(*condition == "random_destruct"),
                );
                let t = rollout(policy, &ctx, episode_seed, eval_cfg.episode_length);
                let n_welds = t.steps.first().map_or(0, |s| s.mask.len());
                let first_detach = t
                    .steps
                    .iter()
                    .position(|s| s.mask.iter().filter(|m| **m).count() < n_welds);
                let final_active = t.steps.last().map_or(0, |s| {
                    s.mask.iter().filter(|m| **m).count()
                });
                let row = row_from_trajectory(
                    "e1",
                    input.morphology_seed,
                    condition,
                    *trial,
                    &t,
                    dt,
                    eval_cfg,
                    0,
                    first_detach,
                    final_active,
                );
                let trace = TraceExport {
                    name: format!("{}_{}_{}", input.morphology_seed, condition, trial),
                    trajectory: t,
                };
                (row, trace)
            })
            .collect()
    });
    let (rows, traces): (Vec<TrialRow>, Vec<TraceExport>) = results.into_iter().unzip();
    // Paired across morphologies on per-morphology mean displacement.
    let mean_of = |condition: &str, m: u64| -> f64 {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.condition == condition && r.morphology_seed == m)
            .map(|r| r.displacement)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let a: Vec<f64> = inputs
        .iter()
        .map(|i| mean_of("self_destruct", i.morphology_seed))
        .collect();
    let b: Vec<f64> = inputs
        .iter()
        .map(|i| mean_of("random_destruct", i.morphology_seed))
        .collect();
    let test = paired_t_test_one_sided(&a, &b).map_err(|e| anyhow::anyhow!("{e:?}"))?;
    let ma = a.iter().sum::<f64>() / a.len() as f64;
    let mb = b.iter().sum::<f64>() / b.len() as f64;
    Ok((
        StudyReport {
            study: "e1".into(),
            rows,
            condition_means: vec![
                ("self_destruct".into(), ma),
                ("random_destruct".into(), mb),
            ],
            t: test.t,
            p: test.p,
            direction_ok: ma >= mb,
        },
        traces,
    ))
}

// ------------------------------------------------------------------------ E2

/// One OOD evaluation episode of a sequence policy.
#[allow(clippy::too_many_arguments)]
fn policy_trial(
    weights: &PolicyWeights,
    morphology: &Morphology,
    breakable: bool,
    reset: Option<&ResetRule>,
    sim: &SimParams,
    reward: &RewardConfig,
    episode_seed: u64,
    length: usize,
) -> (Trajectory, molt_core::runtime::EpisodeStats) {
    let ctx = RuntimeContext {
        morphology: morphology.clone(),
        sim: sim.clone(),
        reward: reward.clone(),
        breakable,
    };
    run_episode(weights, &ctx, episode_seed, length, reset)
}

#[allow(clippy::too_many_arguments)]
fn run_policy_arm(
    study: &str,
    condition: &str,
    weights: &PolicyWeights,
    breakable: bool,
    reset: Option<&ResetRule>,
    ood: &[(u64, Morphology)],
    sim: &SimParams,
    reward: &RewardConfig,
    eval_cfg: &EvalConfig,
    seed: u64,
    arm_label: u64,
    pool: &rayon::ThreadPool,
) -> (Vec<TrialRow>, Vec<TraceExport>) {
    let dt = sim.control_dt;
    let mut jobs = Vec::new();
    for (mseed, m) in ood {
        for trial in 0..eval_cfg.ood_seeds {
            jobs.push((*mseed, m, trial));
        }
    }
    let results: Vec<(TrialRow, TraceExport)> = pool.install(|| {
        jobs.par_iter()
            .map(|(mseed, m, trial)| {
                let episode_seed = rng::split(
                    seed,
                    0xE2_0000 + arm_label * 0x10_0000 + mseed.wrapping_mul(131) + *trial as u64,
                );
                let (t, stats) = policy_trial(
                    weights,
                    m,
                    breakable,
                    reset,
                    sim,
                    reward,
                    episode_seed,
                    eval_cfg.episode_length,
                );
                let row = row_from_trajectory(
                    study,
                    *mseed,
                    condition,
                    *trial,
                    &t,
                    dt,
                    eval_cfg,
                    stats.reset_count,
                    stats.first_detach_step,
                    stats.final_mask.n_active(),
                );
                let trace = TraceExport {
                    name: format!("{mseed}_{condition}_{trial}"),
                    trajectory: t,
                };
                (row, trace)
            })
            .collect()
    });
    results.into_iter().unzip()
}

/// Per-morphology mean of the best-10 s speed for one condition.
fn per_morphology_means(rows: &[TrialRow], condition: &str, seeds: &[u64]) -> Vec<f64> {
    seeds
        .iter()
        .map(|&m| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.condition == condition && r.morphology_seed == m)
                .map(|r| r.best_10s)
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn run_e2(
    self_policy: &PolicyWeights,
    no_destruct_policy: &PolicyWeights,
    ood: &[(u64, Morphology)],
    sim: &SimParams,
    reward: &RewardConfig,
    reset: &ResetRule,
    eval_cfg: &EvalConfig,
    seed: u64,
    pool: &rayon::ThreadPool,
) -> Result<(StudyReport, Vec<TraceExport>)> {
    let (mut rows, mut traces) = run_policy_arm(
        "e2",
        "self_destruct",
        self_policy,
        true,
        Some(reset),
        ood,
        sim,
        reward,
        eval_cfg,
        seed,
        0,
        pool,
    );
    let (rows_no, traces_no) = run_policy_arm(
        "e2",
        "no_destruct",
        no_destruct_policy,
        false,
        Some(reset),
        ood,
        sim,
        reward,
        eval_cfg,
        seed,
        1,
        pool,
    );
    rows.extend(rows_no);
    traces.extend(traces_no);
    let seeds: Vec<u64> = ood.iter().map(|(s, _)| *s).collect();
    let a = per_morphology_means(&rows, "self_destruct", &seeds);
    let b = per_morphology_means(&rows, "no_destruct", &seeds);
    let test = welch_t_test_one_sided(&a, &b).map_err(|e| anyhow::anyhow!("{e:?}"))?;
    let ma = a.iter().sum::<f64>() / a.len() as f64;
    let mb = b.iter().sum::<f64>() / b.len() as f64;
    Ok((
        StudyReport {
            study: "e2".into(),
            rows,
            condition_means: vec![("self_destruct".into(), ma), ("no_destruct".into(), mb)],
            t: test.t,
            p: test.p,
            direction_ok: ma >= mb,
        },
        traces,
    ))
}

// ------------------------------------------------------------------------ E3

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E3Report {
    pub report: StudyReport,
    pub frozen_with_reset: usize,
    pub frozen_without_reset: usize,
    pub trials_per_arm: usize,
}

/// Prompt-reset ablation: the self-destruct arm with and without the reset
/// rule on the same morphologies and episode seeds.
#[allow(clippy::too_many_arguments)]
pub fn run_e3(
    self_policy: &PolicyWeights,
    ood: &[(u64, Morphology)],
    sim: &SimParams,
    reward: &RewardConfig,
    reset: &ResetRule,
    eval_cfg: &EvalConfig,
    seed: u64,
    pool: &rayon::ThreadPool,
) -> Result<(E3Report, Vec<TraceExport>)> {
    // Same arm label for both conditions: identical episode seeds, the reset
    // rule is the only difference.
    let (mut rows, mut traces) = run_policy_arm(
        "e3",
        "with_reset",
        self_policy,
        true,
        Some(reset),
        ood,
        sim,
        reward,
        eval_cfg,
        seed,
        0,
        pool,
    );
    let (rows_no, traces_no) = run_policy_arm(
        "e3",
        "without_reset",
        self_policy,
        true,
        None,
        ood,
        sim,
        reward,
        eval_cfg,
        seed,
        0,
        pool,
    );
    rows.extend(rows_no);
    traces.extend(traces_no);
    let seeds: Vec<u64> = ood.iter().map(|(s, _)| *s).collect();
    let a = per_morphology_means(&rows, "with_reset", &seeds);
    let b = per_morphology_means(&rows, "without_reset", &seeds);
    let ma = a.iter().sum::<f64>() / a.len() as f64;
    let mb = b.iter().sum::<f64>() / b.len() as f64;
    // The Welch test may legitimately degenerate when the two arms behave
    // identically (e.g. no reset ever fires); report t = 0, p = 0.5 then.
    let (t, p) = match welch_t_test_one_sided(&a, &b) {
        Ok(r) => (r.t, r.p),
        Err(_) => (0.0, 0.5),
    };
    let frozen = |c: &str| rows.iter().filter(|r| r.condition == c && r.frozen).count();
    Ok((
        E3Report {
            frozen_with_reset: frozen("with_reset"),
            frozen_without_reset: frozen("without_reset"),
            trials_per_arm: ood.len() * eval_cfg.ood_seeds,
            report: StudyReport {
                study: "e3".into(),
                rows,
                condition_means: vec![("with_reset".into(), ma), ("without_reset".into(), mb)],
                t,
                p,
                direction_ok: ma >= mb,
            },
        },
        traces,
    ))
}

// -------------------------------------------------------------------- export

/// Delimited-text trace: one `time<TAB>x<TAB>y` line per control step.
pub fn export_positions(path: &Path, t: &Trajectory, control_dt: f64) -> Result<()> {
    let mut out = String::with_capacity(t.len() * 32);
    for (k, p) in t.positions().iter().enumerate() {
        out.push_str(&format!("{:.6}\t{:.9}\t{:.9}\n", k as f64 * control_dt, p.x, p.y));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Human-readable aggregate table.
pub fn format_table(report: &StudyReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("study {}\n", report.study));
    s.push_str("morphology      condition          trial  displacement  best10s   frozen resets\n");
    for r in &report.rows {
        s.push_str(&format!(
            "{:<15} {:<18} {:<6} {:<13.6} {:<9.6} {:<6} {}\n",
            r.morphology_seed, r.condition, r.trial, r.displacement, r.best_10s, r.frozen, r.reset_count
        ));
    }
    for (c, m) in &report.condition_means {
        s.push_str(&format!("mean[{c}] = {m:.6}\n"));
    }
    s.push_str(&format!(
        "t = {:.4}  one-sided p = {:.6}  direction_ok = {}\n",
        report.t, report.p, report.direction_ok
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::thread_pool;
    use molt_core::morphology::sample_morphology;
    use molt_core::policy::{DecoderConfig, TokenLayout};

    fn small_eval() -> EvalConfig {
        EvalConfig {
            e1_seeds: 2,
            ood_count: 2,
            ood_seeds: 1,
            episode_length: 30,
            frozen_window_s: 1.0,
            frozen_threshold_m: 0.01,
        }
    }

    fn tiny_policy() -> PolicyWeights {
        PolicyWeights::init(
            DecoderConfig {
                embed_dim: 16,
                n_layers: 1,
                n_heads: 2,
                mlp_ratio: 2,
                dropout: 0.0,
            },
            TokenLayout::default(),
            3,
        )
    }

    #[test]
    fn e1_row_count_and_determinism() {
        let sim = SimParams::default();
        let reward = RewardConfig::default();
        let eval_cfg = small_eval();
        let pool = thread_pool(2);
        let inputs: Vec<E1Input> = [3u64, 8]
            .iter()
            .map(|&s| {
                let m = sample_morphology(s, 4).unwrap();
                // Distinct policies per condition: with identical policies
                // and no detachments the paired differences are exactly zero
                // and the t-test correctly reports degeneracy.
                let limit = m.spec().joint_limit;
                E1Input {
                    morphology_seed: s,
                    self_policy: MlpPolicy::init(3 + 6 + 12, 4, limit, s),
                    random_policy: MlpPolicy::init(3 + 6 + 12, 4, limit, s + 100),
                    leaf_seed: s,
                    morphology: m,
                }
            })
            .collect();
        let (r1, traces1) = run_e1(&inputs, &sim, &reward, &eval_cfg, 1, &pool).unwrap();
        assert_eq!(r1.rows.len(), 2 * 2 * eval_cfg.e1_seeds);
        assert_eq!(traces1.len(), r1.rows.len());
        let pool1 = thread_pool(1);
        let (r2, traces2) = run_e1(&inputs, &sim, &reward, &eval_cfg, 1, &pool1).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(traces1, traces2);
    }

    #[test]
    fn e2_no_destruct_arm_keeps_all_welds() {
        let sim = SimParams::default();
        let reward = RewardConfig::default();
        let eval_cfg = small_eval();
        let pool = thread_pool(2);
        let ood: Vec<(u64, Morphology)> = [21u64, 22]
            .iter()
            .map(|&s| (s, sample_morphology(s, 4).unwrap()))
            .collect();
        let w = tiny_policy();
        let (r, _) = run_e2(
            &w,
            &w,
            &ood,
            &sim,
            &reward,
            &ResetRule::default(),
            &eval_cfg,
            5,
            &pool,
        )
        .unwrap();
        for row in r.rows.iter().filter(|r| r.condition == "no_destruct") {
            assert_eq!(row.final_active_welds, 3);
            assert!(row.first_detach_step.is_none());
        }
        // Identical policies and per-morphology seeds differ only through the
        // arm label; rows exist for both conditions.
        assert_eq!(r.rows.len(), 2 * 2 * eval_cfg.ood_seeds);
    }

    #[test]
    fn e3_same_seeds_differ_only_by_reset() {
        let sim = SimParams::default();
        let reward = RewardConfig::default();
        let eval_cfg = small_eval();
        let pool = thread_pool(2);
        let ood: Vec<(u64, Morphology)> = vec![(31, sample_morphology(31, 4).unwrap())];
        let w = tiny_policy();
        // min_step beyond the episode: the rule never fires, the arms are
        // identical trial for trial.
        let inert = ResetRule {
            min_step: 10_000,
            ..ResetRule::default()
        };
        let (r, _) = run_e3(&w, &ood, &sim, &reward, &inert, &eval_cfg, 9, &pool).unwrap();
        let with: Vec<_> = r.report.rows.iter().filter(|x| x.condition == "with_reset").collect();
        let without: Vec<_> = r.report.rows.iter().filter(|x| x.condition == "without_reset").collect();
        assert_eq!(with.len(), without.len());
        for (a, b) in with.iter().zip(&without) {
            assert_eq!(a.displacement, b.displacement);
            assert_eq!(a.best_10s, b.best_10s);
        }
        assert_eq!(r.frozen_with_reset, r.frozen_without_reset);
    }

    #[test]
    fn export_writes_one_line_per_step() {
        let sim = SimParams::default();
        let reward = RewardConfig::default();
        let m = sample_morphology(4, 2).unwrap();
        let ctx = ExpertContext::new(m.clone(), DestructMode::NoDestruct, 0, sim, reward);
        let p = MlpPolicy::init(ctx.obs_dim(), 2, m.spec().joint_limit, 1);
        let t = rollout(&p, &ctx, 7, 20);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.tsv");
        export_positions(&path, &t, 0.05).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), t.len());
        let first: Vec<&str> = text.lines().next().unwrap().split('\t').collect();
        assert_eq!(first.len(), 3);
        assert_eq!(first[0], "0.000000");
    }
}
