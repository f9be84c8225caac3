//! Stage driver: wires morphology generation, expert training, dataset
//! collection, policy distillation, and the three evaluation studies into
//! idempotent pipeline stages over an output directory.
//!
//! Every artifact embeds the config hash and the global seed; a stage is
//! skipped when its manifest matches the current (hash, seed) unless
//! `--force` is given, and loading an input artifact whose embedded hash
//! differs from the current config is a stale-artifact error.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use molt_core::expert::{DestructMode, ExpertContext, TrainingCurve};
use molt_core::morphology::{reduced_morphology, sample_morphology, ConnectivityMask, Morphology};
use molt_core::rng;
use molt_core::trajectory::{Trajectory, TrajectorySource};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::{
    collect_expert_trajectories, collect_proxy_rollouts, validate_dataset, Dataset, DatasetIndex,
    FileSummary,
};
use crate::experiment::{
    export_positions, format_table, run_e1, run_e2, run_e3, E1Input, StudyReport, TraceExport,
};
use crate::formats::{
    read_expert, read_morphology, read_policy, read_trajectories, write_expert, write_morphology,
    write_policy, write_trajectories, ExpertCheckpoint, PolicyCheckpoint, TrajectoryFile,
};
use crate::training::{thread_pool, train_expert_parallel, train_policy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenMorphs,
    TrainExperts,
    Collect,
    TrainPolicy,
    Run,
    Eval,
    Validate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenMorphs => "gen-morphs",
            Stage::TrainExperts => "train-experts",
            Stage::Collect => "collect",
            Stage::TrainPolicy => "train-policy",
            Stage::Run => "run",
            Stage::Eval => "eval",
            Stage::Validate => "validate",
        }
    }
}

/// The two distillation arms: data from self-destruct experts vs data from
/// no-destruct experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    SelfDestruct,
    NoDestruct,
}

impl Arm {
    fn tag(self) -> &'static str {
        match self {
            Arm::SelfDestruct => "self",
            Arm::NoDestruct => "no",
        }
    }

    fn mode(self) -> DestructMode {
        match self {
            Arm::SelfDestruct => DestructMode::SelfDestruct,
            Arm::NoDestruct => DestructMode::NoDestruct,
        }
    }
}

fn mode_tag(mode: DestructMode) -> &'static str {
    match mode {
        DestructMode::SelfDestruct => "self",
        DestructMode::NoDestruct => "no",
        DestructMode::RandomDestruct => "random",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageManifest {
    stage: String,
    config_hash: String,
    seed: u64,
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub out: PathBuf,
    pub workers: usize,
    pub force: bool,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, out: PathBuf, workers: usize, force: bool) -> Self {
        let hash = cfg.hash();
        Pipeline {
            cfg,
            hash,
            out,
            workers,
            force,
        }
    }

    // ------------------------------------------------------------- plumbing

    fn dir(&self, sub: &str) -> Result<PathBuf> {
        let d = self.out.join(sub);
        std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }

    fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.out.join("manifests").join(format!("{}.json", stage.name()))
    }

    fn stage_done(&self, stage: Stage) -> bool {
        if self.force {
            return false;
        }
        let Ok(text) = std::fs::read_to_string(self.manifest_path(stage)) else {
            return false;
        };
        let Ok(m) = serde_json::from_str::<StageManifest>(&text) else {
            return false;
        };
        m.config_hash == self.hash && m.seed == self.cfg.seed
    }

    fn mark_done(&self, stage: Stage) -> Result<()> {
        self.dir("manifests")?;
        let m = StageManifest {
            stage: stage.name().into(),
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
        };
        std::fs::write(self.manifest_path(stage), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }

    fn check_hash(&self, artifact_hash: &str, what: &str) -> Result<()> {
        if artifact_hash != self.hash {
            bail!(
                "stale artifact: {what} was built under config hash {} but the current config hashes to {} (rerun the producing stage with --force)",
                &artifact_hash[..12.min(artifact_hash.len())],
                &self.hash[..12]
            );
        }
        Ok(())
    }

    // ---------------------------------------------------------- morphologies

    fn morph_path(&self, kind: &str, i: usize) -> PathBuf {
        self.out.join("morphologies").join(format!("{kind}_{i}.json"))
    }

    /// Held-out seeds whose sampled morphologies are distinct from every
    /// training morphology and from each other.
    fn select_ood(&self, training: &[Morphology]) -> Result<Vec<(u64, Morphology)>> {
        let want = self.cfg.eval.ood_count;
        let n = self.cfg.morphology.n_modules;
        let mut out: Vec<(u64, Morphology)> = Vec::with_capacity(want);
        let mut label = 0u64;
        while out.len() < want {
            if label > 20 * want as u64 + 100 {
                bail!("could not find {want} distinct held-out morphologies");
            }
            let seed = rng::split(self.cfg.seed, 0x00D_0000 + label);
            label += 1;
            let m = match sample_morphology(seed, n) {
                Ok(m) => m,
                Err(_) => continue,
            };
            if training.contains(&m) || out.iter().any(|(_, o)| *o == m) {
                continue;
            }
            out.push((seed, m));
        }
        Ok(out)
    }

    pub fn gen_morphs(&self) -> Result<()> {
        if self.stage_done(Stage::GenMorphs) {
            eprintln!("[gen-morphs] up to date, skipping");
            return Ok(());
        }
        let t0 = Instant::now();
        self.dir("morphologies")?;
        let mut training = Vec::new();
        for (i, seed) in self.cfg.training_morphology_seeds().iter().enumerate() {
            let m = sample_morphology(*seed, self.cfg.morphology.n_modules)
                .map_err(|e| anyhow::anyhow!("training morphology {i}: {e}"))?;
            write_morphology(&self.morph_path("train", i), &m, *seed)?;
            training.push(m);
        }
        for (i, (seed, m)) in self.select_ood(&training)?.iter().enumerate() {
            write_morphology(&self.morph_path("ood", i), m, *seed)?;
        }
        self.mark_done(Stage::GenMorphs)?;
        eprintln!(
            "[gen-morphs] {} training + {} held-out morphologies in {:.1?} (seed {})",
            training.len(),
            self.cfg.eval.ood_count,
            t0.elapsed(),
            self.cfg.seed
        );
        Ok(())
    }

    fn load_morphs(&self, kind: &str, count: usize) -> Result<Vec<(u64, Morphology)>> {
        (0..count)
            .map(|i| {
                let p = self.morph_path(kind, i);
                let (m, seed) = read_morphology(&p)
                    .with_context(|| format!("{} (run gen-morphs first)", p.display()))?;
                Ok((seed, m))
            })
            .collect()
    }

    fn training_morphs(&self) -> Result<Vec<(u64, Morphology)>> {
        self.load_morphs("train", self.cfg.training_morphology_seeds().len())
    }

    fn ood_morphs(&self) -> Result<Vec<(u64, Morphology)>> {
        self.load_morphs("ood", self.cfg.eval.ood_count)
    }

    // --------------------------------------------------------------- experts

    fn expert_path(&self, mseed: u64, mode: DestructMode) -> PathBuf {
        self.out
            .join("experts")
            .join(format!("{mseed}_{}.baex", mode_tag(mode)))
    }

    pub fn train_experts(&self) -> Result<()> {
        if self.stage_done(Stage::TrainExperts) {
            eprintln!("[train-experts] up to date, skipping");
            return Ok(());
        }
        let t0 = Instant::now();
        self.dir("experts")?;
        let pool = thread_pool(self.workers);
        let morphs = self.training_morphs()?;
        let modes = [
            DestructMode::SelfDestruct,
            DestructMode::RandomDestruct,
            DestructMode::NoDestruct,
        ];
        for (mseed, m) in &morphs {
            for (mi, mode) in modes.iter().enumerate() {
                let ctx = ExpertContext::new(
                    m.clone(),
                    *mode,
                    *mseed,
                    self.cfg.physics.clone(),
                    self.cfg.reward.clone(),
                );
                let mut es = self.cfg.es.clone();
                es.seed = rng::split(self.cfg.seed, 0xE5EED_0000 + mseed.wrapping_mul(7) + mi as u64);
                let t1 = Instant::now();
                let (policy, curve) = train_expert_parallel(&ctx, &es, &pool);
                write_expert(
                    &self.expert_path(*mseed, *mode),
                    &ExpertCheckpoint {
                        morphology_seed: *mseed,
                        mode: *mode,
                        config_hash: self.hash.clone(),
                        policy,
                    },
                )?;
                self.write_curve(*mseed, *mode, &curve)?;
                eprintln!(
                    "[train-experts] morphology {mseed} mode {} done in {:.1?} (es seed {})",
                    mode_tag(*mode),
                    t1.elapsed(),
                    es.seed
                );
            }
        }
        self.mark_done(Stage::TrainExperts)?;
        eprintln!("[train-experts] {} experts in {:.1?}", morphs.len() * 3, t0.elapsed());
        Ok(())
    }

    fn write_curve(&self, mseed: u64, mode: DestructMode, curve: &TrainingCurve) -> Result<()> {
        #[derive(Serialize)]
        struct CurveFile<'a> {
            config_hash: &'a str,
            morphology_seed: u64,
            mode: &'a str,
            curve: &'a TrainingCurve,
        }
        let p = self
            .out
            .join("experts")
            .join(format!("{mseed}_{}_curve.json", mode_tag(mode)));
        std::fs::write(
            p,
            serde_json::to_string_pretty(&CurveFile {
                config_hash: &self.hash,
                morphology_seed: mseed,
                mode: mode_tag(mode),
                curve,
            })?,
        )?;
        Ok(())
    }

    fn load_expert(&self, mseed: u64, mode: DestructMode) -> Result<ExpertCheckpoint> {
        let p = self.expert_path(mseed, mode);
        let ck = read_expert(&p)
            .with_context(|| format!("{} (run train-experts first)", p.display()))?;
        self.check_hash(&ck.config_hash, &format!("expert {mseed}/{}", mode_tag(mode)))?;
        Ok(ck)
    }

    // --------------------------------------------------------------- dataset

    fn dataset_dir(&self) -> PathBuf {
        self.out.join("dataset")
    }

    fn index_path(&self, arm: Arm) -> PathBuf {
        self.dataset_dir().join(format!("index_{}.json", arm.tag()))
    }

    /// The reduced "final morphology" an expert settles on: the largest
    /// cluster of the final mask of its first stored trajectory.
    fn final_morphology(m: &Morphology, trajs: &[Trajectory]) -> Morphology {
        let last_mask = trajs
            .first()
            .and_then(|t| t.steps.last())
            .map(|s| ConnectivityMask {
                active: s.mask.clone(),
            })
            .unwrap_or_else(|| ConnectivityMask::all_active(m.n_attachments()));
        reduced_morphology(m, &last_mask).0
    }

    pub fn collect(&self) -> Result<()> {
        if self.stage_done(Stage::Collect) {
            eprintln!("[collect] up to date, skipping");
            return Ok(());
        }
        let t0 = Instant::now();
        self.dir("dataset")?;
        let morphs = self.training_morphs()?;
        for arm in [Arm::SelfDestruct, Arm::NoDestruct] {
            let mut expert_files = Vec::new();
            let mut proxy_files = Vec::new();
            for (mseed, m) in &morphs {
                let ck = self.load_expert(*mseed, arm.mode())?;
                let ctx = ExpertContext::new(
                    m.clone(),
                    arm.mode(),
                    *mseed,
                    self.cfg.physics.clone(),
                    self.cfg.reward.clone(),
                );
                let trajs = collect_expert_trajectories(
                    &ctx,
                    &ck.policy,
                    self.cfg.dataset.steps_per_config,
                    self.cfg.es.episode_length,
                    self.cfg.layout.context_steps,
                    rng::split(self.cfg.seed, 0xC0_0000 + mseed.wrapping_mul(3) + arm as u64),
                );
                let fname = format!("expert_{}_{mseed}.batj", arm.tag());
                expert_files.push(self.write_batj(
                    &fname,
                    TrajectorySource::Expert,
                    *mseed,
                    m.clone(),
                    trajs.clone(),
                )?);
                // Proxy rollouts on the arm's final morphology: the reduced
                // cluster for the self-destruct arm, the full tree for the
                // no-destruct arm.
                let final_m = match arm {
                    Arm::SelfDestruct => Self::final_morphology(m, &trajs),
                    Arm::NoDestruct => m.clone(),
                };
                let proxy = collect_proxy_rollouts(
                    &final_m,
                    &self.cfg.physics,
                    &self.cfg.reward,
                    &self.cfg.dataset,
                    rng::split(self.cfg.seed, 0x960_0000 + mseed.wrapping_mul(3) + arm as u64),
                    self.cfg.es.episode_length,
                );
                let fname = format!("proxy_{}_{mseed}.batj", arm.tag());
                proxy_files.push(self.write_batj(
                    &fname,
                    TrajectorySource::ProxyOpenLoop,
                    *mseed,
                    final_m,
                    proxy,
                )?);
            }
            let index = DatasetIndex {
                config_hash: self.hash.clone(),
                p_real: self.cfg.dataset.p_real,
                expert: expert_files,
                proxy: proxy_files,
            };
            index.save(&self.index_path(arm))?;
        }
        self.mark_done(Stage::Collect)?;
        eprintln!("[collect] both arms in {:.1?}", t0.elapsed());
        Ok(())
    }

    fn write_batj(
        &self,
        fname: &str,
        source: TrajectorySource,
        mseed: u64,
        morphology: Morphology,
        trajectories: Vec<Trajectory>,
    ) -> Result<FileSummary> {
        let n_trajectories = trajectories.len();
        let n_pairs = trajectories.iter().map(Trajectory::len).sum();
        let tf = TrajectoryFile {
            config_hash: self.hash.clone(),
            source,
            morphology_seed: mseed,
            morphology,
            trajectories,
        };
        let path = self.dataset_dir().join(fname);
        write_trajectories(&path, &tf)?;
        // Re-read so downstream consumers see storage-precision floats; this
        // keeps in-memory and on-disk datasets interchangeable.
        Ok(FileSummary {
            file: fname.into(),
            morphology_seed: mseed,
            n_trajectories,
            n_pairs,
        })
    }

    fn load_dataset(&self, arm: Arm) -> Result<Dataset> {
        let p = self.index_path(arm);
        let index =
            DatasetIndex::load(&p).with_context(|| format!("{} (run collect first)", p.display()))?;
        self.check_hash(&index.config_hash, &format!("dataset index {}", arm.tag()))?;
        Dataset::load(&self.dataset_dir(), &index, self.cfg.layout.context_steps)
    }

    // -------------------------------------------------------------- policies

    fn policy_path(&self, arm: Arm) -> PathBuf {
        self.out
            .join("policies")
            .join(format!("policy_{}.batf", arm.tag()))
    }

    pub fn train_policy_stage(&self) -> Result<()> {
        if self.stage_done(Stage::TrainPolicy) {
            eprintln!("[train-policy] up to date, skipping");
            return Ok(());
        }
        let t0 = Instant::now();
        self.dir("policies")?;
        for arm in [Arm::SelfDestruct, Arm::NoDestruct] {
            let ds = self.load_dataset(arm)?;
            let t1 = Instant::now();
            let (weights, curve) = train_policy(
                &ds,
                self.cfg.decoder.clone(),
                self.cfg.layout.clone(),
                &self.cfg.training,
                rng::split(self.cfg.seed, 0x9_0000 + arm as u64),
            )?;
            write_policy(
                &self.policy_path(arm),
                &PolicyCheckpoint {
                    config_hash: self.hash.clone(),
                    weights,
                },
            )?;
            #[derive(Serialize)]
            struct CurveFile<'a> {
                config_hash: &'a str,
                arm: &'a str,
                loss: &'a [(usize, f64)],
            }
            std::fs::write(
                self.out
                    .join("policies")
                    .join(format!("policy_{}_loss.json", arm.tag())),
                serde_json::to_string_pretty(&CurveFile {
                    config_hash: &self.hash,
                    arm: arm.tag(),
                    loss: &curve.loss,
                })?,
            )?;
            eprintln!(
                "[train-policy] arm {} final loss {:.6} in {:.1?}",
                arm.tag(),
                curve.loss.last().map(|(_, l)| *l).unwrap_or(f64::NAN),
                t1.elapsed()
            );
        }
        self.mark_done(Stage::TrainPolicy)?;
        eprintln!("[train-policy] both arms in {:.1?}", t0.elapsed());
        Ok(())
    }

    fn load_policy(&self, arm: Arm) -> Result<PolicyCheckpoint> {
        let p = self.policy_path(arm);
        let ck =
            read_policy(&p).with_context(|| format!("{} (run train-policy first)", p.display()))?;
        self.check_hash(&ck.config_hash, &format!("policy {}", arm.tag()))?;
        Ok(ck)
    }

    // ------------------------------------------------------------ evaluation

    fn write_report(&self, study: &str, report: &StudyReport, traces: &[TraceExport]) -> Result<()> {
        let reports = self.dir("reports")?;
        #[derive(Serialize)]
        struct ReportFile<'a> {
            config_hash: &'a str,
            seed: u64,
            stage: &'a str,
            report: &'a StudyReport,
        }
        std::fs::write(
            reports.join(format!("{study}.json")),
            serde_json::to_string_pretty(&ReportFile {
                config_hash: &self.hash,
                seed: self.cfg.seed,
                stage: study,
                report,
            })?,
        )?;
        std::fs::write(reports.join(format!("{study}.txt")), format_table(report))?;
        let trace_dir = self.dir(&format!("traces/{study}"))?;
        for t in traces {
            export_positions(
                &trace_dir.join(format!("{}.tsv", t.name)),
                &t.trajectory,
                self.cfg.physics.control_dt,
            )?;
        }
        Ok(())
    }

    /// Run one study; returns whether the required direction held.
    pub fn eval(&self, study: &str) -> Result<bool> {
        let pool = thread_pool(self.workers);
        let t0 = Instant::now();
        let ok = match study {
            "e1" => {
                let inputs: Result<Vec<E1Input>> = self
                    .training_morphs()?
                    .into_iter()
                    .map(|(mseed, m)| {
                        Ok(E1Input {
                            morphology_seed: mseed,
                            self_policy: self.load_expert(mseed, DestructMode::SelfDestruct)?.policy,
                            random_policy: self
                                .load_expert(mseed, DestructMode::RandomDestruct)?
                                .policy,
                            leaf_seed: mseed,
                            morphology: m,
                        })
                    })
                    .collect();
                let (report, traces) = run_e1(
                    &inputs?,
                    &self.cfg.physics,
                    &self.cfg.reward,
                    &self.cfg.eval,
                    self.cfg.seed,
                    &pool,
                )?;
                self.write_report("e1", &report, &traces)?;
                eprintln!(
                    "[eval e1] means {:?} t {:.3} p {:.4}",
                    report.condition_means, report.t, report.p
                );
                report.direction_ok
            }
            "e2" => {
                let ood = self.ood_morphs()?;
                let self_policy = self.load_policy(Arm::SelfDestruct)?.weights;
                let no_policy = self.load_policy(Arm::NoDestruct)?.weights;
                let (report, traces) = run_e2(
                    &self_policy,
                    &no_policy,
                    &ood,
                    &self.cfg.physics,
                    &self.cfg.reward,
                    &self.cfg.reset,
                    &self.cfg.eval,
                    self.cfg.seed,
                    &pool,
                )?;
                self.write_report("e2", &report, &traces)?;
                eprintln!(
                    "[eval e2] means {:?} t {:.3} p {:.4}",
                    report.condition_means, report.t, report.p
                );
                report.direction_ok
            }
            "e3" => {
                let ood = self.ood_morphs()?;
                let self_policy = self.load_policy(Arm::SelfDestruct)?.weights;
                let (e3, traces) = run_e3(
                    &self_policy,
                    &ood,
                    &self.cfg.physics,
                    &self.cfg.reward,
                    &self.cfg.reset,
                    &self.cfg.eval,
                    self.cfg.seed,
                    &pool,
                )?;
                self.write_report("e3", &e3.report, &traces)?;
                let reports = self.dir("reports")?;
                #[derive(Serialize)]
                struct FrozenFile<'a> {
                    config_hash: &'a str,
                    frozen_with_reset: usize,
                    frozen_without_reset: usize,
                    trials_per_arm: usize,
                }
                std::fs::write(
                    reports.join("e3_frozen.json"),
                    serde_json::to_string_pretty(&FrozenFile {
                        config_hash: &self.hash,
                        frozen_with_reset: e3.frozen_with_reset,
                        frozen_without_reset: e3.frozen_without_reset,
                        trials_per_arm: e3.trials_per_arm,
                    })?,
                )?;
                eprintln!(
                    "[eval e3] means {:?} frozen {}/{} (with/without reset)",
                    e3.report.condition_means, e3.frozen_with_reset, e3.frozen_without_reset
                );
                e3.report.direction_ok
            }
            other => bail!("unknown study {other} (expected e1, e2, or e3)"),
        };
        eprintln!("[eval {study}] done in {:.1?}, direction_ok = {ok}", t0.elapsed());
        Ok(ok)
    }

    // ------------------------------------------------------------ validation

    pub fn validate(&self) -> Result<()> {
        let t0 = Instant::now();
        let mut checked = 0usize;
        // Morphologies (presence only; JSON has no hash, the seed is its
        // identity and gen-morphs is cheap to rerun).
        for (i, seed) in self.cfg.training_morphology_seeds().iter().enumerate() {
            let (_, s) = read_morphology(&self.morph_path("train", i))?;
            if s != *seed {
                bail!("training morphology {i} was generated from seed {s}, expected {seed}");
            }
            checked += 1;
        }
        // Experts.
        for (mseed, _) in self.training_morphs()? {
            for mode in [
                DestructMode::SelfDestruct,
                DestructMode::RandomDestruct,
                DestructMode::NoDestruct,
            ] {
                let p = self.expert_path(mseed, mode);
                if p.exists() {
                    self.load_expert(mseed, mode)?;
                    checked += 1;
                }
            }
        }
        // Datasets: full scan.
        for arm in [Arm::SelfDestruct, Arm::NoDestruct] {
            let p = self.index_path(arm);
            if p.exists() {
                let index = DatasetIndex::load(&p)?;
                self.check_hash(&index.config_hash, &format!("dataset index {}", arm.tag()))?;
                let report = validate_dataset(&self.dataset_dir(), &index)?;
                eprintln!(
                    "[validate] dataset {}: {} files, {} trajectories, {} pairs",
                    arm.tag(),
                    report.files,
                    report.trajectories,
                    report.pairs
                );
                checked += report.files;
            }
        }
        // Policies.
        for arm in [Arm::SelfDestruct, Arm::NoDestruct] {
            if self.policy_path(arm).exists() {
                self.load_policy(arm)?;
                checked += 1;
            }
        }
        // Reports embed the hash as a top-level field.
        for study in ["e1", "e2", "e3"] {
            let p = self.out.join("reports").join(format!("{study}.json"));
            if p.exists() {
                let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
                let h = v["config_hash"].as_str().unwrap_or("");
                self.check_hash(h, &format!("report {study}"))?;
                checked += 1;
            }
        }
        eprintln!("[validate] {checked} artifacts consistent in {:.1?}", t0.elapsed());
        Ok(())
    }

    /// All stages in order; returns whether every study's direction held.
    pub fn run_all(&self) -> Result<bool> {
        self.gen_morphs()?;
        self.train_experts()?;
        self.collect()?;
        self.train_policy_stage()?;
        let mut ok = true;
        for study in ["e1", "e2", "e3"] {
            ok &= self.eval(study)?;
        }
        self.validate()?;
        Ok(ok)
    }

    pub fn run_stage(&self, stage: Stage) -> Result<bool> {
        match stage {
            Stage::GenMorphs => self.gen_morphs().map(|()| true),
            Stage::TrainExperts => self.train_experts().map(|()| true),
            Stage::Collect => self.collect().map(|()| true),
            Stage::TrainPolicy => self.train_policy_stage().map(|()| true),
            Stage::Run => self.run_all(),
            Stage::Eval => {
                let mut ok = true;
                for study in ["e1", "e2", "e3"] {
                    ok &= self.eval(study)?;
                }
                Ok(ok)
            }
            Stage::Validate => self.validate().map(|()| true),
        }
    }
}

/// Reads a trajectory file back; exposed for integration tests that need the
/// storage-precision view of collected data.
pub fn reload_trajectories(path: &Path) -> Result<TrajectoryFile> {
    read_trajectories(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DatasetConfig, EvalConfig, MorphologyConfig, PolicyTrainConfig};
    use molt_core::expert::ESConfig;
    use molt_core::policy::DecoderConfig;

    /// A configuration small enough for unit tests: 2 morphologies, tiny ES
    /// budget, tiny dataset and policy.
    fn tiny_config(seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            seed,
            morphology: MorphologyConfig {
                n_train: 2,
                n_modules: 3,
                seeds: Vec::new(),
            },
            es: ESConfig {
                population: 4,
                episodes_per_eval: 1,
                episode_length: 25,
                generations: 2,
                ..ESConfig::default()
            },
            decoder: DecoderConfig {
                embed_dim: 16,
                n_layers: 1,
                n_heads: 2,
                mlp_ratio: 2,
                dropout: 0.0,
            },
            training: PolicyTrainConfig {
                learning_rate: 1e-3,
                batch: 4,
                steps: 10,
                grad_clip: 1.0,
            },
            dataset: DatasetConfig {
                steps_per_config: 60,
                proxy_per_morphology: 2,
                ..DatasetConfig::default()
            },
            eval: EvalConfig {
                e1_seeds: 1,
                ood_count: 2,
                ood_seeds: 1,
                episode_length: 25,
                frozen_window_s: 1.0,
                frozen_threshold_m: 0.01,
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn full_tiny_pipeline_runs_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(tiny_config(11), dir.path().to_path_buf(), 2, false);
        p.run_all().unwrap();
        assert!(p.out.join("reports/e1.json").exists());
        assert!(p.out.join("reports/e2.json").exists());
        assert!(p.out.join("reports/e3_frozen.json").exists());
        // Second run skips every build stage (manifests match).
        assert!(p.stage_done(Stage::GenMorphs));
        assert!(p.stage_done(Stage::TrainExperts));
        assert!(p.stage_done(Stage::Collect));
        assert!(p.stage_done(Stage::TrainPolicy));
        p.validate().unwrap();
    }

    #[test]
    fn worker_count_does_not_change_artifacts() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let p1 = Pipeline::new(tiny_config(7), dir1.path().to_path_buf(), 1, false);
        let p2 = Pipeline::new(tiny_config(7), dir2.path().to_path_buf(), 4, false);
        p1.run_all().unwrap();
        p2.run_all().unwrap();
        for rel in [
            "experts",
            "dataset",
            "policies",
            "reports",
            "morphologies",
        ] {
            let d1 = dir1.path().join(rel);
            let mut names: Vec<String> = std::fs::read_dir(&d1)
                .unwrap()
                .map(|e| e.unwrap().file_name().into_string().unwrap())
                .collect();
            names.sort();
            assert!(!names.is_empty(), "{rel} is empty");
            for name in names {
                let a = std::fs::read(d1.join(&name)).unwrap();
                let b = std::fs::read(dir2.path().join(rel).join(&name)).unwrap();
                assert_eq!(a, b, "{rel}/{name} differs between worker counts");
            }
        }
    }

    #[test]
    fn stale_artifacts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(tiny_config(3), dir.path().to_path_buf(), 2, false);
        p.gen_morphs().unwrap();
        p.train_experts().unwrap();
        // Change the config: the expert checkpoints are now stale inputs.
        let mut cfg2 = tiny_config(3);
        cfg2.dataset.p_real = 0.25;
        let p2 = Pipeline::new(cfg2, dir.path().to_path_buf(), 2, false);
        let err = p2.collect().unwrap_err().to_string();
        assert!(err.contains("stale artifact"), "unexpected error: {err}");
    }

    #[test]
    fn missing_checkpoint_error_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(tiny_config(5), dir.path().to_path_buf(), 1, false);
        p.gen_morphs().unwrap();
        let err = format!("{:#}", p.eval("e1").unwrap_err());
        assert!(err.contains("train-experts"), "unexpected error: {err}");
    }
}
