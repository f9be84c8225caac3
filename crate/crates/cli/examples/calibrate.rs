//! Temporary calibration harness. Will be removed.
//!
//! Mirrors the acceptance suite's pinned desk configuration and runs pipeline
//! stages into the acceptance cache directory so the suite can reuse them.
use molt::config::{
    DatasetConfig, EvalConfig, ExperimentConfig, MorphologyConfig, PolicyTrainConfig,
};
use molt::pipeline::Pipeline;
use molt_core::expert::ESConfig;
use molt_core::physics::SimParams;
use molt_core::runtime::ResetRule;
use std::path::PathBuf;

fn desk_config() -> ExperimentConfig {
    let mut physics = SimParams::default();
    physics.tau_detach_range = (3.0, 3.4);
    ExperimentConfig {
        seed: 2026,
        morphology: MorphologyConfig {
            n_train: 8,
            n_modules: 4,
            seeds: Vec::new(),
        },
        physics,
        es: ESConfig {
            population: 24,
            noise_std: 0.1,
            learning_rate: 0.03,
            episodes_per_eval: 2,
            episode_length: 200,
            generations: 80,
            seed: 0,
        },
        training: PolicyTrainConfig {
            learning_rate: 1e-3,
            batch: 32,
            steps: 2500,
            grad_clip: 1.0,
        },
        dataset: DatasetConfig {
            steps_per_config: 12_000,
            ..DatasetConfig::default()
        },
        reset: ResetRule {
            window: 20,
            std_threshold: 0.02,
            min_step: 50,
        },
        eval: EvalConfig {
            e1_seeds: 5,
            ood_count: 20,
            ood_seeds: 3,
            episode_length: 400,
            frozen_window_s: 5.0,
            frozen_threshold_m: 0.01,
        },
        ..ExperimentConfig::default()
    }
}

fn main() {
    let stage = std::env::args().nth(1).unwrap_or_else(|| "e1".into());
    let out = PathBuf::from("/root/crate/target/tmp/acceptance-desk");
    let p = Pipeline::new(desk_config(), out, 0, false);
    match stage.as_str() {
        "e1" => {
            p.gen_morphs().unwrap();
            p.train_experts().unwrap();
            p.eval("e1").unwrap();
        }
        "rest" => {
            p.collect().unwrap();
            p.train_policy_stage().unwrap();
            p.eval("e2").unwrap();
            p.eval("e3").unwrap();
        }
        other => panic!("unknown stage {other}"),
    }
}
