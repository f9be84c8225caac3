//! Std-side training drivers: parallel ES evaluation for experts and the
//! sequence-policy distillation loop. Both are bitwise deterministic under
//! the configured seed regardless of worker count, because candidate and
//! batch seeds are fixed up front and results are reduced in index order.

use molt_core::expert::{
    evaluate, generation_seeds, ESConfig, EsTrainer, ExpertContext, MlpPolicy, TrainingCurve,
};
use molt_core::policy::{batch_loss_and_grad, Adam, DecoderConfig, PolicyWeights, TokenLayout};
use molt_core::rng;
use rayon::prelude::*;

use crate::config::PolicyTrainConfig;
use crate::dataset::{sample_batch, Dataset};

/// Build a rayon pool with the requested worker count (0 = rayon default).
pub fn thread_pool(workers: usize) -> rayon::ThreadPool {
    let mut b = rayon::ThreadPoolBuilder::new();
    if workers > 0 {
        b = b.num_threads(workers);
    }
    b.build().expect("thread pool")
}

/// Parallel expert training. Runs the same ask/tell protocol as the serial
/// reference; candidate returns depend only on (weights, episode seeds), so
/// the trained policy is independent of how candidates are distributed over
/// threads.
pub fn train_expert_parallel(
    ctx: &ExpertContext,
    cfg: &ESConfig,
    pool: &rayon::ThreadPool,
) -> (MlpPolicy, TrainingCurve) {
    let obs_dim = ctx.obs_dim();
    let n = ctx.morphology.n_modules();
    let limit = ctx.morphology.spec().joint_limit;
    let init = MlpPolicy::init(obs_dim, n, limit, rng::split(cfg.seed, 0x1217));
    let mut tr = EsTrainer::new(init.weights.clone(), cfg.clone());
    for g in 0..cfg.generations {
        let seeds = generation_seeds(cfg, g);
        let candidates = tr.ask();
        let returns: Vec<f64> = pool.install(|| {
            candidates
                .par_iter()
                .map(|w| {
                    let p = MlpPolicy {
                        weights: w.clone(),
                        obs_dim,
                        n_out: n,
                        out_scale: limit,
                    };
                    evaluate(&p, ctx, &seeds, cfg.episode_length)
                })
                .collect()
        });
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

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyTrainingCurve {
    /// (step, batch loss) samples, every `log_every` steps plus the final.
    pub loss: Vec<(usize, f64)>,
}

/// Distill the dataset into the sequence policy: Adam on the masked MSE with
/// deterministic batch sampling.
pub fn train_policy(
    ds: &Dataset,
    decoder: DecoderConfig,
    layout: TokenLayout,
    cfg: &PolicyTrainConfig,
    seed: u64,
) -> anyhow::Result<(PolicyWeights, PolicyTrainingCurve)> {
    let mut w = PolicyWeights::init(decoder, layout, rng::split(seed, 0xD1571));
    let mut opt = Adam::new(w.params.len(), cfg.learning_rate, cfg.grad_clip);
    let mut r = rng::stream(rng::split(seed, 0xBA7C));
    let mut curve = PolicyTrainingCurve::default();
    let log_every = (cfg.steps / 50).max(1);
    for step in 0..cfg.steps {
        let batch = sample_batch(ds, &w.layout, cfg.batch, &mut r)?;
        let (loss, grad) = batch_loss_and_grad(&w, &batch);
        opt.step(&mut w.params, &grad);
        if step % log_every == 0 || step + 1 == cfg.steps {
            curve.loss.push((step, loss));
        }
    }
    Ok((w, curve))
}
