//! Temporary distillation diagnostics. Will be removed.
use molt::formats::{read_expert, read_morphology, read_policy};
use molt_core::expert::rollout;
use molt_core::physics::SimParams;
use molt_core::reward::RewardConfig;
use molt_core::runtime::{run_episode, ResetRule, RuntimeContext};
use std::path::Path;

fn main() {
    let out = Path::new("/root/crate/target/tmp/acceptance-desk");
    let policy = read_policy(&out.join("policies/policy_self.batf")).unwrap();
    let mut sim = SimParams::default();
    sim.tau_detach_range = (3.0, 4.5);
    for i in 0..3usize {
        let (m, mseed) = read_morphology(&out.join(format!("morphologies/train_{i}.json"))).unwrap();
        let exp = read_expert(&out.join(format!("experts/{mseed}_self.baex"))).unwrap();
        let ectx = molt_core::expert::ExpertContext::new(
            m.clone(),
            molt_core::expert::DestructMode::SelfDestruct,
            mseed,
            sim.clone(),
            RewardConfig::default(),
        );
        let et = rollout(&exp.policy, &ectx, 9000, 400);
        let ep = et.positions();
        let edisp = (ep[ep.len() - 1] - ep[0]).norm();
        let ctx = RuntimeContext {
            morphology: m.clone(),
            sim: sim.clone(),
            reward: RewardConfig::default(),
            breakable: true,
        };
        for (label, rule) in [("noreset", None), ("reset", Some(ResetRule::default()))] {
            let (t, stats) = run_episode(&policy.weights, &ctx, 9000, 400, rule.as_ref());
            let p = t.positions();
            let disp = (p[p.len() - 1] - p[0]).norm();
            // action spread over the trajectory: per-dim std of executed actions
            let n = t.steps[0].action.len();
            let mut stds = vec![0.0f64; n];
            for d in 0..n {
                let xs: Vec<f64> = t.steps.iter().map(|s| s.action[d]).collect();
                let mu = xs.iter().sum::<f64>() / xs.len() as f64;
                stds[d] =
                    (xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / xs.len() as f64).sqrt();
            }
            println!(
                "m{i} ({mseed}): expert disp {edisp:.2}  {label}: disp {disp:.3} resets {} detach {:?} mask {:?} action-std {:?}",
                stats.reset_count,
                stats.first_detach_step,
                stats.final_mask,
                stds.iter().map(|s| (s * 100.0).round() / 100.0).collect::<Vec<_>>()
            );
        }
    }
}
