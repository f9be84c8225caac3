//! In-memory trajectory records shared by the expert, dataset, runtime, and
//! evaluation code. On-disk framing lives in the `molt` companion crate.

use alloc::vec::Vec;

use crate::math::Vec2;
use crate::physics::ModuleState;
use crate::reward::RewardBreakdown;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TrajectorySource {
    Expert,
    ProxyOpenLoop,
    /// Closed-loop sequence-policy episode (evaluation output, never part of
    /// the training dataset).
    Policy,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrajectoryStep {
    /// One 8-dimensional proprioceptive state per module.
    pub module_states: Vec<ModuleState>,
    /// Joint position targets, radians, one per module.
    pub action: Vec<f64>,
    /// Active flag per attachment.
    pub mask: Vec<bool>,
    /// Mean planar position of the largest connected cluster.
    pub cluster_position: Vec2,
    pub reward: RewardBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Trajectory {
    pub morphology_id: u64,
    pub seed: u64,
    pub source: TrajectorySource,
    pub steps: Vec<TrajectoryStep>,
    /// Set when the episode hit the instability abort.
    pub truncated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec2> {
        self.steps.iter().map(|s| s.cluster_position).collect()
    }

    pub fn episode_return(&self) -> f64 {
        crate::reward::episode_return(self.steps.iter().map(|s| s.reward))
    }

    /// Welds never reactivate: the mask must be monotonically non-increasing
    /// over time.
    pub fn mask_monotone(&self) -> bool {
        self.steps.windows(2).all(|w| {
            w[0].mask
                .iter()
                .zip(&w[1].mask)
                .all(|(prev, next)| *prev || !*next)
        })
    }
}
