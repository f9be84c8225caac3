//! Per-step locomotion reward: windowed speed, trajectory efficiency, and a
//! penalty for deviating from the expected number of active connections.

use alloc::collections::VecDeque;

use crate::math::Vec2;
use crate::morphology::ConnectivityMask;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RewardConfig {
    /// Position-history window size, control steps.
    pub window: usize,
    /// Control timestep, seconds.
    pub dt: f64,
    /// Expected number of active connections.
    pub n_expected: usize,
    /// Efficiency coefficient.
    pub eff_coeff: f64,
    /// Guard against division by zero in the efficiency term.
    pub eps: f64,
    /// Connection-count penalty coefficient (negative).
    pub conn_coeff: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            window: 100,
            dt: 0.05,
            n_expected: 2,
            eff_coeff: 0.01,
            eps: 1e-6,
            conn_coeff: -0.2,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> bool {
        self.window >= 2 && self.dt > 0.0 && self.eps > 0.0
    }
}

/// Ring buffer of the mean planar position of the largest connected cluster,
/// one entry per control step.
#[derive(Debug, Clone, Default)]
pub struct PositionHistory {
    buf: VecDeque<Vec2>,
    capacity: usize,
}

impl PositionHistory {
    pub fn new(window: usize) -> Self {
        PositionHistory {
            buf: VecDeque::with_capacity(window),
            capacity: window,
        }
    }

    pub fn push(&mut self, p: Vec2) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(p);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    /// True until the buffer has seen a full window of positions.
    pub fn warmup(&self) -> bool {
        self.buf.len() < self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = Vec2> + '_ {
        self.buf.iter().copied()
    }

    pub fn oldest(&self) -> Option<Vec2> {
        self.buf.front().copied()
    }

    pub fn latest(&self) -> Option<Vec2> {
        self.buf.back().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RewardBreakdown {
    pub speed: f64,
    pub efficiency: f64,
    pub connection: f64,
    pub total: f64,
}

/// Reward at the current step: `speed + efficiency + connection`.
///
/// During warmup (history shorter than the window) the current history
/// length stands in for the window size, avoiding a discontinuity when the
/// buffer first fills.
pub fn step_reward(
    h: &PositionHistory,
    mask: &ConnectivityMask,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    assert!(!h.is_empty(), "position history must be non-empty");
    let newest = h.latest().unwrap();
    let oldest = h.oldest().unwrap();
    let net = (newest - oldest).norm();
    let mut path = 0.0;
    let mut prev: Option<Vec2> = None;
    for p in h.iter() {
        if let Some(q) = prev {
            path += (p - q).norm();
        }
        prev = Some(p);
    }
    let effective_window = h.len();
    let speed = net / (effective_window as f64 * cfg.dt);
    let efficiency = cfg.eff_coeff * net / (path + cfg.eps);
    let connection = cfg.conn_coeff
        * libm::fabs(mask.n_active() as f64 - cfg.n_expected as f64);
    RewardBreakdown {
        speed,
        efficiency,
        connection,
        total: speed + efficiency + connection,
    }
}

/// Undiscounted episode return.
pub fn episode_return(rewards: impl IntoIterator<Item = RewardBreakdown>) -> f64 {
    rewards.into_iter().map(|r| r.total).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::vec2;
    use alloc::vec;
    use alloc::vec::Vec;

    fn mask(n_active: usize, n_total: usize) -> ConnectivityMask {
        ConnectivityMask {
            active: (0..n_total).map(|i| i < n_active).collect(),
        }
    }

    #[test]
    fn stationary_full_window_pays_connection_penalty_only() {
        let cfg = RewardConfig::default();
        let mut h = PositionHistory::new(cfg.window);
        for _ in 0..cfg.window {
            h.push(vec2(1.0, -2.0));
        }
        let r = step_reward(&h, &mask(3, 3), &cfg);
        assert_eq!(r.speed, 0.0);
        assert_eq!(r.efficiency, 0.0);
        assert_eq!(r.connection, -0.2);
        assert_eq!(r.total, -0.2);
    }

    #[test]
    fn straight_line_efficiency_saturates() {
        let cfg = RewardConfig::default();
        let v = 0.07; // m per step
        let mut h = PositionHistory::new(cfg.window);
        for k in 0..cfg.window {
            h.push(vec2(v * k as f64, 0.0));
        }
        let r = step_reward(&h, &mask(2, 3), &cfg);
        // d == l for a collinear path.
        assert!((r.efficiency - cfg.eff_coeff).abs() < 1e-5);
        let expect_speed = v * (cfg.window - 1) as f64 / (cfg.window as f64 * cfg.dt);
        assert!((r.speed - expect_speed).abs() < 1e-12);
        assert_eq!(r.connection, 0.0);
    }

    /// Hand-computed square-wave zigzag: net displacement 1 m, path length
    /// 2 m across a full window. Verified against a brute-force path-length
    /// accumulation below.
    #[test]
    fn zigzag_hand_computed() {
        let cfg = RewardConfig::default();
        let w = cfg.window;
        // 99 segments: x advances 1/99 each step; y alternates so each
        // segment has length 2/99. Total path 2, net sqrt(1 + 0) = 1 when y
        // returns to 0 (even number of alternations along the way).
        let seg = 1.0 / (w - 1) as f64;
        let dy = libm::sqrt(4.0 * seg * seg - seg * seg) / 2.0; // per half zig
        let mut pts = Vec::new();
        let mut y = 0.0;
        for k in 0..w {
            pts.push(vec2(seg * k as f64, y));
            y = if y == 0.0 { dy * 2.0 } else { 0.0 };
        }
        // Force the final point back to y=0 so net = 1 exactly.
        let last = pts.last_mut().unwrap();
        last.y = 0.0;
        let mut h = PositionHistory::new(w);
        let mut brute_path = 0.0;
        for (i, p) in pts.iter().enumerate() {
            if i > 0 {
                brute_path += (*p - pts[i - 1]).norm();
            }
            h.push(*p);
        }
        let r = step_reward(&h, &mask(2, 3), &cfg);
        let expect_speed = 1.0 / (w as f64 * cfg.dt);
        assert!((r.speed - expect_speed).abs() < 1e-9, "speed {}", r.speed);
        let expect_eff = cfg.eff_coeff * 1.0 / (brute_path + cfg.eps);
        assert!((r.efficiency - expect_eff).abs() < 1e-12);
    }

    #[test]
    fn efficiency_bounded_by_coefficient() {
        let cfg = RewardConfig::default();
        let mut rng = crate::rng::stream(5);
        use rand::Rng;
        for _ in 0..200 {
            let mut h = PositionHistory::new(cfg.window);
            let steps = rng.gen_range(1..150);
            for _ in 0..steps {
                h.push(vec2(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            }
            let r = step_reward(&h, &mask(2, 3), &cfg);
            assert!(r.efficiency >= 0.0 && r.efficiency <= cfg.eff_coeff + 1e-12);
        }
    }

    #[test]
    fn connection_zero_iff_expected_count() {
        let cfg = RewardConfig::default();
        let mut h = PositionHistory::new(cfg.window);
        h.push(vec2(0.0, 0.0));
        for n_active in 0..=3 {
            let r = step_reward(&h, &mask(n_active, 3), &cfg);
            if n_active == cfg.n_expected {
                assert_eq!(r.connection, 0.0);
            } else {
                assert!(r.connection < 0.0);
            }
        }
    }

    #[test]
    fn planar_isometry_invariance() {
        let cfg = RewardConfig::default();
        use rand::Rng;
        let mut rng = crate::rng::stream(11);
        let theta: f64 = rng.gen_range(0.0..6.28);
        let (s, c) = (libm::sin(theta), libm::cos(theta));
        let off = vec2(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        let mut h1 = PositionHistory::new(cfg.window);
        let mut h2 = PositionHistory::new(cfg.window);
        for _ in 0..cfg.window {
            let p = vec2(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            h1.push(p);
            h2.push(vec2(c * p.x - s * p.y, s * p.x + c * p.y) + off);
        }
        let r1 = step_reward(&h1, &mask(2, 3), &cfg);
        let r2 = step_reward(&h2, &mask(2, 3), &cfg);
        assert!((r1.total - r2.total).abs() < 1e-9);
    }

    #[test]
    fn episode_return_simple_cases() {
        assert_eq!(episode_return(vec![]), 0.0);
        let step = RewardBreakdown {
            speed: 0.0,
            efficiency: 0.0,
            connection: -0.2,
            total: -0.2,
        };
        let total = episode_return(vec![step; 400]);
        assert!((total + 80.0).abs() < 1e-9);
    }

    #[test]
    fn episode_return_matches_kahan_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::stream(21);
        let rewards: Vec<RewardBreakdown> = (0..10_000)
            .map(|_| {
                let t = rng.gen_range(-1.0..1.0);
                RewardBreakdown {
                    speed: t,
                    efficiency: 0.0,
                    connection: 0.0,
                    total: t,
                }
            })
            .collect();
        // Kahan compensated summation as the independent route.
        let mut sum = 0.0;
        let mut comp = 0.0;
        for r in &rewards {
            let y = r.total - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        assert!((episode_return(rewards) - sum).abs() < 1e-9);
    }
}
