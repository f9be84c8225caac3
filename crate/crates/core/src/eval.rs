//! Trajectory-level metrics for the evaluation harness.

use crate::math::Vec2;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SegmentSpeed {
    /// Metres per second over the best window.
    pub speed: f64,
    /// True when the trajectory was shorter than the window and the whole
    /// length was used instead.
    pub used_full_length: bool,
}

/// Maximum over all contiguous 10-second windows of net displacement divided
/// by the window duration. `positions` holds one planar sample per control
/// step.
pub fn best_10s_speed(positions: &[Vec2], control_dt: f64) -> SegmentSpeed {
    best_segment_speed(positions, control_dt, 10.0)
}

pub fn best_segment_speed(positions: &[Vec2], control_dt: f64, seconds: f64) -> SegmentSpeed {
    assert!(control_dt > 0.0 && seconds > 0.0);
    let window = libm::round(seconds / control_dt) as usize;
    if positions.len() < 2 {
        return SegmentSpeed {
            speed: 0.0,
            used_full_length: true,
        };
    }
    if positions.len() <= window {
        let span = (positions.len() - 1) as f64 * control_dt;
        let d = (positions[positions.len() - 1] - positions[0]).norm();
        return SegmentSpeed {
            speed: d / span,
            used_full_length: true,
        };
    }
    let mut best = 0.0;
    for start in 0..positions.len() - window {
        let d = (positions[start + window] - positions[start]).norm();
        if d > best {
            best = d;
        }
    }
    SegmentSpeed {
        speed: best / (window as f64 * control_dt),
        used_full_length: false,
    }
}

/// Displacement over the final stretch of an episode; used to flag frozen
/// episodes in the prompt-reset ablation.
pub fn tail_displacement(positions: &[Vec2], control_dt: f64, seconds: f64) -> f64 {
    let window = (libm::round(seconds / control_dt) as usize).min(positions.len().saturating_sub(1));
    if positions.len() < 2 || window == 0 {
        return 0.0;
    }
    let end = positions.len() - 1;
    (positions[end] - positions[end - window]).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::vec2;
    use alloc::vec::Vec;

    #[test]
    fn stationary_trajectory_is_zero() {
        let pts: Vec<Vec2> = (0..500).map(|_| vec2(0.4, 0.4)).collect();
        assert_eq!(best_10s_speed(&pts, 0.05).speed, 0.0);
    }

    #[test]
    fn constant_velocity_line() {
        let dt = 0.05;
        let v = 0.1;
        let pts: Vec<Vec2> = (0..600).map(|k| vec2(v * dt * k as f64, 0.0)).collect();
        let s = best_10s_speed(&pts, dt);
        assert!(!s.used_full_length);
        assert!((s.speed - v).abs() < 1e-9);
    }

    /// Brute-force oracle over every window for a piecewise trajectory:
    /// still for 10 s, then 0.2 m/s straight for 10 s.
    #[test]
    fn piecewise_matches_bruteforce() {
        let dt = 0.05;
        let mut pts = Vec::new();
        for _ in 0..200 {
            pts.push(vec2(0.0, 0.0));
        }
        for k in 1..=200 {
            pts.push(vec2(0.2 * dt * k as f64, 0.0));
        }
        let s = best_10s_speed(&pts, dt);
        assert!((s.speed - 0.2).abs() < 1e-9, "speed {}", s.speed);
        // Exhaustive oracle.
        let w = 200;
        let mut best = 0.0f64;
        for i in 0..pts.len() - w {
            best = best.max((pts[i + w] - pts[i]).norm() / (w as f64 * dt));
        }
        assert!((s.speed - best).abs() < 1e-12);
    }

    #[test]
    fn short_trajectory_uses_full_length() {
        let dt = 0.05;
        let pts: Vec<Vec2> = (0..50).map(|k| vec2(0.1 * dt * k as f64, 0.0)).collect();
        let s = best_10s_speed(&pts, dt);
        assert!(s.used_full_length);
        assert!((s.speed - 0.1).abs() < 1e-9);
    }

    #[test]
    fn best_window_beats_whole_episode_average() {
        use rand::Rng;
        let mut r = crate::rng::stream(3);
        let dt = 0.05;
        let mut pts = Vec::new();
        let mut p = vec2(0.0, 0.0);
        for _ in 0..800 {
            p += vec2(r.gen_range(-0.01..0.012), r.gen_range(-0.01..0.01));
            pts.push(p);
        }
        let s = best_10s_speed(&pts, dt);
        let avg = (pts[pts.len() - 1] - pts[0]).norm() / ((pts.len() - 1) as f64 * dt);
        assert!(s.speed >= avg - 1e-12);
    }
}
