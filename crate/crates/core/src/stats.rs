//! Statistical tests used by the evaluation harness: one-sided paired t,
//! one-sided Welch t, and permutation cross-checks.
//!
//! The Student-t CDF is evaluated through the regularized incomplete beta
//! function, so the crate stays `no_std`.

use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsError {
    /// Fewer than two observations, or mismatched lengths.
    TooFewSamples,
    /// All differences identical (paired) or zero variance (two-sample):
    /// the t statistic is undefined.
    DegenerateVariance,
}

impl fmt::Display for StatsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StatsError::TooFewSamples => write!(f, "need at least two samples per group"),
            StatsError::DegenerateVariance => write!(f, "zero variance, t statistic undefined"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TestResult {
    pub t: f64,
    /// One-sided p-value for the alternative "mean(a) > mean(b)".
    pub p: f64,
    pub dof: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64], m: f64) -> f64 {
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// One-sided paired t-test for "mean(a) > mean(b)".
pub fn paired_t_test_one_sided(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(StatsError::TooFewSamples);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&diffs);
    let var = sample_var(&diffs, m);
    if libm::sqrt(var) <= 1e-12 * libm::fabs(m).max(1.0) {
        return Err(StatsError::DegenerateVariance);
    }
    let n = diffs.len() as f64;
    let t = m / libm::sqrt(var / n);
    let dof = n - 1.0;
    Ok(TestResult {
        t,
        p: student_t_sf(t, dof),
        dof,
    })
}

/// One-sided Welch t-test for "mean(a) > mean(b)", with Welch–Satterthwaite
/// degrees of freedom.
pub fn welch_t_test_one_sided(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::TooFewSamples);
    }
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (sample_var(a, ma), sample_var(b, mb));
    if va <= 0.0 && vb <= 0.0 {
        return Err(StatsError::DegenerateVariance);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    let t = (ma - mb) / libm::sqrt(se2);
    let dof = se2 * se2
        / ((va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0));
    Ok(TestResult {
        t,
        p: student_t_sf(t, dof),
        dof,
    })
}

/// One-sided sign-flip permutation test on paired differences, for the
/// alternative "mean(a) > mean(b)". Independent route used to cross-check
/// the parametric tests.
pub fn paired_permutation_p(a: &[f64], b: &[f64], n_perm: usize, seed: u64) -> f64 {
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed = mean(&diffs);
    let mut r = rng::stream(seed);
    let mut at_least = 1usize; // include the identity permutation
    for _ in 0..n_perm {
        let m: f64 = diffs
            .iter()
            .map(|d| if r.gen::<bool>() { *d } else { -*d })
            .sum::<f64>()
            / diffs.len() as f64;
        if m >= observed - 1e-15 {
            at_least += 1;
        }
    }
    at_least as f64 / (n_perm + 1) as f64
}

/// One-sided label-shuffling permutation test on the difference of group
/// means, for the alternative "mean(a) > mean(b)".
pub fn two_sample_permutation_p(a: &[f64], b: &[f64], n_perm: usize, seed: u64) -> f64 {
    let observed = mean(a) - mean(b);
    let mut pool: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut r = rng::stream(seed);
    let mut at_least = 1usize;
    for _ in 0..n_perm {
        // Fisher–Yates shuffle.
        for i in (1..pool.len()).rev() {
            let j = r.gen_range(0..=i);
            pool.swap(i, j);
        }
        let stat = mean(&pool[..a.len()]) - mean(&pool[a.len()..]);
        if stat >= observed - 1e-15 {
            at_least += 1;
        }
    }
    at_least as f64 / (n_perm + 1) as f64
}

/// Survival function of the Student-t distribution: `P(T > t)`.
pub fn student_t_sf(t: f64, dof: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    let x = dof / (dof + t * t);
    let half_tail = 0.5 * reg_inc_beta(0.5 * dof, 0.5, x);
    if t >= 0.0 {
        half_tail
    } else {
        1.0 - half_tail
    }
}

/// Regularized incomplete beta function `I_x(a, b)` by the Lentz continued
/// fraction, with the symmetry transform for fast convergence.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = a * libm::log(x) + b * libm::log(1.0 - x) - ln_beta(a, b);
    if x < (a + 1.0) / (a + b + 2.0) {
        libm::exp(ln_front) * beta_cf(a, b, x) / a
    } else {
        1.0 - libm::exp(b * libm::log(1.0 - x) + a * libm::log(x) - ln_beta(a, b))
            * beta_cf(b, a, 1.0 - x)
            / b
    }
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Lanczos approximation of ln Γ.
fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = core::f64::consts::PI;
        return libm::log(pi / libm::sin(pi * x)) - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = G[0];
    for (i, &g) in G.iter().enumerate().skip(1) {
        acc += g / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * libm::log(2.0 * core::f64::consts::PI) + (x + 0.5) * libm::log(t) - t + libm::log(acc)
}

/// Continued-fraction core of the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if libm::fabs(d) < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if libm::fabs(d) < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if libm::fabs(c) < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if libm::fabs(d) < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if libm::fabs(c) < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if libm::fabs(del - 1.0) < EPS {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn ln_gamma_known_values() {
        // Γ(5) = 24, Γ(0.5) = sqrt(pi).
        assert!((ln_gamma(5.0) - libm::log(24.0)).abs() < 1e-12);
        assert!((ln_gamma(0.5) - 0.5 * libm::log(core::f64::consts::PI)).abs() < 1e-12);
    }

    #[test]
    fn student_sf_against_table() {
        // t-table: P(T_5 > 2.015) = 0.05, P(T_10 > 1.812) = 0.05,
        // P(T_1 > 1.0) = 0.25.
        assert!((student_t_sf(2.015, 5.0) - 0.05).abs() < 5e-4);
        assert!((student_t_sf(1.812, 10.0) - 0.05).abs() < 5e-4);
        assert!((student_t_sf(1.0, 1.0) - 0.25).abs() < 1e-9);
        assert!((student_t_sf(0.0, 7.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn paired_fixture_hand_computed() {
        // Differences {1.1, 0.9, 1.0, 1.2, 0.8}: mean 1.0, sd 0.158114,
        // t = sqrt(5) * 1.0 / 0.158114 = 14.142.
        let a = vec![2.1, 1.9, 2.0, 2.2, 1.8];
        let b = vec![1.0; 5];
        let r = paired_t_test_one_sided(&a, &b).unwrap();
        assert!((r.t - 14.142135).abs() < 1e-3, "t = {}", r.t);
        assert!(r.p < 1e-4);
    }

    #[test]
    fn paired_degenerate_differences_error() {
        let b = vec![0.3, 1.7, 0.9, 2.2];
        let a: vec::Vec<f64> = b.iter().map(|x| x + 1.0).collect();
        assert_eq!(
            paired_t_test_one_sided(&a, &b),
            Err(StatsError::DegenerateVariance)
        );
    }

    #[test]
    fn paired_antisymmetry() {
        let a = vec![1.0, 2.0, 3.5, 0.4, 2.2];
        let b = vec![0.7, 2.5, 3.0, 0.8, 1.4];
        let r1 = paired_t_test_one_sided(&a, &b).unwrap();
        let r2 = paired_t_test_one_sided(&b, &a).unwrap();
        assert!((r1.t + r2.t).abs() < 1e-12);
        assert!((r1.p + r2.p - 1.0).abs() < 1e-9);
    }

    #[test]
    fn welch_identical_groups() {
        let a = vec![1.0, 2.0, 3.0];
        let r = welch_t_test_one_sided(&a, &a).unwrap();
        assert_eq!(r.t, 0.0);
        assert!((r.p - 0.5).abs() < 1e-9);
    }

    #[test]
    fn welch_direction_check() {
        let a = vec![1.0, 2.0, 3.0];
        let b = vec![11.0, 12.0, 13.0];
        let r = welch_t_test_one_sided(&a, &b).unwrap();
        assert!(r.p > 0.999);
        let r = welch_t_test_one_sided(&b, &a).unwrap();
        assert!(r.p < 0.001);
    }

    #[test]
    fn welch_separated_gaussians() {
        use rand::Rng;
        let mut r = crate::rng::stream(77);
        let a: vec::Vec<f64> = (0..50)
            .map(|_| 1.0 + 0.1 * crate::rng::standard_normal(&mut r))
            .collect();
        let b: vec::Vec<f64> = (0..50)
            .map(|_| 0.1 * crate::rng::standard_normal(&mut r))
            .collect();
        let res = welch_t_test_one_sided(&a, &b).unwrap();
        assert!(res.p < 1e-10, "p = {}", res.p);
        let _ = r.gen::<u8>();
    }

    #[test]
    fn permutation_agrees_with_parametric_direction() {
        let a = vec![2.1, 1.9, 2.0, 2.2, 1.8, 2.3];
        let b = vec![1.1, 0.8, 1.3, 0.9, 1.0, 1.2];
        let t = paired_t_test_one_sided(&a, &b).unwrap();
        let p_perm = paired_permutation_p(&a, &b, 2000, 9);
        assert!(t.p < 0.05);
        assert!(p_perm < 0.1);
        let w = welch_t_test_one_sided(&a, &b).unwrap();
        let p2 = two_sample_permutation_p(&a, &b, 2000, 10);
        assert!(w.p < 0.05);
        assert!(p2 < 0.1);
    }
}
