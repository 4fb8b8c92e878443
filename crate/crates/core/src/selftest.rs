//! Independent numeric oracles and the checks behind `fedair selftest`.
//!
//! Everything here deliberately avoids the implementation paths it checks:
//! the exponential integral is evaluated by adaptive quadrature of its
//! defining integral, waterfilling by bisection on the water level, the
//! binomial log by exact big-integer arithmetic, and sparse recovery
//! against planted ground-truth instances.

use num_bigint::BigUint;
use rand::Rng;

use crate::power;
use crate::project::{amp_recover, make_projection, AmpConfig};

/// Adaptive Simpson quadrature of `∫_x^∞ e^(-τ)/τ dτ` via the substitution
/// `τ = e^u`, which turns the integrand into the smooth, bounded
/// `exp(-e^u)` on `[ln x, ln τ_max]`.
pub fn e1_quadrature(x: f64) -> f64 {
    assert!(x > 0.0, "E1 oracle needs x > 0");
    let f = |u: f64| (-u.exp()).exp();
    let a = x.ln();
    let b = 745.0f64.max(4.0 * x).ln(); // exp(-745) underflows to 0
    // Scale the absolute tolerance by an elementary lower bound on E1.
    let scale = (-x).exp() / (x + 1.0);
    adaptive_simpson(&f, a, b, 1e-13 * scale.max(1e-300), 60)
}

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
}

/// Exact `log2 C(n, k)` through big-integer arithmetic.
pub fn log2_binomial_exact(n: usize, k: usize) -> f64 {
    let mut c = BigUint::from(1u32);
    for i in 1..=k.min(n - k) {
        c = c * BigUint::from(n + 1 - i) / BigUint::from(i);
    }
    log2_biguint(&c)
}

fn log2_biguint(v: &BigUint) -> f64 {
    // Take the top 53 bits as an exact f64 mantissa and add the shift back.
    let low_u64 = |v: &BigUint| v.to_u64_digits().first().copied().unwrap_or(0);
    let bits = v.bits();
    if bits <= 53 {
        return (low_u64(v) as f64).log2();
    }
    let shift = bits - 53;
    (low_u64(&(v >> shift)) as f64).log2() + shift as f64
}

/// Waterfilling by bisection on the water level; the reference for the
/// closed-form solver.
pub fn waterfill_bisection(gain_sq: &[f64], budget: f64) -> Vec<f64> {
    let spent = |level: f64| -> f64 {
        gain_sq.iter().map(|&g| (level - 1.0 / g).max(0.0)).sum()
    };
    let mut lo = 0.0f64;
    let mut hi = budget
        + gain_sq
            .iter()
            .map(|&g| 1.0 / g)
            .fold(0.0f64, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if spent(mid) > budget {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let level = 0.5 * (lo + hi);
    gain_sq.iter().map(|&g| (level - 1.0 / g).max(0.0)).collect()
}

/// Outcome of one self-check.
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check_e1_grid() -> CheckOutcome {
    // 200 log-spaced points over [1e-6, 50].
    let n = 200;
    let (lo, hi) = (1e-6f64.ln(), 50f64.ln());
    let mut worst = 0.0f64;
    let mut failed_at = None;
    for i in 0..n {
        let x = (lo + (hi - lo) * i as f64 / (n - 1) as f64).exp();
        let got = match power::exp_integral_e1(x) {
            Ok(v) => v,
            Err(e) => {
                return CheckOutcome {
                    name: "exponential integral vs quadrature",
                    passed: false,
                    detail: format!("E1({x}) errored: {e}"),
                }
            }
        };
        let want = e1_quadrature(x);
        let rel = (got - want).abs() / want.abs().max(1.0e-300);
        if rel > worst {
            worst = rel;
            if rel > 1e-10 {
                failed_at = Some(x);
            }
        }
    }
    CheckOutcome {
        name: "exponential integral vs quadrature",
        passed: failed_at.is_none(),
        detail: match failed_at {
            Some(x) => format!("worst relative error {worst:.2e} at x = {x:.3e}"),
            None => format!("200-point grid, worst relative error {worst:.2e}"),
        },
    }
}

fn check_waterfilling() -> CheckOutcome {
    let mut rng = crate::seeded_stream(0xACC0, "waterfill");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let s = rng.gen_range(1..=64);
        let gains: Vec<f64> = (0..s).map(|_| rng.gen_range(0.01..8.0)).collect();
        let budget = rng.gen_range(0.1..40.0);
        let got = match power::waterfill(&gains, budget) {
            Ok(v) => v,
            Err(e) => {
                return CheckOutcome {
                    name: "waterfilling vs bisection",
                    passed: false,
                    detail: format!("solver errored: {e}"),
                }
            }
        };
        let want = waterfill_bisection(&gains, budget);
        let sum: f64 = got.iter().sum();
        let sum_err = (sum - budget).abs() / budget;
        let alloc_err = got
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max)
            / budget;
        worst = worst.max(sum_err).max(alloc_err);
    }
    CheckOutcome {
        name: "waterfilling vs bisection",
        passed: worst <= 1e-9,
        detail: format!("100 instances, worst normalized deviation {worst:.2e}"),
    }
}

fn check_binomial() -> CheckOutcome {
    let mut worst = 0.0f64;
    for q in [1usize, 10, 100, 500] {
        let got = crate::compress::log2_binomial(7850, q);
        let want = log2_binomial_exact(7850, q);
        worst = worst.max((got - want).abs() / want);
    }
    CheckOutcome {
        name: "log2 binomial vs exact big integer",
        passed: worst <= 1e-6,
        detail: format!("q in {{1, 10, 100, 500}}, worst relative error {worst:.2e}"),
    }
}

/// Builds a planted sparse-recovery instance and reports the relative error.
pub fn amp_planted_error(seed: u64, dim: usize, rows: usize, k: usize, noise_std: f64) -> f64 {
    let a = make_projection(seed, rows, dim).expect("projection");
    let mut rng = crate::seeded_stream(seed, "amp-oracle");
    let mut x_true = vec![0.0f64; dim];
    for i in rand::seq::index::sample(&mut rng, dim, k) {
        x_true[i] = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    }
    let mut y = a.project(&x_true).expect("measure");
    if noise_std > 0.0 {
        for v in &mut y {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            *v += noise_std * z;
        }
    }
    let x = amp_recover(&a, &y, &AmpConfig::default()).expect("recover");
    let err: f64 = x
        .iter()
        .zip(&x_true)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = x_true.iter().map(|v| v * v).sum::<f64>().sqrt();
    err / norm
}

fn check_amp(noise_std: f64, threshold: f64, name: &'static str) -> CheckOutcome {
    let mut hits = 0;
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let err = amp_planted_error(1000 + seed, 1000, 400, 20, noise_std);
        if err < threshold {
            hits += 1;
        }
        worst = worst.max(err);
    }
    CheckOutcome {
        name,
        passed: hits >= 18,
        detail: format!("{hits}/20 instances under {threshold:.0e}, worst error {worst:.2e}"),
    }
}

/// Runs every self-check.
pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        check_e1_grid(),
        check_waterfilling(),
        check_binomial(),
        check_amp(0.0, 1e-3, "sparse recovery, noiseless"),
        check_amp(0.01, 0.1, "sparse recovery, noisy"),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quadrature_matches_reference_values() {
        // E1(1) and E1(0.001) against published reference digits.
        assert_relative_eq!(e1_quadrature(1.0), 0.219_383_934_395_520_6, max_relative = 1e-11);
        assert_relative_eq!(e1_quadrature(1e-3), 6.331_539_364_136_149, max_relative = 1e-9);
    }

    #[test]
    fn exact_binomial_small_values() {
        assert_relative_eq!(log2_binomial_exact(4, 1), 2.0);
        assert_relative_eq!(log2_binomial_exact(4, 2), 6.0f64.log2());
        assert_relative_eq!(log2_binomial_exact(52, 5), (2_598_960.0f64).log2());
    }

    #[test]
    fn bisection_matches_two_channel_example() {
        let alloc = waterfill_bisection(&[1.0, 4.0], 1.0);
        assert_relative_eq!(alloc[0], 0.125, max_relative = 1e-8);
        assert_relative_eq!(alloc[1], 0.875, max_relative = 1e-8);
    }
}
