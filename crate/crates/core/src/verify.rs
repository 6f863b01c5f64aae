//! Self-check suites behind `qsg verify`.
//!
//! Each suite compares a solver component against an independent reference
//! and reports the worst deviation seen next to its limit.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dualheur::{danskin_gradient, fixed_duals_solve, pgd_solve, solve_fixed_subset, DualPoint, FixedDualsOutcome, PgdParams};
use crate::error::{QsgError, Result};
use crate::milp::{feasible_masks, mask_members};
use crate::model::{generate_instance, GameInstance, Overrides};
use crate::numerics::{closed_form_y, finite_diff_grad, lambert_w0, maximize_unimodal};
use crate::objective::CenterCoef;
use crate::oracle::{brute_force_eqopt, OracleMethod};
use crate::search::{hybrid_solve, HybridOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

impl FromStr for Level {
    type Err = QsgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Level::Fast),
            "full" => Ok(Level::Full),
            _ => Err(QsgError::Config(format!("unknown verify level `{s}` (fast or full)"))),
        }
    }
}

/// Signature of the dual gradient under test.
pub type GradientFn = fn(&GameInstance, &FixedDualsOutcome) -> (f64, Vec<f64>);

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub level: Level,
    pub gradient: GradientFn,
    pub seed: u64,
}

impl VerifyOptions {
    pub fn new(level: Level) -> Self {
        VerifyOptions { level, gradient: danskin_gradient, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub checks: usize,
    /// Worst deviation seen; for the duality suite the smallest margin.
    pub worst: f64,
    pub limit: f64,
    pub seconds: f64,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<20} {}  checks {:>6}  worst {:>10.3e}  limit {:>8.1e}  {:>6.2} s",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.checks,
            self.worst,
            self.limit,
            self.seconds
        )
    }
}

fn small(seed: u64, n: usize) -> GameInstance {
    generate_instance(seed, n, &Overrides { n_partitions: Some(2), ..Default::default() })
        .expect("n >= 2 generates")
}

fn timed(name: &'static str, limit: f64, body: impl FnOnce() -> (usize, f64, bool)) -> SuiteResult {
    let t = Instant::now();
    let (checks, worst, passed) = body();
    SuiteResult { name, passed, checks, worst, limit, seconds: t.elapsed().as_secs_f64() }
}

fn lambert_suite() -> SuiteResult {
    let limit = 1e-10;
    timed("lambert_w", limit, || {
        let mut worst = 0.0f64;
        let mut checks = 0;
        let mut z = 1e-12;
        while z <= 1e12 {
            let w = lambert_w0(z).expect("z >= 0");
            worst = worst.max((w * w.exp() - z).abs() / z.max(1.0));
            checks += 1;
            z *= 1.5;
        }
        (checks, worst, worst <= limit)
    })
}

fn closed_form_suite(rng: &mut ChaCha8Rng, sites: usize) -> SuiteResult {
    let limit = 1e-6;
    timed("closed_form", limit, || {
        let insts: Vec<GameInstance> = (0..20).map(|s| small(s, 8)).collect();
        let mut worst = 0.0f64;
        for _ in 0..sites {
            let g = &insts[rng.random_range(0..insts.len())];
            let j = rng.random_range(0..g.n_centers());
            let scale = 10f64.powf(rng.random_range(-3.0..2.0));
            let (nu, mu) = (rng.random_range(0.0..1.0) * scale, rng.random_range(0.0..1.0) * scale);
            let delta0 = rng.random_range(-10.0..10.0);
            let Ok(cf) = closed_form_y(g, j, nu, mu, delta0) else {
                return (0, f64::INFINITY, false);
            };
            let c = CenterCoef::new(g, j);
            let (x, _) = maximize_unimodal(|x| c.value(x, nu + mu, delta0), 0.0, 1.0, 1e-11).expect("valid bracket");
            worst = worst.max((x - cf.x_star).abs());
        }
        (sites, worst, worst <= limit)
    })
}

fn gradient_suite(rng: &mut ChaCha8Rng, points: usize, gradient: GradientFn) -> SuiteResult {
    let limit = 1e-4;
    timed("danskin_gradient", limit, || {
        let insts: Vec<GameInstance> = (0..10).map(|s| small(s, 8)).collect();
        let mut worst = 0.0f64;
        let mut checks = 0;
        let mut attempts = 0;
        while checks < points && attempts < 50 * points {
            attempts += 1;
            let g = &insts[attempts % insts.len()];
            let dual = DualPoint {
                nu: rng.random_range(0.0..50.0),
                mu: vec![rng.random_range(0.0..50.0), rng.random_range(0.0..50.0)],
            };
            let delta0 = rng.random_range(-6.0..6.0);
            let out = fixed_duals_solve(g, &dual, delta0).expect("valid dual");
            if out.tie_detected {
                continue;
            }
            let h = 1e-5;
            let point = [dual.nu, dual.mu[0], dual.mu[1]];
            let at = |p: &[f64]| DualPoint { nu: p[0], mu: p[1..].to_vec() };
            let value = |p: &[f64]| fixed_duals_solve(g, &at(p), delta0).expect("valid dual");
            let stable = (0..3).all(|i| {
                [h, -h].iter().all(|d| {
                    let mut p = point;
                    p[i] += d;
                    value(&p).subset == out.subset
                })
            });
            if !stable {
                continue;
            }
            let fd = finite_diff_grad(|p| value(p).value, &point, h);
            let (g_nu, g_mu) = gradient(g, &out);
            for (a, b) in fd.iter().zip([g_nu, g_mu[0], g_mu[1]]) {
                worst = worst.max((a - b).abs());
            }
            checks += 1;
        }
        (checks, worst, checks == points && worst <= limit)
    })
}

fn weak_duality_suite(instances: u64) -> SuiteResult {
    let limit = -1e-6;
    timed("weak_duality", limit, || {
        let mut margin = f64::INFINITY;
        let mut checks = 0;
        let params = PgdParams::default();
        for s in 0..instances {
            let g = small(100 + s, 4 + (s % 4) as usize);
            let masks = feasible_masks(&g);
            for delta0 in [-6.0, -2.0, 0.0, 2.0, 5.0] {
                let dual = pgd_solve(&g, delta0, 1e-6, &params).expect("valid input").dual_value;
                let primal = masks
                    .iter()
                    .map(|&m| solve_fixed_subset(&g, &mask_members(m), delta0).expect("valid subset").value)
                    .fold(f64::NEG_INFINITY, f64::max);
                margin = margin.min(dual - primal);
                checks += 1;
            }
        }
        (checks, margin, margin >= limit)
    })
}

fn oracle_suite(instances: u64) -> SuiteResult {
    let limit = 1e-3;
    timed("oracle_equivalence", limit, || {
        let opts = HybridOptions::default();
        let mut worst = f64::NEG_INFINITY;
        for s in 0..instances {
            let g = small(500 + s, 4 + (s % 5) as usize);
            let h = hybrid_solve(&g, &opts).expect("hybrid solves small instances");
            let o = brute_force_eqopt(&g, OracleMethod::Grid, None).expect("n <= 8");
            // Shortfall beyond the oracle's own grid error.
            worst = worst.max(o.best_utility - o.error_bound - h.utility);
        }
        (instances as usize, worst, worst <= limit)
    })
}

/// Runs every suite; `Fast` uses smaller samples.
pub fn run_suites(opts: &VerifyOptions) -> Vec<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let full = opts.level == Level::Full;
    vec![
        lambert_suite(),
        closed_form_suite(&mut rng, if full { 10_000 } else { 1_000 }),
        gradient_suite(&mut rng, if full { 1_000 } else { 100 }, opts.gradient),
        weak_duality_suite(if full { 24 } else { 6 }),
        oracle_suite(if full { 50 } else { 8 }),
    ]
}

pub fn scoreboard(results: &[SuiteResult]) -> String {
    let mut s = String::new();
    for r in results {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    let passed = results.iter().filter(|r| r.passed).count();
    s.push_str(&format!("{passed}/{} suites passed\n", results.len()));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flipped(inst: &GameInstance, out: &FixedDualsOutcome) -> (f64, Vec<f64>) {
        let (g, mu) = danskin_gradient(inst, out);
        (-g, mu)
    }

    #[test]
    fn fast_level_passes() {
        let r = run_suites(&VerifyOptions::new(Level::Fast));
        assert!(r.iter().all(|s| s.passed), "{}", scoreboard(&r));
        assert_eq!(r.len(), 5);
    }

    #[test]
    fn sign_error_in_the_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = gradient_suite(&mut rng, 50, flipped);
        assert!(!r.passed);
        let r = gradient_suite(&mut rng, 50, danskin_gradient);
        assert!(r.passed);
    }

    #[test]
    fn level_parsing() {
        assert_eq!("fast".parse::<Level>().unwrap(), Level::Fast);
        assert!("slow".parse::<Level>().is_err());
    }
}
