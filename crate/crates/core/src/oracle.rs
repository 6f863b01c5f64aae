//! Brute-force ground truth for small instances.
//!
//! Two ways of solving the equilibrium problem exactly up to a known error:
//! a coverage grid over every feasible subset, and per-subset Dinkelbach
//! iterations on the exact fixed-subset solve. Also a grid evaluation of the
//! Lagrangian dual for weak-duality checks.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dualheur::fixed_subset_core;
use crate::error::{QsgError, Result};
use crate::milp::{feasible_masks, mask_members, SMALL_EXACT_MAX};
use crate::model::{GameInstance, Strategy};
use crate::numerics::optimal_coverage;
use crate::objective::{coefficients, defender_utility, CenterCoef};
use crate::search::{Method, SolveReport};

pub const GRID_ORACLE_MAX: usize = 8;
pub const DUAL_INNER_MAX: usize = SMALL_EXACT_MAX;
/// Reported error bound of the Dinkelbach oracle.
pub const DUAL_INNER_ERROR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMethod {
    Grid,
    DualInner,
}

impl fmt::Display for OracleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OracleMethod::Grid => "grid",
            OracleMethod::DualInner => "dual_inner",
        })
    }
}

impl FromStr for OracleMethod {
    type Err = QsgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(OracleMethod::Grid),
            "dual_inner" => Ok(OracleMethod::DualInner),
            _ => Err(QsgError::Config(format!("unknown oracle method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub best_strategy: Strategy,
    pub best_utility: f64,
    pub subsets_evaluated: usize,
    pub method: OracleMethod,
    /// The true optimum lies in `[best_utility, best_utility + error_bound]`.
    pub error_bound: f64,
}

/// 50 points per coordinate up to five centers, 20 beyond.
pub fn default_resolution(n_centers: usize) -> usize {
    if n_centers <= 5 { 50 } else { 20 }
}

/// `sum_j w^d_j / resolution`.
pub fn grid_error_bound(instance: &GameInstance, resolution: usize) -> f64 {
    (0..instance.n_centers()).map(|j| instance.w_def(j).abs()).sum::<f64>() / resolution as f64
}

struct GridWalk<'a> {
    instance: &'a GameInstance,
    coefs: &'a [CenterCoef],
    subset: &'a [usize],
    res: usize,
    caps: Vec<usize>,
    used: Vec<usize>,
    ks: Vec<usize>,
}

impl GridWalk<'_> {
    fn rec(&mut self, i: usize, num: f64, den: f64, left: usize, leaf: &mut impl FnMut(f64, f64, &[usize])) {
        if i == self.subset.len() {
            leaf(num, den, &self.ks);
            return;
        }
        let j = self.subset[i];
        let l = self.instance.partition_of(j);
        let top = self.res.min(left).min(self.caps[l] - self.used[l]);
        let c = self.coefs[j];
        for k in 0..=top {
            let x = k as f64 / self.res as f64;
            let w = c.weight(x);
            self.ks[i] = k;
            self.used[l] += k;
            self.rec(i + 1, num + w * (c.w_def * x + c.loss_def), den + w, left - k, leaf);
            self.used[l] -= k;
        }
    }
}

/// Walks every grid coverage of `subset` that respects the budget and the
/// partition caps, calling `leaf(num, den, ks)` with
/// `num = sum N(x)(w^d x + l^d)`, `den = sum N(x)` and `x_j = ks[i] / res`.
fn walk_grid(
    instance: &GameInstance,
    coefs: &[CenterCoef],
    subset: &[usize],
    res: usize,
    leaf: &mut impl FnMut(f64, f64, &[usize]),
) {
    // Integer caps in grid units; the tiny slack keeps exact multiples.
    let units = |v: f64| (v * res as f64 + 1e-9).floor().max(0.0) as usize;
    let budget = units(instance.resources()).min(res * subset.len());
    let caps = (0..instance.n_partitions()).map(|l| units(instance.beta(l))).collect();
    let mut walk = GridWalk {
        instance,
        coefs,
        subset,
        res,
        caps,
        used: vec![0; instance.n_partitions()],
        ks: vec![0; subset.len()],
    };
    walk.rec(0, 0.0, 0.0, budget, leaf);
}

fn grid_strategy(subset: &[usize], ks: &[usize], res: usize) -> Strategy {
    Strategy::new(subset.to_vec(), ks.iter().map(|&k| k as f64 / res as f64).collect())
        .expect("grid strategy is well formed")
}

/// Largest utility over grid coverages of `subset`.
pub fn grid_subset_utility(instance: &GameInstance, subset: &[usize], resolution: usize) -> Strategy {
    let coefs = coefficients(instance);
    let mut best = (f64::NEG_INFINITY, vec![0; subset.len()]);
    walk_grid(instance, &coefs, subset, resolution, &mut |num, den, ks| {
        let u = num / den;
        if u > best.0 {
            best = (u, ks.to_vec());
        }
    });
    grid_strategy(subset, &best.1, resolution)
}

/// Largest parametric objective `sum N(x)(w^d x + l^d - delta0)` over grid
/// coverages of `subset`.
pub fn grid_inner_max(instance: &GameInstance, subset: &[usize], delta0: f64, resolution: usize) -> (f64, Strategy) {
    let coefs = coefficients(instance);
    let mut best = (f64::NEG_INFINITY, vec![0; subset.len()]);
    walk_grid(instance, &coefs, subset, resolution, &mut |num, den, ks| {
        let v = num - delta0 * den;
        if v > best.0 {
            best = (v, ks.to_vec());
        }
    });
    (best.0, grid_strategy(subset, &best.1, resolution))
}

/// Dinkelbach iterations on a fixed subset: `delta <- F(x*(delta))`.
pub fn subset_optimum(instance: &GameInstance, coefs: &[CenterCoef], subset: &[usize]) -> Strategy {
    let zero = Strategy::new(subset.to_vec(), vec![0.0; subset.len()]).expect("subset is valid");
    let mut delta = defender_utility(instance, &zero).expect("subset is valid");
    let mut best = zero;
    for _ in 0..200 {
        let sol = fixed_subset_core(instance, coefs, subset, delta);
        let next = defender_utility(instance, &sol.strategy).expect("solver output is valid");
        if next <= delta + 1e-14 * delta.abs().max(1.0) {
            if next > delta {
                best = sol.strategy;
            }
            break;
        }
        delta = next;
        best = sol.strategy;
    }
    best
}

/// Best strategy over all feasible subsets.
///
/// `Grid` needs `n <= 8` and searches coverages on a grid of `resolution`
/// steps per coordinate (default from [`default_resolution`]); its error
/// bound is [`grid_error_bound`]. `DualInner` needs `n <= 16`.
pub fn brute_force_eqopt(instance: &GameInstance, method: OracleMethod, resolution: Option<usize>) -> Result<OracleResult> {
    let n = instance.n_centers();
    let max = match method {
        OracleMethod::Grid => GRID_ORACLE_MAX,
        OracleMethod::DualInner => DUAL_INNER_MAX,
    };
    if n > max {
        return Err(QsgError::SizeLimit { n, max, what: "the brute-force oracle", hint: "use a smaller instance" });
    }
    let masks = feasible_masks(instance);
    if masks.is_empty() {
        return Err(QsgError::Infeasible("no subset satisfies the cardinality and partition rows".into()));
    }
    let coefs = coefficients(instance);
    let res = resolution.unwrap_or_else(|| default_resolution(n));
    if res == 0 {
        return Err(QsgError::Config("grid resolution must be positive".into()));
    }
    let best = masks
        .par_iter()
        .map(|&mask| {
            let subset = mask_members(mask);
            let s = match method {
                OracleMethod::Grid => grid_subset_utility(instance, &subset, res),
                OracleMethod::DualInner => subset_optimum(instance, &coefs, &subset),
            };
            (defender_utility(instance, &s).expect("valid strategy"), mask, s)
        })
        .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
        .expect("masks are nonempty");
    Ok(OracleResult {
        best_utility: best.0,
        best_strategy: best.2,
        subsets_evaluated: masks.len(),
        method,
        error_bound: match method {
            OracleMethod::Grid => grid_error_bound(instance, res),
            OracleMethod::DualInner => DUAL_INNER_ERROR,
        },
    })
}

/// Oracle answer in report form, via the Dinkelbach oracle.
pub fn oracle_report(instance: &GameInstance) -> Result<SolveReport> {
    let start = Instant::now();
    let r = brute_force_eqopt(instance, OracleMethod::DualInner, None)?;
    let mut report = SolveReport {
        method: Method::Oracle,
        delta0_final: r.best_utility,
        strategy: r.best_strategy,
        utility: r.best_utility,
        bound_gap: 0.0,
        bisect_iterations: 0,
        milp_invoked: false,
        inner_diagnostics: Default::default(),
        warnings: Vec::new(),
        wall_time_s: 0.0,
    };
    report.inner_diagnostics.insert("subsets_evaluated".into(), r.subsets_evaluated as f64);
    report.inner_diagnostics.insert("error_bound".into(), r.error_bound);
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Lagrangian dual of the parametric problem on `subset` at `(nu, mu)`:
/// `sum_j max_x [N(x)(w^d x + l^d - delta0) - (nu + mu_l) x] + nu m + sum_l mu_l beta_l`.
/// Only partitions meeting `subset` contribute a `mu` term.
pub fn dual_function(instance: &GameInstance, subset: &[usize], delta0: f64, nu: f64, mu: &[f64]) -> f64 {
    let mut touched = vec![false; instance.n_partitions()];
    let mut v = nu * instance.resources();
    for &j in subset {
        let l = instance.partition_of(j);
        touched[l] = true;
        let c = CenterCoef::new(instance, j);
        let price = nu + mu[l];
        v += c.value(optimal_coverage(&c, price, delta0).x_star, price, delta0);
    }
    v + touched.iter().zip(mu).zip(instance.betas()).filter(|((t, _), _)| **t).map(|((_, m), b)| m * b).sum::<f64>()
}

/// Minimum of [`dual_function`] over `nu` in `[0, nu_max]` and each touched
/// `mu_l` in `[0, mu_max]`, `steps` points per axis. Always an upper bound on
/// the primal maximum.
pub fn dual_grid_min(
    instance: &GameInstance,
    subset: &[usize],
    delta0: f64,
    nu_max: f64,
    mu_max: f64,
    steps: usize,
) -> Result<f64> {
    if !(nu_max > 0.0 && mu_max > 0.0) || steps < 2 {
        return Err(QsgError::Config("dual grid needs positive ranges and at least 2 steps".into()));
    }
    let mut parts: Vec<usize> = subset.iter().map(|&j| instance.partition_of(j)).collect();
    parts.sort_unstable();
    parts.dedup();
    let axes = 1 + parts.len();
    let total = steps.checked_pow(axes as u32).filter(|&t| t <= 50_000_000).ok_or_else(|| {
        QsgError::Config(format!("dual grid with {steps}^{axes} points is too large"))
    })?;
    let at = |i: usize, max: f64| max * i as f64 / (steps - 1) as f64;
    let best = (0..total)
        .into_par_iter()
        .map(|mut idx| {
            let nu = at(idx % steps, nu_max);
            idx /= steps;
            let mut mu = vec![0.0; instance.n_partitions()];
            for &l in &parts {
                mu[l] = at(idx % steps, mu_max);
                idx /= steps;
            }
            dual_function(instance, subset, delta0, nu, &mu)
        })
        .reduce(|| f64::INFINITY, f64::min);
    Ok(best)
}
