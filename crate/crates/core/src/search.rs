//! Dinkelbach bisection over the utility threshold and the hybrid solver.
//!
//! For a threshold `delta0` the parametric problem asks for the largest
//! `sum_S N(x_j)(w^d_j x_j + l^d_j) - delta0 D(x_S)`; its sign says whether
//! some strategy reaches utility `delta0`. Bisection on that sign finds the
//! optimal utility.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dualheur::{fixed_subset_core, pgd_core, PgdParams};
use crate::error::{QsgError, Result};
use crate::milp::{build_pwla, solve_external, solve_pwla_grid, solve_small_exact, DEFAULT_PIECES, GRID_SOLVER_MAX, SMALL_EXACT_MAX};
use crate::model::{GameInstance, Strategy};
use crate::objective::{coefficients, defender_utility};

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_XI: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Heuristic,
    Milp,
    Hybrid,
    ConvexOpt,
    TwoSteps,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Heuristic,
        Method::Milp,
        Method::Hybrid,
        Method::ConvexOpt,
        Method::TwoSteps,
        Method::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Heuristic => "heuristic",
            Method::Milp => "milp",
            Method::Hybrid => "hybrid",
            Method::ConvexOpt => "convexopt",
            Method::TwoSteps => "twosteps",
            Method::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = QsgError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| QsgError::Config(format!("unknown method `{s}`")))
    }
}

/// One answer of an inner solver at a fixed threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub strategy: Strategy,
    /// Value whose sign drives the bisection.
    pub objective: f64,
    /// Counters merged across bisection steps: keys starting with `max_` keep
    /// the maximum, all others are summed.
    pub diagnostics: BTreeMap<String, f64>,
}

impl InnerSolution {
    pub fn new(strategy: Strategy, objective: f64) -> Self {
        InnerSolution { strategy, objective, diagnostics: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub method: Method,
    /// Last bisection midpoint.
    pub delta0_final: f64,
    pub strategy: Strategy,
    /// Defender utility of `strategy`, recomputed from the instance.
    pub utility: f64,
    /// `|delta0_final - utility|`.
    pub bound_gap: f64,
    pub bisect_iterations: usize,
    pub milp_invoked: bool,
    pub inner_diagnostics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
    pub wall_time_s: f64,
}

fn merge(into: &mut BTreeMap<String, f64>, from: &BTreeMap<String, f64>) {
    for (k, &v) in from {
        let e = into.entry(k.clone()).or_insert(if k.starts_with("max_") { f64::NEG_INFINITY } else { 0.0 });
        if k.starts_with("max_") {
            *e = e.max(v);
        } else {
            *e += v;
        }
    }
}

/// Bisection on the sign of `inner(delta0)`.
///
/// Starts from `bounds` or from `(min l^d, max r^d)`, and halves while
/// `U - L >= epsilon`; a nonnegative objective raises `L`. When the interval
/// is already narrower than `epsilon` the midpoint is solved once. The report
/// carries the strategy of highest utility among all inner answers.
pub fn binary_search(
    instance: &GameInstance,
    method: Method,
    epsilon: f64,
    bounds: Option<(f64, f64)>,
    mut inner: impl FnMut(f64) -> Result<InnerSolution>,
) -> Result<SolveReport> {
    if !(epsilon > 0.0) {
        return Err(QsgError::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let start = Instant::now();
    let (mut lo, mut hi) = bounds.unwrap_or_else(|| instance.utility_bounds());
    if !(lo <= hi) {
        return Err(QsgError::domain(format!("bisection bounds are reversed: [{lo}, {hi}]")));
    }
    let mut iterations = 0;
    let mut diagnostics = BTreeMap::new();
    let mut best: Option<(f64, Strategy)> = None;
    let mut delta0 = 0.5 * (lo + hi);
    let mut step = |delta0: f64, iteration: usize| -> Result<InnerSolution> {
        let sol = inner(delta0).map_err(|e| QsgError::Bisection {
            context: format!("inner solve failed at delta0 = {delta0} (bisection step {iteration})"),
            source: Box::new(e),
        })?;
        let u = defender_utility(instance, &sol.strategy)?;
        if best.as_ref().is_none_or(|b| u > b.0) {
            best = Some((u, sol.strategy.clone()));
        }
        merge(&mut diagnostics, &sol.diagnostics);
        Ok(sol)
    };
    if hi - lo < epsilon {
        step(delta0, 0)?;
    }
    while hi - lo >= epsilon {
        delta0 = 0.5 * (lo + hi);
        iterations += 1;
        let sol = step(delta0, iterations)?;
        if sol.objective >= 0.0 {
            lo = delta0;
        } else {
            hi = delta0;
        }
    }
    let (utility, strategy) = best.expect("at least one inner solve ran");
    diagnostics.insert("final_lower".into(), lo);
    diagnostics.insert("final_upper".into(), hi);
    Ok(SolveReport {
        method,
        delta0_final: delta0,
        utility,
        bound_gap: (delta0 - utility).abs(),
        strategy,
        bisect_iterations: iterations,
        milp_invoked: false,
        inner_diagnostics: diagnostics,
        warnings: Vec::new(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Enforces `epsilon > 0` and `0 < xi <= epsilon / 100`.
pub fn check_tolerances(epsilon: f64, xi: f64) -> Result<()> {
    if !(epsilon > 0.0) {
        return Err(QsgError::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(xi > 0.0 && xi <= epsilon * 1e-2) {
        return Err(QsgError::Config(format!(
            "xi must lie in (0, epsilon/100] = (0, {}], got {xi}",
            epsilon * 1e-2
        )));
    }
    Ok(())
}

/// The dual heuristic inside bisection.
pub fn heuristic_solve(instance: &GameInstance, epsilon: f64, xi: f64, params: &PgdParams) -> Result<SolveReport> {
    check_tolerances(epsilon, xi)?;
    let coefs = coefficients(instance);
    binary_search(instance, Method::Heuristic, epsilon, None, |delta0| {
        let r = pgd_core(instance, &coefs, delta0, xi, params);
        let mut sol = InnerSolution::new(r.primal.clone(), r.dual_value);
        let d = &mut sol.diagnostics;
        d.insert("pgd_iterations".into(), r.iterations as f64);
        d.insert("dual_evaluations".into(), r.evaluations as f64);
        d.insert("tie_points".into(), r.ties as f64);
        d.insert("inner_unconverged".into(), f64::from(u8::from(!r.converged)));
        d.insert("max_inner_gap".into(), r.gap());
        Ok(sol)
    })
}

/// Bisection with the exact coverage optimum on a fixed `subset`.
pub fn fixed_subset_search(
    instance: &GameInstance,
    subset: &[usize],
    method: Method,
    epsilon: f64,
    bounds: Option<(f64, f64)>,
) -> Result<SolveReport> {
    let coefs = coefficients(instance);
    let mut sorted = subset.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.is_empty() {
        return Err(QsgError::EmptyStrategy);
    }
    for &j in &sorted {
        instance.check_index(j)?;
    }
    binary_search(instance, method, epsilon, bounds, |delta0| {
        let sol = fixed_subset_core(instance, &coefs, &sorted, delta0);
        Ok(InnerSolution::new(sol.strategy, sol.value))
    })
}

/// Bisection with the internal PWLA grid solver (`n <= 24`) or an external
/// MILP solver.
pub fn milp_solve(
    instance: &GameInstance,
    epsilon: f64,
    pieces: usize,
    solver_command: Option<&str>,
    timeout: Duration,
) -> Result<SolveReport> {
    let n = instance.n_centers();
    let mut report = if n <= GRID_SOLVER_MAX && solver_command.is_none() {
        binary_search(instance, Method::Milp, epsilon, None, |delta0| {
            let sol = solve_pwla_grid(instance, delta0, pieces)?;
            Ok(InnerSolution::new(sol.strategy, sol.objective))
        })?
    } else {
        let cmd = solver_command.ok_or_else(|| {
            QsgError::Config(format!(
                "the MILP method needs an external solver for n = {n} > {GRID_SOLVER_MAX}; pass --solver-cmd \
                 or set QSG_MILP_SOLVER"
            ))
        })?;
        binary_search(instance, Method::Milp, epsilon, None, |delta0| {
            let model = build_pwla(instance, delta0, pieces)?;
            let sol = solve_external(&model, cmd, timeout)?;
            Ok(InnerSolution::new(sol.strategy, sol.objective))
        })?
    };
    report.milp_invoked = true;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridOptions {
    pub epsilon: f64,
    pub xi: f64,
    pub pieces: usize,
    pub pgd: PgdParams,
    /// External MILP solver for instances beyond exact enumeration.
    pub solver_command: Option<String>,
    pub solver_timeout: Duration,
    /// Run the exact leg even when the heuristic's gap is within `epsilon`.
    pub force_exact_leg: bool,
}

impl Default for HybridOptions {
    fn default() -> Self {
        HybridOptions {
            epsilon: DEFAULT_EPSILON,
            xi: DEFAULT_XI,
            pieces: DEFAULT_PIECES,
            pgd: PgdParams::default(),
            solver_command: None,
            solver_timeout: Duration::from_secs(600),
            force_exact_leg: false,
        }
    }
}

/// Heuristic first; if its bound gap exceeds `epsilon`, an exact leg runs
/// inside the heuristic's bounds and its subset is polished. The best
/// utility among all candidates is returned, so the result never falls below
/// the heuristic's.
///
/// The exact leg enumerates subsets for `n <= 16` and otherwise calls the
/// external MILP solver; without one it keeps the heuristic answer and adds
/// a warning.
pub fn hybrid_solve(instance: &GameInstance, opts: &HybridOptions) -> Result<SolveReport> {
    let start = Instant::now();
    let heur = heuristic_solve(instance, opts.epsilon, opts.xi, &opts.pgd)?;
    let eps = opts.epsilon;
    let mut report = SolveReport { method: Method::Hybrid, ..heur.clone() };
    report.inner_diagnostics.insert("heuristic_utility".into(), heur.utility);
    report.inner_diagnostics.insert("heuristic_gap".into(), heur.bound_gap);
    if heur.bound_gap <= eps && !opts.force_exact_leg {
        report.wall_time_s = start.elapsed().as_secs_f64();
        return Ok(report);
    }

    let n = instance.n_centers();
    let lower = heur.utility;
    let upper = (heur.delta0_final + 2.0 * eps).max(lower + 2.0 * eps);
    let exact = if n <= SMALL_EXACT_MAX {
        binary_search(instance, Method::Hybrid, eps, Some((lower, upper)), |delta0| {
            let sol = solve_small_exact(instance, delta0)?;
            let mut inner = InnerSolution::new(sol.strategy, sol.objective);
            inner.diagnostics.insert("exact_subsets_solved".into(), sol.subsets_solved as f64);
            Ok(inner)
        })?
    } else if let Some(cmd) = opts.solver_command.as_deref() {
        binary_search(instance, Method::Hybrid, eps, Some((lower, upper)), |delta0| {
            let model = build_pwla(instance, delta0, opts.pieces)?;
            let sol = solve_external(&model, cmd, opts.solver_timeout)?;
            Ok(InnerSolution::new(sol.strategy, sol.objective))
        })?
    } else {
        report.warnings.push(format!(
            "bound gap {:.3e} exceeds epsilon {eps:e} but no external MILP solver is configured for n = {n}; \
             returning the heuristic answer",
            heur.bound_gap
        ));
        report.wall_time_s = start.elapsed().as_secs_f64();
        return Ok(report);
    };

    let mut candidates = vec![heur.clone(), exact.clone()];
    let mut subsets = vec![exact.strategy.subset.clone()];
    if heur.strategy.subset != exact.strategy.subset {
        subsets.push(heur.strategy.subset.clone());
    }
    for s in subsets {
        candidates.push(fixed_subset_search(instance, &s, Method::Hybrid, eps, None)?);
    }
    let best = candidates
        .into_iter()
        .max_by(|a, b| a.utility.total_cmp(&b.utility))
        .expect("candidates are nonempty");
    let mut diagnostics = report.inner_diagnostics;
    merge(&mut diagnostics, &exact.inner_diagnostics.iter().map(|(k, v)| (format!("exact_{k}"), *v)).collect());
    Ok(SolveReport {
        method: Method::Hybrid,
        delta0_final: best.delta0_final,
        utility: best.utility,
        bound_gap: best.bound_gap,
        strategy: best.strategy,
        bisect_iterations: heur.bisect_iterations + exact.bisect_iterations,
        milp_invoked: true,
        inner_diagnostics: diagnostics,
        warnings: report.warnings,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Runs `method` with the tolerances and solver settings of `opts`.
pub fn solve(instance: &GameInstance, method: Method, opts: &HybridOptions) -> Result<SolveReport> {
    match method {
        Method::Hybrid => hybrid_solve(instance, opts),
        Method::Heuristic => heuristic_solve(instance, opts.epsilon, opts.xi, &opts.pgd),
        Method::Milp => milp_solve(
            instance,
            opts.epsilon,
            opts.pieces,
            opts.solver_command.as_deref(),
            opts.solver_timeout,
        ),
        Method::ConvexOpt => crate::baselines::convex_opt(instance, opts.epsilon, opts.xi),
        Method::TwoSteps => crate::baselines::two_steps(instance, opts.epsilon, opts.xi),
        Method::Oracle => crate::oracle::oracle_report(instance),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::milp::solve_small_exact;
    use crate::model::{generate_instance, InstanceData, Overrides, FORMAT_VERSION};
    use crate::oracle::{brute_force_eqopt, OracleMethod};

    fn inst(seed: u64, n: usize) -> GameInstance {
        generate_instance(seed, n, &Overrides { n_partitions: Some(2), ..Default::default() }).unwrap()
    }

    fn exact_inner(g: &GameInstance) -> impl FnMut(f64) -> Result<InnerSolution> + '_ {
        |d| {
            let s = solve_small_exact(g, d)?;
            Ok(InnerSolution::new(s.strategy, s.objective))
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{m}\""));
        }
        assert!("simplex".parse::<Method>().is_err());
    }

    #[test]
    fn single_center_reaches_the_closed_form() {
        for (m, beta) in [(0.7, 0.4), (0.3, 0.9), (2.0, 5.0)] {
            let g = GameInstance::new(InstanceData {
                format_version: FORMAT_VERSION,
                n_centers: 1,
                lambda: 0.76,
                resources: m,
                max_centers: 1,
                min_centers: 1,
                partitions: vec![vec![0]],
                beta: vec![beta],
                reward_def: vec![5.0],
                loss_def: vec![-3.0],
                reward_att: vec![4.0],
                loss_att: vec![-2.0],
            })
            .unwrap();
            let x: f64 = 1f64.min(m).min(beta);
            let eps = 1e-4;
            let r = binary_search(&g, Method::Milp, eps, None, exact_inner(&g)).unwrap();
            assert!((r.delta0_final - (8.0 * x - 3.0)).abs() <= eps, "{} vs {}", r.delta0_final, 8.0 * x - 3.0);
        }
    }

    #[test]
    fn iteration_count_is_the_bisection_bound() {
        let g = inst(1, 6);
        let (lo, hi) = g.utility_bounds();
        for eps in [0.3, 1e-2, 1.7e-3, 1e-4] {
            let r = binary_search(&g, Method::Milp, eps, None, exact_inner(&g)).unwrap();
            let expect = ((hi - lo) / eps).log2().ceil() as usize;
            assert_eq!(r.bisect_iterations, expect, "eps {eps}");
        }
        // A bracket narrower than epsilon still solves once.
        let r = binary_search(&g, Method::Milp, 1.0, Some((0.0, 0.5)), exact_inner(&g)).unwrap();
        assert_eq!(r.bisect_iterations, 0);
        assert_eq!(r.delta0_final, 0.25);
    }

    #[test]
    fn exact_inner_matches_the_oracle() {
        for seed in 0..5 {
            let g = inst(seed, 6);
            let eps = 1e-3;
            let r = binary_search(&g, Method::Milp, eps, None, exact_inner(&g)).unwrap();
            let o = brute_force_eqopt(&g, OracleMethod::DualInner, None).unwrap();
            assert!((r.utility - o.best_utility).abs() <= eps + 1e-4, "seed {seed}: {} vs {}", r.utility, o.best_utility);
            assert!(r.strategy.is_feasible(&g, 1e-6));
            assert!(r.delta0_final + 2.0 * eps >= r.utility);
        }
    }

    #[test]
    fn exact_objective_decreases_in_delta0() {
        let g = inst(3, 7);
        let mut prev = f64::INFINITY;
        for i in 0..40 {
            let d = -8.0 + 0.4 * i as f64;
            let v = solve_small_exact(&g, d).unwrap().objective;
            assert!(v < prev, "delta0 {d}: {v} !< {prev}");
            prev = v;
        }
    }

    #[test]
    fn inner_failure_carries_context() {
        let g = inst(0, 6);
        let err = binary_search(&g, Method::Heuristic, 1e-2, None, |d| {
            if d > 0.0 { Err(QsgError::EmptyStrategy) } else { Ok(InnerSolution::new(Strategy::new(vec![0], vec![0.0]).unwrap(), 1.0)) }
        })
        .unwrap_err();
        assert!(matches!(err, QsgError::Bisection { .. }));
        assert!(err.to_string().contains("delta0"), "{err}");
        assert!(matches!(err.root_cause(), QsgError::EmptyStrategy));
    }

    #[test]
    fn tolerance_rules() {
        assert!(check_tolerances(1e-3, 1e-5).is_ok());
        assert!(matches!(check_tolerances(1e-3, 1e-4), Err(QsgError::Config(_))));
        assert!(matches!(check_tolerances(0.0, 1e-9), Err(QsgError::Config(_))));
        assert!(matches!(check_tolerances(1e-3, 0.0), Err(QsgError::Config(_))));
        let g = inst(0, 6);
        let opts = HybridOptions { xi: 1e-3, ..Default::default() };
        assert!(matches!(hybrid_solve(&g, &opts), Err(QsgError::Config(_))));
    }

    #[test]
    fn heuristic_reports_are_consistent() {
        for seed in 0..4 {
            let g = inst(seed, 12);
            let r = heuristic_solve(&g, 1e-3, 1e-5, &PgdParams::default()).unwrap();
            assert_eq!(r.method, Method::Heuristic);
            assert!(r.strategy.is_feasible(&g, 1e-6));
            assert!((defender_utility(&g, &r.strategy).unwrap() - r.utility).abs() < 1e-12);
            assert!((r.bound_gap - (r.delta0_final - r.utility).abs()).abs() < 1e-12);
            assert!(r.delta0_final + 2e-3 >= r.utility);
        }
    }

    #[test]
    fn hybrid_early_exit_skips_the_exact_leg() {
        let mut hit = false;
        for seed in 0..10 {
            let g = inst(seed, 10);
            let r = hybrid_solve(&g, &HybridOptions::default()).unwrap();
            if r.inner_diagnostics["heuristic_gap"] <= 1e-3 {
                assert!(!r.milp_invoked);
                assert_eq!(r.method, Method::Hybrid);
                hit = true;
            }
        }
        assert!(hit);
    }

    // Identical centers make every subset of one size tie.
    #[test]
    fn forced_exact_leg_on_a_tie_instance_never_loses() {
        let n = 6;
        let g = GameInstance::new(InstanceData {
            format_version: FORMAT_VERSION,
            n_centers: n,
            lambda: 0.76,
            resources: 0.6,
            max_centers: 4,
            min_centers: 3,
            partitions: vec![vec![0, 1, 2], vec![3, 4, 5]],
            beta: vec![0.6; 2],
            reward_def: vec![4.0; n],
            loss_def: vec![-2.0; n],
            reward_att: vec![5.0; n],
            loss_att: vec![-3.0; n],
        })
        .unwrap();
        let heur = heuristic_solve(&g, 1e-3, 1e-5, &PgdParams::default()).unwrap();
        let opts = HybridOptions { force_exact_leg: true, ..Default::default() };
        let r = hybrid_solve(&g, &opts).unwrap();
        assert!(r.milp_invoked);
        assert!(r.utility >= heur.utility - 1e-8);
        assert!(r.strategy.is_feasible(&g, 1e-6));
        let o = brute_force_eqopt(&g, OracleMethod::DualInner, None).unwrap();
        assert!(r.utility >= o.best_utility - 1e-3 - 1e-8);
    }

    #[test]
    fn hybrid_without_a_solver_warns_beyond_enumeration() {
        let g = inst(2, 20);
        let opts = HybridOptions { force_exact_leg: true, ..Default::default() };
        let r = hybrid_solve(&g, &opts).unwrap();
        assert!(!r.milp_invoked);
        assert_eq!(r.warnings.len(), 1);
        assert!(r.warnings[0].contains("no external MILP solver"));
    }

    #[test]
    fn milp_method_uses_the_grid_solver_then_needs_a_command() {
        let g = inst(5, 6);
        let r = milp_solve(&g, 1e-3, 20, None, Duration::from_secs(5)).unwrap();
        assert!(r.milp_invoked && r.strategy.is_feasible(&g, 1e-9));
        let o = brute_force_eqopt(&g, OracleMethod::DualInner, None).unwrap();
        assert!(r.utility <= o.best_utility + 1e-9);
        assert!(o.best_utility - r.utility < 0.05, "{} vs {}", r.utility, o.best_utility);
        let big = inst(5, 50);
        let err = milp_solve(&big, 1e-3, 20, None, Duration::from_secs(5)).unwrap_err();
        assert!(matches!(err, QsgError::Config(ref m) if m.contains("QSG_MILP_SOLVER")));
    }

    #[test]
    fn fixed_subset_search_rejects_bad_subsets() {
        let g = inst(0, 6);
        assert!(matches!(fixed_subset_search(&g, &[], Method::ConvexOpt, 1e-3, None), Err(QsgError::EmptyStrategy)));
        assert!(matches!(fixed_subset_search(&g, &[9], Method::ConvexOpt, 1e-3, None), Err(QsgError::InvalidIndex { .. })));
    }
}
