//! Dual heuristic: for fixed multipliers the Lagrangian separates per center,
//! so the best subset is a sort away. Projected subgradient descent then
//! minimizes the resulting dual function over the multipliers.
//!
//! For a fixed subset the inner problem is concave after the log-coverage
//! transform and is solved exactly by [`solve_fixed_subset`].

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{QsgError, Result};
use crate::model::{GameInstance, Strategy};
use crate::numerics::optimal_coverage;
use crate::objective::{coefficients, CenterCoef};

/// Two sorted h-scores closer than this count as a tie.
pub const TIE_TOL: f64 = 1e-9;

/// Multipliers for the budget (`nu`) and the per-partition caps (`mu`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPoint {
    pub nu: f64,
    pub mu: Vec<f64>,
}

impl DualPoint {
    pub fn zero(n_partitions: usize) -> Self {
        DualPoint { nu: 0.0, mu: vec![0.0; n_partitions] }
    }

    /// Price faced by a center of partition `l`.
    #[inline]
    pub fn price(&self, l: usize) -> f64 {
        self.nu + self.mu[l]
    }

    fn check(&self, instance: &GameInstance) -> Result<()> {
        if self.mu.len() != instance.n_partitions() {
            return Err(QsgError::domain(format!(
                "dual point has {} partition multipliers, instance has {}",
                self.mu.len(),
                instance.n_partitions()
            )));
        }
        if !(self.nu >= 0.0) || self.mu.iter().any(|m| !(*m >= 0.0)) {
            return Err(QsgError::domain("Lagrange multipliers must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedDualsOutcome {
    /// Sorted selected centers.
    pub subset: Vec<usize>,
    /// Transformed optimum `exp(-lambda w^a x)` per member of `subset`.
    pub y_star: Vec<f64>,
    /// Optimal coverage per member of `subset`.
    pub x_star: Vec<f64>,
    /// `h_j` for every center.
    pub h_scores: Vec<f64>,
    /// Dual function value at this point.
    pub value: f64,
    pub tie_detected: bool,
    /// Comparisons made by the sort.
    pub comparisons: usize,
}

/// Best value of center `j`'s Lagrangian term at `dual`.
pub fn h_score(instance: &GameInstance, j: usize, dual: &DualPoint, delta0: f64) -> Result<f64> {
    instance.check_index(j)?;
    dual.check(instance)?;
    let coef = CenterCoef::new(instance, j);
    let price = dual.price(instance.partition_of(j));
    let r = optimal_coverage(&coef, price, delta0);
    Ok(coef.value(r.x_star, price, delta0))
}

/// Picks the subset maximizing the separable Lagrangian at fixed multipliers.
pub fn fixed_duals_solve(instance: &GameInstance, dual: &DualPoint, delta0: f64) -> Result<FixedDualsOutcome> {
    dual.check(instance)?;
    Ok(fixed_duals_core(instance, &coefficients(instance), dual, delta0))
}

pub(crate) fn fixed_duals_core(
    instance: &GameInstance,
    coefs: &[CenterCoef],
    dual: &DualPoint,
    delta0: f64,
) -> FixedDualsOutcome {
    let n = instance.n_centers();
    let mut x = Vec::with_capacity(n);
    let mut h = Vec::with_capacity(n);
    for (j, coef) in coefs.iter().enumerate() {
        let price = dual.price(instance.partition_of(j));
        let xj = optimal_coverage(coef, price, delta0).x_star;
        x.push(xj);
        h.push(coef.value(xj, price, delta0));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut comparisons = 0usize;
    order.sort_by(|&a, &b| {
        comparisons += 1;
        h[b].total_cmp(&h[a]).then(a.cmp(&b))
    });
    let tie_detected = order.windows(2).any(|w| (h[w[0]] - h[w[1]]).abs() <= TIE_TOL);

    let mut chosen = vec![false; n];
    let mut covered = vec![false; instance.n_partitions()];
    let mut count = 0;
    for &j in &order {
        let l = instance.partition_of(j);
        if !covered[l] {
            covered[l] = true;
            chosen[j] = true;
            count += 1;
        }
    }
    for &j in &order {
        if count >= instance.max_centers() {
            break;
        }
        if chosen[j] {
            continue;
        }
        if h[j] > 0.0 || count < instance.min_centers() {
            chosen[j] = true;
            count += 1;
        } else {
            break;
        }
    }

    let subset: Vec<usize> = (0..n).filter(|&j| chosen[j]).collect();
    let x_star: Vec<f64> = subset.iter().map(|&j| x[j]).collect();
    let y_star = subset
        .iter()
        .zip(&x_star)
        .map(|(&j, &xj)| (-coefs[j].att_slope * xj).exp())
        .collect();
    let value = subset.iter().map(|&j| h[j]).sum::<f64>()
        + dual.nu * instance.resources()
        + dual.mu.iter().zip(instance.betas()).map(|(m, b)| m * b).sum::<f64>();
    FixedDualsOutcome {
        subset,
        y_star,
        x_star,
        h_scores: h,
        value,
        tie_detected,
        comparisons,
    }
}

/// Gradient of the dual function at the point that produced `outcome`:
/// `(m - sum_S x*, beta_l - sum_{S in K_l} x*)`.
pub fn danskin_gradient(instance: &GameInstance, outcome: &FixedDualsOutcome) -> (f64, Vec<f64>) {
    let mut d_mu = instance.betas().to_vec();
    let mut d_nu = instance.resources();
    for (&j, &xj) in outcome.subset.iter().zip(&outcome.x_star) {
        d_nu -= xj;
        d_mu[instance.partition_of(j)] -= xj;
    }
    (d_nu, d_mu)
}

/// Exact optimum of the inner problem on a fixed subset.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedSubsetSolution {
    pub strategy: Strategy,
    /// Parametric objective at `strategy`.
    pub value: f64,
    /// Optimal multipliers.
    pub dual: DualPoint,
    /// Dual function of the subset at `dual`; matches `value` up to rounding.
    pub dual_value: f64,
}

/// Maximizes the parametric objective over coverage on the fixed `subset`,
/// subject to the budget and partition caps. Cardinality and partition
/// coverage of `subset` are not checked, so it also serves the all-centers
/// baseline.
///
/// Every center's optimal coverage falls as its price rises, so the optimum
/// is found by water-filling: each partition gets the smallest price that
/// meets its cap, then a common budget price is bisected on top.
pub fn solve_fixed_subset(instance: &GameInstance, subset: &[usize], delta0: f64) -> Result<FixedSubsetSolution> {
    if subset.is_empty() {
        return Err(QsgError::EmptyStrategy);
    }
    let mut seen = vec![false; instance.n_centers()];
    for &j in subset {
        instance.check_index(j)?;
        if std::mem::replace(&mut seen[j], true) {
            return Err(QsgError::domain(format!("center {j} listed twice")));
        }
    }
    let mut sorted = subset.to_vec();
    sorted.sort_unstable();
    Ok(fixed_subset_core(instance, &coefficients(instance), &sorted, delta0))
}

/// Bisects for the boundary of a nonincreasing step-like `demand`, returning
/// `(lo, hi)` with `demand(lo) > target >= demand(hi)`.
fn bisect_price(mut lo: f64, mut hi: f64, target: f64, demand: impl Fn(f64) -> f64) -> (f64, f64) {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= 1e-14 * hi {
            break;
        }
        if demand(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo, hi)
}

fn blend(lo: &[f64], hi: &[f64], target: f64) -> Vec<f64> {
    let s_lo: f64 = lo.iter().sum();
    let s_hi: f64 = hi.iter().sum();
    let t = if s_lo > s_hi { ((s_lo - target) / (s_lo - s_hi)).clamp(0.0, 1.0) } else { 1.0 };
    lo.iter().zip(hi).map(|(a, b)| a + t * (b - a)).collect()
}

struct Cap {
    /// Partition price bracket.
    lo: f64,
    hi: f64,
    /// Coverage of the members that exactly fills the cap.
    x: Vec<f64>,
}

pub(crate) fn fixed_subset_core(
    instance: &GameInstance,
    coefs: &[CenterCoef],
    subset: &[usize],
    delta0: f64,
) -> FixedSubsetSolution {
    let n_parts = instance.n_partitions();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_parts];
    for (i, &j) in subset.iter().enumerate() {
        members[instance.partition_of(j)].push(i);
    }
    let resp = |i: usize, price: f64| optimal_coverage(&coefs[subset[i]], price, delta0).x_star;
    let price_ceiling = |idx: &[usize]| {
        let s = idx
            .iter()
            .map(|&i| coefs[subset[i]].zero_price_slope(delta0))
            .fold(0.0, f64::max);
        s * (1.0 + 1e-9) + 1e-12
    };

    let caps: Vec<Option<Cap>> = members
        .iter()
        .enumerate()
        .map(|(l, idx)| {
            let beta = instance.beta(l);
            let demand = |c: f64| idx.iter().map(|&i| resp(i, c)).sum::<f64>();
            if idx.is_empty() || demand(0.0) <= beta {
                return None;
            }
            let (lo, hi) = bisect_price(0.0, price_ceiling(idx), beta, demand);
            let x_lo: Vec<f64> = idx.iter().map(|&i| resp(i, lo)).collect();
            let x_hi: Vec<f64> = idx.iter().map(|&i| resp(i, hi)).collect();
            Some(Cap { lo, hi, x: blend(&x_lo, &x_hi, beta) })
        })
        .collect();

    let coverage_at = |nu: f64| {
        let mut x = vec![0.0; subset.len()];
        for (idx, cap) in members.iter().zip(&caps) {
            match cap {
                Some(cap) if nu < cap.hi => {
                    for (&i, &xi) in idx.iter().zip(&cap.x) {
                        x[i] = xi;
                    }
                }
                _ => {
                    for &i in idx {
                        x[i] = resp(i, nu);
                    }
                }
            }
        }
        x
    };

    let m = instance.resources();
    let x0 = coverage_at(0.0);
    let (nu, mut x) = if x0.iter().sum::<f64>() <= m {
        (0.0, x0)
    } else {
        let all: Vec<usize> = (0..subset.len()).collect();
        let (lo, hi) = bisect_price(0.0, price_ceiling(&all), m, |nu| coverage_at(nu).iter().sum());
        (0.5 * (lo + hi), blend(&coverage_at(lo), &coverage_at(hi), m))
    };

    // rounding repair; never raises any coverage
    x.iter_mut().for_each(|xi| *xi = xi.clamp(0.0, 1.0));
    for (l, idx) in members.iter().enumerate() {
        let total: f64 = idx.iter().map(|&i| x[i]).sum();
        if total > instance.beta(l) {
            let s = instance.beta(l) / total;
            idx.iter().for_each(|&i| x[i] *= s);
        }
    }
    let total: f64 = x.iter().sum();
    if total > m {
        x.iter_mut().for_each(|xi| *xi *= m / total);
    }

    let mu: Vec<f64> = caps
        .iter()
        .map(|cap| match cap {
            Some(cap) => (0.5 * (cap.lo + cap.hi) - nu).max(0.0),
            None => 0.0,
        })
        .collect();
    let dual = DualPoint { nu, mu };
    let value = subset
        .iter()
        .zip(&x)
        .map(|(&j, &xj)| coefs[j].value(xj, 0.0, delta0))
        .sum();
    let dual_value = subset
        .iter()
        .map(|&j| {
            let price = dual.price(instance.partition_of(j));
            let xj = optimal_coverage(&coefs[j], price, delta0).x_star;
            coefs[j].value(xj, price, delta0)
        })
        .sum::<f64>()
        + nu * m
        + dual.mu.iter().zip(instance.betas()).map(|(a, b)| a * b).sum::<f64>();
    FixedSubsetSolution {
        strategy: Strategy { subset: subset.to_vec(), coverage: x },
        value,
        dual,
        dual_value,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepRule {
    /// `eta_t = eta0 / sqrt(t)`.
    Diminishing,
    /// Diminishing steps, halved while the dual value rises.
    Backtracking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgdParams {
    pub eta0: f64,
    pub max_iters: usize,
    pub step_rule: StepRule,
    /// Minimum number of iterations between two exact subset refinements.
    pub refine_every: usize,
    /// Subset hops allowed per refinement.
    pub max_hops: usize,
}

impl Default for PgdParams {
    fn default() -> Self {
        PgdParams {
            eta0: 1.0,
            max_iters: 5000,
            step_rule: StepRule::Diminishing,
            refine_every: 20,
            max_hops: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgdResult {
    /// Outcome at `dual`.
    pub outcome: FixedDualsOutcome,
    /// Multipliers with the lowest dual value seen.
    pub dual: DualPoint,
    /// Lowest dual value seen: an upper bound on the inner optimum.
    pub dual_value: f64,
    /// Best feasible strategy seen.
    pub primal: Strategy,
    /// Parametric objective of `primal`: a lower bound.
    pub primal_value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Dual points visited with tied h-scores.
    pub ties: usize,
    pub evaluations: usize,
}

impl PgdResult {
    pub fn gap(&self) -> f64 {
        self.dual_value - self.primal_value
    }
}

/// Scales coverage down until the partition caps and the budget hold.
pub fn repair_coverage(instance: &GameInstance, subset: &[usize], x: &mut [f64]) {
    x.iter_mut().for_each(|xi| *xi = xi.clamp(0.0, 1.0));
    let mut totals = vec![0.0; instance.n_partitions()];
    for (&j, &xj) in subset.iter().zip(x.iter()) {
        totals[instance.partition_of(j)] += xj;
    }
    for (&j, xj) in subset.iter().zip(x.iter_mut()) {
        let l = instance.partition_of(j);
        if totals[l] > instance.beta(l) {
            *xj *= instance.beta(l) / totals[l];
        }
    }
    let total: f64 = x.iter().sum();
    if total > instance.resources() {
        let s = instance.resources() / total;
        x.iter_mut().for_each(|xi| *xi *= s);
    }
}

struct PgdState<'a> {
    instance: &'a GameInstance,
    coefs: &'a [CenterCoef],
    delta0: f64,
    best_dual: DualPoint,
    best_out: FixedDualsOutcome,
    primal: Option<(Strategy, f64, f64)>,
    refined: HashSet<Vec<usize>>,
    ties: usize,
    evaluations: usize,
}

impl PgdState<'_> {
    fn evaluate(&mut self, dual: &DualPoint) -> FixedDualsOutcome {
        let out = fixed_duals_core(self.instance, self.coefs, dual, self.delta0);
        self.evaluations += 1;
        self.ties += usize::from(out.tie_detected);
        if out.value < self.best_out.value {
            self.best_out = out.clone();
            self.best_dual = dual.clone();
        }
        out
    }

    fn offer_primal(&mut self, strategy: Strategy, value: f64) {
        if self.primal.as_ref().is_none_or(|p| value > p.1) {
            let d = strategy
                .iter()
                .map(|(j, x)| self.coefs[j].weight(x))
                .sum::<f64>();
            self.primal = Some((strategy, value, d));
        }
    }

    fn offer_mapping(&mut self, out: &FixedDualsOutcome) {
        let mut x = out.x_star.clone();
        repair_coverage(self.instance, &out.subset, &mut x);
        let value = out
            .subset
            .iter()
            .zip(&x)
            .map(|(&j, &xj)| self.coefs[j].value(xj, 0.0, self.delta0))
            .sum();
        self.offer_primal(Strategy { subset: out.subset.clone(), coverage: x }, value);
    }

    /// Solves `subset` exactly, then re-evaluates the dual at its optimal
    /// multipliers, hopping to the subset chosen there if it differs.
    fn refine(&mut self, mut subset: Vec<usize>, max_hops: usize) {
        for _ in 0..=max_hops {
            if !self.refined.insert(subset.clone()) {
                return;
            }
            let sol = fixed_subset_core(self.instance, self.coefs, &subset, self.delta0);
            self.offer_primal(sol.strategy, sol.value);
            let out = self.evaluate(&sol.dual);
            if out.subset == subset {
                return;
            }
            subset = out.subset;
        }
    }

    fn gap_tolerance(&self, xi: f64) -> f64 {
        xi * self.primal.as_ref().map_or(1.0, |p| p.2)
    }

    fn gap(&self) -> f64 {
        self.best_out.value - self.primal.as_ref().map_or(f64::NEG_INFINITY, |p| p.1)
    }
}

/// Projected subgradient descent on the dual function, started at zero.
///
/// `xi` is a tolerance in utility units; it is scaled by the softmax
/// denominator of the best primal to compare against parametric values.
/// Stops when the certified gap between the best dual and best primal falls
/// below it, when the dual value moves by less than it between iterations,
/// or after `max_iters`.
pub fn pgd_solve(instance: &GameInstance, delta0: f64, xi: f64, params: &PgdParams) -> Result<PgdResult> {
    if !(xi > 0.0) {
        return Err(QsgError::domain(format!("xi must be positive, got {xi}")));
    }
    Ok(pgd_core(instance, &coefficients(instance), delta0, xi, params))
}

pub(crate) fn pgd_core(
    instance: &GameInstance,
    coefs: &[CenterCoef],
    delta0: f64,
    xi: f64,
    params: &PgdParams,
) -> PgdResult {
    let sigma = coefs
        .iter()
        .map(|c| c.zero_price_slope(delta0))
        .fold(1.0, f64::max);
    let mut dual = DualPoint::zero(instance.n_partitions());
    let first = fixed_duals_core(instance, coefs, &dual, delta0);
    let mut st = PgdState {
        instance,
        coefs,
        delta0,
        best_dual: dual.clone(),
        best_out: first.clone(),
        primal: None,
        refined: HashSet::new(),
        ties: usize::from(first.tie_detected),
        evaluations: 1,
    };
    st.offer_mapping(&first);
    st.refine(first.subset.clone(), params.max_hops);

    let mut out = first;
    if st.best_out.value < out.value {
        dual = st.best_dual.clone();
        out = st.best_out.clone();
    }
    let mut prev_value = out.value;
    let mut iterations = 0;
    let mut last_refine = 0;
    let mut step_scale = 1.0;
    let mut converged = false;
    loop {
        if st.gap() <= st.gap_tolerance(xi) {
            converged = true;
            break;
        }
        if iterations >= params.max_iters {
            break;
        }
        let (g_nu, g_mu) = danskin_gradient(instance, &out);
        let norm = (g_nu * g_nu + g_mu.iter().map(|g| g * g).sum::<f64>()).sqrt();
        if norm == 0.0 {
            converged = true;
            break;
        }
        iterations += 1;
        let step = |scale: f64| {
            let eta = scale * params.eta0 * sigma / (iterations as f64).sqrt() / norm;
            DualPoint {
                nu: (dual.nu - eta * g_nu).max(0.0),
                mu: dual.mu.iter().zip(&g_mu).map(|(m, g)| (m - eta * g).max(0.0)).collect(),
            }
        };
        let mut next = step(step_scale);
        let mut next_out = st.evaluate(&next);
        if params.step_rule == StepRule::Backtracking {
            let mut tries = 0;
            while next_out.value > out.value && tries < 30 {
                step_scale *= 0.5;
                next = step(step_scale);
                next_out = st.evaluate(&next);
                tries += 1;
            }
        }
        dual = next;
        out = next_out;
        st.offer_mapping(&out);

        let fresh = !st.refined.contains(&out.subset);
        if fresh && iterations - last_refine >= params.refine_every {
            last_refine = iterations;
            let before = st.best_out.value;
            st.refine(out.subset.clone(), params.max_hops);
            if st.best_out.value < before {
                dual = st.best_dual.clone();
                out = st.best_out.clone();
            }
        }

        if iterations >= 2 && (out.value - prev_value).abs() < st.gap_tolerance(xi) {
            converged = true;
            break;
        }
        prev_value = out.value;
    }

    let (primal, primal_value, _) = st.primal.expect("a primal candidate is always offered");
    PgdResult {
        dual_value: st.best_out.value,
        outcome: st.best_out,
        dual: st.best_dual,
        primal,
        primal_value,
        iterations,
        converged,
        ties: st.ties,
        evaluations: st.evaluations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{feasible_subset, generate_instance, InstanceData, Overrides, FORMAT_VERSION};
    use crate::numerics::{finite_diff_grad, maximize_unimodal};
    use crate::objective::{bopt_value, g_term};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(seed: u64, n: usize) -> GameInstance {
        generate_instance(seed, n, &Overrides { n_partitions: Some(2), ..Default::default() }).unwrap()
    }

    fn random_dual(rng: &mut ChaCha8Rng, l: usize, scale: f64) -> DualPoint {
        DualPoint {
            nu: rng.random_range(0.0..scale),
            mu: (0..l).map(|_| rng.random_range(0.0..scale)).collect(),
        }
    }

    fn all_subsets(inst: &GameInstance) -> Vec<Vec<usize>> {
        let n = inst.n_centers();
        (1u32..(1 << n))
            .map(|mask| (0..n).filter(|j| mask >> j & 1 == 1).collect::<Vec<_>>())
            .filter(|s| feasible_subset(inst, s).unwrap())
            .collect()
    }

    #[test]
    fn h_score_matches_scalar_search() {
        let inst = small(3, 8);
        let delta0 = inst.utility_bounds().1 + 1.0;
        let dual = DualPoint::zero(2);
        for j in 0..8 {
            let h = h_score(&inst, j, &dual, delta0).unwrap();
            let coef = CenterCoef::new(&inst, j);
            let (_, fx) = maximize_unimodal(|x| coef.value(x, 0.0, delta0), 0.0, 1.0, 1e-10).unwrap();
            assert!((h - fx).abs() < 1e-8 * fx.abs().max(1.0));
            let ylo = (-coef.att_slope).exp();
            for i in 0..=200 {
                let y = ylo + (1.0 - ylo) * i as f64 / 200.0;
                assert!(h >= g_term(&inst, j, 0.0, 0.0, y, delta0).unwrap() - 1e-9 * h.abs().max(1.0));
            }
        }
    }

    #[test]
    fn h_score_with_blind_attacker() {
        let inst = generate_instance(2, 10, &Overrides { lambda: Some(0.0), n_partitions: Some(2), ..Default::default() }).unwrap();
        let dual = DualPoint { nu: 1.0, mu: vec![0.0, 0.0] };
        for j in 0..10 {
            // linear term: best of x = 0 and x = 1
            let expect = (inst.loss_def(j)).max(inst.reward_def(j) - 1.0);
            assert!((h_score(&inst, j, &dual, 0.0).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_takes_everything_positive() {
        let inst = generate_instance(5, 10, &Overrides { max_centers: Some(10), n_partitions: Some(2), ..Default::default() }).unwrap();
        // far below every loss, every h is positive
        let out = fixed_duals_solve(&inst, &DualPoint::zero(2), -100.0).unwrap();
        assert!(out.h_scores.iter().all(|&h| h > 0.0));
        assert_eq!(out.subset, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn negative_scores_take_the_minimum() {
        let inst = small(6, 10);
        let out = fixed_duals_solve(&inst, &DualPoint::zero(2), 100.0).unwrap();
        assert!(out.h_scores.iter().all(|&h| h < 0.0));
        assert_eq!(out.subset.len(), inst.min_centers());
        assert!(feasible_subset(&inst, &out.subset).unwrap());
    }

    #[test]
    fn selection_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..60 {
            let inst = generate_instance(
                seed,
                6,
                &Overrides { n_partitions: Some(2), min_centers: Some(2), max_centers: Some(4), ..Default::default() },
            )
            .unwrap();
            let dual = random_dual(&mut rng, 2, 300.0);
            let delta0 = rng.random_range(-8.0..8.0);
            let out = fixed_duals_solve(&inst, &dual, delta0).unwrap();
            let score = |s: &[usize]| s.iter().map(|&j| out.h_scores[j]).sum::<f64>();
            let best = all_subsets(&inst).iter().map(|s| score(s)).fold(f64::NEG_INFINITY, f64::max);
            assert!((score(&out.subset) - best).abs() < 1e-9, "seed {seed}");
            let expect = best + dual.nu * inst.resources() + dual.mu.iter().zip(inst.betas()).map(|(a, b)| a * b).sum::<f64>();
            assert!((out.value - expect).abs() < 1e-10 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn sort_comparisons_stay_n_log_n() {
        for n in [50, 400, 3000] {
            let inst = generate_instance(1, n, &Overrides::default()).unwrap();
            let out = fixed_duals_solve(&inst, &DualPoint::zero(5), 0.0).unwrap();
            let bound = 2.0 * n as f64 * (n as f64).log2() + n as f64;
            assert!((out.comparisons as f64) <= bound, "n={n}: {}", out.comparisons);
        }
    }

    #[test]
    fn gradient_at_zero_coverage_is_the_caps() {
        let inst = small(8, 10);
        let out = fixed_duals_solve(&inst, &DualPoint { nu: 1e9, mu: vec![0.0; 2] }, 0.0).unwrap();
        assert!(out.y_star.iter().all(|&y| y == 1.0));
        let (g_nu, g_mu) = danskin_gradient(&inst, &out);
        assert_eq!(g_nu, inst.resources());
        assert_eq!(g_mu, inst.betas());
    }

    #[test]
    fn full_coverage_makes_budget_gradient_negative() {
        let inst = small(8, 10);
        // losses far below delta0: every center wants full coverage
        let out = fixed_duals_solve(&inst, &DualPoint::zero(2), 50.0).unwrap();
        assert!(out.x_star.iter().all(|&x| x == 1.0));
        let (g_nu, _) = danskin_gradient(&inst, &out);
        assert!((g_nu - (inst.resources() - out.subset.len() as f64)).abs() < 1e-12);
        assert!(g_nu < 0.0);
    }

    #[test]
    fn danskin_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        for seed in 0..40 {
            let inst = small(seed, 8);
            let coefs = coefficients(&inst);
            for _ in 0..5 {
                let dual = random_dual(&mut rng, 2, 200.0);
                let delta0 = rng.random_range(-6.0..6.0);
                let out = fixed_duals_core(&inst, &coefs, &dual, delta0);
                if out.tie_detected {
                    continue;
                }
                let f = |p: &[f64]| {
                    let d = DualPoint { nu: p[0], mu: p[1..].to_vec() };
                    fixed_duals_core(&inst, &coefs, &d, delta0).value
                };
                let point = [dual.nu, dual.mu[0], dual.mu[1]];
                // skip points where the selected subset changes within h
                let h = 1e-5;
                let stable = (0..3).all(|i| {
                    [h, -h].iter().all(|s| {
                        let mut p = point;
                        p[i] += s;
                        let d = DualPoint { nu: p[0], mu: p[1..].to_vec() };
                        fixed_duals_core(&inst, &coefs, &d, delta0).subset == out.subset
                    })
                });
                if !stable {
                    continue;
                }
                let fd = finite_diff_grad(f, &point, h);
                let (g_nu, g_mu) = danskin_gradient(&inst, &out);
                assert!((fd[0] - g_nu).abs() < 1e-4, "{} vs {g_nu}", fd[0]);
                assert!((fd[1] - g_mu[0]).abs() < 1e-4);
                assert!((fd[2] - g_mu[1]).abs() < 1e-4);
                checked += 1;
            }
        }
        assert!(checked > 150);
    }

    #[test]
    fn fixed_subset_singleton_takes_full_coverage() {
        let data = InstanceData {
            format_version: FORMAT_VERSION,
            n_centers: 1,
            lambda: 0.76,
            resources: 1.5,
            max_centers: 1,
            min_centers: 1,
            partitions: vec![vec![0]],
            beta: vec![1.0],
            reward_def: vec![6.0],
            loss_def: vec![-4.0],
            reward_att: vec![5.0],
            loss_att: vec![-2.0],
        };
        let inst = GameInstance::new(data).unwrap();
        let sol = solve_fixed_subset(&inst, &[0], 6.0).unwrap();
        assert!((sol.strategy.coverage[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn binding_budget_is_spent() {
        for seed in 0..20 {
            let inst = small(seed, 10);
            let s: Vec<usize> = (0..10).collect();
            let sol = solve_fixed_subset(&inst, &s, inst.utility_bounds().1).unwrap();
            let spent = sol.strategy.total_coverage();
            assert!(sol.strategy.respects_coverage(&inst, 1e-9));
            if sol.dual.nu > 1e-9 {
                assert!((spent - inst.resources()).abs() < 1e-6);
            }
            // strong duality on a fixed subset
            assert!((sol.dual_value - sol.value).abs() < 1e-6 * sol.value.abs().max(1.0), "seed {seed}");
        }
    }

    #[test]
    fn two_center_subset_matches_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..30 {
            let inst = small(seed, 6);
            let s = [rng.random_range(0..3), rng.random_range(3..6)];
            let delta0 = rng.random_range(-6.0..6.0);
            let sol = solve_fixed_subset(&inst, &s, delta0).unwrap();
            let eval = |x: [f64; 2]| {
                let st = Strategy::new(s.to_vec(), x.to_vec()).unwrap();
                if st.respects_coverage(&inst, 1e-12) {
                    bopt_value(&inst, &st, delta0).unwrap()
                } else {
                    f64::NEG_INFINITY
                }
            };
            // coarse grid, then a fine grid around the coarse winner
            let mut best = (f64::NEG_INFINITY, [0.0; 2]);
            let steps = 200;
            for a in 0..=steps {
                for b in 0..=steps {
                    let x = [a as f64 / steps as f64, b as f64 / steps as f64];
                    let v = eval(x);
                    if v > best.0 {
                        best = (v, x);
                    }
                }
            }
            let c = best.1;
            for a in 0..=400 {
                for b in 0..=400 {
                    let x = [
                        (c[0] + (a as f64 - 200.0) / 200.0 / steps as f64 * 2.0).clamp(0.0, 1.0),
                        (c[1] + (b as f64 - 200.0) / 200.0 / steps as f64 * 2.0).clamp(0.0, 1.0),
                    ];
                    best.0 = best.0.max(eval(x));
                }
            }
            let best = best.0;
            assert!(sol.value >= best - 1e-9 * best.abs().max(1.0), "seed {seed}");
            assert!(sol.value - best < 1e-6 * best.abs().max(1.0), "seed {seed}: {} vs {best}", sol.value);
        }
    }

    #[test]
    fn slack_instance_stops_at_zero() {
        let inst = generate_instance(
            4,
            6,
            &Overrides { resources: Some(6.0), beta: Some(6.0), n_partitions: Some(2), ..Default::default() },
        )
        .unwrap();
        let r = pgd_solve(&inst, 0.0, 1e-6, &PgdParams::default()).unwrap();
        assert!(r.converged);
        assert!(r.iterations <= 2);
        assert_eq!(r.dual, DualPoint::zero(2));
    }

    #[test]
    fn dual_function_is_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for seed in 0..50 {
            let inst = small(seed, 8);
            let a = random_dual(&mut rng, 2, 500.0);
            let b = random_dual(&mut rng, 2, 500.0);
            let mid = DualPoint {
                nu: 0.5 * (a.nu + b.nu),
                mu: a.mu.iter().zip(&b.mu).map(|(x, y)| 0.5 * (x + y)).collect(),
            };
            let delta0 = rng.random_range(-5.0..5.0);
            let f = |d: &DualPoint| fixed_duals_solve(&inst, d, delta0).unwrap().value;
            assert!(f(&mid) <= 0.5 * (f(&a) + f(&b)) + 1e-8);
        }
    }

    #[test]
    fn pgd_bounds_bracket_the_exhaustive_optimum() {
        for seed in 0..25 {
            let inst = small(seed, 7);
            let delta0 = -2.0;
            for rule in [StepRule::Diminishing, StepRule::Backtracking] {
                let params = PgdParams { step_rule: rule, ..Default::default() };
                let r = pgd_solve(&inst, delta0, 1e-7, &params).unwrap();
                let best = all_subsets(&inst)
                    .iter()
                    .map(|s| solve_fixed_subset(&inst, s, delta0).unwrap().value)
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(r.dual_value >= best - 1e-6, "weak duality, seed {seed}");
                assert!(r.primal_value <= best + 1e-6);
                assert!(r.primal.is_feasible(&inst, 1e-6));
                assert!(feasible_subset(&inst, &r.primal.subset).unwrap());
                assert!(r.outcome.value == r.dual_value);
            }
        }
    }

    #[test]
    fn best_value_never_rises_with_more_iterations() {
        let inst = small(2, 12);
        let mut last = f64::INFINITY;
        for iters in [0, 1, 5, 20, 100] {
            let params = PgdParams { max_iters: iters, ..Default::default() };
            let r = pgd_solve(&inst, 0.5, 1e-12, &params).unwrap();
            assert!(r.dual_value <= last + 1e-12);
            last = r.dual_value;
        }
    }

    #[test]
    fn bad_inputs() {
        let inst = small(1, 6);
        assert!(pgd_solve(&inst, 0.0, 0.0, &PgdParams::default()).is_err());
        assert!(fixed_duals_solve(&inst, &DualPoint { nu: -1.0, mu: vec![0.0; 2] }, 0.0).is_err());
        assert!(fixed_duals_solve(&inst, &DualPoint::zero(3), 0.0).is_err());
        assert!(matches!(solve_fixed_subset(&inst, &[], 0.0), Err(QsgError::EmptyStrategy)));
        assert!(solve_fixed_subset(&inst, &[1, 1], 0.0).is_err());
    }
}
