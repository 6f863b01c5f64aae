//! Comparison methods that do not optimize the center selection jointly.
//!
//! `convex_opt` operates every center and only optimizes coverage.
//! `two_steps` ranks centers by their defender payoff under that coverage,
//! keeps the best ones and re-optimizes coverage on them.

use std::time::Instant;

use crate::error::Result;
use crate::model::GameInstance;
use crate::search::{check_tolerances, fixed_subset_search, Method, SolveReport};

/// Coverage optimum with all centers operated. Cardinality limits are not
/// enforced; coverage constraints are.
pub fn convex_opt(instance: &GameInstance, epsilon: f64, xi: f64) -> Result<SolveReport> {
    check_tolerances(epsilon, xi)?;
    let all: Vec<usize> = (0..instance.n_centers()).collect();
    fixed_subset_search(instance, &all, Method::ConvexOpt, epsilon, None)
}

/// Selection rule of the second baseline given per-center scores.
///
/// Takes the `N_P` best scores, then further positive scores up to `C`. An
/// uncovered partition gets its best center in exchange for the lowest-scored
/// selected center whose partition keeps another member. Ties go to the lower
/// index. The result is sorted.
pub fn select_by_score(instance: &GameInstance, scores: &[f64]) -> Vec<usize> {
    let n = instance.n_centers();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut selected: Vec<usize> = order[..instance.min_centers()].to_vec();
    for &j in &order[instance.min_centers()..] {
        if selected.len() >= instance.max_centers() || scores[j] <= 0.0 {
            break;
        }
        selected.push(j);
    }

    let rank: Vec<usize> = {
        let mut r = vec![0; n];
        for (pos, &j) in order.iter().enumerate() {
            r[j] = pos;
        }
        r
    };
    for l in 0..instance.n_partitions() {
        if selected.iter().any(|&j| instance.partition_of(j) == l) {
            continue;
        }
        let Some(&incoming) = instance.partition(l).iter().min_by_key(|&&j| rank[j]) else {
            continue;
        };
        let mut counts = vec![0usize; instance.n_partitions()];
        for &j in &selected {
            counts[instance.partition_of(j)] += 1;
        }
        let outgoing = selected
            .iter()
            .enumerate()
            .filter(|&(_, &j)| counts[instance.partition_of(j)] > 1)
            .max_by_key(|&(_, &j)| rank[j])
            .map(|(pos, _)| pos);
        match outgoing {
            Some(pos) => selected[pos] = incoming,
            None => selected.push(incoming),
        }
    }
    selected.sort_unstable();
    selected
}

/// Rank by `w^d_j x_j + l^d_j` under the all-centers coverage, select, then
/// re-optimize coverage on the selection.
pub fn two_steps(instance: &GameInstance, epsilon: f64, xi: f64) -> Result<SolveReport> {
    let start = Instant::now();
    let first = convex_opt(instance, epsilon, xi)?;
    let mut scores = vec![0.0; instance.n_centers()];
    for (j, x) in first.strategy.iter() {
        scores[j] = instance.w_def(j) * x + instance.loss_def(j);
    }
    let selected = select_by_score(instance, &scores);
    let mut report = fixed_subset_search(instance, &selected, Method::TwoSteps, epsilon, None)?;
    report.bisect_iterations += first.bisect_iterations;
    report.inner_diagnostics.insert("first_stage_utility".into(), first.utility);
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}
