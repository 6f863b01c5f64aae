//! The piecewise-linear MILP path.
//!
//! Each center's terms `N_j(x)` and `g_j(x) = N_j(x)(w^d x + l^d)` are
//! interpolated on `K` equal pieces of `[0, 1]`. Coverage is split as
//! `x_j = sum_k r_jk` with `r_jk` in `[0, 1/K]`, filled in order, which binary
//! `z_jk` enforce. Binary `t_j` marks operated centers.
//!
//! The model can be exported as an LP file for an external MILP solver or
//! solved internally on the `K`-grid by dynamic programming (small `n`).
//! [`solve_small_exact`] skips the approximation altogether.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dualheur::{fixed_duals_core, fixed_subset_core, pgd_core, PgdParams};
use crate::error::{QsgError, Result};
use crate::lp::{LinearProgram, Row, Sense, VarKind, Variable};
use crate::model::{GameInstance, Strategy};
use crate::objective::{coefficients, CenterCoef};

pub const DEFAULT_PIECES: usize = 20;
/// Largest instance [`solve_small_exact`] will enumerate.
pub const SMALL_EXACT_MAX: usize = 16;
/// Largest instance [`solve_pwla_grid`] accepts.
pub const GRID_SOLVER_MAX: usize = 24;
pub const SOLVER_ENV: &str = "QSG_MILP_SOLVER";

/// Which constraint system and objective scaling to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Formulation {
    /// Objective `sum_j t_j (g_j(0) - delta0 N_j(0)) + sum_jk (gamma^g - delta0 gamma^N) r_jk`,
    /// budget `sum r <= m`, and fill rows that force `r` to be a prefix:
    /// `r_j1 <= t_j / K`, `r_jk >= z_jk / K`, `r_j,k+1 <= z_jk / K`.
    #[default]
    Consistent,
    /// The commonly printed variant, kept for comparison: constant term
    /// `K t_j (g_j(0) - delta0 g_j(0))`, caps scaled by `K`, `t_j >= z_j1`
    /// and `r_jk <= z_j,k+1 / K`. Its fill rows admit only
    /// `x_j` in `[0, 1/K]` or `x_j = 1`.
    Printed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PwlaModel {
    pub pieces: usize,
    pub delta0: f64,
    pub formulation: Formulation,
    pub n_centers: usize,
    /// `gamma_n[j][k - 1]`, slope of `N_j` on piece `k`.
    pub gamma_n: Vec<Vec<f64>>,
    /// `gamma_g[j][k - 1]`, slope of `g_j` on piece `k`.
    pub gamma_g: Vec<Vec<f64>>,
    /// `g_j(0) - delta0 N_j(0)`.
    pub const_term: Vec<f64>,
    pub lp: LinearProgram,
    /// Rows tying `t`, `r` and `z` together.
    pub coupling_rows: usize,
}

fn g_fn(coef: &CenterCoef, x: f64) -> f64 {
    coef.weight(x) * (coef.w_def * x + coef.loss_def)
}

fn slopes(coef: &CenterCoef, k: usize) -> (Vec<f64>, Vec<f64>) {
    let kf = k as f64;
    (1..=k)
        .map(|p| {
            let (a, b) = ((p - 1) as f64 / kf, p as f64 / kf);
            (kf * (coef.weight(b) - coef.weight(a)), kf * (g_fn(coef, b) - g_fn(coef, a)))
        })
        .unzip()
}

/// Builds the consistent PWLA model.
pub fn build_pwla(instance: &GameInstance, delta0: f64, pieces: usize) -> Result<PwlaModel> {
    build_pwla_with(instance, delta0, pieces, Formulation::Consistent)
}

pub fn build_pwla_with(
    instance: &GameInstance,
    delta0: f64,
    pieces: usize,
    formulation: Formulation,
) -> Result<PwlaModel> {
    if pieces == 0 {
        return Err(QsgError::domain("the number of pieces K must be at least 1"));
    }
    let n = instance.n_centers();
    let k = pieces;
    let kf = k as f64;
    let coefs = coefficients(instance);
    let (gamma_n, gamma_g): (Vec<_>, Vec<_>) = coefs.iter().map(|c| slopes(c, k)).unzip();
    let const_term: Vec<f64> = coefs.iter().map(|c| g_fn(c, 0.0) - delta0 * c.weight(0.0)).collect();

    let t = |j: usize| j;
    let r = |j: usize, p: usize| n + j * k + (p - 1);
    let z = |j: usize, p: usize| n + n * k + j * k + (p - 1);

    let mut vars = Vec::with_capacity(n + 2 * n * k);
    for j in 0..n {
        vars.push(Variable { name: format!("t_{j}"), lower: 0.0, upper: 1.0, kind: VarKind::Binary });
    }
    for j in 0..n {
        for p in 1..=k {
            vars.push(Variable { name: format!("r_{j}_{p}"), lower: 0.0, upper: 1.0 / kf, kind: VarKind::Continuous });
        }
    }
    for j in 0..n {
        for p in 1..=k {
            vars.push(Variable { name: format!("z_{j}_{p}"), lower: 0.0, upper: 1.0, kind: VarKind::Binary });
        }
    }

    let mut objective = Vec::with_capacity(vars.len());
    for (j, coef) in coefs.iter().enumerate() {
        let c = match formulation {
            Formulation::Consistent => const_term[j],
            Formulation::Printed => kf * (g_fn(coef, 0.0) - delta0 * g_fn(coef, 0.0)),
        };
        objective.push((t(j), c));
    }
    for j in 0..n {
        for p in 1..=k {
            objective.push((r(j, p), gamma_g[j][p - 1] - delta0 * gamma_n[j][p - 1]));
        }
    }
    for j in 0..n {
        for p in 1..=k {
            objective.push((z(j, p), 0.0));
        }
    }

    let scale = match formulation {
        Formulation::Consistent => 1.0,
        Formulation::Printed => kf,
    };
    let mut rows = Vec::new();
    let all_r = |members: &mut dyn Iterator<Item = usize>| {
        members
            .flat_map(|j| (1..=k).map(move |p| (r(j, p), 1.0)))
            .collect::<Vec<_>>()
    };
    rows.push(Row {
        name: "budget".into(),
        terms: all_r(&mut (0..n)),
        sense: Sense::Le,
        rhs: scale * instance.resources(),
    });
    for (l, members) in instance.partitions().iter().enumerate() {
        rows.push(Row {
            name: format!("fsa_{l}"),
            terms: all_r(&mut members.iter().copied()),
            sense: Sense::Le,
            rhs: scale * instance.beta(l),
        });
    }
    let first = rows.len();
    for j in 0..n {
        rows.push(match formulation {
            Formulation::Consistent => Row {
                name: format!("link_{j}"),
                terms: vec![(r(j, 1), 1.0), (t(j), -1.0 / kf)],
                sense: Sense::Le,
                rhs: 0.0,
            },
            Formulation::Printed => Row {
                name: format!("link_{j}"),
                terms: vec![(t(j), 1.0), (z(j, 1), -1.0)],
                sense: Sense::Ge,
                rhs: 0.0,
            },
        });
    }
    for j in 0..n {
        for p in 1..k {
            rows.push(Row {
                name: format!("order_{j}_{p}"),
                terms: vec![(z(j, p), 1.0), (z(j, p + 1), -1.0)],
                sense: Sense::Ge,
                rhs: 0.0,
            });
        }
    }
    for j in 0..n {
        for p in 1..=k {
            rows.push(Row {
                name: format!("fill_{j}_{p}"),
                terms: vec![(r(j, p), 1.0), (z(j, p), -1.0 / kf)],
                sense: Sense::Ge,
                rhs: 0.0,
            });
        }
    }
    for j in 0..n {
        for p in 1..k {
            let terms = match formulation {
                Formulation::Consistent => vec![(r(j, p + 1), 1.0), (z(j, p), -1.0 / kf)],
                Formulation::Printed => vec![(r(j, p), 1.0), (z(j, p + 1), -1.0 / kf)],
            };
            rows.push(Row { name: format!("next_{j}_{p}"), terms, sense: Sense::Le, rhs: 0.0 });
        }
    }
    let coupling_rows = rows.len() - first;
    let all_t: Vec<(usize, f64)> = (0..n).map(|j| (t(j), 1.0)).collect();
    rows.push(Row {
        name: "card_min".into(),
        terms: all_t.clone(),
        sense: Sense::Ge,
        rhs: instance.min_centers() as f64,
    });
    rows.push(Row {
        name: "card_max".into(),
        terms: all_t,
        sense: Sense::Le,
        rhs: instance.max_centers() as f64,
    });
    for (l, members) in instance.partitions().iter().enumerate() {
        rows.push(Row {
            name: format!("fvca_{l}"),
            terms: members.iter().map(|&j| (t(j), 1.0)).collect(),
            sense: Sense::Ge,
            rhs: 1.0,
        });
    }

    Ok(PwlaModel {
        pieces,
        delta0,
        formulation,
        n_centers: n,
        gamma_n,
        gamma_g,
        const_term,
        lp: LinearProgram { maximize: true, vars, objective, rows },
        coupling_rows,
    })
}

impl PwlaModel {
    pub fn theta_var(&self, j: usize) -> usize {
        j
    }

    /// Index of `r_jk`, `k` starting at 1.
    pub fn r_var(&self, j: usize, k: usize) -> usize {
        self.n_centers + j * self.pieces + (k - 1)
    }

    /// Index of `z_jk`, `k` starting at 1.
    pub fn z_var(&self, j: usize, k: usize) -> usize {
        self.n_centers + self.n_centers * self.pieces + j * self.pieces + (k - 1)
    }

    /// Assignment representing `strategy` with pieces filled in order.
    pub fn encode(&self, strategy: &Strategy) -> Vec<f64> {
        let kf = self.pieces as f64;
        let mut v = vec![0.0; self.lp.vars.len()];
        for (j, x) in strategy.iter() {
            v[self.theta_var(j)] = 1.0;
            let full = ((x * kf + 1e-9).floor() as usize).min(self.pieces);
            for p in 1..=full {
                v[self.r_var(j, p)] = 1.0 / kf;
                v[self.z_var(j, p)] = 1.0;
            }
            if full < self.pieces {
                v[self.r_var(j, full + 1)] = (x - full as f64 / kf).max(0.0);
            }
        }
        v
    }

    /// Operated centers are those with `t_j > 1/2`; coverage is `sum_k r_jk`.
    pub fn decode(&self, values: &[f64]) -> Result<Strategy> {
        let mut subset = Vec::new();
        let mut coverage = Vec::new();
        for j in 0..self.n_centers {
            if values[self.theta_var(j)] > 0.5 {
                subset.push(j);
                let x: f64 = (1..=self.pieces).map(|p| values[self.r_var(j, p)]).sum();
                coverage.push(x.clamp(0.0, 1.0));
            }
        }
        if subset.is_empty() {
            return Err(QsgError::EmptyStrategy);
        }
        Strategy::new(subset, coverage)
    }

    pub fn objective_at(&self, values: &[f64]) -> f64 {
        self.lp.objective_value(values)
    }

    pub fn export_lp(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = String::new();
        writeln!(
            text,
            "\\ PWLA model: {} centers, K = {}, delta0 = {}, {:?} formulation",
            self.n_centers, self.pieces, self.delta0, self.formulation
        )
        .unwrap();
        text.push_str(&self.lp.to_lp_string());
        fs::write(path, text)?;
        Ok(())
    }
}

/// Assignment returned by an external solver, validated against the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalSolution {
    pub values: Vec<f64>,
    pub objective: f64,
    pub strategy: Strategy,
    pub status: Option<String>,
}

/// The solver command named by `QSG_MILP_SOLVER`, if set and nonempty.
pub fn solver_from_env() -> Option<String> {
    std::env::var(SOLVER_ENV).ok().filter(|s| !s.trim().is_empty())
}

fn find_executable(prog: &str) -> Option<PathBuf> {
    let p = Path::new(prog);
    if p.components().count() > 1 {
        return p.is_file().then(|| p.to_path_buf());
    }
    std::env::var_os("PATH").and_then(|paths| {
        std::env::split_paths(&paths)
            .map(|dir| dir.join(prog))
            .find(|c| c.is_file())
    })
}

fn log_tail(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap_or_default();
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(20)..].join("\n")
}

/// Runs `<solver_command> <model.lp> <solution.out>` and reads the solution.
///
/// The solution file holds one `name value` pair per line. Omitted variables
/// are zero. A `status <word>` line is optional; `status infeasible` maps to
/// [`QsgError::Infeasible`]. Lines starting with `#` are ignored, as is an
/// `objective <value>` line. Every row, bound and integrality condition is
/// checked to `1e-6` before the assignment is accepted.
pub fn solve_external(model: &PwlaModel, solver_command: &str, timeout: Duration) -> Result<ExternalSolution> {
    let mut parts = solver_command.split_whitespace();
    let prog = parts
        .next()
        .ok_or_else(|| QsgError::Config("empty MILP solver command".into()))?;
    let exe = find_executable(prog).ok_or_else(|| {
        QsgError::Config(format!(
            "MILP solver `{prog}` not found; pass --solver-cmd or set {SOLVER_ENV} to an executable \
             taking <model.lp> <solution.out>"
        ))
    })?;
    if timeout.is_zero() {
        return Err(QsgError::Timeout { seconds: 0.0, log: "time limit is zero; solver not started".into() });
    }

    let dir = tempfile::tempdir()?;
    let lp_path = dir.path().join("model.lp");
    let sol_path = dir.path().join("solution.out");
    let log_path = dir.path().join("solver.log");
    model.export_lp(&lp_path)?;
    let log = File::create(&log_path)?;
    let mut child = Command::new(&exe)
        .args(parts)
        .arg(&lp_path)
        .arg(&sol_path)
        .stdout(log.try_clone()?)
        .stderr(log)
        .spawn()
        .map_err(|e| QsgError::Config(format!("cannot start MILP solver `{}`: {e}", exe.display())))?;

    let start = Instant::now();
    let status: ExitStatus = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if start.elapsed() >= timeout {
            let _ = child.kill();
            let _ = child.wait();
            return Err(QsgError::Timeout { seconds: start.elapsed().as_secs_f64(), log: log_tail(&log_path) });
        }
        std::thread::sleep(Duration::from_millis(5));
    };

    let text = match fs::read_to_string(&sol_path) {
        Ok(t) => t,
        Err(_) => {
            return Err(QsgError::SolverOutput(format!(
                "solver exited with {status} and wrote no solution file; log: {}",
                log_tail(&log_path)
            )))
        }
    };
    let (status_word, values) = parse_solution(model, &text)?;
    if let Some((name, v)) = model.lp.first_violation(&values, 1e-6) {
        return Err(QsgError::SolverOutput(format!("returned assignment violates `{name}` by {v:e}")));
    }
    let strategy = model.decode(&values).map_err(|_| QsgError::SolverOutput("no center is operated".into()))?;
    Ok(ExternalSolution { objective: model.objective_at(&values), values, strategy, status: status_word })
}

fn parse_solution(model: &PwlaModel, text: &str) -> Result<(Option<String>, Vec<f64>)> {
    let index: std::collections::HashMap<&str, usize> = model
        .lp
        .vars
        .iter()
        .enumerate()
        .map(|(i, v)| (v.name.as_str(), i))
        .collect();
    let mut values = vec![0.0; model.lp.vars.len()];
    let mut status = None;
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let (Some(name), Some(val), None) = (toks.next(), toks.next(), toks.next()) else {
            return Err(QsgError::SolverOutput(format!("line {}: expected `name value`", no + 1)));
        };
        match name {
            "status" => {
                let word = val.to_ascii_lowercase();
                match word.as_str() {
                    "infeasible" => return Err(QsgError::Infeasible("external solver reports infeasible".into())),
                    "optimal" | "feasible" => status = Some(word),
                    other => return Err(QsgError::SolverOutput(format!("unsupported solver status `{other}`"))),
                }
            }
            "objective" => {}
            _ => {
                let i = *index
                    .get(name)
                    .ok_or_else(|| QsgError::SolverOutput(format!("line {}: unknown variable `{name}`", no + 1)))?;
                values[i] = val
                    .parse()
                    .map_err(|_| QsgError::SolverOutput(format!("line {}: bad value `{val}`", no + 1)))?;
            }
        }
    }
    Ok((status, values))
}

/// Optimum of the PWLA model found by [`solve_pwla_grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct PwlaGridSolution {
    pub strategy: Strategy,
    pub objective: f64,
}

const NEG: f64 = f64::NEG_INFINITY;
const FRAC_TOL: f64 = 1e-9;

/// Grid knapsack over one member list: `best[c][u]` is the best value of `c`
/// members using exactly `u` units of `1/K`.
struct GridTable {
    best: Vec<Vec<f64>>,
    /// `pick[i][c][u]`: units given to member `i`, or -1 when skipped.
    pick: Vec<Vec<Vec<i32>>>,
}

impl GridTable {
    fn build(values: &[Vec<f64>], members: &[usize], cm: usize, cap: usize, k: usize) -> Self {
        let mut best = vec![vec![NEG; cap + 1]; cm + 1];
        best[0][0] = 0.0;
        let mut pick = Vec::with_capacity(members.len());
        for &j in members {
            let mut next = best.clone();
            let mut choice = vec![vec![-1i32; cap + 1]; cm + 1];
            for c in 1..=cm {
                for u in 0..=cap {
                    for v in 0..=u.min(k) {
                        let prev = best[c - 1][u - v];
                        if prev == NEG {
                            continue;
                        }
                        let cand = prev + values[j][v];
                        if cand > next[c][u] {
                            next[c][u] = cand;
                            choice[c][u] = v as i32;
                        }
                    }
                }
            }
            best = next;
            pick.push(choice);
        }
        GridTable { best, pick }
    }

    fn get(&self, c: usize, u: usize) -> f64 {
        self.best.get(c).and_then(|row| row.get(u)).copied().unwrap_or(NEG)
    }

    fn trace(&self, members: &[usize], mut c: usize, mut u: usize, out: &mut Vec<(usize, f64)>) {
        for (i, &j) in members.iter().enumerate().rev() {
            let v = self.pick[i][c][u];
            if v >= 0 {
                out.push((j, v as f64));
                c -= 1;
                u -= v as usize;
            }
        }
    }
}

/// A member `i` sitting `v` units plus a fraction into its next piece.
#[derive(Debug, Clone, Copy)]
struct Interior {
    value: f64,
    slope: f64,
    i: usize,
    v: usize,
}

struct PartTables {
    members: Vec<usize>,
    cm: usize,
    /// Whole units available.
    cap: usize,
    /// `K beta_l`, or infinity when the cap cannot bind.
    cap_units: f64,
    /// Fractional part of `cap_units` when it binds.
    phi: f64,
    full: GridTable,
    /// Grid tables without member `i`.
    without: Vec<(Vec<usize>, GridTable)>,
    /// `tight[c]`: best with exactly `cap_units` used, one member off the grid.
    tight: Vec<Option<Interior>>,
    /// `free[c][u]`: candidates for the budget's off-grid member, `u` whole units
    /// in use; value `value + slope * tau` for the leftover fraction `tau`.
    free: Vec<Vec<Vec<Interior>>>,
}

impl PartTables {
    fn build(values: &[Vec<f64>], members: &[usize], cmax: usize, beta_units: f64, budget: f64, k: usize) -> Self {
        let reach = members.len() * k;
        let budget_floor = (budget + FRAC_TOL).floor() as usize;
        let (cap, cap_units, phi) = if beta_units >= (reach as f64).min(budget) - FRAC_TOL {
            (reach.min(budget_floor), f64::INFINITY, 0.0)
        } else {
            let cap = (beta_units + FRAC_TOL).floor() as usize;
            let phi = beta_units - cap as f64;
            (cap, beta_units, if phi > FRAC_TOL { phi } else { 0.0 })
        };
        let cm = members.len().min(cmax);
        let full = GridTable::build(values, members, cm, cap, k);
        let without: Vec<(Vec<usize>, GridTable)> = (0..members.len())
            .map(|i| {
                let rest: Vec<usize> = members.iter().enumerate().filter(|&(o, _)| o != i).map(|(_, &j)| j).collect();
                let t = GridTable::build(values, &rest, cm.saturating_sub(1), cap, k);
                (rest, t)
            })
            .collect();
        let interiors = |c: usize, u: usize| -> Vec<Interior> {
            let mut out = Vec::new();
            for (i, &j) in members.iter().enumerate() {
                for v in 0..=u.min(k - 1) {
                    let rest = without[i].1.get(c - 1, u - v);
                    if rest == NEG {
                        continue;
                    }
                    out.push(Interior { value: values[j][v] + rest, slope: values[j][v + 1] - values[j][v], i, v });
                }
            }
            out
        };
        let mut tight = vec![None; cm + 1];
        if phi > 0.0 {
            for (c, slot) in tight.iter_mut().enumerate().skip(1) {
                *slot = interiors(c, cap)
                    .into_iter()
                    .map(|it| Interior { value: it.value + phi * it.slope, ..it })
                    .max_by(|a, b| a.value.total_cmp(&b.value));
            }
        }
        let mut free = vec![vec![Vec::new(); cap + 1]; cm + 1];
        for (c, row) in free.iter_mut().enumerate().skip(1) {
            for (u, slot) in row.iter_mut().enumerate() {
                let mut cands: Vec<Interior> = interiors(c, u).into_iter().filter(|it| it.slope > 0.0).collect();
                // drop candidates beaten for every fraction in [0, 1]
                cands.sort_by(|a, b| b.value.total_cmp(&a.value).then(b.slope.total_cmp(&a.slope)));
                let mut best_slope = f64::NEG_INFINITY;
                cands.retain(|it| {
                    let keep = it.slope > best_slope;
                    best_slope = best_slope.max(it.slope);
                    keep
                });
                *slot = cands;
            }
        }
        PartTables { members: members.to_vec(), cm, cap, cap_units, phi, full, without, tight, free }
    }

    fn trace_interior(&self, it: &Interior, c: usize, u: usize, frac: f64, out: &mut Vec<(usize, f64)>) {
        out.push((self.members[it.i], it.v as f64 + frac));
        let (rest, table) = &self.without[it.i];
        table.trace(rest, c - 1, u - it.v, out);
    }
}

#[derive(Debug, Clone, Copy)]
enum Step {
    Start,
    Grid { cl: usize, ul: usize },
    Tight { cl: usize },
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    /// Off-grid units consumed so far.
    frac: f64,
    value: f64,
    parent: usize,
    step: Step,
}

/// `stage[c][u]`: Pareto list over (fewer off-grid units, higher value).
type Stage = Vec<Vec<Vec<Entry>>>;

fn insert(list: &mut Vec<Entry>, e: Entry) {
    if list.iter().any(|o| o.frac <= e.frac + 1e-12 && o.value >= e.value) {
        return;
    }
    list.retain(|o| !(e.frac <= o.frac + 1e-12 && e.value >= o.value));
    list.push(e);
}

fn extend(prev: &Stage, part: &PartTables, cmax: usize, budget: f64) -> Stage {
    let ucap = prev[0].len() - 1;
    let mut next: Stage = vec![vec![Vec::new(); ucap + 1]; cmax + 1];
    for (c, row) in prev.iter().enumerate() {
        for (u, list) in row.iter().enumerate() {
            for (idx, e) in list.iter().enumerate() {
                for cl in 1..=part.cm.min(cmax - c) {
                    for ul in 0..=part.cap.min(ucap - u) {
                        let g = part.full.best[cl][ul];
                        if g == NEG || (u + ul) as f64 + e.frac > budget + FRAC_TOL {
                            continue;
                        }
                        let step = Step::Grid { cl, ul };
                        insert(&mut next[c + cl][u + ul], Entry { frac: e.frac, value: e.value + g, parent: idx, step });
                    }
                    if let Some(t) = part.tight[cl] {
                        let (nu, nf) = (u + part.cap, e.frac + part.phi);
                        if nu <= ucap && nu as f64 + nf <= budget + FRAC_TOL {
                            let step = Step::Tight { cl };
                            insert(&mut next[c + cl][nu], Entry { frac: nf, value: e.value + t.value, parent: idx, step });
                        }
                    }
                }
            }
        }
    }
    next
}

/// Solves the consistent PWLA model exactly by dynamic programming.
///
/// For a fixed subset and fixed pieces the model is an LP over boxes and the
/// laminar caps (budget over partitions). At a vertex each partition holds at
/// most one member off the `1/K` grid, and so does the budget across the
/// partitions whose cap is slack. A partition's off-grid member is forced to
/// the fractional part of `K beta_l`, the budget's to whatever `K m` leaves,
/// so enumerating these cases over grid tables covers every vertex.
pub fn solve_pwla_grid(instance: &GameInstance, delta0: f64, pieces: usize) -> Result<PwlaGridSolution> {
    let n = instance.n_centers();
    if n > GRID_SOLVER_MAX {
        return Err(QsgError::SizeLimit {
            n,
            max: GRID_SOLVER_MAX,
            what: "the internal PWLA solver",
            hint: "export the model and use an external MILP solver",
        });
    }
    if pieces == 0 {
        return Err(QsgError::domain("the number of pieces K must be at least 1"));
    }
    let k = pieces;
    let kf = k as f64;
    let coefs = coefficients(instance);

    // value of each center at each grid point, accumulated from the slopes
    let values: Vec<Vec<f64>> = coefs
        .iter()
        .map(|c| {
            let (gn, gg) = slopes(c, k);
            let mut acc = g_fn(c, 0.0) - delta0 * c.weight(0.0);
            let mut out = vec![acc];
            for p in 0..k {
                acc += (gg[p] - delta0 * gn[p]) / kf;
                out.push(acc);
            }
            out
        })
        .collect();

    let budget = (instance.resources() * kf).min((n * k) as f64);
    let ucap = (budget + FRAC_TOL).floor() as usize;
    let (cmin, cmax) = (instance.min_centers(), instance.max_centers());
    let parts: Vec<PartTables> = instance
        .partitions()
        .iter()
        .enumerate()
        .map(|(l, members)| PartTables::build(&values, members, cmax, instance.beta(l) * kf, budget, k))
        .collect();

    let mut start: Stage = vec![vec![Vec::new(); ucap + 1]; cmax + 1];
    start[0][0].push(Entry { frac: 0.0, value: 0.0, parent: 0, step: Step::Start });
    let mut prefix = vec![start];
    for part in &parts {
        let next = extend(prefix.last().expect("nonempty"), part, cmax, budget);
        prefix.push(next);
    }

    #[derive(Clone, Copy)]
    struct Best {
        value: f64,
        c: usize,
        u: usize,
        idx: usize,
        /// Partition holding the budget's off-grid member, its share and the fraction.
        free: Option<(usize, usize, usize, Interior, f64)>,
    }
    let mut best: Option<Best> = None;
    let mut consider = |b: Best| {
        if best.is_none_or(|o| b.value > o.value) {
            best = Some(b);
        }
    };
    let last = prefix.last().expect("nonempty");
    for (c, row) in last.iter().enumerate().take(cmax + 1).skip(cmin) {
        for (u, list) in row.iter().enumerate() {
            for (idx, e) in list.iter().enumerate() {
                consider(Best { value: e.value, c, u, idx, free: None });
            }
        }
    }

    // the budget's off-grid member in partition `ls`; the rest run without it
    let mut suffixes: Vec<Vec<Stage>> = Vec::with_capacity(parts.len());
    for ls in 0..parts.len() {
        let mut own: Vec<Stage> = Vec::new();
        for part in &parts[ls + 1..] {
            let from = own.last().unwrap_or(&prefix[ls]);
            let next = extend(from, part, cmax, budget);
            own.push(next);
        }
        let end = own.last().unwrap_or(&prefix[ls]);
        let part = &parts[ls];
        for (c, row) in end.iter().enumerate() {
            for (u, list) in row.iter().enumerate() {
                for (idx, e) in list.iter().enumerate() {
                    let room = budget - u as f64 - e.frac;
                    if room < -FRAC_TOL {
                        continue;
                    }
                    let ul = (room + FRAC_TOL).floor() as usize;
                    let tau = (room - ul as f64).max(0.0);
                    if tau <= FRAC_TOL || ul > part.cap || ul as f64 + tau > part.cap_units + FRAC_TOL {
                        continue;
                    }
                    for cl in 1..=part.cm {
                        if c + cl < cmin || c + cl > cmax {
                            continue;
                        }
                        for it in &part.free[cl][ul] {
                            let value = e.value + it.value + it.slope * tau;
                            consider(Best { value, c, u, idx, free: Some((ls, cl, ul, *it, tau)) });
                        }
                    }
                }
            }
        }
        suffixes.push(own);
    }

    let Some(best) = best else {
        return Err(QsgError::Infeasible("no subset satisfies the cardinality and partition rows".into()));
    };

    // walk back through the stages that produced the winner
    let mut chain: Vec<(usize, &Stage)> = Vec::new();
    let upto = match best.free {
        None => parts.len(),
        Some((ls, ..)) => ls,
    };
    for (l, stage) in prefix.iter().enumerate().skip(1).take(upto) {
        chain.push((l - 1, stage));
    }
    if let Some((ls, ..)) = best.free {
        for (o, stage) in suffixes[ls].iter().enumerate() {
            chain.push((ls + 1 + o, stage));
        }
    }
    let mut units: Vec<(usize, f64)> = Vec::new();
    if let Some((ls, cl, ul, it, tau)) = best.free {
        parts[ls].trace_interior(&it, cl, ul, tau, &mut units);
    }
    let (mut c, mut u, mut idx) = (best.c, best.u, best.idx);
    for &(l, stage) in chain.iter().rev() {
        let e = stage[c][u][idx];
        let part = &parts[l];
        match e.step {
            Step::Grid { cl, ul } => {
                part.full.trace(&part.members, cl, ul, &mut units);
                c -= cl;
                u -= ul;
            }
            Step::Tight { cl } => {
                let it = part.tight[cl].expect("tight step recorded");
                part.trace_interior(&it, cl, part.cap, part.phi, &mut units);
                c -= cl;
                u -= part.cap;
            }
            Step::Start => unreachable!("start entries live in the first stage only"),
        }
        idx = e.parent;
    }
    units.sort_by_key(|&(j, _)| j);
    let (subset, coverage) = units.into_iter().map(|(j, x)| (j, (x / kf).min(1.0))).unzip();
    Ok(PwlaGridSolution { strategy: Strategy::new(subset, coverage)?, objective: best.value })
}

/// Exact optimum of the parametric problem for a small instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallExactSolution {
    pub strategy: Strategy,
    pub objective: f64,
    /// Feasible subsets enumerated.
    pub feasible_subsets: usize,
    /// Subsets solved exactly; the rest were pruned by a dual bound.
    pub subsets_solved: usize,
}

/// All subsets meeting the cardinality and partition-coverage rows, as bit masks.
pub fn feasible_masks(instance: &GameInstance) -> Vec<u32> {
    let n = instance.n_centers();
    assert!(n < 32, "mask enumeration needs n < 32");
    let part_masks: Vec<u32> = instance
        .partitions()
        .iter()
        .map(|m| m.iter().fold(0u32, |a, &j| a | 1 << j))
        .collect();
    (1u32..(1u32 << n))
        .filter(|&s| {
            let c = s.count_ones() as usize;
            instance.min_centers() <= c
                && c <= instance.max_centers()
                && part_masks.iter().all(|&p| s & p != 0)
        })
        .collect()
}

pub fn mask_members(mask: u32) -> Vec<usize> {
    (0..32).filter(|j| mask >> j & 1 == 1).collect()
}

/// Maximizes the parametric objective over all feasible subsets, solving each
/// subset's concave coverage problem exactly.
///
/// Subsets are visited in order of a Lagrangian upper bound and the search
/// stops once no remaining bound beats the incumbent.
pub fn solve_small_exact(instance: &GameInstance, delta0: f64) -> Result<SmallExactSolution> {
    let n = instance.n_centers();
    if n > SMALL_EXACT_MAX {
        return Err(QsgError::SizeLimit {
            n,
            max: SMALL_EXACT_MAX,
            what: "exact subset enumeration",
            hint: "use the MILP path with an external solver",
        });
    }
    let coefs = coefficients(instance);
    let warm = pgd_core(instance, &coefs, delta0, 1e-9, &PgdParams { max_iters: 200, ..Default::default() });
    let zero = fixed_duals_core(instance, &coefs, &crate::dualheur::DualPoint::zero(instance.n_partitions()), delta0);
    let offset = warm.dual.nu * instance.resources()
        + warm.dual.mu.iter().zip(instance.betas()).map(|(a, b)| a * b).sum::<f64>();

    let masks = feasible_masks(instance);
    let mut ranked: Vec<(f64, u32)> = masks
        .iter()
        .map(|&s| {
            let members = mask_members(s);
            let b0: f64 = members.iter().map(|&j| zero.h_scores[j]).sum();
            let b1: f64 = members.iter().map(|&j| warm.outcome.h_scores[j]).sum::<f64>() + offset;
            (b0.min(b1), s)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut best = (warm.primal_value, warm.primal.clone());
    let mut solved = 0;
    for chunk in ranked.chunks(64) {
        let slack = 1e-9 * best.0.abs().max(1.0);
        if chunk[0].0 <= best.0 + slack {
            break;
        }
        let results: Vec<(f64, Strategy)> = chunk
            .par_iter()
            .filter(|(bound, _)| *bound > best.0 + slack)
            .map(|&(_, s)| {
                let sol = fixed_subset_core(instance, &coefs, &mask_members(s), delta0);
                (sol.value, sol.strategy)
            })
            .collect();
        solved += results.len();
        for (v, s) in results {
            if v > best.0 {
                best = (v, s);
            }
        }
    }
    Ok(SmallExactSolution {
        objective: best.0,
        strategy: best.1,
        feasible_subsets: masks.len(),
        subsets_solved: solved,
    })
}
