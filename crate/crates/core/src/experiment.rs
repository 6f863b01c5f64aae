//! Experiment harness: repeated solves on generated instances, written as CSV.
//!
//! Run `i` (over sizes, then budgets, then repetitions) uses seed
//! `seed_base + i`. Runs execute on the rayon pool and are collected in run
//! order, so every column except the timings is reproducible.
//!
//! Files written to `output_dir`:
//!
//! * `runs.csv`: one row per (run, method[, pieces][, variant]),
//! * `summary.csv`: means, standard errors and median times per group,
//! * `partitions.csv`: per-partition coverage totals (fairness only),
//! * `metadata.json`: the configuration and a hardware description.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QsgError, Result};
use crate::model::{apply_fairness_scenario, generate_instance, without_fsa, GameInstance, Overrides};
use crate::search::{solve, HybridOptions, Method, SolveReport, DEFAULT_EPSILON, DEFAULT_XI};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    PwlaConvergence,
    ExpectedReward,
    Scalability,
    Fairness,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::PwlaConvergence => "pwla_convergence",
            ExperimentKind::ExpectedReward => "expected_reward",
            ExperimentKind::Scalability => "scalability",
            ExperimentKind::Fairness => "fairness",
        }
    }

    pub fn default_sizes(self) -> Vec<usize> {
        match self {
            ExperimentKind::PwlaConvergence | ExperimentKind::Fairness => vec![20],
            ExperimentKind::ExpectedReward => (20..=200).step_by(20).collect(),
            ExperimentKind::Scalability => (50..=500).step_by(50).collect(),
        }
    }

    pub fn default_methods(self) -> Vec<Method> {
        match self {
            ExperimentKind::PwlaConvergence => vec![Method::Milp],
            ExperimentKind::ExpectedReward => {
                vec![Method::Hybrid, Method::Heuristic, Method::TwoSteps, Method::ConvexOpt]
            }
            ExperimentKind::Scalability => vec![Method::Heuristic, Method::Hybrid, Method::ConvexOpt],
            ExperimentKind::Fairness => vec![Method::Hybrid],
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = QsgError;

    fn from_str(s: &str) -> Result<Self> {
        [
            ExperimentKind::PwlaConvergence,
            ExperimentKind::ExpectedReward,
            ExperimentKind::Scalability,
            ExperimentKind::Fairness,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| QsgError::Config(format!("unknown experiment `{s}`")))
    }
}

fn default_repetitions() -> usize {
    10
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_xi() -> f64 {
    DEFAULT_XI
}
fn default_pieces() -> Vec<usize> {
    vec![5, 10, 15, 20, 25, 30]
}
fn default_reference_pieces() -> usize {
    200
}
fn default_timeout() -> f64 {
    600.0
}

/// Experiment settings; also the schema of a TOML config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Defaults per experiment when empty.
    #[serde(default)]
    pub sizes: Vec<usize>,
    /// Resource budgets to sweep; empty keeps `m = n/10`.
    #[serde(default)]
    pub budgets: Vec<f64>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed_base: u64,
    /// Defaults per experiment when empty. Ignored by `pwla_convergence`.
    #[serde(default)]
    pub methods: Vec<Method>,
    pub output_dir: PathBuf,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_xi")]
    pub xi: f64,
    /// Piece counts swept by `pwla_convergence`; the first entry is used
    /// by MILP solves elsewhere.
    #[serde(default = "default_pieces")]
    pub pieces: Vec<usize>,
    #[serde(default = "default_reference_pieces")]
    pub reference_pieces: usize,
    #[serde(default)]
    pub overrides: Overrides,
    #[serde(default)]
    pub solver_command: Option<String>,
    #[serde(default = "default_timeout")]
    pub solver_timeout_s: f64,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind, output_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            experiment,
            sizes: Vec::new(),
            budgets: Vec::new(),
            repetitions: default_repetitions(),
            seed_base: 0,
            methods: Vec::new(),
            output_dir: output_dir.into(),
            epsilon: DEFAULT_EPSILON,
            xi: DEFAULT_XI,
            pieces: default_pieces(),
            reference_pieces: default_reference_pieces(),
            overrides: Overrides::default(),
            solver_command: None,
            solver_timeout_s: default_timeout(),
        }
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| QsgError::Parse { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Fills empty lists with the experiment defaults and checks the rest.
    pub fn resolved(mut self) -> Result<Self> {
        if self.sizes.is_empty() {
            self.sizes = self.experiment.default_sizes();
        }
        if self.methods.is_empty() || self.experiment == ExperimentKind::PwlaConvergence {
            self.methods = self.experiment.default_methods();
        }
        if self.repetitions == 0 {
            return Err(QsgError::Config("repetitions must be at least 1".into()));
        }
        if self.sizes.contains(&0) {
            return Err(QsgError::Config("sizes must be positive".into()));
        }
        if self.budgets.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(QsgError::Config("budgets must be positive".into()));
        }
        if self.pieces.is_empty() || self.pieces.contains(&0) || self.reference_pieces == 0 {
            return Err(QsgError::Config("piece counts must be positive".into()));
        }
        if !(self.solver_timeout_s >= 0.0) {
            return Err(QsgError::Config("solver timeout must be nonnegative".into()));
        }
        crate::search::check_tolerances(self.epsilon, self.xi)?;
        Ok(self)
    }

    fn solve_options(&self, pieces: usize) -> HybridOptions {
        HybridOptions {
            epsilon: self.epsilon,
            xi: self.xi,
            pieces,
            solver_command: self.solver_command.clone(),
            solver_timeout: Duration::from_secs_f64(self.solver_timeout_s),
            ..Default::default()
        }
    }

    /// `(run_index, seed, n, budget)` for every run.
    pub fn runs(&self) -> Vec<(usize, u64, usize, Option<f64>)> {
        let budgets: Vec<Option<f64>> =
            if self.budgets.is_empty() { vec![None] } else { self.budgets.iter().copied().map(Some).collect() };
        let mut out = Vec::new();
        for &n in &self.sizes {
            for &b in &budgets {
                for _ in 0..self.repetitions {
                    let i = out.len();
                    out.push((i, self.seed_base + i as u64, n, b));
                }
            }
        }
        out
    }
}

/// One solve. Strategies are stored as `;`-separated lists so the utility
/// can be recomputed from the seed and the configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub run_index: usize,
    pub seed: u64,
    pub n: usize,
    pub m: f64,
    pub method: Method,
    pub pieces: Option<usize>,
    pub variant: Option<String>,
    pub utility: Option<f64>,
    pub delta0_final: Option<f64>,
    pub bound_gap: Option<f64>,
    /// Percentage gap of `delta0_final` to the reference piece count.
    pub pct_gap: Option<f64>,
    pub bisect_iterations: Option<usize>,
    pub tie_count: Option<f64>,
    pub milp_invoked: Option<bool>,
    pub wall_time_s: Option<f64>,
    pub subset: String,
    pub coverage: String,
    pub error: Option<String>,
}

impl RunRecord {
    fn new(cfg: &ExperimentConfig, run: usize, seed: u64, inst: &GameInstance, method: Method) -> Self {
        RunRecord::blank(cfg, run, seed, inst.n_centers(), inst.resources(), method)
    }

    fn blank(cfg: &ExperimentConfig, run: usize, seed: u64, n: usize, m: f64, method: Method) -> Self {
        RunRecord {
            experiment: cfg.experiment.name().into(),
            run_index: run,
            seed,
            n,
            m,
            method,
            pieces: None,
            variant: None,
            utility: None,
            delta0_final: None,
            bound_gap: None,
            pct_gap: None,
            bisect_iterations: None,
            tie_count: None,
            milp_invoked: None,
            wall_time_s: None,
            subset: String::new(),
            coverage: String::new(),
            error: None,
        }
    }

    fn fill(mut self, outcome: &Result<SolveReport>) -> Self {
        match outcome {
            Ok(r) => {
                self.utility = Some(r.utility);
                self.delta0_final = Some(r.delta0_final);
                self.bound_gap = Some(r.bound_gap);
                self.bisect_iterations = Some(r.bisect_iterations);
                self.tie_count = Some(r.inner_diagnostics.get("tie_points").copied().unwrap_or(0.0));
                self.milp_invoked = Some(r.milp_invoked);
                self.wall_time_s = Some(r.wall_time_s);
                self.subset = join(r.strategy.subset.iter());
                self.coverage = join(r.strategy.coverage.iter());
            }
            Err(e) => self.error = Some(e.to_string()),
        }
        self
    }
}

fn join<T: fmt::Display>(items: impl Iterator<Item = T>) -> String {
    items.map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

/// Coverage mass per partition in a fairness run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionRecord {
    pub run_index: usize,
    pub seed: u64,
    pub n: usize,
    pub method: Method,
    pub variant: String,
    pub partition: usize,
    pub allocation: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n: usize,
    pub m: f64,
    pub method: Method,
    pub pieces: Option<usize>,
    pub variant: Option<String>,
    pub runs: usize,
    pub failures: usize,
    pub mean_utility: f64,
    pub stderr_utility: f64,
    pub mean_pct_gap: Option<f64>,
    pub median_wall_time_s: f64,
    pub mean_wall_time_s: f64,
    pub stderr_wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentOutput {
    pub records: Vec<RunRecord>,
    pub partitions: Vec<PartitionRecord>,
}

fn instance_for(cfg: &ExperimentConfig, seed: u64, n: usize, budget: Option<f64>) -> Result<GameInstance> {
    let mut o = cfg.overrides.clone();
    if budget.is_some() {
        o.resources = budget;
    }
    // beta stays at its default 2m/L for the swept m
    generate_instance(seed, n, &o)
}

fn run_one(cfg: &ExperimentConfig, run: usize, seed: u64, n: usize, budget: Option<f64>) -> ExperimentOutput {
    let mut out = ExperimentOutput::default();
    let inst = match instance_for(cfg, seed, n, budget) {
        Ok(i) => i,
        Err(e) => {
            for &method in &cfg.methods {
                let mut rec = RunRecord::blank(cfg, run, seed, n, budget.unwrap_or(n as f64 / 10.0), method);
                rec.error = Some(e.to_string());
                out.records.push(rec);
            }
            return out;
        }
    };
    let default_pieces = cfg.pieces[0];
    match cfg.experiment {
        ExperimentKind::ExpectedReward | ExperimentKind::Scalability => {
            for &method in &cfg.methods {
                let r = solve(&inst, method, &cfg.solve_options(default_pieces));
                out.records.push(RunRecord::new(cfg, run, seed, &inst, method).fill(&r));
            }
        }
        ExperimentKind::PwlaConvergence => {
            let reference = solve(&inst, Method::Milp, &cfg.solve_options(cfg.reference_pieces));
            let ref_value = reference.as_ref().ok().map(|r| r.delta0_final);
            let mut rec = RunRecord::new(cfg, run, seed, &inst, Method::Milp).fill(&reference);
            rec.pieces = Some(cfg.reference_pieces);
            rec.pct_gap = ref_value.map(|_| 0.0);
            out.records.push(rec);
            for &k in &cfg.pieces {
                let r = solve(&inst, Method::Milp, &cfg.solve_options(k));
                let mut rec = RunRecord::new(cfg, run, seed, &inst, Method::Milp).fill(&r);
                rec.pieces = Some(k);
                if let (Some(v), Some(rv)) = (rec.delta0_final, ref_value) {
                    rec.pct_gap = Some(100.0 * (v - rv).abs() / rv.abs().max(1e-12));
                }
                out.records.push(rec);
            }
        }
        ExperimentKind::Fairness => {
            let scenario = apply_fairness_scenario(&inst);
            for (variant, game) in [("fsa", scenario.clone()), ("no_fsa", without_fsa(&scenario))] {
                for &method in &cfg.methods {
                    let r = solve(&game, method, &cfg.solve_options(default_pieces));
                    let mut rec = RunRecord::new(cfg, run, seed, &game, method).fill(&r);
                    rec.variant = Some(variant.into());
                    if let Ok(rep) = &r {
                        for (l, total) in rep.strategy.partition_totals(&game).into_iter().enumerate() {
                            out.partitions.push(PartitionRecord {
                                run_index: run,
                                seed,
                                n,
                                method,
                                variant: variant.into(),
                                partition: l,
                                allocation: total,
                                beta: game.beta(l),
                            });
                        }
                    }
                    out.records.push(rec);
                }
            }
        }
    }
    out
}

/// Runs every configured solve. Failures are recorded per row.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let cfg = config.clone().resolved()?;
    let parts: Vec<ExperimentOutput> =
        cfg.runs().into_par_iter().map(|(i, seed, n, b)| run_one(&cfg, i, seed, n, b)).collect();
    let mut out = ExperimentOutput::default();
    for p in parts {
        out.records.extend(p.records);
        out.partitions.extend(p.partitions);
    }
    Ok(out)
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 { v[k] } else { 0.5 * (v[k - 1] + v[k]) }
}

/// Groups records by `(n, m, method, pieces, variant)`.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    type Key = (usize, u64, Method, Option<usize>, Option<String>);
    let mut groups: BTreeMap<Key, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.n, r.m.to_bits(), r.method, r.pieces, r.variant.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((n, m, method, pieces, variant), rows)| {
            let ok: Vec<&&RunRecord> = rows.iter().filter(|r| r.error.is_none()).collect();
            let utils: Vec<f64> = ok.iter().filter_map(|r| r.utility).collect();
            let times: Vec<f64> = ok.iter().filter_map(|r| r.wall_time_s).collect();
            let gaps: Vec<f64> = ok.iter().filter_map(|r| r.pct_gap).collect();
            let (mean_utility, stderr_utility) = mean_stderr(&utils);
            let (mean_wall_time_s, stderr_wall_time_s) = mean_stderr(&times);
            SummaryRow {
                n,
                m: f64::from_bits(m),
                method,
                pieces,
                variant,
                runs: rows.len(),
                failures: rows.len() - ok.len(),
                mean_utility,
                stderr_utility,
                mean_pct_gap: (!gaps.is_empty()).then(|| mean_stderr(&gaps).0),
                median_wall_time_s: median(times),
                mean_wall_time_s,
                stderr_wall_time_s,
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Hardware description for the metadata file.
pub fn hardware_info() -> BTreeMap<&'static str, String> {
    let mut info = BTreeMap::new();
    info.insert("os", std::env::consts::OS.to_string());
    info.insert("arch", std::env::consts::ARCH.to_string());
    info.insert(
        "threads",
        std::thread::available_parallelism().map(|n| n.get().to_string()).unwrap_or_else(|_| "unknown".into()),
    );
    if let Ok(cpu) = fs::read_to_string("/proc/cpuinfo") {
        if let Some(model) = cpu.lines().find_map(|l| l.strip_prefix("model name").and_then(|r| r.split(':').nth(1))) {
            info.insert("cpu", model.trim().to_string());
        }
    }
    info
}

/// Writes the CSV files and `metadata.json`; returns the paths written.
pub fn write_outputs(config: &ExperimentConfig, output: &ExperimentOutput) -> Result<Vec<PathBuf>> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let runs = dir.join("runs.csv");
    write_csv(&runs, &output.records)?;
    written.push(runs);
    let summary = dir.join("summary.csv");
    write_csv(&summary, &summarize(&output.records))?;
    written.push(summary);
    if config.experiment == ExperimentKind::Fairness {
        let p = dir.join("partitions.csv");
        write_csv(&p, &output.partitions)?;
        written.push(p);
    }
    let meta = serde_json::json!({
        "config": config,
        "hardware": hardware_info(),
        "crate_version": env!("CARGO_PKG_VERSION"),
        "timing": "wall clock per solve; summary reports medians and means",
    });
    let path = dir.join("metadata.json");
    fs::write(&path, serde_json::to_string_pretty(&meta).expect("metadata serializes"))?;
    written.push(path);
    Ok(written)
}

/// Reads `runs.csv` back.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
