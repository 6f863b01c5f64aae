//! Game instances, strategies, random generation and the instance file format.
//!
//! An instance file is a TOML document:
//!
//! ```toml
//! format_version = 1
//! n_centers = 4
//! lambda = 0.76
//! resources = 0.4          # m
//! max_centers = 2          # C
//! min_centers = 2          # N_P
//! partitions = [[0, 1], [2, 3]]
//! beta = [0.4, 0.4]
//! reward_def = [3.0, 5.5, 1.2, 9.0]
//! loss_def = [-2.0, -7.5, -1.0, -4.0]
//! reward_att = [4.0, 2.0, 6.0, 8.5]
//! loss_att = [-3.0, -1.5, -9.0, -2.0]
//! ```
//!
//! Partition `l` lists the center indices of region `l`; `beta[l]` caps the
//! coverage mass placed on that region.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QsgError, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Raw instance fields, exactly as stored in an instance file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceData {
    pub format_version: u32,
    pub n_centers: usize,
    pub lambda: f64,
    /// Security resources `m`.
    pub resources: f64,
    /// Maximum number of operated centers `C`.
    pub max_centers: usize,
    /// Minimum number of operated centers `N_P`.
    pub min_centers: usize,
    pub partitions: Vec<Vec<usize>>,
    pub beta: Vec<f64>,
    pub reward_def: Vec<f64>,
    pub loss_def: Vec<f64>,
    pub reward_att: Vec<f64>,
    pub loss_att: Vec<f64>,
}

/// A validated game instance. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct GameInstance {
    data: InstanceData,
    partition_of: Vec<usize>,
}

impl GameInstance {
    pub fn new(data: InstanceData) -> Result<Self> {
        let partition_of = validate(&data)?;
        Ok(GameInstance { data, partition_of })
    }

    pub fn data(&self) -> &InstanceData {
        &self.data
    }

    pub fn into_data(self) -> InstanceData {
        self.data
    }

    pub fn n_centers(&self) -> usize {
        self.data.n_centers
    }

    pub fn lambda(&self) -> f64 {
        self.data.lambda
    }

    pub fn resources(&self) -> f64 {
        self.data.resources
    }

    pub fn max_centers(&self) -> usize {
        self.data.max_centers
    }

    pub fn min_centers(&self) -> usize {
        self.data.min_centers
    }

    pub fn n_partitions(&self) -> usize {
        self.data.partitions.len()
    }

    pub fn partitions(&self) -> &[Vec<usize>] {
        &self.data.partitions
    }

    pub fn partition(&self, l: usize) -> &[usize] {
        &self.data.partitions[l]
    }

    pub fn partition_of(&self, j: usize) -> usize {
        self.partition_of[j]
    }

    pub fn beta(&self, l: usize) -> f64 {
        self.data.beta[l]
    }

    pub fn betas(&self) -> &[f64] {
        &self.data.beta
    }

    pub fn reward_def(&self, j: usize) -> f64 {
        self.data.reward_def[j]
    }

    pub fn loss_def(&self, j: usize) -> f64 {
        self.data.loss_def[j]
    }

    pub fn reward_att(&self, j: usize) -> f64 {
        self.data.reward_att[j]
    }

    pub fn loss_att(&self, j: usize) -> f64 {
        self.data.loss_att[j]
    }

    /// `w^d_j = r^d_j - l^d_j`.
    pub fn w_def(&self, j: usize) -> f64 {
        self.data.reward_def[j] - self.data.loss_def[j]
    }

    /// `w^a_j = r^a_j - l^a_j`.
    pub fn w_att(&self, j: usize) -> f64 {
        self.data.reward_att[j] - self.data.loss_att[j]
    }

    /// Initial bisection bracket `[min_j l^d_j, max_j (w^d_j + l^d_j)]`.
    pub fn utility_bounds(&self) -> (f64, f64) {
        let lo = self.data.loss_def.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self
            .data
            .reward_def
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    pub fn check_index(&self, j: usize) -> Result<()> {
        if j >= self.n_centers() {
            return Err(QsgError::InvalidIndex {
                index: j,
                n_centers: self.n_centers(),
            });
        }
        Ok(())
    }
}

fn validate(d: &InstanceData) -> Result<Vec<usize>> {
    let v = |msg: String| Err(QsgError::Validation(msg));
    if d.format_version != FORMAT_VERSION {
        return v(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            d.format_version
        ));
    }
    let n = d.n_centers;
    if n == 0 {
        return v("n_centers must be positive".into());
    }
    for (name, arr) in [
        ("reward_def", &d.reward_def),
        ("loss_def", &d.loss_def),
        ("reward_att", &d.reward_att),
        ("loss_att", &d.loss_att),
    ] {
        if arr.len() != n {
            return v(format!("{name} has {} entries, expected {n}", arr.len()));
        }
        if let Some(j) = arr.iter().position(|x| !x.is_finite()) {
            return v(format!("{name}[{j}] is not finite"));
        }
    }
    for j in 0..n {
        if d.reward_def[j] <= d.loss_def[j] {
            return v(format!(
                "center {j}: reward_def {} must exceed loss_def {}",
                d.reward_def[j], d.loss_def[j]
            ));
        }
        if d.reward_att[j] <= d.loss_att[j] {
            return v(format!(
                "center {j}: reward_att {} must exceed loss_att {}",
                d.reward_att[j], d.loss_att[j]
            ));
        }
    }
    if !(d.lambda.is_finite() && d.lambda >= 0.0) {
        return v(format!("lambda must be finite and >= 0, got {}", d.lambda));
    }
    if !(d.resources.is_finite() && d.resources > 0.0) {
        return v(format!("resources must be finite and > 0, got {}", d.resources));
    }
    let l = d.partitions.len();
    if l == 0 {
        return v("at least one partition is required".into());
    }
    if d.beta.len() != l {
        return v(format!("beta has {} entries, expected {l}", d.beta.len()));
    }
    if let Some(i) = d.beta.iter().position(|b| !(b.is_finite() && *b >= 0.0)) {
        return v(format!("beta[{i}] must be finite and >= 0"));
    }
    let mut partition_of = vec![usize::MAX; n];
    for (p, members) in d.partitions.iter().enumerate() {
        if members.is_empty() {
            return v(format!("partition {p} is empty"));
        }
        for &j in members {
            if j >= n {
                return v(format!("partition {p} references center {j} >= n_centers {n}"));
            }
            if partition_of[j] != usize::MAX {
                return v(format!(
                    "center {j} appears in partitions {} and {p}; partitions overlap",
                    partition_of[j]
                ));
            }
            partition_of[j] = p;
        }
    }
    if let Some(j) = partition_of.iter().position(|&p| p == usize::MAX) {
        return v(format!("center {j} is not in any partition"));
    }
    if !(l <= d.min_centers && d.min_centers <= d.max_centers && d.max_centers <= n) {
        return v(format!(
            "need L <= N_P <= C <= n, got L={l}, N_P={}, C={}, n={n}",
            d.min_centers, d.max_centers
        ));
    }
    Ok(partition_of)
}

/// Contiguous, equal-size blocks; the first `n % l` blocks get one extra center.
pub fn contiguous_partitions(n: usize, l: usize) -> Vec<Vec<usize>> {
    let base = n / l;
    let extra = n % l;
    let mut start = 0;
    (0..l)
        .map(|p| {
            let len = base + usize::from(p < extra);
            let block: Vec<usize> = (start..start + len).collect();
            start += len;
            block
        })
        .collect()
}

/// Parameter overrides for [`generate_instance`]. `None` keeps the default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    pub lambda: Option<f64>,
    pub resources: Option<f64>,
    pub max_centers: Option<usize>,
    pub min_centers: Option<usize>,
    pub n_partitions: Option<usize>,
    /// Same cap for every partition.
    pub beta: Option<f64>,
}

impl Overrides {
    /// Parses `key=value` pairs (`lambda`, `m`, `C`, `N_P`, `L`, `beta`).
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut o = Overrides::default();
        for pair in pairs {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| QsgError::Config(format!("override `{pair}` is not key=value")))?;
            let bad = || QsgError::Config(format!("override `{pair}` has an invalid value"));
            match k.trim() {
                "lambda" => o.lambda = Some(v.trim().parse().map_err(|_| bad())?),
                "m" | "resources" => o.resources = Some(v.trim().parse().map_err(|_| bad())?),
                "C" | "max_centers" => o.max_centers = Some(v.trim().parse().map_err(|_| bad())?),
                "N_P" | "min_centers" => o.min_centers = Some(v.trim().parse().map_err(|_| bad())?),
                "L" | "n_partitions" => o.n_partitions = Some(v.trim().parse().map_err(|_| bad())?),
                "beta" => o.beta = Some(v.trim().parse().map_err(|_| bad())?),
                other => return Err(QsgError::Config(format!("unknown override key `{other}`"))),
            }
        }
        Ok(o)
    }
}

pub const DEFAULT_LAMBDA: f64 = 0.76;
pub const DEFAULT_PARTITIONS: usize = 5;

/// Draws a random instance.
///
/// Payoffs: rewards uniform on `[1, 10]`, losses uniform on `[-10, -1]`,
/// drawn per center in the order `r^d, l^d, r^a, l^a`. Defaults:
/// `lambda = 0.76`, `C = floor(2n/3)`, `N_P = floor(n/2)`, `m = n/10`,
/// `L = 5` contiguous partitions, `beta_l = 2m/L`.
///
/// The generator is ChaCha8 seeded with `seed_from_u64(seed)`, so instances
/// are reproducible bit for bit across platforms.
pub fn generate_instance(seed: u64, n_centers: usize, overrides: &Overrides) -> Result<GameInstance> {
    let l = overrides.n_partitions.unwrap_or(DEFAULT_PARTITIONS);
    if l == 0 || n_centers < l {
        return Err(QsgError::InvalidSize(format!(
            "need at least {l} centers for {l} partitions, got {n_centers}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reward_def = Vec::with_capacity(n_centers);
    let mut loss_def = Vec::with_capacity(n_centers);
    let mut reward_att = Vec::with_capacity(n_centers);
    let mut loss_att = Vec::with_capacity(n_centers);
    for _ in 0..n_centers {
        reward_def.push(rng.random_range(1.0..=10.0));
        loss_def.push(rng.random_range(-10.0..=-1.0));
        reward_att.push(rng.random_range(1.0..=10.0));
        loss_att.push(rng.random_range(-10.0..=-1.0));
    }
    let resources = overrides.resources.unwrap_or(n_centers as f64 / 10.0);
    let beta = overrides.beta.unwrap_or(2.0 * resources / l as f64);
    GameInstance::new(InstanceData {
        format_version: FORMAT_VERSION,
        n_centers,
        lambda: overrides.lambda.unwrap_or(DEFAULT_LAMBDA),
        resources,
        max_centers: overrides.max_centers.unwrap_or(2 * n_centers / 3),
        min_centers: overrides.min_centers.unwrap_or(n_centers / 2),
        partitions: contiguous_partitions(n_centers, l),
        beta: vec![beta; l],
        reward_def,
        loss_def,
        reward_att,
        loss_att,
    })
}

/// The fairness scenario: attacker reward on partition 0 raised by 5 and
/// every `beta_l` tightened to `1.2 m / L`. Not idempotent.
pub fn apply_fairness_scenario(instance: &GameInstance) -> GameInstance {
    let mut data = instance.data().clone();
    for &j in &instance.data.partitions[0] {
        data.reward_att[j] += 5.0;
    }
    let cap = 1.2 * data.resources / data.partitions.len() as f64;
    data.beta.iter_mut().for_each(|b| *b = cap);
    GameInstance::new(data).expect("fairness scenario preserves validity")
}

/// Same instance with the per-partition coverage caps made non-binding.
pub fn without_fsa(instance: &GameInstance) -> GameInstance {
    let mut data = instance.data().clone();
    let m = data.resources;
    data.beta.iter_mut().for_each(|b| *b = m);
    GameInstance::new(data).expect("relaxing caps preserves validity")
}

/// `N_P <= |S| <= C` and every partition intersects `S`.
pub fn feasible_subset(instance: &GameInstance, subset: &[usize]) -> Result<bool> {
    let mut seen = vec![false; instance.n_centers()];
    let mut covered = vec![false; instance.n_partitions()];
    let mut count = 0;
    for &j in subset {
        instance.check_index(j)?;
        if !seen[j] {
            seen[j] = true;
            count += 1;
            covered[instance.partition_of(j)] = true;
        }
    }
    Ok(instance.min_centers() <= count
        && count <= instance.max_centers()
        && covered.iter().all(|&c| c))
}

/// A subset of operated centers with their marginal coverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    /// Sorted, distinct center indices.
    pub subset: Vec<usize>,
    /// `coverage[i]` belongs to `subset[i]`.
    pub coverage: Vec<f64>,
}

impl Strategy {
    pub fn new(subset: Vec<usize>, coverage: Vec<f64>) -> Result<Self> {
        if subset.len() != coverage.len() {
            return Err(QsgError::domain("subset and coverage lengths differ"));
        }
        let mut pairs: Vec<(usize, f64)> = subset.into_iter().zip(coverage).collect();
        pairs.sort_by_key(|p| p.0);
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(QsgError::domain("subset contains duplicate centers"));
        }
        let (subset, coverage) = pairs.into_iter().unzip();
        Ok(Strategy { subset, coverage })
    }

    pub fn len(&self) -> usize {
        self.subset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subset.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.subset.iter().copied().zip(self.coverage.iter().copied())
    }

    pub fn total_coverage(&self) -> f64 {
        self.coverage.iter().sum()
    }

    /// Coverage mass per partition.
    pub fn partition_totals(&self, instance: &GameInstance) -> Vec<f64> {
        let mut totals = vec![0.0; instance.n_partitions()];
        for (j, x) in self.iter() {
            totals[instance.partition_of(j)] += x;
        }
        totals
    }

    /// Largest violation of the coverage box, budget and partition caps.
    pub fn coverage_violation(&self, instance: &GameInstance) -> f64 {
        let mut worst: f64 = 0.0;
        for &x in &self.coverage {
            worst = worst.max(-x).max(x - 1.0);
        }
        worst = worst.max(self.total_coverage() - instance.resources());
        for (l, t) in self.partition_totals(instance).into_iter().enumerate() {
            worst = worst.max(t - instance.beta(l));
        }
        worst
    }

    /// Coverage and subset constraints both hold within `tol`.
    pub fn is_feasible(&self, instance: &GameInstance, tol: f64) -> bool {
        feasible_subset(instance, &self.subset).unwrap_or(false)
            && self.coverage_violation(instance) <= tol
    }

    /// Coverage constraints only (cardinality and FVCA ignored).
    pub fn respects_coverage(&self, instance: &GameInstance, tol: f64) -> bool {
        self.subset.iter().all(|&j| j < instance.n_centers())
            && self.coverage_violation(instance) <= tol
    }
}

pub fn read_instance(path: impl AsRef<Path>) -> Result<GameInstance> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let data: InstanceData = toml::from_str(&text).map_err(|e| QsgError::Parse {
        path: path.to_path_buf(),
        message: describe_toml_error(&text, &e),
    })?;
    GameInstance::new(data)
}

fn describe_toml_error(text: &str, e: &toml::de::Error) -> String {
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!("line {line}: {}", e.message())
        }
        None => e.message().to_string(),
    }
}

pub fn instance_to_string(instance: &GameInstance) -> String {
    toml::to_string(instance.data()).expect("instance data always serializes")
}

pub fn write_instance(instance: &GameInstance, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, instance_to_string(instance))?;
    Ok(())
}

/// Human-readable parameter summary, used in reports and CSV metadata.
pub fn summary(instance: &GameInstance) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([
        ("n_centers", instance.n_centers() as f64),
        ("lambda", instance.lambda()),
        ("resources", instance.resources()),
        ("max_centers", instance.max_centers() as f64),
        ("min_centers", instance.min_centers() as f64),
        ("n_partitions", instance.n_partitions() as f64),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GameInstance {
        generate_instance(3, 6, &Overrides { n_partitions: Some(2), ..Default::default() }).unwrap()
    }

    #[test]
    fn defaults_at_twenty_centers() {
        let inst = generate_instance(1, 20, &Overrides::default()).unwrap();
        assert_eq!(inst.max_centers(), 13);
        assert_eq!(inst.min_centers(), 10);
        assert_eq!(inst.resources(), 2.0);
        assert_eq!(inst.n_partitions(), 5);
        for l in 0..5 {
            assert!((inst.beta(l) - 0.8).abs() < 1e-15);
            assert_eq!(inst.partition(l).len(), 4);
        }
        assert_eq!(inst.lambda(), 0.76);
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let a = generate_instance(1, 20, &Overrides::default()).unwrap();
        let b = generate_instance(1, 20, &Overrides::default()).unwrap();
        assert_eq!(a, b);
        let c = generate_instance(2, 20, &Overrides::default()).unwrap();
        assert_ne!(a, c);
        for j in 0..20 {
            assert!((1.0..=10.0).contains(&a.reward_def(j)));
            assert!((1.0..=10.0).contains(&a.reward_att(j)));
            assert!((-10.0..=-1.0).contains(&a.loss_def(j)));
            assert!((-10.0..=-1.0).contains(&a.loss_att(j)));
        }
    }

    #[test]
    fn lambda_override_passes_through() {
        let base = generate_instance(1, 20, &Overrides::default()).unwrap();
        let o = Overrides { lambda: Some(0.0), ..Default::default() };
        let inst = generate_instance(1, 20, &o).unwrap();
        assert_eq!(inst.lambda(), 0.0);
        let mut expect = base.data().clone();
        expect.lambda = 0.0;
        assert_eq!(inst.data(), &expect);
    }

    #[test]
    fn too_few_centers() {
        assert!(matches!(
            generate_instance(1, 4, &Overrides::default()),
            Err(QsgError::InvalidSize(_))
        ));
        // five centers with five partitions cannot satisfy L <= N_P = 2
        assert!(matches!(
            generate_instance(1, 5, &Overrides::default()),
            Err(QsgError::Validation(_))
        ));
    }

    #[test]
    fn remainder_goes_to_first_blocks() {
        let p = contiguous_partitions(7, 3);
        assert_eq!(p, vec![vec![0, 1, 2], vec![3, 4], vec![5, 6]]);
    }

    #[test]
    fn fairness_scenario() {
        let inst = generate_instance(1, 20, &Overrides::default()).unwrap();
        let f = apply_fairness_scenario(&inst);
        for &j in inst.partition(0) {
            assert!((f.reward_att(j) - inst.reward_att(j) - 5.0).abs() < 1e-12);
            assert!((6.0..=15.0).contains(&f.reward_att(j)));
        }
        for &j in inst.partition(1) {
            assert_eq!(f.reward_att(j), inst.reward_att(j));
        }
        for l in 0..5 {
            assert!((f.beta(l) - 0.48).abs() < 1e-12);
        }
        let twice = apply_fairness_scenario(&f);
        let j = inst.partition(0)[0];
        assert!((twice.reward_att(j) - inst.reward_att(j) - 10.0).abs() < 1e-12);

        let o = Overrides { resources: Some(5.0), ..Default::default() };
        let g = apply_fairness_scenario(&generate_instance(1, 20, &o).unwrap());
        assert!((g.beta(0) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn subset_feasibility() {
        let inst = small();
        // n=6, L=2, N_P=3, C=4
        assert!(feasible_subset(&inst, &[0, 1, 3]).unwrap());
        assert!(!feasible_subset(&inst, &[0, 3]).unwrap());
        assert!(!feasible_subset(&inst, &[0, 1, 2]).unwrap());
        assert!(!feasible_subset(&inst, &[0, 1, 2, 3, 4]).unwrap());
        assert!(matches!(
            feasible_subset(&inst, &[0, 9]),
            Err(QsgError::InvalidIndex { index: 9, .. })
        ));

        let mut d = inst.data().clone();
        d.max_centers = 6;
        let full = GameInstance::new(d).unwrap();
        assert!(feasible_subset(&full, &[0, 1, 2, 3, 4, 5]).unwrap());
    }

    #[test]
    fn validation_names_offending_center() {
        let mut d = small().into_data();
        d.loss_def[4] = d.reward_def[4];
        let err = GameInstance::new(d).unwrap_err().to_string();
        assert!(err.contains("center 4"), "{err}");

        let mut d = small().into_data();
        d.partitions[1].push(0);
        let err = GameInstance::new(d).unwrap_err().to_string();
        assert!(err.contains("overlap"), "{err}");

        let mut d = small().into_data();
        d.min_centers = 1;
        assert!(GameInstance::new(d).is_err());
    }

    #[test]
    fn file_round_trip_and_errors() {
        let inst = generate_instance(9, 20, &Overrides::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inst.toml");
        write_instance(&inst, &path).unwrap();
        assert_eq!(read_instance(&path).unwrap(), inst);

        let text = instance_to_string(&inst).replace("lambda = 0.76", "lambda = \"fast\"");
        fs::write(&path, text).unwrap();
        let err = read_instance(&path).unwrap_err().to_string();
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn strategy_normalizes_order() {
        let s = Strategy::new(vec![3, 1], vec![0.2, 0.7]).unwrap();
        assert_eq!(s.subset, vec![1, 3]);
        assert_eq!(s.coverage, vec![0.7, 0.2]);
        assert!(Strategy::new(vec![1, 1], vec![0.1, 0.1]).is_err());
    }
}
