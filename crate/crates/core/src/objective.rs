//! Closed-form game quantities: the quantal-response attack distribution,
//! the defender's expected utility, the parametric (Dinkelbach) objective,
//! the log-coverage transform and the Lagrangian with its separable terms.

use crate::error::{QsgError, Result};
use crate::model::{GameInstance, Strategy};

/// Per-center constants used by every inner loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterCoef {
    /// `lambda * w^a_j`; zero means the attacker ignores coverage here.
    pub att_slope: f64,
    /// `lambda * r^a_j`, the log attack weight at zero coverage.
    pub log_weight0: f64,
    pub w_def: f64,
    pub loss_def: f64,
}

impl CenterCoef {
    pub fn new(instance: &GameInstance, j: usize) -> Self {
        let lambda = instance.lambda();
        CenterCoef {
            att_slope: lambda * instance.w_att(j),
            log_weight0: lambda * instance.reward_att(j),
            w_def: instance.w_def(j),
            loss_def: instance.loss_def(j),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.att_slope == 0.0
    }

    /// Attack weight `N(x) = exp(lambda (r^a - w^a x))`.
    #[inline]
    pub fn weight(&self, x: f64) -> f64 {
        (self.log_weight0 - self.att_slope * x).exp()
    }

    /// `N(x) (w^d x + l^d - delta0) - price * x`: one center's share of the
    /// Lagrangian written in coverage space.
    #[inline]
    pub fn value(&self, x: f64, price: f64, delta0: f64) -> f64 {
        self.weight(x) * (self.w_def * x + self.loss_def - delta0) - price * x
    }

    /// Derivative of [`CenterCoef::value`] in `x` at `x = 0` with zero price.
    /// Any price at or above this drives the optimal coverage to zero.
    pub fn zero_price_slope(&self, delta0: f64) -> f64 {
        self.weight(0.0) * (self.w_def - self.att_slope * (self.loss_def - delta0))
    }
}

pub fn coefficients(instance: &GameInstance) -> Vec<CenterCoef> {
    (0..instance.n_centers())
        .map(|j| CenterCoef::new(instance, j))
        .collect()
}

/// Attack probabilities over the operated centers.
#[derive(Debug, Clone, PartialEq)]
pub struct QrDistribution {
    pub probs: Vec<f64>,
    /// `log D`, the log of the softmax denominator.
    pub log_denominator: f64,
}

fn check_strategy(instance: &GameInstance, strategy: &Strategy) -> Result<()> {
    if strategy.is_empty() {
        return Err(QsgError::EmptyStrategy);
    }
    for &j in &strategy.subset {
        instance.check_index(j)?;
    }
    Ok(())
}

/// Quantal-response attack probabilities, computed with max-subtraction.
pub fn qr_probs(instance: &GameInstance, strategy: &Strategy) -> Result<QrDistribution> {
    check_strategy(instance, strategy)?;
    let lambda = instance.lambda();
    let logits: Vec<f64> = strategy
        .iter()
        .map(|(j, x)| lambda * (instance.reward_att(j) - instance.w_att(j) * x))
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    Ok(QrDistribution {
        probs,
        log_denominator: max + sum.ln(),
    })
}

/// Expected defender utility `F(S, x) = sum_j q_j (w^d_j x_j + l^d_j)`.
pub fn defender_utility(instance: &GameInstance, strategy: &Strategy) -> Result<f64> {
    let qr = qr_probs(instance, strategy)?;
    Ok(strategy
        .iter()
        .zip(&qr.probs)
        .map(|((j, x), q)| q * (instance.w_def(j) * x + instance.loss_def(j)))
        .sum())
}

/// `D(x) = sum_j N(x_j)`.
pub fn denominator(instance: &GameInstance, strategy: &Strategy) -> f64 {
    strategy
        .iter()
        .map(|(j, x)| CenterCoef::new(instance, j).weight(x))
        .sum()
}

/// `B = sum_j N(x_j)(w^d_j x_j + l^d_j) - delta0 D(x)`, which equals
/// `D (F - delta0)`.
pub fn bopt_value(instance: &GameInstance, strategy: &Strategy, delta0: f64) -> Result<f64> {
    check_strategy(instance, strategy)?;
    Ok(strategy
        .iter()
        .map(|(j, x)| CenterCoef::new(instance, j).value(x, 0.0, delta0))
        .sum())
}

fn transform_slope(instance: &GameInstance, j: usize) -> Result<f64> {
    instance.check_index(j)?;
    let a = instance.lambda() * instance.w_att(j);
    if a == 0.0 {
        return Err(QsgError::DegenerateTransform { center: j });
    }
    Ok(a)
}

/// `y = exp(-lambda w^a_j x)`.
pub fn to_y(instance: &GameInstance, j: usize, x: f64) -> Result<f64> {
    Ok((-transform_slope(instance, j)? * x).exp())
}

/// Inverse of [`to_y`].
pub fn from_y(instance: &GameInstance, j: usize, y: f64) -> Result<f64> {
    if !(y > 0.0) {
        return Err(QsgError::domain(format!("y must be positive, got {y}")));
    }
    Ok(-y.ln() / transform_slope(instance, j)?)
}

fn check_multipliers(nu: f64, mu: &[f64]) -> Result<()> {
    if nu < 0.0 || mu.iter().any(|&m| m < 0.0) {
        return Err(QsgError::domain("Lagrange multipliers must be nonnegative"));
    }
    Ok(())
}

/// One center's separable Lagrangian term in the transformed variable.
pub fn g_term(
    instance: &GameInstance,
    j: usize,
    nu: f64,
    mu_l: f64,
    y: f64,
    delta0: f64,
) -> Result<f64> {
    check_multipliers(nu, &[mu_l])?;
    let x = from_y(instance, j, y)?;
    Ok(CenterCoef::new(instance, j).value(x, nu + mu_l, delta0))
}

/// The Lagrangian of the transformed inner problem over subset `subset`.
/// `y[i]` belongs to `subset[i]`.
pub fn phi(
    instance: &GameInstance,
    subset: &[usize],
    nu: f64,
    mu: &[f64],
    y: &[f64],
    delta0: f64,
) -> Result<f64> {
    check_multipliers(nu, mu)?;
    if mu.len() != instance.n_partitions() || y.len() != subset.len() {
        return Err(QsgError::domain("phi: argument lengths do not match"));
    }
    let lambda = instance.lambda();
    let mut total = 0.0;
    let mut spent = 0.0;
    let mut spent_by_part = vec![0.0; mu.len()];
    for (&j, &yj) in subset.iter().zip(y) {
        let a = transform_slope(instance, j)?;
        if !(yj > 0.0) {
            return Err(QsgError::domain(format!("y must be positive, got {yj}")));
        }
        let neg_log = -yj.ln() / a;
        let weight = yj * (lambda * instance.reward_att(j)).exp();
        total += weight * (instance.w_def(j) * neg_log + instance.loss_def(j)) - delta0 * weight;
        spent += neg_log;
        spent_by_part[instance.partition_of(j)] += neg_log;
    }
    total -= nu * (spent - instance.resources());
    for (l, (&m, s)) in mu.iter().zip(spent_by_part).enumerate() {
        total -= m * (s - instance.beta(l));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Strategy;
    use crate::model::{generate_instance, InstanceData, Overrides, FORMAT_VERSION};
    use proptest::prelude::*;

    fn tiny(lambda: f64) -> GameInstance {
        GameInstance::new(InstanceData {
            format_version: FORMAT_VERSION,
            n_centers: 4,
            lambda,
            resources: 1.5,
            max_centers: 4,
            min_centers: 1,
            partitions: vec![vec![0, 1, 2, 3]],
            beta: vec![1.5],
            reward_def: vec![5.0, 3.0, 8.0, 2.0],
            loss_def: vec![-2.0, -6.0, -1.0, -3.0],
            reward_att: vec![4.0, 2.0, 6.0, 9.0],
            loss_att: vec![1.0, 1.0, -3.0, -1.0],
        })
        .unwrap()
    }

    #[test]
    fn uniform_when_lambda_zero() {
        let inst = tiny(0.0);
        let s = Strategy::new(vec![0, 1, 2, 3], vec![0.1, 0.9, 0.3, 0.0]).unwrap();
        let q = qr_probs(&inst, &s).unwrap();
        for p in q.probs {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_centers_split_evenly() {
        let mut d = tiny(0.76).into_data();
        d.reward_att[1] = d.reward_att[0];
        d.loss_att[1] = d.loss_att[0];
        let inst = GameInstance::new(d).unwrap();
        let s = Strategy::new(vec![0, 1], vec![0.4, 0.4]).unwrap();
        let q = qr_probs(&inst, &s).unwrap();
        assert!((q.probs[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_against_direct_evaluation() {
        // r^a = (4, 2), w^a = (3, 1), x = (0.5, 0.5), lambda = 0.76.
        // Logits 0.76*(4-1.5) = 1.9 and 0.76*(2-0.5) = 1.14, so
        // q_0 = 1 / (1 + exp(-0.76)) = 0.6813537337...
        let inst = tiny(0.76);
        let s = Strategy::new(vec![0, 1], vec![0.5, 0.5]).unwrap();
        let q = qr_probs(&inst, &s).unwrap();
        let expect = 1.0 / (1.0 + (-0.76f64).exp());
        assert!((q.probs[0] - expect).abs() < 1e-15);
        assert!((q.probs[0] - 0.681_353_733_789_025_6).abs() < 1e-14);
        assert!((q.log_denominator - (1.9f64.exp() + 1.14f64.exp()).ln()).abs() < 1e-14);
    }

    #[test]
    fn empty_strategy_rejected() {
        let inst = tiny(0.76);
        let s = Strategy::new(vec![], vec![]).unwrap();
        assert!(matches!(qr_probs(&inst, &s), Err(QsgError::EmptyStrategy)));
        assert!(matches!(defender_utility(&inst, &s), Err(QsgError::EmptyStrategy)));
    }

    #[test]
    fn singleton_utility_ignores_lambda() {
        for lambda in [0.0, 0.76, 5.0] {
            let inst = tiny(lambda);
            let s = Strategy::new(vec![2], vec![0.3]).unwrap();
            let u = defender_utility(&inst, &s).unwrap();
            assert!((u - (9.0 * 0.3 - 1.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_coverage_is_convex_combination_of_losses() {
        let inst = tiny(0.76);
        let s = Strategy::new(vec![0, 1, 3], vec![0.0; 3]).unwrap();
        let u = defender_utility(&inst, &s).unwrap();
        assert!((-6.0..=-2.0).contains(&u));
    }

    #[test]
    fn utility_is_quotient_of_bopt_pieces() {
        let inst = tiny(0.76);
        let s = Strategy::new(vec![0, 2, 3], vec![0.2, 0.5, 0.7]).unwrap();
        let num: f64 = s
            .iter()
            .map(|(j, x)| {
                let n = (0.76 * (inst.reward_att(j) - inst.w_att(j) * x)).exp();
                n * (inst.w_def(j) * x + inst.loss_def(j))
            })
            .sum();
        let den: f64 = s
            .iter()
            .map(|(j, x)| (0.76 * (inst.reward_att(j) - inst.w_att(j) * x)).exp())
            .sum();
        let u = defender_utility(&inst, &s).unwrap();
        assert!((u - num / den).abs() < 1e-13);
        let b = bopt_value(&inst, &s, u).unwrap();
        assert!(b.abs() < 1e-10);
        assert!(bopt_value(&inst, &s, u - 1.0).unwrap() > bopt_value(&inst, &s, u + 1.0).unwrap());
    }

    #[test]
    fn transform_boundaries_and_degenerate() {
        let inst = tiny(0.76);
        assert_eq!(to_y(&inst, 0, 0.0).unwrap(), 1.0);
        let a: f64 = 0.76 * 3.0;
        assert!((to_y(&inst, 0, 1.0).unwrap() - (-a).exp()).abs() < 1e-16);
        let flat = tiny(0.0);
        assert!(matches!(
            to_y(&flat, 1, 0.5),
            Err(QsgError::DegenerateTransform { center: 1 })
        ));
    }

    #[test]
    fn g_term_special_values() {
        let inst = tiny(0.76);
        let j = 2;
        let delta0 = 1.3;
        let g = g_term(&inst, j, 0.4, 0.2, 1.0, delta0).unwrap();
        let expect = (0.76 * inst.reward_att(j)).exp() * (inst.loss_def(j) - delta0);
        assert!((g - expect).abs() < 1e-12);

        let y = (-0.76 * inst.w_att(j)).exp();
        let g = g_term(&inst, j, 0.0, 0.0, y, delta0).unwrap();
        let expect = (0.76 * inst.loss_att(j)).exp() * (inst.w_def(j) + inst.loss_def(j) - delta0);
        assert!((g - expect).abs() < 1e-10 * expect.abs().max(1.0));

        assert!(g_term(&inst, j, -1.0, 0.0, 1.0, delta0).is_err());
    }

    fn strategy_and_y(inst: &GameInstance, xs: &[f64]) -> (Vec<usize>, Strategy, Vec<f64>) {
        let subset: Vec<usize> = (0..xs.len()).collect();
        let s = Strategy::new(subset.clone(), xs.to_vec()).unwrap();
        let y = subset.iter().zip(xs).map(|(&j, &x)| to_y(inst, j, x).unwrap()).collect();
        (subset, s, y)
    }

    proptest! {
        #[test]
        fn normalization_survives_extreme_logits(
            lambda in 0.0f64..50.0,
            ra in proptest::collection::vec(1.0f64..15.0, 1..12),
            xs in proptest::collection::vec(0.0f64..=1.0, 12),
        ) {
            let n = ra.len();
            let inst = GameInstance::new(InstanceData {
                format_version: FORMAT_VERSION,
                n_centers: n,
                lambda,
                resources: 1.0,
                max_centers: n,
                min_centers: 1,
                partitions: vec![(0..n).collect()],
                beta: vec![1.0],
                reward_def: vec![5.0; n],
                loss_def: vec![-5.0; n],
                reward_att: ra.clone(),
                loss_att: vec![-10.0; n],
            }).unwrap();
            let s = Strategy::new((0..n).collect(), xs[..n].to_vec()).unwrap();
            let q = qr_probs(&inst, &s).unwrap();
            let sum: f64 = q.probs.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(q.probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn bopt_is_denominator_times_gap(seed in 0u64..500, delta0 in -10.0f64..10.0,
                                          xs in proptest::collection::vec(0.0f64..=1.0, 6)) {
            let inst = generate_instance(seed, 6, &Overrides { n_partitions: Some(2), ..Default::default() }).unwrap();
            let s = Strategy::new((0..6).collect(), xs).unwrap();
            let b = bopt_value(&inst, &s, delta0).unwrap();
            let f = defender_utility(&inst, &s).unwrap();
            let d = denominator(&inst, &s);
            prop_assert!((b - d * (f - delta0)).abs() <= 1e-10 * d.max(1.0));
        }

        #[test]
        fn transform_round_trip(seed in 0u64..200, x in 0.0f64..=1.0) {
            let inst = generate_instance(seed, 6, &Overrides { n_partitions: Some(2), ..Default::default() }).unwrap();
            for j in 0..6 {
                let y = to_y(&inst, j, x).unwrap();
                prop_assert!((from_y(&inst, j, y).unwrap() - x).abs() <= 1e-12);
            }
        }

        #[test]
        fn lagrangian_identities(seed in 0u64..300, delta0 in -10.0f64..10.0,
                                 nu in 0.0f64..50.0, mu in proptest::collection::vec(0.0f64..50.0, 2),
                                 xs in proptest::collection::vec(0.0f64..=1.0, 6)) {
            let inst = generate_instance(seed, 6, &Overrides { n_partitions: Some(2), ..Default::default() }).unwrap();
            let (subset, s, y) = strategy_and_y(&inst, &xs);
            let b = bopt_value(&inst, &s, delta0).unwrap();
            let scale = b.abs().max(1.0);

            // multipliers at zero recover B
            let p0 = phi(&inst, &subset, 0.0, &[0.0, 0.0], &y, delta0).unwrap();
            prop_assert!((p0 - b).abs() <= 1e-10 * scale);

            // separable decomposition
            let p = phi(&inst, &subset, nu, &mu, &y, delta0).unwrap();
            let mut sum = nu * inst.resources();
            for l in 0..2 { sum += mu[l] * inst.beta(l); }
            for (&j, &yj) in subset.iter().zip(&y) {
                sum += g_term(&inst, j, nu, mu[inst.partition_of(j)], yj, delta0).unwrap();
            }
            prop_assert!((p - sum).abs() <= 1e-10 * p.abs().max(1.0));

            // on coverage-feasible points the Lagrangian bounds B from above
            if s.respects_coverage(&inst, 0.0) {
                prop_assert!(p >= b - 1e-10 * scale);
            }
        }
    }
}
