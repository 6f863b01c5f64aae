//! Scalar kernels: the principal Lambert W branch, the closed-form optimal
//! coverage of a single center at fixed prices, golden-section search and
//! central finite differences.

use crate::error::{QsgError, Result};
use crate::model::GameInstance;
use crate::objective::CenterCoef;

const MAX_HALLEY_ITERS: usize = 50;

/// Principal branch `W_0(z)` for `z >= 0`: the `w >= 0` with `w e^w = z`.
pub fn lambert_w0(z: f64) -> Result<f64> {
    if z.is_nan() || z < 0.0 {
        return Err(QsgError::domain(format!("lambert_w0 needs z >= 0, got {z}")));
    }
    if z == 0.0 {
        return Ok(0.0);
    }
    if z.is_infinite() {
        return Ok(f64::INFINITY);
    }
    if z > std::f64::consts::E {
        return Ok(lambert_w0_of_exp(z.ln()));
    }
    // Winitzki's approximation is within a few percent on [0, e].
    let l1 = z.ln_1p();
    let mut w = l1 * (1.0 - (1.0 + l1).ln() / (2.0 + l1));
    for _ in 0..MAX_HALLEY_ITERS {
        let ew = w.exp();
        let f = w * ew - z;
        let wp1 = w + 1.0;
        let step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1));
        w -= step;
        if step.abs() <= 4.0 * f64::EPSILON * w.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(w)
}

/// `W_0(e^t)`, stable for arguments whose exponential overflows.
///
/// For `t > 1` it solves `w + ln w = t` by Halley's method.
pub fn lambert_w0_of_exp(t: f64) -> f64 {
    if t == f64::NEG_INFINITY {
        return 0.0;
    }
    if t.is_nan() {
        return f64::NAN;
    }
    if t == f64::INFINITY {
        return f64::INFINITY;
    }
    if t <= 1.0 {
        return lambert_w0(t.exp()).expect("exp is nonnegative");
    }
    let mut w = if t < 3.0 { 0.5 + 0.5 * t } else { t - t.ln() + t.ln() / t };
    for _ in 0..MAX_HALLEY_ITERS {
        let f = w + w.ln() - t;
        let d1 = 1.0 + 1.0 / w;
        let d2 = -1.0 / (w * w);
        let step = f / (d1 - 0.5 * f * d2 / d1);
        w -= step;
        if step.abs() <= 4.0 * f64::EPSILON * w {
            break;
        }
    }
    w
}

/// Where the unclamped optimum fell relative to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Clamp {
    Lower,
    Interior,
    Upper,
}

/// Maximizer of one center's Lagrangian term over its coverage box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormResult {
    pub y_star: f64,
    pub x_star: f64,
    /// The stationary point before clamping. Infinite on the degenerate
    /// paths, where the term is monotone in coverage.
    pub beta_interior: f64,
    pub clamped: Clamp,
}

impl ClosedFormResult {
    fn from_interior(coef: &CenterCoef, beta: f64) -> Self {
        let (x_star, clamped) = if beta <= 0.0 {
            (0.0, Clamp::Lower)
        } else if beta >= 1.0 {
            (1.0, Clamp::Upper)
        } else {
            (beta, Clamp::Interior)
        };
        ClosedFormResult {
            y_star: (-coef.att_slope * x_star).exp(),
            x_star,
            beta_interior: beta,
            clamped,
        }
    }
}

/// Optimal coverage of a center facing price `price = nu + mu_l`.
///
/// The term `N(x)(w^d x + l^d - delta0) - price x` is unimodal in `x`; its
/// stationary point is
/// `(1 - k - W(price / w^d * exp(1 - lambda r^a - k))) / (lambda w^a)` with
/// `k = (lambda w^a / w^d)(l^d - delta0)`, clamped to `[0, 1]`.
///
/// When `lambda w^a = 0` the term is linear and the optimum sits on whichever
/// bound its slope favors. When `w^d = 0` the term is
/// `N(x)(l^d - delta0) - price x`, solved directly.
pub fn optimal_coverage(coef: &CenterCoef, price: f64, delta0: f64) -> ClosedFormResult {
    let a = coef.att_slope;
    if a == 0.0 {
        let slope = coef.weight(0.0) * coef.w_def - price;
        let beta = if slope > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
        return ClosedFormResult::from_interior(coef, beta);
    }
    if coef.w_def == 0.0 {
        let gap = delta0 - coef.loss_def;
        let beta = if gap <= 0.0 {
            f64::NEG_INFINITY
        } else if price == 0.0 {
            f64::INFINITY
        } else {
            // N'(x)(l^d - delta0) = price  =>  a e^{lambda r^a - a x} gap = price
            ((a * gap).ln() + coef.log_weight0 - price.ln()) / a
        };
        return ClosedFormResult::from_interior(coef, beta);
    }
    let k = a / coef.w_def * (coef.loss_def - delta0);
    let w = if price == 0.0 {
        0.0
    } else {
        lambert_w0_of_exp((price / coef.w_def).ln() + 1.0 - coef.log_weight0 - k)
    };
    ClosedFormResult::from_interior(coef, (1.0 - k - w) / a)
}

/// Closed-form optimum of center `j`'s Lagrangian term at multipliers
/// `(nu, mu_l)`.
pub fn closed_form_y(
    instance: &GameInstance,
    j: usize,
    nu: f64,
    mu_l: f64,
    delta0: f64,
) -> Result<ClosedFormResult> {
    instance.check_index(j)?;
    if nu < 0.0 || mu_l < 0.0 {
        return Err(QsgError::domain("Lagrange multipliers must be nonnegative"));
    }
    Ok(optimal_coverage(&CenterCoef::new(instance, j), nu + mu_l, delta0))
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section search for the maximum of a unimodal `f` on `[lo, hi]`.
/// Returns `(x, f(x))` with `x` within `tol` of the maximizer.
pub fn maximize_unimodal(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> Result<(f64, f64)> {
    if !(lo <= hi) || !(tol > 0.0) {
        return Err(QsgError::domain(format!(
            "maximize_unimodal needs lo <= hi and tol > 0, got [{lo}, {hi}], tol {tol}"
        )));
    }
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    // the endpoints are candidates too: the bracket never evaluates them
    let mid = 0.5 * (a + b);
    let best = [(mid, f(mid)), (lo, f(lo)), (hi, f(hi))]
        .into_iter()
        .fold((mid, f64::NEG_INFINITY), |acc, p| if p.1 > acc.1 { p } else { acc });
    Ok(best)
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h`.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut p = point.to_vec();
    (0..point.len())
        .map(|i| {
            p[i] = point[i] + h;
            let up = f(&p);
            p[i] = point[i] - h;
            let down = f(&p);
            p[i] = point[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}
