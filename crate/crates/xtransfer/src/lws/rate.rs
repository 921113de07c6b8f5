//! Repair-rate growth model and the dynamic search range.
//!
//! Observed repair rates `(After − Before)/Anchor` are fit by
//! `rate_est(n) = exp(a·n) + b` (least squares; deterministic grid start over
//! `a`, closed-form `b`, Gauss–Newton refinement). The estimate drives the
//! pre-search filter and the dynamic range update.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::srr::RepairOutcome;

/// Search-range bounds and start value.
pub const RANGE_MIN: f64 = 0.2;
pub const RANGE_MAX: f64 = 1.0;
pub const RANGE_INIT: f64 = 0.5;

/// Grid bounds for the `a` coefficient; `b` is clamped to [-1, 1].
const A_MIN: f64 = -2.0;
const A_MAX: f64 = 2.0;
const A_GRID_STEPS: usize = 81;
const GAUSS_NEWTON_ITERS: usize = 60;

/// `rate_est(n) = exp(a·n) + b`, fit to observed per-step repair rates.
#[derive(Debug, Clone, Serialize)]
pub struct RateModel {
    pub a: f64,
    pub b: f64,
    /// `(n, observed rate)` pairs the fit used.
    pub observations: Vec<(usize, f64)>,
    pub fitted: bool,
    /// Mean squared residual of the fit.
    pub mse: f64,
    /// Set when Gauss–Newton failed to improve on the grid start.
    pub fallback: bool,
}

impl Default for RateModel {
    fn default() -> Self {
        Self { a: 0.0, b: 0.0, observations: Vec::new(), fitted: false, mse: 0.0, fallback: false }
    }
}

impl RateModel {
    /// Predicted repair rate at step `n`, clamped to [0, 1]. Before the
    /// model is fitted the estimate is optimistic (1.0).
    pub fn predict(&self, n: usize) -> f64 {
        if !self.fitted {
            return 1.0;
        }
        ((self.a * n as f64).exp() + self.b).clamp(0.0, 1.0)
    }
}

fn mse_of(a: f64, b: f64, obs: &[(usize, f64)]) -> f64 {
    obs.iter()
        .map(|&(n, r)| {
            let e = (a * n as f64).exp() + b - r;
            e * e
        })
        .sum::<f64>()
        / obs.len() as f64
}

/// Least-squares `b` for a fixed `a`.
fn best_b(a: f64, obs: &[(usize, f64)]) -> f64 {
    obs.iter().map(|&(n, r)| r - (a * n as f64).exp()).sum::<f64>() / obs.len() as f64
}

/// Fit the growth model to `(n, rate)` observations.
///
/// Needs at least two observations with distinct `n`. Deterministic: a fixed
/// grid over `a` with closed-form `b`, then damped Gauss–Newton from the best
/// grid point. If refinement fails to improve, the grid solution is kept and
/// flagged.
pub fn fit_rate_model(observations: &[(usize, f64)]) -> Result<RateModel> {
    let distinct: std::collections::BTreeSet<usize> =
        observations.iter().map(|&(n, _)| n).collect();
    if distinct.len() < 2 {
        return Err(Error::Config(format!(
            "rate model needs >= 2 observations with distinct n, got {}",
            distinct.len()
        )));
    }

    // Grid start.
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..A_GRID_STEPS {
        let a = A_MIN + (A_MAX - A_MIN) * i as f64 / (A_GRID_STEPS - 1) as f64;
        let b = best_b(a, observations);
        let m = mse_of(a, b, observations);
        if m < best.0 {
            best = (m, a, b);
        }
    }
    let (_, grid_a, grid_b) = best;

    // Damped Gauss–Newton on (a, b).
    let (mut a, mut b) = (grid_a, grid_b);
    let mut cur_mse = mse_of(a, b, observations);
    let mut converged = false;
    for _ in 0..GAUSS_NEWTON_ITERS {
        // Normal equations for residuals r_i = exp(a n_i) + b - y_i with
        // Jacobian rows [n_i exp(a n_i), 1].
        let (mut jtj00, mut jtj01, mut jtj11) = (0.0, 0.0, 0.0);
        let (mut jtr0, mut jtr1) = (0.0, 0.0);
        for &(n, y) in observations {
            let nf = n as f64;
            let e = (a * nf).exp();
            let r = e + b - y;
            let j0 = nf * e;
            jtj00 += j0 * j0;
            jtj01 += j0;
            jtj11 += 1.0;
            jtr0 += j0 * r;
            jtr1 += r;
        }
        let det = jtj00 * jtj11 - jtj01 * jtj01;
        if det.abs() < 1e-18 {
            break;
        }
        let da = -(jtj11 * jtr0 - jtj01 * jtr1) / det;
        let db = -(jtj00 * jtr1 - jtj01 * jtr0) / det;
        // Backtracking line search keeps the step from overshooting.
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let (na, nb) = (a + step * da, b + step * db);
            let m = mse_of(na, nb, observations);
            if m < cur_mse {
                a = na;
                b = nb;
                cur_mse = m;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            converged = true;
            break;
        }
        if da.abs().max(db.abs()) * step < 1e-12 {
            converged = true;
            break;
        }
    }

    // Ran out of iterations while still moving: keep the best point found
    // (never worse than the grid start) and flag it.
    let fallback = !converged;
    let a = a.clamp(A_MIN, A_MAX);
    let b = b.clamp(-1.0, 1.0);
    Ok(RateModel {
        a,
        b,
        observations: observations.to_vec(),
        fitted: true,
        mse: mse_of(a, b, observations),
        fallback,
    })
}

/// Observed repair rate of one outcome: `(After − Before)/Anchor`, clamped
/// to [0, 1].
pub fn observed_rate(outcome: &RepairOutcome) -> Result<f64> {
    observed_rate_parts(outcome.before_s, outcome.after_s, outcome.anchor_s)
}

/// [`observed_rate`] on raw scores, for callers that track the three numbers
/// separately (the search controller works off probe + repair summaries).
pub fn observed_rate_parts(before_s: f64, after_s: f64, anchor_s: f64) -> Result<f64> {
    if anchor_s == 0.0 {
        return Err(Error::DegenerateRate);
    }
    Ok(((after_s - before_s) / anchor_s).clamp(0.0, 1.0))
}

/// One dynamic-range step: grow when the previous estimate undershot the
/// observed rate, shrink otherwise; clamp to [0.2, 1].
pub fn update_range(range: f64, rate_est_prev: f64, rate_obs_prev: f64) -> f64 {
    let u = if rate_est_prev < rate_obs_prev { 1.0 } else { -1.0 };
    ((1.0 + u * rate_est_prev) * range).clamp(RANGE_MIN, RANGE_MAX)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Normal;

    #[test]
    fn recovers_noiseless_coefficients() {
        let obs: Vec<(usize, f64)> =
            (1..=5).map(|n| (n, (0.3 * n as f64).exp() + 0.1)).collect();
        let model = fit_rate_model(&obs).unwrap();
        assert_abs_diff_eq!(model.a, 0.3, epsilon = 0.01);
        assert_abs_diff_eq!(model.b, 0.1, epsilon = 0.01);
        assert!(model.mse < 1e-10);
    }

    #[test]
    fn two_points_interpolate_exactly() {
        let obs = vec![(1, 0.4), (3, 0.9)];
        let model = fit_rate_model(&obs).unwrap();
        assert!(model.mse < 1e-12, "mse {}", model.mse);
        for &(n, r) in &obs {
            assert_abs_diff_eq!((model.a * n as f64).exp() + model.b, r, epsilon = 1e-6);
        }
    }

    #[test]
    fn noisy_recovery_within_tolerance() {
        let mut ok = 0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 0.01).unwrap();
            let obs: Vec<(usize, f64)> = (1..=6)
                .map(|n| (n, (0.25 * n as f64).exp() - 0.4 + rng.sample(noise)))
                .collect();
            let model = fit_rate_model(&obs).unwrap();
            if (model.a - 0.25).abs() <= 0.05 {
                ok += 1;
            }
        }
        assert!(ok >= 18, "only {ok}/20 seeds recovered a within 0.05");
    }

    #[test]
    fn needs_two_distinct_n() {
        assert!(fit_rate_model(&[(2, 0.5)]).is_err());
        assert!(fit_rate_model(&[(2, 0.5), (2, 0.6)]).is_err());
    }

    #[test]
    fn prediction_is_clamped_and_optimistic_before_fit() {
        let unfitted = RateModel::default();
        assert_eq!(unfitted.predict(3), 1.0);
        let model = RateModel { a: 1.5, b: 0.5, fitted: true, ..RateModel::default() };
        assert_eq!(model.predict(5), 1.0);
        let negative = RateModel { a: -2.0, b: -0.9, fitted: true, ..RateModel::default() };
        assert_eq!(negative.predict(4), 0.0);
    }

    #[test]
    fn observed_rate_examples() {
        let mk = |before: f64, after: f64, anchor: f64| {
            // Only the three scores matter here.
            let fx = crate::srr::build_connector(
                crate::tensor::TensorShape::new(1, 1, 2),
                crate::tensor::TensorShape::new(1, 1, 2),
                4,
                0,
            );
            RepairOutcome {
                connector: fx,
                before_s: before,
                after_s: after,
                anchor_s: anchor,
                loss_trace: vec![0.0],
                channel_mask: None,
                best_episode: 0,
                skipped_pair_warnings: 0,
                alignment: crate::anchor::RotationAlignment::identity(2),
            }
        };
        assert_eq!(observed_rate(&mk(0.3, 0.3, 0.5)).unwrap(), 0.0);
        assert_eq!(observed_rate(&mk(0.0, 0.5, 0.5)).unwrap(), 1.0);
        assert_abs_diff_eq!(observed_rate(&mk(0.1, 0.3, 0.5)).unwrap(), 0.4, epsilon = 1e-12);
        assert!(matches!(observed_rate(&mk(0.1, 0.3, 0.0)), Err(Error::DegenerateRate)));
        // Clamping: regression and overshoot stay in [0, 1].
        assert_eq!(observed_rate(&mk(0.5, 0.1, 0.4)).unwrap(), 0.0);
        assert_eq!(observed_rate(&mk(0.0, 0.9, 0.3)).unwrap(), 1.0);
    }

    #[test]
    fn range_update_examples() {
        assert_abs_diff_eq!(update_range(0.5, 0.2, 0.5), 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(update_range(0.25, 0.5, 0.1), 0.2, epsilon = 1e-12);
        // Arbitrary sequences stay bounded.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut range = RANGE_INIT;
        for _ in 0..1000 {
            range = update_range(range, rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            assert!((RANGE_MIN..=RANGE_MAX).contains(&range), "range {range} escaped");
        }
    }
}
