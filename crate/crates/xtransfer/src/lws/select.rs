//! Resource-aware candidate selection: RC(n), adjusted overhead R, the
//! value/overhead ratio VR, the pre-search filter, and the pool decision
//! rule.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::srr::RepairOutcome;
use crate::zoo::UnitId;

/// Layer value function: a repaired candidate is worth exactly its
/// post-repair separability.
pub fn layer_value(outcome: &RepairOutcome) -> f64 {
    outcome.after_s
}

/// Depth-dependent overhead growth `RC(n) = exp(n/(L−2) − 2) + 1`.
///
/// Later selections weigh resources more heavily. `L` is the maximum unit
/// depth across the sources.
pub fn resource_coefficient(n: usize, l: usize) -> Result<f64> {
    if l < 3 {
        return Err(Error::Config(format!(
            "resource coefficient needs L >= 3 (denominator L-2), got L = {l}"
        )));
    }
    if n < 1 || n > l {
        return Err(Error::Config(format!("RC(n) defined for 1 <= n <= L, got n = {n}, L = {l}")));
    }
    Ok((n as f64 / (l as f64 - 2.0) - 2.0).exp() + 1.0)
}

/// Adjusted overhead `R(n)_ij = Res(L_ij)·RC(n)/max Res(P)`.
///
/// `res` and `pool_max_res` are absolute weighted resources (candidate cost
/// including its connector, in units of the reference backbone).
pub fn adjusted_overhead(res: f64, pool_max_res: f64, n: usize, l: usize) -> Result<f64> {
    if pool_max_res <= 0.0 {
        return Err(Error::Config("pool maximum resource must be positive".into()));
    }
    Ok(res * resource_coefficient(n, l)? / pool_max_res)
}

/// A candidate's cheap pre-repair estimates.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ProbeInfo {
    pub before_s: f64,
    pub anchor_s: f64,
    /// Absolute weighted resource, connector included.
    pub res: f64,
}

/// Estimated post-repair S-score: `before + rate_est·anchor`, clamped to the
/// interval spanned by `before` and `anchor`.
pub fn estimated_after_s(before_s: f64, anchor_s: f64, rate_est: f64) -> f64 {
    let lo = before_s.min(anchor_s);
    let hi = before_s.max(anchor_s);
    (before_s + rate_est * anchor_s).clamp(lo, hi)
}

/// Rank pool candidates by estimated post-repair score and keep the top
/// `⌈range·|pool|⌉` (at least one). Ties broken by ascending (model, depth).
///
/// Returns the retained candidate ids in ranked order.
pub fn pre_search_filter(
    candidates: &[(UnitId, ProbeInfo)],
    rate_est: f64,
    range: f64,
) -> Vec<UnitId> {
    let mut ranked: Vec<(UnitId, f64)> = candidates
        .iter()
        .map(|&(id, p)| (id, estimated_after_s(p.before_s, p.anchor_s, rate_est)))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then_with(|| (a.0.model, a.0.depth).cmp(&(b.0.model, b.0.depth)))
    });
    let keep = ((range * candidates.len() as f64).ceil() as usize).max(1);
    ranked.into_iter().take(keep).map(|(id, _)| id).collect()
}

/// A repaired candidate ready for the VR rule.
#[derive(Debug, Clone, Copy)]
pub struct ScoredCandidate {
    pub id: UnitId,
    pub after_s: f64,
    /// Absolute weighted resource, connector included.
    pub res: f64,
}

/// Pool decision: either the accepted candidate or a discard reason.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoolDecision {
    Selected {
        id: UnitId,
        after_s: f64,
        res: f64,
        adjusted_overhead: f64,
        vr: f64,
    },
    /// Best VR candidate did not improve on the previous S-score.
    DiscardedNoImprovement { best_vr_id: UnitId, best_after_s: f64 },
    /// Best VR candidate would exceed the remaining budget.
    DiscardedBudget { best_vr_id: UnitId, res: f64, remaining: f64 },
    /// Nothing was repaired (empty filtered set after errors).
    DiscardedEmpty,
}

/// Apply the VR rule to a pool's repaired candidates.
///
/// `VR = after_s / R(n)`; argmax with ties broken by lower `res`, then lower
/// `(model, depth)`. The winner is accepted only if it strictly improves on
/// `prev_s` and fits the remaining budget.
pub fn select_from_pool(
    repaired: &[ScoredCandidate],
    pool_max_res: f64,
    n: usize,
    l: usize,
    prev_s: f64,
    spent: f64,
    budget: f64,
) -> Result<PoolDecision> {
    if repaired.is_empty() {
        return Ok(PoolDecision::DiscardedEmpty);
    }
    let rc = resource_coefficient(n, l)?;
    let mut best: Option<(f64, &ScoredCandidate, f64)> = None; // (vr, cand, r)
    for cand in repaired {
        let r = adjusted_overhead(cand.res, pool_max_res, n, l)?;
        debug_assert!((r - cand.res * rc / pool_max_res).abs() < 1e-12);
        let vr = cand.after_s / r;
        let better = match &best {
            None => true,
            Some((bvr, bc, _)) => {
                vr > *bvr
                    || (vr == *bvr
                        && (cand.res < bc.res
                            || (cand.res == bc.res
                                && (cand.id.model, cand.id.depth) < (bc.id.model, bc.id.depth))))
            }
        };
        if better {
            best = Some((vr, cand, r));
        }
    }
    let (vr, cand, r) = best.expect("non-empty repaired set");
    if cand.after_s <= prev_s {
        return Ok(PoolDecision::DiscardedNoImprovement {
            best_vr_id: cand.id,
            best_after_s: cand.after_s,
        });
    }
    if spent + cand.res > budget {
        return Ok(PoolDecision::DiscardedBudget {
            best_vr_id: cand.id,
            res: cand.res,
            remaining: budget - spent,
        });
    }
    Ok(PoolDecision::Selected {
        id: cand.id,
        after_s: cand.after_s,
        res: cand.res,
        adjusted_overhead: r,
        vr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn id(model: usize, depth: usize) -> UnitId {
        UnitId { model, depth }
    }

    #[test]
    fn rc_spot_values() {
        // L=9: RC(1) = exp(1/7 − 2) + 1, RC(9) = exp(9/7 − 2) + 1.
        assert_abs_diff_eq!(
            resource_coefficient(1, 9).unwrap(),
            (1.0 / 7.0 - 2.0_f64).exp() + 1.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(resource_coefficient(1, 9).unwrap(), 1.1561180453159712, epsilon = 1e-9);
        assert_abs_diff_eq!(resource_coefficient(9, 9).unwrap(), 1.489541659556953, epsilon = 1e-9);
        // Strictly increasing in n.
        let mut prev = 0.0;
        for n in 1..=9 {
            let rc = resource_coefficient(n, 9).unwrap();
            assert!(rc > prev);
            prev = rc;
        }
    }

    #[test]
    fn rc_rejects_small_l() {
        assert!(matches!(resource_coefficient(1, 2), Err(Error::Config(_))));
        assert!(matches!(resource_coefficient(0, 9), Err(Error::Config(_))));
        assert!(matches!(resource_coefficient(10, 9), Err(Error::Config(_))));
    }

    #[test]
    fn overhead_normalizes_to_rc_at_the_pool_max() {
        let r = adjusted_overhead(0.4, 0.4, 1, 9).unwrap();
        assert_abs_diff_eq!(r, resource_coefficient(1, 9).unwrap(), epsilon = 1e-12);
        // Halving the cost halves R.
        let half = adjusted_overhead(0.2, 0.4, 1, 9).unwrap();
        assert_abs_diff_eq!(half, r / 2.0, epsilon = 1e-12);
        assert!(matches!(adjusted_overhead(0.1, 0.0, 1, 9), Err(Error::Config(_))));
    }

    #[test]
    fn filter_keeps_ceiling_of_range_times_pool() {
        let candidates: Vec<(UnitId, ProbeInfo)> = (0..9)
            .map(|j| {
                (id(0, j), ProbeInfo { before_s: 0.1 * j as f64, anchor_s: 0.9, res: 0.1 })
            })
            .collect();
        assert_eq!(pre_search_filter(&candidates, 1.0, 1.0).len(), 9);
        let kept = pre_search_filter(&candidates, 1.0, 0.2);
        assert_eq!(kept.len(), 2, "ceil(0.2*9) = 2");
        // Highest estimates first: est = clamp(before + 1.0*0.9, ..) = 0.9 for
        // all (clamped at anchor), so ties fall back to ascending id.
        assert_eq!(kept, vec![id(0, 0), id(0, 1)]);
        // Even range*pool < 1 keeps one.
        assert_eq!(pre_search_filter(&candidates[..1], 0.5, 0.2).len(), 1);
    }

    #[test]
    fn estimate_is_clamped_to_the_bracket() {
        assert_abs_diff_eq!(estimated_after_s(0.2, 0.8, 0.5), 0.6, epsilon = 1e-12);
        // rate 1 → clamps at anchor.
        assert_abs_diff_eq!(estimated_after_s(0.2, 0.8, 1.0), 0.8, epsilon = 1e-12);
        // rate 0 → stays at before.
        assert_abs_diff_eq!(estimated_after_s(0.2, 0.8, 0.0), 0.2, epsilon = 1e-12);
        // Inverted bracket (anchor below before) still clamps sanely.
        assert_abs_diff_eq!(estimated_after_s(0.6, 0.3, 1.0), 0.6, epsilon = 1e-12);
    }

    /// Brute-force reference: enumerate every candidate, apply the documented
    /// total order, check budget/improvement exactly as specified.
    fn oracle_select(
        repaired: &[ScoredCandidate],
        pool_max_res: f64,
        n: usize,
        l: usize,
        prev_s: f64,
        spent: f64,
        budget: f64,
    ) -> PoolDecision {
        if repaired.is_empty() {
            return PoolDecision::DiscardedEmpty;
        }
        let rc = (n as f64 / (l as f64 - 2.0) - 2.0).exp() + 1.0;
        let mut order: Vec<(f64, f64, (usize, usize), usize)> = repaired
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let vr = c.after_s / (c.res * rc / pool_max_res);
                (vr, c.res, (c.id.model, c.id.depth), i)
            })
            .collect();
        order.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.partial_cmp(&b.1).unwrap())
                .then(a.2.cmp(&b.2))
        });
        let best = &repaired[order[0].3];
        if best.after_s <= prev_s {
            PoolDecision::DiscardedNoImprovement { best_vr_id: best.id, best_after_s: best.after_s }
        } else if spent + best.res > budget {
            PoolDecision::DiscardedBudget {
                best_vr_id: best.id,
                res: best.res,
                remaining: budget - spent,
            }
        } else {
            PoolDecision::Selected {
                id: best.id,
                after_s: best.after_s,
                res: best.res,
                adjusted_overhead: best.res * rc / pool_max_res,
                vr: order[0].0,
            }
        }
    }

    #[test]
    fn selection_matches_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for case in 0..500 {
            let k = rng.gen_range(1..=9usize);
            let repaired: Vec<ScoredCandidate> = (0..k)
                .map(|i| ScoredCandidate {
                    id: id(i % 3, i / 3 + rng.gen_range(0..2)),
                    // Quantized values provoke genuine ties.
                    after_s: (rng.gen_range(0..8) as f64) / 8.0,
                    res: (rng.gen_range(1..6) as f64) / 10.0,
                })
                .collect();
            let pool_max = repaired.iter().map(|c| c.res).fold(0.3, f64::max);
            let n = rng.gen_range(1..=3);
            let l = rng.gen_range(3..=9);
            let prev_s = rng.gen_range(0.0..0.8);
            let spent = rng.gen_range(0.0..0.5);
            let budget = rng.gen_range(0.3..1.2);
            let got = select_from_pool(&repaired, pool_max, n, l, prev_s, spent, budget).unwrap();
            let want = oracle_select(&repaired, pool_max, n, l, prev_s, spent, budget);
            assert_eq!(got, want, "case {case}: {repaired:?}");
        }
    }

    #[test]
    fn hand_pool_example() {
        // 2×2 pool with hand-set values. VR = after_s/(res·RC/max):
        // RC(1, L=9) ≈ 1.15627, max res 0.4.
        // c00: 0.5/(0.2·RC/0.4) = 0.5·2/RC ≈ 0.8649
        // c01: 0.7/(0.4·RC/0.4) = 0.7/RC ≈ 0.6054
        // c10: 0.6/(0.3·RC/0.4) = 0.8/RC ≈ 0.6919
        // c11: 0.3/(0.1·RC/0.4) = 1.2/RC ≈ 1.0378 → best, but after_s 0.3.
        let repaired = vec![
            ScoredCandidate { id: id(0, 0), after_s: 0.5, res: 0.2 },
            ScoredCandidate { id: id(0, 1), after_s: 0.7, res: 0.4 },
            ScoredCandidate { id: id(1, 0), after_s: 0.6, res: 0.3 },
            ScoredCandidate { id: id(1, 1), after_s: 0.3, res: 0.1 },
        ];
        // prev_s = 0.25: best-VR candidate improves → selected.
        match select_from_pool(&repaired, 0.4, 1, 9, 0.25, 0.0, 10.0).unwrap() {
            PoolDecision::Selected { id: got, vr, .. } => {
                assert_eq!(got, id(1, 1));
                assert_abs_diff_eq!(vr, 1.2 / resource_coefficient(1, 9).unwrap(), epsilon = 1e-12);
            }
            other => panic!("expected selection, got {other:?}"),
        }
        // prev_s = 0.35: best-VR candidate no longer improves → discard (the
        // rule checks only the argmax, not runners-up).
        assert!(matches!(
            select_from_pool(&repaired, 0.4, 1, 9, 0.35, 0.0, 10.0).unwrap(),
            PoolDecision::DiscardedNoImprovement { .. }
        ));
        // Budget: candidate res 0.1 with remaining 0.05 → discard.
        assert!(matches!(
            select_from_pool(&repaired, 0.4, 1, 9, 0.25, 0.0, 0.05).unwrap(),
            PoolDecision::DiscardedBudget { .. }
        ));
    }
}
