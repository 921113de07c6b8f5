//! The layer-wise search controller.
//!
//! The controller walks a sliding depth window over the source models. At
//! each step it probes every candidate in the window, filters them by the
//! rate model's estimate, repairs the survivors, and applies the
//! value/overhead rule. Accepting a candidate advances the window past its
//! depth and feeds the observed repair rate back into the rate model;
//! discarding advances the window by one.
//!
//! The controller is generic over a [`SearchDriver`] so its decision logic
//! can be tested against scripted pools without building networks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::zoo::UnitId;

use super::rate::{
    fit_rate_model, observed_rate_parts, update_range, RateModel, RANGE_INIT, RANGE_MAX,
    RANGE_MIN,
};
use super::select::{pre_search_filter, select_from_pool, PoolDecision, ProbeInfo, ScoredCandidate};

/// Search-loop parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Total resource budget in units of the reference backbone cost.
    pub budget: f64,
    /// Window size: each pool holds this many consecutive depths per model.
    pub search_depth: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { budget: 1.0, search_depth: 3 }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget.is_finite() && self.budget > 0.0) {
            return Err(Error::Config(format!("budget must be positive, got {}", self.budget)));
        }
        if self.search_depth == 0 {
            return Err(Error::Config("search_depth must be >= 1".into()));
        }
        Ok(())
    }
}

/// A repaired candidate produced by the driver: its post-repair separability
/// and whatever the driver needs to commit the layer later (connector,
/// channel mask, projections).
pub struct Repaired<P> {
    pub after_s: f64,
    pub payload: P,
}

/// What the controller needs from the surrounding system. Implementations
/// hold the current chain state; `probe` and `repair` must not mutate it
/// (caching aside) — only [`SearchDriver::advance`] commits a selection.
pub trait SearchDriver {
    /// Per-selection artifact carried into the search outcome.
    type Payload;

    /// Number of L-units per source model, indexed by model id.
    fn model_depths(&self) -> Vec<usize>;

    /// Separability of the raw (depth-0) target representation.
    fn initial_score(&mut self) -> Result<f64>;

    /// Cheap pre-repair estimates for splicing `id` onto the current chain.
    fn probe(&mut self, id: UnitId) -> Result<ProbeInfo>;

    /// Full repair of `id` against the current chain.
    fn repair(&mut self, id: UnitId) -> Result<Repaired<Self::Payload>>;

    /// Commit `id` as the next layer of the chain.
    fn advance(&mut self, id: UnitId, payload: &Self::Payload) -> Result<()>;
}

/// Derived label for an accepted candidate, relative to the previous
/// selection: first pick, next depth of the same model, a depth jump within
/// the same model, or a switch to another model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchAction {
    Init,
    Continue,
    Skip,
    Cross,
}

fn classify(prev: Option<UnitId>, id: UnitId) -> SearchAction {
    match prev {
        None => SearchAction::Init,
        Some(p) if p.model != id.model => SearchAction::Cross,
        Some(p) if id.depth > p.depth + 1 => SearchAction::Skip,
        Some(_) => SearchAction::Continue,
    }
}

/// One accepted layer.
#[derive(Debug)]
pub struct Selection<P> {
    pub id: UnitId,
    pub after_s: f64,
    /// Absolute weighted resource, connector included.
    pub res: f64,
    pub action: SearchAction,
    pub payload: P,
}

/// Mutable search state, serializable for inspection and reporting.
#[derive(Debug, Clone, Serialize)]
pub struct SearchState {
    pub selected: Vec<UnitId>,
    /// Cumulative resource of accepted layers.
    pub spent: f64,
    /// Resource ceiling the run was given.
    pub budget: f64,
    /// S-score of the last selected layer (initially the depth-0 score).
    pub prev_s: f64,
    /// Dynamic filter range in [0.2, 1].
    pub range: f64,
    /// Window start depth.
    pub start: usize,
    pub pools_visited: usize,
    pub rate_model: RateModel,
    /// `(n, observed rate)` pairs accumulated from accepted repairs.
    pub observations: Vec<(usize, f64)>,
}

/// One trace line per pool, written as JSONL by the CLI.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    /// Pool counter (0-based).
    pub step: usize,
    /// Selection attempt this pool serves (1-based).
    pub n_sel: usize,
    /// Window start depth.
    pub start: usize,
    /// Every existing candidate in the window.
    pub pool: Vec<UnitId>,
    /// Candidates whose probe or repair failed; they are skipped.
    pub failed: Vec<UnitId>,
    /// Range used by the filter at this pool.
    pub range: f64,
    /// Rate estimate used by the filter at this pool.
    pub rate_est: f64,
    /// Survivors of the pre-search filter, ranked.
    pub filtered: Vec<UnitId>,
    pub decision: PoolDecision,
    /// Label for an accepted candidate.
    pub action: Option<SearchAction>,
    /// `(n, observed rate)` recorded on acceptance.
    pub observation: Option<(usize, f64)>,
    /// Cumulative resource after this pool.
    pub spent: f64,
    /// Best separability after this pool.
    pub score: f64,
    /// Set when this pool serves the last admissible selection index (the
    /// overhead coefficient is only defined up to `n = L`).
    pub depth_limit: bool,
}

/// Search result: accepted layers in order, final state, and the full trace.
#[derive(Debug)]
pub struct SearchOutcome<P> {
    pub selections: Vec<Selection<P>>,
    pub state: SearchState,
    pub trace: Vec<TraceRecord>,
}

/// A pool: the existing `(model, depth)` candidates in the current window.
#[derive(Debug, Clone, Serialize)]
pub struct SearchPool {
    pub n_sel: usize,
    pub start: usize,
    pub candidates: Vec<UnitId>,
}

/// Enumerate the window's candidates in ascending `(model, depth)` order.
pub fn build_pool(model_depths: &[usize], start: usize, window: usize, n_sel: usize) -> SearchPool {
    let mut candidates = Vec::new();
    for (model, &depth) in model_depths.iter().enumerate() {
        for j in start..(start + window).min(depth) {
            candidates.push(UnitId { model, depth: j });
        }
    }
    candidates.sort();
    SearchPool { n_sel, start, candidates }
}

/// Run the layer-wise search against `driver`.
///
/// Terminates when the window slides past every model's depth. Returns
/// [`Error::SearchBudgetExhausted`] when nothing was accepted and at least
/// one pool's winner was rejected for budget, and
/// [`Error::EmptySearchResult`] when nothing was accepted for any other
/// reason.
pub fn drive_search<D: SearchDriver>(
    driver: &mut D,
    cfg: &SearchConfig,
) -> Result<SearchOutcome<D::Payload>> {
    cfg.validate()?;
    let model_depths = driver.model_depths();
    let l = model_depths.iter().copied().max().unwrap_or(0);
    if l < 3 {
        return Err(Error::Config(format!(
            "search needs a deepest source of >= 3 units, got {l}"
        )));
    }

    let mut state = SearchState {
        selected: Vec::new(),
        spent: 0.0,
        budget: cfg.budget,
        prev_s: driver.initial_score()?,
        range: RANGE_INIT,
        start: 0,
        pools_visited: 0,
        rate_model: RateModel::default(),
        observations: Vec::new(),
    };
    let mut selections: Vec<Selection<D::Payload>> = Vec::new();
    let mut trace: Vec<TraceRecord> = Vec::new();
    let mut budget_rejections: Vec<f64> = Vec::new();

    loop {
        let n_sel = state.selected.len() + 1;
        if n_sel > l {
            // Unreachable while each selection advances the window past its
            // own depth, but RC(n) is only defined up to L.
            break;
        }
        let pool = build_pool(&model_depths, state.start, cfg.search_depth, n_sel);
        if pool.candidates.is_empty() {
            break;
        }
        state.pools_visited += 1;

        let mut failed: Vec<UnitId> = Vec::new();
        let mut probed: Vec<(UnitId, ProbeInfo)> = Vec::new();
        for &id in &pool.candidates {
            match driver.probe(id) {
                Ok(info) => probed.push((id, info)),
                Err(_) => failed.push(id),
            }
        }

        let rate_est = state.rate_model.predict(n_sel);
        let filtered = pre_search_filter(&probed, rate_est, state.range);
        let pool_max_res = probed.iter().map(|(_, p)| p.res).fold(f64::NEG_INFINITY, f64::max);

        let mut repaired: Vec<ScoredCandidate> = Vec::new();
        let mut payloads: Vec<(UnitId, Repaired<D::Payload>)> = Vec::new();
        for &id in &filtered {
            match driver.repair(id) {
                Ok(rep) => {
                    let info = probed.iter().find(|(pid, _)| *pid == id).expect("filtered ⊆ probed");
                    repaired.push(ScoredCandidate { id, after_s: rep.after_s, res: info.1.res });
                    payloads.push((id, rep));
                }
                Err(_) => failed.push(id),
            }
        }

        let decision = select_from_pool(
            &repaired,
            pool_max_res,
            n_sel,
            l,
            state.prev_s,
            state.spent,
            cfg.budget,
        )?;

        let mut action = None;
        let mut observation = None;
        match &decision {
            PoolDecision::Selected { id, after_s, res, .. } => {
                let (id, after_s, res) = (*id, *after_s, *res);
                let info = probed.iter().find(|(pid, _)| *pid == id).expect("selected ⊆ probed").1;
                let idx = payloads.iter().position(|(pid, _)| *pid == id).expect("payload kept");
                let (_, rep) = payloads.swap_remove(idx);

                let act = classify(state.selected.last().copied(), id);
                driver.advance(id, &rep.payload)?;
                selections.push(Selection { id, after_s, res, action: act, payload: rep.payload });
                state.selected.push(id);
                state.spent += res;
                state.prev_s = after_s;
                state.start = id.depth + 1;

                // Feed the repair rate back. A degenerate anchor yields no
                // observation; the range then also stays put.
                if let Ok(obs) = observed_rate_parts(info.before_s, after_s, info.anchor_s) {
                    state.observations.push((n_sel, obs));
                    let distinct: std::collections::BTreeSet<usize> =
                        state.observations.iter().map(|&(n, _)| n).collect();
                    if distinct.len() >= 2 {
                        state.rate_model = fit_rate_model(&state.observations)?;
                    }
                    state.range = update_range(state.range, rate_est, obs);
                    observation = Some((n_sel, obs));
                }
                action = Some(act);
            }
            PoolDecision::DiscardedBudget { res, .. } => {
                budget_rejections.push(*res);
                state.start += 1;
            }
            PoolDecision::DiscardedNoImprovement { .. } | PoolDecision::DiscardedEmpty => {
                state.start += 1;
            }
        }

        debug_assert!((RANGE_MIN..=RANGE_MAX).contains(&state.range));
        trace.push(TraceRecord {
            step: state.pools_visited - 1,
            n_sel,
            start: pool.start,
            pool: pool.candidates,
            failed,
            range: state.range,
            rate_est,
            filtered,
            decision,
            action,
            observation,
            spent: state.spent,
            score: state.prev_s,
            depth_limit: n_sel == l,
        });
    }

    if selections.is_empty() {
        return Err(match budget_rejections.iter().copied().reduce(f64::min) {
            Some(cheapest) => Error::SearchBudgetExhausted { budget: cfg.budget, cheapest },
            None => Error::EmptySearchResult { pools_visited: state.pools_visited },
        });
    }
    Ok(SearchOutcome { selections, state, trace })
}
