//! Layer-Wise Search: recombine repaired layers from a zoo of frozen source
//! models under a resource budget.
//!
//! The search walks a depth window across the zoo. Each pool of candidate
//! layers is probed cheaply (seeded splice + before-repair S-score), filtered
//! by a learned repairing-rate model ([`rate`]), repaired, and scored by
//! value/resource ratio ([`select`]). The generic controller ([`search`])
//! is driven either by scripted fixtures in tests or by [`ZooDriver`] over
//! real models; [`run_search`] assembles the winning chain into a
//! [`RecombinedModel`] with a trained head ([`model`]).

pub mod model;
pub mod pipeline;
pub mod rate;
pub mod search;
pub mod select;

pub use model::{
    FinetuneConfig, FitReport, Provenance, RecombinedLayer, RecombinedModel,
};
pub use pipeline::{
    build_anchor_spaces, reference_cost, reference_index, run_search, weighted_res,
    LayerPayload, PipelineConfig, SearchRun, SelectionSummary, ZooDriver,
};
pub use rate::{
    fit_rate_model, observed_rate, observed_rate_parts, update_range, RateModel, RANGE_INIT,
    RANGE_MAX, RANGE_MIN,
};
pub use search::{
    build_pool, drive_search, Repaired, SearchAction, SearchConfig, SearchDriver, SearchOutcome,
    SearchPool, SearchState, Selection, TraceRecord,
};
pub use select::{
    adjusted_overhead, estimated_after_s, layer_value, pre_search_filter, resource_coefficient,
    select_from_pool, PoolDecision, ProbeInfo, ScoredCandidate,
};
