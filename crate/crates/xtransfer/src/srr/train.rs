//! Connector training against the repair loss.
//!
//! The downstream L-unit is frozen; gradients flow
//! `loss → alignment → PCA projection → MMC → unit → connector` and update
//! connector parameters only, with momentum SGD, a step learning-rate
//! schedule, and early stopping on the best observed loss.

use serde::{Deserialize, Serialize};

use crate::anchor::{
    rotation_align, AnchorSpace, PairingSet, RotationAlignment,
};
use crate::error::{Error, Result};
use crate::latent::{cluster_stats, mean_pairwise_centroid_distance, mmc, mmc_backward, silhouette};
use crate::srr::connector::Connector;
use crate::srr::loss::repair_loss;
use crate::srr::removal::ChannelMask;
use crate::tensor::FeatureBatch;
use crate::zoo::{backward_lunit, forward_lunit_cached, LUnit};

/// Optimization hyperparameters for repair (and reused by head training).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Episodes between learning-rate decays.
    pub lr_step: usize,
    pub lr_decay: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            lr: 1e-2,
            momentum: 0.95,
            lr_step: 20,
            lr_decay: 0.5,
            early_stop_patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.lr_decay <= 0.0 || self.lr_step == 0 || self.early_stop_patience == 0
        {
            return Err(Error::Config(
                "training hyperparameters must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Step-decayed learning rate for 0-based update index `u`.
    pub fn lr_at(&self, u: usize) -> f64 {
        self.lr * self.lr_decay.powi((u / self.lr_step) as i32)
    }
}

/// Result of repairing one spliced layer.
#[derive(Debug, Clone)]
pub struct RepairOutcome {
    pub connector: Connector,
    /// Silhouette of the aligned target projections before training.
    pub before_s: f64,
    /// Silhouette at the best-loss episode.
    pub after_s: f64,
    /// Silhouette of the paired anchor classes' own projections.
    pub anchor_s: f64,
    /// Loss per episode; entry 0 is the pre-training loss.
    pub loss_trace: Vec<f64>,
    pub channel_mask: Option<ChannelMask>,
    /// Episode index of the reported (best-loss) connector.
    pub best_episode: usize,
    /// Total skipped-pair warnings across episodes.
    pub skipped_pair_warnings: usize,
    /// The alignment folded into the loss, kept for downstream scoring.
    pub alignment: RotationAlignment,
}

/// Forward target data through connector and frozen unit to aligned
/// anchor-space projections; returns the projections plus the caches needed
/// for the backward pass.
struct EpisodeEval {
    aligned: Vec<Vec<f64>>,
    loss: f64,
    skipped: usize,
    grads: crate::srr::connector::ConnectorGrads,
}

fn evaluate_episode(
    unit: &LUnit,
    connector: &Connector,
    space: &AnchorSpace,
    pairing: &PairingSet,
    alignment: &RotationAlignment,
    support: &FeatureBatch,
    labels: &[usize],
) -> Result<EpisodeEval> {
    let (conn_out, conn_cache) = connector.forward_cached(support)?;
    let (unit_out, unit_cache) = forward_lunit_cached(unit, &conn_out)?;
    let mmcs = mmc(&unit_out)?;
    let mut aligned = Vec::with_capacity(mmcs.len());
    for m in &mmcs {
        aligned.push(alignment.apply_one(&space.pca.project_one(m)?));
    }
    let loss = repair_loss(space, pairing, &aligned, labels)?;

    // Backward chain, connector parameters only.
    let mut grad_mmc = Vec::with_capacity(mmcs.len());
    for g_aligned in &loss.grads {
        let g_proj = alignment.backward_one(g_aligned);
        grad_mmc.push(space.pca.backward_one(&g_proj));
    }
    let g_unit_out = mmc_backward(&unit_out, &grad_mmc)?;
    let g_conn_out = backward_lunit(unit, &unit_cache, &g_unit_out)?;
    let grads = connector.backward(&conn_cache, &g_conn_out)?;

    Ok(EpisodeEval { aligned, loss: loss.loss, skipped: loss.skipped_pairs, grads })
}

/// Compute projections of the support set through the current connector,
/// without gradients. Used for alignment setup and scoring.
pub fn project_support(
    unit: &LUnit,
    connector: &Connector,
    space: &AnchorSpace,
    support: &FeatureBatch,
) -> Result<Vec<Vec<f64>>> {
    let conn_out = connector.forward(support)?;
    let unit_out = crate::zoo::forward_lunit(unit, &conn_out)?;
    let mmcs = mmc(&unit_out)?;
    mmcs.iter().map(|m| space.pca.project_one(m)).collect()
}

/// Estimate the scale/rotation alignment from the initial (untrained)
/// projections. Degenerate geometry falls back to the identity transform so
/// a bad splice is still trainable.
pub fn initial_alignment(
    space: &AnchorSpace,
    pairing: &PairingSet,
    initial_proj: &[Vec<f64>],
    labels: &[usize],
) -> RotationAlignment {
    let k = space.pca.k();
    let fallback = RotationAlignment::identity(k);
    let Ok(target_stats) = cluster_stats(initial_proj, labels) else {
        return fallback;
    };
    let paired_sources: std::collections::BTreeSet<usize> =
        pairing.pairs.iter().map(|&(s, _)| s).collect();
    let paired_centroids: std::collections::BTreeMap<usize, Vec<f64>> = space
        .anchor_centroids
        .iter()
        .filter(|(c, _)| paired_sources.contains(c))
        .map(|(&c, v)| (c, v.clone()))
        .collect();
    let source_inter = mean_pairwise_centroid_distance(&paired_centroids);
    let target_inter = target_stats.inter_d;
    if source_inter <= 0.0 || target_inter <= 0.0 {
        return fallback;
    }
    let scale = source_inter / target_inter;
    match rotation_align(&space.anchor_centroids, &target_stats.centroids, pairing, scale) {
        Ok(a) => a,
        Err(_) => RotationAlignment { scale, rotation: crate::anchor::procrustes::identity(k) },
    }
}

/// Train the connector against the repair loss in front of the frozen
/// `unit`. Alignment and pairing stay fixed throughout.
pub fn repair(
    unit: &LUnit,
    connector: Connector,
    space: &AnchorSpace,
    pairing: &PairingSet,
    support: &FeatureBatch,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<RepairOutcome> {
    cfg.validate()?;
    if pairing.pairs.len() < 2 {
        return Err(Error::Pairing(format!(
            "repair needs >= 2 paired classes, got {}",
            pairing.pairs.len()
        )));
    }
    let frozen_hash = unit.param_hash();
    let mut connector = connector;

    let (anchor_points, anchor_labels) = space.paired_anchor_points(pairing);
    let anchor_s = silhouette(&anchor_points, &anchor_labels)?.0;

    let initial_proj = project_support(unit, &connector, space, support)?;
    let alignment = initial_alignment(space, pairing, &initial_proj, labels);

    let mut eval =
        evaluate_episode(unit, &connector, space, pairing, &alignment, support, labels)?;
    if !eval.loss.is_finite() {
        return Err(Error::RepairDivergence { episode: 0 });
    }
    let before_s = silhouette(&eval.aligned, labels)?.0;
    let mut loss_trace = vec![eval.loss];
    let mut skipped_total = eval.skipped;

    let mut best_loss = eval.loss;
    let mut best_episode = 0usize;
    let mut best_params: Vec<Vec<f64>> =
        connector.param_slots().iter().map(|(_, v)| (*v).clone()).collect();
    let mut best_aligned = eval.aligned.clone();

    let mut velocity: Vec<Vec<f64>> =
        connector.param_slots().iter().map(|(_, v)| vec![0.0; v.len()]).collect();

    for episode in 1..=cfg.episodes {
        // Momentum SGD step using the gradients from the last evaluation.
        let lr = cfg.lr_at(episode - 1);
        let grad_slots = Connector::grad_slots(&eval.grads).map(|g| g.clone());
        for ((slot, vel), grad) in
            connector.param_slots_mut().into_iter().zip(&mut velocity).zip(&grad_slots)
        {
            let (_, params) = slot;
            for ((p, v), g) in params.iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = cfg.momentum * *v + g;
                *p -= lr * *v;
            }
        }

        eval = evaluate_episode(unit, &connector, space, pairing, &alignment, support, labels)?;
        if !eval.loss.is_finite() {
            return Err(Error::RepairDivergence { episode });
        }
        loss_trace.push(eval.loss);
        skipped_total += eval.skipped;
        if eval.loss < best_loss {
            best_loss = eval.loss;
            best_episode = episode;
            best_params = connector.param_slots().iter().map(|(_, v)| (*v).clone()).collect();
            best_aligned = eval.aligned.clone();
        }
        if episode - best_episode >= cfg.early_stop_patience {
            break;
        }
    }

    // Report the best-loss connector, not the last one.
    for ((_, slot), best) in connector.param_slots_mut().into_iter().zip(&best_params) {
        slot.copy_from_slice(best);
    }
    let after_s = silhouette(&best_aligned, labels)?.0;

    debug_assert_eq!(unit.param_hash(), frozen_hash, "frozen unit must not change");
    Ok(RepairOutcome {
        connector,
        before_s,
        after_s,
        anchor_s,
        loss_trace,
        channel_mask: None,
        best_episode,
        skipped_pair_warnings: skipped_total,
        alignment,
    })
}
