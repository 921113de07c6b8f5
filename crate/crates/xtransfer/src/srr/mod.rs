//! Splice–Repair–Removal: adapt a frozen source layer to target data.
//!
//! **Splice** builds a seeded connector from the target representation's
//! shape to the layer's expected input and pairs target classes to anchor
//! classes from the initial projections. **Repair** trains the connector
//! against the anchor-based loss ([`repair_loss`]) with the layer frozen.
//! **Removal** ([`channel_removal`]) optionally drops output channels whose
//! absence improves the masked S-score.

pub(crate) mod connector;
mod loss;
mod removal;
mod train;

pub use connector::{
    build_connector, default_reshape, default_reshape_cost, Connector, ConnectorCache,
    ConnectorGrads, DEFAULT_BOTTLENECK_RATIO,
};
pub use loss::{repair_loss, RepairLoss};
pub use removal::{channel_removal, ChannelMask};
pub use train::{
    initial_alignment, project_support, repair, RepairOutcome, TrainConfig,
};

use crate::anchor::{pair_anchors, AnchorSpace};
use crate::error::Result;
use crate::latent::{cluster_stats, mmc};
use crate::tensor::FeatureBatch;
use crate::zoo::{forward_lunit, LUnit};

/// Knobs for one splice of a candidate layer.
#[derive(Debug, Clone)]
pub struct SpliceConfig {
    /// Encoder bottleneck ratio `r`.
    pub bottleneck_ratio: usize,
    /// Run channel removal after repair.
    pub removal_enabled: bool,
    /// Seed for the connector init.
    pub connector_seed: u64,
}

impl Default for SpliceConfig {
    fn default() -> Self {
        Self { bottleneck_ratio: DEFAULT_BOTTLENECK_RATIO, removal_enabled: true, connector_seed: 0 }
    }
}

/// Full SRR pass for one candidate layer: build the connector, pair target
/// classes to anchors from the initial projections, repair, then (optionally)
/// remove channels.
///
/// `support` is the current target representation (raw input for the first
/// search step, the previous selected layer's masked output afterwards).
pub fn splice_and_repair(
    unit: &LUnit,
    space: &AnchorSpace,
    support: &FeatureBatch,
    labels: &[usize],
    train_cfg: &TrainConfig,
    splice_cfg: &SpliceConfig,
) -> Result<RepairOutcome> {
    let connector = build_connector(
        support.shape(),
        unit.in_shape,
        splice_cfg.bottleneck_ratio,
        splice_cfg.connector_seed,
    );
    let initial_proj = project_support(unit, &connector, space, support)?;
    let target_stats = cluster_stats(&initial_proj, labels)?;
    let pairing =
        pair_anchors(&space.anchor_centroids, &space.per_class_s, &target_stats.centroids)?;

    let mut outcome = repair(unit, connector, space, &pairing, support, labels, train_cfg)?;

    if splice_cfg.removal_enabled {
        let unit_out = forward_lunit(unit, &outcome.connector.forward(support)?)?;
        let repaired_mmcs = mmc(&unit_out)?;
        outcome.channel_mask = Some(channel_removal(space, &repaired_mmcs, labels)?);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::srr::train::tests::make_fixture;

    #[test]
    fn splice_and_repair_end_to_end_with_removal() {
        let fx = make_fixture(19);
        let unit = &fx.source.lunits[fx.depth];
        let train_cfg = TrainConfig { episodes: 40, ..TrainConfig::default() };
        let splice_cfg = SpliceConfig { connector_seed: 7, ..SpliceConfig::default() };
        let out =
            splice_and_repair(unit, &fx.space, &fx.support, &fx.labels, &train_cfg, &splice_cfg)
                .unwrap();
        let mask = out.channel_mask.as_ref().expect("removal enabled");
        assert!(!mask.retained.is_empty());
        assert!(mask.retained.len() <= unit.out_shape.channels);
        assert!(mask.s_score >= mask.full_s - 1e-9);
        assert!(!out.loss_trace.is_empty());
    }

    #[test]
    fn removal_disabled_leaves_mask_empty() {
        let fx = make_fixture(19);
        let unit = &fx.source.lunits[fx.depth];
        let train_cfg = TrainConfig { episodes: 5, ..TrainConfig::default() };
        let splice_cfg = SpliceConfig {
            removal_enabled: false,
            connector_seed: 7,
            ..SpliceConfig::default()
        };
        let out =
            splice_and_repair(unit, &fx.space, &fx.support, &fx.labels, &train_cfg, &splice_cfg)
                .unwrap();
        assert!(out.channel_mask.is_none());
    }
}
