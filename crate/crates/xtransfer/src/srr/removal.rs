//! PCA-guided channel removal after repair.
//!
//! Channels are ranked by the anchor space's component weights; nested
//! top-fraction subsets are scored by refitting a PCA on the masked target
//! MMC vectors and taking the silhouette of the projections. The best-scoring
//! subset wins; the full set is always a candidate, so removal can never
//! lose separability.

use serde::{Deserialize, Serialize};

use crate::anchor::{AnchorSpace, Pca};
use crate::error::{Error, Result};
use crate::latent::silhouette;

/// Retained-channel fractions, in eighths of the channel count.
const FRACTIONS_IN_EIGHTHS: [usize; 7] = [8, 7, 6, 5, 4, 3, 2];

/// Channel subset selected by [`channel_removal`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMask {
    /// Retained channel indices, ascending.
    pub retained: Vec<usize>,
    /// Silhouette of the masked, re-projected target MMCs.
    pub s_score: f64,
    /// Silhouette of the full (unmasked) channel set, for reference.
    pub full_s: f64,
}

impl ChannelMask {
    /// Select the retained channels from a full MMC vector.
    pub fn apply(&self, mmc: &[f64]) -> Vec<f64> {
        self.retained.iter().map(|&c| mmc[c]).collect()
    }
}

/// Score one channel subset: refit PCA on the masked vectors, project, take
/// the silhouette.
fn score_subset(points: &[Vec<f64>], labels: &[usize], subset: &[usize], k: usize) -> Result<f64> {
    let masked: Vec<Vec<f64>> =
        points.iter().map(|p| subset.iter().map(|&c| p[c]).collect()).collect();
    let k_fit = k.min(masked.len().saturating_sub(1)).max(1);
    let pca = Pca::fit(&masked, k_fit)?;
    let projected = pca.project(&masked)?;
    Ok(silhouette(&projected, labels)?.0)
}

/// Pick the channel subset maximizing the masked S-score.
///
/// Subsets are the top {100, 87.5, 75, 62.5, 50, 37.5, 25}% of channels by
/// component weight (count = ⌈C·n/8⌉, at least 1). Ties keep the larger
/// subset; since candidates are visited largest-first, a smaller subset must
/// win strictly to replace the incumbent.
pub fn channel_removal(
    space: &AnchorSpace,
    target_mmcs: &[Vec<f64>],
    labels: &[usize],
) -> Result<ChannelMask> {
    if target_mmcs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let channels = space.component_weights.len();
    for p in target_mmcs {
        if p.len() != channels {
            return Err(Error::Shape {
                expected: format!("{channels} channels"),
                got: format!("{}", p.len()),
            });
        }
    }

    // Rank channels by descending weight, ties by ascending index.
    let mut ranking: Vec<usize> = (0..channels).collect();
    ranking.sort_by(|&a, &b| {
        space.component_weights[b]
            .partial_cmp(&space.component_weights[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let k = space.pca.k();
    let mut counts: Vec<usize> = FRACTIONS_IN_EIGHTHS
        .iter()
        .map(|&n| ((channels * n).div_ceil(8)).max(1))
        .collect();
    counts.dedup();

    let mut best: Option<ChannelMask> = None;
    let mut full_s = 0.0;
    for (i, &count) in counts.iter().enumerate() {
        let mut subset: Vec<usize> = ranking[..count].to_vec();
        subset.sort_unstable();
        let s = score_subset(target_mmcs, labels, &subset, k)?;
        if i == 0 {
            full_s = s;
        }
        let better = match &best {
            None => true,
            Some(b) => s > b.s_score + 1e-12,
        };
        if better {
            best = Some(ChannelMask { retained: subset, s_score: s, full_s });
        }
    }
    let mut mask = best.expect("at least the full set was scored");
    mask.full_s = full_s;
    Ok(mask)
}
