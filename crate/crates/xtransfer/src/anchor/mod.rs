//! The anchor feature space and target-to-anchor alignment.
//!
//! Per layer, source (anchor) MMC vectors are projected into a small PCA
//! space. Target projections are aligned to it by a scale factor (ratio of
//! inter-class centroid distances) and a proper rotation (closed-form
//! Procrustes on paired class centroids). Anchor classes are paired to
//! target classes by shortlisting the best-clustered source classes and
//! solving a minimum-cost assignment.

mod hungarian;
pub mod pca;
pub mod procrustes;

pub use hungarian::min_cost_assignment;
pub use pca::Pca;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::latent::{cluster_stats, nearest_other_centroid_distance, MmcVector};
use crate::zoo::UnitId;

/// Per-layer anchor space: PCA basis plus the projected class geometry the
/// repair loss trains against.
#[derive(Debug, Clone)]
pub struct AnchorSpace {
    pub layer_id: UnitId,
    pub pca: Pca,
    /// Per-channel importance: variance-weighted absolute loadings,
    /// `w[c] = Σ_k |basis_k[c]|·ev_k / Σ ev`.
    pub component_weights: Vec<f64>,
    /// Source class → centroid in the projected space.
    pub anchor_centroids: BTreeMap<usize, Vec<f64>>,
    /// Source class → margin (nearest-other-centroid distance minus
    /// intra-class spread).
    pub anchor_margins: BTreeMap<usize, f64>,
    /// Largest anchor margin; the hinge threshold of the repair loss.
    pub m_max: f64,
    /// Silhouette of the projected anchors.
    pub s_score: f64,
    pub per_class_s: BTreeMap<usize, f64>,
    /// Projected anchor exemplars and their labels, kept so downstream
    /// stages can score paired-subset silhouettes and spreads.
    pub anchor_projections: Vec<Vec<f64>>,
    pub anchor_labels: Vec<usize>,
}

/// Source-to-target class pairing with its total centroid-distance cost.
#[derive(Debug, Clone, PartialEq)]
pub struct PairingSet {
    /// `(source_class, target_class)`, one entry per target class.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Similarity transform applied to target projections before the loss:
/// `aligned = rotation · (scale · x)`.
#[derive(Debug, Clone)]
pub struct RotationAlignment {
    pub scale: f64,
    /// k×k proper rotation (row-major).
    pub rotation: Vec<Vec<f64>>,
}

impl RotationAlignment {
    pub fn identity(k: usize) -> Self {
        Self { scale: 1.0, rotation: procrustes::identity(k) }
    }

    pub fn apply_one(&self, x: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = x.iter().map(|v| v * self.scale).collect();
        procrustes::mat_vec(&self.rotation, &scaled)
    }

    pub fn apply(&self, points: &[Vec<f64>]) -> Vec<Vec<f64>> {
        points.iter().map(|p| self.apply_one(p)).collect()
    }

    /// Pull a loss gradient back through the transform:
    /// `g_x = scale · rotationᵀ · g_aligned`.
    pub fn backward_one(&self, grad: &[f64]) -> Vec<f64> {
        let k = grad.len();
        (0..k)
            .map(|i| {
                self.scale * (0..k).map(|j| self.rotation[j][i] * grad[j]).sum::<f64>()
            })
            .collect()
    }
}

/// Fit the anchor PCA space on labeled anchor MMC vectors and record the
/// projected class geometry (centroids, margins, silhouettes).
pub fn fit_anchor_space(layer_id: UnitId, anchor_mmcs: &[MmcVector], k: usize) -> Result<AnchorSpace> {
    if anchor_mmcs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let points: Vec<Vec<f64>> = anchor_mmcs.iter().map(|m| m.values.clone()).collect();
    let labels: Vec<usize> = anchor_mmcs.iter().map(|m| m.label).collect();
    let pca = Pca::fit(&points, k)?;
    let projected = pca.project(&points)?;
    let stats = cluster_stats(&projected, &labels)?;

    let total_ev: f64 = pca.explained_variance.iter().sum();
    let dim = pca.dim();
    let component_weights: Vec<f64> = (0..dim)
        .map(|c| {
            if total_ev <= 0.0 {
                1.0 / dim as f64
            } else {
                pca.basis
                    .iter()
                    .zip(&pca.explained_variance)
                    .map(|(b, ev)| b[c].abs() * ev)
                    .sum::<f64>()
                    / total_ev
            }
        })
        .collect();

    let mut anchor_margins = BTreeMap::new();
    for (&class, intra) in &stats.intra_d {
        let sep = nearest_other_centroid_distance(&stats.centroids, class);
        anchor_margins.insert(class, sep - intra);
    }
    let m_max = anchor_margins.values().copied().fold(f64::NEG_INFINITY, f64::max);

    Ok(AnchorSpace {
        layer_id,
        pca,
        component_weights,
        anchor_centroids: stats.centroids,
        anchor_margins,
        m_max,
        s_score: stats.s_score,
        per_class_s: stats.per_class_s,
        anchor_projections: projected,
        anchor_labels: labels,
    })
}

impl AnchorSpace {
    /// Projected anchor exemplars restricted to the paired source classes,
    /// as `(points, labels)`.
    pub fn paired_anchor_points(&self, pairing: &PairingSet) -> (Vec<Vec<f64>>, Vec<usize>) {
        let wanted: std::collections::BTreeSet<usize> =
            pairing.pairs.iter().map(|&(s, _)| s).collect();
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (p, &l) in self.anchor_projections.iter().zip(&self.anchor_labels) {
            if wanted.contains(&l) {
                points.push(p.clone());
                labels.push(l);
            }
        }
        (points, labels)
    }
}

/// Project MMC vectors into the anchor space.
pub fn project(space: &AnchorSpace, mmcs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    space.pca.project(mmcs)
}

/// Scale factor aligning target spread to source spread:
/// ratio of mean inter-class centroid distances of the two projections.
pub fn scale_align(
    source_proj: &[Vec<f64>],
    source_labels: &[usize],
    target_proj: &[Vec<f64>],
    target_labels: &[usize],
) -> Result<f64> {
    let src = cluster_stats(source_proj, source_labels)?;
    let tgt = cluster_stats(target_proj, target_labels)?;
    if tgt.inter_d <= 0.0 || src.inter_d <= 0.0 {
        return Err(Error::DegenerateScale);
    }
    Ok(src.inter_d / tgt.inter_d)
}

/// Closed-form rotation aligning scaled target centroids to their paired
/// anchor centroids, maximizing mean cosine similarity.
pub fn rotation_align(
    source_centroids: &BTreeMap<usize, Vec<f64>>,
    target_centroids: &BTreeMap<usize, Vec<f64>>,
    pairing: &PairingSet,
    scale: f64,
) -> Result<RotationAlignment> {
    if pairing.pairs.len() < 2 {
        return Err(Error::DegenerateRotation(format!(
            "need >= 2 paired classes, got {}",
            pairing.pairs.len()
        )));
    }
    let mut pairs = Vec::with_capacity(pairing.pairs.len());
    for &(cs, ct) in &pairing.pairs {
        let s = source_centroids
            .get(&cs)
            .ok_or_else(|| Error::Pairing(format!("source class {cs} has no centroid")))?;
        let t = target_centroids
            .get(&ct)
            .ok_or_else(|| Error::Pairing(format!("target class {ct} has no centroid")))?;
        pairs.push((s.clone(), t.iter().map(|v| v * scale).collect::<Vec<f64>>()));
    }
    let before = procrustes::mean_cosine(&pairs);
    let rotation = procrustes::best_rotation(&pairs)?;
    let aligned: Vec<_> = pairs
        .iter()
        .map(|(s, t)| (s.clone(), procrustes::mat_vec(&rotation, t)))
        .collect();
    debug_assert!(procrustes::mean_cosine(&aligned) >= before - 1e-9);
    Ok(RotationAlignment { scale, rotation })
}

/// Pair target classes to anchor (source) classes.
///
/// Shortlists the `min(2·|targets|, |sources|)` source classes with the
/// highest per-class silhouette (ties by ascending class index), then solves
/// the minimum-total-centroid-distance assignment.
pub fn pair_anchors(
    source_centroids: &BTreeMap<usize, Vec<f64>>,
    source_per_class_s: &BTreeMap<usize, f64>,
    target_centroids: &BTreeMap<usize, Vec<f64>>,
) -> Result<PairingSet> {
    let n_source = source_centroids.len();
    let n_target = target_centroids.len();
    if n_target == 0 {
        return Err(Error::Pairing("no target classes".into()));
    }
    if n_source < n_target {
        return Err(Error::Pairing(format!(
            "need at least as many source classes as target classes ({n_source} < {n_target})"
        )));
    }

    let mut ranked: Vec<usize> = source_centroids.keys().copied().collect();
    ranked.sort_by(|&a, &b| {
        let sa = source_per_class_s.get(&a).copied().unwrap_or(f64::NEG_INFINITY);
        let sb = source_per_class_s.get(&b).copied().unwrap_or(f64::NEG_INFINITY);
        sb.partial_cmp(&sa).unwrap().then(a.cmp(&b))
    });
    let m = (2 * n_target).min(n_source);
    let mut shortlist = ranked[..m].to_vec();
    shortlist.sort_unstable(); // stable column order for the assignment

    let targets: Vec<usize> = target_centroids.keys().copied().collect();
    let cost: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| {
            let tc = &target_centroids[t];
            shortlist
                .iter()
                .map(|s| crate::latent::euclidean(&source_centroids[s], tc))
                .collect()
        })
        .collect();
    let (assignment, total) = min_cost_assignment(&cost);
    let pairs: Vec<(usize, usize)> = targets
        .iter()
        .enumerate()
        .map(|(row, &t)| (shortlist[assignment[row]], t))
        .collect();
    Ok(PairingSet { pairs, cost: total })
}
