//! The anchor-based repair loss and its analytic gradients.
//!
//! Two terms over projected target features:
//! a **positive** pull of each paired target class centroid onto its anchor
//! centroid (mean over pairs), and a **negative** hinge pushing cross-class
//! sample pairs at least `m_max` apart (mean over all ordered cross-class
//! pairs in the batch).

use std::collections::BTreeMap;

use crate::anchor::{AnchorSpace, PairingSet};
use crate::error::{Error, Result};
use crate::latent::euclidean;

/// Loss value with exact gradients w.r.t. every projected sample.
#[derive(Debug, Clone)]
pub struct RepairLoss {
    pub loss: f64,
    pub positive_term: f64,
    pub negative_term: f64,
    /// `d loss / d target_proj[i]`, same order as the input.
    pub grads: Vec<Vec<f64>>,
    /// Pairs whose target class had no sample in the batch.
    pub skipped_pairs: usize,
}

/// Evaluate the repair loss on labeled projected target samples.
///
/// Pairs whose target class is absent from the batch are skipped and
/// counted. Gradients are exact subgradients (zero at the |·| and hinge
/// kinks and at coincident points).
pub fn repair_loss(
    space: &AnchorSpace,
    pairing: &PairingSet,
    target_proj: &[Vec<f64>],
    labels: &[usize],
) -> Result<RepairLoss> {
    if target_proj.is_empty() {
        return Err(Error::EmptyInput);
    }
    if target_proj.len() != labels.len() {
        return Err(Error::Shape {
            expected: format!("{} labels", target_proj.len()),
            got: format!("{}", labels.len()),
        });
    }
    let k = space.pca.k();
    for p in target_proj {
        if p.len() != k {
            return Err(Error::Shape {
                expected: format!("projection dim {k}"),
                got: format!("{}", p.len()),
            });
        }
    }

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }

    let n = target_proj.len();
    let mut grads = vec![vec![0.0; k]; n];

    // Positive term: mean anchor-to-centroid distance over non-skipped pairs.
    let mut skipped = 0usize;
    let mut used: Vec<(&Vec<usize>, Vec<f64>, &Vec<f64>, f64)> = Vec::new();
    for &(cs, ct) in &pairing.pairs {
        let anchor = space
            .anchor_centroids
            .get(&cs)
            .ok_or_else(|| Error::Pairing(format!("source class {cs} has no anchor centroid")))?;
        let Some(idxs) = by_class.get(&ct) else {
            skipped += 1;
            continue;
        };
        let mut centroid = vec![0.0; k];
        for &i in idxs {
            for (c, v) in centroid.iter_mut().zip(&target_proj[i]) {
                *c += v;
            }
        }
        for c in centroid.iter_mut() {
            *c /= idxs.len() as f64;
        }
        let d = euclidean(anchor, &centroid);
        used.push((idxs, centroid, anchor, d));
    }
    let n_pairs = used.len();
    let mut positive = 0.0;
    for (idxs, centroid, anchor, d) in &used {
        positive += d / n_pairs as f64;
        if *d > 0.0 {
            let scale = 1.0 / (*d * idxs.len() as f64 * n_pairs as f64);
            for &i in *idxs {
                for c in 0..k {
                    grads[i][c] += (centroid[c] - anchor[c]) * scale;
                }
            }
        }
    }

    // Negative term: hinge over ordered cross-class sample pairs.
    let mut cross_pairs = 0usize;
    let mut hinge_sum = 0.0;
    let mut hinge_grads = vec![vec![0.0; k]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j || labels[i] == labels[j] {
                continue;
            }
            cross_pairs += 1;
            let d = euclidean(&target_proj[i], &target_proj[j]);
            let slack = space.m_max - d;
            if slack > 0.0 {
                hinge_sum += slack;
                if d > 0.0 {
                    for c in 0..k {
                        let dir = (target_proj[i][c] - target_proj[j][c]) / d;
                        hinge_grads[i][c] -= dir;
                        hinge_grads[j][c] += dir;
                    }
                }
            }
        }
    }
    let negative = if cross_pairs > 0 { hinge_sum / cross_pairs as f64 } else { 0.0 };
    if cross_pairs > 0 {
        for (g, h) in grads.iter_mut().zip(&hinge_grads) {
            for c in 0..k {
                g[c] += h[c] / cross_pairs as f64;
            }
        }
    }

    Ok(RepairLoss {
        loss: positive + negative,
        positive_term: positive,
        negative_term: negative,
        grads,
        skipped_pairs: skipped,
    })
}
