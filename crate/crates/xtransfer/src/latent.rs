//! Activation statistics: per-channel mean magnitudes, silhouette scores,
//! centroid geometry and source/target shift.
//!
//! These are the quantities every other stage reads: repairs are scored by
//! silhouette of projected magnitudes, and the search controller compares
//! layers purely through these numbers.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::FeatureBatch;

/// Per-channel mean absolute activation of one sample, with its class label.
#[derive(Debug, Clone)]
pub struct MmcVector {
    pub values: Vec<f64>,
    pub label: usize,
}

/// Centroid geometry and silhouette summary of a labeled point set.
#[derive(Debug, Clone)]
pub struct ClusterStats {
    /// Per-class mean vectors.
    pub centroids: BTreeMap<usize, Vec<f64>>,
    /// Mean Euclidean distance over unordered centroid pairs.
    pub inter_d: f64,
    /// Per-class mean sample-to-centroid distance.
    pub intra_d: BTreeMap<usize, f64>,
    /// Mean silhouette over all samples, in [-1, 1].
    pub s_score: f64,
    /// Mean silhouette per class.
    pub per_class_s: BTreeMap<usize, f64>,
}

/// Per-channel mean of |activation| over spatial positions, one vector per
/// sample. Output length equals the channel count.
pub fn mmc(batch: &FeatureBatch) -> Result<Vec<Vec<f64>>> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    let shape = batch.shape();
    let spatial = shape.spatial() as f64;
    let out = batch
        .iter_samples()
        .map(|sample| {
            sample
                .chunks_exact(shape.spatial())
                .map(|chan| chan.iter().map(|v| v.abs()).sum::<f64>() / spatial)
                .collect()
        })
        .collect();
    Ok(out)
}

/// Pull a loss gradient at the MMC vectors back to the activations:
/// `d mmc[c] / d x[c,y,x] = sign(x[c,y,x]) / spatial`.
///
/// The subgradient at exactly zero is taken as zero.
pub fn mmc_backward(batch: &FeatureBatch, grad_mmc: &[Vec<f64>]) -> Result<FeatureBatch> {
    let shape = batch.shape();
    if grad_mmc.len() != batch.len() {
        return Err(Error::Shape {
            expected: format!("{} gradient rows", batch.len()),
            got: format!("{}", grad_mmc.len()),
        });
    }
    let spatial = shape.spatial() as f64;
    let mut grad = FeatureBatch::zeros(shape, batch.len());
    for s in 0..batch.len() {
        let x = batch.sample(s);
        let g = grad.sample_mut(s);
        for (c, &gc) in grad_mmc[s].iter().enumerate() {
            for p in 0..shape.spatial() {
                let i = c * shape.spatial() + p;
                // f64::signum maps ±0.0 to ±1.0; force the subgradient to 0.
                let sign = if x[i] == 0.0 { 0.0 } else { x[i].signum() };
                g[i] = gc * sign / spatial;
            }
        }
    }
    Ok(grad)
}

/// [`mmc`] paired with labels.
pub fn mmc_labeled(batch: &FeatureBatch, labels: &[usize]) -> Result<Vec<MmcVector>> {
    if labels.len() != batch.len() {
        return Err(Error::Shape {
            expected: format!("{} labels", batch.len()),
            got: format!("{}", labels.len()),
        });
    }
    Ok(mmc(batch)?
        .into_iter()
        .zip(labels)
        .map(|(values, &label)| MmcVector { values, label })
        .collect())
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn class_indices(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    by_class
}

fn check_clustering_input(points: &[Vec<f64>], labels: &[usize]) -> Result<BTreeMap<usize, Vec<usize>>> {
    if points.is_empty() {
        return Err(Error::EmptyInput);
    }
    if points.len() != labels.len() {
        return Err(Error::Shape {
            expected: format!("{} labels", points.len()),
            got: format!("{}", labels.len()),
        });
    }
    let by_class = class_indices(labels);
    if by_class.len() < 2 {
        return Err(Error::DegenerateClustering(format!(
            "need >= 2 classes, got {}",
            by_class.len()
        )));
    }
    Ok(by_class)
}

/// Silhouette score with Euclidean distances.
///
/// For sample i, `a` is the mean distance to same-class samples and `b`
/// the smallest mean distance to another class; `s(i) = (b-a)/max(a,b)`.
/// Samples in singleton classes contribute 0. Returns the global mean and
/// per-class means.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<(f64, BTreeMap<usize, f64>)> {
    let by_class = check_clustering_input(points, labels)?;
    let n = points.len();

    // Pairwise distances once; everything below is sums over rows.
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(&points[i], &points[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    let mut per_class_sum: BTreeMap<usize, f64> = BTreeMap::new();
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        let own_count = by_class[&own].len();
        let s_i = if own_count <= 1 {
            0.0
        } else {
            let a = by_class[&own]
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| dist[i * n + j])
                .sum::<f64>()
                / (own_count - 1) as f64;
            let b = by_class
                .iter()
                .filter(|(&c, _)| c != own)
                .map(|(_, idx)| idx.iter().map(|&j| dist[i * n + j]).sum::<f64>() / idx.len() as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m == 0.0 {
                0.0
            } else {
                (b - a) / m
            }
        };
        total += s_i;
        *per_class_sum.entry(own).or_insert(0.0) += s_i;
    }

    let per_class = per_class_sum
        .into_iter()
        .map(|(c, sum)| (c, sum / by_class[&c].len() as f64))
        .collect();
    Ok((total / n as f64, per_class))
}

/// Centroids, global inter-class distance, per-class intra distances and
/// silhouette in one pass.
pub fn cluster_stats(points: &[Vec<f64>], labels: &[usize]) -> Result<ClusterStats> {
    let by_class = check_clustering_input(points, labels)?;
    let dim = points[0].len();

    let mut centroids = BTreeMap::new();
    for (&c, idx) in &by_class {
        let mut mean = vec![0.0; dim];
        for &i in idx {
            for (m, v) in mean.iter_mut().zip(&points[i]) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= idx.len() as f64;
        }
        centroids.insert(c, mean);
    }

    let inter_d = mean_pairwise_centroid_distance(&centroids);

    let intra_d = by_class
        .iter()
        .map(|(&c, idx)| {
            let cen = &centroids[&c];
            let mean =
                idx.iter().map(|&i| euclidean(&points[i], cen)).sum::<f64>() / idx.len() as f64;
            (c, mean)
        })
        .collect();

    let (s_score, per_class_s) = silhouette(points, labels)?;
    Ok(ClusterStats { centroids, inter_d, intra_d, s_score, per_class_s })
}

/// Mean Euclidean distance over unordered pairs of centroids.
pub fn mean_pairwise_centroid_distance(centroids: &BTreeMap<usize, Vec<f64>>) -> f64 {
    let cens: Vec<&Vec<f64>> = centroids.values().collect();
    let k = cens.len();
    if k < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            sum += euclidean(cens[i], cens[j]);
        }
    }
    sum / (k * (k - 1) / 2) as f64
}

/// Distance of a class centroid to its nearest other centroid.
///
/// This is the per-class separation used for anchor margins; the global
/// [`ClusterStats::inter_d`] is the scalar used by scale alignment.
pub fn nearest_other_centroid_distance(
    centroids: &BTreeMap<usize, Vec<f64>>,
    class: usize,
) -> f64 {
    let own = &centroids[&class];
    centroids
        .iter()
        .filter(|(&c, _)| c != class)
        .map(|(_, cen)| euclidean(own, cen))
        .fold(f64::INFINITY, f64::min)
}

/// Euclidean distance between mean source and target MMC vectors, normalized
/// by the source mean's norm. Zero for identical distributions.
pub fn mmc_shift(source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyInput);
    }
    let dim = source[0].len();
    if target[0].len() != dim {
        return Err(Error::Shape {
            expected: format!("{dim} channels"),
            got: format!("{} channels", target[0].len()),
        });
    }
    let mean = |vs: &[Vec<f64>]| -> Vec<f64> {
        let mut m = vec![0.0; dim];
        for v in vs {
            for (mi, vi) in m.iter_mut().zip(v) {
                *mi += vi;
            }
        }
        for mi in m.iter_mut() {
            *mi /= vs.len() as f64;
        }
        m
    };
    let ms = mean(source);
    let mt = mean(target);
    let norm = ms.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = euclidean(&ms, &mt);
    if norm == 0.0 {
        return Ok(if diff == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(diff / norm)
}
