//! The recombined model: selected frozen units chained through trained
//! connectors, optional channel masks between layers, and a linear head on
//! the final per-channel magnitude vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{mmc, mmc_backward};
use crate::ops::Dense;
use crate::srr::{ChannelMask, Connector, ConnectorCache, ConnectorGrads, TrainConfig};
use crate::tensor::{FeatureBatch, TensorShape};
use crate::zoo::{
    backward_lunit, forward_lunit_cached, resource_of, LUnit, ResourceCost, UnitCache,
};

/// One selected layer: its frozen unit, the trained connector feeding it,
/// and an optional output channel mask.
#[derive(Debug, Clone)]
pub struct RecombinedLayer {
    pub unit: LUnit,
    pub connector: Connector,
    pub channel_mask: Option<ChannelMask>,
}

impl RecombinedLayer {
    /// Output shape after the mask, the next layer's input shape.
    pub fn out_shape(&self) -> TensorShape {
        let full = self.unit.out_shape;
        match &self.channel_mask {
            Some(m) => TensorShape::new(m.retained.len(), full.height, full.width),
            None => full,
        }
    }
}

/// Where a model came from: enough to reproduce it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Provenance {
    /// Hash of the experiment configuration that produced the model.
    pub config_hash: String,
    pub run_seed: u64,
}

/// Keep the retained channels of every sample, dropping the rest.
fn select_channels(batch: &FeatureBatch, retained: &[usize]) -> FeatureBatch {
    let shape = batch.shape();
    let out_shape = TensorShape::new(retained.len(), shape.height, shape.width);
    let mut out = FeatureBatch::zeros(out_shape, batch.len());
    let spatial = shape.spatial();
    for s in 0..batch.len() {
        let x = batch.sample(s);
        let y = out.sample_mut(s);
        for (c_out, &c_in) in retained.iter().enumerate() {
            y[c_out * spatial..(c_out + 1) * spatial]
                .copy_from_slice(&x[c_in * spatial..(c_in + 1) * spatial]);
        }
    }
    out
}

/// Adjoint of [`select_channels`]: place gradients back into the full
/// channel layout, zeros in the dropped channels.
fn scatter_channels(grad: &FeatureBatch, full_shape: TensorShape, retained: &[usize]) -> FeatureBatch {
    let mut out = FeatureBatch::zeros(full_shape, grad.len());
    let spatial = full_shape.spatial();
    for s in 0..grad.len() {
        let g = grad.sample(s);
        let y = out.sample_mut(s);
        for (c_out, &c_in) in retained.iter().enumerate() {
            y[c_in * spatial..(c_in + 1) * spatial]
                .copy_from_slice(&g[c_out * spatial..(c_out + 1) * spatial]);
        }
    }
    out
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub(crate) fn softmax_cross_entropy(
    logits: &FeatureBatch,
    labels: &[usize],
) -> Result<(f64, FeatureBatch)> {
    if logits.len() != labels.len() {
        return Err(Error::Shape {
            expected: format!("{} labels", logits.len()),
            got: format!("{}", labels.len()),
        });
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    let classes = logits.shape().elements();
    let n = logits.len() as f64;
    let mut grad = FeatureBatch::zeros(logits.shape(), logits.len());
    let mut loss = 0.0;
    for s in 0..logits.len() {
        let z = logits.sample(s);
        let label = labels[s];
        if label >= classes {
            return Err(Error::Config(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|&v| (v - zmax).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += -(exps[label] / sum).ln();
        let g = grad.sample_mut(s);
        for (c, gv) in g.iter_mut().enumerate() {
            let p = exps[c] / sum;
            *gv = (p - if c == label { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Fit a linear classifier on fixed feature vectors with momentum SGD,
/// keeping the best-loss epoch.
///
/// Features are standardized per dimension for the optimization (raw MMC
/// magnitudes vary wildly between chains, which stalls a fixed learning
/// rate), and the affine standardization is folded back into the returned
/// head, so it applies to raw features. Constant dimensions are left
/// unscaled.
pub(crate) fn fit_linear_head(
    x_raw: &FeatureBatch,
    labels: &[usize],
    n_way: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Dense, FitReport)> {
    cfg.validate()?;
    if n_way < 2 {
        return Err(Error::Config(format!("head needs >= 2 classes, got {n_way}")));
    }
    if x_raw.is_empty() {
        return Err(Error::EmptyInput);
    }
    let dim = x_raw.shape().elements();
    let n = x_raw.len() as f64;

    let mut mean = vec![0.0; dim];
    for s in x_raw.iter_samples() {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; dim];
    for s in x_raw.iter_samples() {
        for ((sd, v), m) in std.iter_mut().zip(s).zip(&mean) {
            *sd += (v - m) * (v - m) / n;
        }
    }
    for sd in std.iter_mut() {
        *sd = sd.sqrt();
        if *sd < 1e-8 {
            *sd = 1.0;
        }
    }
    let mut data = Vec::with_capacity(x_raw.data().len());
    for s in x_raw.iter_samples() {
        for ((v, m), sd) in s.iter().zip(&mean).zip(&std) {
            data.push((v - m) / sd);
        }
    }
    let x = FeatureBatch::new(x_raw.shape(), data)?;

    let mut head = Dense::new(dim, n_way);
    head.init_kaiming(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut vel_w = vec![0.0; head.weight.len()];
    let mut vel_b = vec![0.0; head.bias.len()];
    let mut best: Option<(f64, usize, Dense)> = None;
    let mut trace = Vec::with_capacity(cfg.episodes + 1);
    for epoch in 0..=cfg.episodes {
        let logits = head.forward(&x)?;
        let (loss, grad_logits) = softmax_cross_entropy(&logits, labels)?;
        if !loss.is_finite() {
            return Err(Error::RepairDivergence { episode: epoch });
        }
        trace.push(loss);
        if best.as_ref().map_or(true, |(b, _, _)| loss < *b) {
            best = Some((loss, epoch, head.clone()));
        }
        if epoch == cfg.episodes {
            break;
        }
        let (_, grads) = head.backward(&x, &grad_logits)?;
        let lr = cfg.lr_at(epoch);
        for ((p, g), v) in head.weight.iter_mut().zip(&grads.weight).zip(&mut vel_w) {
            *v = cfg.momentum * *v + g;
            *p -= lr * *v;
        }
        for ((p, g), v) in head.bias.iter_mut().zip(&grads.bias).zip(&mut vel_b) {
            *v = cfg.momentum * *v + g;
            *p -= lr * *v;
        }
    }
    let (_, best_epoch, mut best_head) = best.expect("at least one evaluation");

    // Fold `(v - mean) / std` into the weights: W·diag(1/std), b − W'·mean.
    for o in 0..n_way {
        let mut shift = 0.0;
        for i in 0..dim {
            best_head.weight[o * dim + i] /= std[i];
            shift += best_head.weight[o * dim + i] * mean[i];
        }
        best_head.bias[o] -= shift;
    }
    Ok((best_head, FitReport { loss_trace: trace, best_epoch, reverted: false }))
}

/// Global gradient-norm cap for the joint fine-tune. The head is fit on
/// standardized features, so its folded weights carry a 1/σ factor that
/// amplifies upstream gradients; clipping keeps the fixed learning rate
/// usable across feature scales.
pub(crate) const FINETUNE_CLIP_NORM: f64 = 5.0;

/// Per-layer intermediates for the joint backward pass.
struct ChainCache {
    conn: Vec<ConnectorCache>,
    unit: Vec<UnitCache>,
}

/// Head or fine-tune training report.
#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    /// Loss per epoch; entry 0 is the pre-training loss.
    pub loss_trace: Vec<f64>,
    /// Epoch index of the kept parameters.
    pub best_epoch: usize,
    /// Set when training diverged and the pre-training parameters were
    /// restored.
    pub reverted: bool,
}

/// Post-search fine-tuning parameters (connectors + head only).
#[derive(Debug, Clone, Copy, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Step-decay interval in epochs.
    pub lr_step: usize,
    pub lr_decay: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 30, lr: 1e-2, momentum: 0.95, lr_step: 20, lr_decay: 0.5 }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if self.lr_step == 0 {
            return Err(Error::Config("lr_step must be >= 1".into()));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return Err(Error::Config(format!("lr_decay must be positive, got {}", self.lr_decay)));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_step) as i32)
    }
}

/// Frozen units chained through connectors, with a linear head on the final
/// masked MMC vector.
#[derive(Debug, Clone)]
pub struct RecombinedModel {
    pub input_shape: TensorShape,
    pub layers: Vec<RecombinedLayer>,
    /// Linear classifier on the feature MMC; attached after the search.
    pub head: Option<Dense>,
    pub provenance: Provenance,
}

impl RecombinedModel {
    /// Assemble and validate the shape chain: each connector maps the
    /// previous (masked) output to its unit's input.
    pub fn new(
        input_shape: TensorShape,
        layers: Vec<RecombinedLayer>,
        provenance: Provenance,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("recombined model needs >= 1 layer".into()));
        }
        let mut carried = input_shape;
        for (i, layer) in layers.iter().enumerate() {
            if layer.connector.target_shape != carried {
                return Err(Error::Shape {
                    expected: format!("layer {i} connector input {carried}"),
                    got: format!("{}", layer.connector.target_shape),
                });
            }
            if layer.connector.expected_shape != layer.unit.in_shape {
                return Err(Error::Shape {
                    expected: format!("layer {i} unit input {}", layer.unit.in_shape),
                    got: format!("connector output {}", layer.connector.expected_shape),
                });
            }
            if let Some(mask) = &layer.channel_mask {
                let c = layer.unit.out_shape.channels;
                if mask.retained.iter().any(|&r| r >= c) {
                    return Err(Error::Config(format!(
                        "layer {i} mask retains a channel >= {c}"
                    )));
                }
            }
            carried = layer.out_shape();
        }
        Ok(Self { input_shape, layers, head: None, provenance })
    }

    /// Shape of the final masked feature map.
    pub fn feature_shape(&self) -> TensorShape {
        self.layers.last().expect("validated non-empty").out_shape()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Forward to the final masked feature map.
    pub fn forward_features(&self, batch: &FeatureBatch) -> Result<FeatureBatch> {
        let mut cur = batch.clone();
        for layer in &self.layers {
            let mapped = layer.connector.forward(&cur)?;
            let full = crate::zoo::forward_lunit(&layer.unit, &mapped)?;
            cur = match &layer.channel_mask {
                Some(m) => select_channels(&full, &m.retained),
                None => full,
            };
        }
        Ok(cur)
    }

    fn forward_features_cached(&self, batch: &FeatureBatch) -> Result<(FeatureBatch, ChainCache)> {
        let mut cur = batch.clone();
        let mut cache = ChainCache { conn: Vec::new(), unit: Vec::new() };
        for layer in &self.layers {
            let (mapped, conn_cache) = layer.connector.forward_cached(&cur)?;
            let (full, unit_cache) = forward_lunit_cached(&layer.unit, &mapped)?;
            cache.conn.push(conn_cache);
            cache.unit.push(unit_cache);
            cur = match &layer.channel_mask {
                Some(m) => select_channels(&full, &m.retained),
                None => full,
            };
        }
        Ok((cur, cache))
    }

    /// Per-channel magnitude vectors of the final features.
    pub fn feature_mmcs(&self, batch: &FeatureBatch) -> Result<Vec<Vec<f64>>> {
        mmc(&self.forward_features(batch)?)
    }

    fn mmc_batch(&self, features: &FeatureBatch) -> Result<FeatureBatch> {
        let vectors = mmc(features)?;
        let dim = vectors[0].len();
        FeatureBatch::new(
            TensorShape::new(dim, 1, 1),
            vectors.into_iter().flatten().collect(),
        )
    }

    /// Class scores for a batch; requires an attached head.
    pub fn logits(&self, batch: &FeatureBatch) -> Result<FeatureBatch> {
        let head = self.head.as_ref().ok_or_else(|| Error::Config("no head attached".into()))?;
        let features = self.forward_features(batch)?;
        head.forward(&self.mmc_batch(&features)?)
    }

    /// Top-1 class per sample (lowest index wins ties).
    pub fn predict(&self, batch: &FeatureBatch) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        Ok(logits
            .iter_samples()
            .map(|z| {
                z.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(c, _)| c)
                    .unwrap_or(0)
            })
            .collect())
    }

    /// Sum of member costs: units, connectors, and the head when attached.
    pub fn total_cost(&self) -> ResourceCost {
        let mut total = ResourceCost::default();
        for layer in &self.layers {
            total += resource_of(&layer.unit);
            total += layer.connector.cost();
        }
        if let Some(head) = &self.head {
            total += ResourceCost { flops: head.flops(), params: head.params() };
        }
        total
    }

    /// Parameter hashes of the frozen units, for freeze-contract checks.
    pub fn unit_hashes(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.unit.param_hash()).collect()
    }

    /// Quantize the trainable parameters (connectors and head) through f32,
    /// the serialized precision, so evaluating the in-memory model matches
    /// evaluating a reloaded copy exactly.
    pub fn quantize_trainable(&mut self) {
        for layer in &mut self.layers {
            for (_, slot) in layer.connector.param_slots_mut() {
                crate::tensor::quantize_f32(slot);
            }
        }
        if let Some(head) = &mut self.head {
            crate::tensor::quantize_f32(&mut head.weight);
            crate::tensor::quantize_f32(&mut head.bias);
        }
    }

    /// Initialize and train a linear head on the (fixed) support features.
    ///
    /// Connectors stay untouched: features are computed once and the head is
    /// fit on them with momentum SGD under `cfg`'s schedule (see
    /// [`fit_linear_head`]).
    pub fn attach_head(
        &mut self,
        support: &FeatureBatch,
        labels: &[usize],
        n_way: usize,
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<FitReport> {
        let features = self.forward_features(support)?;
        let x = self.mmc_batch(&features)?;
        let (head, report) = fit_linear_head(&x, labels, n_way, cfg, seed)?;
        self.head = Some(head);
        Ok(report)
    }

    /// Flat snapshot of every trainable parameter (connectors + head).
    fn trainable_snapshot(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for (_, slot) in layer.connector.param_slots() {
                out.push(slot.clone());
            }
        }
        if let Some(head) = &self.head {
            out.push(head.weight.clone());
            out.push(head.bias.clone());
        }
        out
    }

    fn restore_trainable(&mut self, snapshot: &[Vec<f64>]) {
        let mut it = snapshot.iter();
        for layer in &mut self.layers {
            for (_, slot) in layer.connector.param_slots_mut() {
                *slot = it.next().expect("snapshot shape").clone();
            }
        }
        if let Some(head) = &mut self.head {
            head.weight = it.next().expect("snapshot shape").clone();
            head.bias = it.next().expect("snapshot shape").clone();
        }
        debug_assert!(it.next().is_none());
    }

    /// Joint fine-tuning of connectors and head on the support set; frozen
    /// units stay frozen. Keeps the best-loss epoch; a non-finite loss
    /// reverts to the pre-finetune parameters and flags the report.
    pub fn post_finetune(
        &mut self,
        support: &FeatureBatch,
        labels: &[usize],
        cfg: &FinetuneConfig,
    ) -> Result<FitReport> {
        cfg.validate()?;
        let head_dim = {
            let head =
                self.head.as_ref().ok_or_else(|| Error::Config("no head attached".into()))?;
            head.in_features
        };
        if self.feature_shape().channels != head_dim {
            return Err(Error::Shape {
                expected: format!("head over {} features", self.feature_shape().channels),
                got: format!("{head_dim}"),
            });
        }

        let initial = self.trainable_snapshot();
        let mut velocity: Vec<Vec<f64>> =
            initial.iter().map(|s| vec![0.0; s.len()]).collect();
        let mut best: Option<(f64, usize, Vec<Vec<f64>>)> = None;
        let mut trace = Vec::with_capacity(cfg.epochs + 1);

        for epoch in 0..=cfg.epochs {
            let (features, cache) = self.forward_features_cached(support)?;
            let x = self.mmc_batch(&features)?;
            let head = self.head.as_ref().expect("checked above");
            let logits = head.forward(&x)?;
            let (loss, grad_logits) = softmax_cross_entropy(&logits, labels)?;
            if !loss.is_finite() {
                // Keep only the finite prefix in the trace (reports are
                // serialized as JSON, which has no NaN).
                self.restore_trainable(&initial);
                return Ok(FitReport { loss_trace: trace, best_epoch: 0, reverted: true });
            }
            trace.push(loss);
            if best.as_ref().map_or(true, |(b, _, _)| loss < *b) {
                best = Some((loss, epoch, self.trainable_snapshot()));
            }
            if epoch == cfg.epochs {
                break;
            }

            // Backward: head → MMC → per layer (mask scatter → unit →
            // connector), collecting gradients for every trainable slot in
            // snapshot order.
            let (grad_x, head_grads) = head.backward(&x, &grad_logits)?;
            let grad_rows: Vec<Vec<f64>> =
                grad_x.iter_samples().map(|r| r.to_vec()).collect();
            let mut grad = mmc_backward(&features, &grad_rows)?;
            let mut conn_grads: Vec<ConnectorGrads> = Vec::with_capacity(self.layers.len());
            for (i, layer) in self.layers.iter().enumerate().rev() {
                let full_grad = match &layer.channel_mask {
                    Some(m) => scatter_channels(&grad, layer.unit.out_shape, &m.retained),
                    None => grad,
                };
                let g_unit_in = backward_lunit(&layer.unit, &cache.unit[i], &full_grad)?;
                let (g_conn_in, grads) =
                    layer.connector.backward_with_input(&cache.conn[i], &g_unit_in)?;
                conn_grads.push(grads);
                grad = g_conn_in;
            }
            conn_grads.reverse();

            let mut grad_sq = head_grads.weight.iter().map(|g| g * g).sum::<f64>()
                + head_grads.bias.iter().map(|g| g * g).sum::<f64>();
            for grads in &conn_grads {
                for slot in Connector::grad_slots(grads) {
                    grad_sq += slot.iter().map(|g| g * g).sum::<f64>();
                }
            }
            let clip = if grad_sq.sqrt() > FINETUNE_CLIP_NORM {
                FINETUNE_CLIP_NORM / grad_sq.sqrt()
            } else {
                1.0
            };

            let lr = cfg.lr_at(epoch);
            let mut slot_idx = 0;
            let step = |p: &mut Vec<f64>, g: &Vec<f64>, v: &mut Vec<f64>| {
                for ((pv, gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vv = cfg.momentum * *vv + gv * clip;
                    *pv -= lr * *vv;
                }
            };
            for (layer, grads) in self.layers.iter_mut().zip(&conn_grads) {
                let slots = Connector::grad_slots(grads)
                    .map(|g| g.clone());
                for ((_, p), g) in layer.connector.param_slots_mut().into_iter().zip(slots.iter())
                {
                    step(p, g, &mut velocity[slot_idx]);
                    slot_idx += 1;
                }
            }
            let head = self.head.as_mut().expect("checked above");
            step(&mut head.weight, &head_grads.weight, &mut velocity[slot_idx]);
            step(&mut head.bias, &head_grads.bias, &mut velocity[slot_idx + 1]);
        }

        let (_, best_epoch, snapshot) = best.expect("at least one evaluation");
        self.restore_trainable(&snapshot);
        Ok(FitReport { loss_trace: trace, best_epoch, reverted: false })
    }
}
