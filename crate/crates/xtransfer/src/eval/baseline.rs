//! Reference baselines: frozen-backbone transfer learning and full
//! fine-tuning, both driven through [`default_reshape`] so they accept the
//! target modality without trainable connectors.
//!
//! Both baselines clone the source model; evaluation never mutates the zoo.

use crate::error::{Error, Result};
use crate::eval::metrics::top1_accuracy;
use crate::eval::task::FewShotTask;
use crate::latent::{mmc, mmc_backward};
use crate::lws::model::{fit_linear_head, softmax_cross_entropy, FINETUNE_CLIP_NORM};
use crate::lws::FitReport;
use crate::ops::Dense;
use crate::srr::{default_reshape, default_reshape_cost};
use crate::srr::TrainConfig;
use crate::tensor::{FeatureBatch, TensorShape};
use crate::zoo::{forward_lunit_cached, LUnit, ResourceCost, SourceModel};
use crate::zoo::backward_lunit_trainable;

/// Flatten per-sample MMC vectors into a `(dim, 1, 1)` feature batch.
pub(crate) fn mmc_feature_batch(features: &FeatureBatch) -> Result<FeatureBatch> {
    let vectors = mmc(features)?;
    let dim = vectors[0].len();
    FeatureBatch::new(
        TensorShape::new(dim, 1, 1),
        vectors.into_iter().flatten().collect(),
    )
}

/// A source backbone adapted to one task: reshape, forward, pool channel
/// magnitudes, classify. The backbone is the transfer-learning copy (frozen
/// weights) or the fine-tuned copy (updated weights).
#[derive(Debug, Clone)]
pub struct BaselineModel {
    pub backbone: SourceModel,
    pub head: Dense,
    pub fit: FitReport,
    /// Shape of the task inputs this model was fit on.
    pub task_shape: TensorShape,
}

impl BaselineModel {
    fn features(&self, batch: &FeatureBatch) -> Result<FeatureBatch> {
        let reshaped = default_reshape(batch, self.backbone.input_shape())?;
        let out = self.backbone.forward_to(&reshaped, self.backbone.depth() - 1)?;
        mmc_feature_batch(&out)
    }

    /// Class scores for a batch of task-modality inputs.
    pub fn logits(&self, batch: &FeatureBatch) -> Result<FeatureBatch> {
        batch.expect_shape(self.task_shape)?;
        self.head.forward(&self.features(batch)?)
    }

    /// Top-1 class indices.
    pub fn predict(&self, batch: &FeatureBatch) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        Ok((0..logits.len())
            .map(|s| {
                let z = logits.sample(s);
                let mut best = 0;
                for (c, v) in z.iter().enumerate() {
                    if *v > z[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    /// Query top-1 accuracy; `Config` when the head width and way count
    /// disagree.
    pub fn accuracy(&self, task: &FewShotTask) -> Result<f64> {
        if self.head.out_features != task.n_way {
            return Err(Error::Config(format!(
                "head predicts {} classes, task is {}-way",
                self.head.out_features, task.n_way
            )));
        }
        top1_accuracy(&self.predict(&task.query)?, &task.query_labels)
    }

    /// Support top-1 accuracy, for the overfitting gap.
    pub fn train_accuracy(&self, task: &FewShotTask) -> Result<f64> {
        top1_accuracy(&self.predict(&task.support)?, &task.support_labels)
    }

    /// Full inference cost: reshape, backbone, head.
    pub fn cost(&self) -> ResourceCost {
        self.backbone.total_cost()
            + default_reshape_cost(self.task_shape, self.backbone.input_shape())
            + ResourceCost { flops: self.head.flops(), params: self.head.params() }
    }
}

/// Transfer-learning baseline: freeze the backbone, fit a linear head on the
/// support set's final-layer channel magnitudes.
pub fn baseline_tl(
    source: &SourceModel,
    task: &FewShotTask,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<BaselineModel> {
    task.validate()?;
    let reshaped = default_reshape(&task.support, source.input_shape())?;
    let feats = source.forward_to(&reshaped, source.depth() - 1)?;
    let x = mmc_feature_batch(&feats)?;
    let (head, fit) = fit_linear_head(&x, &task.support_labels, task.n_way, cfg, seed)?;
    Ok(BaselineModel { backbone: source.clone(), head, fit, task_shape: task.support.shape() })
}

fn snapshot_units(units: &[LUnit]) -> Vec<Vec<f64>> {
    units.iter().map(LUnit::params_flat).collect()
}

fn restore_units(units: &mut [LUnit], snapshot: &[Vec<f64>]) {
    for (unit, flat) in units.iter_mut().zip(snapshot) {
        let mut offset = 0;
        for (_, slot) in unit.param_slots_mut() {
            let len = slot.len();
            slot.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
    }
}

/// Fine-tuning baseline: clone the backbone and train every parameter plus
/// the head jointly on the support set.
///
/// The head starts from the zero-episode transfer head, so fine-tuning for
/// zero epochs is exactly the transfer baseline with zero head episodes.
/// Gradients are clipped to the same global norm as the pipeline fine-tune,
/// the best-loss epoch is kept, and a non-finite loss reverts to the initial
/// parameters with the report marked `reverted`.
pub fn baseline_ft(
    source: &SourceModel,
    task: &FewShotTask,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<BaselineModel> {
    task.validate()?;
    cfg.validate()?;
    let mut backbone = source.clone();
    let reshaped = default_reshape(&task.support, backbone.input_shape())?;
    let depth = backbone.depth();

    let feats = backbone.forward_to(&reshaped, depth - 1)?;
    let x0 = mmc_feature_batch(&feats)?;
    let zero_episodes = TrainConfig { episodes: 0, ..cfg.clone() };
    let (mut head, _) =
        fit_linear_head(&x0, &task.support_labels, task.n_way, &zero_episodes, seed)?;

    let initial_units = snapshot_units(&backbone.lunits);
    let initial_head = head.clone();

    let mut unit_vel: Vec<Vec<Vec<f64>>> = backbone
        .lunits
        .iter()
        .map(|u| u.param_slots().iter().map(|(_, s)| vec![0.0; s.len()]).collect())
        .collect();
    let mut vel_w = vec![0.0; head.weight.len()];
    let mut vel_b = vec![0.0; head.bias.len()];

    let mut best: Option<(f64, usize, Vec<Vec<f64>>, Dense)> = None;
    let mut trace = Vec::with_capacity(cfg.episodes + 1);
    let mut reverted = false;
    for epoch in 0..=cfg.episodes {
        let mut caches = Vec::with_capacity(depth);
        let mut cur = reshaped.clone();
        for unit in &backbone.lunits {
            let (out, cache) = forward_lunit_cached(unit, &cur)?;
            caches.push(cache);
            cur = out;
        }
        let x = mmc_feature_batch(&cur)?;
        let logits = head.forward(&x)?;
        let (loss, grad_logits) = softmax_cross_entropy(&logits, &task.support_labels)?;
        if !loss.is_finite() {
            restore_units(&mut backbone.lunits, &initial_units);
            head = initial_head.clone();
            best = None;
            reverted = true;
            break;
        }
        trace.push(loss);
        if best.as_ref().map_or(true, |(b, _, _, _)| loss < *b) {
            best = Some((loss, epoch, snapshot_units(&backbone.lunits), head.clone()));
        }
        if epoch == cfg.episodes {
            break;
        }

        let (gx, ghead) = head.backward(&x, &grad_logits)?;
        let grad_rows: Vec<Vec<f64>> = gx.iter_samples().map(|s| s.to_vec()).collect();
        let mut g = mmc_backward(&cur, &grad_rows)?;
        let mut unit_grads: Vec<Vec<Vec<f64>>> = Vec::with_capacity(depth);
        for (unit, cache) in backbone.lunits.iter().zip(&caches).rev() {
            let (g_in, grads) = backward_lunit_trainable(unit, cache, &g)?;
            unit_grads.push(grads);
            g = g_in;
        }
        unit_grads.reverse();

        let mut grad_sq = 0.0;
        for v in ghead.weight.iter().chain(&ghead.bias) {
            grad_sq += v * v;
        }
        for grads in &unit_grads {
            for slot in grads {
                for v in slot {
                    grad_sq += v * v;
                }
            }
        }
        let clip = if grad_sq.sqrt() > FINETUNE_CLIP_NORM {
            FINETUNE_CLIP_NORM / grad_sq.sqrt()
        } else {
            1.0
        };

        let lr = cfg.lr_at(epoch);
        let step = |params: &mut [f64], grads: &[f64], vel: &mut [f64]| {
            for ((p, g), v) in params.iter_mut().zip(grads).zip(vel.iter_mut()) {
                *v = cfg.momentum * *v + g * clip;
                *p -= lr * *v;
            }
        };
        step(&mut head.weight, &ghead.weight, &mut vel_w);
        step(&mut head.bias, &ghead.bias, &mut vel_b);
        for ((unit, grads), vel) in
            backbone.lunits.iter_mut().zip(&unit_grads).zip(unit_vel.iter_mut())
        {
            for ((_, slot), (g, v)) in
                unit.param_slots_mut().into_iter().zip(grads.iter().zip(vel.iter_mut()))
            {
                for ((p, gv), vv) in slot.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vv = cfg.momentum * *vv + gv * clip;
                    *p -= lr * *vv;
                }
            }
        }
    }

    let fit = match best {
        Some((_, epoch, units, best_head)) => {
            restore_units(&mut backbone.lunits, &units);
            head = best_head;
            FitReport { loss_trace: trace, best_epoch: epoch, reverted }
        }
        None => FitReport { loss_trace: trace, best_epoch: 0, reverted },
    };
    Ok(BaselineModel { backbone, head, fit, task_shape: task.support.shape() })
}
