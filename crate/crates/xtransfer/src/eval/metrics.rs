//! Evaluation metrics: query accuracy, the accuracy-to-resource ratio, and
//! the relative train/test overfitting gap, plus the aggregate report the
//! harness emits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::task::FewShotTask;
use crate::lws::RecombinedModel;
use crate::zoo::ResourceCost;

/// Default FLOPs/params mixing weight in [`atr`].
pub const DEFAULT_ATR_ALPHA: f64 = 0.5;

/// Fraction of predictions matching their labels.
pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape {
            expected: format!("{} labels", predictions.len()),
            got: format!("{}", labels.len()),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Top-1 accuracy of a recombined model on the task's query set.
///
/// Errors `Config` when the model has no head or the head's width does not
/// match the task's way count.
pub fn accuracy(model: &RecombinedModel, task: &FewShotTask) -> Result<f64> {
    let head = model.head.as_ref().ok_or_else(|| {
        Error::Config("model has no classification head attached".into())
    })?;
    if head.out_features != task.n_way {
        return Err(Error::Config(format!(
            "head predicts {} classes, task is {}-way",
            head.out_features, task.n_way
        )));
    }
    top1_accuracy(&model.predict(&task.query)?, &task.query_labels)
}

/// Accuracy-to-resource ratio:
/// `Acc / (alpha * flops/ref_flops + (1 - alpha) * params/ref_params)`.
///
/// The reference is the largest model in the comparison set, so a model at
/// the reference cost scores exactly its accuracy and cheaper models score
/// higher. Zero reference components error `Config`.
pub fn atr(accuracy: f64, cost: ResourceCost, reference: ResourceCost, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must be in [0, 1], got {alpha}")));
    }
    if reference.flops == 0 || reference.params == 0 {
        return Err(Error::Config("reference cost has a zero component".into()));
    }
    let denom = alpha * cost.flops as f64 / reference.flops as f64
        + (1.0 - alpha) * cost.params as f64 / reference.params as f64;
    if denom <= 0.0 {
        return Err(Error::Config("model cost is zero".into()));
    }
    Ok(accuracy / denom)
}

/// Relative train/test gap `|train - test| / train`.
///
/// Errors `DegenerateMetric` when train accuracy is zero, since the gap is
/// then meaningless rather than infinite.
pub fn overfitting(train_accuracy: f64, test_accuracy: f64) -> Result<f64> {
    if train_accuracy == 0.0 {
        return Err(Error::DegenerateMetric("train accuracy is zero".into()));
    }
    Ok((train_accuracy - test_accuracy).abs() / train_accuracy)
}

/// One evaluated (seed, fold, shot) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub fold: usize,
    pub shot: usize,
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub overfitting: f64,
    pub atr: f64,
}

/// Aggregate evaluation of one method: headline means over the per-seed
/// breakdown, plus the costs the ATR was normalized against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub atr: f64,
    pub overfitting: f64,
    /// Cost of the evaluated model.
    pub cost: ResourceCost,
    /// ATR anchor: the largest model in the comparison set.
    pub reference: ResourceCost,
    pub per_seed: Vec<SeedOutcome>,
}

impl EvalReport {
    /// Mean the per-cell metrics into headline numbers.
    pub fn aggregate(
        cost: ResourceCost,
        reference: ResourceCost,
        per_seed: Vec<SeedOutcome>,
    ) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::EmptyInput);
        }
        let n = per_seed.len() as f64;
        let mean = |f: fn(&SeedOutcome) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            accuracy: mean(|o| o.accuracy),
            atr: mean(|o| o.atr),
            overfitting: mean(|o| o.overfitting),
            cost,
            reference,
            per_seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_predictions_on_balanced_five_way_score_chance() {
        let labels: Vec<usize> = (0..5).flat_map(|c| std::iter::repeat(c).take(4)).collect();
        let preds = vec![2usize; 20];
        assert_eq!(top1_accuracy(&preds, &labels).unwrap(), 0.2);
    }

    #[test]
    fn atr_at_reference_cost_is_the_accuracy() {
        let r = ResourceCost { flops: 1_000, params: 400 };
        assert_eq!(atr(0.5, r, r, DEFAULT_ATR_ALPHA).unwrap(), 0.5);
    }

    #[test]
    fn atr_rewards_cheap_models() {
        let reference = ResourceCost { flops: 1_000, params: 400 };
        let quarter = ResourceCost { flops: 250, params: 100 };
        let v = atr(0.8, quarter, reference, 0.5).unwrap();
        assert!((v - 3.2).abs() < 1e-15, "{v}");
    }

    #[test]
    fn atr_alpha_one_ignores_params() {
        let reference = ResourceCost { flops: 1_000, params: 400 };
        let a = ResourceCost { flops: 500, params: 1 };
        let b = ResourceCost { flops: 500, params: 400 };
        assert_eq!(atr(0.6, a, reference, 1.0).unwrap(), atr(0.6, b, reference, 1.0).unwrap());
        assert_ne!(atr(0.6, a, reference, 0.5).unwrap(), atr(0.6, b, reference, 0.5).unwrap());
    }

    #[test]
    fn atr_scales_with_cost_consistently() {
        // Halving both cost components doubles the score, for any alpha.
        let reference = ResourceCost { flops: 2_000, params: 900 };
        let cost = ResourceCost { flops: 800, params: 300 };
        let half = ResourceCost { flops: 400, params: 150 };
        for alpha in [0.0, 0.3, 0.5, 1.0] {
            let full = atr(0.7, cost, reference, alpha).unwrap();
            let cheap = atr(0.7, half, reference, alpha).unwrap();
            assert!((cheap - 2.0 * full).abs() < 1e-12);
        }
    }

    #[test]
    fn atr_rejects_bad_inputs() {
        let r = ResourceCost { flops: 100, params: 100 };
        let zero = ResourceCost { flops: 0, params: 0 };
        assert!(matches!(atr(0.5, r, zero, 0.5), Err(Error::Config(_))));
        assert!(matches!(atr(0.5, zero, r, 0.5), Err(Error::Config(_))));
        assert!(matches!(atr(0.5, r, r, 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn overfitting_is_the_relative_gap() {
        assert_eq!(overfitting(0.9, 0.45).unwrap(), 0.5);
        assert_eq!(overfitting(0.8, 0.8).unwrap(), 0.0);
        assert!(matches!(overfitting(0.0, 0.3), Err(Error::DegenerateMetric(_))));
    }

    #[test]
    fn aggregate_means_the_cells() {
        let cell = |acc: f64, atr: f64| SeedOutcome {
            seed: 0,
            fold: 0,
            shot: 5,
            accuracy: acc,
            train_accuracy: 1.0,
            overfitting: 1.0 - acc,
            atr,
        };
        let cost = ResourceCost { flops: 10, params: 10 };
        let report =
            EvalReport::aggregate(cost, cost, vec![cell(0.4, 0.8), cell(0.6, 1.2)]).unwrap();
        assert!((report.accuracy - 0.5).abs() < 1e-15);
        assert!((report.atr - 1.0).abs() < 1e-15);
        assert!((report.overfitting - 0.5).abs() < 1e-15);
        assert!(EvalReport::aggregate(cost, cost, vec![]).is_err());
    }
}
