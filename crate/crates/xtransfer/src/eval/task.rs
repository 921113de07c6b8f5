//! Few-shot task construction and the synthetic cross-modality benchmark.
//!
//! A benchmark instance is a small zoo of frozen source backbones plus a
//! deterministic stream of [`FewShotTask`]s over a different input modality.
//! Target data comes from the same class-signature generator the sources
//! use, but with its own shape, its own classes, and a per-fold "user"
//! perturbation so folds behave like distinct wearers of the same sensor:
//! shared class structure, shifted channel statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::{FeatureBatch, TensorShape};
use crate::zoo::{
    generate_split, generate_synthetic_source_indexed, SourceModel, SyntheticFamily,
};

/// Where a task's inputs come from: their tensor shape and the seed of the
/// class-signature generator that produced them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityDescriptor {
    pub shape: TensorShape,
    pub generator_seed: u64,
}

/// One n-way k-shot episode: a labeled support set to adapt on and a
/// disjoint labeled query set to score on.
#[derive(Debug, Clone)]
pub struct FewShotTask {
    pub n_way: usize,
    pub k_shot: usize,
    pub support: FeatureBatch,
    pub support_labels: Vec<usize>,
    pub query: FeatureBatch,
    pub query_labels: Vec<usize>,
    pub modality: ModalityDescriptor,
    pub fold_id: usize,
}

impl FewShotTask {
    /// Check the episode invariants: the support holds exactly
    /// `n_way * k_shot` samples, labels are dense in `0..n_way`, support and
    /// query cover the same classes, and no query sample repeats a support
    /// sample.
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::Config(format!("task needs >= 2 ways, got {}", self.n_way)));
        }
        if self.support.len() != self.n_way * self.k_shot {
            return Err(Error::Config(format!(
                "support holds {} samples, expected n_way * k_shot = {}",
                self.support.len(),
                self.n_way * self.k_shot
            )));
        }
        if self.support_labels.len() != self.support.len()
            || self.query_labels.len() != self.query.len()
        {
            return Err(Error::Config("label count does not match sample count".into()));
        }
        if self.query.is_empty() {
            return Err(Error::EmptyInput);
        }
        if self.support.shape() != self.modality.shape || self.query.shape() != self.modality.shape
        {
            return Err(Error::Shape {
                expected: format!("{:?}", self.modality.shape),
                got: format!("{:?} / {:?}", self.support.shape(), self.query.shape()),
            });
        }
        let support_classes = class_set(&self.support_labels);
        let query_classes = class_set(&self.query_labels);
        if support_classes.len() != self.n_way {
            return Err(Error::Config(format!(
                "support covers {} classes, expected {}",
                support_classes.len(),
                self.n_way
            )));
        }
        if support_classes != query_classes {
            return Err(Error::Config("support and query class sets differ".into()));
        }
        if let Some(&max) = support_classes.iter().max() {
            if max >= self.n_way {
                return Err(Error::Config(format!(
                    "labels must be dense in 0..{}, saw {max}",
                    self.n_way
                )));
            }
        }
        for q in self.query.iter_samples() {
            if self.support.iter_samples().any(|s| s == q) {
                return Err(Error::Config("query repeats a support sample".into()));
            }
        }
        Ok(())
    }
}

fn class_set(labels: &[usize]) -> std::collections::BTreeSet<usize> {
    labels.iter().copied().collect()
}

/// Architecture and class structure of one synthetic source backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    /// Per-model seed, mixed with the benchmark seed.
    pub seed: u64,
    pub classes: usize,
    pub shape: TensorShape,
    /// Number of L-units.
    pub depth: usize,
}

impl Default for SourceSpec {
    fn default() -> Self {
        Self { seed: 0, classes: 16, shape: TensorShape::new(3, 32, 32), depth: 4 }
    }
}

/// Target modality and task layout of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub classes: usize,
    pub shape: TensorShape,
    /// Synthetic users; each fold draws every sample from its own user.
    pub folds: usize,
    /// Query samples per class in every task.
    pub queries_per_class: usize,
    /// Shot counts; the stream emits one task per (fold, shot) pair, and
    /// smaller supports are prefixes of larger ones within a fold.
    pub shots: Vec<usize>,
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            shape: TensorShape::new(6, 1, 128),
            folds: 5,
            queries_per_class: 10,
            shots: vec![3, 5, 10],
        }
    }
}

/// Per-user channel perturbation: a gain and an offset per input channel,
/// applied to every sample the user produces.
fn perturb_fold(batch: &mut FeatureBatch, shape: TensorShape, fold_seed: u64) {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(fold_seed);
    let gains: Vec<f64> = (0..shape.channels).map(|_| rng.gen_range(0.75..1.3)).collect();
    let offsets: Vec<f64> = (0..shape.channels).map(|_| rng.gen_range(-0.2..0.2)).collect();
    let spatial = shape.spatial();
    let n = batch.len();
    for s in 0..n {
        let sample = batch.sample_mut(s);
        for c in 0..shape.channels {
            for v in sample[c * spatial..(c + 1) * spatial].iter_mut() {
                *v = gains[c] * *v + offsets[c];
            }
        }
    }
}

/// Build the benchmark: one frozen source model per spec and a deterministic
/// task stream of `folds * shots` few-shot episodes on the target modality.
///
/// Every source must have strictly more classes than the target task. Folds
/// partition the synthetic user space — all samples inside one task come
/// from that fold's user, and support/query draws never overlap.
pub fn make_synthetic_benchmark(
    seed: u64,
    sources: &[SourceSpec],
    target: &TargetSpec,
) -> Result<(Vec<SourceModel>, Vec<FewShotTask>)> {
    for (i, spec) in sources.iter().enumerate() {
        if spec.classes <= target.classes {
            return Err(Error::Config(format!(
                "source {i} has {} classes; sources must have more classes than the target's {}",
                spec.classes, target.classes
            )));
        }
    }
    Ok((make_source_models(seed, sources)?, make_target_tasks(seed, target)?))
}

/// Generate the benchmark's frozen source models (the model-zoo half of
/// [`make_synthetic_benchmark`]).
pub fn make_source_models(seed: u64, sources: &[SourceSpec]) -> Result<Vec<SourceModel>> {
    if sources.is_empty() {
        return Err(Error::Config("benchmark needs at least one source spec".into()));
    }
    let mut models = Vec::with_capacity(sources.len());
    for (i, spec) in sources.iter().enumerate() {
        let model_seed = seeds::derive(seeds::derive(seed, 300 + i as u64), spec.seed);
        models.push(generate_synthetic_source_indexed(
            model_seed,
            spec.classes,
            spec.shape,
            spec.depth,
            i,
        )?);
    }
    Ok(models)
}

/// Generate the benchmark's task stream (the target half of
/// [`make_synthetic_benchmark`]).
pub fn make_target_tasks(seed: u64, target: &TargetSpec) -> Result<Vec<FewShotTask>> {
    if target.classes < 2 {
        return Err(Error::Config(format!("target needs >= 2 classes, got {}", target.classes)));
    }
    if target.folds == 0 || target.queries_per_class == 0 || target.shots.is_empty() {
        return Err(Error::Config("target needs folds, queries and shots".into()));
    }
    if target.shots.iter().any(|&k| k == 0) {
        return Err(Error::Config("shot counts must be positive".into()));
    }

    let family = SyntheticFamily::for_shape(target.shape);
    let class_seed = seeds::derive(seed, 777);
    let max_shot = *target.shots.iter().max().expect("shots non-empty");
    let mut tasks = Vec::with_capacity(target.folds * target.shots.len());
    for fold in 0..target.folds {
        let fold_u64 = fold as u64;
        let (mut support_all, support_labels_all) = generate_split(
            family,
            class_seed,
            seeds::derive(class_seed, 10_000 + fold_u64),
            target.classes,
            target.shape,
            max_shot,
        )?;
        let (mut query, query_labels) = generate_split(
            family,
            class_seed,
            seeds::derive(class_seed, 20_000 + fold_u64),
            target.classes,
            target.shape,
            target.queries_per_class,
        )?;
        let user_seed = seeds::derive(class_seed, 30_000 + fold_u64);
        perturb_fold(&mut support_all, target.shape, user_seed);
        perturb_fold(&mut query, target.shape, user_seed);

        for &k in &target.shots {
            // Keep the first k draws of each class so smaller supports are
            // prefixes of larger ones.
            let mut support = FeatureBatch::zeros(target.shape, target.classes * k);
            let mut support_labels = Vec::with_capacity(target.classes * k);
            let mut out = 0;
            for class in 0..target.classes {
                for i in 0..k {
                    let src = class * max_shot + i;
                    support.sample_mut(out).copy_from_slice(support_all.sample(src));
                    support_labels.push(support_labels_all[src]);
                    out += 1;
                }
            }
            let task = FewShotTask {
                n_way: target.classes,
                k_shot: k,
                support,
                support_labels,
                query: query.clone(),
                query_labels: query_labels.clone(),
                modality: ModalityDescriptor { shape: target.shape, generator_seed: class_seed },
                fold_id: fold,
            };
            task.validate()?;
            tasks.push(task);
        }
    }
    Ok(tasks)
}

/// A sanity task over a source model's own modality: samples for its first
/// `n_way` classes, drawn fresh from the generator that produced its
/// exemplars. A frozen-backbone baseline should beat chance here.
pub fn identity_task(
    source: &SourceModel,
    n_way: usize,
    k_shot: usize,
    queries_per_class: usize,
    draw_seed: u64,
) -> Result<FewShotTask> {
    if n_way > source.source_classes.len() {
        return Err(Error::Config(format!(
            "source has {} classes, task wants {n_way}",
            source.source_classes.len()
        )));
    }
    let shape = source.input_shape();
    let family = SyntheticFamily::for_shape(shape);
    let (support, support_labels) = generate_split(
        family,
        source.seed,
        seeds::derive(draw_seed, 1),
        n_way,
        shape,
        k_shot,
    )?;
    let (query, query_labels) = generate_split(
        family,
        source.seed,
        seeds::derive(draw_seed, 2),
        n_way,
        shape,
        queries_per_class,
    )?;
    let task = FewShotTask {
        n_way,
        k_shot,
        support,
        support_labels,
        query,
        query_labels,
        modality: ModalityDescriptor { shape, generator_seed: source.seed },
        fold_id: 0,
    };
    task.validate()?;
    Ok(task)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_target() -> TargetSpec {
        TargetSpec {
            classes: 3,
            shape: TensorShape::new(4, 1, 32),
            folds: 2,
            queries_per_class: 4,
            shots: vec![2, 3],
        }
    }

    fn small_source() -> SourceSpec {
        SourceSpec { seed: 5, classes: 6, shape: TensorShape::new(3, 12, 12), depth: 3 }
    }

    #[test]
    fn benchmark_emits_one_task_per_fold_and_shot() {
        let (models, tasks) = make_synthetic_benchmark(9, &[small_source()], &small_target()).unwrap();
        assert_eq!(models.len(), 1);
        assert_eq!(tasks.len(), 4);
        for task in &tasks {
            task.validate().unwrap();
            assert_eq!(task.n_way, 3);
            assert_eq!(task.query.len(), 12);
        }
        assert_eq!(tasks[0].fold_id, 0);
        assert_eq!(tasks[3].fold_id, 1);
    }

    #[test]
    fn benchmark_is_deterministic() {
        let spec = small_source();
        let target = small_target();
        let (ma, ta) = make_synthetic_benchmark(9, &[spec], &target).unwrap();
        let (mb, tb) = make_synthetic_benchmark(9, &[spec], &target).unwrap();
        assert_eq!(ma[0].param_hash(), mb[0].param_hash());
        for (a, b) in ta.iter().zip(&tb) {
            assert_eq!(a.support.data(), b.support.data());
            assert_eq!(a.query.data(), b.query.data());
        }
        let (mc, tc) = make_synthetic_benchmark(10, &[spec], &target).unwrap();
        assert_ne!(ma[0].param_hash(), mc[0].param_hash());
        assert_ne!(ta[0].support.data(), tc[0].support.data());
    }

    #[test]
    fn smaller_supports_are_prefixes_of_larger_ones() {
        let (_, tasks) = make_synthetic_benchmark(9, &[small_source()], &small_target()).unwrap();
        let (two, three) = (&tasks[0], &tasks[1]);
        assert_eq!(two.k_shot, 2);
        assert_eq!(three.k_shot, 3);
        for class in 0..two.n_way {
            for i in 0..two.k_shot {
                assert_eq!(
                    two.support.sample(class * 2 + i),
                    three.support.sample(class * 3 + i)
                );
            }
        }
        // Same fold shares its query set across shots.
        assert_eq!(two.query.data(), three.query.data());
    }

    #[test]
    fn folds_differ_but_share_class_structure() {
        let (_, tasks) = make_synthetic_benchmark(9, &[small_source()], &small_target()).unwrap();
        let (f0, f1) = (&tasks[0], &tasks[2]);
        assert_eq!(f0.fold_id, 0);
        assert_eq!(f1.fold_id, 1);
        assert_ne!(f0.support.data(), f1.support.data());
        assert_eq!(f0.support_labels, f1.support_labels);
        assert_eq!(f0.modality, f1.modality);
    }

    #[test]
    fn source_must_outnumber_target_classes() {
        let mut spec = small_source();
        spec.classes = 3;
        let err = make_synthetic_benchmark(9, &[spec], &small_target()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err:?}");
    }

    #[test]
    fn validate_rejects_broken_tasks() {
        let (_, tasks) = make_synthetic_benchmark(9, &[small_source()], &small_target()).unwrap();
        let task = &tasks[0];

        let mut wrong_count = task.clone();
        wrong_count.k_shot = 5;
        assert!(matches!(wrong_count.validate(), Err(Error::Config(_))));

        let mut overlap = task.clone();
        let first_support = overlap.support.sample(0).to_vec();
        overlap.query.sample_mut(0).copy_from_slice(&first_support);
        overlap.query_labels[0] = overlap.support_labels[0];
        assert!(matches!(overlap.validate(), Err(Error::Config(_))));

        let mut sparse = task.clone();
        for l in sparse.support_labels.iter_mut().chain(sparse.query_labels.iter_mut()) {
            *l *= 2;
        }
        assert!(matches!(sparse.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn identity_task_matches_source_modality() {
        let spec = small_source();
        let model = crate::zoo::generate_synthetic_source(11, spec.classes, spec.shape, spec.depth)
            .unwrap();
        let task = identity_task(&model, 4, 3, 5, 77).unwrap();
        assert_eq!(task.modality.shape, model.input_shape());
        assert_eq!(task.support.len(), 12);
        assert_eq!(task.query.len(), 20);
        let err = identity_task(&model, 7, 3, 5, 77).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
