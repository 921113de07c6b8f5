//! Wiring the search controller to real models: anchor-space construction
//! over a zoo, the [`SearchDriver`] backed by splice/repair, and the
//! end-to-end [`run_search`] that assembles the recombined model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchor::{fit_anchor_space, pair_anchors, AnchorSpace, PairingSet};
use crate::error::{Error, Result};
use crate::latent::{cluster_stats, mmc, silhouette, MmcVector};
use crate::seeds;
use crate::srr::{
    build_connector, initial_alignment, project_support, splice_and_repair, Connector,
    RepairOutcome, SpliceConfig, TrainConfig,
};
use crate::tensor::FeatureBatch;
use crate::zoo::{forward_lunit, hex, resource_of, LUnit, ResourceCost, SourceModel, UnitId};

use super::model::{
    FinetuneConfig, FitReport, Provenance, RecombinedLayer, RecombinedModel,
};
use super::search::{
    drive_search, Repaired, SearchConfig, SearchDriver, SearchState, TraceRecord,
};
use super::select::ProbeInfo;

/// Everything the pipeline needs to run one search.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    /// Connector bottleneck ratio `r`.
    pub bottleneck_ratio: usize,
    /// Run channel removal on repaired layers.
    pub removal_enabled: bool,
    /// Anchor-space dimensionality `k`.
    pub pca_components: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            search: SearchConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            bottleneck_ratio: crate::srr::DEFAULT_BOTTLENECK_RATIO,
            removal_enabled: true,
            pca_components: 2,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        if self.bottleneck_ratio == 0 {
            return Err(Error::Config("bottleneck_ratio must be >= 1".into()));
        }
        if self.pca_components == 0 {
            return Err(Error::Config("pca_components must be >= 1".into()));
        }
        Ok(())
    }

    /// Content hash for provenance records.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

/// Fit an anchor space at every unit of every source model by forwarding
/// each model's exemplars depth by depth.
pub fn build_anchor_spaces(
    zoo: &[SourceModel],
    k: usize,
) -> Result<BTreeMap<UnitId, AnchorSpace>> {
    let mut spaces = BTreeMap::new();
    for model in zoo {
        let mut batch = model.exemplars.clone();
        for unit in &model.lunits {
            batch = forward_lunit(unit, &batch)?;
            let vectors = mmc(&batch)?;
            let mmcs: Vec<MmcVector> = vectors
                .into_iter()
                .zip(&model.exemplar_labels)
                .map(|(values, &label)| MmcVector { values, label })
                .collect();
            spaces.insert(unit.id, fit_anchor_space(unit.id, &mmcs, k)?);
        }
    }
    Ok(spaces)
}

/// Backbone cost of the largest source model: the ATR and budget
/// normalization anchor. Largest by flops, then params, then lowest index.
pub fn reference_cost(zoo: &[SourceModel]) -> Result<ResourceCost> {
    reference_index(zoo).map(|i| zoo[i].total_cost())
}

/// Index of the zoo's largest backbone (the one [`reference_cost`] prices).
pub fn reference_index(zoo: &[SourceModel]) -> Result<usize> {
    zoo.iter()
        .map(SourceModel::total_cost)
        .enumerate()
        .max_by_key(|&(i, c)| (c.flops, c.params, std::cmp::Reverse(i)))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Config("empty model zoo".into()))
}

/// Absolute weighted resource: equal-weight flops and params, each in units
/// of the reference backbone.
pub fn weighted_res(cost: ResourceCost, reference: ResourceCost) -> Result<f64> {
    if reference.flops == 0 || reference.params == 0 {
        return Err(Error::Config("reference cost must be positive".into()));
    }
    Ok(0.5 * cost.flops as f64 / reference.flops as f64
        + 0.5 * cost.params as f64 / reference.params as f64)
}

/// Splice artifacts shared between probe and repair of one candidate at the
/// current chain state.
struct ProbeArtifacts {
    info: ProbeInfo,
    pairing: PairingSet,
    connector_seed: u64,
}

/// Per-selection artifact: the repair outcome that becomes a
/// [`RecombinedLayer`].
pub struct LayerPayload {
    pub outcome: RepairOutcome,
}

/// [`SearchDriver`] over a real zoo: probes and repairs splice candidates
/// against the current chain's support representation.
pub struct ZooDriver<'a> {
    zoo: &'a [SourceModel],
    spaces: &'a BTreeMap<UnitId, AnchorSpace>,
    cfg: &'a PipelineConfig,
    run_seed: u64,
    reference: ResourceCost,
    /// Support data as represented by the committed chain.
    support: FeatureBatch,
    labels: Vec<usize>,
    /// Committed layers, in order.
    layers: Vec<RecombinedLayer>,
    /// Valid until the next `advance` (the chain state they assume).
    probe_cache: BTreeMap<UnitId, ProbeArtifacts>,
    repair_cache: BTreeMap<UnitId, (f64, RepairOutcome)>,
}

impl<'a> ZooDriver<'a> {
    pub fn new(
        zoo: &'a [SourceModel],
        spaces: &'a BTreeMap<UnitId, AnchorSpace>,
        cfg: &'a PipelineConfig,
        support: &FeatureBatch,
        labels: &[usize],
        run_seed: u64,
    ) -> Result<Self> {
        for (i, model) in zoo.iter().enumerate() {
            if model.model_index != i {
                return Err(Error::Config(format!(
                    "zoo must be ordered by model index: position {i} holds model {}",
                    model.model_index
                )));
            }
        }
        if support.len() != labels.len() {
            return Err(Error::Shape {
                expected: format!("{} labels", support.len()),
                got: format!("{}", labels.len()),
            });
        }
        Ok(Self {
            zoo,
            spaces,
            cfg,
            run_seed,
            reference: reference_cost(zoo)?,
            support: support.clone(),
            labels: labels.to_vec(),
            layers: Vec::new(),
            probe_cache: BTreeMap::new(),
            repair_cache: BTreeMap::new(),
        })
    }

    fn unit(&self, id: UnitId) -> Result<&'a LUnit> {
        self.zoo
            .get(id.model)
            .and_then(|m| m.lunits.get(id.depth))
            .ok_or_else(|| Error::Config(format!("no unit at {id}")))
    }

    fn space(&self, id: UnitId) -> Result<&'a AnchorSpace> {
        self.spaces.get(&id).ok_or_else(|| Error::Config(format!("no anchor space for {id}")))
    }

    /// Deterministic connector seed: distinct per selection step and
    /// candidate.
    fn connector_seed(&self, id: UnitId) -> u64 {
        let step_seed = seeds::derive(self.run_seed, 7001 + self.layers.len() as u64);
        seeds::derive(step_seed, (id.model * 1000 + id.depth) as u64)
    }

    /// Take the committed chain as a model (no head yet).
    fn into_model(self, input_shape: crate::tensor::TensorShape) -> Result<RecombinedModel> {
        RecombinedModel::new(input_shape, self.layers, Provenance::default())
    }
}

impl SearchDriver for ZooDriver<'_> {
    type Payload = LayerPayload;

    fn model_depths(&self) -> Vec<usize> {
        self.zoo.iter().map(|m| m.lunits.len()).collect()
    }

    fn initial_score(&mut self) -> Result<f64> {
        let vectors = mmc(&self.support)?;
        let k = self.cfg.pca_components.min(vectors[0].len());
        let pca = crate::anchor::Pca::fit(&vectors, k)?;
        let projected = pca.project(&vectors)?;
        Ok(silhouette(&projected, &self.labels)?.0)
    }

    fn probe(&mut self, id: UnitId) -> Result<ProbeInfo> {
        if let Some(art) = self.probe_cache.get(&id) {
            return Ok(art.info);
        }
        let unit = self.unit(id)?;
        let space = self.space(id)?;
        let seed = self.connector_seed(id);
        let connector: Connector =
            build_connector(self.support.shape(), unit.in_shape, self.cfg.bottleneck_ratio, seed);

        let initial_proj = project_support(unit, &connector, space, &self.support)?;
        let stats = cluster_stats(&initial_proj, &self.labels)?;
        let pairing = pair_anchors(&space.anchor_centroids, &space.per_class_s, &stats.centroids)?;
        let alignment = initial_alignment(space, &pairing, &initial_proj, &self.labels);
        let aligned = alignment.apply(&initial_proj);
        let before_s = silhouette(&aligned, &self.labels)?.0;
        let (anchor_points, anchor_labels) = space.paired_anchor_points(&pairing);
        let anchor_s = silhouette(&anchor_points, &anchor_labels)?.0;

        let res = weighted_res(resource_of(unit) + connector.cost(), self.reference)?;
        let info = ProbeInfo { before_s, anchor_s, res };
        self.probe_cache.insert(id, ProbeArtifacts { info, pairing, connector_seed: seed });
        Ok(info)
    }

    fn repair(&mut self, id: UnitId) -> Result<Repaired<LayerPayload>> {
        if let Some((after_s, outcome)) = self.repair_cache.get(&id) {
            return Ok(Repaired {
                after_s: *after_s,
                payload: LayerPayload { outcome: outcome.clone() },
            });
        }
        let unit = self.unit(id)?;
        let space = self.space(id)?;
        let seed = match self.probe_cache.get(&id) {
            Some(art) => art.connector_seed,
            None => self.connector_seed(id),
        };
        let splice_cfg = SpliceConfig {
            bottleneck_ratio: self.cfg.bottleneck_ratio,
            removal_enabled: self.cfg.removal_enabled,
            connector_seed: seed,
        };
        let outcome =
            splice_and_repair(unit, space, &self.support, &self.labels, &self.cfg.train, &splice_cfg)?;
        let after_s = outcome.after_s;
        self.repair_cache.insert(id, (after_s, outcome.clone()));
        Ok(Repaired { after_s, payload: LayerPayload { outcome } })
    }

    fn advance(&mut self, id: UnitId, payload: &LayerPayload) -> Result<()> {
        let unit = self.unit(id)?.clone();
        let outcome = &payload.outcome;
        let mapped = outcome.connector.forward(&self.support)?;
        let full = forward_lunit(&unit, &mapped)?;
        self.support = match &outcome.channel_mask {
            Some(mask) => {
                let shape = full.shape();
                let out_shape = crate::tensor::TensorShape::new(
                    mask.retained.len(),
                    shape.height,
                    shape.width,
                );
                let spatial = shape.spatial();
                let mut out = FeatureBatch::zeros(out_shape, full.len());
                for s in 0..full.len() {
                    let x = full.sample(s);
                    let y = out.sample_mut(s);
                    for (c_out, &c_in) in mask.retained.iter().enumerate() {
                        y[c_out * spatial..(c_out + 1) * spatial]
                            .copy_from_slice(&x[c_in * spatial..(c_in + 1) * spatial]);
                    }
                }
                out
            }
            None => full,
        };
        self.layers.push(RecombinedLayer {
            unit,
            connector: outcome.connector.clone(),
            channel_mask: outcome.channel_mask.clone(),
        });
        self.probe_cache.clear();
        self.repair_cache.clear();
        Ok(())
    }
}

/// Per-selection summary for reports (the heavyweight artifacts live in the
/// model itself).
#[derive(Debug, Clone, Serialize)]
pub struct SelectionSummary {
    pub id: UnitId,
    pub action: super::search::SearchAction,
    pub after_s: f64,
    pub res: f64,
    pub best_episode: usize,
    pub episodes_run: usize,
    /// Retained channel count when removal kept a proper subset.
    pub retained_channels: Option<usize>,
}

/// Everything [`run_search`] produces.
pub struct SearchRun {
    pub model: RecombinedModel,
    pub state: SearchState,
    pub trace: Vec<TraceRecord>,
    pub selections: Vec<SelectionSummary>,
    pub head: FitReport,
    pub finetune: FitReport,
}

/// End-to-end layer-wise search: drive the controller over the zoo, then
/// assemble the recombined model, attach and fit the head, and post
/// fine-tune connectors + head.
pub fn run_search(
    zoo: &[SourceModel],
    spaces: &BTreeMap<UnitId, AnchorSpace>,
    support: &FeatureBatch,
    labels: &[usize],
    cfg: &PipelineConfig,
    run_seed: u64,
) -> Result<SearchRun> {
    cfg.validate()?;
    if support.is_empty() {
        return Err(Error::EmptyInput);
    }
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::Config(format!(
            "search needs >= 2 target classes, got {}",
            classes.len()
        )));
    }
    let n_way = classes.len();

    let mut driver = ZooDriver::new(zoo, spaces, cfg, support, labels, run_seed)?;
    let outcome = drive_search(&mut driver, &cfg.search)?;

    let selections: Vec<SelectionSummary> = outcome
        .selections
        .iter()
        .map(|s| SelectionSummary {
            id: s.id,
            action: s.action,
            after_s: s.after_s,
            res: s.res,
            best_episode: s.payload.outcome.best_episode,
            episodes_run: s.payload.outcome.loss_trace.len().saturating_sub(1),
            retained_channels: s
                .payload
                .outcome
                .channel_mask
                .as_ref()
                .map(|m| m.retained.len()),
        })
        .collect();

    let mut model = driver.into_model(support.shape())?;
    model.provenance = Provenance { config_hash: cfg.hash(), run_seed };

    let head = model.attach_head(
        support,
        labels,
        n_way,
        &cfg.train,
        seeds::derive(run_seed, 9001),
    )?;
    let finetune = model.post_finetune(support, labels, &cfg.finetune)?;

    Ok(SearchRun { model, state: outcome.state, trace: outcome.trace, selections, head, finetune })
}
