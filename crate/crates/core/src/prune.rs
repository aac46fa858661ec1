//! Layer-weighted global pruning.
//!
//! Every unit's importance is scaled by `1 - lambda * layer` (layers counted
//! from 0), all units of one kind are ranked together, and the lowest
//! scores are removed until the target count is reached. Units whose
//! removal would break a per-layer floor (one head, or the class token plus
//! one patch token) are skipped and logged, and the next-lowest eligible unit
//! takes their place.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cost::{analytical_cost, CostReport};
use crate::criteria::{
    self, EntropyMode, ImportanceScore, TokenCriterion, TokenReduction, UnitKind,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::vit::{ModelSpec, VitModel};

pub const PRUNE_FORMAT: &str = "amg-prune-1";
pub const TIE_BREAK: &str = "weighted score ascending, then layer ascending, then unit ascending";
pub const MIN_HEADS: usize = 1;
pub const MIN_KV_TOKENS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitId {
    pub kind: UnitKind,
    pub layer: usize,
    pub unit: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub head_rate: f64,
    pub token_rate: f64,
    pub lambda: f64,
    pub head_iterations: usize,
    /// Never removed. Class tokens are never candidates in the first place.
    pub protect: BTreeSet<UnitId>,
    pub entropy_mode: EntropyMode,
    pub token_criterion: TokenCriterion,
    pub token_reduction: TokenReduction,
    pub calibration_batch: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            head_rate: 0.0,
            token_rate: 0.0,
            lambda: 0.0,
            head_iterations: 4,
            protect: BTreeSet::new(),
            entropy_mode: EntropyMode::AveragedMap,
            token_criterion: TokenCriterion::GradientAttention,
            token_reduction: TokenReduction::KeyColumn,
            calibration_batch: 32,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        for (name, r) in [("head_rate", self.head_rate), ("token_rate", self.token_rate)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {r}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.lambda * layers.saturating_sub(1) as f64 >= 1.0 {
            return Err(Error::Config(format!(
                "lambda * (L - 1) must be < 1 (lambda = {}, L = {layers})",
                self.lambda
            )));
        }
        if self.head_iterations == 0 {
            return Err(Error::Config("head_iterations must be >= 1".into()));
        }
        if self.calibration_batch == 0 {
            return Err(Error::Config("calibration_batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// `weighted = raw * (1 - lambda * layer)`.
pub fn weight_scores(scores: &[ImportanceScore], lambda: f64) -> Result<Vec<ImportanceScore>> {
    scores
        .iter()
        .map(|s| {
            let w = 1.0 - lambda * s.layer as f64;
            if !(w > 0.0) {
                return Err(Error::Config(format!(
                    "layer weight 1 - {lambda} * {} = {w} is not positive",
                    s.layer
                )));
            }
            Ok(ImportanceScore { weighted: s.raw * w, ..s.clone() })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedUnit {
    pub layer: usize,
    pub unit: usize,
    pub raw: f64,
    pub weighted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedUnit {
    pub layer: usize,
    pub unit: usize,
    pub weighted: f64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub kind: UnitKind,
    pub lambda: f64,
    pub total_units: usize,
    pub target: usize,
    pub tie_break: String,
    /// In removal order.
    pub selected: Vec<PlannedUnit>,
    pub skipped: Vec<SkippedUnit>,
    /// Per layer heads (or key/value tokens) before and after.
    pub before: Vec<usize>,
    pub after: Vec<usize>,
}

impl PrunePlan {
    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn removed_in(&self, layer: usize) -> Vec<usize> {
        self.selected.iter().filter(|u| u.layer == layer).map(|u| u.unit).collect()
    }

    /// The structure the model will have once the plan is applied.
    pub fn apply_to_spec(&self, spec: &ModelSpec) -> Result<ModelSpec> {
        let mut out = spec.clone();
        for l in 0..spec.layers() {
            let removed = self.removed_in(l);
            if removed.is_empty() {
                continue;
            }
            match self.kind {
                UnitKind::Head => out.heads_per_layer[l] -= removed.len(),
                UnitKind::Token => {
                    let kept = spec.kv_indices(l).into_iter().filter(|t| !removed.contains(t)).collect();
                    out.retained_kv_indices[l] = Some(kept);
                }
            }
        }
        out.validate()?;
        Ok(out)
    }
}

fn round_count(rate: f64, total: usize) -> usize {
    ((rate * total as f64).round() as usize).min(total)
}

/// Ranks `scores` (all prunable units of `kind`) and selects
/// `round(rate * total)` of them.
pub fn build_plan(scores: &[ImportanceScore], config: &PruneConfig, kind: UnitKind) -> Result<PrunePlan> {
    let rate = match kind {
        UnitKind::Head => config.head_rate,
        UnitKind::Token => config.token_rate,
    };
    let layers = scores.iter().map(|s| s.layer + 1).max().unwrap_or(0);
    config.validate(layers)?;
    plan_count(scores, round_count(rate, scores.len()), config, kind)
}

/// Like [`build_plan`] with an explicit removal count.
pub fn plan_count(
    scores: &[ImportanceScore],
    count: usize,
    config: &PruneConfig,
    kind: UnitKind,
) -> Result<PrunePlan> {
    if let Some(s) = scores.iter().find(|s| s.kind != kind) {
        return Err(Error::contract(format!("{} score passed to a {kind} plan", s.kind)));
    }
    let mut seen = BTreeSet::new();
    if let Some(s) = scores.iter().find(|s| !seen.insert((s.layer, s.unit))) {
        return Err(Error::contract(format!("unit ({}, {}) scored twice", s.layer, s.unit)));
    }
    if kind == UnitKind::Token {
        if let Some(s) = scores.iter().find(|s| s.unit == 0) {
            return Err(Error::ClassTokenProtected { layer: s.layer });
        }
    }
    let weighted = weight_scores(scores, config.lambda)?;
    let layers = scores.iter().map(|s| s.layer + 1).max().unwrap_or(0);
    let (floor, offset) = match kind {
        UnitKind::Head => (MIN_HEADS, 0),
        UnitKind::Token => (MIN_KV_TOKENS, 1),
    };
    let mut present = vec![offset; layers];
    for s in scores {
        present[s.layer] += 1;
    }
    let before = present.clone();

    let mut order: Vec<&ImportanceScore> = weighted.iter().collect();
    order.sort_by(|a, b| {
        a.weighted
            .total_cmp(&b.weighted)
            .then(a.layer.cmp(&b.layer))
            .then(a.unit.cmp(&b.unit))
    });

    let mut selected = Vec::new();
    let mut skipped = Vec::new();
    let mut binding = BTreeSet::new();
    for s in order {
        if selected.len() == count {
            break;
        }
        let id = UnitId { kind, layer: s.layer, unit: s.unit };
        let reason = if config.protect.contains(&id) {
            Some("protected".to_string())
        } else if present[s.layer] <= floor {
            binding.insert(s.layer);
            Some(format!("layer {} at its floor of {floor}", s.layer))
        } else {
            None
        };
        match reason {
            Some(reason) => skipped.push(SkippedUnit {
                layer: s.layer,
                unit: s.unit,
                weighted: s.weighted,
                reason,
            }),
            None => {
                present[s.layer] -= 1;
                selected.push(PlannedUnit { layer: s.layer, unit: s.unit, raw: s.raw, weighted: s.weighted });
            }
        }
    }
    if selected.len() < count {
        return Err(Error::InfeasiblePlan {
            wanted: count,
            available: selected.len(),
            binding_layers: binding.into_iter().collect(),
        });
    }
    Ok(PrunePlan {
        kind,
        lambda: config.lambda,
        total_units: scores.len(),
        target: count,
        tie_break: TIE_BREAK.into(),
        selected,
        skipped,
        before,
        after: present,
    })
}

/// Splits `total` removals over `steps` iterations, earlier steps taking
/// the ceiling.
pub fn split_iterations(total: usize, steps: usize) -> Vec<usize> {
    let steps = steps.max(1);
    (0..steps)
        .map(|i| total / steps + usize::from(i < total % steps))
        .collect()
}

/// Structural head removal for every head in `plan`.
pub fn apply_head_plan(model: &mut VitModel, plan: &PrunePlan) -> Result<()> {
    if plan.kind != UnitKind::Head {
        return Err(Error::contract("token plan passed to apply_head_plan"));
    }
    for l in 0..model.spec.layers() {
        let removed = plan.removed_in(l);
        if removed.is_empty() {
            continue;
        }
        let slots = removed
            .iter()
            .map(|id| {
                model.blocks[l]
                    .head_ids
                    .iter()
                    .position(|h| h == id)
                    .ok_or_else(|| Error::contract(format!("layer {l} has no head with id {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        model.remove_heads(l, &slots)?;
    }
    Ok(())
}

/// Installs the index layer on every layer that loses tokens in `plan`.
pub fn apply_token_plan(model: &mut VitModel, plan: &PrunePlan) -> Result<()> {
    if plan.kind != UnitKind::Token {
        return Err(Error::contract("head plan passed to apply_token_plan"));
    }
    for l in 0..model.spec.layers() {
        let removed = plan.removed_in(l);
        if removed.is_empty() {
            continue;
        }
        if removed.contains(&0) {
            return Err(Error::ClassTokenProtected { layer: l });
        }
        let current = model.spec.kv_indices(l);
        if let Some(t) = removed.iter().find(|t| !current.contains(t)) {
            return Err(Error::contract(format!("token {t} is not retained in layer {l}")));
        }
        let kept: Vec<usize> = current.into_iter().filter(|t| !removed.contains(t)).collect();
        model.apply_kv_index(l, &kept)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStructure {
    pub layer: usize,
    pub heads: usize,
    pub head_ids: Vec<usize>,
    pub kv_tokens: usize,
    pub kv_indices: Vec<usize>,
}

pub fn structure_of(model: &VitModel) -> Vec<LayerStructure> {
    (0..model.spec.layers())
        .map(|l| LayerStructure {
            layer: l,
            heads: model.spec.heads_per_layer[l],
            head_ids: model.blocks[l].head_ids.clone(),
            kv_tokens: model.spec.kv_tokens(l),
            kv_indices: model.spec.kv_indices(l),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub format: String,
    pub kind: UnitKind,
    pub config: PruneConfig,
    /// One plan per iteration (a single plan for tokens).
    pub steps: Vec<PrunePlan>,
    pub removed: usize,
    pub structure_before: Vec<LayerStructure>,
    pub structure_after: Vec<LayerStructure>,
    pub cost_before: CostReport,
    pub cost_after: CostReport,
}

impl PruneReport {
    fn new(kind: UnitKind, config: &PruneConfig, before: &VitModel, after: &VitModel, steps: Vec<PrunePlan>) -> Result<Self> {
        Ok(PruneReport {
            format: PRUNE_FORMAT.into(),
            kind,
            config: config.clone(),
            removed: steps.iter().map(|p| p.selected.len()).sum(),
            steps,
            structure_before: structure_of(before),
            structure_after: structure_of(after),
            cost_before: analytical_cost(&before.spec)?,
            cost_after: analytical_cost(&after.spec)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("prune report serializes")
    }
}

/// Supplies head scores for the current (possibly already pruned) model.
pub trait ScoreProvider {
    fn scores(&mut self, model: &VitModel) -> Result<Vec<ImportanceScore>>;

    /// Runs between iterations, after surgery. No-op by default.
    fn after_step(&mut self, _model: &mut VitModel, _step: usize) -> Result<()> {
        Ok(())
    }
}

impl<F> ScoreProvider for F
where
    F: FnMut(&VitModel) -> Result<Vec<ImportanceScore>>,
{
    fn scores(&mut self, model: &VitModel) -> Result<Vec<ImportanceScore>> {
        self(model)
    }
}

/// Entropy head scores re-calibrated on `data` with frozen weights.
pub struct EntropyScorer<'a> {
    pub data: &'a Dataset,
    pub batch_size: usize,
    pub mode: EntropyMode,
}

impl ScoreProvider for EntropyScorer<'_> {
    fn scores(&mut self, model: &VitModel) -> Result<Vec<ImportanceScore>> {
        let capture = criteria::calibrate(model, self.data, self.batch_size)?;
        criteria::head_scores(&capture, self.mode)
    }
}

/// Iterative head pruning: `round(head_rate * heads)` removals split over
/// `head_iterations` steps, re-scoring the surgically pruned model before
/// every step.
pub fn execute_head_plan(
    model: &mut VitModel,
    provider: &mut dyn ScoreProvider,
    config: &PruneConfig,
) -> Result<PruneReport> {
    config.validate(model.spec.layers())?;
    let before = model.clone();
    let target = round_count(config.head_rate, model.spec.total_heads());
    let counts: Vec<usize> = split_iterations(target, config.head_iterations)
        .into_iter()
        .filter(|&c| c > 0)
        .collect();
    let mut steps = Vec::with_capacity(counts.len());
    for (i, &count) in counts.iter().enumerate() {
        let scores = provider.scores(model)?;
        let plan = plan_count(&scores, count, config, UnitKind::Head)?;
        apply_head_plan(model, &plan)?;
        steps.push(plan);
        if i + 1 < counts.len() {
            provider.after_step(model, i)?;
        }
    }
    PruneReport::new(UnitKind::Head, config, &before, model, steps)
}

/// Single-shot token pruning from precomputed token scores.
pub fn execute_token_plan(
    model: &mut VitModel,
    scores: &[ImportanceScore],
    config: &PruneConfig,
) -> Result<PruneReport> {
    config.validate(model.spec.layers())?;
    let before = model.clone();
    let plan = build_plan(scores, config, UnitKind::Token)?;
    apply_token_plan(model, &plan)?;
    PruneReport::new(UnitKind::Token, config, &before, model, vec![plan])
}

/// Token scores for `model` under `config`'s criterion.
pub fn score_tokens(model: &VitModel, data: &Dataset, config: &PruneConfig) -> Result<Vec<ImportanceScore>> {
    match config.token_criterion {
        TokenCriterion::GradientAttention => {
            let capture = criteria::calibrate(model, data, config.calibration_batch)?;
            criteria::token_scores(&capture, config.token_reduction)
        }
        TokenCriterion::Taylor => criteria::taylor_token_scores(model, data),
    }
}

/// Selected-unit counts per layer.
pub fn removals_per_layer(plan: &PrunePlan) -> BTreeMap<usize, usize> {
    let mut out = BTreeMap::new();
    for u in &plan.selected {
        *out.entry(u.layer).or_insert(0) += 1;
    }
    out
}
