//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every exported function returns a JSON string. Failures come back as
//! `{"error": "..."}` so the page never has to catch exceptions.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use amg_core::cost::{analytical_cost, CostTotals};
use amg_core::criteria::{self, EntropyMode, ImportanceScore};
use amg_core::prune::{self, build_plan, removals_per_layer, weight_scores, EntropyScorer};
use amg_core::train::{self, TrainConfig};
use amg_core::{Dataset, ModelSpec, PruneConfig, SyntheticSpec, UnitKind, VitModel};

fn respond<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).expect("response serializes"),
        Err(e) => serde_json::json!({ "error": e }).to_string(),
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

#[derive(Clone, Debug, Deserialize)]
pub struct Geometry {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub head_dim: usize,
    pub image_size: usize,
    pub patch_size: usize,
}

impl Geometry {
    fn spec(&self) -> ModelSpec {
        ModelSpec::uniform(self.image_size, self.patch_size, 3, self.embed_dim, self.layers, self.heads, self.head_dim, 4.0, 10)
    }
}

#[derive(Debug, Serialize)]
pub struct LayerRow {
    pub layer: usize,
    pub heads: usize,
    pub kv_tokens: usize,
    pub msa_params: u64,
    pub msa_flops: u64,
}

#[derive(Debug, Serialize)]
pub struct CostComparison {
    pub before: CostTotals,
    pub after: CostTotals,
    pub layers: Vec<LayerRow>,
    pub params_reduction: f64,
    pub flops_reduction: f64,
}

/// Pruned cost of a geometry when every unit scores the same, so the layer
/// weighting alone decides where units go.
pub fn cost_comparison(geometry: &Geometry, head_rate: f64, token_rate: f64, lambda: f64) -> Result<CostComparison, String> {
    let spec = geometry.spec();
    spec.validate().map_err(err)?;
    let cfg = PruneConfig { head_rate, token_rate, lambda, ..Default::default() };
    cfg.validate(spec.layers()).map_err(err)?;
    let mut pruned = spec.clone();
    if head_rate > 0.0 {
        let scores: Vec<_> = (0..spec.layers())
            .flat_map(|l| (0..spec.heads_per_layer[l]).map(move |h| ImportanceScore::new(UnitKind::Head, l, h, 1.0)))
            .collect();
        pruned = build_plan(&scores, &cfg, UnitKind::Head).map_err(err)?.apply_to_spec(&pruned).map_err(err)?;
    }
    if token_rate > 0.0 {
        let scores: Vec<_> = (0..spec.layers())
            .flat_map(|l| (1..spec.tokens()).map(move |t| ImportanceScore::new(UnitKind::Token, l, t, 1.0)))
            .collect();
        pruned = build_plan(&scores, &cfg, UnitKind::Token).map_err(err)?.apply_to_spec(&pruned).map_err(err)?;
    }
    let before = analytical_cost(&spec).map_err(err)?;
    let after = analytical_cost(&pruned).map_err(err)?;
    let layers = after
        .layers
        .iter()
        .map(|l| LayerRow {
            layer: l.layer,
            heads: l.heads,
            kv_tokens: l.kv_tokens,
            msa_params: l.msa_params,
            msa_flops: l.msa_flops_analytical,
        })
        .collect();
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { 1.0 - a as f64 / b as f64 };
    Ok(CostComparison {
        params_reduction: ratio(after.totals.msa_params, before.totals.msa_params),
        flops_reduction: ratio(after.totals.msa_flops_analytical, before.totals.msa_flops_analytical),
        before: before.totals,
        after: after.totals,
        layers,
    })
}

#[wasm_bindgen]
pub fn cost_calculator(geometry_json: &str, head_rate: f64, token_rate: f64, lambda: f64) -> String {
    respond(
        serde_json::from_str::<Geometry>(geometry_json)
            .map_err(err)
            .and_then(|g| cost_comparison(&g, head_rate, token_rate, lambda)),
    )
}

#[derive(Debug, Serialize)]
pub struct Schedule {
    pub layer_weights: Vec<f64>,
    pub removed_per_layer: Vec<usize>,
    pub units_per_layer: usize,
    /// `[layer][unit]` raw and weighted scores.
    pub raw: Vec<Vec<f64>>,
    pub weighted: Vec<Vec<f64>>,
    pub selected: Vec<(usize, usize)>,
}

/// Global selection over pseudo-random scores (a fixed LCG stream, so the
/// page and the tests see the same numbers).
pub fn schedule(layers: usize, units: usize, rate: f64, lambda: f64, seed: u32) -> Result<Schedule, String> {
    if layers == 0 || units < 2 {
        return Err("need at least one layer and two units per layer".into());
    }
    let cfg = PruneConfig { token_rate: rate, lambda, ..Default::default() };
    cfg.validate(layers).map_err(err)?;
    let mut state = seed as u64 ^ 0x5deece66d;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        0.05 + 0.95 * ((state >> 11) as f64 / (1u64 << 53) as f64)
    };
    // Token unit 0 is the class token, so units are numbered from 1.
    let scores: Vec<ImportanceScore> = (0..layers)
        .flat_map(|l| (1..=units).map(move |u| (l, u)))
        .map(|(l, u)| ImportanceScore::new(UnitKind::Token, l, u, next()))
        .collect();
    let weighted = weight_scores(&scores, lambda).map_err(err)?;
    let plan = build_plan(&scores, &cfg, UnitKind::Token).map_err(err)?;
    let per = removals_per_layer(&plan);
    let grid = |f: &dyn Fn(&ImportanceScore) -> f64| -> Vec<Vec<f64>> {
        (0..layers).map(|l| weighted[l * units..(l + 1) * units].iter().map(f).collect()).collect()
    };
    Ok(Schedule {
        layer_weights: (0..layers).map(|l| 1.0 - lambda * l as f64).collect(),
        removed_per_layer: (0..layers).map(|l| per.get(&l).copied().unwrap_or(0)).collect(),
        units_per_layer: units,
        raw: grid(&|s| s.raw),
        weighted: grid(&|s| s.weighted),
        selected: plan.selected.iter().map(|u| (u.layer, u.unit - 1)).collect(),
    })
}

#[wasm_bindgen]
pub fn lambda_schedule(layers: usize, units: usize, rate: f64, lambda: f64, seed: u32) -> String {
    respond(schedule(layers, units, rate, lambda, seed))
}

#[derive(Debug, Serialize)]
pub struct HeadView {
    pub layer: usize,
    pub head: usize,
    pub entropy: f64,
    pub score: f64,
    pub map: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct Snapshot {
    pub epoch: usize,
    pub train_acc: Option<f64>,
    pub val_acc: f64,
    pub tokens: usize,
    pub kv_tokens: Vec<usize>,
    pub mean_entropy_per_layer: Vec<f64>,
    pub heads: Vec<HeadView>,
}

/// A toy model trained in the page, a few epochs at a time.
#[wasm_bindgen]
pub struct Session {
    model: VitModel,
    train: Dataset,
    val: Dataset,
    probe: Dataset,
    epoch: usize,
    last_train_acc: Option<f64>,
}

impl Session {
    pub fn create(seed: u32) -> Result<Session, String> {
        let data = SyntheticSpec { train_size: 256, val_size: 128, seed: seed as u64, ..Default::default() };
        let (train, val) = data.generate().map_err(err)?;
        let probe = val.subset(&(0..32).collect::<Vec<_>>()).map_err(err)?;
        let model = VitModel::init(ModelSpec::toy(), seed as u64).map_err(err)?;
        Ok(Session { model, train, val, probe, epoch: 0, last_train_acc: None })
    }

    pub fn advance(&mut self, epochs: usize) -> Result<Snapshot, String> {
        let cfg = TrainConfig { epochs, batch_size: 8, learning_rate: 0.1, seed: self.epoch as u64, ..Default::default() };
        let log = train::train(&mut self.model, &self.train, None, &cfg).map_err(err)?;
        self.epoch += log.records.len();
        if let Some(r) = log.last() {
            self.last_train_acc = Some(r.train_acc);
        }
        self.snapshot()
    }

    /// Entropy-guided head pruning of the current model.
    pub fn prune(&mut self, head_rate: f64, lambda: f64) -> Result<Snapshot, String> {
        let cfg = PruneConfig { head_rate, lambda, head_iterations: 1, ..Default::default() };
        let mut scorer = EntropyScorer { data: &self.probe, batch_size: 32, mode: EntropyMode::AveragedMap };
        prune::execute_head_plan(&mut self.model, &mut scorer, &cfg).map_err(err)?;
        self.snapshot()
    }

    pub fn snapshot(&self) -> Result<Snapshot, String> {
        let capture = criteria::calibrate(&self.model, &self.probe, 32).map_err(err)?;
        let scores = criteria::head_scores(&capture, EntropyMode::AveragedMap).map_err(err)?;
        let slots = (0..capture.layers()).flat_map(|l| (0..capture.heads(l)).map(move |h| (l, h)));
        let mut heads = Vec::new();
        for ((l, slot), s) in slots.zip(&scores) {
            heads.push(HeadView {
                layer: l,
                head: s.unit,
                entropy: s.entropy.unwrap_or_default(),
                score: s.raw,
                map: capture.map(l, slot).map_err(err)?.data,
            });
        }
        Ok(Snapshot {
            epoch: self.epoch,
            train_acc: self.last_train_acc,
            val_acc: train::evaluate(&self.model, &self.val, 64).map_err(err)?,
            tokens: self.model.spec.tokens(),
            kv_tokens: (0..self.model.spec.layers()).map(|l| self.model.spec.kv_tokens(l)).collect(),
            mean_entropy_per_layer: criteria::mean_entropy_per_layer(&capture).map_err(err)?,
            heads,
        })
    }
}

#[wasm_bindgen]
impl Session {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Session {
        Session::create(seed).expect("default synthetic task is valid")
    }

    pub fn train_epochs(&mut self, epochs: usize) -> String {
        respond(self.advance(epochs))
    }

    pub fn prune_heads(&mut self, head_rate: f64, lambda: f64) -> String {
        respond(self.prune(head_rate, lambda))
    }

    pub fn state(&self) -> String {
        respond(self.snapshot())
    }
}
