//! Analytical and instrumented cost of the MSA stack.
//!
//! Analytical counts per layer, with `N` queries, `N'` retained key/value
//! tokens, `H` heads of width `d` and embedding width `D`:
//!
//! ```text
//! FLOPs  = 2 N' H d (2D + N)      (N' = N when no tokens are pruned)
//! params = 4 D H d
//! ```
//!
//! The instrumented count comes from the matrix products the tape actually
//! executed. Tokens are gathered after the K/V projection, so for a
//! token-pruned layer the instrumented projection cost stays at `4 N D H d`
//! while the analytical form scales it by `N'`; the difference is reported
//! as `projection_placement_delta = 4 (N - N') D H d`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tape::{Component, Tape};
use crate::tensor::Tensor;
use crate::vit::{ModelSpec, VitModel};

pub const COST_FORMAT: &str = "amg-cost-1";
pub const MAC_CONVENTION: &str =
    "1 multiply-accumulate = 1 FLOP; softmax, scaling and division excluded; per image";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MsaMacs {
    pub qkv_projection: u64,
    pub attention_scores: u64,
    pub attention_values: u64,
    pub out_projection: u64,
}

impl MsaMacs {
    pub fn total(&self) -> u64 {
        self.qkv_projection + self.attention_scores + self.attention_values + self.out_projection
    }

    /// `Q K^T` plus `A V`.
    pub fn attention_product(&self) -> u64 {
        self.attention_scores + self.attention_values
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub tokens: usize,
    pub kv_tokens: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub head_dim: usize,
    pub msa_params: u64,
    pub msa_flops_analytical: u64,
    pub msa_flops_instrumented: Option<u64>,
    pub instrumented: Option<MsaMacs>,
    /// `instrumented - analytical`; nonzero only for token-pruned layers.
    pub projection_placement_delta: Option<i64>,
    pub mlp_flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTotals {
    pub heads: usize,
    pub msa_params: u64,
    pub msa_flops_analytical: u64,
    pub msa_flops_instrumented: Option<u64>,
    pub attention_product_instrumented: Option<u64>,
    pub projection_placement_delta: Option<i64>,
    pub mlp_flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub format: String,
    pub convention: String,
    pub layers: Vec<LayerCost>,
    pub totals: CostTotals,
}

/// `2 N' H d (2D + N)`
pub fn msa_flops(tokens: usize, kv_tokens: usize, embed_dim: usize, heads: usize, head_dim: usize) -> u64 {
    let (n, nk, dm, h, d) = (tokens as u64, kv_tokens as u64, embed_dim as u64, heads as u64, head_dim as u64);
    2 * nk * h * d * (2 * dm + n)
}

/// `4 D H d`
pub fn msa_params(embed_dim: usize, heads: usize, head_dim: usize) -> u64 {
    4 * (embed_dim * heads * head_dim) as u64
}

pub fn analytical_cost(spec: &ModelSpec) -> Result<CostReport> {
    spec.validate()?;
    let n = spec.tokens();
    let layers = (0..spec.layers())
        .map(|l| {
            let h = spec.heads_per_layer[l];
            let nk = spec.kv_tokens(l);
            LayerCost {
                layer: l,
                tokens: n,
                kv_tokens: nk,
                heads: h,
                embed_dim: spec.embed_dim,
                head_dim: spec.head_dim,
                msa_params: msa_params(spec.embed_dim, h, spec.head_dim),
                msa_flops_analytical: msa_flops(n, nk, spec.embed_dim, h, spec.head_dim),
                msa_flops_instrumented: None,
                instrumented: None,
                projection_placement_delta: None,
                mlp_flops: 2 * (n * spec.embed_dim * spec.mlp_hidden()) as u64,
            }
        })
        .collect();
    Ok(finish(layers))
}

/// Runs one forward pass over `sample` and reports the executed MACs per
/// image, next to the analytical figures.
pub fn instrumented_cost(model: &VitModel, sample: &Tensor) -> Result<CostReport> {
    let mut report = analytical_cost(&model.spec)?;
    let mut tape = Tape::new();
    let trace = model.forward(&mut tape, sample, None)?;
    let batch = trace.batch.max(1) as u64;
    let mut per_layer = vec![MsaMacs::default(); model.spec.layers()];
    for (scope, &macs) in tape.macs() {
        let Some(l) = scope.layer else { continue };
        let slot = &mut per_layer[l];
        let macs = macs / batch;
        match scope.component {
            Component::QkvProjection => slot.qkv_projection += macs,
            Component::AttentionScores => slot.attention_scores += macs,
            Component::AttentionValues => slot.attention_values += macs,
            Component::OutProjection => slot.out_projection += macs,
            _ => {}
        }
    }
    for (lc, macs) in report.layers.iter_mut().zip(per_layer) {
        let total = macs.total();
        lc.msa_flops_instrumented = Some(total);
        lc.projection_placement_delta = Some(total as i64 - lc.msa_flops_analytical as i64);
        lc.instrumented = Some(macs);
    }
    Ok(finish(report.layers))
}

fn finish(layers: Vec<LayerCost>) -> CostReport {
    let instrumented = layers.iter().all(|l| l.instrumented.is_some()) && !layers.is_empty();
    let totals = CostTotals {
        heads: layers.iter().map(|l| l.heads).sum(),
        msa_params: layers.iter().map(|l| l.msa_params).sum(),
        msa_flops_analytical: layers.iter().map(|l| l.msa_flops_analytical).sum(),
        msa_flops_instrumented: instrumented
            .then(|| layers.iter().filter_map(|l| l.msa_flops_instrumented).sum()),
        attention_product_instrumented: instrumented.then(|| {
            layers
                .iter()
                .filter_map(|l| l.instrumented.as_ref())
                .map(MsaMacs::attention_product)
                .sum()
        }),
        projection_placement_delta: instrumented
            .then(|| layers.iter().filter_map(|l| l.projection_placement_delta).sum()),
        mlp_flops: layers.iter().map(|l| l.mlp_flops).sum(),
    };
    CostReport {
        format: COST_FORMAT.into(),
        convention: MAC_CONVENTION.into(),
        layers,
        totals,
    }
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost report serializes")
    }

    /// Aligned text table, one row per layer plus a total row.
    pub fn render_table(&self) -> String {
        let opt = |v: Option<u64>| v.map_or("-".to_string(), |v| v.to_string());
        let optd = |v: Option<i64>| v.map_or("-".to_string(), |v| v.to_string());
        let mut rows: Vec<[String; 8]> = vec![[
            "layer".into(),
            "N".into(),
            "N'".into(),
            "H".into(),
            "msa_params".into(),
            "flops_analytical".into(),
            "flops_instrumented".into(),
            "placement_delta".into(),
        ]];
        for l in &self.layers {
            rows.push([
                l.layer.to_string(),
                l.tokens.to_string(),
                l.kv_tokens.to_string(),
                l.heads.to_string(),
                l.msa_params.to_string(),
                l.msa_flops_analytical.to_string(),
                opt(l.msa_flops_instrumented),
                optd(l.projection_placement_delta),
            ]);
        }
        let t = &self.totals;
        rows.push([
            "total".into(),
            String::new(),
            String::new(),
            t.heads.to_string(),
            t.msa_params.to_string(),
            t.msa_flops_analytical.to_string(),
            opt(t.msa_flops_instrumented),
            optd(t.projection_placement_delta),
        ]);
        let widths: Vec<usize> = (0..8)
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = format!("# {}\n", self.convention);
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell:>w$}"))
                .collect();
            writeln!(out, "{}", line.join("  ").trim_end()).unwrap();
        }
        out
    }
}
