//! Head and token importance from attention maps.
//!
//! * Heads: information entropy of the calibration-averaged attention map,
//!   `S(A) = sum_i sum_j -A_ij ln A_ij`. Near-uniform (high entropy) heads
//!   carry little information and are pruned first.
//! * Tokens: gradient-weighted attention, `|1/H sum_h sum_q dL/dA[q,i] A[q,i]|`,
//!   summed down the key token's column. The row reduction is available as
//!   [`TokenReduction::QueryRow`].
//! * Baseline: first-order Taylor importance of the key embeddings.

use serde::{Deserialize, Serialize};

use crate::capture::{AttentionCapture, AttentionMap};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::vit::VitModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Head,
    Token,
}

impl std::fmt::Display for UnitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UnitKind::Head => "head",
            UnitKind::Token => "token",
        })
    }
}

/// One prunable unit's score. Higher means more important; ranking removes
/// the lowest `weighted` scores first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScore {
    pub kind: UnitKind,
    pub layer: usize,
    /// Original head id or token position.
    pub unit: usize,
    pub raw: f64,
    pub weighted: f64,
    pub samples: usize,
    /// Map entropy, for head scores.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
}

impl ImportanceScore {
    pub fn new(kind: UnitKind, layer: usize, unit: usize, raw: f64) -> Self {
        ImportanceScore { kind, layer, unit, raw, weighted: raw, samples: 0, entropy: None }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// Entropy of the averaged map.
    #[default]
    AveragedMap,
    /// Average of each sample's map entropy.
    SampleMean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenReduction {
    /// Sum over queries of the key token's column.
    #[default]
    KeyColumn,
    /// Sum over keys of the token's query row.
    QueryRow,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenCriterion {
    #[default]
    GradientAttention,
    Taylor,
}

/// `sum -p ln p` with `0 ln 0 = 0`.
pub fn entropy_of(values: &[f64]) -> f64 {
    values
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

pub fn map_entropy(map: &AttentionMap) -> f64 {
    entropy_of(&map.data)
}

pub fn head_entropy(capture: &AttentionCapture, layer: usize, head: usize) -> Result<f64> {
    head_entropy_with(capture, layer, head, EntropyMode::AveragedMap)
}

pub fn head_entropy_with(
    capture: &AttentionCapture,
    layer: usize,
    head: usize,
    mode: EntropyMode,
) -> Result<f64> {
    match mode {
        EntropyMode::AveragedMap => Ok(map_entropy(&capture.map(layer, head)?)),
        EntropyMode::SampleMean => capture.mean_sample_entropy(layer, head),
    }
}

/// Upper bound of a head's map entropy: `N ln N`.
pub fn max_head_entropy(tokens: usize) -> f64 {
    tokens as f64 * (tokens as f64).ln()
}

/// Head scores for every head in the capture. `raw = N ln N - S`, the
/// entropy deficit from a uniform map, so the highest-entropy heads have the
/// lowest scores.
pub fn head_scores(capture: &AttentionCapture, mode: EntropyMode) -> Result<Vec<ImportanceScore>> {
    let ceiling = max_head_entropy(capture.tokens());
    let mut out = Vec::new();
    for l in 0..capture.layers() {
        for h in 0..capture.heads(l) {
            let s = head_entropy_with(capture, l, h, mode)?;
            let mut score = ImportanceScore::new(
                UnitKind::Head,
                l,
                capture.layer(l).head_ids[h],
                (ceiling - s).max(0.0),
            );
            score.samples = capture.samples();
            score.entropy = Some(s);
            out.push(score);
        }
    }
    Ok(out)
}

fn column_of(capture: &AttentionCapture, layer: usize, token: usize) -> Result<usize> {
    if token == 0 {
        return Err(Error::ClassTokenProtected { layer });
    }
    if layer >= capture.layers() {
        return Err(Error::contract(format!("layer {layer} out of range")));
    }
    capture
        .layer(layer)
        .kv_indices
        .binary_search(&token)
        .map_err(|_| Error::contract(format!("token {token} is not retained in layer {layer}")))
}

/// Gradient-weighted attention importance of key token `token` (original
/// position) in `layer`, using the default column reduction.
pub fn token_importance(capture: &AttentionCapture, layer: usize, token: usize) -> Result<f64> {
    token_importance_with(capture, layer, token, TokenReduction::KeyColumn)
}

pub fn token_importance_with(
    capture: &AttentionCapture,
    layer: usize,
    token: usize,
    reduction: TokenReduction,
) -> Result<f64> {
    let col = column_of(capture, layer, token)?;
    if !capture.has_gradients() {
        return Err(Error::NotCalibrated("capture holds no gradient maps".into()));
    }
    let heads = capture.heads(layer);
    let mut total = 0.0;
    for h in 0..heads {
        let a = capture.map(layer, h)?;
        let g = capture.grad_map(layer, h)?;
        total += match reduction {
            TokenReduction::KeyColumn => (0..a.rows).map(|q| g.get(q, col) * a.get(q, col)).sum::<f64>(),
            TokenReduction::QueryRow => {
                (0..a.cols).map(|k| g.get(token, k) * a.get(token, k)).sum::<f64>()
            }
        };
    }
    Ok((total / heads as f64).abs())
}

/// Scores for every retained non-class token of every layer.
pub fn token_scores(
    capture: &AttentionCapture,
    reduction: TokenReduction,
) -> Result<Vec<ImportanceScore>> {
    let mut out = Vec::new();
    for l in 0..capture.layers() {
        for &t in capture.layer(l).kv_indices.iter().skip(1) {
            let mut s = ImportanceScore::new(
                UnitKind::Token,
                l,
                t,
                token_importance_with(capture, l, t, reduction)?,
            );
            s.samples = capture.samples();
            out.push(s);
        }
    }
    Ok(out)
}

/// Runs forward and backward over `data`, averaging every attention map and
/// its cross-entropy gradient.
pub fn calibrate(model: &VitModel, data: &Dataset, batch_size: usize) -> Result<AttentionCapture> {
    if data.is_empty() {
        return Err(Error::contract("calibration set is empty"));
    }
    let mut capture = AttentionCapture::new(model);
    for batch in data.batches(batch_size) {
        let batch = batch?;
        let mut tape = Tape::new();
        let trace = model.forward(&mut tape, &batch.images, Some(&mut capture))?;
        let loss = tape.cross_entropy(trace.logits, &batch.labels)?;
        tape.backward(loss)?;
        capture.accumulate_grads(&tape, &trace, batch.len() as f64)?;
    }
    Ok(capture)
}

/// Taylor importance of the key embeddings,
/// `|mean_s 1/D_k sum_d dL_s/dk[i,d] k[i,d]|`, for every retained
/// non-class token of every layer. `D_k` is the key width `H_l * d`.
pub fn taylor_token_scores(model: &VitModel, data: &Dataset) -> Result<Vec<ImportanceScore>> {
    if data.is_empty() {
        return Err(Error::contract("calibration set is empty"));
    }
    let spec = &model.spec;
    let n = spec.tokens();
    let mut sums: Vec<Vec<f64>> = (0..spec.layers()).map(|_| vec![0.0; n]).collect();
    let mut tape = Tape::new();
    let trace = model.forward(&mut tape, &data.images, None)?;
    let loss = tape.cross_entropy(trace.logits, &data.labels)?;
    tape.backward(loss)?;
    let batch = data.len();
    for (l, &k) in trace.keys.iter().enumerate() {
        let width = spec.heads_per_layer[l] * spec.head_dim;
        let kv = tape.value(k).data();
        let gv = tape
            .grad(k)
            .ok_or_else(|| Error::NotCalibrated(format!("no key gradient in layer {l}")))?
            .data();
        for s in 0..batch {
            for t in 0..n {
                let off = (s * n + t) * width;
                let dot: f64 = (0..width).map(|d| gv[off + d] * kv[off + d]).sum();
                // gradient of the batch mean -> gradient of the sample's own loss
                sums[l][t] += dot * batch as f64 / width as f64;
            }
        }
    }
    let mut out = Vec::new();
    for (l, row) in sums.iter().enumerate() {
        for t in spec.kv_indices(l).into_iter().skip(1) {
            let mut s = ImportanceScore::new(UnitKind::Token, l, t, (row[t] / batch as f64).abs());
            s.samples = batch;
            out.push(s);
        }
    }
    Ok(out)
}

/// Single-token form of [`taylor_token_scores`].
pub fn taylor_token_importance(
    model: &VitModel,
    data: &Dataset,
    layer: usize,
    token: usize,
) -> Result<f64> {
    if token == 0 {
        return Err(Error::ClassTokenProtected { layer });
    }
    taylor_token_scores(model, data)?
        .into_iter()
        .find(|s| s.layer == layer && s.unit == token)
        .map(|s| s.raw)
        .ok_or_else(|| Error::contract(format!("token {token} is not retained in layer {layer}")))
}

/// Mean head entropy per layer of `capture`'s averaged maps.
pub fn mean_entropy_per_layer(capture: &AttentionCapture) -> Result<Vec<f64>> {
    (0..capture.layers())
        .map(|l| {
            let h = capture.heads(l);
            let total: f64 = (0..h).map(|i| head_entropy(capture, l, i)).sum::<Result<f64>>()?;
            Ok(total / h as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn uniform_map_has_maximum_entropy() {
        let m = AttentionMap::uniform(4, 4);
        close(map_entropy(&m), 4.0 * 4f64.ln(), 1e-12);
        close(map_entropy(&m), 5.5452, 1e-4);
    }

    #[test]
    fn one_hot_rows_have_zero_entropy() {
        let m = AttentionMap::new(3, 3, vec![1., 0., 0., 0., 0., 1., 0., 1., 0.]).unwrap();
        assert_eq!(map_entropy(&m), 0.0);
    }

    #[test]
    fn half_and_delta_rows() {
        let m = AttentionMap::new(2, 2, vec![0.5, 0.5, 1.0, 0.0]).unwrap();
        close(map_entropy(&m), 2f64.ln(), 1e-15);
        close(map_entropy(&m), 0.6931, 1e-4);
    }
}
