//! Running averages of attention maps and their loss gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::vit::{ForwardTrace, VitModel};

/// A dense `rows x cols` map (queries x retained keys).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl AttentionMap {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dims("attention map", &[rows, cols], &[data.len()]));
        }
        Ok(AttentionMap { rows, cols, data })
    }

    pub fn uniform(rows: usize, cols: usize) -> Self {
        AttentionMap {
            rows,
            cols,
            data: vec![1.0 / cols as f64; rows * cols],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }
}

#[derive(Clone, Debug)]
pub struct LayerCapture {
    /// Original head id per slot at capture time.
    pub head_ids: Vec<usize>,
    /// Original token position of each map column.
    pub kv_indices: Vec<usize>,
    map_sum: Vec<Vec<f64>>,
    grad_sum: Vec<Vec<f64>>,
    entropy_sum: Vec<f64>,
}

/// Input to [`AttentionCapture::from_maps`].
#[derive(Clone, Debug)]
pub struct LayerMaps {
    pub head_ids: Vec<usize>,
    pub kv_indices: Vec<usize>,
    pub maps: Vec<AttentionMap>,
    pub grads: Vec<AttentionMap>,
}

/// Per (layer, head) averages of `A` and `dL/dA` over a calibration set.
///
/// Gradients are those of each sample's own loss, so the averages do not
/// depend on how samples were batched.
#[derive(Clone, Debug)]
pub struct AttentionCapture {
    tokens: usize,
    layers: Vec<LayerCapture>,
    map_samples: usize,
    grad_samples: usize,
}

impl AttentionCapture {
    pub fn new(model: &VitModel) -> Self {
        let spec = &model.spec;
        let tokens = spec.tokens();
        let layers = (0..spec.layers())
            .map(|l| {
                let heads = spec.heads_per_layer[l];
                let cells = tokens * spec.kv_tokens(l);
                LayerCapture {
                    head_ids: model.blocks[l].head_ids.clone(),
                    kv_indices: spec.kv_indices(l),
                    map_sum: vec![vec![0.0; cells]; heads],
                    grad_sum: vec![vec![0.0; cells]; heads],
                    entropy_sum: vec![0.0; heads],
                }
            })
            .collect();
        AttentionCapture {
            tokens,
            layers,
            map_samples: 0,
            grad_samples: 0,
        }
    }

    /// A one-sample capture from explicit maps. `grads` may be empty for a
    /// capture without gradients.
    pub fn from_maps(tokens: usize, layers: Vec<LayerMaps>) -> Result<Self> {
        let has_grads = layers.iter().any(|l| !l.grads.is_empty());
        let mut out = Vec::with_capacity(layers.len());
        for (l, lm) in layers.into_iter().enumerate() {
            let heads = lm.head_ids.len();
            let cols = lm.kv_indices.len();
            if heads == 0 || lm.maps.len() != heads || (has_grads && lm.grads.len() != heads) {
                return Err(Error::contract(format!("layer {l}: one map per head required")));
            }
            for m in lm.maps.iter().chain(&lm.grads) {
                if m.rows != tokens || m.cols != cols {
                    return Err(Error::dims("capture map", &[m.rows, m.cols], &[tokens, cols]));
                }
            }
            out.push(LayerCapture {
                head_ids: lm.head_ids,
                kv_indices: lm.kv_indices,
                entropy_sum: lm.maps.iter().map(crate::criteria::map_entropy).collect(),
                map_sum: lm.maps.into_iter().map(|m| m.data).collect(),
                grad_sum: if has_grads {
                    lm.grads.into_iter().map(|m| m.data).collect()
                } else {
                    vec![vec![0.0; tokens * cols]; heads]
                },
            });
        }
        Ok(AttentionCapture {
            tokens,
            layers: out,
            map_samples: 1,
            grad_samples: usize::from(has_grads),
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn layers(&self) -> usize {
        self.layers.len()
    }

    pub fn heads(&self, layer: usize) -> usize {
        self.layers[layer].head_ids.len()
    }

    pub fn layer(&self, layer: usize) -> &LayerCapture {
        &self.layers[layer]
    }

    pub fn samples(&self) -> usize {
        self.map_samples
    }

    pub fn has_gradients(&self) -> bool {
        self.grad_samples > 0
    }

    fn check_structure(&self, tape: &Tape, trace: &ForwardTrace) -> Result<()> {
        if trace.attention.len() != self.layers.len() {
            return Err(Error::contract("capture and model have different depths"));
        }
        for (l, (&a, lc)) in trace.attention.iter().zip(&self.layers).enumerate() {
            let want = [
                trace.batch * lc.head_ids.len(),
                self.tokens,
                lc.kv_indices.len(),
            ];
            if tape.value(a).shape() != want {
                return Err(Error::Contract(format!(
                    "layer {l}: attention shape {:?} does not match capture {want:?}",
                    tape.value(a).shape()
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn accumulate_maps(&mut self, tape: &Tape, trace: &ForwardTrace) -> Result<()> {
        self.check_structure(tape, trace)?;
        for (lc, &a) in self.layers.iter_mut().zip(&trace.attention) {
            let heads = lc.head_ids.len();
            let cells = lc.map_sum[0].len();
            for (i, chunk) in tape.value(a).data().chunks(cells).enumerate() {
                let h = i % heads;
                lc.map_sum[h].iter_mut().zip(chunk).for_each(|(s, x)| *s += x);
                lc.entropy_sum[h] += crate::criteria::entropy_of(chunk);
            }
        }
        self.map_samples += trace.batch;
        Ok(())
    }

    /// Folds in `dL/dA` after `tape.backward`. `per_sample_scale` converts
    /// the recorded gradient into that of each sample's own loss (the batch
    /// size when the loss was a batch mean).
    pub fn accumulate_grads(
        &mut self,
        tape: &Tape,
        trace: &ForwardTrace,
        per_sample_scale: f64,
    ) -> Result<()> {
        self.check_structure(tape, trace)?;
        for (l, (lc, &a)) in self.layers.iter_mut().zip(&trace.attention).enumerate() {
            let grad = tape.grad(a).ok_or_else(|| {
                Error::NotCalibrated(format!("no gradient reached layer {l} attention"))
            })?;
            let heads = lc.head_ids.len();
            let cells = lc.grad_sum[0].len();
            for (i, chunk) in grad.data().chunks(cells).enumerate() {
                lc.grad_sum[i % heads]
                    .iter_mut()
                    .zip(chunk)
                    .for_each(|(s, g)| *s += g * per_sample_scale);
            }
        }
        self.grad_samples += trace.batch;
        Ok(())
    }

    fn check_index(&self, layer: usize, head: usize) -> Result<()> {
        if layer >= self.layers.len() || head >= self.layers[layer].head_ids.len() {
            return Err(Error::contract(format!("no head ({layer}, {head}) in capture")));
        }
        Ok(())
    }

    /// Calibration-averaged attention map of `(layer, head slot)`.
    pub fn map(&self, layer: usize, head: usize) -> Result<AttentionMap> {
        self.check_index(layer, head)?;
        if self.map_samples == 0 {
            return Err(Error::NotCalibrated("no attention maps captured".into()));
        }
        let lc = &self.layers[layer];
        let n = self.map_samples as f64;
        AttentionMap::new(
            self.tokens,
            lc.kv_indices.len(),
            lc.map_sum[head].iter().map(|s| s / n).collect(),
        )
    }

    /// Calibration-averaged `dL/dA` of `(layer, head slot)`.
    pub fn grad_map(&self, layer: usize, head: usize) -> Result<AttentionMap> {
        self.check_index(layer, head)?;
        if self.grad_samples == 0 {
            return Err(Error::NotCalibrated("no attention gradients captured".into()));
        }
        let lc = &self.layers[layer];
        let n = self.grad_samples as f64;
        AttentionMap::new(
            self.tokens,
            lc.kv_indices.len(),
            lc.grad_sum[head].iter().map(|s| s / n).collect(),
        )
    }

    /// Mean over samples of each sample's own map entropy.
    pub fn mean_sample_entropy(&self, layer: usize, head: usize) -> Result<f64> {
        self.check_index(layer, head)?;
        if self.map_samples == 0 {
            return Err(Error::NotCalibrated("no attention maps captured".into()));
        }
        Ok(self.layers[layer].entropy_sum[head] / self.map_samples as f64)
    }
}
