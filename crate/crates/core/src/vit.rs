//! A small ViT classifier whose attention blocks expose their maps, accept a
//! per-layer key/value token index set, and support structural head removal.
//!
//! Per-head projection weights are stored as contiguous `head_dim`-wide
//! column blocks of `W^q`, `W^k`, `W^v` (`D x H_l*d`) and row blocks of
//! `W^o` (`H_l*d x D`), so removing head `h` is a block deletion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::capture::AttentionCapture;
use crate::error::{Error, Result};
use crate::tape::{Component, MacScope, Tape, Var};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub heads_per_layer: Vec<usize>,
    pub head_dim: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    /// Per layer: the key/value token positions kept by the index layer,
    /// or `None` for all tokens.
    pub retained_kv_indices: Vec<Option<Vec<usize>>>,
}

impl ModelSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        image_size: usize,
        patch_size: usize,
        channels: usize,
        embed_dim: usize,
        layers: usize,
        heads: usize,
        head_dim: usize,
        mlp_ratio: f64,
        num_classes: usize,
    ) -> Self {
        ModelSpec {
            image_size,
            patch_size,
            channels,
            embed_dim,
            heads_per_layer: vec![heads; layers],
            head_dim,
            mlp_ratio,
            num_classes,
            retained_kv_indices: vec![None; layers],
        }
    }

    /// The desk-scale geometry: 16x16 RGB, 4x4 patches (17 tokens),
    /// 4 layers of 4 heads of width 8, `D = 32`.
    pub fn toy() -> Self {
        Self::uniform(16, 4, 3, 32, 4, 4, 8, 4.0, 4)
    }

    /// ViT-Base/16 at 224px.
    pub fn vit_base() -> Self {
        Self::uniform(224, 16, 3, 768, 12, 12, 64, 4.0, 1000)
    }

    pub fn layers(&self) -> usize {
        self.heads_per_layer.len()
    }

    pub fn patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Sequence length including the class token.
    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    /// Number of key/value tokens attended to in `layer`.
    pub fn kv_tokens(&self, layer: usize) -> usize {
        self.retained_kv_indices[layer]
            .as_ref()
            .map_or(self.tokens(), |idx| idx.len())
    }

    pub fn kv_indices(&self, layer: usize) -> Vec<usize> {
        self.retained_kv_indices[layer]
            .clone()
            .unwrap_or_else(|| (0..self.tokens()).collect())
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.mlp_ratio * self.embed_dim as f64).round() as usize).max(1)
    }

    pub fn total_heads(&self) -> usize {
        self.heads_per_layer.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} is not a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.layers() == 0 {
            return bad("model needs at least one layer".into());
        }
        if self.embed_dim == 0 || self.head_dim == 0 || self.channels == 0 || self.num_classes == 0 {
            return bad("embed_dim, head_dim, channels and num_classes must be positive".into());
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            return bad(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        if let Some(l) = self.heads_per_layer.iter().position(|&h| h == 0) {
            return Err(Error::DegenerateLayer { layer: l });
        }
        if self.retained_kv_indices.len() != self.layers() {
            return bad(format!(
                "{} retained index lists for {} layers",
                self.retained_kv_indices.len(),
                self.layers()
            ));
        }
        for (l, idx) in self.retained_kv_indices.iter().enumerate() {
            if let Some(idx) = idx {
                validate_kv_indices(l, idx, self.tokens())?;
            }
        }
        Ok(())
    }
}

/// Index lists must keep the class token, be strictly increasing and stay
/// inside the sequence.
pub fn validate_kv_indices(layer: usize, indices: &[usize], tokens: usize) -> Result<()> {
    if indices.first() != Some(&0) {
        return Err(Error::ClassTokenProtected { layer });
    }
    if indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract(format!(
            "layer {layer}: token indices must be strictly increasing and unique"
        )));
    }
    if let Some(&last) = indices.last() {
        if last >= tokens {
            return Err(Error::contract(format!(
                "layer {layer}: token index {last} out of range for {tokens} tokens"
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1_weight: Tensor,
    pub norm1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub out_bias: Tensor,
    pub norm2_weight: Tensor,
    pub norm2_bias: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
    /// Original head id of each current slot.
    pub head_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitModel {
    pub spec: ModelSpec,
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub norm_weight: Tensor,
    pub norm_bias: Tensor,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

/// Handles into the tape for one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    /// One per entry of [`VitModel::params`], same order.
    pub params: Vec<Var>,
    /// Per layer: post-softmax attention maps, `[batch*heads, N, N'_l]`.
    pub attention: Vec<Var>,
    /// Per layer: key projections before head split, `[batch, N, H_l*d]`.
    pub keys: Vec<Var>,
    pub batch: usize,
}

fn trunc_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * INIT_STD;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

impl VitModel {
    /// Truncated-normal projections, zero biases, unit norm gains.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_model = spec.embed_dim;
        let hidden = spec.mlp_hidden();
        let patch_weight = trunc_normal(&mut rng, vec![spec.patch_dim(), d_model]);
        let cls_token = trunc_normal(&mut rng, vec![d_model]);
        let pos_embed = trunc_normal(&mut rng, vec![spec.tokens(), d_model]);
        let blocks = spec
            .heads_per_layer
            .iter()
            .map(|&h| {
                let inner = h * spec.head_dim;
                Block {
                    norm1_weight: Tensor::full(vec![d_model], 1.0),
                    norm1_bias: Tensor::zeros(vec![d_model]),
                    wq: trunc_normal(&mut rng, vec![d_model, inner]),
                    wk: trunc_normal(&mut rng, vec![d_model, inner]),
                    wv: trunc_normal(&mut rng, vec![d_model, inner]),
                    wo: trunc_normal(&mut rng, vec![inner, d_model]),
                    out_bias: Tensor::zeros(vec![d_model]),
                    norm2_weight: Tensor::full(vec![d_model], 1.0),
                    norm2_bias: Tensor::zeros(vec![d_model]),
                    fc1_weight: trunc_normal(&mut rng, vec![d_model, hidden]),
                    fc1_bias: Tensor::zeros(vec![hidden]),
                    fc2_weight: trunc_normal(&mut rng, vec![hidden, d_model]),
                    fc2_bias: Tensor::zeros(vec![d_model]),
                    head_ids: (0..h).collect(),
                }
            })
            .collect();
        let head_weight = trunc_normal(&mut rng, vec![d_model, spec.num_classes]);
        Ok(VitModel {
            patch_weight,
            patch_bias: Tensor::zeros(vec![d_model]),
            cls_token,
            pos_embed,
            blocks,
            norm_weight: Tensor::full(vec![d_model], 1.0),
            norm_bias: Tensor::zeros(vec![d_model]),
            head_weight,
            head_bias: Tensor::zeros(vec![spec.num_classes]),
            spec,
        })
    }

    /// Named parameters in canonical order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_embed.weight".into(), &self.patch_weight),
            ("patch_embed.bias".into(), &self.patch_bias),
            ("cls_token".into(), &self.cls_token),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{l}.{n}");
            out.extend([
                (p("norm1.weight"), &b.norm1_weight),
                (p("norm1.bias"), &b.norm1_bias),
                (p("attn.q"), &b.wq),
                (p("attn.k"), &b.wk),
                (p("attn.v"), &b.wv),
                (p("attn.out.weight"), &b.wo),
                (p("attn.out.bias"), &b.out_bias),
                (p("norm2.weight"), &b.norm2_weight),
                (p("norm2.bias"), &b.norm2_bias),
                (p("mlp.fc1.weight"), &b.fc1_weight),
                (p("mlp.fc1.bias"), &b.fc1_bias),
                (p("mlp.fc2.weight"), &b.fc2_weight),
                (p("mlp.fc2.bias"), &b.fc2_bias),
            ]);
        }
        out.extend([
            ("norm.weight".into(), &self.norm_weight),
            ("norm.bias".into(), &self.norm_bias),
            ("head.weight".into(), &self.head_weight),
            ("head.bias".into(), &self.head_bias),
        ]);
        out
    }

    /// Same order as [`params`](Self::params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.patch_weight,
            &mut self.patch_bias,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            out.extend([
                &mut b.norm1_weight,
                &mut b.norm1_bias,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.out_bias,
                &mut b.norm2_weight,
                &mut b.norm2_bias,
                &mut b.fc1_weight,
                &mut b.fc1_bias,
                &mut b.fc2_weight,
                &mut b.fc2_bias,
            ]);
        }
        out.extend([
            &mut self.norm_weight,
            &mut self.norm_bias,
            &mut self.head_weight,
            &mut self.head_bias,
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Entries of the four MSA projection matrices, summed over layers.
    pub fn msa_param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.wq.numel() + b.wk.numel() + b.wv.numel() + b.wo.numel())
            .sum()
    }

    /// Checks every tensor shape against the spec.
    pub fn check_shapes(&self) -> Result<()> {
        self.spec.validate()?;
        let s = &self.spec;
        let (dm, hid) = (s.embed_dim, s.mlp_hidden());
        let mut expect: Vec<Vec<usize>> = vec![
            vec![s.patch_dim(), dm],
            vec![dm],
            vec![dm],
            vec![s.tokens(), dm],
        ];
        for &h in &s.heads_per_layer {
            let inner = h * s.head_dim;
            expect.extend([
                vec![dm],
                vec![dm],
                vec![dm, inner],
                vec![dm, inner],
                vec![dm, inner],
                vec![inner, dm],
                vec![dm],
                vec![dm],
                vec![dm],
                vec![dm, hid],
                vec![hid],
                vec![hid, dm],
                vec![dm],
            ]);
        }
        expect.extend([vec![dm], vec![dm], vec![dm, s.num_classes], vec![s.num_classes]]);
        let params = self.params();
        if params.len() != expect.len() {
            return Err(Error::contract("parameter list does not match layer count"));
        }
        for ((name, t), shape) in params.iter().zip(&expect) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, spec requires {shape:?}",
                    t.shape()
                )));
            }
        }
        for (l, b) in self.blocks.iter().enumerate() {
            if b.head_ids.len() != s.heads_per_layer[l] {
                return Err(Error::contract(format!("layer {l}: head id list out of sync")));
            }
        }
        Ok(())
    }

    /// Splits `[batch, C, H, W]` images into `[batch, patches, C*p*p]`.
    pub fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        let s = &self.spec;
        let want = [s.channels, s.image_size, s.image_size];
        if images.rank() != 4 || images.shape()[1..] != want {
            return Err(Error::dims("patchify", images.shape(), &want));
        }
        let (batch, c, side, p) = (images.shape()[0], s.channels, s.image_size, s.patch_size);
        let grid = side / p;
        let src = images.data();
        let mut out = Vec::with_capacity(src.len());
        for b in 0..batch {
            for py in 0..grid {
                for px in 0..grid {
                    for ch in 0..c {
                        for i in 0..p {
                            let row = ((b * c + ch) * side + py * p + i) * side + px * p;
                            out.extend_from_slice(&src[row..row + p]);
                        }
                    }
                }
            }
        }
        Tensor::new(vec![batch, grid * grid, s.patch_dim()], out)
    }

    /// Records a forward pass on `tape`. When `capture` is given, every
    /// layer's attention maps are folded into its running averages.
    pub fn forward(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        capture: Option<&mut AttentionCapture>,
    ) -> Result<ForwardTrace> {
        let s = &self.spec;
        let patches = self.patchify(images)?;
        let batch = patches.shape()[0];
        let params: Vec<Var> = self.params().into_iter().map(|(_, t)| tape.param(t)).collect();
        let mut it = params.iter().copied();
        let mut next = || it.next().expect("parameter list");

        let (pw, pb, cls, pos) = (next(), next(), next(), next());
        tape.set_scope(Some(MacScope { layer: None, component: Component::Embedding }));
        let x = tape.constant(patches);
        let x = tape.matmul(x, pw)?;
        let x = tape.add(x, pb)?;
        let x = tape.prepend_token(x, cls)?;
        let mut x = tape.add(x, pos)?;

        let mut attention = Vec::with_capacity(s.layers());
        let mut keys = Vec::with_capacity(s.layers());
        let scale = 1.0 / (s.head_dim as f64).sqrt();
        for (l, &heads) in s.heads_per_layer.iter().enumerate() {
            let [n1w, n1b, wq, wk, wv, wo, bo, n2w, n2b, f1w, f1b, f2w, f2b] =
                std::array::from_fn(|_| next());
            let scope = |component| Some(MacScope { layer: Some(l), component });

            let h = tape.layernorm(x, n1w, n1b, LN_EPS)?;
            tape.set_scope(scope(Component::QkvProjection));
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            keys.push(k);
            let qh = tape.split_heads(q, heads)?;
            let kh = tape.split_heads(k, heads)?;
            let vh = tape.split_heads(v, heads)?;
            let mut kt = tape.transpose(kh)?;
            let mut vsel = vh;
            if let Some(idx) = &s.retained_kv_indices[l] {
                kt = tape.gather_columns(kt, idx)?;
                let vt = tape.transpose(vh)?;
                let vt = tape.gather_columns(vt, idx)?;
                vsel = tape.transpose(vt)?;
            }
            tape.set_scope(scope(Component::AttentionScores));
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores)?;
            attention.push(attn);
            tape.set_scope(scope(Component::AttentionValues));
            let o = tape.matmul(attn, vsel)?;
            let o = tape.merge_heads(o, heads)?;
            tape.set_scope(scope(Component::OutProjection));
            let o = tape.matmul(o, wo)?;
            let o = tape.add(o, bo)?;
            x = tape.add(x, o)?;

            let h = tape.layernorm(x, n2w, n2b, LN_EPS)?;
            tape.set_scope(scope(Component::Mlp));
            let h = tape.matmul(h, f1w)?;
            let h = tape.add(h, f1b)?;
            let h = tape.gelu(h);
            let h = tape.matmul(h, f2w)?;
            let h = tape.add(h, f2b)?;
            x = tape.add(x, h)?;
        }

        let (nw, nb, hw, hb) = (next(), next(), next(), next());
        let x = tape.layernorm(x, nw, nb, LN_EPS)?;
        let x = tape.transpose(x)?;
        let x = tape.gather_columns(x, &[0])?;
        let x = tape.reshape(x, &[batch, s.embed_dim])?;
        tape.set_scope(Some(MacScope { layer: None, component: Component::Classifier }));
        let logits = tape.matmul(x, hw)?;
        let logits = tape.add(logits, hb)?;
        tape.set_scope(None);

        let trace = ForwardTrace { logits, params, attention, keys, batch };
        if let Some(capture) = capture {
            capture.accumulate_maps(tape, &trace)?;
        }
        Ok(trace)
    }

    /// Inference-only logits, `[batch, num_classes]`.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let trace = self.forward(&mut tape, images, None)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// Installs the index layer for `layer`: keys and values are gathered
    /// at `indices` after projection, queries stay at full length.
    pub fn apply_kv_index(&mut self, layer: usize, indices: &[usize]) -> Result<()> {
        if layer >= self.spec.layers() {
            return Err(Error::contract(format!("layer {layer} out of range")));
        }
        validate_kv_indices(layer, indices, self.spec.tokens())?;
        self.spec.retained_kv_indices[layer] = Some(indices.to_vec());
        Ok(())
    }

    /// Deletes the projection blocks of the heads in slots `slots`. Slots
    /// renumber afterwards; `Block::head_ids` keeps the original ids.
    pub fn remove_heads(&mut self, layer: usize, slots: &[usize]) -> Result<()> {
        let heads = *self
            .spec
            .heads_per_layer
            .get(layer)
            .ok_or_else(|| Error::contract(format!("layer {layer} out of range")))?;
        let mut drop = vec![false; heads];
        for &h in slots {
            if h >= heads {
                return Err(Error::contract(format!(
                    "layer {layer} has {heads} heads, cannot remove slot {h}"
                )));
            }
            if std::mem::replace(&mut drop[h], true) {
                return Err(Error::contract(format!("layer {layer}: slot {h} listed twice")));
            }
        }
        let keep: Vec<usize> = (0..heads).filter(|&h| !drop[h]).collect();
        if keep.is_empty() {
            return Err(Error::DegenerateLayer { layer });
        }
        if keep.len() == heads {
            return Ok(());
        }
        let d = self.spec.head_dim;
        let block = &mut self.blocks[layer];
        for w in [&mut block.wq, &mut block.wk, &mut block.wv] {
            *w = keep_column_blocks(w, &keep, d);
        }
        block.wo = keep_row_blocks(&block.wo, &keep, d);
        block.head_ids = keep.iter().map(|&h| block.head_ids[h]).collect();
        self.spec.heads_per_layer[layer] = keep.len();
        Ok(())
    }
}

fn keep_column_blocks(w: &Tensor, keep: &[usize], width: usize) -> Tensor {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut data = Vec::with_capacity(rows * keep.len() * width);
    for r in 0..rows {
        let row = &w.data()[r * cols..(r + 1) * cols];
        for &h in keep {
            data.extend_from_slice(&row[h * width..(h + 1) * width]);
        }
    }
    Tensor::new(vec![rows, keep.len() * width], data).expect("shape")
}

fn keep_row_blocks(w: &Tensor, keep: &[usize], width: usize) -> Tensor {
    let cols = w.shape()[1];
    let mut data = Vec::with_capacity(keep.len() * width * cols);
    for &h in keep {
        data.extend_from_slice(&w.data()[h * width * cols..(h + 1) * width * cols]);
    }
    Tensor::new(vec![keep.len() * width, cols], data).expect("shape")
}
