//! Shared oracles: a straight-line forward evaluator written without the
//! tape, and finite-difference helpers.

#![allow(dead_code)]

use amg_core::{Dataset, ModelSpec, SyntheticSpec, Tensor, VitModel};

pub const LN_EPS: f64 = 1e-6;

/// Hook applied to each post-softmax map, `(layer, head slot, map)`, with
/// the map stored row-major as `N x N'`.
pub type MapHook<'a> = &'a dyn Fn(usize, usize, &mut [f64]);

pub struct Reference<'a> {
    pub model: &'a VitModel,
    pub hook: Option<MapHook<'a>>,
}

fn layernorm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) * inv * g + b).collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// `x (1 x rows) . W (rows x cols)`
fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), rows);
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += x[r] * w.data()[r * cols + c];
        }
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

impl<'a> Reference<'a> {
    pub fn new(model: &'a VitModel) -> Self {
        Reference { model, hook: None }
    }

    /// Logits of one `[C, H, W]` image given as a flat slice.
    pub fn logits(&self, image: &[f64]) -> Vec<f64> {
        self.run(image).0
    }

    /// Logits plus every layer's maps, `[layer][head] -> N x N'`.
    pub fn run(&self, image: &[f64]) -> (Vec<f64>, Vec<Vec<Vec<f64>>>) {
        let m = self.model;
        let s = &m.spec;
        let (side, p, c, dm, d) = (s.image_size, s.patch_size, s.channels, s.embed_dim, s.head_dim);
        let grid = side / p;
        let n = s.tokens();

        let mut tokens: Vec<Vec<f64>> = vec![m.cls_token.data().to_vec()];
        for gy in 0..grid {
            for gx in 0..grid {
                let mut patch = Vec::new();
                for ch in 0..c {
                    for i in 0..p {
                        for j in 0..p {
                            patch.push(image[(ch * side + gy * p + i) * side + gx * p + j]);
                        }
                    }
                }
                tokens.push(add(&vecmat(&patch, &m.patch_weight), m.patch_bias.data()));
            }
        }
        for (t, tok) in tokens.iter_mut().enumerate() {
            *tok = add(tok, m.pos_embed.row(t));
        }

        let mut maps = Vec::new();
        for (l, b) in m.blocks.iter().enumerate() {
            let heads = s.heads_per_layer[l];
            let keep = s.kv_indices(l);
            let h: Vec<Vec<f64>> = tokens
                .iter()
                .map(|t| layernorm(t, b.norm1_weight.data(), b.norm1_bias.data()))
                .collect();
            let q: Vec<Vec<f64>> = h.iter().map(|x| vecmat(x, &b.wq)).collect();
            let k: Vec<Vec<f64>> = h.iter().map(|x| vecmat(x, &b.wk)).collect();
            let v: Vec<Vec<f64>> = h.iter().map(|x| vecmat(x, &b.wv)).collect();
            let mut concat = vec![vec![0.0; heads * d]; n];
            let mut layer_maps = Vec::new();
            for hd in 0..heads {
                let cols = hd * d..(hd + 1) * d;
                let mut a = vec![0.0; n * keep.len()];
                for i in 0..n {
                    let logits: Vec<f64> = keep
                        .iter()
                        .map(|&j| {
                            cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt()
                        })
                        .collect();
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (jj, ej) in e.iter().enumerate() {
                        a[i * keep.len() + jj] = ej / z;
                    }
                }
                if let Some(hook) = self.hook {
                    hook(l, hd, &mut a);
                }
                for i in 0..n {
                    for (jj, &j) in keep.iter().enumerate() {
                        for c in cols.clone() {
                            concat[i][c] += a[i * keep.len() + jj] * v[j][c];
                        }
                    }
                }
                layer_maps.push(a);
            }
            maps.push(layer_maps);
            for i in 0..n {
                let o = add(&vecmat(&concat[i], &b.wo), b.out_bias.data());
                tokens[i] = add(&tokens[i], &o);
                let h2 = layernorm(&tokens[i], b.norm2_weight.data(), b.norm2_bias.data());
                let f: Vec<f64> = add(&vecmat(&h2, &b.fc1_weight), b.fc1_bias.data())
                    .into_iter()
                    .map(gelu)
                    .collect();
                let f = add(&vecmat(&f, &b.fc2_weight), b.fc2_bias.data());
                tokens[i] = add(&tokens[i], &f);
            }
        }
        let cls = layernorm(&tokens[0], m.norm_weight.data(), m.norm_bias.data());
        assert_eq!(cls.len(), dm);
        (add(&vecmat(&cls, &m.head_weight), m.head_bias.data()), maps)
    }

    /// Batch-mean cross-entropy over `data`.
    pub fn loss(&self, data: &Dataset) -> f64 {
        let per = data.images.numel() / data.len();
        let mut total = 0.0;
        for (i, &y) in data.labels.iter().enumerate() {
            let z = self.logits(&data.images.data()[i * per..(i + 1) * per]);
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - z[y];
        }
        total / data.len() as f64
    }
}

/// Central difference `(f(x+h) - f(x-h)) / 2h`.
pub fn central_diff(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-9 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// L=2, H=2, d=4, D=8, N=5.
pub fn tiny_spec() -> ModelSpec {
    ModelSpec::uniform(8, 4, 1, 8, 2, 2, 4, 2.0, 3)
}

/// A tiny model with every parameter (biases and norm gains included)
/// perturbed away from its init values, so no gradient is structurally zero.
pub fn tiny_model(seed: u64) -> VitModel {
    let mut m = VitModel::init(tiny_spec(), seed).unwrap();
    jitter(&mut m, seed);
    m
}

pub fn jitter(m: &mut VitModel, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    for p in m.params_mut() {
        for x in p.data_mut() {
            *x += rng.random_range(-0.4..0.4);
        }
    }
}

pub fn tiny_data(count: usize, seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        image_size: 8,
        channels: 1,
        num_classes: 3,
        object_size: 4,
        template_size: 4,
        placement_stride: 4,
        train_size: count,
        val_size: 0,
        seed,
        ..Default::default()
    };
    spec.generate().unwrap().0
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
