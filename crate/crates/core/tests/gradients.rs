//! Autodiff gradients against central finite differences.

mod support;

use amg_core::tape::{Tape, Var};
use amg_core::{Result, Tensor, VitModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{central_diff, rel_err, tiny_data, tiny_model, Reference};

const STEP: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Checks `d/dx sum(f(x) * w)` for every coordinate of every input.
fn check_op(seed: u64, inputs: &[&[usize]], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<Tensor> = inputs.iter().map(|s| random(&mut rng, s)).collect();
    let eval = |xs: &[Tensor], weights: Option<&Tensor>| -> (f64, Tensor, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x)).collect();
        let out = f(&mut tape, &vars).unwrap();
        let w = match weights {
            Some(w) => w.clone(),
            None => {
                let mut r = ChaCha8Rng::seed_from_u64(seed ^ 1);
                random(&mut r, tape.value(out).shape())
            }
        };
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let grads = vars.iter().map(|&v| tape.grad(v).unwrap().clone()).collect();
        (tape.value(loss).item(), w, grads)
    };
    let (_, w, grads) = eval(&xs, None);
    let mut worst: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        for k in 0..x.numel() {
            let fd = central_diff(STEP, |h| {
                let mut ys = xs.clone();
                ys[i].data_mut()[k] += h;
                eval(&ys, Some(&w)).0
            });
            worst = worst.max(rel_err(fd, grads[i].data()[k]));
        }
    }
    worst
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += a.data()[i * 4 + k] * b.data()[k * 2 + j];
            }
            assert!((tape.value(c).data()[i * 2 + j] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_weighted_sum_gradient() {
    let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
    let w = Tensor::new(vec![3], vec![0.7, -0.1, 1.3]).unwrap();
    let loss_of = |x: &Tensor| {
        let mut tape = Tape::new();
        let v = tape.param(x);
        let s = tape.softmax_rows(v).unwrap();
        let wv = tape.constant(w.clone());
        let p = tape.mul(s, wv).unwrap();
        let l = tape.sum(p);
        tape.backward(l).unwrap();
        (tape.value(l).item(), tape.grad(v).unwrap().clone())
    };
    let (_, g) = loss_of(&x);
    for k in 0..3 {
        let fd = central_diff(STEP, |h| {
            let mut y = x.clone();
            y.data_mut()[k] += h;
            loss_of(&y).0
        });
        assert!(rel_err(fd, g.data()[k]) < 1e-6);
    }
}

#[test]
fn elementwise_and_shape_ops() {
    let cases: Vec<(&str, f64)> = vec![
        ("matmul", check_op(1, &[&[2, 3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1]))),
        ("batched matmul", check_op(2, &[&[3, 2, 4], &[3, 4, 2]], |t, v| t.matmul(v[0], v[1]))),
        ("add broadcast", check_op(3, &[&[2, 3, 4], &[4]], |t, v| t.add(v[0], v[1]))),
        ("add", check_op(4, &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]))),
        ("mul", check_op(5, &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]))),
        ("scale", check_op(6, &[&[5]], |t, v| Ok(t.scale(v[0], -0.37)))),
        ("reshape", check_op(7, &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4]))),
        ("transpose", check_op(8, &[&[2, 3, 4]], |t, v| t.transpose(v[0]))),
        ("split heads", check_op(9, &[&[2, 3, 6]], |t, v| t.split_heads(v[0], 3))),
        ("merge heads", check_op(10, &[&[4, 3, 2]], |t, v| t.merge_heads(v[0], 2))),
        ("softmax", check_op(11, &[&[3, 5]], |t, v| t.softmax_rows(v[0]))),
        ("log softmax", check_op(12, &[&[3, 5]], |t, v| t.log_softmax_rows(v[0]))),
        ("layernorm", check_op(13, &[&[3, 6], &[6], &[6]], |t, v| t.layernorm(v[0], v[1], v[2], 1e-6))),
        ("gelu", check_op(14, &[&[10]], |t, v| Ok(t.gelu(v[0])))),
        ("gather", check_op(15, &[&[2, 3, 5]], |t, v| t.gather_columns(v[0], &[0, 2, 3]))),
        ("prepend", check_op(16, &[&[2, 3, 4], &[4]], |t, v| t.prepend_token(v[0], v[1]))),
        ("cross entropy", check_op(17, &[&[3, 4]], |t, v| t.cross_entropy(v[0], &[1, 0, 3]))),
        ("kl", check_op(18, &[&[2, 4]], |t, v| {
            let lp = t.log_softmax_rows(v[0])?;
            let q = Tensor::from_rows(&[&[0.1, 0.2, 0.3, 0.4], &[0.25, 0.25, 0.4, 0.1]]);
            t.kl_divergence(lp, &q)
        })),
    ];
    for (name, worst) in cases {
        assert!(worst < 1e-6, "{name}: relative error {worst:e}");
    }
}

fn tape_loss(model: &VitModel, data: &amg_core::Dataset) -> f64 {
    let mut tape = Tape::new();
    let trace = model.forward(&mut tape, &data.images, None).unwrap();
    let l = tape.cross_entropy(trace.logits, &data.labels).unwrap();
    tape.value(l).item()
}

#[test]
fn full_model_parameter_gradients() {
    let mut model = tiny_model(21);
    model.apply_kv_index(1, &[0, 1, 3]).unwrap();
    let data = tiny_data(3, 21);
    let mut tape = Tape::new();
    let trace = model.forward(&mut tape, &data.images, None).unwrap();
    let loss = tape.cross_entropy(trace.logits, &data.labels).unwrap();
    tape.backward(loss).unwrap();
    let grads: Vec<Tensor> = trace.params.iter().map(|&p| tape.grad(p).unwrap().clone()).collect();

    // Every tensor gets a share; the rest are drawn uniformly.
    let sizes: Vec<usize> = grads.iter().map(Tensor::numel).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut coords: Vec<(usize, usize)> = (0..sizes.len()).map(|p| (p, rng.random_range(0..sizes[p]))).collect();
    while coords.len() < 200 {
        let p = rng.random_range(0..sizes.len());
        coords.push((p, rng.random_range(0..sizes[p])));
    }
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let mut worst = (0.0, String::new());
    for &(p, k) in &coords {
        let fd = central_diff(STEP, |h| {
            let mut m = model.clone();
            m.params_mut()[p].data_mut()[k] += h;
            tape_loss(&m, &data)
        });
        let e = rel_err(fd, grads[p].data()[k]);
        if e > worst.0 {
            worst = (e, format!("{}[{k}]", names[p]));
        }
    }
    assert!(coords.len() >= 200);
    assert!(worst.0 < 1e-4, "worst relative error {:e} at {}", worst.0, worst.1);
}

/// `dL/dA` from the tape against perturbing single post-softmax entries in
/// the straight-line evaluator.
#[test]
fn attention_map_gradients() {
    let model = tiny_model(31);
    let data = tiny_data(2, 31);
    let mut tape = Tape::new();
    let trace = model.forward(&mut tape, &data.images, None).unwrap();
    let loss = tape.cross_entropy(trace.logits, &data.labels).unwrap();
    tape.backward(loss).unwrap();

    let heads = model.spec.heads_per_layer[0];
    let n = model.spec.tokens();
    let per = data.images.numel() / data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..40 {
        let l = rng.random_range(0..2);
        let s = rng.random_range(0..data.len());
        let h = rng.random_range(0..heads);
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        let g = tape.grad(trace.attention[l]).unwrap().data()[((s * heads + h) * n + i) * n + j];
        let fd = central_diff(STEP, |eps| {
            let hook = move |layer: usize, head: usize, a: &mut [f64]| {
                if layer == l && head == h {
                    a[i * n + j] += eps;
                }
            };
            let mut r = Reference::new(&model);
            r.hook = Some(&hook);
            // the hook hits every sample; only sample `s` is perturbed
            let image = &data.images.data()[s * per..(s + 1) * per];
            let z = r.logits(image);
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            (lse - z[data.labels[s]]) / data.len() as f64
        });
        assert!(rel_err(fd, g) < 1e-4, "layer {l} sample {s} head {h} ({i},{j}): fd {fd:e} vs {g:e}");
    }
}
