mod support;

use amg_core::capture::LayerMaps;
use amg_core::criteria::{
    self, calibrate, head_entropy, head_entropy_with, head_scores, map_entropy, max_head_entropy,
    taylor_token_scores, token_importance, token_importance_with, EntropyMode, TokenReduction,
};
use amg_core::{AttentionCapture, AttentionMap, Error, Tape, Tensor};
use proptest::prelude::*;
use support::{central_diff, rel_err, tiny_data, tiny_model, Reference};

fn one_layer(maps: Vec<AttentionMap>, grads: Vec<AttentionMap>) -> AttentionCapture {
    let (rows, cols) = (maps[0].rows, maps[0].cols);
    AttentionCapture::from_maps(
        rows,
        vec![LayerMaps {
            head_ids: (0..maps.len()).collect(),
            kv_indices: (0..cols).collect(),
            maps,
            grads,
        }],
    )
    .unwrap()
}

#[test]
fn uniform_maps_reach_the_ceiling() {
    for n in 1..40 {
        let s = map_entropy(&AttentionMap::uniform(n, n));
        assert!((s - max_head_entropy(n)).abs() < 1e-9, "N = {n}");
    }
}

#[test]
fn zero_gradients_give_zero_importance() {
    let a = AttentionMap::new(3, 3, vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8, 0.6, 0.2, 0.2]).unwrap();
    let g = AttentionMap::new(3, 3, vec![0.0; 9]).unwrap();
    let cap = one_layer(vec![a], vec![g]);
    for t in 1..3 {
        assert_eq!(token_importance(&cap, 0, t).unwrap(), 0.0);
    }
}

#[test]
fn single_head_hand_evaluation() {
    let a = AttentionMap::new(3, 3, vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8, 0.6, 0.2, 0.2]).unwrap();
    let g = AttentionMap::new(3, 3, vec![1.0, -2.0, 0.5, 0.0, 3.0, -1.0, 2.0, 1.0, 4.0]).unwrap();
    let cap = one_layer(vec![a], vec![g]);
    // column 1: -2*0.3 + 3*0.1 + 1*0.2 = -0.1
    assert!((token_importance(&cap, 0, 1).unwrap() - 0.1).abs() < 1e-15);
    // column 2: 0.5*0.5 - 1*0.8 + 4*0.2 = 0.25
    assert!((token_importance(&cap, 0, 2).unwrap() - 0.25).abs() < 1e-15);
    // row 1: 0*0.1 + 3*0.1 - 1*0.8 = -0.5
    let row = token_importance_with(&cap, 0, 1, TokenReduction::QueryRow).unwrap();
    assert!((row - 0.5).abs() < 1e-15);
}

#[test]
fn class_token_has_no_importance() {
    let cap = one_layer(vec![AttentionMap::uniform(3, 3)], vec![AttentionMap::uniform(3, 3)]);
    assert!(matches!(token_importance(&cap, 0, 0), Err(Error::ClassTokenProtected { layer: 0 })));
}

#[test]
fn importance_needs_gradients() {
    let cap = one_layer(vec![AttentionMap::uniform(3, 3)], vec![]);
    assert!(matches!(token_importance(&cap, 0, 1), Err(Error::NotCalibrated(_))));
}

/// Rescaling key column `t` of every head's map by `1 + e` changes the loss
/// at rate `sum_h sum_q dL/dA A`, which is `H` times the importance.
#[test]
fn importance_matches_column_rescaling() {
    let model = tiny_model(41);
    let data = tiny_data(1, 41);
    let cap = calibrate(&model, &data, 1).unwrap();
    let heads = model.spec.heads_per_layer[0] as f64;
    for l in 0..2 {
        for t in 1..model.spec.tokens() {
            let fd = central_diff(1e-5, |e| {
                let hook = move |layer: usize, _h: usize, a: &mut [f64]| {
                    if layer == l {
                        for row in a.chunks_mut(5) {
                            row[t] *= 1.0 + e;
                        }
                    }
                };
                let mut r = Reference::new(&model);
                r.hook = Some(&hook);
                r.loss(&data)
            });
            let got = token_importance(&cap, l, t).unwrap();
            assert!(rel_err(fd.abs() / heads, got) < 1e-3, "layer {l} token {t}: {fd} vs {got}");
        }
    }
}

#[test]
fn gradients_are_per_sample_regardless_of_batching() {
    let model = tiny_model(43);
    let data = tiny_data(6, 43);
    let a = calibrate(&model, &data, 1).unwrap();
    let b = calibrate(&model, &data, 4).unwrap();
    for l in 0..2 {
        for h in 0..2 {
            let (ga, gb) = (a.grad_map(l, h).unwrap(), b.grad_map(l, h).unwrap());
            assert!(support::max_abs_diff(&ga.data, &gb.data) < 1e-12);
        }
    }
}

#[test]
fn one_sample_capture_is_that_sample() {
    let model = tiny_model(44);
    let data = tiny_data(1, 44);
    let cap = calibrate(&model, &data, 1).unwrap();
    let mut tape = Tape::new();
    let trace = model.forward(&mut tape, &data.images, None).unwrap();
    for l in 0..2 {
        let a = tape.value(trace.attention[l]);
        for h in 0..2 {
            assert_eq!(cap.map(l, h).unwrap().data, a.data()[h * 25..(h + 1) * 25].to_vec());
        }
    }
}

#[test]
fn duplicated_samples_do_not_move_the_mean() {
    let model = tiny_model(45);
    let one = tiny_data(1, 45);
    let tripled = one.subset(&[0, 0, 0]).unwrap();
    let a = calibrate(&model, &one, 1).unwrap();
    let b = calibrate(&model, &tripled, 3).unwrap();
    for l in 0..2 {
        for h in 0..2 {
            assert!(support::max_abs_diff(&a.map(l, h).unwrap().data, &b.map(l, h).unwrap().data) < 1e-15);
            assert!(
                support::max_abs_diff(&a.grad_map(l, h).unwrap().data, &b.grad_map(l, h).unwrap().data)
                    < 1e-15
            );
        }
    }
}

#[test]
fn two_samples_average_to_the_midpoint() {
    let model = tiny_model(46);
    let data = tiny_data(2, 46);
    let both = calibrate(&model, &data, 2).unwrap();
    let first = calibrate(&model, &data.subset(&[0]).unwrap(), 1).unwrap();
    let second = calibrate(&model, &data.subset(&[1]).unwrap(), 1).unwrap();
    for l in 0..2 {
        for h in 0..2 {
            let (m, a, b) = (both.map(l, h).unwrap(), first.map(l, h).unwrap(), second.map(l, h).unwrap());
            for k in 0..m.data.len() {
                assert!((m.data[k] - 0.5 * (a.data[k] + b.data[k])).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn single_sample_entropy_modes_agree() {
    let model = tiny_model(47);
    let cap = calibrate(&model, &tiny_data(1, 47), 1).unwrap();
    for l in 0..2 {
        for h in 0..2 {
            let a = head_entropy_with(&cap, l, h, EntropyMode::AveragedMap).unwrap();
            let b = head_entropy_with(&cap, l, h, EntropyMode::SampleMean).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn head_scores_rank_high_entropy_lowest() {
    let peaked = AttentionMap::new(2, 2, vec![0.9, 0.1, 0.2, 0.8]).unwrap();
    let flat = AttentionMap::uniform(2, 2);
    let cap = one_layer(vec![peaked, flat], vec![]);
    let scores = head_scores(&cap, EntropyMode::AveragedMap).unwrap();
    assert!(scores[1].raw < scores[0].raw);
    assert!(scores[1].raw.abs() < 1e-15);
    let s0 = head_entropy(&cap, 0, 0).unwrap();
    assert!((scores[0].raw - (max_head_entropy(2) - s0)).abs() < 1e-15);
    assert_eq!(scores[0].entropy, Some(s0));
}

/// With a zero classifier the loss is constant, so every gradient vanishes.
#[test]
fn constant_loss_gives_zero_scores() {
    let mut model = tiny_model(48);
    model.head_weight = Tensor::zeros(model.head_weight.shape().to_vec());
    let data = tiny_data(3, 48);
    for s in taylor_token_scores(&model, &data).unwrap() {
        assert_eq!(s.raw, 0.0);
    }
    let cap = calibrate(&model, &data, 3).unwrap();
    for s in criteria::token_scores(&cap, TokenReduction::KeyColumn).unwrap() {
        assert_eq!(s.raw, 0.0);
    }
}

/// Recomputes the Taylor score one sample at a time.
#[test]
fn taylor_matches_per_sample_recomputation() {
    let model = tiny_model(49);
    let data = tiny_data(4, 49);
    let scores = taylor_token_scores(&model, &data).unwrap();
    let (n, width) = (model.spec.tokens(), 2 * model.spec.head_dim);
    let mut sums = vec![vec![0.0; n]; 2];
    for s in 0..data.len() {
        let one = data.subset(&[s]).unwrap();
        let mut tape = Tape::new();
        let trace = model.forward(&mut tape, &one.images, None).unwrap();
        let loss = tape.cross_entropy(trace.logits, &one.labels).unwrap();
        tape.backward(loss).unwrap();
        for l in 0..2 {
            let k = tape.value(trace.keys[l]).data();
            let g = tape.grad(trace.keys[l]).unwrap().data();
            for t in 0..n {
                let mut dot = 0.0;
                for c in 0..width {
                    dot += k[t * width + c] * g[t * width + c];
                }
                sums[l][t] += dot / width as f64;
            }
        }
    }
    assert_eq!(scores.len(), 2 * (n - 1));
    for sc in &scores {
        let want = (sums[sc.layer][sc.unit] / data.len() as f64).abs();
        assert!(rel_err(want, sc.raw) < 1e-10, "{sc:?} vs {want}");
    }
}

fn stochastic(rows: usize, cols: usize, raw: &[f64]) -> AttentionMap {
    let mut data = raw[..rows * cols].to_vec();
    for row in data.chunks_mut(cols) {
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= z);
    }
    AttentionMap::new(rows, cols, data).unwrap()
}

proptest! {
    #[test]
    fn entropy_is_bounded(n in 1usize..12, raw in prop::collection::vec(0.0f64..1.0, 144)) {
        let mut raw = raw;
        // sprinkle exact zeros so the 0 ln 0 convention is exercised
        for x in raw.iter_mut().step_by(7) { *x = 0.0; }
        raw[0] = 1.0;
        for r in 0..n { raw[r * n] += 1e-3; }
        let m = stochastic(n, n, &raw);
        let s = map_entropy(&m);
        prop_assert!(s >= 0.0);
        prop_assert!(s <= max_head_entropy(n) + 1e-9);
    }

    #[test]
    fn entropy_ignores_row_and_column_order(
        n in 2usize..10,
        raw in prop::collection::vec(0.01f64..1.0, 100),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let m = stochastic(n, n, &raw);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut rp: Vec<usize> = (0..n).collect();
        let mut cp: Vec<usize> = (0..n).collect();
        rp.shuffle(&mut rng);
        cp.shuffle(&mut rng);
        let data = (0..n * n).map(|k| m.get(rp[k / n], cp[k % n])).collect();
        let p = AttentionMap::new(n, n, data).unwrap();
        prop_assert!((map_entropy(&m) - map_entropy(&p)).abs() < 1e-9);
    }

    #[test]
    fn scaling_gradients_scales_importance(
        raw in prop::collection::vec(0.01f64..1.0, 16),
        grads in prop::collection::vec(-1.0f64..1.0, 16),
        c in 0.1f64..10.0,
    ) {
        let a = stochastic(4, 4, &raw);
        let g = AttentionMap::new(4, 4, grads.clone()).unwrap();
        let gs = AttentionMap::new(4, 4, grads.iter().map(|x| x * c).collect()).unwrap();
        let base = one_layer(vec![a.clone()], vec![g]);
        let scaled = one_layer(vec![a], vec![gs]);
        for t in 1..4 {
            let (x, y) = (token_importance(&base, 0, t).unwrap(), token_importance(&scaled, 0, t).unwrap());
            prop_assert!((y - c * x).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }
}
