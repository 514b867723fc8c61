mod common;

use std::collections::BTreeMap;

use common::{random, rng};
use proptest::prelude::*;
use stripflow::autodiff::Graph;
use stripflow::trainer::{clip_grad_norm, global_grad_norm, param_layout, Sgd};
use stripflow::{init_params, ModelConfig, ModelParams, Tensor};

#[test]
fn weights_follow_the_fan_in_law() {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, 5).unwrap();
    let mut checked = 0;
    for spec in param_layout(&cfg) {
        let t = params.get(&spec.path).unwrap();
        if spec.fan_in == 0 {
            assert!(t.data().iter().all(|&v| v == 0.0), "{} is a nonzero bias", spec.path);
            continue;
        }
        if t.numel() < 10_000 {
            continue;
        }
        let n = t.numel() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = 1.0 / (spec.fan_in as f64).sqrt();
        assert!((std / target - 1.0).abs() < 0.2, "{}: std {std} vs {target}", spec.path);
        checked += 1;
    }
    assert!(checked > 0);
    assert_eq!(params, init_params(&cfg, 5).unwrap());
    assert_eq!(params.param_count(), init_params(&cfg, 6).unwrap().param_count());
}

/// `loss = mean_i (w · x_i − y_i)²` has gradient `2/n Σ_i (w·x_i − y_i) x_i`.
#[test]
fn one_step_on_a_linear_probe_is_lr_times_gradient() {
    let xs = [[1.0f64, 2.0, -1.0], [0.5, -1.0, 3.0]];
    let ys = [2.0f64, -1.0];
    let w0 = [0.1f32, -0.2, 0.3];

    let mut hand = [0.0f64; 3];
    for (x, y) in xs.iter().zip(ys) {
        let r: f64 = x.iter().zip(w0).map(|(a, b)| a * b as f64).sum::<f64>() - y;
        for k in 0..3 {
            hand[k] += 2.0 / xs.len() as f64 * r * x[k];
        }
    }

    let mut params = ModelParams::from_map(
        BTreeMap::from([("probe.weight".to_string(), Tensor::new([1, 3], w0.to_vec()).unwrap())]),
        0,
    );
    let mut g = Graph::<f32>::new();
    let w = g.leaf(params.get("probe.weight").unwrap().clone());
    let xt = Tensor::new([3, 2], vec![1.0, 0.5, 2.0, -1.0, -1.0, 3.0]).unwrap();
    let x = g.constant(xt);
    let pred = g.matmul(w, x).unwrap();
    let yt = g.constant(Tensor::new([1, 2], ys.iter().map(|&v| v as f32).collect()).unwrap());
    let r = g.sub(pred, yt).unwrap();
    let sq = g.mul(r, r).unwrap();
    let loss = g.sum(sq).unwrap();
    let loss = g.scale(loss, 0.5);
    g.backward(loss).unwrap();
    let grad: Vec<f32> = g.grad(w).unwrap().to_vec();
    for k in 0..3 {
        assert!((grad[k] as f64 - hand[k]).abs() < 1e-5, "grad {k}: {} vs {}", grad[k], hand[k]);
    }

    params.get_mut("probe.weight").unwrap().accumulate_grad(&grad).unwrap();
    assert_eq!(clip_grad_norm(&mut params, f64::INFINITY), global_grad_norm(&params));
    let lr = 0.05;
    let mut opt = Sgd::new(lr, 0.9).unwrap();
    opt.step(&mut params);
    let after = params.get("probe.weight").unwrap();
    for k in 0..3 {
        let want = w0[k] as f64 - lr * hand[k];
        assert!((after.data()[k] as f64 - want).abs() < 1e-6);
    }
}

fn with_grads(seed: u64, scale: f32) -> ModelParams {
    let mut r = rng(seed);
    let mut map = BTreeMap::new();
    for (i, n) in [3usize, 7, 1].into_iter().enumerate() {
        let mut t = Tensor::zeros([n]).unwrap();
        t.accumulate_grad(random(&[n], -scale, scale, &mut r).data()).unwrap();
        map.insert(format!("p{i}"), t);
    }
    ModelParams::from_map(map, 0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipping_caps_the_global_norm(seed in 0u64..10_000, scale in 0.01f32..10.0, clip in 0.1f64..5.0) {
        let mut p = with_grads(seed, scale);
        let before: Vec<f32> = p.iter().flat_map(|(_, t)| t.grad().unwrap().to_vec()).collect();
        let norm = clip_grad_norm(&mut p, clip);
        let after_norm = global_grad_norm(&p);
        prop_assert!((after_norm - norm.min(clip)).abs() <= 1e-5 * norm.max(1.0));
        let factor = if norm > clip { clip / norm } else { 1.0 };
        let after: Vec<f32> = p.iter().flat_map(|(_, t)| t.grad().unwrap().to_vec()).collect();
        for (a, b) in before.iter().zip(&after) {
            prop_assert!((*a as f64 * factor - *b as f64).abs() <= 1e-5 * (a.abs() as f64).max(1.0));
        }
    }
}
