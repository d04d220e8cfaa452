//! Reverse-mode gradients of the graph ops against central finite
//! differences. The engine computes in f32, so the step is coarse and the
//! tolerance looser than for the f64 loss functions.

use qyolop::engine::{BnState, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FIXTURES: u64 = 20;
const STEP: f32 = 1e-2;
const TOL: f64 = 5e-3;

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

fn weighted_sum(t: &Tensor, w: &[f32]) -> f64 {
    t.data().iter().zip(w).map(|(&a, &b)| a as f64 * b as f64).sum()
}

fn forward(inputs: &[Tensor], build: &Build) -> (Graph, Var, Vec<Var>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| g.param(&format!("p{i}"), t.clone())).collect();
    let out = build(&mut g, &vars);
    (g, out, vars)
}

fn check(name: &str, seed: u64, inputs: Vec<Tensor>, build: &Build) {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (g, out, _) = forward(&inputs, build);
    let n_out = g.value(out).numel();
    let w: Vec<f32> = (0..n_out).map(|_| r.random_range(-1.0..1.0)).collect();
    let seed_t = Tensor::from_vec(g.value(out).shape(), w.clone());
    let grads = g.backward(vec![(out, seed_t)]);
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.params.get(&format!("p{i}")).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
        let mut numeric = Vec::with_capacity(x.numel());
        for k in 0..x.numel() {
            let eval = |delta: f32| {
                let mut xs = inputs.clone();
                xs[i].data_mut()[k] += delta;
                let (g, out, _) = forward(&xs, build);
                weighted_sum(g.value(out), &w)
            };
            numeric.push((eval(STEP) - eval(-STEP)) / (2.0 * STEP as f64));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(&a, n)| (a as f64 - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic
            .iter()
            .map(|&a| (a as f64).powi(2))
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
        let e = if scale < 1e-9 { diff } else { diff / scale };
        assert!(e <= TOL, "{name} fixture {seed} input {i}: relative error {e:.3e}");
    }
}

fn random(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

/// Distinct values at least 0.05 apart, so a finite-difference step never
/// changes which element of a pooling window is largest.
fn spaced(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - n as f32 * 0.025).collect();
    v.shuffle(r);
    Tensor::from_vec(shape, v)
}

#[test]
fn conv2d_gradients() {
    for seed in 0..FIXTURES {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (n, ci, co) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
        let k = [1usize, 3][r.random_range(0..2)];
        let stride = r.random_range(1..3);
        let pad = if k == 3 { r.random_range(0..2) } else { 0 };
        let (h, w) = (r.random_range(3..7), r.random_range(3..7));
        let inputs = vec![random(&mut r, &[n, ci, h, w]), random(&mut r, &[co, ci, k, k]), random(&mut r, &[co])];
        check("conv2d", seed, inputs, &move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad));
    }
}

#[test]
fn batch_norm_gradients() {
    for seed in 0..FIXTURES {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = (r.random_range(1..3), r.random_range(1..4));
        let (h, w) = (r.random_range(2..5), r.random_range(2..5));
        let inputs = vec![random(&mut r, &[n, c, h, w]), random(&mut r, &[c]), random(&mut r, &[c])];
        let train = seed % 4 != 0;
        check("batch_norm", seed, inputs, &move |g, v| {
            let mut mean = vec![0.1f32; c];
            let mut var = vec![0.8f32; c];
            let state = BnState {
                running_mean: &mut mean,
                running_var: &mut var,
                momentum: 0.03,
                eps: 1e-3,
            };
            g.batch_norm(v[0], v[1], v[2], state, train)
        });
    }
}

#[test]
fn elementwise_and_concat_gradients() {
    for seed in 0..FIXTURES {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (n, h, w) = (r.random_range(1..3), r.random_range(1..5), r.random_range(1..5));
        let (c1, c2) = (r.random_range(1..4), r.random_range(1..4));
        let inputs = vec![
            random(&mut r, &[n, c1, h, w]).map(|v| v * 3.0),
            random(&mut r, &[n, c1, h, w]),
            random(&mut r, &[n, c2, h, w]),
        ];
        check("silu/add/concat", seed, inputs, &|g, v| {
            let s = g.silu(v[0]);
            let a = g.add(s, v[1]);
            g.concat(&[a, v[2]])
        });
    }
}

#[test]
fn max_pool_gradients() {
    for seed in 0..FIXTURES {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let k = [3usize, 5][r.random_range(0..2)];
        let shape = [1, r.random_range(1..3), r.random_range(2..7), r.random_range(2..7)];
        let inputs = vec![spaced(&mut r, &shape)];
        check("max_pool", seed, inputs, &move |g, v| g.max_pool_same(v[0], k));
    }
}

#[test]
fn resampling_gradients() {
    for seed in 0..FIXTURES {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (r.random_range(1..5), r.random_range(1..5));
        let (oh, ow) = (r.random_range(1..11), r.random_range(1..11));
        let inputs = vec![random(&mut r, &[1, 2, h, w]), random(&mut r, &[1, 2, h, w])];
        check("upsample/resize", seed, inputs, &move |g, v| {
            let u = g.upsample_nearest(v[0], 2);
            let b = g.resize_bilinear(v[1], 2 * h, 2 * w);
            let s = g.add(u, b);
            g.resize_bilinear(s, oh, ow)
        });
    }
}

#[test]
fn straight_through_gates_by_mask() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut r, &[1, 1, 3, 4]);
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
    let mut g = Graph::new();
    let v = g.param("x", x.clone());
    let y = g.straight_through(v, x.map(|a| a.round()), mask.clone());
    let seed = random(&mut r, &[1, 1, 3, 4]);
    let grads = g.backward(vec![(y, seed.clone())]);
    let gx = grads.params.get("x").unwrap();
    for i in 0..12 {
        let want = if mask[i] { seed.data()[i] } else { 0.0 };
        assert_eq!(gx.data()[i], want);
    }
}
