//! Finite-difference checks of the analytic loss gradients. Each suite
//! returns the worst relative error over its fixtures.

use qyolop::data::BBox;
use qyolop::engine::Tensor;
use qyolop::losses::{
    assign_targets, box_loss, det_loss, focal_loss, jaccard_loss, seg_da_loss, seg_ll_loss, seg_loss, softmax,
    softmax_backward, total_loss, tversky_loss, BatchTargets, LossConfig, SegLayout,
};
use qyolop::network::{AnchorSet, ModelOutputs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xfd00 + seed)
}

fn numeric(x: &[f64], coords: &[usize], f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let x0 = v[i];
            v[i] = x0 + H;
            let up = f(&v);
            v[i] = x0 - H;
            let down = f(&v);
            v[i] = x0;
            (up - down) / (2.0 * H)
        })
        .collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn check(worst: &mut f64, analytic: &[f64], x: &[f64], coords: &[usize], f: &dyn Fn(&[f64]) -> f64) {
    let a: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
    let n = numeric(x, coords, f);
    *worst = worst.max(rel_err(&a, &n));
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn labels(r: &mut ChaCha8Rng, n: usize, classes: u8) -> Vec<u8> {
    (0..n).map(|_| r.random_range(0..classes)).collect()
}

pub fn focal(fixtures: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..fixtures {
        let mut r = rng(seed);
        let n = r.random_range(1..40);
        let x = uniform(&mut r, n, -4.0, 4.0);
        let t: Vec<f64> = (0..n).map(|_| if r.random_bool(0.3) { r.random_range(0.0..1.0) } else { r.random_range(0..2) as f64 }).collect();
        let gamma = [0.0, 0.5, 1.5, 2.0][seed as usize % 4];
        let alpha = r.random_range(0.05..0.95);
        let g = focal_loss(&x, &t, gamma, alpha).grad;
        check(&mut worst, &g, &x, &all(n), &|v| focal_loss(v, &t, gamma, alpha).value);
    }
    worst
}

pub fn smooth_l1(fixtures: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..fixtures {
        let mut r = rng(seed);
        let n = r.random_range(1..32);
        let t = uniform(&mut r, n, -2.0, 2.0);
        // keep every difference away from the |d| = 1 kink
        let x: Vec<f64> = t
            .iter()
            .map(|&ti| {
                let d: f64 = r.random_range(-3.0..3.0);
                let d = if (d.abs() - 1.0).abs() < 1e-2 { d * 1.5 } else { d };
                ti + d
            })
            .collect();
        let g = box_loss(&x, &t).grad;
        check(&mut worst, &g, &x, &all(n), &|v| box_loss(v, &t).value);
    }
    worst
}

fn layout(r: &mut ChaCha8Rng, c: usize) -> SegLayout {
    SegLayout {
        n: r.random_range(1..3),
        c,
        hw: r.random_range(4..30),
    }
}

pub fn tversky(fixtures: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..fixtures {
        let mut r = rng(seed);
        let c = r.random_range(2..5);
        let l = layout(&mut r, c);
        let logits = uniform(&mut r, l.n * l.c * l.hw, -3.0, 3.0);
        let p = softmax(&logits, l);
        let y = labels(&mut r, l.n * l.hw, c as u8);
        let (a, b) = (r.random_range(0.1..0.9), r.random_range(0.1..0.9));
        let g = tversky_loss(&p, &y, l, a, b, 1.0).grad;
        check(&mut worst, &g, &p, &all(p.len()), &|v| tversky_loss(v, &y, l, a, b, 1.0).value);
    }
    worst
}

pub fn jaccard(fixtures: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..fixtures {
        let mut r = rng(seed);
        let c = r.random_range(2..5);
        let l = layout(&mut r, c);
        let logits = uniform(&mut r, l.n * l.c * l.hw, -3.0, 3.0);
        let p = softmax(&logits, l);
        let y = labels(&mut r, l.n * l.hw, c as u8);
        let g = jaccard_loss(&p, &y, l, 1.0).grad;
        check(&mut worst, &g, &p, &all(p.len()), &|v| jaccard_loss(v, &y, l, 1.0).value);
    }
    worst
}

pub fn softmax_grad(fixtures: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..fixtures {
        let mut r = rng(seed);
        let c = r.random_range(2..6);
        let l = layout(&mut r, c);
        let x = uniform(&mut r, l.n * l.c * l.hw, -3.0, 3.0);
        let w = uniform(&mut r, x.len(), -1.0, 1.0);
        let g = softmax_backward(&softmax(&x, l), &w, l);
        let f = |v: &[f64]| softmax(v, l).iter().zip(&w).map(|(p, wi)| p * wi).sum::<f64>();
        check(&mut worst, &g, &x, &all(x.len()), &f);
    }
    worst
}

pub fn segmentation(fixtures: u64) -> f64 {
    let mut worst = 0.0f64;
    let cfg = LossConfig::default();
    for seed in 0..fixtures {
        let mut r = rng(seed);
        let w = [r.random_range(0.0..2.0), r.random_range(0.0..2.0), r.random_range(0.0..2.0)];
        for c in [3usize, 4] {
            let l = layout(&mut r, c);
            let x = uniform(&mut r, l.n * l.c * l.hw, -3.0, 3.0);
            let y = labels(&mut r, l.n * l.hw, c as u8);
            let g = seg_loss(&x, &y, l, w, &cfg).grad;
            check(&mut worst, &g, &x, &all(x.len()), &|v| seg_loss(v, &y, l, w, &cfg).total);
            if c == 3 {
                let g = seg_da_loss(&x, &y, l, &cfg).grad;
                check(&mut worst, &g, &x, &all(x.len()), &|v| seg_da_loss(v, &y, l, &cfg).total);
            } else {
                let g = seg_ll_loss(&x, &y, l, &cfg).grad;
                check(&mut worst, &g, &x, &all(x.len()), &|v| seg_ll_loss(v, &y, l, &cfg).total);
            }
        }
    }
    worst
}

/// Input size 64×96 gives detection grids 8×12, 4×6 and 2×3.
const GRIDS: [(usize, usize); 3] = [(8, 12), (4, 6), (2, 3)];
const INPUT: (f32, f32) = (64.0, 96.0);

fn random_boxes(r: &mut ChaCha8Rng, n_img: usize) -> Vec<Vec<BBox>> {
    (0..n_img)
        .map(|_| {
            (0..r.random_range(0..4))
                .map(|_| {
                    let w = r.random_range(3.0..40.0f32);
                    let h = r.random_range(3.0..40.0f32);
                    let x1 = r.random_range(0.0..INPUT.1 - w);
                    let y1 = r.random_range(0.0..INPUT.0 - h);
                    BBox::new(x1, y1, x1 + w, y1 + h, r.random_range(0..4)).unwrap()
                })
                .collect()
        })
        .collect()
}

fn det_sizes(n: usize) -> [usize; 3] {
    std::array::from_fn(|s| n * 27 * GRIDS[s].0 * GRIDS[s].1)
}

/// Box-regression channel (0..4) of a flat detection index, if it is one.
fn box_channel(i: usize, n: usize) -> Option<usize> {
    let mut off = 0;
    for (s, &len) in det_sizes(n).iter().enumerate() {
        if i < off + len {
            let (gh, gw) = GRIDS[s];
            let k = ((i - off) / (gh * gw)) % 9;
            return (k < 4).then_some(k);
        }
        off += len;
    }
    None
}

pub fn detection(fixtures: u64) -> f64 {
    let mut worst = 0.0f64;
    let anchors = AnchorSet::default();
    for seed in 0..fixtures {
        let mut r = rng(seed);
        let cfg = LossConfig {
            iou_weighted_obj: seed % 2 == 1,
            ..LossConfig::default()
        };
        let n = r.random_range(1..3);
        let boxes = random_boxes(&mut r, n);
        let assigned = assign_targets(&boxes, &anchors, GRIDS, cfg.anchor_ratio);
        let sizes = det_sizes(n);
        let flat = uniform(&mut r, sizes.iter().sum(), -2.5, 2.5);
        let split = |v: &[f64]| -> [Vec<f64>; 3] {
            let (a, rest) = v.split_at(sizes[0]);
            let (b, c) = rest.split_at(sizes[1]);
            [a.to_vec(), b.to_vec(), c.to_vec()]
        };
        let eval = |v: &[f64]| {
            let d = split(v);
            det_loss([&d[0], &d[1], &d[2]], &assigned, &anchors, &cfg)
        };
        let out = eval(&flat);
        let g: Vec<f64> = out.grads.concat();
        // all coordinates feeding matched cells plus a random sample of the rest
        let mut coords: Vec<usize> = g.iter().enumerate().filter(|(_, v)| v.abs() > 1e-9).map(|(i, _)| i).collect();
        coords.extend((0..60).map(|_| r.random_range(0..flat.len())));
        coords.sort_unstable();
        coords.dedup();
        if cfg.iou_weighted_obj {
            // the IoU objectness target is held constant, so finite
            // differences through the box channels would see its slope too
            coords.retain(|&i| box_channel(i, n).is_none());
        }
        check(&mut worst, &g, &flat, &coords, &|v| eval(v).total);
    }
    worst
}

pub fn total(fixtures: u64) -> f64 {
    let mut worst = 0.0f64;
    let anchors = AnchorSet::default();
    let cfg = LossConfig::default();
    for seed in 0..fixtures {
        let mut r = rng(seed);
        let n = r.random_range(1..3);
        let (h, w) = (8usize, 12usize);
        let shapes: [Vec<usize>; 5] = [
            vec![n, 27, GRIDS[0].0, GRIDS[0].1],
            vec![n, 27, GRIDS[1].0, GRIDS[1].1],
            vec![n, 27, GRIDS[2].0, GRIDS[2].1],
            vec![n, 3, h, w],
            vec![n, 4, h, w],
        ];
        let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
        let flat = uniform(&mut r, sizes.iter().sum(), -2.5, 2.5);
        let targets = BatchTargets {
            boxes: random_boxes(&mut r, n),
            drivable: labels(&mut r, n * h * w, 3),
            lane: labels(&mut r, n * h * w, 4),
        };
        let build = |v: &[f64]| {
            let mut off = 0;
            let mut ts: Vec<Tensor> = Vec::new();
            for (s, &len) in shapes.iter().zip(&sizes) {
                ts.push(Tensor::from_vec(s, v[off..off + len].iter().map(|&x| x as f32).collect()));
                off += len;
            }
            let lane = ts.pop().unwrap();
            let drivable = ts.pop().unwrap();
            let d2 = ts.pop().unwrap();
            let d1 = ts.pop().unwrap();
            let d0 = ts.pop().unwrap();
            ModelOutputs {
                det: [d0, d1, d2],
                drivable,
                lane,
            }
        };
        // round the point to f32 so the loss sees exactly the evaluated values
        let flat: Vec<f64> = flat.iter().map(|&v| v as f32 as f64).collect();
        let (_, grads) = total_loss(&build(&flat), &targets, &anchors, &cfg).unwrap();
        let g: Vec<f64> = grads
            .det
            .iter()
            .chain([&grads.drivable, &grads.lane])
            .flat_map(|t| t.data().iter().map(|&v| v as f64))
            .collect();
        let coords: Vec<usize> = (0..80).map(|_| r.random_range(0..flat.len())).collect();
        // f32 inputs: a larger step keeps rounding noise out of the quotient
        let f = |v: &[f64]| total_loss(&build(v), &targets, &anchors, &cfg).unwrap().0.total;
        let a: Vec<f64> = coords.iter().map(|&i| g[i]).collect();
        let step = 1e-2;
        let mut v = flat.clone();
        let num: Vec<f64> = coords
            .iter()
            .map(|&i| {
                let x0 = v[i];
                v[i] = x0 + step;
                let up = f(&v);
                v[i] = x0 - step;
                let down = f(&v);
                v[i] = x0;
                (up - down) / (2.0 * step)
            })
            .collect();
        worst = worst.max(rel_err(&a, &num));
    }
    worst
}

/// Every loss suite by name.
pub const SUITES: [(&str, fn(u64) -> f64); 8] = [
    ("focal", focal),
    ("smooth_l1", smooth_l1),
    ("tversky", tversky),
    ("jaccard", jaccard),
    ("softmax", softmax_grad),
    ("segmentation", segmentation),
    ("detection", detection),
    ("total", total),
];
