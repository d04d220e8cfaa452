//! Check loops shared by the unit-style tests and the acceptance binary.
//! Each returns a short summary on success and the first failure otherwise.

use qyolop::data::{BBox, Palette, ScoredBox, SegMask};
use qyolop::engine::Tensor;
use qyolop::evaluation::{average_precision, map50, miou, EvalConfig};
use qyolop::labelprep::{hungarian, INFEASIBLE};
use qyolop::network::{Model, NetworkConfig};
use qyolop::postprocess::nms;
use qyolop::quant::{dequantize, fake_quant_backward, fake_quant_with_mask, quantize, QuantSpec, Scheme};
use rand::Rng;

use super::{assignment_ref, nms_ref, random_box, rng};

pub type Outcome = Result<String, String>;

pub fn nms_oracle(instances: u64) -> Outcome {
    for seed in 0..instances {
        let mut r = rng(seed);
        let n = r.random_range(0..=200);
        let classes = r.random_range(1..=4);
        let cands: Vec<ScoredBox> = (0..n)
            .map(|_| ScoredBox {
                bbox: random_box(&mut r, classes),
                // coarse scores force ties
                score: (r.random_range(0..50) as f32) / 50.0,
            })
            .collect();
        let thr = r.random_range(0.1..0.9f32);
        if nms(&cands, thr) != nms_ref(&cands, thr) {
            return Err(format!("nms instance {seed} differs"));
        }
    }
    Ok(format!("{instances} nms instances match"))
}

pub fn hungarian_oracle(matrices: u64) -> Outcome {
    for seed in 0..matrices {
        let mut r = rng(1000 + seed);
        let rows = r.random_range(1..=6);
        let cols = r.random_range(1..=6);
        let cost: Vec<Vec<f64>> = (0..rows)
            .map(|_| {
                (0..cols)
                    .map(|_| if r.random_bool(0.15) { INFEASIBLE } else { r.random_range(0.0..10.0) })
                    .collect()
            })
            .collect();
        let got = hungarian(&cost);
        let (pairs, best) = assignment_ref(&cost);
        let sum: f64 = got.pairs.iter().map(|&(i, j)| cost[i][j]).sum();
        if got.pairs.len() != pairs || (got.total_cost - best).abs() > 1e-9 || (sum - got.total_cost).abs() > 1e-9 {
            return Err(format!("matrix {seed}: cost {} vs {best}", got.total_cost));
        }
    }
    Ok(format!("{matrices} assignment matrices match"))
}

fn b(x1: f32, y1: f32, x2: f32, y2: f32, class_id: usize) -> BBox {
    BBox { x1, y1, x2, y2, class_id }
}

fn s(bb: BBox, score: f32) -> ScoredBox {
    ScoredBox { bbox: bb, score }
}

fn close(name: &str, got: f64, want: f64) -> Result<(), String> {
    if (got - want).abs() <= 1e-9 {
        Ok(())
    } else {
        Err(format!("{name}: {got} vs {want}"))
    }
}

pub fn ap_fixtures() -> Outcome {
    // Two images, three ground truths of class 0.
    let gts = vec![
        vec![b(0., 0., 10., 10., 0), b(20., 20., 30., 30., 0)],
        vec![b(0., 0., 10., 10., 0)],
    ];
    // Ranked: TP (0.9), FP (0.8), TP (0.7), duplicate of a matched GT → FP (0.6)
    let preds = vec![
        vec![s(b(0., 0., 10., 10., 0), 0.9), s(b(50., 50., 60., 60., 0), 0.8), s(b(0., 0., 10., 9., 0), 0.6)],
        vec![s(b(0., 0., 10., 10., 0), 0.7)],
    ];
    // recall 1/3, 1/3, 2/3, 2/3; precision 1, 1/2, 2/3, 1/2
    // envelope: 1 on [0,1/3], 2/3 on (1/3,2/3], 0 above → 1/3 + 2/9 = 5/9
    let ap = average_precision(&preds, &gts, 0, 0.5, false).ok_or("no ap")?;
    close("all-point ap", ap, 5.0 / 9.0)?;
    // 11-point: t = 0..0.3 → 1 (4 points), 0.4..0.6 → 2/3 (3 points), rest 0
    let ap11 = average_precision(&preds, &gts, 0, 0.5, true).ok_or("no ap")?;
    close("11-point ap", ap11, 6.0 / 11.0)?;

    let gts = vec![vec![b(0., 0., 10., 10., 0), b(0., 0., 10., 10., 1)]];
    let preds = vec![vec![s(b(0., 0., 10., 10., 0), 0.9), s(b(40., 40., 50., 50., 1), 0.9)]];
    let (m, per) = map50(&preds, &gts, &EvalConfig::default());
    if per != [Some(1.0), Some(0.0), None, None] {
        return Err(format!("per-class ap {per:?}"));
    }
    close("map50", m, 0.5)?;
    Ok("ap fixtures exact".into())
}

pub fn miou_fixtures() -> Outcome {
    let err = |e: qyolop::Error| e.to_string();
    // 2×3 masks, three classes
    let gt = SegMask::from_labels(2, 3, Palette::Drivable, vec![0, 1, 1, 2, 2, 0]).map_err(err)?;
    let pr = SegMask::from_labels(2, 3, Palette::Drivable, vec![0, 1, 2, 2, 0, 0]).map_err(err)?;
    // class 0: tp 2, fp 1, fn 0 → 2/3; class 1: tp 1, fn 1 → 1/2; class 2: tp 1, fp 1, fn 1 → 1/3
    let (m, ious, _) = miou(&[pr.clone()], &[gt.clone()], Palette::Drivable, &EvalConfig::default()).map_err(err)?;
    for (i, (a, w)) in ious.iter().zip([2.0 / 3.0, 0.5, 1.0 / 3.0]).enumerate() {
        close(&format!("iou class {i}"), *a, w)?;
    }
    close("miou", m, (2.0 / 3.0 + 0.5 + 1.0 / 3.0) / 3.0)?;
    let fg = EvalConfig {
        include_background: false,
        ..EvalConfig::default()
    };
    let (m, _, _) = miou(&[pr], &[gt], Palette::Drivable, &fg).map_err(err)?;
    close("foreground miou", m, (0.5 + 1.0 / 3.0) / 2.0)?;

    // a class absent from both masks counts as perfect
    let gt = SegMask::from_labels(1, 4, Palette::Lane, vec![0, 0, 1, 1]).map_err(err)?;
    let (m, ious, _) = miou(&[gt.clone()], &[gt], Palette::Lane, &EvalConfig::default()).map_err(err)?;
    if ious != vec![1.0; 4] {
        return Err(format!("absent-class ious {ious:?}"));
    }
    close("absent-class miou", m, 1.0)?;
    Ok("miou fixtures exact".into())
}

/// Worst-case error of one quantize/dequantize: half a step, plus one f32
/// rounding of the quotient `x / scale` scaled back to real units.
pub fn round_trip_bound(x: f32, scale: f32) -> f64 {
    scale as f64 / 2.0 + (x.abs() as f64) * f32::EPSILON as f64
}

pub fn quant_round_trip(n: usize) -> Outcome {
    let mut r = rng(11);
    let specs = [
        QuantSpec::per_tensor(-3.7, 5.2, 8, Scheme::Asymmetric),
        QuantSpec::per_tensor(-2.0, 2.0, 8, Scheme::Symmetric),
        QuantSpec::per_tensor(0.0, 11.0, 4, Scheme::Asymmetric),
    ];
    let mut worst = 0.0f64;
    for spec in &specs {
        let (lo, hi) = spec.real_range(0);
        let data: Vec<f32> = (0..n).map(|_| r.random_range(lo as f32..=hi as f32)).collect();
        let x = Tensor::from_vec(&[n], data);
        let back = dequantize(&quantize(&x, spec), &[n], spec);
        for (&a, &b) in x.data().iter().zip(back.data()) {
            let err = (a as f64 - b as f64).abs();
            if err > round_trip_bound(a, spec.scales[0]) {
                return Err(format!("x {a} → {b}, err {err}, scale {}", spec.scales[0]));
            }
            worst = worst.max(err / spec.scales[0] as f64);
        }
    }
    Ok(format!("{n} values per spec, worst error {worst:.4} steps"))
}

pub fn ste_mask(n: usize) -> Outcome {
    let mut r = rng(13);
    let spec = QuantSpec::per_tensor(-1.5, 2.5, 8, Scheme::Asymmetric);
    let (lo, hi) = spec.real_range(0);
    let data: Vec<f32> = (0..n).map(|_| r.random_range(-4.0..4.0)).collect();
    let x = Tensor::from_vec(&[n], data);
    let (_, mask) = fake_quant_with_mask(&x, &spec);
    let g = fake_quant_backward(&Tensor::full(x.shape(), 1.0), &x, &spec);
    for ((&v, &m), &gv) in x.data().iter().zip(&mask).zip(g.data()) {
        let inside = (v as f64) >= lo && (v as f64) <= hi;
        if m != inside || gv != if inside { 1.0 } else { 0.0 } {
            return Err(format!("mask wrong at x {v}"));
        }
    }
    Ok(format!("{n} mask entries exact"))
}

pub fn quant_monotone(n: usize) -> Outcome {
    let mut r = rng(14);
    let mut data: Vec<f32> = (0..n).map(|_| r.random_range(-10.0..10.0)).collect();
    data.sort_by(f32::total_cmp);
    let x = Tensor::from_vec(&[n], data);
    for spec in [
        QuantSpec::per_tensor(-3.0, 4.0, 8, Scheme::Asymmetric),
        QuantSpec::per_tensor(-3.0, 3.0, 5, Scheme::Symmetric),
    ] {
        if !quantize(&x, &spec).windows(2).all(|w| w[0] <= w[1]) {
            return Err(format!("{}-bit quantize not monotone", spec.bit_width));
        }
    }
    Ok(format!("{n} sorted values stay sorted"))
}

/// Puts random values into normalization statistics so folding is exercised.
pub fn perturb_bn(model: &mut Model, seed: u64) {
    let mut r = rng(seed);
    for (name, p) in model.store.iter_mut() {
        let range = if name.ends_with("running_var") {
            0.5f32..1.5
        } else if name.ends_with("running_mean") || name.ends_with("beta") {
            -0.3..0.3
        } else if name.ends_with("gamma") {
            0.7..1.3
        } else {
            continue;
        };
        for v in p.value.data_mut() {
            *v = r.random_range(range.clone());
        }
    }
}

pub fn reparameterization(inputs: usize) -> Outcome {
    let cfg = NetworkConfig::default();
    let mut m = Model::build(&cfg, 11).map_err(|e| e.to_string())?;
    perturb_bn(&mut m, 12);
    let mut fused = m.clone();
    fused.reparameterize();
    let mut r = rng(13);
    let [h, w] = cfg.input_size;
    let mut worst = 0f32;
    for _ in 0..inputs {
        let x = Tensor::from_vec(&[1, 3, h, w], (0..3 * h * w).map(|_| r.random_range(-2.0f32..2.0)).collect());
        let a = m.forward(&x).map_err(|e| e.to_string())?;
        let b = fused.forward(&x).map_err(|e| e.to_string())?;
        for s in 0..3 {
            worst = worst.max(a.det[s].max_abs_diff(&b.det[s]));
        }
        worst = worst.max(a.drivable.max_abs_diff(&b.drivable));
        worst = worst.max(a.lane.max_abs_diff(&b.lane));
    }
    let msg = format!("{inputs} inputs, max deviation {worst:.2e}");
    if worst <= 1e-4 {
        Ok(msg)
    } else {
        Err(msg)
    }
}
