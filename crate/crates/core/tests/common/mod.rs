//! Independent reference implementations shared by the test targets.
#![allow(dead_code)]

use qyolop::data::{BBox, ScoredBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// IoU recomputed in f64 from corner coordinates, then rounded to f32 like
/// the library value so threshold comparisons agree.
pub fn iou_ref(a: &BBox, b: &BBox) -> f32 {
    let (ax1, ay1, ax2, ay2) = (a.x1 as f64, a.y1 as f64, a.x2 as f64, a.y2 as f64);
    let (bx1, by1, bx2, by2) = (b.x1 as f64, b.y1 as f64, b.x2 as f64, b.y2 as f64);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union) as f32
    }
}

/// Brute-force NMS: repeatedly pick the best remaining candidate (highest
/// score, lowest index on ties), keep it, and strike every remaining
/// same-class candidate overlapping it above the threshold.
pub fn nms_ref(cands: &[ScoredBox], thr: f32) -> Vec<ScoredBox> {
    let mut alive = vec![true; cands.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..cands.len() {
            if alive[i] && best.is_none_or(|b| cands[i].score > cands[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        kept.push(cands[b]);
        for j in 0..cands.len() {
            if alive[j] && cands[j].bbox.class_id == cands[b].bbox.class_id {
                let v = iou_ref(&cands[j].bbox, &cands[b].bbox);
                if v > thr {
                    alive[j] = false;
                }
            }
        }
    }
    kept
}

pub fn random_box(r: &mut ChaCha8Rng, classes: usize) -> BBox {
    let w = r.random_range(1.0..60.0f32);
    let h = r.random_range(1.0..60.0f32);
    let x1 = r.random_range(0.0..200.0f32);
    let y1 = r.random_range(0.0..120.0f32);
    BBox {
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
        class_id: r.random_range(0..classes),
    }
}

/// Best `(feasible pairs, cost)` over every injective row→column map.
pub fn assignment_ref(cost: &[Vec<f64>]) -> (usize, f64) {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, pairs: usize, acc: f64, best: &mut (usize, f64)) {
        if row == cost.len() {
            if pairs > best.0 || (pairs == best.0 && acc < best.1) {
                *best = (pairs, acc);
            }
            return;
        }
        // leave this row unmatched
        go(cost, row + 1, used, pairs, acc, best);
        for c in 0..used.len() {
            if !used[c] && cost[row][c].is_finite() {
                used[c] = true;
                go(cost, row + 1, used, pairs + 1, acc + cost[row][c], best);
                used[c] = false;
            }
        }
    }
    let cols = cost.first().map_or(0, Vec::len);
    let mut best = (0usize, 0.0f64);
    go(cost, 0, &mut vec![false; cols], 0, 0.0, &mut best);
    best
}

pub mod suites;
