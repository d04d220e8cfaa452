//! Loss terms and composite objectives.
//!
//! Every term is evaluated in `f64` on flattened inputs and returns its value
//! together with the analytic gradient with respect to those inputs, so the
//! trainer can seed the backward pass directly.

use serde::{Deserialize, Serialize};

use crate::data::{BBox, NUM_DET_CLASSES};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::network::{AnchorSet, ModelOutputs, ANCHORS_PER_SCALE, STRIDES};

/// A scalar loss and its gradient with respect to the loss inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Class, objectness and box weights of the detection loss.
    pub alpha: [f64; 3],
    /// Tversky, focal and Jaccard weights of the lane loss.
    pub beta: [f64; 3],
    /// Tversky and focal weights of the drivable-area loss. The third entry
    /// is accepted for completeness and has no effect.
    pub gamma: [f64; 3],
    /// Detection, drivable-area and lane weights of the total loss.
    pub delta: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: [0.5, 1.0, 0.05],
            beta: [1.0, 1.0, 1.0],
            gamma: [0.2, 0.2, 0.2],
            delta: [1.0, 1.0, 1.0],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("delta", self.delta)] {
            if let Some(i) = w.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::Config {
                    key: format!("loss.weights.{key}[{i}]"),
                    reason: "loss weights must be finite and non-negative".into(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub tversky_alpha: f64,
    pub tversky_beta: f64,
    pub smoothing: f64,
    /// Largest allowed side ratio between a box and a matching anchor.
    pub anchor_ratio: f64,
    /// Use the IoU of the decoded prediction as objectness target instead of 1.
    pub iou_weighted_obj: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            tversky_alpha: 0.7,
            tversky_beta: 0.3,
            smoothing: 1.0,
            anchor_ratio: 4.0,
            iou_weighted_obj: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: format!("loss.{key}"),
                reason: reason.into(),
            })
        };
        if !(self.focal_gamma >= 0.0) {
            return bad("focal_gamma", "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return bad("focal_alpha", "must lie in [0, 1]");
        }
        if !(self.tversky_alpha >= 0.0 && self.tversky_beta >= 0.0) {
            return bad("tversky_alpha", "must be non-negative");
        }
        if !(self.smoothing > 0.0) {
            return bad("smoothing", "must be positive");
        }
        if !(self.anchor_ratio > 1.0) {
            return bad("anchor_ratio", "must exceed 1");
        }
        Ok(())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean sigmoid focal loss
/// `−t·α(1−p)^γ·log p − (1−t)(1−α)·p^γ·log(1−p)` over all elements, which
/// equals `α_t (1−p_t)^γ · BCE` for binary targets.
pub fn focal_loss(logits: &[f64], targets: &[f64], gamma: f64, alpha: f64) -> LossGrad {
    assert_eq!(logits.len(), targets.len());
    let n = logits.len();
    if n == 0 {
        return LossGrad { value: 0.0, grad: Vec::new() };
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (&x, &t) in logits.iter().zip(targets) {
        let p = sigmoid(x);
        let q = sigmoid(-x);
        let log_p = -softplus(-x);
        let log_q = -softplus(x);
        let wq = q.powf(gamma);
        let wp = p.powf(gamma);
        total += -t * alpha * wq * log_p - (1.0 - t) * (1.0 - alpha) * wp * log_q;
        let da = t * alpha * wq * (gamma * p * log_p - q);
        let db = (1.0 - t) * (1.0 - alpha) * wp * (p - gamma * q * log_q);
        grad.push((da + db) * inv);
    }
    LossGrad { value: total * inv, grad }
}

/// Mean smooth-L1 (β = 1) over all coordinates.
pub fn box_loss(pred: &[f64], target: &[f64]) -> LossGrad {
    assert_eq!(pred.len(), target.len());
    let n = pred.len();
    if n == 0 {
        return LossGrad { value: 0.0, grad: Vec::new() };
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (&p, &t) in pred.iter().zip(target) {
        let d = p - t;
        if d.abs() < 1.0 {
            total += 0.5 * d * d;
            grad.push(d * inv);
        } else {
            total += d.abs() - 0.5;
            grad.push(d.signum() * inv);
        }
    }
    LossGrad { value: total * inv, grad }
}

/// Layout of a flattened `[n, c, hw]` class-score tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegLayout {
    pub n: usize,
    pub c: usize,
    pub hw: usize,
}

impl SegLayout {
    pub fn from_shape(shape: &[usize]) -> Self {
        assert_eq!(shape.len(), 4, "segmentation tensors are NCHW");
        Self {
            n: shape[0],
            c: shape[1],
            hw: shape[2] * shape[3],
        }
    }

    fn len(&self) -> usize {
        self.n * self.c * self.hw
    }

    #[inline]
    fn idx(&self, b: usize, c: usize, i: usize) -> usize {
        (b * self.c + c) * self.hw + i
    }
}

/// Per-class soft counts `(Σ p·t, Σ p, Σ t)`.
fn soft_counts(probs: &[f64], labels: &[u8], l: SegLayout) -> Vec<(f64, f64, f64)> {
    let mut out = vec![(0.0, 0.0, 0.0); l.c];
    for b in 0..l.n {
        for i in 0..l.hw {
            let lab = labels[b * l.hw + i] as usize;
            for (c, acc) in out.iter_mut().enumerate() {
                let p = probs[l.idx(b, c, i)];
                acc.1 += p;
                if c == lab {
                    acc.0 += p;
                    acc.2 += 1.0;
                }
            }
        }
    }
    out
}

fn check_seg(probs: &[f64], labels: &[u8], l: SegLayout) {
    assert_eq!(probs.len(), l.len(), "probability tensor does not match layout");
    assert_eq!(labels.len(), l.n * l.hw, "label count does not match layout");
}

/// Soft Tversky loss `1 − (TP+s)/(TP + α·FP + β·FN + s)` averaged over the
/// foreground classes `1..c`, with counts accumulated over the whole batch.
pub fn tversky_loss(probs: &[f64], labels: &[u8], l: SegLayout, alpha: f64, beta: f64, smooth: f64) -> LossGrad {
    check_seg(probs, labels, l);
    let counts = soft_counts(probs, labels, l);
    let fg = l.c.saturating_sub(1).max(1) as f64;
    let mut value = 0.0;
    // per class: dLoss/dp for target 0 and target 1
    let mut coef = vec![(0.0, 0.0); l.c];
    for c in 1..l.c {
        let (tp, sp, st) = counts[c];
        let fp = sp - tp;
        let fnn = st - tp;
        let num = tp + smooth;
        let den = tp + alpha * fp + beta * fnn + smooth;
        value += 1.0 - num / den;
        let d_t0 = -(-num * alpha) / (den * den);
        let d_t1 = -(den - num * (1.0 - beta)) / (den * den);
        coef[c] = (d_t0 / fg, d_t1 / fg);
    }
    let mut grad = vec![0.0; l.len()];
    for b in 0..l.n {
        for i in 0..l.hw {
            let lab = labels[b * l.hw + i] as usize;
            for (c, &(g0, g1)) in coef.iter().enumerate().skip(1) {
                grad[l.idx(b, c, i)] = if c == lab { g1 } else { g0 };
            }
        }
    }
    LossGrad { value: value / fg, grad }
}

/// Soft Jaccard loss `1 − (I+s)/(U+s)` averaged over all classes.
pub fn jaccard_loss(probs: &[f64], labels: &[u8], l: SegLayout, smooth: f64) -> LossGrad {
    check_seg(probs, labels, l);
    let counts = soft_counts(probs, labels, l);
    let mut value = 0.0;
    let mut coef = vec![(0.0, 0.0); l.c];
    for (c, &(inter, sp, st)) in counts.iter().enumerate() {
        let num = inter + smooth;
        let den = sp + st - inter + smooth;
        value += 1.0 - num / den;
        // dI/dp = t, dU/dp = 1 − t
        let d_t0 = num / (den * den);
        let d_t1 = -1.0 / den;
        coef[c] = (d_t0 / l.c as f64, d_t1 / l.c as f64);
    }
    let mut grad = vec![0.0; l.len()];
    for b in 0..l.n {
        for i in 0..l.hw {
            let lab = labels[b * l.hw + i] as usize;
            for (c, &(g0, g1)) in coef.iter().enumerate() {
                grad[l.idx(b, c, i)] = if c == lab { g1 } else { g0 };
            }
        }
    }
    LossGrad {
        value: value / l.c as f64,
        grad,
    }
}

/// Channel softmax of `[n, c, hw]` logits.
pub fn softmax(logits: &[f64], l: SegLayout) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for b in 0..l.n {
        for i in 0..l.hw {
            let m = (0..l.c).map(|c| logits[l.idx(b, c, i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for c in 0..l.c {
                let e = (logits[l.idx(b, c, i)] - m).exp();
                out[l.idx(b, c, i)] = e;
                s += e;
            }
            for c in 0..l.c {
                out[l.idx(b, c, i)] /= s;
            }
        }
    }
    out
}

/// Pulls a gradient with respect to softmax outputs back to the logits.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64], l: SegLayout) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    for b in 0..l.n {
        for i in 0..l.hw {
            let dot: f64 = (0..l.c).map(|c| probs[l.idx(b, c, i)] * grad_probs[l.idx(b, c, i)]).sum();
            for c in 0..l.c {
                let k = l.idx(b, c, i);
                out[k] = probs[k] * (grad_probs[k] - dot);
            }
        }
    }
    out
}

fn one_hot(labels: &[u8], l: SegLayout) -> Vec<f64> {
    let mut t = vec![0.0; l.len()];
    for b in 0..l.n {
        for i in 0..l.hw {
            let lab = labels[b * l.hw + i] as usize;
            assert!(lab < l.c, "label {lab} outside {} classes", l.c);
            t[l.idx(b, lab, i)] = 1.0;
        }
    }
    t
}

/// Components of a segmentation loss (unweighted) plus the weighted total
/// and its gradient with respect to the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SegLoss {
    pub tversky: f64,
    pub focal: f64,
    pub jaccard: f64,
    pub total: f64,
    pub grad: Vec<f64>,
}

/// `w[0]·Tversky + w[1]·Focal + w[2]·Jaccard` on `[n, c, hw]` logits.
/// Tversky and Jaccard use channel-softmax probabilities; the focal term is
/// one-vs-all on the raw logits.
pub fn seg_loss(logits: &[f64], labels: &[u8], l: SegLayout, w: [f64; 3], cfg: &LossConfig) -> SegLoss {
    check_seg(logits, labels, l);
    let probs = softmax(logits, l);
    let tv = tversky_loss(&probs, labels, l, cfg.tversky_alpha, cfg.tversky_beta, cfg.smoothing);
    let jc = jaccard_loss(&probs, labels, l, cfg.smoothing);
    let fc = focal_loss(logits, &one_hot(labels, l), cfg.focal_gamma, cfg.focal_alpha);
    let gp: Vec<f64> = tv.grad.iter().zip(&jc.grad).map(|(a, b)| w[0] * a + w[2] * b).collect();
    let mut grad = softmax_backward(&probs, &gp, l);
    for (g, f) in grad.iter_mut().zip(&fc.grad) {
        *g += w[1] * f;
    }
    SegLoss {
        tversky: tv.value,
        focal: fc.value,
        jaccard: jc.value,
        total: w[0] * tv.value + w[1] * fc.value + w[2] * jc.value,
        grad,
    }
}

/// Lane loss: `β₁·Tversky + β₂·Focal + β₃·Jaccard`.
pub fn seg_ll_loss(logits: &[f64], labels: &[u8], l: SegLayout, cfg: &LossConfig) -> SegLoss {
    seg_loss(logits, labels, l, cfg.weights.beta, cfg)
}

/// Drivable-area loss: `γ₁·Tversky + γ₂·Focal`.
pub fn seg_da_loss(logits: &[f64], labels: &[u8], l: SegLayout, cfg: &LossConfig) -> SegLoss {
    let g = cfg.weights.gamma;
    seg_loss(logits, labels, l, [g[0], g[1], 0.0], cfg)
}

/// Decodes raw box outputs of one anchor at cell `(gx, gy)`:
/// center `(2σ(t) − 0.5 + cell)·stride`, size `(2σ(t))²·anchor`.
pub fn decode_box(t: [f64; 4], cell: (usize, usize), anchor: [f32; 2], stride: usize) -> [f64; 4] {
    let s = stride as f64;
    let cx = (2.0 * sigmoid(t[0]) - 0.5 + cell.0 as f64) * s;
    let cy = (2.0 * sigmoid(t[1]) - 0.5 + cell.1 as f64) * s;
    let w = (2.0 * sigmoid(t[2])).powi(2) * anchor[0] as f64;
    let h = (2.0 * sigmoid(t[3])).powi(2) * anchor[1] as f64;
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Inverse of [`decode_box`]. Returns `None` when the box cannot be
/// represented from this cell and anchor.
pub fn encode_box(b: &BBox, cell: (usize, usize), anchor: [f32; 2], stride: usize) -> Option<[f64; 4]> {
    let (cx, cy) = b.center();
    let s = stride as f64;
    let ox = cx as f64 / s - cell.0 as f64;
    let oy = cy as f64 / s - cell.1 as f64;
    let rw = b.width() as f64 / anchor[0] as f64;
    let rh = b.height() as f64 / anchor[1] as f64;
    let ok = |o: f64| o > -0.5 && o < 1.5;
    let okr = |r: f64| r > 0.0 && r < 4.0;
    if !(ok(ox) && ok(oy) && okr(rw) && okr(rh)) {
        return None;
    }
    Some([
        logit((ox + 0.5) / 2.0),
        logit((oy + 0.5) / 2.0),
        logit(rw.sqrt() / 2.0),
        logit(rh.sqrt() / 2.0),
    ])
}

/// One ground-truth box assigned to one prediction slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Match {
    pub image: usize,
    pub scale: usize,
    pub anchor: usize,
    pub gy: usize,
    pub gx: usize,
    pub class_id: usize,
    /// Center offset from the cell corner in cell units, then size / anchor.
    pub target: [f64; 4],
    pub gt: BBox,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssignedTargets {
    pub batch: usize,
    pub grids: [(usize, usize); 3],
    pub matches: Vec<Match>,
    /// Ground-truth boxes compatible with no anchor.
    pub unassigned: usize,
}

impl AssignedTargets {
    /// Binary objectness targets per scale in `[b, a, gy, gx]` order.
    pub fn objectness_targets(&self) -> [Vec<f64>; 3] {
        std::array::from_fn(|s| {
            let (gh, gw) = self.grids[s];
            let mut t = vec![0.0; self.batch * ANCHORS_PER_SCALE * gh * gw];
            for m in self.matches.iter().filter(|m| m.scale == s) {
                t[((m.image * ANCHORS_PER_SCALE + m.anchor) * gh + m.gy) * gw + m.gx] = 1.0;
            }
            t
        })
    }
}

/// Matches boxes (input-pixel coordinates, one list per image) to anchors.
/// A box matches anchor `a` when every side ratio is below `ratio`, at its
/// center cell plus the nearest horizontal and vertical neighbor cells.
pub fn assign_targets(boxes: &[Vec<BBox>], anchors: &AnchorSet, grids: [(usize, usize); 3], ratio: f64) -> AssignedTargets {
    let mut out = AssignedTargets {
        batch: boxes.len(),
        grids,
        ..Default::default()
    };
    for (img, list) in boxes.iter().enumerate() {
        for b in list {
            let (w, h) = (b.width() as f64, b.height() as f64);
            let mut any = false;
            for (s, &stride) in STRIDES.iter().enumerate() {
                let (gh, gw) = grids[s];
                let (cx, cy) = b.center();
                let gxf = cx as f64 / stride as f64;
                let gyf = cy as f64 / stride as f64;
                let cx0 = (gxf.floor() as usize).min(gw - 1);
                let cy0 = (gyf.floor() as usize).min(gh - 1);
                let (fx, fy) = (gxf - gxf.floor(), gyf - gyf.floor());
                let mut cells = vec![(cx0, cy0)];
                if fx < 0.5 && gxf > 1.0 {
                    cells.push((cx0 - 1, cy0));
                } else if fx > 0.5 && (gw as f64 - gxf) > 1.0 {
                    cells.push((cx0 + 1, cy0));
                }
                if fy < 0.5 && gyf > 1.0 {
                    cells.push((cx0, cy0 - 1));
                } else if fy > 0.5 && (gh as f64 - gyf) > 1.0 {
                    cells.push((cx0, cy0 + 1));
                }
                for (a, an) in anchors.for_scale(s).iter().enumerate() {
                    let (aw, ah) = (an[0] as f64, an[1] as f64);
                    let r = (w / aw).max(aw / w).max(h / ah).max(ah / h);
                    if !(r < ratio) {
                        continue;
                    }
                    any = true;
                    for &(gx, gy) in &cells {
                        out.matches.push(Match {
                            image: img,
                            scale: s,
                            anchor: a,
                            gy,
                            gx,
                            class_id: b.class_id,
                            target: [gxf - gx as f64, gyf - gy as f64, w / aw, h / ah],
                            gt: b.clone(),
                        });
                    }
                }
            }
            if !any {
                out.unassigned += 1;
            }
        }
    }
    out
}

/// Detection loss components (unweighted) and the weighted total.
#[derive(Clone, Debug, PartialEq)]
pub struct DetLoss {
    pub class: f64,
    pub obj: f64,
    pub bbox: f64,
    pub total: f64,
    /// Gradients with respect to the three `[N, A·K, gh, gw]` outputs.
    pub grads: [Vec<f64>; 3],
}

/// `α₁·L_class + α₂·L_obj + α₃·L_box` over the three detection scales.
/// `det[s]` is a flattened `[N, A·K, gh, gw]` output with `K = 5 + classes`.
pub fn det_loss(det: [&[f64]; 3], assigned: &AssignedTargets, anchors: &AnchorSet, cfg: &LossConfig) -> DetLoss {
    let k = 5 + NUM_DET_CLASSES;
    let a_n = ANCHORS_PER_SCALE;
    let n = assigned.batch;
    let idx = |s: usize, b: usize, a: usize, kk: usize, gy: usize, gx: usize| {
        let (gh, gw) = assigned.grids[s];
        (((b * a_n + a) * k + kk) * gh + gy) * gw + gx
    };
    for s in 0..3 {
        let (gh, gw) = assigned.grids[s];
        assert_eq!(det[s].len(), n * a_n * k * gh * gw, "detection output size at scale {s}");
    }
    let mut grads: [Vec<f64>; 3] = std::array::from_fn(|s| vec![0.0; det[s].len()]);
    let w = cfg.weights.alpha;

    // box terms: encoded predictions vs targets
    let mut pred = Vec::with_capacity(assigned.matches.len() * 4);
    let mut target = Vec::with_capacity(assigned.matches.len() * 4);
    let mut dpred = Vec::with_capacity(assigned.matches.len() * 4);
    let mut ious = Vec::with_capacity(assigned.matches.len());
    for m in &assigned.matches {
        let raw: [f64; 4] = std::array::from_fn(|j| det[m.scale][idx(m.scale, m.image, m.anchor, j, m.gy, m.gx)]);
        for j in 0..4 {
            let sg = sigmoid(raw[j]);
            if j < 2 {
                pred.push(2.0 * sg - 0.5);
                dpred.push(2.0 * sg * (1.0 - sg));
            } else {
                pred.push((2.0 * sg).powi(2));
                dpred.push(8.0 * sg * sg * (1.0 - sg));
            }
            target.push(m.target[j]);
        }
        if cfg.iou_weighted_obj {
            let an = anchors.for_scale(m.scale)[m.anchor];
            let d = decode_box(raw, (m.gx, m.gy), an, STRIDES[m.scale]);
            let pb = BBox {
                x1: d[0] as f32,
                y1: d[1] as f32,
                x2: d[2] as f32,
                y2: d[3] as f32,
                class_id: m.class_id,
            };
            ious.push(crate::data::iou(&pb, &m.gt).clamp(0.0, 1.0) as f64);
        }
    }
    let bl = box_loss(&pred, &target);
    for (i, m) in assigned.matches.iter().enumerate() {
        for j in 0..4 {
            let g = w[2] * bl.grad[4 * i + j] * dpred[4 * i + j];
            grads[m.scale][idx(m.scale, m.image, m.anchor, j, m.gy, m.gx)] += g;
        }
    }

    // class terms on matched slots
    let mut cl_logits = Vec::with_capacity(assigned.matches.len() * NUM_DET_CLASSES);
    let mut cl_targets = Vec::with_capacity(cl_logits.capacity());
    for m in &assigned.matches {
        for c in 0..NUM_DET_CLASSES {
            cl_logits.push(det[m.scale][idx(m.scale, m.image, m.anchor, 5 + c, m.gy, m.gx)]);
            cl_targets.push(if c == m.class_id { 1.0 } else { 0.0 });
        }
    }
    let cl = focal_loss(&cl_logits, &cl_targets, cfg.focal_gamma, cfg.focal_alpha);
    for (i, m) in assigned.matches.iter().enumerate() {
        for c in 0..NUM_DET_CLASSES {
            grads[m.scale][idx(m.scale, m.image, m.anchor, 5 + c, m.gy, m.gx)] += w[0] * cl.grad[i * NUM_DET_CLASSES + c];
        }
    }

    // objectness over every slot of every scale
    let mut obj_t = assigned.objectness_targets();
    if cfg.iou_weighted_obj {
        for (m, &iou) in assigned.matches.iter().zip(&ious) {
            let (gh, gw) = assigned.grids[m.scale];
            obj_t[m.scale][((m.image * a_n + m.anchor) * gh + m.gy) * gw + m.gx] = iou;
        }
    }
    let mut ob_logits = Vec::new();
    let mut ob_targets = Vec::new();
    for s in 0..3 {
        let (gh, gw) = assigned.grids[s];
        for b in 0..n {
            for a in 0..a_n {
                for gy in 0..gh {
                    for gx in 0..gw {
                        ob_logits.push(det[s][idx(s, b, a, 4, gy, gx)]);
                        ob_targets.push(obj_t[s][((b * a_n + a) * gh + gy) * gw + gx]);
                    }
                }
            }
        }
    }
    let ob = focal_loss(&ob_logits, &ob_targets, cfg.focal_gamma, cfg.focal_alpha);
    let mut it = ob.grad.iter();
    for s in 0..3 {
        let (gh, gw) = assigned.grids[s];
        for b in 0..n {
            for a in 0..a_n {
                for gy in 0..gh {
                    for gx in 0..gw {
                        grads[s][idx(s, b, a, 4, gy, gx)] += w[1] * it.next().expect("one gradient per logit");
                    }
                }
            }
        }
    }

    DetLoss {
        class: cl.value,
        obj: ob.value,
        bbox: bl.value,
        total: w[0] * cl.value + w[1] * ob.value + w[2] * bl.value,
        grads,
    }
}

/// Ground truth of one batch. Segmentation labels are `[N, H, W]` at the
/// resolution of the logits they are compared against.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTargets {
    pub boxes: Vec<Vec<BBox>>,
    pub drivable: Vec<u8>,
    pub lane: Vec<u8>,
}

/// Every loss component of one evaluation of the total objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub det_class: f64,
    pub det_obj: f64,
    pub det_box: f64,
    pub det: f64,
    pub da_tversky: f64,
    pub da_focal: f64,
    pub da: f64,
    pub ll_tversky: f64,
    pub ll_focal: f64,
    pub ll_jaccard: f64,
    pub ll: f64,
    pub total: f64,
    pub unassigned: usize,
}

impl LossBreakdown {
    /// `(name, value)` of every component, for diagnostics.
    pub fn components(&self) -> [(&'static str, f64); 12] {
        [
            ("det_class", self.det_class),
            ("det_obj", self.det_obj),
            ("det_box", self.det_box),
            ("det", self.det),
            ("da_tversky", self.da_tversky),
            ("da_focal", self.da_focal),
            ("da", self.da),
            ("ll_tversky", self.ll_tversky),
            ("ll_focal", self.ll_focal),
            ("ll_jaccard", self.ll_jaccard),
            ("ll", self.ll),
            ("total", self.total),
        ]
    }
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn to_tensor(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::from_vec(shape, v.iter().map(|&x| x as f32).collect())
}

/// `δ₁·L_det + δ₂·L_seg_da + δ₃·L_seg_ll` with gradients for every output.
pub fn total_loss(
    out: &ModelOutputs<Tensor>,
    targets: &BatchTargets,
    anchors: &AnchorSet,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, ModelOutputs<Tensor>)> {
    let grids: [(usize, usize); 3] = std::array::from_fn(|s| {
        let sh = out.det[s].shape();
        (sh[2], sh[3])
    });
    let da_l = SegLayout::from_shape(out.drivable.shape());
    let ll_l = SegLayout::from_shape(out.lane.shape());
    if targets.boxes.len() != da_l.n || targets.drivable.len() != da_l.n * da_l.hw || targets.lane.len() != ll_l.n * ll_l.hw {
        return Err(Error::Shape("targets do not match the prediction batch".into()));
    }
    let assigned = assign_targets(&targets.boxes, anchors, grids, cfg.anchor_ratio);
    let det_v: [Vec<f64>; 3] = std::array::from_fn(|s| to_f64(&out.det[s]));
    let det = det_loss([&det_v[0], &det_v[1], &det_v[2]], &assigned, anchors, cfg);
    let da = seg_da_loss(&to_f64(&out.drivable), &targets.drivable, da_l, cfg);
    let ll = seg_ll_loss(&to_f64(&out.lane), &targets.lane, ll_l, cfg);
    let d = cfg.weights.delta;
    let breakdown = LossBreakdown {
        det_class: det.class,
        det_obj: det.obj,
        det_box: det.bbox,
        det: det.total,
        da_tversky: da.tversky,
        da_focal: da.focal,
        da: da.total,
        ll_tversky: ll.tversky,
        ll_focal: ll.focal,
        ll_jaccard: ll.jaccard,
        ll: ll.total,
        total: d[0] * det.total + d[1] * da.total + d[2] * ll.total,
        unassigned: assigned.unassigned,
    };
    let scale = |v: &[f64], k: f64| -> Vec<f64> { v.iter().map(|x| x * k).collect() };
    let grads = ModelOutputs {
        det: std::array::from_fn(|s| to_tensor(out.det[s].shape(), &scale(&det.grads[s], d[0]))),
        drivable: to_tensor(out.drivable.shape(), &scale(&da.grad, d[1])),
        lane: to_tensor(out.lane.shape(), &scale(&ll.grad, d[2])),
    };
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_hand_value() {
        let l = focal_loss(&[0.0], &[1.0], 2.0, 0.25);
        assert!((l.value - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_is_stable_at_large_logits() {
        let l = focal_loss(&[50.0, -50.0, 50.0, -50.0], &[1.0, 0.0, 0.0, 1.0], 2.0, 0.25);
        assert!(l.value.is_finite() && l.grad.iter().all(|g| g.is_finite()));
        let perfect = focal_loss(&[50.0, -50.0], &[1.0, 0.0], 2.0, 0.25);
        assert!(perfect.value < 1e-20);
    }

    #[test]
    fn smooth_l1_branches() {
        assert!((box_loss(&[0.5; 4], &[0.0; 4]).value - 0.125).abs() < 1e-15);
        assert!((box_loss(&[2.0; 4], &[0.0; 4]).value - 1.5).abs() < 1e-15);
        assert_eq!(box_loss(&[], &[]).value, 0.0);
    }

    #[test]
    fn encode_decode_round_trip() {
        let b = BBox::new(30.0, 20.0, 42.0, 37.0, 1).unwrap();
        let cell = (4, 3);
        let anchor = [9.0, 18.75];
        let t = encode_box(&b, cell, anchor, 8).unwrap();
        let d = decode_box(t, cell, anchor, 8);
        for (x, y) in d.iter().zip([30.0, 20.0, 42.0, 37.0]) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn box_equal_to_anchor_matches_its_cell() {
        let anchors = AnchorSet::default();
        let [aw, ah] = anchors.0[0];
        // center at (12, 12): cell (1, 1) at stride 8, exactly mid-cell
        let b = BBox::new(12.0 - aw / 2.0, 12.0 - ah / 2.0, 12.0 + aw / 2.0, 12.0 + ah / 2.0, 0).unwrap();
        let t = assign_targets(&[vec![b]], &anchors, [(12, 20), (6, 10), (3, 5)], 4.0);
        assert!(t.matches.iter().any(|m| m.scale == 0 && m.anchor == 0 && (m.gx, m.gy) == (1, 1)));
        assert_eq!(t.unassigned, 0);
    }

    #[test]
    fn oversized_box_is_unassigned() {
        let anchors = AnchorSet::default();
        let biggest = anchors.0[8];
        let b = BBox::new(0.0, 0.0, biggest[0] * 5.0, biggest[1] * 5.0, 0).unwrap();
        let small = anchors.0[0];
        let tiny = BBox::new(40.0, 40.0, 40.0 + small[0] / 5.0, 40.0 + small[1] / 5.0, 0).unwrap();
        let t = assign_targets(&[vec![b, tiny]], &anchors, [(12, 20), (6, 10), (3, 5)], 4.0);
        assert!(t.matches.is_empty());
        assert_eq!(t.unassigned, 2);
    }
}
