//! Detection mAP@0.5 and segmentation mIoU.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{iou, BBox, Palette, Sample, ScoredBox, SegMask, DET_CLASS_NAMES, NUM_DET_CLASSES};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::postprocess::{infer_batch, merge_masks, InferenceConfig, Prediction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f32,
    /// 11-point interpolation instead of all-point.
    pub eleven_point: bool,
    /// Average per-image IoUs instead of using one dataset-wide confusion matrix.
    pub per_image_miou: bool,
    pub include_background: bool,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            eleven_point: false,
            per_image_miou: false,
            include_background: true,
            batch_size: 8,
        }
    }
}

/// Precision-recall points of one class, in descending score order.
fn pr_curve(preds: &[Vec<ScoredBox>], gts: &[Vec<BBox>], class_id: usize, iou_thr: f32) -> (Vec<f64>, Vec<f64>, usize) {
    let n_gt: usize = gts.iter().map(|g| g.iter().filter(|b| b.class_id == class_id).count()).sum();
    let mut flat: Vec<(usize, &ScoredBox)> = preds
        .iter()
        .enumerate()
        .flat_map(|(img, ps)| ps.iter().filter(|p| p.bbox.class_id == class_id).map(move |p| (img, p)))
        .collect();
    flat.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(flat.len());
    let mut precision = Vec::with_capacity(flat.len());
    for (img, p) in flat {
        let mut best: Option<(usize, f32)> = None;
        for (j, g) in gts[img].iter().enumerate() {
            if g.class_id != class_id || matched[img][j] {
                continue;
            }
            let v = iou(&p.bbox, g);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, v)) if v >= iou_thr => {
                matched[img][j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        recall.push(if n_gt > 0 { tp as f64 / n_gt as f64 } else { 0.0 });
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    (recall, precision, n_gt)
}

/// Area under the interpolated precision-recall curve of one class.
/// `None` when the class has neither ground truth nor predictions.
pub fn average_precision(
    preds: &[Vec<ScoredBox>],
    gts: &[Vec<BBox>],
    class_id: usize,
    iou_thr: f32,
    eleven_point: bool,
) -> Option<f64> {
    let (recall, precision, n_gt) = pr_curve(preds, gts, class_id, iou_thr);
    if n_gt == 0 {
        return if recall.is_empty() { None } else { Some(0.0) };
    }
    if recall.is_empty() {
        return Some(0.0);
    }
    if eleven_point {
        let ap = (0..=10)
            .map(|i| {
                let t = i as f64 / 10.0;
                recall
                    .iter()
                    .zip(&precision)
                    .filter(|(r, _)| **r >= t)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max)
            })
            .sum::<f64>();
        return Some(ap / 11.0);
    }
    let mut mrec = vec![0.0];
    mrec.extend_from_slice(&recall);
    mrec.push(1.0);
    let mut mpre = vec![1.0];
    mpre.extend_from_slice(&precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    let ap = (1..mrec.len())
        .filter(|&i| mrec[i] != mrec[i - 1])
        .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
        .sum();
    Some(ap)
}

/// Mean of the defined per-class APs, plus the per-class values.
pub fn map50(preds: &[Vec<ScoredBox>], gts: &[Vec<BBox>], cfg: &EvalConfig) -> (f64, [Option<f64>; NUM_DET_CLASSES]) {
    let per: [Option<f64>; NUM_DET_CLASSES] =
        std::array::from_fn(|c| average_precision(preds, gts, c, cfg.iou_threshold, cfg.eleven_point));
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    (mean, per)
}

/// Square confusion matrix, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn add(&mut self, pred: &SegMask, gt: &SegMask) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) || pred.palette != gt.palette {
            return Err(Error::Argument(format!(
                "prediction {}x{} {:?} does not match ground truth {}x{} {:?}",
                pred.height, pred.width, pred.palette, gt.height, gt.width, gt.palette
            )));
        }
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            self.counts[g as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (v, o) in row.iter_mut().zip(orow) {
                *v += o;
            }
        }
    }

    /// `TP / (TP + FP + FN)` per class; 1.0 for a class absent from both.
    pub fn iou(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let tp = self.counts[c][c];
                let fn_: u64 = self.counts[c].iter().sum::<u64>() - tp;
                let fp: u64 = self.counts.iter().map(|r| r[c]).sum::<u64>() - tp;
                let den = tp + fp + fn_;
                if den == 0 {
                    1.0
                } else {
                    tp as f64 / den as f64
                }
            })
            .collect()
    }
}

fn mean_of(iou: &[f64], include_background: bool) -> f64 {
    let v = if include_background { iou } else { &iou[1..] };
    if v.is_empty() {
        return 1.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean IoU over the palette plus per-class IoUs and the accumulated
/// confusion matrix.
pub fn miou(preds: &[SegMask], gts: &[SegMask], palette: Palette, cfg: &EvalConfig) -> Result<(f64, Vec<f64>, ConfusionMatrix)> {
    if preds.len() != gts.len() {
        return Err(Error::Argument(format!("{} predictions for {} masks", preds.len(), gts.len())));
    }
    let mut total = ConfusionMatrix::new(palette.num_classes());
    let mut per_image = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(gts) {
        if p.palette != palette {
            return Err(Error::Argument(format!("mask palette {:?}, expected {palette:?}", p.palette)));
        }
        let mut cm = ConfusionMatrix::new(palette.num_classes());
        cm.add(p, g)?;
        if cfg.per_image_miou {
            per_image.push(mean_of(&cm.iou(), cfg.include_background));
        }
        total.merge(&cm);
    }
    let ious = total.iou();
    let mean = if cfg.per_image_miou {
        if per_image.is_empty() {
            1.0
        } else {
            per_image.iter().sum::<f64>() / per_image.len() as f64
        }
    } else {
        mean_of(&ious, cfg.include_background)
    };
    Ok((mean, ious, total))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub miou: f64,
    pub per_class_iou: Vec<f64>,
    pub confusion: ConfusionMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_images: usize,
    pub map50: f64,
    /// Per-class AP; `null` for a class with no ground truth and no predictions.
    pub ap_per_class: [Option<f64>; NUM_DET_CLASSES],
    pub drivable: SegReport,
    pub lane: SegReport,
    pub merged: SegReport,
}

impl EvalReport {
    pub fn drivable_miou(&self) -> f64 {
        self.drivable.miou
    }

    pub fn lane_miou(&self) -> f64 {
        self.lane.miou
    }

    /// Plain-text summary table.
    pub fn to_table(&self, label: &str) -> String {
        let mut s = String::new();
        let rule = "-".repeat(78);
        let _ = writeln!(s, "{rule}");
        let _ = writeln!(
            s,
            "{:<20} | {:^16} | {:^16} | {:^16}",
            "Model", "Detection", "Drivable Area", "Lane Line"
        );
        let _ = writeln!(s, "{:<20} | {:^16} | {:^16} | {:^16}", "", "(mAP@0.5)", "(mIoU)", "(mIoU)");
        let _ = writeln!(s, "{rule}");
        let _ = writeln!(
            s,
            "{:<20} | {:^16.3} | {:^16.3} | {:^16.3}",
            label, self.map50, self.drivable.miou, self.lane.miou
        );
        let _ = writeln!(s, "{rule}");
        let _ = writeln!(s, "merged six-class mIoU: {:.3}   images: {}", self.merged.miou, self.num_images);
        let ap: Vec<String> = DET_CLASS_NAMES
            .iter()
            .zip(&self.ap_per_class)
            .map(|(n, a)| match a {
                Some(v) => format!("{n} {v:.3}"),
                None => format!("{n} n/a"),
            })
            .collect();
        let _ = writeln!(s, "AP per class: {}", ap.join(", "));
        for (name, r, palette) in [
            ("drivable", &self.drivable, Palette::Drivable),
            ("lane", &self.lane, Palette::Lane),
        ] {
            let v: Vec<String> = palette
                .class_names()
                .iter()
                .zip(&r.per_class_iou)
                .map(|(n, x)| format!("{n} {x:.3}"))
                .collect();
            let _ = writeln!(s, "{name} IoU: {}", v.join(", "));
        }
        s
    }
}

/// Scores predictions against samples.
pub fn score_predictions(preds: &[Prediction], samples: &[Sample], cfg: &EvalConfig) -> Result<EvalReport> {
    if preds.len() != samples.len() {
        return Err(Error::Argument(format!("{} predictions for {} samples", preds.len(), samples.len())));
    }
    let det: Vec<Vec<ScoredBox>> = preds.iter().map(|p| p.boxes.clone()).collect();
    let gts: Vec<Vec<BBox>> = samples.iter().map(|s| s.boxes.clone()).collect();
    let (map, per) = map50(&det, &gts, cfg);
    let seg = |pm: Vec<SegMask>, gm: Vec<SegMask>, palette| -> Result<SegReport> {
        let (m, iou, cm) = miou(&pm, &gm, palette, cfg)?;
        Ok(SegReport {
            miou: m,
            per_class_iou: iou,
            confusion: cm,
        })
    };
    let drivable = seg(
        preds.iter().map(|p| p.drivable.clone()).collect(),
        samples.iter().map(|s| s.drivable.clone()).collect(),
        Palette::Drivable,
    )?;
    let lane = seg(
        preds.iter().map(|p| p.lane.clone()).collect(),
        samples.iter().map(|s| s.lane.clone()).collect(),
        Palette::Lane,
    )?;
    let merged_gt = samples
        .iter()
        .map(|s| merge_masks(&s.drivable, &s.lane))
        .collect::<Result<Vec<_>>>()?;
    let merged = seg(preds.iter().map(|p| p.merged.clone()).collect(), merged_gt, Palette::Merged)?;
    Ok(EvalReport {
        num_images: samples.len(),
        map50: map,
        ap_per_class: per,
        drivable,
        lane,
        merged,
    })
}

/// Runs inference over `samples` and scores the result.
pub fn evaluate(model: &mut Model, samples: &[Sample], infer_cfg: &InferenceConfig, cfg: &EvalConfig) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let imgs: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        preds.extend(infer_batch(model, &imgs, infer_cfg)?);
    }
    score_predictions(&preds, samples, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f32, y1: f32, x2: f32, y2: f32) -> BBox {
        BBox {
            x1,
            y1,
            x2,
            y2,
            class_id: 0,
        }
    }

    fn s(bb: BBox, score: f32) -> ScoredBox {
        ScoredBox { bbox: bb, score }
    }

    #[test]
    fn single_detection_above_and_below_threshold() {
        let gt = vec![vec![b(0., 0., 10., 10.)]];
        // IoU 0.6: 10×6 overlap of a 10×10 box with a 10×6 box → 60/100
        let hit = vec![vec![s(b(0., 0., 10., 6.), 0.9)]];
        assert_eq!(average_precision(&hit, &gt, 0, 0.5, false), Some(1.0));
        let miss = vec![vec![s(b(0., 0., 10., 4.), 0.9)]];
        assert_eq!(average_precision(&miss, &gt, 0, 0.5, false), Some(0.0));
    }

    #[test]
    fn absent_class_is_none() {
        let gt = vec![vec![b(0., 0., 10., 10.)]];
        assert_eq!(average_precision(&[vec![]], &gt, 2, 0.5, false), None);
        let (m, per) = map50(&[vec![s(b(0., 0., 10., 10.), 0.5)]], &gt, &EvalConfig::default());
        assert_eq!(m, 1.0);
        assert_eq!(per[1], None);
    }

    #[test]
    fn half_foreground_all_background_prediction() {
        let gt = SegMask::from_labels(2, 2, Palette::Lane, vec![0, 0, 1, 1]).unwrap();
        let pred = SegMask::background(2, 2, Palette::Lane);
        let cfg = EvalConfig::default();
        // 4-class palette: classes 2 and 3 are vacuous (1.0)
        let (_, iou, _) = miou(&[pred], &[gt], Palette::Lane, &cfg).unwrap();
        assert_eq!(iou, vec![0.5, 0.0, 1.0, 1.0]);
    }
}
