//! From raw network outputs to final predictions: box decoding, confidence
//! filtering, class-wise NMS, per-head argmax, lane-over-drivable merge and
//! resampling to the original image size.

use serde::{Deserialize, Serialize};

use crate::augment::normalize;
use crate::data::{iou, labels, BBox, Image, Palette, ScoredBox, SegMask};
use crate::engine::graph::resize_bilinear;
use crate::engine::kernels::sigmoid;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::losses::decode_box;
use crate::network::{AnchorSet, DetGrid, Model, ModelOutputs, ANCHORS_PER_SCALE, STRIDES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub nms_iou: f32,
    pub conf_threshold: f32,
    /// Size of the returned mask; `None` keeps the original image size.
    pub output_size: Option<[usize; 2]>,
    pub normalize_mean: [f32; 3],
    pub normalize_std: [f32; 3],
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            nms_iou: 0.25,
            conf_threshold: 0.05,
            output_size: None,
            normalize_mean: crate::augment::IMAGENET_MEAN,
            normalize_std: crate::augment::IMAGENET_STD,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("nms_iou", self.nms_iou), ("conf_threshold", self.conf_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config {
                    key: format!("inference.{key}"),
                    reason: format!("{v} is outside [0, 1]"),
                });
            }
        }
        if let Some([h, w]) = self.output_size {
            if h == 0 || w == 0 {
                return Err(Error::Config {
                    key: "inference.output_size".into(),
                    reason: "must be positive".into(),
                });
            }
        }
        Ok(())
    }
}

/// Decodes one image's detection outputs (`[A·K, gh, gw]` or
/// `[1, A·K, gh, gw]` per scale) into candidates with
/// `score = σ(obj)·max σ(cls)` above `conf`, clamped to the `height × width`
/// input. Candidates are ordered by scale, row, column, anchor.
pub fn decode_boxes(det: &[Tensor; 3], anchors: &AnchorSet, height: usize, width: usize, conf: f32) -> Vec<ScoredBox> {
    let mut out = Vec::new();
    for (s, t) in det.iter().enumerate() {
        let g = DetGrid::from_tensor(t, ANCHORS_PER_SCALE);
        for gy in 0..g.gh {
            for gx in 0..g.gw {
                for a in 0..g.anchors {
                    let v = g.get(gy, gx, a);
                    let obj = sigmoid(v[4]);
                    let (cls, best) = v[5..]
                        .iter()
                        .map(|&c| sigmoid(c))
                        .enumerate()
                        .fold((0, f32::NEG_INFINITY), |acc, (i, p)| if p > acc.1 { (i, p) } else { acc });
                    let score = obj * best;
                    if !(score > conf) {
                        continue;
                    }
                    let raw = [v[0] as f64, v[1] as f64, v[2] as f64, v[3] as f64];
                    let d = decode_box(raw, (gx, gy), anchors.for_scale(s)[a], STRIDES[s]);
                    let b = BBox {
                        x1: d[0] as f32,
                        y1: d[1] as f32,
                        x2: d[2] as f32,
                        y2: d[3] as f32,
                        class_id: cls,
                    };
                    if let Some(bbox) = b.clamp(width as f32, height as f32) {
                        out.push(ScoredBox { bbox, score });
                    }
                }
            }
        }
    }
    out
}

/// Greedy class-wise non-maximum suppression. Candidates are visited by
/// descending score (earlier index first on ties); a box is kept iff its IoU
/// with every kept box of the same class is at most `iou_thr`.
pub fn nms(candidates: &[ScoredBox], iou_thr: f32) -> Vec<ScoredBox> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].score.total_cmp(&candidates[a].score));
    let mut kept: Vec<ScoredBox> = Vec::new();
    for i in order {
        let c = &candidates[i];
        let clash = kept
            .iter()
            .any(|k| k.bbox.class_id == c.bbox.class_id && iou(&k.bbox, &c.bbox) > iou_thr);
        if !clash {
            kept.push(*c);
        }
    }
    kept
}

fn plane_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Argument(format!("expected a single-image logit tensor, got {s:?}"))),
    }
}

/// Per-pixel argmax of `[C, H, W]` (or `[1, C, H, W]`) logits; ties pick the
/// lower class.
pub fn argmax_mask(logits: &Tensor, palette: Palette) -> Result<SegMask> {
    let (c, h, w) = plane_dims(logits)?;
    if c != palette.num_classes() {
        return Err(Error::Argument(format!(
            "{c} logit channels for a {}-class palette",
            palette.num_classes()
        )));
    }
    let hw = h * w;
    let d = logits.data();
    let labels = (0..hw)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if d[k * hw + i] > d[best * hw + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    SegMask::from_labels(h, w, palette, labels)
}

/// Merged label of one pixel: the lane class wherever the lane head is not
/// background, otherwise the drivable class.
#[inline]
pub fn merge_label(drivable: u8, lane: u8) -> u8 {
    if lane != labels::BACKGROUND {
        lane + 2
    } else {
        drivable
    }
}

/// Combines a drivable-area mask and a lane mask into the six-class palette.
pub fn merge_masks(drivable: &SegMask, lane: &SegMask) -> Result<SegMask> {
    if drivable.palette != Palette::Drivable || lane.palette != Palette::Lane {
        return Err(Error::Argument("merge expects a drivable mask and a lane mask".into()));
    }
    if (drivable.height, drivable.width) != (lane.height, lane.width) {
        return Err(Error::Argument(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            drivable.height, drivable.width, lane.height, lane.width
        )));
    }
    let labels = drivable
        .labels
        .iter()
        .zip(&lane.labels)
        .map(|(&d, &l)| merge_label(d, l))
        .collect();
    SegMask::from_labels(drivable.height, drivable.width, Palette::Merged, labels)
}

/// Argmax of each head, then the lane-over-drivable merge.
pub fn merge_segmentation(drivable_logits: &Tensor, lane_logits: &Tensor) -> Result<SegMask> {
    let (_, dh, dw) = plane_dims(drivable_logits)?;
    let (_, lh, lw) = plane_dims(lane_logits)?;
    if (dh, dw) != (lh, lw) {
        return Err(Error::Argument(format!("logit sizes differ: {dh}x{dw} vs {lh}x{lw}")));
    }
    merge_masks(
        &argmax_mask(drivable_logits, Palette::Drivable)?,
        &argmax_mask(lane_logits, Palette::Lane)?,
    )
}

/// Nearest-neighbor label upsampling.
pub fn upsample_mask(mask: &SegMask, height: usize, width: usize) -> SegMask {
    if (mask.height, mask.width) == (height, width) {
        return mask.clone();
    }
    mask.resize_nearest(height, width)
}

/// Maps a box between image sizes given as `(height, width)`.
pub fn rescale_box(b: &BBox, from: (usize, usize), to: (usize, usize)) -> BBox {
    let sx = to.1 as f32 / from.1 as f32;
    let sy = to.0 as f32 / from.0 as f32;
    BBox {
        x1: b.x1 * sx,
        y1: b.y1 * sy,
        x2: b.x2 * sx,
        y2: b.y2 * sy,
        class_id: b.class_id,
    }
}

/// Final predictions for one image at its original resolution (or the
/// configured output size for masks).
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub boxes: Vec<ScoredBox>,
    pub drivable: SegMask,
    pub lane: SegMask,
    pub merged: SegMask,
}

#[derive(Serialize)]
struct PredictionDoc<'a> {
    boxes: &'a [ScoredBox],
}

impl Prediction {
    /// `{"boxes": [{x1, y1, x2, y2, class, score}, ...]}`
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PredictionDoc { boxes: &self.boxes }).expect("plain data serializes")
    }
}

/// Resize to the model input, normalize, and stack into `[N, 3, H, W]`.
pub fn preprocess(images: &[&Image], model_size: [usize; 2], cfg: &InferenceConfig) -> Tensor {
    let [h, w] = model_size;
    let items: Vec<Tensor> = images
        .iter()
        .map(|img| {
            let resized;
            let src = if (img.height, img.width) == (h, w) {
                *img
            } else {
                resized = img.resize_bilinear(h, w);
                &resized
            };
            let n = normalize(src, cfg.normalize_mean, cfg.normalize_std);
            Tensor::from_vec(&[1, 3, h, w], n.to_chw())
        })
        .collect();
    Tensor::stack(&items)
}

/// Turns one image's raw outputs into final predictions.
pub fn postprocess_one(
    out: &ModelOutputs<Tensor>,
    anchors: &AnchorSet,
    model_size: [usize; 2],
    original: (usize, usize),
    cfg: &InferenceConfig,
) -> Result<Prediction> {
    let [h, w] = model_size;
    let cands = decode_boxes(&out.det, anchors, h, w, cfg.conf_threshold);
    let boxes = nms(&cands, cfg.nms_iou)
        .into_iter()
        .map(|s| ScoredBox {
            bbox: rescale_box(&s.bbox, (h, w), original),
            score: s.score,
        })
        .collect();
    let up = |t: &Tensor| {
        let (c, th, tw) = plane_dims(t)?;
        Ok::<_, Error>(resize_bilinear(&t.clone().reshape(&[1, c, th, tw]), h, w))
    };
    let drivable = argmax_mask(&up(&out.drivable)?, Palette::Drivable)?;
    let lane = argmax_mask(&up(&out.lane)?, Palette::Lane)?;
    let merged = merge_masks(&drivable, &lane)?;
    let (oh, ow) = cfg.output_size.map(|[a, b]| (a, b)).unwrap_or(original);
    Ok(Prediction {
        boxes,
        drivable: upsample_mask(&drivable, oh, ow),
        lane: upsample_mask(&lane, oh, ow),
        merged: upsample_mask(&merged, oh, ow),
    })
}

/// Full inference on a batch of images of any size.
pub fn infer_batch(model: &mut Model, images: &[&Image], cfg: &InferenceConfig) -> Result<Vec<Prediction>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let size = model.config.input_size;
    let x = preprocess(images, size, cfg);
    let out = model.forward(&x)?;
    images
        .iter()
        .enumerate()
        .map(|(i, img)| postprocess_one(&out.batch_item(i), &model.config.anchors, size, (img.height, img.width), cfg))
        .collect()
}

pub fn infer(model: &mut Model, image: &Image, cfg: &InferenceConfig) -> Result<Prediction> {
    Ok(infer_batch(model, &[image], cfg)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sb(x1: f32, y1: f32, x2: f32, y2: f32, class_id: usize, score: f32) -> ScoredBox {
        ScoredBox {
            bbox: BBox {
                x1,
                y1,
                x2,
                y2,
                class_id,
            },
            score,
        }
    }

    #[test]
    fn identical_boxes_keep_the_higher_score() {
        let kept = nms(&[sb(0., 0., 10., 10., 1, 0.8), sb(0., 0., 10., 10., 1, 0.9)], 0.25);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_is_class_wise() {
        let kept = nms(&[sb(0., 0., 10., 10., 0, 0.8), sb(0., 0., 10., 10., 2, 0.9)], 0.25);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn merge_rules() {
        let d = SegMask::from_labels(1, 4, Palette::Drivable, vec![0, 1, 2, 1]).unwrap();
        let none = SegMask::background(1, 4, Palette::Lane);
        assert_eq!(merge_masks(&d, &none).unwrap().labels, d.labels);
        let l = SegMask::from_labels(1, 4, Palette::Lane, vec![1, 0, 3, 2]).unwrap();
        assert_eq!(merge_masks(&d, &l).unwrap().labels, vec![3, 1, 5, 4]);
        let small = SegMask::background(1, 3, Palette::Lane);
        assert!(merge_masks(&d, &small).is_err());
    }

    #[test]
    fn integer_upsample_replicates_blocks() {
        let m = SegMask::from_labels(2, 2, Palette::Merged, vec![0, 1, 2, 3]).unwrap();
        let u = upsample_mask(&m, 4, 4);
        assert_eq!(u.labels, vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
        assert_eq!(upsample_mask(&m, 2, 2), m);
    }

    #[test]
    fn very_negative_objectness_yields_nothing() {
        let anchors = AnchorSet::default();
        let det: [Tensor; 3] = std::array::from_fn(|s| {
            let (gh, gw) = (96 / STRIDES[s], 160 / STRIDES[s]);
            let mut t = Tensor::zeros(&[27, gh, gw]);
            for a in 0..3 {
                t.data_mut()[(a * 9 + 4) * gh * gw..(a * 9 + 5) * gh * gw].fill(-40.0);
            }
            t
        });
        assert!(decode_boxes(&det, &anchors, 96, 160, 0.05).is_empty());
    }

    #[test]
    fn conf_threshold_range_is_validated() {
        let cfg = InferenceConfig {
            conf_threshold: 1.5,
            ..InferenceConfig::default()
        };
        assert_eq!(cfg.validate().unwrap_err().kind(), "config");
    }
}
