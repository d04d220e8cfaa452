//! Deterministic synthetic road scenes: a trapezoidal road split into lanes,
//! painted lane lines of three types and colored rectangles for the four
//! object classes. Labels are drawn first and the image is rendered from
//! them, so boxes and masks are exact.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, labels, BBox, DetClass, Image, ManifestEntry, Palette, Sample, SegMask};
use crate::error::{Error, Result};
use crate::labelprep::{draw_polyline, fill_polygon};

/// Color scheme of the generated scenes; the second mimics a different
/// camera/region for mixed-data finetuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneStyle {
    Primary,
    Secondary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_lanes: usize,
    pub max_lanes: usize,
    pub lane_stroke: f32,
    /// Amplitude of uniform per-pixel noise.
    pub noise: f32,
    pub style: SceneStyle,
    pub id_prefix: String,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_images: 64,
            height: 96,
            width: 160,
            min_objects: 1,
            max_objects: 4,
            min_lanes: 2,
            max_lanes: 3,
            lane_stroke: 5.0,
            noise: 0.03,
            style: SceneStyle::Primary,
            id_prefix: "toy".into(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: format!("toyset.{key}"),
                reason: reason.into(),
            })
        };
        if self.n_images == 0 {
            return bad("n_images", "must be positive");
        }
        if self.height < 32 || self.width < 32 {
            return bad("height", "images must be at least 32x32");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects", "exceeds max_objects");
        }
        if self.min_lanes == 0 || self.min_lanes > self.max_lanes {
            return bad("min_lanes", "lane range must be non-empty and positive");
        }
        if !(self.lane_stroke > 0.0) {
            return bad("lane_stroke", "must be positive");
        }
        if !(0.0..0.5).contains(&self.noise) {
            return bad("noise", "must lie in [0, 0.5)");
        }
        Ok(())
    }
}

struct Colors {
    sky: [f32; 3],
    ground: [f32; 3],
    main_lane: [f32; 3],
    alternative_lane: [f32; 3],
    lines: [[f32; 3]; 3],
    objects: [[f32; 3]; 4],
}

fn colors(style: SceneStyle) -> Colors {
    let lines = [[0.95, 0.95, 0.95], [0.95, 0.80, 0.10], [0.55, 0.80, 1.00]];
    let objects = [[0.85, 0.12, 0.12], [0.12, 0.25, 0.85], [0.95, 0.55, 0.08], [0.15, 0.70, 0.20]];
    match style {
        SceneStyle::Primary => Colors {
            sky: [0.62, 0.76, 0.90],
            ground: [0.36, 0.46, 0.26],
            main_lane: [0.50, 0.44, 0.38],
            alternative_lane: [0.34, 0.37, 0.45],
            lines,
            objects,
        },
        SceneStyle::Secondary => Colors {
            sky: [0.78, 0.78, 0.74],
            ground: [0.48, 0.42, 0.30],
            main_lane: [0.54, 0.47, 0.40],
            alternative_lane: [0.38, 0.40, 0.48],
            lines,
            objects,
        },
    }
}

/// Width and height ranges (inclusive, pixels at 96×160) per object class.
fn object_size(class: DetClass, rng: &mut ChaCha8Rng, scale: f32) -> (usize, usize) {
    let (w, h) = match class {
        DetClass::Pedestrian => (rng.random_range(8..=12), rng.random_range(18..=28)),
        DetClass::Vehicle => (rng.random_range(28..=42), rng.random_range(16..=24)),
        DetClass::Scooter => (rng.random_range(11..=15), rng.random_range(14..=19)),
        DetClass::Bicycle => (rng.random_range(15..=20), rng.random_range(10..=14)),
    };
    let s = |v: usize| ((v as f32 * scale).round() as usize).max(2);
    (s(w), s(h))
}

/// Generates one scene. Deterministic in `(spec.seed, index)`.
pub fn render_scene(spec: &SceneSpec, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f32, w as f32);
    let scale = (hf / 96.0).min(wf / 160.0);
    let pal = colors(spec.style);

    let horizon = hf * rng.random_range(0.34..0.44);
    let top_center = wf * rng.random_range(0.42..0.58);
    let top_half = wf * rng.random_range(0.06..0.12);
    let bottom_left = wf * rng.random_range(-0.15..0.08);
    let bottom_right = wf * rng.random_range(0.92..1.15);
    let n_lanes = rng.random_range(spec.min_lanes..=spec.max_lanes);
    let boundary = |k: usize| -> ([f32; 2], [f32; 2]) {
        let f = k as f32 / n_lanes as f32;
        let bottom = bottom_left + f * (bottom_right - bottom_left);
        let top = top_center - top_half + f * 2.0 * top_half;
        ([bottom, hf], [top, horizon])
    };
    // the ego lane holds the bottom center of the image
    let ego = (0..n_lanes)
        .find(|&k| {
            let (b0, _) = boundary(k);
            let (b1, _) = boundary(k + 1);
            b0[0] <= wf / 2.0 && wf / 2.0 < b1[0]
        })
        .unwrap_or(n_lanes / 2);

    let mut drivable = SegMask::background(h, w, Palette::Drivable);
    for k in 0..n_lanes {
        let (b0, t0) = boundary(k);
        let (b1, t1) = boundary(k + 1);
        let label = if k == ego {
            labels::MAIN_LANE
        } else {
            labels::ALTERNATIVE_LANE
        };
        fill_polygon(&mut drivable, &[b0, b1, t1, t0], label);
    }

    let stroke = spec.lane_stroke * scale;
    let mut lane = SegMask::background(h, w, Palette::Lane);
    for k in 0..=n_lanes {
        let (b, t) = boundary(k);
        let kind = if k == 0 || k == n_lanes {
            labels::SINGLE_LINE
        } else {
            [labels::SINGLE_LINE, labels::DOUBLE_LINE, labels::DASHED_LINE][rng.random_range(0..3)]
        };
        if kind == labels::DASHED_LINE {
            let period = 14.0 * scale;
            let dash = 8.0 * scale;
            let phase = rng.random_range(0.0..period);
            let len = hf - horizon;
            let mut s = -phase;
            while s < len {
                let (s0, s1) = (s.max(0.0), (s + dash).min(len));
                if s1 > s0 {
                    let at = |d: f32| {
                        let f = d / len;
                        [b[0] + f * (t[0] - b[0]), b[1] + f * (t[1] - b[1])]
                    };
                    draw_polyline(&mut lane, &[at(s0), at(s1)], stroke, kind);
                }
                s += period;
            }
        } else {
            draw_polyline(&mut lane, &[b, t], stroke, kind);
        }
    }

    let n_obj = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut boxes: Vec<BBox> = Vec::with_capacity(n_obj);
    let ground_top = horizon.ceil() as usize;
    for _ in 0..n_obj {
        let class = DetClass::from_id(rng.random_range(0..4)).expect("four classes");
        for _attempt in 0..50 {
            let (bw, bh) = object_size(class, &mut rng, scale);
            if bw + 2 > w || bh + ground_top + 2 > h {
                break;
            }
            let x1 = rng.random_range(1..=w - bw - 1);
            let y2 = rng.random_range((ground_top + bh).max(bh + 1)..=h - 1);
            let y1 = y2 - bh;
            let b = BBox {
                x1: x1 as f32,
                y1: y1 as f32,
                x2: (x1 + bw) as f32,
                y2: y2 as f32,
                class_id: class.id(),
            };
            // keep a one-pixel gap between objects
            let clash = boxes.iter().any(|o| {
                b.x1 < o.x2 + 1.0 && o.x1 < b.x2 + 1.0 && b.y1 < o.y2 + 1.0 && o.y1 < b.y2 + 1.0
            });
            if !clash {
                boxes.push(b);
                break;
            }
        }
    }

    let mut image = Image::new(h, w);
    let mut object_at = vec![usize::MAX; h * w];
    for (i, b) in boxes.iter().enumerate() {
        for y in b.y1 as usize..b.y2 as usize {
            for x in b.x1 as usize..b.x2 as usize {
                object_at[y * w + x] = i;
                drivable.set(y, x, labels::BACKGROUND);
                lane.set(y, x, labels::BACKGROUND);
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let base = if object_at[i] != usize::MAX {
                pal.objects[boxes[object_at[i]].class_id]
            } else if lane.labels[i] != labels::BACKGROUND {
                pal.lines[lane.labels[i] as usize - 1]
            } else if drivable.labels[i] == labels::MAIN_LANE {
                pal.main_lane
            } else if drivable.labels[i] == labels::ALTERNATIVE_LANE {
                pal.alternative_lane
            } else if (y as f32 + 0.5) < horizon {
                let g = (y as f32 / horizon.max(1.0)) * 0.08;
                [pal.sky[0] + g, pal.sky[1] + g, pal.sky[2]]
            } else {
                pal.ground
            };
            let mut px = base;
            if spec.noise > 0.0 {
                for c in &mut px {
                    *c = (*c + rng.random_range(-spec.noise..spec.noise)).clamp(0.0, 1.0);
                }
            }
            image.set_pixel(y, x, px);
        }
    }
    Sample {
        image,
        boxes,
        drivable,
        lane,
        source_id: format!("{}_{index:04}", spec.id_prefix),
    }
}

/// Renders `spec.n_images` scenes into `out_dir` (images, label images and
/// `manifest.json`) and returns the manifest path.
pub fn generate(spec: &SceneSpec, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let entries: Vec<ManifestEntry> = (0..spec.n_images)
        .into_par_iter()
        .map(|i| {
            let s = render_scene(spec, i);
            let img = PathBuf::from("images").join(format!("{}.png", s.source_id));
            let da = PathBuf::from("masks").join(format!("{}_drivable.png", s.source_id));
            let ll = PathBuf::from("masks").join(format!("{}_lane.png", s.source_id));
            data::write_rgb_png(&out_dir.join(&img), &s.image)?;
            data::write_label_png(&out_dir.join(&da), &s.drivable)?;
            data::write_label_png(&out_dir.join(&ll), &s.lane)?;
            Ok(ManifestEntry {
                id: s.source_id,
                image_path: img,
                boxes: s.boxes,
                drivable_mask_path: da,
                lane_mask_path: ll,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = out_dir.join("manifest.json");
    data::write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
