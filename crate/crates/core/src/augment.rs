//! Training-time augmentations: normalization, scale/translate warp, HSV
//! jitter, horizontal flip and four-image mosaic.
//!
//! Every random operation has a deterministic core taking explicit
//! parameters; the `rng` wrappers only draw those parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BBox, Image, Sample, SegMask};
use crate::error::{Error, Result};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
/// Fill value for pixels warped in from outside the source.
pub const BORDER_FILL: f32 = 114.0 / 255.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub normalize_mean: [f32; 3],
    pub normalize_std: [f32; 3],
    pub perspective_scale: f32,
    pub translate: f32,
    pub hsv_h: f32,
    pub hsv_s: f32,
    pub hsv_v: f32,
    pub flip_prob: f32,
    /// Boxes keeping less than this fraction of their area after a warp or
    /// mosaic crop are dropped.
    pub min_area_ratio: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            normalize_mean: IMAGENET_MEAN,
            normalize_std: IMAGENET_STD,
            perspective_scale: 0.25,
            translate: 0.1,
            hsv_h: 0.015,
            hsv_s: 0.7,
            hsv_v: 0.4,
            flip_prob: 0.5,
            min_area_ratio: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: format!("augment.{key}"),
                reason: reason.into(),
            })
        };
        if self.normalize_std.iter().any(|&s| !(s > 0.0)) {
            return bad("normalize_std", "components must be > 0");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob", "must be in [0,1]");
        }
        if !(0.0..=1.0).contains(&self.min_area_ratio) {
            return bad("min_area_ratio", "must be in [0,1]");
        }
        if !(0.0..1.0).contains(&self.perspective_scale) {
            return bad("perspective_scale", "must be in [0,1)");
        }
        for (k, v) in [("translate", self.translate), ("hsv_h", self.hsv_h), ("hsv_s", self.hsv_s), ("hsv_v", self.hsv_v)] {
            if !(v >= 0.0) {
                return bad(k, "must be >= 0");
            }
        }
        Ok(())
    }
}

/// Per-channel `(x - mean) / std`.
pub fn normalize(image: &Image, mean: [f32; 3], std: [f32; 3]) -> Image {
    let mut out = image.clone();
    for px in out.data.chunks_mut(3) {
        for c in 0..3 {
            px[c] = (px[c] - mean[c]) / std[c];
        }
    }
    out
}

pub fn denormalize(image: &Image, mean: [f32; 3], std: [f32; 3]) -> Image {
    let mut out = image.clone();
    for px in out.data.chunks_mut(3) {
        for c in 0..3 {
            px[c] = px[c] * std[c] + mean[c];
        }
    }
    out
}

/// Scale about the image center followed by a translation:
/// `p' = scale * (p - c) + c + (tx, ty)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub scale: f32,
    pub tx: f32,
    pub ty: f32,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        scale: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    fn forward(&self, x: f32, y: f32, cx: f32, cy: f32) -> (f32, f32) {
        (self.scale * (x - cx) + cx + self.tx, self.scale * (y - cy) + cy + self.ty)
    }

    fn inverse(&self, x: f32, y: f32, cx: f32, cy: f32) -> (f32, f32) {
        ((x - cx - self.tx) / self.scale + cx, (y - cy - self.ty) / self.scale + cy)
    }
}

fn sample_bilinear(img: &Image, x: f32, y: f32) -> [f32; 3] {
    // continuous coordinates, pixel centers at +0.5
    let (u, v) = (x - 0.5, y - 0.5);
    if u < -0.5 || v < -0.5 || u > img.width as f32 - 0.5 || v > img.height as f32 - 0.5 {
        return [BORDER_FILL; 3];
    }
    let u = u.clamp(0.0, (img.width - 1) as f32);
    let v = v.clamp(0.0, (img.height - 1) as f32);
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (fx, fy) = (u - x0 as f32, v - y0 as f32);
    let mut out = [0.0; 3];
    let (p00, p01, p10, p11) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
    for c in 0..3 {
        let top = p00[c] * (1.0 - fx) + p01[c] * fx;
        let bot = p10[c] * (1.0 - fx) + p11[c] * fx;
        out[c] = top * (1.0 - fy) + bot * fy;
    }
    out
}

fn sample_nearest(mask: &SegMask, x: f32, y: f32) -> u8 {
    if x < 0.0 || y < 0.0 {
        return 0;
    }
    let (xi, yi) = (x.floor() as usize, y.floor() as usize);
    if xi >= mask.width || yi >= mask.height {
        0
    } else {
        mask.get(yi, xi)
    }
}

fn filter_box(original_area: f32, b: &BBox, w: f32, h: f32, min_ratio: f32) -> Option<BBox> {
    let c = b.clamp(w, h)?;
    (c.area() >= min_ratio * original_area && c.area() > 0.0).then_some(c)
}

/// Applies a scale/translate warp to image, boxes and masks.
pub fn warp_sample(sample: &Sample, p: AffineParams, min_area_ratio: f32) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let (cx, cy) = (w as f32 * 0.5, h as f32 * 0.5);
    let mut image = Image::new(h, w);
    let mut drivable = SegMask::background(h, w, sample.drivable.palette);
    let mut lane = SegMask::background(h, w, sample.lane.palette);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = p.inverse(x as f32 + 0.5, y as f32 + 0.5, cx, cy);
            image.set_pixel(y, x, sample_bilinear(&sample.image, sx, sy));
            drivable.set(y, x, sample_nearest(&sample.drivable, sx, sy));
            lane.set(y, x, sample_nearest(&sample.lane, sx, sy));
        }
    }
    let boxes = sample
        .boxes
        .iter()
        .filter_map(|b| {
            let (x1, y1) = p.forward(b.x1, b.y1, cx, cy);
            let (x2, y2) = p.forward(b.x2, b.y2, cx, cy);
            let moved = BBox {
                x1,
                y1,
                x2,
                y2,
                class_id: b.class_id,
            };
            filter_box(moved.area(), &moved, w as f32, h as f32, min_area_ratio)
        })
        .collect();
    Sample {
        image,
        boxes,
        drivable,
        lane,
        source_id: sample.source_id.clone(),
    }
}

pub fn draw_affine<R: Rng + ?Sized>(cfg: &AugmentConfig, width: usize, height: usize, rng: &mut R) -> AffineParams {
    let s = cfg.perspective_scale;
    let scale = if s > 0.0 { rng.random_range(1.0 - s..=1.0 + s) } else { 1.0 };
    let t = cfg.translate;
    let (tx, ty) = if t > 0.0 {
        (
            rng.random_range(-t..=t) * width as f32,
            rng.random_range(-t..=t) * height as f32,
        )
    } else {
        (0.0, 0.0)
    };
    AffineParams { scale, tx, ty }
}

pub fn random_perspective<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let p = draw_affine(cfg, sample.width(), sample.height(), rng);
    warp_sample(sample, p, cfg.min_area_ratio)
}

/// RGB in `[0,1]` to HSV with hue in `[0,1)`.
pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    [h.rem_euclid(1.0), s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Multiplies H, S, V by `1 + gain`; hue wraps, S and V are clamped.
pub fn hsv_jitter_with_gains(image: &Image, gains: [f32; 3]) -> Image {
    if gains == [0.0; 3] {
        return image.clone();
    }
    let mut out = image.clone();
    for px in out.data.chunks_mut(3) {
        let [h, s, v] = rgb_to_hsv([px[0], px[1], px[2]]);
        let hsv = [
            (h * (1.0 + gains[0])).rem_euclid(1.0),
            (s * (1.0 + gains[1])).clamp(0.0, 1.0),
            (v * (1.0 + gains[2])).clamp(0.0, 1.0),
        ];
        px.copy_from_slice(&hsv_to_rgb(hsv));
    }
    out
}

pub fn hsv_jitter<R: Rng + ?Sized>(image: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    let mut draw = |f: f32| if f > 0.0 { rng.random_range(-1.0f32..=1.0) * f } else { 0.0 };
    let gains = [draw(cfg.hsv_h), draw(cfg.hsv_s), draw(cfg.hsv_v)];
    hsv_jitter_with_gains(image, gains)
}

/// Mirrors image, masks and boxes about the vertical center line.
pub fn hflip_sample(sample: &Sample) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let mut out = sample.clone();
    for y in 0..h {
        for x in 0..w {
            out.image.set_pixel(y, x, sample.image.pixel(y, w - 1 - x));
            out.drivable.set(y, x, sample.drivable.get(y, w - 1 - x));
            out.lane.set(y, x, sample.lane.get(y, w - 1 - x));
        }
    }
    let wf = w as f32;
    for b in &mut out.boxes {
        let (x1, x2) = (wf - b.x2, wf - b.x1);
        b.x1 = x1;
        b.x2 = x2;
    }
    out
}

pub fn hflip<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    if cfg.flip_prob > 0.0 && rng.random::<f32>() < cfg.flip_prob {
        hflip_sample(sample)
    } else {
        sample.clone()
    }
}

/// Four-image mosaic around an explicit center on the `2W×2H` canvas,
/// downscaled back to `W×H`.
pub fn mosaic_with_center(samples: &[Sample], center: (usize, usize), min_area_ratio: f32) -> Result<Sample> {
    if samples.len() != 4 {
        return Err(Error::Argument(format!("mosaic needs exactly 4 samples, got {}", samples.len())));
    }
    let (h, w) = (samples[0].height(), samples[0].width());
    if samples.iter().any(|s| s.height() != h || s.width() != w) {
        return Err(Error::Argument("mosaic samples must share one image size".into()));
    }
    let (ch, cw) = (2 * h, 2 * w);
    let (xc, yc) = (center.0 as isize, center.1 as isize);
    let mut canvas = Image::filled(ch, cw, [BORDER_FILL; 3]);
    let mut drivable = SegMask::background(ch, cw, samples[0].drivable.palette);
    let mut lane = SegMask::background(ch, cw, samples[0].lane.palette);
    let mut boxes = Vec::new();
    let (wi, hi) = (w as isize, h as isize);
    let origins = [(xc - wi, yc - hi), (xc, yc - hi), (xc - wi, yc), (xc, yc)];
    for (s, &(ox, oy)) in samples.iter().zip(&origins) {
        // visible part of the tile in canvas coordinates
        let x_lo = ox.max(0);
        let x_hi = (ox + wi).min(cw as isize);
        let y_lo = oy.max(0);
        let y_hi = (oy + hi).min(ch as isize);
        if x_lo >= x_hi || y_lo >= y_hi {
            continue;
        }
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let (sy, sx) = ((y - oy) as usize, (x - ox) as usize);
                canvas.set_pixel(y as usize, x as usize, s.image.pixel(sy, sx));
                drivable.set(y as usize, x as usize, s.drivable.get(sy, sx));
                lane.set(y as usize, x as usize, s.lane.get(sy, sx));
            }
        }
        for b in &s.boxes {
            let moved = BBox {
                x1: b.x1 + ox as f32,
                y1: b.y1 + oy as f32,
                x2: b.x2 + ox as f32,
                y2: b.y2 + oy as f32,
                class_id: b.class_id,
            };
            let region = BBox {
                x1: x_lo as f32,
                y1: y_lo as f32,
                x2: x_hi as f32,
                y2: y_hi as f32,
                class_id: b.class_id,
            };
            let clipped = BBox {
                x1: moved.x1.max(region.x1),
                y1: moved.y1.max(region.y1),
                x2: moved.x2.min(region.x2),
                y2: moved.y2.min(region.y2),
                class_id: b.class_id,
            };
            if clipped.x1 < clipped.x2 && clipped.y1 < clipped.y2 && clipped.area() >= min_area_ratio * b.area() {
                boxes.push(clipped);
            }
        }
    }
    let image = canvas.resize_bilinear(h, w);
    let boxes = boxes
        .into_iter()
        .filter_map(|b| {
            BBox {
                x1: b.x1 * 0.5,
                y1: b.y1 * 0.5,
                x2: b.x2 * 0.5,
                y2: b.y2 * 0.5,
                class_id: b.class_id,
            }
            .clamp(w as f32, h as f32)
        })
        .collect();
    Ok(Sample {
        image,
        boxes,
        drivable: drivable.resize_nearest(h, w),
        lane: lane.resize_nearest(h, w),
        source_id: format!("mosaic({})", samples.iter().map(|s| s.source_id.as_str()).collect::<Vec<_>>().join(",")),
    })
}

/// Mosaic with a center drawn from the middle half of the canvas.
pub fn mosaic<R: Rng + ?Sized>(samples: &[Sample], cfg: &AugmentConfig, rng: &mut R) -> Result<Sample> {
    if samples.len() != 4 {
        return Err(Error::Argument(format!("mosaic needs exactly 4 samples, got {}", samples.len())));
    }
    let (h, w) = (samples[0].height(), samples[0].width());
    let xc = rng.random_range(w / 2..=w + w / 2);
    let yc = rng.random_range(h / 2..=h + h / 2);
    mosaic_with_center(samples, (xc, yc), cfg.min_area_ratio)
}

/// The full training-time pipeline for one sample (before normalization):
/// optional mosaic, then warp, HSV jitter and flip.
pub fn augment<R: Rng + ?Sized>(
    sample: &Sample,
    mosaic_partners: Option<[&Sample; 3]>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Sample> {
    let base = match mosaic_partners {
        Some(p) => mosaic(&[sample.clone(), p[0].clone(), p[1].clone(), p[2].clone()], cfg, rng)?,
        None => sample.clone(),
    };
    let mut out = random_perspective(&base, cfg, rng);
    out.image = hsv_jitter(&out.image, cfg, rng);
    Ok(hflip(&out, cfg, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Palette;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_with_box(b: BBox) -> Sample {
        let (h, w) = (32, 48);
        let mut image = Image::new(h, w);
        for (i, v) in image.data.iter_mut().enumerate() {
            *v = ((i * 37) % 101) as f32 / 100.0;
        }
        let mut drivable = SegMask::background(h, w, Palette::Drivable);
        for y in 20..32 {
            for x in 0..48 {
                drivable.set(y, x, 1 + (x % 2) as u8);
            }
        }
        let mut lane = SegMask::background(h, w, Palette::Lane);
        for y in 0..32 {
            lane.set(y, 10, 3);
        }
        Sample {
            image,
            boxes: vec![b],
            drivable,
            lane,
            source_id: "s".into(),
        }
    }

    fn bx(x1: f32, y1: f32, x2: f32, y2: f32) -> BBox {
        BBox::new(x1, y1, x2, y2, 1).unwrap()
    }

    #[test]
    fn normalize_known_values_and_roundtrip() {
        let mut img = Image::new(1, 2);
        img.set_pixel(0, 0, IMAGENET_MEAN);
        img.set_pixel(0, 1, [0.714, 0.68, 0.631]);
        let n = normalize(&img, IMAGENET_MEAN, IMAGENET_STD);
        for c in 0..3 {
            assert!(n.pixel(0, 0)[c].abs() < 1e-7);
            assert!((n.pixel(0, 1)[c] - 1.0).abs() < 1e-6, "{:?}", n.pixel(0, 1));
        }
        let back = denormalize(&n, IMAGENET_MEAN, IMAGENET_STD);
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_warp_is_noop() {
        let s = sample_with_box(bx(5.0, 5.0, 20.0, 18.0));
        assert_eq!(warp_sample(&s, AffineParams::IDENTITY, 0.1), s);
    }

    #[test]
    fn translation_shifts_and_clips_boxes() {
        let s = sample_with_box(bx(30.0, 4.0, 46.0, 12.0));
        let p = AffineParams {
            scale: 1.0,
            tx: 8.0,
            ty: 0.0,
        };
        let out = warp_sample(&s, p, 0.1);
        assert_eq!(out.boxes, vec![bx(38.0, 4.0, 48.0, 12.0)]);
        // pixels move with the boxes
        assert_eq!(out.image.pixel(3, 20), s.image.pixel(3, 12));
        assert_eq!(out.lane.get(5, 18), 3);
        assert_eq!(out.image.pixel(3, 2), [BORDER_FILL; 3]);
    }

    #[test]
    fn box_pushed_outside_is_removed() {
        let s = sample_with_box(bx(40.0, 4.0, 46.0, 12.0));
        let p = AffineParams {
            scale: 1.0,
            tx: 20.0,
            ty: 0.0,
        };
        assert!(warp_sample(&s, p, 0.1).boxes.is_empty());
    }

    #[test]
    fn hsv_identity_cases() {
        let s = sample_with_box(bx(1.0, 1.0, 2.0, 2.0));
        assert_eq!(hsv_jitter_with_gains(&s.image, [0.0; 3]), s.image);
        let gray = Image::filled(4, 4, [0.3, 0.3, 0.3]);
        let out = hsv_jitter_with_gains(&gray, [0.0, 0.7, 0.0]);
        for (a, b) in out.data.iter().zip(&gray.data) {
            assert!((a - b).abs() < 1e-6);
        }
        for px in s.image.data.chunks(3) {
            let rgb = [px[0], px[1], px[2]];
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-6, "{rgb:?} -> {back:?}");
            }
        }
    }

    #[test]
    fn flip_coordinates_and_involution() {
        let mut s = sample_with_box(bx(10.0, 5.0, 20.0, 15.0));
        s.image = Image::filled(32, 160, [0.5; 3]);
        s.drivable = SegMask::background(32, 160, Palette::Drivable);
        s.lane = SegMask::background(32, 160, Palette::Lane);
        let f = hflip_sample(&s);
        assert_eq!(f.boxes, vec![bx(140.0, 5.0, 150.0, 15.0)]);
        let s = sample_with_box(bx(14.0, 5.0, 34.0, 15.0));
        let f = hflip_sample(&s);
        assert_eq!(f.boxes, s.boxes, "centered box keeps its x-extent");
        assert_eq!(hflip_sample(&f), s);
    }

    #[test]
    fn mosaic_midpoint_places_one_box_per_quadrant() {
        let (h, w) = (32usize, 48usize);
        let centered = bx(20.0, 12.0, 28.0, 20.0);
        let mut samples = Vec::new();
        for i in 0..4 {
            let mut s = sample_with_box(centered);
            s.source_id = format!("s{i}");
            samples.push(s);
        }
        let out = mosaic_with_center(&samples, (w, h), 0.1).unwrap();
        assert_eq!(out.boxes.len(), 4);
        let offsets = [(0.0, 0.0), (w as f32, 0.0), (0.0, h as f32), (w as f32, h as f32)];
        for (b, (ox, oy)) in out.boxes.iter().zip(offsets) {
            assert_eq!(*b, bx((20.0 + ox) / 2.0, (12.0 + oy) / 2.0, (28.0 + ox) / 2.0, (20.0 + oy) / 2.0));
        }
    }

    #[test]
    fn mosaic_of_background_and_argument_checks() {
        let blank = Sample {
            image: Image::filled(16, 16, [0.2; 3]),
            boxes: vec![],
            drivable: SegMask::background(16, 16, Palette::Drivable),
            lane: SegMask::background(16, 16, Palette::Lane),
            source_id: "b".into(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = mosaic(&vec![blank.clone(); 4], &AugmentConfig::default(), &mut rng).unwrap();
        assert!(out.boxes.is_empty());
        assert_eq!(out.drivable.count(0), 256);
        assert_eq!(out.lane.count(0), 256);
        assert!(mosaic(&vec![blank; 3], &AugmentConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn mosaic_never_adds_drivable_pixels() {
        let s = sample_with_box(bx(5.0, 5.0, 20.0, 18.0));
        let input_fg: usize = 4 * (s.drivable.count(1) + s.drivable.count(2));
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = mosaic(&vec![s.clone(); 4], &AugmentConfig::default(), &mut rng).unwrap();
            assert!(out.drivable.count(1) + out.drivable.count(2) <= input_fg);
        }
    }
}
