//! Color overlay of one prediction on its input image.

use qyolop::data::Image;
use qyolop::postprocess::Prediction;

/// Merged-mask colors: background, main lane, alternative lane, then the
/// three line types.
const MASK_COLORS: [[f32; 3]; 6] = [
    [0.0, 0.0, 0.0],
    [0.1, 0.8, 0.2],
    [0.2, 0.4, 0.9],
    [1.0, 1.0, 1.0],
    [1.0, 0.85, 0.0],
    [0.0, 0.9, 0.9],
];

const BOX_COLORS: [[f32; 3]; 4] = [[1.0, 0.1, 0.1], [0.1, 0.3, 1.0], [1.0, 0.55, 0.0], [0.1, 0.9, 0.1]];

pub fn render(image: &Image, pred: &Prediction) -> Image {
    let mut out = image.clone();
    let mask = if (pred.merged.height, pred.merged.width) == (image.height, image.width) {
        pred.merged.clone()
    } else {
        pred.merged.resize_nearest(image.height, image.width)
    };
    for y in 0..image.height {
        for x in 0..image.width {
            let l = mask.get(y, x) as usize;
            if l == 0 || l >= MASK_COLORS.len() {
                continue;
            }
            let p = out.pixel(y, x);
            let c = MASK_COLORS[l];
            out.set_pixel(y, x, std::array::from_fn(|i| 0.5 * p[i] + 0.5 * c[i]));
        }
    }
    let (sy, sx) = (
        image.height as f32 / pred.merged.height.max(1) as f32,
        image.width as f32 / pred.merged.width.max(1) as f32,
    );
    for b in &pred.boxes {
        let c = BOX_COLORS[b.bbox.class_id % BOX_COLORS.len()];
        let clampx = |v: f32| ((v * sx).round().max(0.0) as usize).min(image.width - 1);
        let clampy = |v: f32| ((v * sy).round().max(0.0) as usize).min(image.height - 1);
        let (x1, x2, y1, y2) = (clampx(b.bbox.x1), clampx(b.bbox.x2), clampy(b.bbox.y1), clampy(b.bbox.y2));
        for x in x1..=x2 {
            out.set_pixel(y1, x, c);
            out.set_pixel(y2, x, c);
        }
        for y in y1..=y2 {
            out.set_pixel(y, x1, c);
            out.set_pixel(y, x2, c);
        }
    }
    out
}
