//! Label regeneration: rider/two-wheeler pairing by minimum-cost assignment
//! and rasterization of drivable-area and lane geometry into label masks.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, iou, labels, BBox, DetClass, ManifestEntry, Palette, SegMask};
use crate::error::{Error, Result};

/// Cost marking a pair that must never be selected.
pub const INFEASIBLE: f64 = f64::INFINITY;

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
    pub total_cost: f64,
}

/// Minimum-cost assignment between the rows and columns of `cost`.
///
/// Among all matchings the result first maximizes the number of feasible
/// pairs and then minimizes their summed cost. Entries equal to
/// [`INFEASIBLE`] (or any non-finite value) are never selected. Runs the
/// O(n²m) shortest-augmenting-path method with dual potentials.
pub fn hungarian(cost: &[Vec<f64>]) -> AssignmentResult {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    assert!(cost.iter().all(|r| r.len() == cols), "ragged cost matrix");
    if rows == 0 || cols == 0 {
        return AssignmentResult {
            pairs: vec![],
            unmatched_rows: (0..rows).collect(),
            unmatched_cols: (0..cols).collect(),
            total_cost: 0.0,
        };
    }
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| if transposed { cost[j][i] } else { cost[i][j] };

    // Any feasible pair beats every infeasible one.
    let finite_sum: f64 = cost.iter().flatten().filter(|v| v.is_finite()).map(|v| v.abs()).sum();
    let big = 2.0 * finite_sum + 1.0;
    let a = |i: usize, j: usize| {
        let v = at(i, j);
        if v.is_finite() {
            v
        } else {
            big
        }
    };

    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0f64; n + 1];
    let mut v = vec![0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::new();
    let mut total_cost = 0.0;
    for j in 1..=m {
        if p[j] == 0 {
            continue;
        }
        let (i, jj) = (p[j] - 1, j - 1);
        let c = at(i, jj);
        if c.is_finite() {
            total_cost += c;
            pairs.push(if transposed { (jj, i) } else { (i, jj) });
        }
    }
    pairs.sort_unstable();
    let unmatched_rows = (0..rows).filter(|r| !pairs.iter().any(|p| p.0 == *r)).collect();
    let unmatched_cols = (0..cols).filter(|c| !pairs.iter().any(|p| p.1 == *c)).collect();
    AssignmentResult {
        pairs,
        unmatched_rows,
        unmatched_cols,
        total_cost,
    }
}

/// Object category in the source annotations, after vocabulary mapping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceCategory {
    Rider,
    Object(DetClass),
    Ignored,
}

/// Maps a source-vocabulary category name onto the pipeline's classes.
pub fn map_category(name: &str) -> Option<SourceCategory> {
    use SourceCategory::*;
    Some(match name {
        "rider" => Rider,
        "person" | "pedestrian" => Object(DetClass::Pedestrian),
        "car" | "truck" | "bus" | "train" | "vehicle" => Object(DetClass::Vehicle),
        "motorcycle" | "motor" | "scooter" => Object(DetClass::Scooter),
        "bicycle" | "bike" => Object(DetClass::Bicycle),
        "traffic light" | "traffic sign" => Ignored,
        _ => return None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawAnnotation {
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
}

impl RawAnnotation {
    fn as_box(&self, class_id: usize) -> Result<BBox> {
        let [x1, y1, x2, y2] = self.bbox;
        BBox::new(x1, y1, x2, y2, class_id)
    }
}

/// Cost of attaching a rider to a two-wheeler: `1 - IoU`, or infeasible
/// when the boxes do not touch and their centers are far apart.
pub fn pairing_cost(rider: &BBox, vehicle: &BBox) -> f64 {
    let overlap = iou(rider, vehicle) as f64;
    if overlap == 0.0 {
        let (rx, ry) = rider.center();
        let (vx, vy) = vehicle.center();
        let dist = (rx - vx).hypot(ry - vy);
        if dist > 1.5 * rider.diagonal().max(vehicle.diagonal()) {
            return INFEASIBLE;
        }
    }
    1.0 - overlap
}

/// Merges riders into their scooter/bicycle boxes.
///
/// Output order: merged pairs (by rider index), unmatched vehicles, then
/// unmatched riders relabelled as pedestrians.
pub fn pair_riders(riders: &[RawAnnotation], vehicles: &[RawAnnotation]) -> Result<Vec<BBox>> {
    let rider_boxes = riders
        .iter()
        .map(|r| r.as_box(DetClass::Pedestrian.id()))
        .collect::<Result<Vec<_>>>()?;
    let vehicle_boxes = vehicles
        .iter()
        .map(|v| match map_category(&v.category) {
            Some(SourceCategory::Object(c @ (DetClass::Scooter | DetClass::Bicycle))) => v.as_box(c.id()),
            _ => Err(Error::Argument(format!(
                "`{}` is not a two-wheeler category",
                v.category
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    let cost: Vec<Vec<f64>> = rider_boxes
        .iter()
        .map(|r| vehicle_boxes.iter().map(|v| pairing_cost(r, v)).collect())
        .collect();
    let assignment = if rider_boxes.is_empty() || vehicle_boxes.is_empty() {
        AssignmentResult {
            pairs: vec![],
            unmatched_rows: (0..rider_boxes.len()).collect(),
            unmatched_cols: (0..vehicle_boxes.len()).collect(),
            total_cost: 0.0,
        }
    } else {
        hungarian(&cost)
    };
    let mut out = Vec::with_capacity(riders.len() + vehicles.len());
    for &(r, v) in &assignment.pairs {
        let vb = &vehicle_boxes[v];
        out.push(rider_boxes[r].union_box(vb, vb.class_id));
    }
    out.extend(assignment.unmatched_cols.iter().map(|&v| vehicle_boxes[v]));
    out.extend(assignment.unmatched_rows.iter().map(|&r| rider_boxes[r]));
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrivableClass {
    MainLane,
    AlternativeLane,
}

impl DrivableClass {
    pub fn label(self) -> u8 {
        match self {
            DrivableClass::MainLane => labels::MAIN_LANE,
            DrivableClass::AlternativeLane => labels::ALTERNATIVE_LANE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneClass {
    SingleLine,
    DoubleLine,
    DashedLine,
}

impl LaneClass {
    pub fn label(self) -> u8 {
        match self {
            LaneClass::SingleLine => labels::SINGLE_LINE,
            LaneClass::DoubleLine => labels::DOUBLE_LINE,
            LaneClass::DashedLine => labels::DASHED_LINE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrivableRegion {
    pub category: DrivableClass,
    pub polygon: Vec<[f32; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanePolyline {
    pub category: LaneClass,
    pub polyline: Vec<[f32; 2]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    #[serde(default)]
    pub drivable: Vec<DrivableRegion>,
    #[serde(default)]
    pub lanes: Vec<LanePolyline>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rasterized {
    pub drivable: SegMask,
    pub lane: SegMask,
    /// Degenerate shapes that were skipped.
    pub skipped: usize,
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(px: f32, py: f32, poly: &[[f32; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let [xi, yi] = poly[i];
        let [xj, yj] = poly[j];
        if (yi > py) != (yj > py) {
            let x_cross = (xj - xi) * (py - yi) / (yj - yi) + xi;
            if px < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Distance from a point to the segment `a–b`.
pub fn point_segment_distance(px: f32, py: f32, a: [f32; 2], b: [f32; 2]) -> f32 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a[0]) * dx + (py - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (px - (a[0] + t * dx)).hypot(py - (a[1] + t * dy))
}

fn polyline_length(points: &[[f32; 2]]) -> f32 {
    points
        .windows(2)
        .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
        .sum()
}

fn polygon_area(poly: &[[f32; 2]]) -> f32 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let [x0, y0] = poly[i];
            let [x1, y1] = poly[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum::<f32>()
        .abs()
        * 0.5
}

/// Paints a polyline of the given stroke width into `mask` (pixel centers
/// within `stroke / 2` of the line get `label`). Returns false if skipped.
pub fn draw_polyline(mask: &mut SegMask, points: &[[f32; 2]], stroke: f32, label: u8) -> bool {
    if points.len() < 2 || polyline_length(points) <= 0.0 {
        return false;
    }
    let r = stroke * 0.5;
    let (h, w) = (mask.height, mask.width);
    for seg in points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let x_lo = (a[0].min(b[0]) - r - 1.0).floor().max(0.0) as usize;
        let x_hi = ((a[0].max(b[0]) + r + 1.0).ceil().max(0.0) as usize).min(w);
        let y_lo = (a[1].min(b[1]) - r - 1.0).floor().max(0.0) as usize;
        let y_hi = ((a[1].max(b[1]) + r + 1.0).ceil().max(0.0) as usize).min(h);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                if point_segment_distance(x as f32 + 0.5, y as f32 + 0.5, a, b) <= r {
                    mask.set(y, x, label);
                }
            }
        }
    }
    true
}

/// Fills a polygon (pixel-center sampling). Returns false if skipped.
pub fn fill_polygon(mask: &mut SegMask, poly: &[[f32; 2]], label: u8) -> bool {
    if poly.len() < 3 || polygon_area(poly) <= 0.0 {
        return false;
    }
    let x_lo = poly.iter().map(|p| p[0]).fold(f32::INFINITY, f32::min).floor().max(0.0) as usize;
    let x_hi = (poly.iter().map(|p| p[0]).fold(f32::NEG_INFINITY, f32::max).ceil().max(0.0) as usize)
        .min(mask.width);
    let y_lo = poly.iter().map(|p| p[1]).fold(f32::INFINITY, f32::min).floor().max(0.0) as usize;
    let y_hi = (poly.iter().map(|p| p[1]).fold(f32::NEG_INFINITY, f32::max).ceil().max(0.0) as usize)
        .min(mask.height);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            if point_in_polygon(x as f32 + 0.5, y as f32 + 0.5, poly) {
                mask.set(y, x, label);
            }
        }
    }
    true
}

/// Rasterizes drivable polygons and lane polylines into the two label maps.
/// Later shapes overwrite earlier ones within a mask; the two masks are
/// independent, so a lane stroke over drivable area keeps both labels.
pub fn rasterize_masks(geometry: &Geometry, height: usize, width: usize, stroke: f32) -> Rasterized {
    let mut drivable = SegMask::background(height, width, Palette::Drivable);
    let mut lane = SegMask::background(height, width, Palette::Lane);
    let mut skipped = 0;
    for region in &geometry.drivable {
        if !fill_polygon(&mut drivable, &region.polygon, region.category.label()) {
            skipped += 1;
        }
    }
    for line in &geometry.lanes {
        if !draw_polyline(&mut lane, &line.polyline, stroke, line.category.label()) {
            skipped += 1;
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} degenerate shape(s) while rasterizing");
    }
    Rasterized {
        drivable,
        lane,
        skipped,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceImage {
    pub id: String,
    pub image_path: PathBuf,
    #[serde(default)]
    pub objects: Vec<RawAnnotation>,
    #[serde(flatten)]
    pub geometry: Geometry,
}

/// Source annotation document consumed by [`prepare_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceDocument {
    pub images: Vec<SourceImage>,
}

/// Regenerated labels for a single source image.
pub fn prepare_image(src: &SourceImage, height: usize, width: usize, stroke: f32) -> Result<(Vec<BBox>, Rasterized)> {
    let mut riders = Vec::new();
    let mut two_wheelers = Vec::new();
    let mut boxes = Vec::new();
    for obj in &src.objects {
        let bad = |reason: String| Error::Manifest {
            id: src.id.clone(),
            reason,
        };
        match map_category(&obj.category) {
            Some(SourceCategory::Rider) => riders.push(obj.clone()),
            Some(SourceCategory::Object(DetClass::Scooter | DetClass::Bicycle)) => two_wheelers.push(obj.clone()),
            Some(SourceCategory::Object(c)) => boxes.push(obj.as_box(c.id()).map_err(|e| bad(e.to_string()))?),
            Some(SourceCategory::Ignored) => {}
            None => return Err(bad(format!("unknown category `{}`", obj.category))),
        }
    }
    let paired = pair_riders(&riders, &two_wheelers).map_err(|e| Error::Manifest {
        id: src.id.clone(),
        reason: e.to_string(),
    })?;
    boxes.extend(paired);
    let boxes = boxes
        .into_iter()
        .filter_map(|b| b.clamp(width as f32, height as f32))
        .collect();
    Ok((boxes, rasterize_masks(&src.geometry, height, width, stroke)))
}

/// Regenerates labels for every image of a source document, writes the
/// label images under `out_dir/masks` and returns the manifest path.
pub fn prepare_dataset(source: &Path, out_dir: &Path, stroke: f32) -> Result<PathBuf> {
    let text = std::fs::read_to_string(source).map_err(|e| Error::io(source, e))?;
    let doc: SourceDocument = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: source.to_path_buf(),
        reason: e.to_string(),
    })?;
    let src_dir = source.parent().map(Path::to_path_buf).unwrap_or_default();
    let mask_dir = out_dir.join("masks");
    std::fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    let mut entries = Vec::with_capacity(doc.images.len());
    for img in &doc.images {
        let image_path = if img.image_path.is_absolute() {
            img.image_path.clone()
        } else {
            src_dir.join(&img.image_path)
        };
        let image_path = std::fs::canonicalize(&image_path).map_err(|e| Error::io(&image_path, e))?;
        let rgb = data::read_rgb_png(&image_path)?;
        let (boxes, raster) = prepare_image(img, rgb.height, rgb.width, stroke)?;
        let da = PathBuf::from("masks").join(format!("{}_drivable.png", img.id));
        let ll = PathBuf::from("masks").join(format!("{}_lane.png", img.id));
        data::write_label_png(&out_dir.join(&da), &raster.drivable)?;
        data::write_label_png(&out_dir.join(&ll), &raster.lane)?;
        entries.push(ManifestEntry {
            id: img.id.clone(),
            image_path,
            boxes,
            drivable_mask_path: da,
            lane_mask_path: ll,
        });
    }
    let manifest = out_dir.join("manifest.json");
    data::write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(cat: &str, b: [f32; 4]) -> RawAnnotation {
        RawAnnotation {
            category: cat.into(),
            bbox: b,
        }
    }

    #[test]
    fn hungarian_small_cases() {
        let r = hungarian(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(r.total_cost, 2.0);

        let r = hungarian(&[vec![5.0]]);
        assert_eq!(r.pairs, vec![(0, 0)]);
        assert_eq!(r.total_cost, 5.0);

        let r = hungarian(&[vec![INFEASIBLE, 3.0]]);
        assert_eq!(r.pairs, vec![(0, 1)]);
        assert_eq!(r.unmatched_cols, vec![0]);
        assert!(r.unmatched_rows.is_empty());
    }

    #[test]
    fn hungarian_empty_and_all_infeasible() {
        let r = hungarian(&[]);
        assert!(r.pairs.is_empty());
        assert_eq!(r.total_cost, 0.0);
        let r = hungarian(&[vec![INFEASIBLE], vec![INFEASIBLE]]);
        assert!(r.pairs.is_empty());
        assert_eq!(r.unmatched_rows, vec![0, 1]);
        assert_eq!(r.unmatched_cols, vec![0]);
    }

    #[test]
    fn hungarian_tall_matrix() {
        // 3 rows, 2 columns: the best pair set is (1,0), (2,1)
        let r = hungarian(&[vec![9.0, 9.0], vec![1.0, 8.0], vec![7.0, 2.0]]);
        assert_eq!(r.pairs, vec![(1, 0), (2, 1)]);
        assert_eq!(r.unmatched_rows, vec![0]);
        assert_eq!(r.total_cost, 3.0);
    }

    #[test]
    fn rider_on_bicycle_becomes_one_enclosing_box() {
        let riders = [raw("rider", [10.0, 0.0, 20.0, 20.0])];
        let bikes = [raw("bicycle", [8.0, 10.0, 24.0, 26.0])];
        let out = pair_riders(&riders, &bikes).unwrap();
        assert_eq!(out.len(), 1);
        let b = out[0];
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (8.0, 0.0, 24.0, 26.0));
        assert_eq!(b.class_id, DetClass::Bicycle.id());
    }

    #[test]
    fn lone_scooter_passes_through_and_lone_rider_is_pedestrian() {
        let out = pair_riders(&[], &[raw("motorcycle", [0.0, 0.0, 5.0, 5.0])]).unwrap();
        assert_eq!(out, vec![BBox::new(0.0, 0.0, 5.0, 5.0, DetClass::Scooter.id()).unwrap()]);
        // far apart: infeasible pair, both survive separately
        let out = pair_riders(
            &[raw("rider", [0.0, 0.0, 4.0, 8.0])],
            &[raw("bicycle", [100.0, 100.0, 104.0, 104.0])],
        )
        .unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].class_id, DetClass::Bicycle.id());
        assert_eq!(out[1].class_id, DetClass::Pedestrian.id());
    }

    #[test]
    fn non_two_wheeler_vehicle_rejected() {
        assert!(pair_riders(&[], &[raw("car", [0.0, 0.0, 5.0, 5.0])]).is_err());
    }

    #[test]
    fn rasterize_empty_rectangle_and_stroke() {
        let r = rasterize_masks(&Geometry::default(), 8, 8, 3.0);
        assert!(r.drivable.labels.iter().all(|&l| l == 0));
        assert!(r.lane.labels.iter().all(|&l| l == 0));

        let g = Geometry {
            drivable: vec![DrivableRegion {
                category: DrivableClass::MainLane,
                polygon: vec![[2.0, 1.0], [6.0, 1.0], [6.0, 4.0], [2.0, 4.0]],
            }],
            lanes: vec![],
        };
        let r = rasterize_masks(&g, 8, 8, 3.0);
        for y in 0..8 {
            for x in 0..8 {
                let inside = (2..6).contains(&x) && (1..4).contains(&y);
                assert_eq!(r.drivable.get(y, x), inside as u8, "({y},{x})");
            }
        }

        // horizontal line through pixel centers at row 10, stroke 3:
        // rows 9..=11, columns 19..=61 with round caps
        let g = Geometry {
            drivable: vec![],
            lanes: vec![LanePolyline {
                category: LaneClass::SingleLine,
                polyline: vec![[20.5, 10.5], [60.5, 10.5]],
            }],
        };
        let r = rasterize_masks(&g, 24, 80, 3.0);
        assert_eq!(r.lane.count(labels::SINGLE_LINE), 3 * 43);
        for y in 0..24 {
            let row_hits = (0..80).filter(|&x| r.lane.get(y, x) != 0).count();
            assert_eq!(row_hits, if (9..=11).contains(&y) { 43 } else { 0 });
        }
    }

    #[test]
    fn degenerate_polyline_is_skipped_and_counted() {
        let g = Geometry {
            drivable: vec![],
            lanes: vec![LanePolyline {
                category: LaneClass::DashedLine,
                polyline: vec![[3.0, 3.0], [3.0, 3.0]],
            }],
        };
        let r = rasterize_masks(&g, 8, 8, 3.0);
        assert_eq!(r.skipped, 1);
        assert_eq!(r.lane.count(0), 64);
    }
}
