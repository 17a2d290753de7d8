//! Per-instance regression targets, positive-cell allocation and the
//! refinement sample builder.

use serde::{Deserialize, Serialize};

use super::losses::{bce_loss, giou_loss, smooth_l1};
use crate::config::LossWeights;
use crate::error::Result;
use crate::geometry::{
    box_perimeter_sample, densify_for_targets, match_to_ground_truth, nearest_l1_assignment, BBox, Contour, Point2, Polygon,
};
use crate::model::{Detection, InitMaps};

/// Everything training needs about one ground-truth instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTarget {
    pub polygon: Polygon,
    pub bbox: BBox,
    /// Box perimeter samples, clockwise from the top-left corner.
    pub box_samples: Vec<Point2>,
    /// Nearest densified-boundary point to each box sample.
    pub init_contour: Contour,
    /// `init_contour - box_samples` divided by the stride, flattened
    /// `(dx0, dy0, dx1, ...)`.
    pub offset_target: Vec<f64>,
    /// Equal arc-length resampling of the polygon, the refinement target.
    pub final_contour: Contour,
}

pub fn instance_targets(polygons: &[Polygon], n_a: usize, stride: f64) -> Result<Vec<InstanceTarget>> {
    polygons
        .iter()
        .map(|poly| {
            let bbox = poly.bbox()?;
            let box_samples = box_perimeter_sample(&bbox, n_a)?;
            let dense = densify_for_targets(poly)?;
            let init_contour = nearest_l1_assignment(&box_samples, &dense)?;
            let offset_target = init_contour
                .vertices()
                .iter()
                .zip(&box_samples)
                .flat_map(|(c, s)| [(c.x - s.x) / stride, (c.y - s.y) / stride])
                .collect();
            Ok(InstanceTarget {
                final_contour: uniform_contour(poly, n_a)?,
                polygon: poly.clone(),
                bbox,
                box_samples,
                init_contour,
                offset_target,
            })
        })
        .collect()
}

/// `n` boundary points at equal arc length, clockwise, starting at the
/// boundary point closest to the top-left corner of the bounding box.
pub fn uniform_contour(poly: &Polygon, n: usize) -> Result<Contour> {
    let pts = poly.points();
    let m = pts.len();
    let b = poly.bbox()?;
    let corner = Point2::new(b.x_min, b.y_min);
    let mut cum = Vec::with_capacity(m + 1);
    cum.push(0.0);
    let (mut best_d, mut start) = (f64::INFINITY, 0.0);
    for i in 0..m {
        let (a, c) = (pts[i], pts[(i + 1) % m]);
        let len = a.dist(&c);
        let t = if len > 0.0 {
            (((corner.x - a.x) * (c.x - a.x) + (corner.y - a.y) * (c.y - a.y)) / (len * len)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let d = a.lerp(&c, t).dist(&corner);
        if d < best_d {
            best_d = d;
            start = cum[i] + t * len;
        }
        cum.push(cum[i] + len);
    }
    let total = cum[m];
    let mut out = Vec::with_capacity(n);
    let mut edge = 0;
    for k in 0..n {
        let s = (start + total * k as f64 / n as f64) % total;
        while !(cum[edge] <= s && s <= cum[edge + 1]) {
            edge = (edge + 1) % m;
        }
        let len = cum[edge + 1] - cum[edge];
        let t = if len > 0.0 { (s - cum[edge]) / len } else { 0.0 };
        out.push(pts[edge].lerp(&pts[(edge + 1) % m], t));
    }
    Ok(Contour::new(out)?)
}

/// Training cost of making `cell` the positive of `target`.
pub fn allocation_cost(maps: &InitMaps, cell: usize, target: &InstanceTarget, weights: &LossWeights) -> f64 {
    let cls = bce_loss(maps.logit(cell), 1.0);
    let bbox = giou_loss(&maps.box_at(cell), &target.bbox);
    let off = smooth_l1(&maps.offsets_at(cell), &target.offset_target);
    cls + weights.lambda1 * bbox + weights.lambda2 * off
}

/// One positive cell per instance: the minimum-cost cell among those whose
/// centers lie inside the instance box and are not already taken by an
/// earlier instance; ties go to the lower row-major index. An instance
/// without such a cell gets the free cell nearest its box center.
pub fn allocate_positive(targets: &[InstanceTarget], maps: &InitMaps, weights: &LossWeights) -> Vec<usize> {
    let mut taken = vec![false; maps.cells()];
    let mut out = Vec::with_capacity(targets.len());
    for (k, t) in targets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for cell in 0..maps.cells() {
            if taken[cell] || !t.bbox.contains(maps.cell_center(cell)) {
                continue;
            }
            let cost = allocation_cost(maps, cell, t, weights);
            if best.map_or(true, |(_, b)| cost < b) {
                best = Some((cell, cost));
            }
        }
        let cell = match best {
            Some((c, _)) => c,
            None => {
                let c = t.bbox.center();
                let nearest = (0..maps.cells())
                    .filter(|&i| !taken[i])
                    .min_by(|&a, &b| {
                        let da = maps.cell_center(a).dist(&c);
                        let db = maps.cell_center(b).dist(&c);
                        da.total_cmp(&db).then(a.cmp(&b))
                    })
                    .expect("more cells than instances");
                log::warn!("instance {k}: no cell center inside its box, using nearest cell {nearest}");
                nearest
            }
        };
        taken[cell] = true;
        out.push(cell);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    GroundTruth,
    Predicted,
}

/// One input contour for a refinement module with its supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementSample {
    pub source: SampleSource,
    pub contour: Contour,
    /// Absent for false positives.
    pub regression_target: Option<Contour>,
    pub score_label: f64,
}

/// One ground-truth-sourced sample per instance, then one predicted-sourced
/// sample per detection labeled with its matched box IoU.
pub fn build_refinement_batch(preds: &[Detection], targets: &[InstanceTarget]) -> Vec<RefinementSample> {
    let mut out: Vec<RefinementSample> = targets
        .iter()
        .map(|t| RefinementSample {
            source: SampleSource::GroundTruth,
            contour: t.init_contour.clone(),
            regression_target: Some(t.final_contour.clone()),
            score_label: 1.0,
        })
        .collect();
    let boxes: Vec<BBox> = targets.iter().map(|t| t.bbox).collect();
    for d in preds {
        let m = match_to_ground_truth(&d.bbox, &boxes);
        let regression_target = match (m.is_false_positive, m.gt_index) {
            (false, Some(g)) => Some(targets[g].final_contour.clone()),
            _ => None,
        };
        out.push(RefinementSample {
            source: SampleSource::Predicted,
            contour: d.contour.clone(),
            regression_target,
            score_label: m.best_iou,
        });
    }
    out
}
