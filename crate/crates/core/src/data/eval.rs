use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::scene::Scene;
use crate::error::{Error, Result};
use crate::geometry::{polygon_iou_lenient, Polygon};
use crate::model::{Detection, Model};

/// Polygon IoU needed for a detection to count as a true positive.
pub const MATCH_IOU: f64 = 0.5;
/// Timed calls per harness run, after warmup.
pub const MIN_TIMED_CALLS: usize = 20;
const WARMUP_CALLS: usize = 2;

/// Matching result of one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub detections: usize,
    pub ground_truths: usize,
    /// `(detection index, gt index, iou)` for every true positive.
    pub matches: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub true_positives: usize,
    pub detections: usize,
    pub ground_truths: usize,
    pub per_scene: Vec<SceneEval>,
    pub mean_seconds_per_scene: Option<f64>,
}

impl EvalReport {
    /// Pools counts over scenes before dividing.
    pub fn aggregate(per_scene: Vec<SceneEval>) -> Self {
        let tp: usize = per_scene.iter().map(|s| s.matches.len()).sum();
        let d: usize = per_scene.iter().map(|s| s.detections).sum();
        let g: usize = per_scene.iter().map(|s| s.ground_truths).sum();
        let precision = if d > 0 { tp as f64 / d as f64 } else { 0.0 };
        let recall = if g > 0 { tp as f64 / g as f64 } else { 0.0 };
        Self {
            precision,
            recall,
            f_measure: f_measure(precision, recall),
            true_positives: tp,
            detections: d,
            ground_truths: g,
            per_scene,
            mean_seconds_per_scene: None,
        }
    }
}

pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Greedy one-to-one matching: detections in descending score (lower index
/// first on ties) take the unmatched gt of highest IoU, if it reaches
/// `iou_thresh`. Equal-IoU gts go to the lower index.
pub fn evaluate_scene(dets: &[Detection], gts: &[Polygon], iou_thresh: f64) -> SceneEval {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut matches = Vec::new();
    for i in order {
        let ring = dets[i].contour.vertices();
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let iou = polygon_iou_lenient(ring, g.points());
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best {
            taken[j] = true;
            matches.push((i, j, iou));
        }
    }
    SceneEval {
        detections: dets.len(),
        ground_truths: gts.len(),
        matches,
    }
}

/// Single-scene report.
pub fn evaluate(dets: &[Detection], gts: &[Polygon], iou_thresh: f64) -> EvalReport {
    EvalReport::aggregate(vec![evaluate_scene(dets, gts, iou_thresh)])
}

/// Runs the model on every scene and pools the matches. Scenes are split
/// across `threads` workers; the result does not depend on the count.
pub fn evaluate_model(model: &Model, scenes: &[&Scene], stages: usize, threads: usize) -> Result<EvalReport> {
    let threads = threads.max(1).min(scenes.len().max(1));
    let chunk = scenes.len().div_ceil(threads).max(1);
    let parts: Vec<Result<Vec<SceneEval>>> = std::thread::scope(|s| {
        let handles: Vec<_> = scenes
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|sc| {
                            let out = model.infer(&sc.raster, stages)?;
                            Ok(evaluate_scene(&out.detections, &sc.polygons, MATCH_IOU))
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut per_scene = Vec::with_capacity(scenes.len());
    for p in parts {
        per_scene.extend(p?);
    }
    Ok(EvalReport::aggregate(per_scene))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub mean_seconds: f64,
    pub calls: usize,
}

/// Mean wall time of one full inference call (one scene per call), over at
/// least [`MIN_TIMED_CALLS`] calls cycling through `scenes`.
pub fn timing_harness(model: &Model, scenes: &[Scene], stages: usize) -> Result<TimingReport> {
    if scenes.is_empty() {
        return Err(Error::Data("timing needs at least one scene".into()));
    }
    for s in scenes.iter().cycle().take(WARMUP_CALLS) {
        model.infer(&s.raster, stages)?;
    }
    let calls = MIN_TIMED_CALLS.max(scenes.len());
    let start = Instant::now();
    for s in scenes.iter().cycle().take(calls) {
        model.infer(&s.raster, stages)?;
    }
    Ok(TimingReport {
        mean_seconds: start.elapsed().as_secs_f64() / calls as f64,
        calls,
    })
}
