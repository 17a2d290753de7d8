//! The composite loss of one training step.

use serde::{Deserialize, Serialize};

use super::targets::{allocate_positive, build_refinement_batch, InstanceTarget, RefinementSample};
use crate::autodiff::{Tape, Tensor, Var};
use crate::config::{LossWeights, TrainConfig};
use crate::error::Result;
use crate::geometry::{cyclic_alignment, Contour, Point2};
use crate::model::{decode_initial_contours, refine, Detection, FeatureMap, Fwd, InitHeadOutput, InitMaps, Model};

/// Values of every loss term. The three composite fields are computed from
/// the five base terms, so the identities hold exactly.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_box: f64,
    pub l_off1: f64,
    pub l_off2: f64,
    pub l_rescore: f64,
    pub l_init: f64,
    pub l_transform: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(l_cls: f64, l_box: f64, l_off1: f64, l_off2: f64, l_rescore: f64, w: &LossWeights) -> Self {
        let l_init = l_cls + w.lambda1 * l_box + w.lambda2 * l_off1;
        let l_transform = w.lambda3 * l_off2 + w.lambda4 * l_rescore;
        Self {
            l_cls,
            l_box,
            l_off1,
            l_off2,
            l_rescore,
            l_init,
            l_transform,
            total: l_init + l_transform,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_cls, self.l_box, self.l_off1, self.l_off2, self.l_rescore, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// The five base terms as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub cls: Var,
    pub bbox: Var,
    pub off1: Var,
    pub off2: Var,
    pub rescore: Var,
}

impl LossTerms {
    /// Builds `total` on the tape in the same order as
    /// [`LossBreakdown::from_terms`].
    pub fn combine(&self, f: &mut Fwd, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
        let t = &mut f.tape;
        let b = t.scale(self.bbox, w.lambda1);
        let o1 = t.scale(self.off1, w.lambda2);
        let init = t.add(self.cls, b)?;
        let init = t.add(init, o1)?;
        let o2 = t.scale(self.off2, w.lambda3);
        let r = t.scale(self.rescore, w.lambda4);
        let transform = t.add(o2, r)?;
        let total = t.add(init, transform)?;
        let v = |x: Var| t.value(x).item();
        let bd = LossBreakdown::from_terms(v(self.cls), v(self.bbox), v(self.off1), v(self.off2), v(self.rescore), w);
        Ok((total, bd))
    }
}

/// Discrete choices made during a step. Replaying a plan makes the loss a
/// smooth function of the parameters, which finite differences need.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub positives: Vec<usize>,
    pub stages: Vec<StagePlan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub samples: Vec<RefinementSample>,
    /// Cyclic shift per sample with a regression target, in sample order.
    pub shifts: Vec<usize>,
}

/// Cell-index views of the init maps for the positive cells.
fn gather_cells(t: &mut Tape, map: Var, cells: &[usize]) -> Result<Var> {
    let shape = t.shape(map).to_vec();
    let (c, n) = (shape[0], shape[1] * shape[2]);
    let flat = t.reshape(map, &[c, n])?;
    let rows = t.transpose(flat)?;
    Ok(t.gather_rows(rows, cells)?)
}

fn zero(t: &mut Tape) -> Var {
    t.constant(Tensor::scalar(0.0))
}

const CLS_ALPHA: f64 = 0.25;
const CLS_GAMMA: f64 = 2.0;

/// Classification over all cells, GIoU and offset regression at positives.
pub fn init_loss(t: &mut Tape, head: &InitHeadOutput, maps: &InitMaps, targets: &[InstanceTarget], positives: &[usize]) -> Result<(Var, Var, Var)> {
    let mut labels = vec![0.0; maps.cells()];
    for &c in positives {
        labels[c] = 1.0;
    }
    // Focal form (gamma 2, alpha 0.25) normalized by the positive count. A
    // plain mean over cells lets the ~1000 easy negatives drown the one
    // positive per instance.
    let k = positives.len().max(1) as f64;
    let weights: Vec<f64> = labels.iter().map(|&l| if l > 0.0 { CLS_ALPHA / k } else { (1.0 - CLS_ALPHA) / k }).collect();
    let focal = t.quality_focal(head.cls, &labels, CLS_GAMMA)?;
    let shape = t.shape(focal).to_vec();
    let weights = t.constant(Tensor::new(shape, weights)?);
    let weighted = t.mul(focal, weights)?;
    let cls = t.sum(weighted);
    if positives.is_empty() {
        return Ok((cls, zero(t), zero(t)));
    }
    let k = positives.len();
    let s = maps.stride;
    let dist = gather_cells(t, head.boxes, positives)?;
    let signs = t.constant(Tensor::vector(vec![-s, -s, s, s]));
    let spans = t.mul(dist, signs)?;
    let mut centers = Vec::with_capacity(4 * k);
    for &c in positives {
        let p = maps.cell_center(c);
        centers.extend([p.x, p.y, p.x, p.y]);
    }
    let centers = t.constant(Tensor::new(vec![k, 4], centers)?);
    let boxes = t.add(spans, centers)?;
    let gt: Vec<f64> = targets.iter().flat_map(|g| [g.bbox.x_min, g.bbox.y_min, g.bbox.x_max, g.bbox.y_max]).collect();
    let giou = t.giou_loss(boxes, &Tensor::new(vec![k, 4], gt)?)?;
    let bbox = t.mean(giou);

    let off = gather_cells(t, head.offsets, positives)?;
    let width = t.shape(off)[1];
    let tgt: Vec<f64> = targets.iter().flat_map(|g| g.offset_target.iter().copied()).collect();
    let sl1 = t.smooth_l1(off, &Tensor::new(vec![k, width], tgt)?)?;
    let off1 = t.mean(sl1);
    Ok((cls, bbox, off1))
}

/// Refined contours in grid units, `[B, N_a, 2]`.
fn refined_grid(t: &mut Tape, offsets: Var, samples: &[RefinementSample], stride: f64) -> Result<Var> {
    let n_a = samples[0].contour.len();
    let base: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.contour.vertices().iter().flat_map(|p| [p.x / stride, p.y / stride]))
        .collect();
    let base = t.constant(Tensor::new(vec![samples.len(), n_a, 2], base)?);
    Ok(t.add(offsets, base)?)
}

/// Cyclic smooth-L1 against each target (summed over vertices, averaged
/// over samples with a target) and mean quality focal loss over all
/// samples. Shifts come from `shifts` when given, else from the current
/// values. Returns the two terms and the shifts used.
#[allow(clippy::too_many_arguments)]
pub fn transform_loss(
    t: &mut Tape,
    offsets: Var,
    score_logits: Var,
    samples: &[RefinementSample],
    stride: f64,
    rescore: bool,
    qfl_beta: f64,
    shifts: Option<&[usize]>,
) -> Result<(Var, Var, Vec<usize>)> {
    let n_a = samples[0].contour.len();
    let refined = refined_grid(t, offsets, samples, stride)?;
    let rows: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].regression_target.is_some()).collect();
    let mut used = Vec::with_capacity(rows.len());
    let off2 = if rows.is_empty() {
        zero(t)
    } else {
        let vals = t.value(refined).data().to_vec();
        let mut target = Vec::with_capacity(rows.len() * 2 * n_a);
        for (k, &i) in rows.iter().enumerate() {
            let gt = samples[i].regression_target.as_ref().expect("filtered");
            let gt_grid: Vec<Point2> = gt.vertices().iter().map(|p| Point2::new(p.x / stride, p.y / stride)).collect();
            let u = match shifts {
                Some(s) => s[k],
                None => {
                    let pred: Vec<Point2> = (0..n_a)
                        .map(|j| Point2::new(vals[(i * n_a + j) * 2], vals[(i * n_a + j) * 2 + 1]))
                        .collect();
                    cyclic_alignment(&Contour::new(pred)?, &Contour::new(gt_grid.clone())?)?.0
                }
            };
            used.push(u);
            for j in 0..n_a {
                let q = gt_grid[(u + j) % n_a];
                target.extend([q.x, q.y]);
            }
        }
        let flat = t.reshape(refined, &[samples.len(), 2 * n_a])?;
        let picked = t.gather_rows(flat, &rows)?;
        let sl1 = t.smooth_l1(picked, &Tensor::new(vec![rows.len(), 2 * n_a], target)?)?;
        let sum = t.sum(sl1);
        t.scale(sum, 1.0 / rows.len() as f64)
    };
    let rescore_term = if rescore {
        let labels: Vec<f64> = samples.iter().map(|s| s.score_label).collect();
        let q = t.quality_focal(score_logits, &labels, qfl_beta)?;
        t.mean(q)
    } else {
        zero(t)
    };
    Ok((off2, rescore_term, used))
}

/// Full forward of one scene to its five loss terms. With `plan` the
/// recorded choices are replayed; the plan actually used is returned.
pub fn scene_loss(
    model: &Model,
    f: &mut Fwd,
    raster: &Tensor,
    targets: &[InstanceTarget],
    weights: &LossWeights,
    train: &TrainConfig,
    plan: Option<&StepPlan>,
) -> Result<(LossTerms, StepPlan)> {
    let fm: FeatureMap = model.backbone_forward(f, raster)?;
    let head = model.init_head_forward(f, &fm)?;
    let maps = InitMaps::from_tape(&f.tape, &head, fm.stride);
    let positives = match plan {
        Some(p) => p.positives.clone(),
        None => allocate_positive(targets, &maps, weights),
    };
    let (cls, bbox, off1) = init_loss(&mut f.tape, &head, &maps, targets, &positives)?;

    let cfg = &model.config;
    let mut off2_terms = Vec::new();
    let mut rescore_terms = Vec::new();
    let mut stage_plans = Vec::with_capacity(cfg.stages);
    let mut preds: Vec<Detection> = if train.adaptive {
        decode_initial_contours(&maps, cfg.tau_a, train.max_pred_samples)
    } else {
        Vec::new()
    };
    for stage in 0..cfg.stages {
        let (samples, given_shifts) = match plan {
            Some(p) => (p.stages[stage].samples.clone(), Some(p.stages[stage].shifts.as_slice())),
            None => (build_refinement_batch(&preds, targets), None),
        };
        if samples.is_empty() {
            stage_plans.push(StagePlan { samples, shifts: Vec::new() });
            continue;
        }
        let contours: Vec<Contour> = samples.iter().map(|s| s.contour.clone()).collect();
        let out = model.contour_transformer_forward(f, &fm, &contours, stage)?;
        let (off2, rescore, shifts) =
            transform_loss(&mut f.tape, out.offsets, out.score_logits, &samples, fm.stride, cfg.rescore, train.qfl_beta, given_shifts)?;
        off2_terms.push(off2);
        rescore_terms.push(rescore);

        if plan.is_none() && train.adaptive {
            let n_gt = targets.len();
            let per = 2 * cfg.num_vertices;
            let offs = f.tape.value(out.offsets).data().to_vec();
            let logits = f.tape.value(out.score_logits).data().to_vec();
            let mut next = Vec::with_capacity(preds.len());
            for (k, d) in preds.iter().enumerate() {
                let i = n_gt + k;
                next.push(refine(d, &offs[i * per..(i + 1) * per], logits[i], fm.stride)?);
            }
            preds = next;
        }
        stage_plans.push(StagePlan { samples, shifts });
    }
    let off2 = sum_vars(f, &off2_terms);
    let rescore = sum_vars(f, &rescore_terms);
    Ok((
        LossTerms { cls, bbox, off1, off2, rescore },
        StepPlan {
            positives,
            stages: stage_plans,
        },
    ))
}

fn sum_vars(f: &mut Fwd, vars: &[Var]) -> Var {
    let mut it = vars.iter();
    let Some(&first) = it.next() else {
        return zero(&mut f.tape);
    };
    it.fold(first, |acc, &v| f.tape.add(acc, v).expect("scalar add"))
}

/// Mean of each base term over the scenes of a batch.
pub fn batch_terms(f: &mut Fwd, per_scene: &[LossTerms]) -> LossTerms {
    let n = per_scene.len() as f64;
    let mut mean = |pick: fn(&LossTerms) -> Var| {
        let vars: Vec<Var> = per_scene.iter().map(pick).collect();
        let s = sum_vars(f, &vars);
        if per_scene.len() == 1 {
            s
        } else {
            f.tape.scale(s, 1.0 / n)
        }
    };
    LossTerms {
        cls: mean(|t| t.cls),
        bbox: mean(|t| t.bbox),
        off1: mean(|t| t.off1),
        off2: mean(|t| t.off2),
        rescore: mean(|t| t.rescore),
    }
}
