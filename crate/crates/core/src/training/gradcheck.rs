//! Finite-difference checks of every loss term and of the full composite
//! loss with respect to model parameters.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::step::{init_loss, scene_loss, transform_loss, StepPlan};
use super::targets::{instance_targets, RefinementSample, SampleSource};
use crate::autodiff::gradcheck::{check_cases, Fault, GradCase, GradCheckResult, FD_STEP, FD_TOLERANCE, RELATIVE_FLOOR};
use crate::autodiff::{AutodiffError, ParamId, Tensor};
use crate::config::{LossWeights, ModelConfig, TrainConfig};
use crate::data::{generate_scene, SceneParams};
use crate::error::{Error, Result};
use crate::geometry::{Contour, Point2};
use crate::model::{Fwd, InitHeadOutput, InitMaps, Model};

fn to_autodiff(e: Error) -> AutodiffError {
    match e {
        Error::Autodiff(e) => e,
        other => AutodiffError::Invalid {
            op: "loss",
            msg: other.to_string(),
        },
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// A value in `[lo, hi)` at least `gap` away from every point in `avoid`.
fn away(rng: &mut ChaCha8Rng, lo: f64, hi: f64, avoid: &[f64], gap: f64) -> f64 {
    loop {
        let v = rng.gen_range(lo..hi);
        if avoid.iter().all(|a| (v - a).abs() > gap) {
            return v;
        }
    }
}

fn ring(rng: &mut ChaCha8Rng, n: usize, cx: f64, cy: f64, r: f64) -> Contour {
    let pts = (0..n)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let rr = r * rng.gen_range(0.8..1.2);
            Point2::new(cx + rr * a.cos(), cy + rr * a.sin())
        })
        .collect();
    Contour::new(pts).expect("finite ring")
}

fn smooth_l1_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = Tensor::new(vec![2, 6], uniform(&mut rng, 12, -2.0, 2.0)).expect("shape");
    let pred: Vec<f64> = target
        .data()
        .iter()
        .map(|t| t + away(&mut rng, -3.0, 3.0, &[-1.0, 1.0], 0.05))
        .collect();
    GradCase {
        inputs: vec![Tensor::new(vec![2, 6], pred).expect("shape")],
        forward: Box::new(move |t, v| {
            let l = t.smooth_l1(v[0], &target)?;
            Ok(t.mean(l))
        }),
    }
}

fn giou_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for _ in 0..3 {
        let (x, y) = (rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0));
        let (w, h) = (rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0));
        gt.extend([x, y, x + w, y + h]);
        let px = away(&mut rng, x - 2.0, x + 2.0, &[x, x + w], 0.05);
        let py = away(&mut rng, y - 2.0, y + 2.0, &[y, y + h], 0.05);
        let pw = away(&mut rng, 1.0, 3.0, &[x + w - px, x - px], 0.05);
        let ph = away(&mut rng, 1.0, 3.0, &[y + h - py, y - py], 0.05);
        pred.extend([px, py, px + pw, py + ph]);
    }
    let gt = Tensor::new(vec![3, 4], gt).expect("shape");
    GradCase {
        inputs: vec![Tensor::new(vec![3, 4], pred).expect("shape")],
        forward: Box::new(move |t, v| {
            let l = t.giou_loss(v[0], &gt)?;
            Ok(t.mean(l))
        }),
    }
}

fn bce_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<f64> = (0..8).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    GradCase {
        inputs: vec![Tensor::vector(uniform(&mut rng, 8, -4.0, 4.0))],
        forward: Box::new(move |t, v| {
            let l = t.bce_logits(v[0], &labels)?;
            Ok(t.mean(l))
        }),
    }
}

fn qfl_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = uniform(&mut rng, 8, 0.0, 1.0);
    GradCase {
        inputs: vec![Tensor::vector(uniform(&mut rng, 8, -4.0, 4.0))],
        forward: Box::new(move |t, v| {
            let l = t.quality_focal(v[0], &labels, 2.0)?;
            Ok(t.mean(l))
        }),
    }
}

/// Three samples of 8 vertices, one a false positive; shifts are found on
/// the unperturbed offsets and then held fixed.
fn off2_case(seed: u64, with_rescore: bool) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_a = 8;
    let stride = 4.0;
    let mut samples = Vec::new();
    for k in 0..3 {
        let c = ring(&mut rng, n_a, 20.0, 20.0, 8.0);
        let target = if k == 2 {
            None
        } else {
            Some(ring(&mut rng, n_a, 20.0, 20.0, 8.0).rotated(rng.gen_range(0..n_a)))
        };
        samples.push(RefinementSample {
            source: if k == 0 { SampleSource::GroundTruth } else { SampleSource::Predicted },
            contour: c,
            regression_target: target,
            score_label: if k == 0 { 1.0 } else { rng.gen_range(0.0..1.0) },
        });
    }
    let offsets = Tensor::new(vec![3, n_a, 2], uniform(&mut rng, 3 * n_a * 2, -0.5, 0.5)).expect("shape");
    let logits = Tensor::vector(uniform(&mut rng, 3, -2.0, 2.0));
    let shifts = {
        let mut t = crate::autodiff::Tape::new();
        let o = t.constant(offsets.clone());
        let l = t.constant(logits.clone());
        transform_loss(&mut t, o, l, &samples, stride, false, 2.0, None)
            .expect("transform loss")
            .2
    };
    let w = LossWeights::default();
    GradCase {
        inputs: vec![offsets, logits],
        forward: Box::new(move |t, v| {
            let (off2, rescore, _) = transform_loss(t, v[0], v[1], &samples, stride, with_rescore, 2.0, Some(&shifts)).map_err(to_autodiff)?;
            if !with_rescore {
                return Ok(off2);
            }
            let a = t.scale(off2, w.lambda3);
            let b = t.scale(rescore, w.lambda4);
            Ok(t.add(a, b)?)
        }),
    }
}

/// Init loss on hand-fed maps with one allocated cell per instance.
fn init_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, n_a, stride) = (6, 6, 8, 4.0);
    let poly = ring(&mut rng, 10, 12.0, 12.0, 6.0).to_polygon().expect("ring polygon");
    let targets = instance_targets(&[poly], n_a, stride).expect("targets");
    let cell = 2 * w + 3;
    let cls = Tensor::new(vec![1, h, w], uniform(&mut rng, h * w, -3.0, 1.0)).expect("shape");
    let raw = Tensor::new(vec![4, h, w], uniform(&mut rng, 4 * h * w, 0.0, 1.2)).expect("shape");
    let off = Tensor::new(vec![2 * n_a, h, w], uniform(&mut rng, 2 * n_a * h * w, -0.8, 0.8)).expect("shape");
    GradCase {
        inputs: vec![cls, raw, off],
        forward: Box::new(move |t, v| {
            let boxes = t.exp(v[1]);
            let head = InitHeadOutput {
                cls: v[0],
                boxes,
                offsets: v[2],
            };
            let maps = InitMaps::from_tape(t, &head, stride);
            let (a, b, c) = init_loss(t, &head, &maps, &targets, &[cell]).map_err(to_autodiff)?;
            let ab = t.add(a, b)?;
            Ok(t.add(ab, c)?)
        }),
    }
}

/// Checks of each loss term on `trials` random cases.
pub fn loss_suite(seed: u64, trials: usize, fault: Fault) -> Result<Vec<GradCheckResult>> {
    let s = |t: usize, k: u64| seed.wrapping_mul(1_000_003).wrapping_add(k * 10_007 + t as u64);
    Ok(vec![
        check_cases("loss.smooth_l1", trials, fault, |t| smooth_l1_case(s(t, 1)))?,
        check_cases("loss.giou", trials, fault, |t| giou_case(s(t, 2)))?,
        check_cases("loss.bce", trials, fault, |t| bce_case(s(t, 3)))?,
        check_cases("loss.qfl", trials, fault, |t| qfl_case(s(t, 4)))?,
        check_cases("loss.init", trials, fault, |t| init_case(s(t, 5)))?,
        check_cases("loss.off2_cyclic", trials, fault, |t| off2_case(s(t, 6), false))?,
        check_cases("loss.transform", trials, fault, |t| off2_case(s(t, 7), true))?,
    ])
}

/// Small model and scene whose forward exercises every branch: decoded
/// predictions (low `tau_a`), two stages and re-scoring.
pub fn composite_fixture(seed: u64) -> Result<(Model, crate::data::Scene, TrainConfig)> {
    let cfg = ModelConfig {
        num_vertices: 8,
        layers: 1,
        channels: 8,
        heads: 2,
        stages: 2,
        tau_a: 0.005,
        dropout: 0.0,
        mlp_hidden: 16,
        head_channels: 8,
        max_detections: 4,
        ..ModelConfig::default()
    };
    let params = SceneParams {
        width: 32,
        height: 32,
        min_instances: 1,
        max_instances: 2,
        length_min: 10.0,
        length_max: 20.0,
        thickness_min: 4.0,
        thickness_max: 8.0,
        margin: 2.0,
        ..SceneParams::default()
    };
    let model = Model::new(cfg, seed)?;
    let scene = generate_scene(&params, seed)?;
    let train = TrainConfig {
        max_pred_samples: 3,
        ..TrainConfig::default()
    };
    Ok((model, scene, train))
}

/// Composite loss (all five terms) against `probes` randomly chosen
/// parameter scalars plus the first scalar of every parameter tensor whose
/// name starts with one of the layer groups. Discrete choices are frozen
/// from the unperturbed forward pass.
pub fn composite_check(seed: u64, probes: usize, fault: Fault) -> Result<GradCheckResult> {
    let (model, scene, train) = composite_fixture(seed)?;
    let weights = LossWeights::default();
    let targets = instance_targets(&scene.polygons, model.config.num_vertices, model.stride())?;

    let eval = |m: &Model, plan: Option<&StepPlan>| -> Result<(f64, StepPlan)> {
        let mut f = Fwd::new(&m.params, false, 0);
        let (terms, plan) = scene_loss(m, &mut f, &scene.raster, &targets, &weights, &train, plan)?;
        let (total, _) = terms.combine(&mut f, &weights)?;
        Ok((f.tape.value(total).item(), plan))
    };
    let (_, plan) = eval(&model, None)?;
    let analytic = {
        let mut f = Fwd::new(&model.params, false, 0);
        let (terms, _) = scene_loss(&model, &mut f, &scene.raster, &targets, &weights, &train, Some(&plan))?;
        let (total, _) = terms.combine(&mut f, &weights)?;
        f.tape.backward(total)?.param_grads(&model.params)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FF_EE);
    let ids: Vec<ParamId> = model.params.ids().collect();
    let mut picks: Vec<(ParamId, usize)> = Vec::new();
    for group in ["backbone.conv0", "init.conv0", "init.predict.w", "stage0.cls_token", "stage0.layer0.qkv", "stage1.reg.out", "stage1.cls.fc1"] {
        if let Some(&id) = ids.iter().find(|&&id| model.params.name(id).starts_with(group)) {
            let n = model.params.get(id).len();
            picks.push((id, rng.gen_range(0..n)));
        }
    }
    for _ in 0..probes {
        let id = ids[rng.gen_range(0..ids.len())];
        let n = model.params.get(id).len();
        picks.push((id, rng.gen_range(0..n)));
    }

    let mut worst = 0.0f64;
    for (id, j) in picks {
        let mut probe = model.clone();
        probe.params.get_mut(id).data_mut()[j] += FD_STEP;
        let plus = eval(&probe, Some(&plan))?.0;
        probe.params.get_mut(id).data_mut()[j] -= 2.0 * FD_STEP;
        let minus = eval(&probe, Some(&plan))?.0;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let mut a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[j]);
        if let Fault::ScaleAnalytic(s) = fault {
            a *= s;
        }
        let denom = a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(GradCheckResult {
        name: "loss.composite".into(),
        trials: probes,
        max_rel_error: worst,
        passed: worst < FD_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_term_passes() {
        for r in loss_suite(11, 20, Fault::None).unwrap() {
            assert!(r.passed, "{} max rel err {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let r = loss_suite(11, 2, Fault::ScaleAnalytic(1.01)).unwrap();
        assert!(r.iter().all(|r| !r.passed));
    }

    #[test]
    fn composite_passes() {
        let r = composite_check(3, 12, Fault::None).unwrap();
        assert!(r.passed, "max rel err {}", r.max_rel_error);
    }
}
