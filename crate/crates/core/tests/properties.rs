use contour_forge::autodiff::bce_with_logits;
use contour_forge::config::{LossWeights, ModelConfig};
use contour_forge::data::{evaluate_scene, generate_scene, SceneParams, MATCH_IOU};
use contour_forge::geometry::{densify_for_targets, nearest_l1_assignment, polygon_iou, Contour, Point2, Polygon};
use contour_forge::model::{contour_box, Detection, Fwd, InitMaps, Model};
use contour_forge::training::gradcheck::composite_fixture;
use contour_forge::training::{allocate_positive, instance_targets, quality_focal_loss, scene_loss};
use proptest::prelude::*;

fn star(cx: f64, cy: f64, radii: &[f64]) -> Polygon {
    let n = radii.len();
    Polygon::new(
        radii
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let a = std::f64::consts::TAU * i as f64 / n as f64;
                Point2::new(cx + r * a.cos(), cy + r * a.sin())
            })
            .collect(),
    )
    .unwrap()
}

fn small_scene_params() -> SceneParams {
    SceneParams {
        width: 48,
        height: 48,
        min_instances: 1,
        max_instances: 3,
        length_min: 12.0,
        length_max: 24.0,
        thickness_min: 4.0,
        thickness_max: 8.0,
        margin: 2.0,
        ..SceneParams::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn assignment_picks_densified_boundary_points(
        cx in 20.0..40.0f64, cy in 20.0..40.0f64,
        radii in prop::collection::vec(4.0..15.0f64, 3..10),
        samples in prop::collection::vec((0.0..60.0f64, 0.0..60.0f64), 1..40),
    ) {
        let poly = star(cx, cy, &radii);
        let dense = densify_for_targets(&poly).unwrap();
        let pts: Vec<Point2> = samples.iter().map(|&(x, y)| Point2::new(x, y)).collect();
        let c = nearest_l1_assignment(&pts, &dense).unwrap();
        for v in c.vertices() {
            prop_assert!(dense.points().contains(v));
        }
    }

    #[test]
    fn polygon_iou_is_symmetric_and_bounded(
        a in prop::collection::vec(3.0..12.0f64, 3..9),
        b in prop::collection::vec(3.0..12.0f64, 3..9),
        dx in -15.0..15.0f64, dy in -15.0..15.0f64,
    ) {
        let pa = star(30.0, 30.0, &a);
        let pb = star(30.0 + dx, 30.0 + dy, &b);
        let ab = polygon_iou(&pa, &pb).unwrap();
        let ba = polygon_iou(&pb, &pa).unwrap();
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((polygon_iou(&pa, &pa).unwrap() - 1.0).abs() < 1e-9);
        let rotated = Polygon::new(pa.points().iter().cycle().skip(1).take(pa.len()).copied().collect()).unwrap();
        prop_assert!((polygon_iou(&pa, &rotated).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn qfl_is_nonnegative_and_vanishes_at_the_label(logit in -8.0..8.0f64, y in 0.01..0.99f64, beta in 0.0..4.0f64) {
        let q = quality_focal_loss(logit, y, beta);
        prop_assert!(q >= 0.0);
        let s = 1.0 / (1.0 + (-logit).exp());
        if (s - y).abs() > 1e-6 && beta > 0.0 {
            prop_assert!(q > 0.0);
        }
        if beta >= 1.0 {
            let at_label = quality_focal_loss((y / (1.0 - y)).ln(), y, beta);
            prop_assert!(at_label.abs() < 1e-9);
        }
        prop_assert_eq!(quality_focal_loss(logit, 1.0, 0.0), bce_with_logits(logit, 1.0));
    }

    #[test]
    fn evaluation_ignores_gt_order(seed in 0u64..200, rot in 0usize..4) {
        let scene = generate_scene(&small_scene_params(), seed).unwrap();
        let gts = scene.polygons.clone();
        let dets: Vec<Detection> = gts
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let c = Contour::new(g.translated(i as f64, 0.5).points().to_vec()).unwrap();
                let b = contour_box(&c);
                Detection::initial(c, 0.5 + 0.1 * i as f64, b)
            })
            .collect();
        let mut permuted = gts.clone();
        permuted.rotate_left(rot % gts.len());
        let a = evaluate_scene(&dets, &gts, MATCH_IOU);
        let b = evaluate_scene(&dets, &permuted, MATCH_IOU);
        prop_assert_eq!(a.matches.len(), b.matches.len());
        let mut ia: Vec<usize> = a.matches.iter().map(|m| m.0).collect();
        let mut ib: Vec<usize> = b.matches.iter().map(|m| m.0).collect();
        ia.sort();
        ib.sort();
        prop_assert_eq!(ia, ib);
    }

    #[test]
    fn allocation_gives_each_instance_one_distinct_cell(seed in 0u64..100) {
        let cfg = ModelConfig { num_vertices: 8, layers: 1, channels: 8, heads: 2, mlp_hidden: 8, head_channels: 8, ..ModelConfig::default() };
        let model = Model::new(cfg, seed).unwrap();
        let scene = generate_scene(&small_scene_params(), seed).unwrap();
        let mut f = Fwd::new(&model.params, false, 0);
        let fm = model.backbone_forward(&mut f, &scene.raster).unwrap();
        let head = model.init_head_forward(&mut f, &fm).unwrap();
        let maps = InitMaps::from_tape(&f.tape, &head, fm.stride);
        let targets = instance_targets(&scene.polygons, 8, fm.stride).unwrap();
        let cells = allocate_positive(&targets, &maps, &LossWeights::default());
        prop_assert_eq!(cells.len(), scene.polygons.len());
        let mut uniq = cells.clone();
        uniq.sort();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), cells.len());
    }
}

#[test]
fn scene_generation_is_byte_identical_per_seed() {
    let p = SceneParams::default();
    let a = generate_scene(&p, 42).unwrap();
    let b = generate_scene(&p, 42).unwrap();
    let bits = |s: &contour_forge::data::Scene| s.raster.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.polygons, b.polygons);
}

#[test]
fn training_backward_is_bit_identical_on_rerun() {
    let (model, scene, train) = composite_fixture(21).unwrap();
    let targets = instance_targets(&scene.polygons, model.config.num_vertices, model.stride()).unwrap();
    let weights = LossWeights::default();
    let grads = || {
        let mut f = Fwd::new(&model.params, true, 99);
        let (terms, _) = scene_loss(&model, &mut f, &scene.raster, &targets, &weights, &train, None).unwrap();
        let (total, _) = terms.combine(&mut f, &weights).unwrap();
        let g = f.tape.backward(total).unwrap();
        g.param_grads(&model.params)
            .into_iter()
            .map(|t| t.map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
            .collect::<Vec<_>>()
    };
    assert_eq!(grads(), grads());
}

#[test]
fn full_loss_reaches_every_init_map_and_the_backbone() {
    let (model, scene, train) = composite_fixture(5).unwrap();
    let targets = instance_targets(&scene.polygons, model.config.num_vertices, model.stride()).unwrap();
    let weights = LossWeights::default();
    let mut f = Fwd::new(&model.params, false, 0);
    let (terms, _) = scene_loss(&model, &mut f, &scene.raster, &targets, &weights, &train, None).unwrap();
    let (total, _) = terms.combine(&mut f, &weights).unwrap();
    let g = f.tape.backward(total).unwrap().param_grads(&model.params);
    let norm = |name: &str| {
        let id = model.params.id(name).unwrap();
        g[id.index()].as_ref().map_or(0.0, |t| t.data().iter().map(|v| v * v).sum::<f64>())
    };
    assert!(norm("backbone.conv0.w") > 0.0);
    // predict conv rows: cls (0), box (1..5), offsets (5..)
    let id = model.params.id("init.predict.w").unwrap();
    let gw = g[id.index()].as_ref().unwrap();
    let per_row = gw.len() / gw.shape()[0];
    let row = |r: usize| gw.data()[r * per_row..(r + 1) * per_row].iter().map(|v| v.abs()).sum::<f64>();
    assert!(row(0) > 0.0);
    assert!((1..5).map(row).sum::<f64>() > 0.0);
    assert!((5..gw.shape()[0]).map(row).sum::<f64>() > 0.0);
}
