use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{box_iou, point_in_ring, polygon_iou, BBox, Point2, Polygon};

/// Knobs of the scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Centerline length range of a ribbon, in pixels.
    pub length_min: f64,
    pub length_max: f64,
    pub thickness_min: f64,
    pub thickness_max: f64,
    /// Largest bend amplitude as a fraction of the ribbon length.
    pub curvature_max: f64,
    /// Largest rotation of a ribbon away from horizontal, in radians.
    pub tilt_max: f64,
    /// Centerline stations per ribbon; polygons have twice as many points.
    pub stations: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Upper bound on distractor blobs per scene.
    pub distractors_max: usize,
    /// Minimum distance of any polygon point from the image border.
    pub margin: f64,
    /// Largest box IoU allowed between two instances of one scene.
    pub max_box_overlap: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            min_instances: 1,
            max_instances: 4,
            length_min: 40.0,
            length_max: 96.0,
            thickness_min: 10.0,
            thickness_max: 18.0,
            curvature_max: 0.2,
            tilt_max: 0.0,
            stations: 7,
            noise: 0.05,
            distractors_max: 3,
            margin: 3.0,
            max_box_overlap: 0.3,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("data.{field}: {msg}")));
        if self.width < 16 || self.height < 16 || self.width % 4 != 0 || self.height % 4 != 0 {
            return bad("width", format!("{}x{} must be multiples of 4 and >= 16", self.width, self.height));
        }
        if self.min_instances > self.max_instances {
            return bad("min_instances", format!("need min ({}) <= max ({})", self.min_instances, self.max_instances));
        }
        if !(self.length_min > 0.0 && self.length_min <= self.length_max) {
            return bad("length_min", format!("need 0 < {} <= {}", self.length_min, self.length_max));
        }
        if !(self.thickness_min > 0.0 && self.thickness_min <= self.thickness_max) {
            return bad("thickness_min", format!("need 0 < {} <= {}", self.thickness_min, self.thickness_max));
        }
        let span = self.length_max + 2.0 * self.margin;
        if span > self.width as f64 {
            return bad("length_max", format!("{} plus margins does not fit width {}", self.length_max, self.width));
        }
        if !(0.0..=0.5).contains(&self.curvature_max) {
            return bad("curvature_max", format!("must lie in [0, 0.5], got {}", self.curvature_max));
        }
        if !(0.0..=PI / 4.0).contains(&self.tilt_max) {
            return bad("tilt_max", format!("must lie in [0, pi/4], got {}", self.tilt_max));
        }
        if self.stations < 2 {
            return bad("stations", "must be >= 2".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise", format!("must be >= 0, got {}", self.noise));
        }
        if !(self.margin >= 0.0) {
            return bad("margin", format!("must be >= 0, got {}", self.margin));
        }
        if !(0.0..=1.0).contains(&self.max_box_overlap) {
            return bad("max_box_overlap", format!("must lie in [0, 1], got {}", self.max_box_overlap));
        }
        Ok(())
    }
}

/// A rendered scene with its ground-truth polygons, in pixel coordinates
/// (pixel `(i, j)` covers `[i, i+1] × [j, j+1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    /// `[1, H, W]` intensities in `[0, 1]`.
    pub raster: Tensor,
    pub polygons: Vec<Polygon>,
}

impl Scene {
    pub fn width(&self) -> usize {
        self.raster.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.raster.shape()[1]
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.polygons
            .iter()
            .map(|p| p.bbox().expect("validated polygon has a box"))
            .collect()
    }

    /// One of the eight flips/transposes of the scene, raster and polygons
    /// alike. Bit 0 flips x, bit 1 flips y, bit 2 transposes (applied last,
    /// square scenes only; ignored otherwise). `0` is the identity.
    pub fn dihedral(&self, k: u8) -> Result<Scene> {
        let (h, w) = (self.height(), self.width());
        let (fx, fy) = (k & 1 != 0, k & 2 != 0);
        let tr = k & 4 != 0 && h == w;
        let src = self.raster.data();
        let mut data = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let (si, sj) = (if fy { h - 1 - i } else { i }, if fx { w - 1 - j } else { j });
                let (di, dj) = if tr { (j, i) } else { (i, j) };
                data[di * w + dj] = src[si * w + sj];
            }
        }
        let map = |p: &Point2| {
            let x = if fx { w as f64 - p.x } else { p.x };
            let y = if fy { h as f64 - p.y } else { p.y };
            if tr {
                Point2::new(y, x)
            } else {
                Point2::new(x, y)
            }
        };
        let polygons = self
            .polygons
            .iter()
            .map(|p| Polygon::new(p.points().iter().map(map).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Scene {
            seed: self.seed,
            raster: Tensor::new(vec![1, h, w], data)?,
            polygons,
        })
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;

/// Deterministic scene for `seed`.
pub fn generate_scene(params: &SceneParams, seed: u64) -> Result<Scene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.gen_range(params.min_instances..=params.max_instances);
    let mut polygons: Vec<Polygon> = Vec::new();
    let mut attempts = 0;
    while polygons.len() < target && attempts < PLACEMENT_ATTEMPTS {
        attempts += 1;
        let Some(poly) = ribbon(params, &mut rng) else {
            continue;
        };
        let b = poly.bbox()?;
        let clear = polygons.iter().all(|q| {
            let qb = q.bbox().expect("validated polygon has a box");
            box_iou(&b, &qb) <= params.max_box_overlap && polygon_iou(&poly, q).map(|v| v == 0.0).unwrap_or(false)
        });
        if clear {
            polygons.push(poly);
        }
    }
    let raster = render(params, &polygons, &mut rng);
    Ok(Scene { seed, raster, polygons })
}

/// One bent, tilted ribbon placed inside the margins, or `None` if this draw
/// does not fit or folds over itself.
fn ribbon(params: &SceneParams, rng: &mut ChaCha8Rng) -> Option<Polygon> {
    let len = rng.gen_range(params.length_min..=params.length_max);
    let thick = rng.gen_range(params.thickness_min..=params.thickness_max);
    let amp = rng.gen_range(0.0..=params.curvature_max) * len * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let cycles = rng.gen_range(0.5..=1.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let tilt = rng.gen_range(-params.tilt_max..=params.tilt_max);
    let (sin_t, cos_t) = tilt.sin_cos();
    let rot = |x: f64, y: f64| (x * cos_t - y * sin_t, x * sin_t + y * cos_t);

    let n = params.stations;
    let mut upper = Vec::with_capacity(n);
    let mut lower = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 / (n - 1) as f64;
        let arg = 2.0 * PI * cycles * t + phase;
        let (cx, cy) = rot(t * len, amp * (arg.sin() - phase.sin()));
        let (tx, ty) = rot(len, amp * 2.0 * PI * cycles * arg.cos());
        let norm = tx.hypot(ty);
        let (nx, ny) = (-ty / norm, tx / norm);
        upper.push(Point2::new(cx - nx * thick / 2.0, cy - ny * thick / 2.0));
        lower.push(Point2::new(cx + nx * thick / 2.0, cy + ny * thick / 2.0));
    }
    lower.reverse();
    upper.extend(lower);
    let poly = Polygon::new(upper).ok()?;
    if !poly.is_simple() {
        return None;
    }
    let b = poly.bbox().ok()?;
    let m = params.margin;
    let free_x = params.width as f64 - 2.0 * m - b.width();
    let free_y = params.height as f64 - 2.0 * m - b.height();
    if free_x < 0.0 || free_y < 0.0 {
        return None;
    }
    let dx = m + rng.gen_range(0.0..=free_x) - b.x_min;
    let dy = m + rng.gen_range(0.0..=free_y) - b.y_min;
    Some(poly.translated(dx, dy))
}

/// Background gradient, striped ribbons, distractor disks and noise.
fn render(params: &SceneParams, polygons: &[Polygon], rng: &mut ChaCha8Rng) -> Tensor {
    let (w, h) = (params.width, params.height);
    let grad_angle = rng.gen_range(0.0..2.0 * PI);
    let (gs, gc) = grad_angle.sin_cos();
    let base = rng.gen_range(0.05..0.2);
    let mut img = vec![0.0; w * h];
    let diag = ((w * w + h * h) as f64).sqrt();
    for y in 0..h {
        for x in 0..w {
            let along = ((x as f64 - w as f64 / 2.0) * gc + (y as f64 - h as f64 / 2.0) * gs) / diag + 0.5;
            img[y * w + x] = base + 0.1 * along;
        }
    }

    for poly in polygons {
        let b = poly.bbox().expect("validated polygon has a box");
        let period = rng.gen_range(4.0..7.0);
        let stripe_phase = rng.gen_range(0.0..1.0);
        let ink = rng.gen_range(0.75..0.95);
        let x0 = b.x_min.floor().max(0.0) as usize;
        let y0 = b.y_min.floor().max(0.0) as usize;
        let x1 = (b.x_max.ceil() as usize).min(w);
        let y1 = (b.y_max.ceil() as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let mut cov = 0.0;
                for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                    if point_in_ring(Point2::new(x as f64 + sx, y as f64 + sy), poly.points()) {
                        cov += 0.25;
                    }
                }
                if cov == 0.0 {
                    continue;
                }
                let gap = ((x as f64 / period + stripe_phase).fract()) > 0.7;
                let v = if gap { ink - 0.2 } else { ink };
                let p = &mut img[y * w + x];
                *p = *p * (1.0 - cov) + v * cov;
            }
        }
    }

    let boxes: Vec<BBox> = polygons.iter().map(|p| p.bbox().expect("validated polygon has a box")).collect();
    let blobs = rng.gen_range(0..=params.distractors_max);
    for _ in 0..blobs {
        let r = rng.gen_range(1.5..4.0);
        let cx = rng.gen_range(r..w as f64 - r);
        let cy = rng.gen_range(r..h as f64 - r);
        let pad = r + 2.0;
        let hits = boxes.iter().any(|b| {
            cx > b.x_min - pad && cx < b.x_max + pad && cy > b.y_min - pad && cy < b.y_max + pad
        });
        if hits {
            continue;
        }
        let v = rng.gen_range(0.5..0.9);
        let (xa, xb) = ((cx - r).floor() as usize, ((cx + r).ceil() as usize).min(w));
        let (ya, yb) = ((cy - r).floor() as usize, ((cy + r).ceil() as usize).min(h));
        for y in ya..yb {
            for x in xa..xb {
                let d = (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy);
                if d <= r {
                    img[y * w + x] = v;
                }
            }
        }
    }

    if params.noise > 0.0 {
        let normal = Normal::new(0.0, params.noise).expect("finite noise");
        for p in &mut img {
            *p += normal.sample(rng);
        }
    }
    for p in &mut img {
        *p = p.clamp(0.0, 1.0);
    }
    Tensor::new(vec![1, h, w], img).expect("raster shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Sum of intensities at pixel centers covered by any polygon.
    fn ink(s: &Scene) -> (usize, f64) {
        let (h, w) = (s.height(), s.width());
        let (mut n, mut sum) = (0, 0.0);
        for i in 0..h {
            for j in 0..w {
                let c = Point2::new(j as f64 + 0.5, i as f64 + 0.5);
                if s.polygons.iter().any(|p| point_in_ring(c, p.points())) {
                    n += 1;
                    sum += s.raster.data()[i * w + j];
                }
            }
        }
        (n, sum)
    }

    #[test]
    fn dihedral_moves_raster_and_polygons_together() {
        let s = generate_scene(&SceneParams::default(), 3).unwrap();
        let (n0, s0) = ink(&s);
        assert_eq!(s.dihedral(0).unwrap(), s);
        for k in 1..8 {
            let t = s.dihedral(k).unwrap();
            let (n, sum) = ink(&t);
            assert_eq!(n, n0, "k={k}");
            assert!((sum - s0).abs() < 1e-6, "k={k}");
            assert_ne!(t.raster, s.raster);
        }
    }

    #[test]
    fn scenes_are_deterministic_per_seed() {
        let p = SceneParams::default();
        assert_eq!(generate_scene(&p, 7).unwrap(), generate_scene(&p, 7).unwrap());
        assert_ne!(generate_scene(&p, 7).unwrap().raster, generate_scene(&p, 8).unwrap().raster);
    }

    #[test]
    fn polygons_stay_inside_and_apart() {
        let p = SceneParams::default();
        for seed in 0..40 {
            let s = generate_scene(&p, seed).unwrap();
            assert!((1..=4).contains(&s.polygons.len()));
            for (i, a) in s.polygons.iter().enumerate() {
                assert_eq!(a.len(), 14);
                assert!(a.is_simple());
                let b = a.bbox().unwrap();
                assert!(b.x_min >= p.margin - 1e-9 && b.x_max <= 128.0 - p.margin + 1e-9);
                assert!(b.y_min >= p.margin - 1e-9 && b.y_max <= 128.0 - p.margin + 1e-9);
                for c in &s.polygons[i + 1..] {
                    assert_eq!(polygon_iou(a, c).unwrap(), 0.0);
                }
            }
            assert!(s.raster.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn ribbons_are_brighter_than_background() {
        let p = SceneParams {
            noise: 0.0,
            distractors_max: 0,
            ..SceneParams::default()
        };
        let s = generate_scene(&p, 3).unwrap();
        let c = s.polygons[0].bbox().unwrap().center();
        let poly = &s.polygons[0];
        let inside: Vec<f64> = (0..128 * 128)
            .filter(|i| point_in_ring(Point2::new((i % 128) as f64 + 0.5, (i / 128) as f64 + 0.5), poly.points()))
            .map(|i| s.raster.data()[i])
            .collect();
        let mean_in = inside.iter().sum::<f64>() / inside.len() as f64;
        assert!(mean_in > 0.5, "mean inside {mean_in} near {c:?}");
        assert!(s.raster.data()[0] < 0.35);
    }

    #[test]
    fn invalid_params_name_the_field() {
        let p = SceneParams {
            width: 30,
            ..SceneParams::default()
        };
        assert!(generate_scene(&p, 0).unwrap_err().to_string().contains("data.width"));
    }
}
