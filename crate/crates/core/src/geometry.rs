//! Polygon, box, sampling and matching arithmetic.
//!
//! Coordinates use the image convention: `x` grows to the right and `y`
//! grows downwards. In that frame a ring that visits top-left, top-right,
//! bottom-right, bottom-left is clockwise on screen and has a *positive*
//! shoelace sum, which is what [`signed_area`] returns.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Densification resolution used for contour targets: perimeter / 256.
pub const DENSIFY_DIVISIONS: f64 = 256.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("polygon needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("non-finite coordinate ({0}, {1})")]
    NonFinite(f64, f64),
    #[error("boundary has no points")]
    EmptyBoundary,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("polygon is self-intersecting")]
    SelfIntersecting,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    #[inline]
    pub fn l1(&self, other: &Point2) -> f64 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }

    #[inline]
    pub fn dist(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    #[inline]
    pub fn lerp(&self, other: &Point2, t: f64) -> Point2 {
        Point2::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }
}

// Points travel as `[x, y]` pairs on the wire.
impl Serialize for Point2 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.x, self.y].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Point2 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [x, y] = <[f64; 2]>::deserialize(d)?;
        Ok(Point2::new(x, y))
    }
}

/// Shoelace sum over a closed ring; positive for clockwise rings in image
/// coordinates.
pub fn signed_area(points: &[Point2]) -> f64 {
    let n = points.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = points[i];
        let b = points[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    0.5 * acc
}

pub fn perimeter(points: &[Point2]) -> f64 {
    let n = points.len();
    (0..n).map(|i| points[i].dist(&points[(i + 1) % n])).sum()
}

/// A closed text boundary, normalized to clockwise orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    points: Vec<Point2>,
}

impl Polygon {
    /// Validates and normalizes `points` to a clockwise ring.
    ///
    /// Consecutive duplicates (including last-to-first) are rejected rather
    /// than silently dropped.
    pub fn new(points: Vec<Point2>) -> Result<Self> {
        if points.len() < 3 {
            return Err(GeometryError::TooFewPoints(points.len()));
        }
        if let Some(p) = points.iter().find(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite(p.x, p.y));
        }
        let n = points.len();
        for i in 0..n {
            if points[i] == points[(i + 1) % n] {
                return Err(GeometryError::Degenerate(format!(
                    "consecutive duplicate point at index {i}"
                )));
            }
        }
        let mut points = points;
        if signed_area(&points) < 0.0 {
            points.reverse();
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.points).abs()
    }

    pub fn perimeter(&self) -> f64 {
        perimeter(&self.points)
    }

    pub fn bbox(&self) -> Result<BBox> {
        BBox::enclosing(&self.points)
    }

    /// True when no two non-adjacent edges touch.
    pub fn is_simple(&self) -> bool {
        ring_is_simple(&self.points)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Polygon {
        Polygon {
            points: self
                .points
                .iter()
                .map(|p| Point2::new(p.x + dx, p.y + dy))
                .collect(),
        }
    }
}

impl Serialize for Polygon {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.points.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Polygon {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let points = Vec::<Point2>::deserialize(d)?;
        Polygon::new(points).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::NonFinite(self.x_min, self.y_min));
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(GeometryError::Degenerate(format!(
                "box [{}, {}, {}, {}] has no area",
                self.x_min, self.y_min, self.x_max, self.y_max
            )));
        }
        Ok(())
    }

    /// Tight axis-aligned box around `points`.
    pub fn enclosing(points: &[Point2]) -> Result<Self> {
        if points.is_empty() {
            return Err(GeometryError::EmptyBoundary);
        }
        let mut b = BBox {
            x_min: f64::INFINITY,
            y_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for p in points {
            b.x_min = b.x_min.min(p.x);
            b.y_min = b.y_min.min(p.y);
            b.x_max = b.x_max.max(p.x);
            b.y_max = b.y_max.max(p.y);
        }
        b.validate()?;
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point2 {
        Point2::new(
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn to_polygon(&self) -> Polygon {
        Polygon {
            points: vec![
                Point2::new(self.x_min, self.y_min),
                Point2::new(self.x_max, self.y_min),
                Point2::new(self.x_max, self.y_max),
                Point2::new(self.x_min, self.y_max),
            ],
        }
    }

    fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }
}

/// A fixed-length ring of contour vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Contour {
    vertices: Vec<Point2>,
}

impl Contour {
    pub fn new(vertices: Vec<Point2>) -> Result<Self> {
        if vertices.is_empty() {
            return Err(GeometryError::EmptyBoundary);
        }
        if let Some(p) = vertices.iter().find(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite(p.x, p.y));
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn bbox(&self) -> Result<BBox> {
        BBox::enclosing(&self.vertices)
    }

    /// `rotated(k)[(i + k) % n] == self[i]`.
    pub fn rotated(&self, k: usize) -> Contour {
        let mut v = self.vertices.clone();
        let n = v.len();
        v.rotate_right(k % n);
        Contour { vertices: v }
    }

    /// Interprets the ring as a polygon; fails on repeated consecutive
    /// vertices or fewer than three points.
    pub fn to_polygon(&self) -> Result<Polygon> {
        Polygon::new(self.vertices.clone())
    }

    /// Flattened `[x0, y0, x1, y1, ...]`.
    pub fn flat(&self) -> Vec<f64> {
        self.vertices.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(GeometryError::InvalidArgument(format!(
                "flat contour has odd length {}",
                flat.len()
            )));
        }
        Contour::new(
            flat.chunks_exact(2)
                .map(|c| Point2::new(c[0], c[1]))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub gt_index: Option<usize>,
    pub best_iou: f64,
    pub is_false_positive: bool,
}

/// Predictions whose best IoU falls below this are false positives.
pub const FALSE_POSITIVE_IOU: f64 = 0.5;

/// Samples `count` points uniformly by arc length along the box perimeter,
/// clockwise from the top-left corner.
pub fn box_perimeter_sample(b: &BBox, count: usize) -> Result<Vec<Point2>> {
    b.validate()?;
    if count < 4 {
        return Err(GeometryError::InvalidArgument(format!(
            "perimeter sampling needs at least 4 points, got {count}"
        )));
    }
    let (w, h) = (b.width(), b.height());
    let total = 2.0 * (w + h);
    let step = total / count as f64;
    Ok((0..count)
        .map(|k| point_on_box_perimeter(b, k as f64 * step))
        .collect())
}

fn point_on_box_perimeter(b: &BBox, s: f64) -> Point2 {
    let (w, h) = (b.width(), b.height());
    if s <= w {
        Point2::new(b.x_min + s, b.y_min)
    } else if s <= w + h {
        Point2::new(b.x_max, b.y_min + (s - w))
    } else if s <= 2.0 * w + h {
        Point2::new(b.x_max - (s - w - h), b.y_max)
    } else {
        Point2::new(b.x_min, b.y_max - (s - 2.0 * w - h))
    }
}

/// Inserts evenly spaced points on every edge so consecutive points are at
/// most `step` apart. Original vertices are kept.
pub fn densify_polygon(poly: &Polygon, step: f64) -> Result<Polygon> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(GeometryError::InvalidArgument(format!(
            "densify step must be positive, got {step}"
        )));
    }
    let pts = poly.points();
    let n = pts.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let a = pts[i];
        let b = pts[(i + 1) % n];
        let pieces = (a.dist(&b) / step).ceil().max(1.0) as usize;
        out.push(a);
        for k in 1..pieces {
            out.push(a.lerp(&b, k as f64 / pieces as f64));
        }
    }
    Ok(Polygon { points: out })
}

/// Boundary densification used for contour targets.
pub fn densify_for_targets(poly: &Polygon) -> Result<Polygon> {
    densify_polygon(poly, poly.perimeter() / DENSIFY_DIVISIONS)
}

/// Per-sample argmin of L1 distance over the boundary points. Ties go to
/// the lowest boundary index.
pub fn nearest_l1_indices(samples: &[Point2], boundary: &[Point2]) -> Result<Vec<usize>> {
    if boundary.is_empty() {
        return Err(GeometryError::EmptyBoundary);
    }
    Ok(samples
        .iter()
        .map(|s| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, b) in boundary.iter().enumerate() {
                let d = s.l1(b);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect())
}

pub fn nearest_l1_assignment(samples: &[Point2], boundary: &Polygon) -> Result<Contour> {
    let idx = nearest_l1_indices(samples, boundary.points())?;
    Contour::new(idx.into_iter().map(|j| boundary.points()[j]).collect())
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn match_to_ground_truth(pred: &BBox, gts: &[BBox]) -> MatchResult {
    let mut gt_index = None;
    let mut best_iou = 0.0;
    for (k, gt) in gts.iter().enumerate() {
        let iou = box_iou(pred, gt);
        if gt_index.is_none() || iou > best_iou {
            gt_index = Some(k);
            best_iou = iou;
        }
    }
    MatchResult {
        gt_index,
        best_iou,
        is_false_positive: best_iou < FALSE_POSITIVE_IOU,
    }
}

#[inline]
pub fn huber(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

/// Smooth-L1 between two points: summed over both coordinates.
#[inline]
pub fn point_smooth_l1(p: &Point2, q: &Point2) -> f64 {
    huber(p.x - q.x) + huber(p.y - q.y)
}

/// Loss of `pred` against `gt` shifted by `u`: sum over `i` of
/// smooth-L1(pred[i], gt[(u + i) % n]).
pub fn shifted_smooth_l1(pred: &[Point2], gt: &[Point2], u: usize) -> f64 {
    let n = gt.len();
    pred.iter()
        .enumerate()
        .map(|(i, p)| point_smooth_l1(p, &gt[(u + i) % n]))
        .sum()
}

/// Exhaustive search over all cyclic shifts; the smallest shift wins ties.
pub fn cyclic_alignment(pred: &Contour, gt: &Contour) -> Result<(usize, f64)> {
    if pred.len() != gt.len() {
        return Err(GeometryError::LengthMismatch(pred.len(), gt.len()));
    }
    let mut best = (0, f64::INFINITY);
    for u in 0..gt.len() {
        let loss = shifted_smooth_l1(pred.vertices(), gt.vertices(), u);
        if loss < best.1 {
            best = (u, loss);
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Polygon IoU
// ---------------------------------------------------------------------------

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn on_segment(p: Point2, a: Point2, b: Point2) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

fn segments_intersect(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(a, c, d))
        || (d2 == 0.0 && on_segment(b, c, d))
        || (d3 == 0.0 && on_segment(c, a, b))
        || (d4 == 0.0 && on_segment(d, a, b))
}

fn ring_is_simple(pts: &[Point2]) -> bool {
    let n = pts.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let (a, b) = (pts[i], pts[(i + 1) % n]);
        for j in (i + 1)..n {
            // adjacent edges share a vertex
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (c, d) = (pts[j], pts[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

fn point_in_triangle(p: Point2, a: Point2, b: Point2, c: Point2) -> bool {
    // clockwise (positive-area) triangle in image coordinates
    cross(a, b, p) >= 0.0 && cross(b, c, p) >= 0.0 && cross(c, a, p) >= 0.0
}

/// Ear-clipping triangulation of a simple clockwise ring. Returns `None`
/// when no ear can be found (numerically degenerate input).
fn triangulate(pts: &[Point2]) -> Option<Vec<[Point2; 3]>> {
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    let mut tris = Vec::with_capacity(pts.len().saturating_sub(2));
    let mut guard = 0usize;
    while idx.len() > 3 {
        let m = idx.len();
        let mut clipped = false;
        for k in 0..m {
            let (ia, ib, ic) = (idx[(k + m - 1) % m], idx[k], idx[(k + 1) % m]);
            let (a, b, c) = (pts[ia], pts[ib], pts[ic]);
            let turn = cross(a, b, c);
            if turn <= 0.0 {
                // reflex or collinear vertex; drop collinear ones outright
                if turn == 0.0 && m > 3 {
                    idx.remove(k);
                    clipped = true;
                    break;
                }
                continue;
            }
            let blocked = idx.iter().any(|&j| {
                j != ia && j != ib && j != ic && point_in_triangle(pts[j], a, b, c)
            });
            if !blocked {
                tris.push([a, b, c]);
                idx.remove(k);
                clipped = true;
                break;
            }
        }
        if !clipped {
            return None;
        }
        guard += 1;
        if guard > 4 * pts.len() {
            return None;
        }
    }
    if idx.len() == 3 {
        let t = [pts[idx[0]], pts[idx[1]], pts[idx[2]]];
        if cross(t[0], t[1], t[2]) > 0.0 {
            tris.push(t);
        }
    }
    Some(tris)
}

/// Sutherland–Hodgman clip of a convex clockwise `subject` by a convex
/// clockwise `clip` polygon.
fn clip_convex(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut output = subject.to_vec();
    let m = clip.len();
    for e in 0..m {
        if output.is_empty() {
            break;
        }
        let (ca, cb) = (clip[e], clip[(e + 1) % m]);
        let input = std::mem::take(&mut output);
        let k = input.len();
        for i in 0..k {
            let cur = input[i];
            let prev = input[(i + k - 1) % k];
            let cur_in = cross(ca, cb, cur) >= 0.0;
            let prev_in = cross(ca, cb, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, ca, cb));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, ca, cb));
            }
        }
    }
    output
}

fn line_intersection(p: Point2, q: Point2, a: Point2, b: Point2) -> Point2 {
    let d1 = cross(a, b, p);
    let d2 = cross(a, b, q);
    let denom = d1 - d2;
    if denom == 0.0 {
        return q;
    }
    p.lerp(&q, d1 / denom)
}

fn intersection_area_exact(a: &[[Point2; 3]], b: &[[Point2; 3]]) -> f64 {
    let mut total = 0.0;
    for ta in a {
        let ba = BBox::enclosing(ta).ok();
        for tb in b {
            if let (Some(x), Ok(y)) = (ba, BBox::enclosing(tb)) {
                if x.intersection_area(&y) <= 0.0 {
                    continue;
                }
            }
            let piece = clip_convex(ta, tb);
            if piece.len() >= 3 {
                total += signed_area(&piece).abs();
            }
        }
    }
    total
}

/// Exact polygon IoU by triangulating both inputs and summing convex
/// triangle-pair intersections. Rejects self-intersecting polygons.
pub fn polygon_iou(a: &Polygon, b: &Polygon) -> Result<f64> {
    if !a.is_simple() || !b.is_simple() {
        return Err(GeometryError::SelfIntersecting);
    }
    let (area_a, area_b) = (a.area(), b.area());
    if area_a <= 0.0 || area_b <= 0.0 {
        return Err(GeometryError::Degenerate("polygon has zero area".into()));
    }
    let (Ok(ba), Ok(bb)) = (a.bbox(), b.bbox()) else {
        return Err(GeometryError::Degenerate("polygon has no box".into()));
    };
    if ba.intersection_area(&bb) <= 0.0 {
        return Ok(0.0);
    }
    match (triangulate(a.points()), triangulate(b.points())) {
        (Some(ta), Some(tb)) => {
            let inter = intersection_area_exact(&ta, &tb).min(area_a.min(area_b));
            let union = area_a + area_b - inter;
            Ok((inter / union).clamp(0.0, 1.0))
        }
        _ => Ok(raster_iou(a.points(), b.points())),
    }
}

/// IoU usable on arbitrary rings, including self-intersecting predictions.
/// Simple rings use the exact route; anything else is rasterized at a
/// quarter-unit grid with even-odd filling.
pub fn polygon_iou_lenient(a: &[Point2], b: &[Point2]) -> f64 {
    if let (Ok(pa), Ok(pb)) = (Polygon::new(a.to_vec()), Polygon::new(b.to_vec())) {
        if let Ok(v) = polygon_iou(&pa, &pb) {
            return v;
        }
    }
    raster_iou(a, b)
}

/// Samples per unit length for the rasterized fallback.
const RASTER_RESOLUTION: f64 = 4.0;

/// Even-odd point-in-ring test.
pub fn point_in_ring(p: Point2, ring: &[Point2]) -> bool {
    let n = ring.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (ring[i], ring[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn raster_iou(a: &[Point2], b: &[Point2]) -> f64 {
    if a.len() < 3 || b.len() < 3 {
        return 0.0;
    }
    let all: Vec<Point2> = a.iter().chain(b.iter()).copied().collect();
    let Ok(frame) = BBox::enclosing(&all) else {
        return 0.0;
    };
    let cell = 1.0 / RASTER_RESOLUTION;
    let nx = (frame.width() / cell).ceil() as usize + 1;
    let ny = (frame.height() / cell).ceil() as usize + 1;
    let (mut inter, mut union) = (0usize, 0usize);
    for iy in 0..ny {
        for ix in 0..nx {
            let p = Point2::new(
                frame.x_min + (ix as f64 + 0.5) * cell,
                frame.y_min + (iy as f64 + 0.5) * cell,
            );
            let (ia, ib) = (point_in_ring(p, a), point_in_ring(p, b));
            if ia && ib {
                inter += 1;
            }
            if ia || ib {
                union += 1;
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    fn poly(pts: &[(f64, f64)]) -> Polygon {
        Polygon::new(pts.iter().map(|&(x, y)| Point2::new(x, y)).collect()).unwrap()
    }

    fn dist_to_box_perimeter(b: &BBox, p: Point2) -> f64 {
        let edges = b.to_polygon();
        let pts = edges.points();
        (0..4)
            .map(|i| seg_dist(p, pts[i], pts[(i + 1) % 4]))
            .fold(f64::INFINITY, f64::min)
    }

    fn seg_dist(p: Point2, a: Point2, b: Point2) -> f64 {
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
        p.dist(&a.lerp(&b, t))
    }

    #[test]
    fn perimeter_sample_unit_box_corners() {
        let s = box_perimeter_sample(&bx(0.0, 0.0, 1.0, 1.0), 4).unwrap();
        let want = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        for (p, w) in s.iter().zip(want) {
            assert_eq!((p.x, p.y), w);
        }
        assert!(signed_area(&s) > 0.0);
    }

    #[test]
    fn perimeter_sample_unit_box_midpoints() {
        let s = box_perimeter_sample(&bx(0.0, 0.0, 1.0, 1.0), 8).unwrap();
        let want = [
            (0.0, 0.0),
            (0.5, 0.0),
            (1.0, 0.0),
            (1.0, 0.5),
            (1.0, 1.0),
            (0.5, 1.0),
            (0.0, 1.0),
            (0.0, 0.5),
        ];
        for (p, w) in s.iter().zip(want) {
            assert!((p.x - w.0).abs() < 1e-12 && (p.y - w.1).abs() < 1e-12);
        }
    }

    /// Arc position of a perimeter point, walking clockwise from top-left.
    fn arc_position(b: &BBox, p: Point2) -> f64 {
        let (w, h) = (b.width(), b.height());
        if (p.y - b.y_min).abs() < 1e-12 && p.x < b.x_max {
            p.x - b.x_min
        } else if (p.x - b.x_max).abs() < 1e-12 && p.y < b.y_max {
            w + (p.y - b.y_min)
        } else if (p.y - b.y_max).abs() < 1e-12 && p.x > b.x_min {
            w + h + (b.x_max - p.x)
        } else {
            2.0 * w + h + (b.y_max - p.y)
        }
    }

    #[test]
    fn perimeter_sample_gaps_are_uniform() {
        let b = bx(0.0, 0.0, 4.0, 2.0);
        let s = box_perimeter_sample(&b, 12).unwrap();
        assert_eq!(s.len(), 12);
        for k in 0..12 {
            let a = arc_position(&b, s[k]);
            let next = if k + 1 < 12 {
                arc_position(&b, s[k + 1])
            } else {
                12.0
            };
            assert!((next - a - 1.0).abs() < 1e-9, "gap {k}: {}", next - a);
        }
    }

    #[test]
    fn perimeter_sample_rejects_degenerate() {
        let flat = BBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 3.0,
            y_max: 0.0,
        };
        assert!(matches!(
            box_perimeter_sample(&flat, 8),
            Err(GeometryError::Degenerate(_))
        ));
        assert!(box_perimeter_sample(&bx(0.0, 0.0, 1.0, 1.0), 3).is_err());
    }

    #[test]
    fn densify_square() {
        let sq = poly(&[(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0)]);
        let d = densify_polygon(&sq, 1.0).unwrap();
        assert_eq!(d.len(), 8);
        assert_eq!(d.points()[1], Point2::new(1.0, 0.0));
    }

    #[test]
    fn densify_with_large_step_is_identity() {
        let p = poly(&[(0.0, 0.0), (5.0, 1.0), (3.0, 4.0), (-1.0, 2.0)]);
        let longest = (0..4)
            .map(|i| p.points()[i].dist(&p.points()[(i + 1) % 4]))
            .fold(0.0, f64::max);
        assert_eq!(densify_polygon(&p, longest).unwrap(), p);
    }

    #[test]
    fn densify_triangle_gaps_and_perimeter() {
        let t = poly(&[(0.0, 0.0), (3.0, 0.0), (0.0, 4.0)]);
        let d = densify_polygon(&t, 0.5).unwrap();
        let pts = d.points();
        let mut total = 0.0;
        for i in 0..pts.len() {
            let g = pts[i].dist(&pts[(i + 1) % pts.len()]);
            assert!(g <= 0.5 + 1e-12);
            total += g;
        }
        assert!((total - 12.0).abs() < 1e-9);
        for v in t.points() {
            assert!(pts.contains(v));
        }
    }

    #[test]
    fn assignment_on_boundary_is_identity() {
        let sq = densify_polygon(&poly(&[(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)]), 1.0)
            .unwrap();
        let samples: Vec<Point2> = sq.points().iter().step_by(2).copied().collect();
        let c = nearest_l1_assignment(&samples, &sq).unwrap();
        assert_eq!(c.vertices(), &samples[..]);
    }

    #[test]
    fn assignment_snaps_exterior_point_to_corner() {
        let sq = densify_polygon(&poly(&[(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)]), 0.5)
            .unwrap();
        let c = nearest_l1_assignment(&[Point2::new(5.0, 5.5)], &sq).unwrap();
        assert_eq!(c.vertices()[0], Point2::new(4.0, 4.0));
    }

    #[test]
    fn assignment_tie_goes_to_lowest_index() {
        let boundary = [Point2::new(1.0, 0.0), Point2::new(-1.0, 0.0)];
        let idx = nearest_l1_indices(&[Point2::new(0.0, 0.0)], &boundary).unwrap();
        assert_eq!(idx, vec![0]);
        assert!(nearest_l1_indices(&[Point2::new(0.0, 0.0)], &[]).is_err());
    }

    #[test]
    fn box_iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((box_iou(&a, &bx(1.0, 0.0, 3.0, 2.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn polygon_iou_examples() {
        let p = poly(&[(0.0, 0.0), (4.0, 0.0), (5.0, 3.0), (0.0, 4.0)]);
        assert!((polygon_iou(&p, &p).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(polygon_iou(&p, &p.translated(100.0, 0.0)).unwrap(), 0.0);
        let (a, b) = (bx(0.0, 0.0, 2.0, 2.0), bx(1.0, 0.5, 3.0, 3.0));
        let iou = polygon_iou(&a.to_polygon(), &b.to_polygon()).unwrap();
        assert!((iou - box_iou(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn polygon_iou_nonconvex() {
        // U shape vs its bounding square: area 12 of 16
        let u = poly(&[
            (0.0, 0.0),
            (1.0, 0.0),
            (1.0, 3.0),
            (3.0, 3.0),
            (3.0, 0.0),
            (4.0, 0.0),
            (4.0, 4.0),
            (0.0, 4.0),
        ]);
        let sq = bx(0.0, 0.0, 4.0, 4.0).to_polygon();
        assert!((u.area() - 10.0).abs() < 1e-12);
        assert!((polygon_iou(&u, &sq).unwrap() - 10.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn polygon_iou_rejects_bowtie() {
        let bow = Polygon::new(vec![
            Point2::new(0.0, 0.0),
            Point2::new(2.0, 2.0),
            Point2::new(2.0, 0.0),
            Point2::new(0.0, 2.0),
        ])
        .unwrap();
        let sq = bx(0.0, 0.0, 2.0, 2.0).to_polygon();
        assert_eq!(polygon_iou(&bow, &sq), Err(GeometryError::SelfIntersecting));
        let v = polygon_iou_lenient(bow.points(), sq.points());
        assert!((v - 0.5).abs() < 0.02, "{v}");
    }

    #[test]
    fn match_examples() {
        let gts = [
            bx(0.0, 0.0, 1.0, 1.0),
            bx(5.0, 5.0, 6.0, 6.0),
            bx(10.0, 0.0, 12.0, 3.0),
        ];
        let m = match_to_ground_truth(&gts[2], &gts);
        assert_eq!(
            m,
            MatchResult {
                gt_index: Some(2),
                best_iou: 1.0,
                is_false_positive: false
            }
        );
        let m = match_to_ground_truth(&bx(50.0, 50.0, 51.0, 51.0), &gts);
        assert!(m.is_false_positive && m.best_iou == 0.0);
        let m = match_to_ground_truth(&gts[0], &[]);
        assert_eq!(m.gt_index, None);
        assert!(m.is_false_positive);
    }

    #[test]
    fn match_prefers_higher_iou() {
        // pred [0,0,10,1]; gt A = [0,0,6,1] -> 0.6, gt B = [6,0,10,1] -> 0.4
        let pred = bx(0.0, 0.0, 10.0, 1.0);
        let gts = [bx(6.0, 0.0, 10.0, 1.0), bx(0.0, 0.0, 6.0, 1.0)];
        assert!((box_iou(&pred, &gts[0]) - 0.4).abs() < 1e-12);
        assert!((box_iou(&pred, &gts[1]) - 0.6).abs() < 1e-12);
        let m = match_to_ground_truth(&pred, &gts);
        assert_eq!(m.gt_index, Some(1));
        assert!(!m.is_false_positive);
    }

    fn ring(n: usize, seed: u64) -> Contour {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Contour::new(
            (0..n)
                .map(|_| Point2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn cyclic_alignment_recovers_rotation() {
        let p = ring(32, 1);
        assert_eq!(cyclic_alignment(&p, &p).unwrap(), (0, 0.0));
        assert_eq!(cyclic_alignment(&p, &p.rotated(5)).unwrap(), (5, 0.0));
        assert!(cyclic_alignment(&p, &ring(16, 1)).is_err());
    }

    #[test]
    fn cyclic_alignment_matches_brute_force() {
        let (p, g) = (ring(8, 2), ring(8, 3));
        let (u, loss) = cyclic_alignment(&p, &g).unwrap();
        let mut best = f64::INFINITY;
        for shift in 0..8 {
            let mut s = 0.0;
            for i in 0..8 {
                let q = g.vertices()[(shift + i) % 8];
                for d in [p.vertices()[i].x - q.x, p.vertices()[i].y - q.y] {
                    s += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
                }
            }
            best = best.min(s);
        }
        assert!((loss - best).abs() < 1e-12);
        assert!((shifted_smooth_l1(p.vertices(), g.vertices(), u) - best).abs() < 1e-12);
    }

    #[test]
    fn polygon_orientation_is_normalized() {
        let ccw = poly(&[(0.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, 0.0)]);
        assert!(signed_area(ccw.points()) > 0.0);
        assert!(Polygon::new(vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)]).is_err());
        assert!(Polygon::new(vec![
            Point2::new(0.0, 0.0),
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 1.0)
        ])
        .is_err());
    }

    #[test]
    fn polygon_json_is_pairs() {
        let p = poly(&[(0.0, 0.0), (2.0, 0.0), (2.0, 1.5)]);
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, "[[0.0,0.0],[2.0,0.0],[2.0,1.5]]");
        let back: Polygon = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn perimeter_samples_lie_on_box(b in arb_box(), count in 4usize..64) {
            let s = box_perimeter_sample(&b, count).unwrap();
            let step = 2.0 * (b.width() + b.height()) / count as f64;
            prop_assert_eq!(s[0], Point2::new(b.x_min, b.y_min));
            for (k, p) in s.iter().enumerate() {
                prop_assert!(dist_to_box_perimeter(&b, *p) < 1e-9);
                let next = if k + 1 < count { arc_position(&b, s[k + 1]) } else { 2.0 * (b.width() + b.height()) };
                prop_assert!((next - arc_position(&b, *p) - step).abs() < 1e-9);
            }
        }

        #[test]
        fn box_iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let (x, y) = (box_iou(&a, &b), box_iou(&b, &a));
            prop_assert_eq!(x, y);
            prop_assert!((0.0..=1.0).contains(&x));
            let p = polygon_iou(&a.to_polygon(), &b.to_polygon()).unwrap();
            prop_assert!((p - x).abs() < 1e-9);
            prop_assert!((polygon_iou(&b.to_polygon(), &a.to_polygon()).unwrap() - p).abs() < 1e-12);
        }

        #[test]
        fn box_iou_shrinks_with_overlap(a in arb_box(), shift in 0.0..10.0f64) {
            let moved = |d: f64| BBox::new(a.x_min + d, a.y_min, a.x_max + d, a.y_max).unwrap();
            prop_assert!(box_iou(&a, &moved(shift)) >= box_iou(&a, &moved(shift + 0.5)));
        }

        #[test]
        fn false_positive_flag_is_monotone(a in arb_box(), gt in arb_box(), t in 0.0..1.0f64) {
            // sliding the prediction toward the gt center never hurts
            let c = gt.center();
            let pc = a.center();
            let (dx, dy) = ((c.x - pc.x) * t, (c.y - pc.y) * t);
            let closer = BBox::new(a.x_min + dx, a.y_min + dy, a.x_max + dx, a.y_max + dy).unwrap();
            let before = match_to_ground_truth(&a, &[gt]);
            let after = match_to_ground_truth(&closer, &[gt]);
            if box_iou(&closer, &gt) >= box_iou(&a, &gt) && !before.is_false_positive {
                prop_assert!(!after.is_false_positive);
            }
        }

        #[test]
        fn cyclic_loss_invariant_to_joint_rotation(seed in 0u64..1000, k in 0usize..16) {
            let (p, g) = (ring(16, seed), ring(16, seed + 7919));
            let (u, l) = cyclic_alignment(&p, &g).unwrap();
            let (u2, l2) = cyclic_alignment(&p.rotated(k), &g.rotated(k)).unwrap();
            prop_assert!((l - l2).abs() < 1e-9);
            let (u3, l3) = cyclic_alignment(&p, &g.rotated(k)).unwrap();
            prop_assert!((l - l3).abs() < 1e-9);
            prop_assert_eq!(u3, (u + k) % 16);
            let _ = u2;
        }
    }
}
