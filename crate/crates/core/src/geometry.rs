//! Rotated-rectangle and 3D box geometry.
//!
//! Boxes use the BEV convention where yaw is measured counter-clockwise from
//! the +x axis and the length `l` lies along the heading. Everything here is
//! `f64`; the clipping routine is numerically delicate and single precision
//! does not hold the symmetry and rigid-motion invariants.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Wrap an angle into `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> f64 {
    if !theta.is_finite() {
        return theta;
    }
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// A 7-attribute box: center, extents along the box axes, and BEV yaw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box7 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl Box7 {
    /// Builds a box and wraps `theta` into `(-pi, pi]`.
    pub fn new(x: f64, y: f64, z: f64, l: f64, w: f64, h: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            z,
            l,
            w,
            h,
            theta: normalize_angle(theta),
        }
    }

    /// Returns the name of the first violated invariant, if any.
    pub fn invalid_field(&self) -> Option<&'static str> {
        let fields = [
            ("x", self.x),
            ("y", self.y),
            ("z", self.z),
            ("l", self.l),
            ("w", self.w),
            ("h", self.h),
            ("theta", self.theta),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Some(name);
            }
        }
        if self.l <= 0.0 {
            return Some("l");
        }
        if self.w <= 0.0 {
            return Some("w");
        }
        if self.h <= 0.0 {
            return Some("h");
        }
        if self.theta <= -PI || self.theta > PI {
            return Some("theta");
        }
        None
    }

    pub fn is_valid(&self) -> bool {
        self.invalid_field().is_none()
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn z_range(&self) -> (f64, f64) {
        (self.z - 0.5 * self.h, self.z + 0.5 * self.h)
    }

    /// Whether the BEV point lies inside (or on the boundary of) the rectangle.
    pub fn contains_bev(&self, px: f64, py: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = px - self.x;
        let dy = py - self.y;
        let along = dx * c + dy * s;
        let across = -dx * s + dy * c;
        along.abs() <= 0.5 * self.l && across.abs() <= 0.5 * self.w
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Convex polygon with counter-clockwise vertices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvexPolygon {
    pub vertices: Vec<Point2>,
}

impl ConvexPolygon {
    pub fn new(vertices: Vec<Point2>) -> Self {
        Self { vertices }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.len() < 3
    }

    /// Shoelace area; non-negative for CCW input, zero for fewer than 3 vertices.
    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        if n < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        for k in 0..n {
            let a = self.vertices[k];
            let b = self.vertices[(k + 1) % n];
            acc += a.x * b.y - a.y * b.x;
        }
        (0.5 * acc).max(0.0)
    }
}

/// The four BEV corners of a box, counter-clockwise, starting at the
/// front-left corner (`+l/2`, `+w/2` in box coordinates) mirrored to rear.
pub fn bev_corners(b: &Box7) -> ConvexPolygon {
    let (s, c) = b.theta.sin_cos();
    let hl = 0.5 * b.l;
    let hw = 0.5 * b.w;
    let local = [(hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)];
    let vertices = local
        .iter()
        .map(|&(u, v)| Point2::new(b.x + u * c - v * s, b.y + u * s + v * c))
        .collect();
    ConvexPolygon::new(vertices)
}

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Intersection of the segment `p -> q` with the infinite line through `a -> b`.
fn line_intersection(p: Point2, q: Point2, a: Point2, b: Point2) -> Point2 {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let t = dp / (dp - dq);
    Point2::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

/// Sutherland-Hodgman clipping of one convex CCW polygon against another.
///
/// Degenerate contacts (shared edge, touching corner) come out with area 0.
pub fn polygon_clip(subject: &ConvexPolygon, clip: &ConvexPolygon) -> ConvexPolygon {
    if subject.is_empty() || clip.is_empty() {
        return ConvexPolygon::empty();
    }
    let mut output = subject.vertices.clone();
    let m = clip.vertices.len();
    for e in 0..m {
        if output.is_empty() {
            break;
        }
        let a = clip.vertices[e];
        let b = clip.vertices[(e + 1) % m];
        let input = std::mem::take(&mut output);
        let n = input.len();
        for k in 0..n {
            let cur = input[k];
            let prev = input[(k + n - 1) % n];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    output.dedup_by(|p, q| p.x == q.x && p.y == q.y);
    if output.len() > 1 {
        let first = output[0];
        let last = output[output.len() - 1];
        if first.x == last.x && first.y == last.y {
            output.pop();
        }
    }
    if output.len() < 3 {
        return ConvexPolygon::empty();
    }
    ConvexPolygon::new(output)
}

/// BEV overlap area of two boxes.
pub fn bev_intersection_area(a: &Box7, b: &Box7) -> f64 {
    // Cheap reject on circumscribed circles.
    let ra = 0.5 * a.l.hypot(a.w);
    let rb = 0.5 * b.l.hypot(b.w);
    let d = (a.x - b.x).hypot(a.y - b.y);
    if d >= ra + rb {
        return 0.0;
    }
    let inter = polygon_clip(&bev_corners(a), &bev_corners(b)).area();
    inter.min(a.bev_area()).min(b.bev_area())
}

/// Rotated BEV intersection-over-union. The result is symmetric in its
/// arguments: the clip is always run with the arguments in a canonical order.
pub fn rotated_iou_bev(a: &Box7, b: &Box7) -> f64 {
    let (p, q) = if canonical_le(a, b) { (a, b) } else { (b, a) };
    let inter = bev_intersection_area(p, q);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = p.bev_area() + q.bev_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

fn canonical_le(a: &Box7, b: &Box7) -> bool {
    let ka = [a.x, a.y, a.l, a.w, a.theta];
    let kb = [b.x, b.y, b.l, b.w, b.theta];
    for (u, v) in ka.iter().zip(kb.iter()) {
        match u.partial_cmp(v) {
            Some(std::cmp::Ordering::Less) => return true,
            Some(std::cmp::Ordering::Greater) => return false,
            _ => {}
        }
    }
    true
}

/// 3D IoU: BEV overlap times vertical overlap over the 3D union.
pub fn iou_3d(a: &Box7, b: &Box7) -> f64 {
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = (a1.min(b1) - a0.max(b0)).max(0.0);
    if dz <= 0.0 {
        return 0.0;
    }
    let (p, q) = if canonical_le(a, b) { (a, b) } else { (b, a) };
    let inter = bev_intersection_area(p, q) * dz;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy rotated NMS. Candidates are visited by descending score with ties
/// broken by lower original index; a candidate is dropped when its BEV IoU
/// with an already-kept box exceeds `iou_thresh`. Returned indices are in
/// visiting order, i.e. sorted by score descending.
pub fn rotated_nms(boxes: &[Box7], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "one score per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for idx in order {
        let suppressed = kept
            .iter()
            .any(|&k| rotated_iou_bev(&boxes[k], &boxes[idx]) > iou_thresh);
        if !suppressed {
            kept.push(idx);
        }
    }
    kept
}
