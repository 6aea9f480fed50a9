//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod gradcheck;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use dirmlab::geometry::Box7;

/// True if `(px, py)` lies inside the BEV rectangle of `b`.
pub fn inside(b: &Box7, px: f64, py: f64) -> bool {
    let (s, c) = b.theta.sin_cos();
    let dx = px - b.x;
    let dy = py - b.y;
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    u.abs() <= 0.5 * b.l && v.abs() <= 0.5 * b.w
}

/// BEV IoU estimated by jittered stratified sampling over the smaller box:
/// one uniform point in each cell of an `n x n` grid laid over it, so the
/// estimate uses `n^2` samples.
pub fn monte_carlo_iou_bev(a: &Box7, b: &Box7, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (p, q) = if a.l * a.w <= b.l * b.w { (a, b) } else { (b, a) };
    let (s, c) = p.theta.sin_cos();
    let mut hits = 0usize;
    let inv = 1.0 / n as f64;
    for i in 0..n {
        for j in 0..n {
            let u = ((i as f64 + rng.random::<f64>()) * inv - 0.5) * p.l;
            let v = ((j as f64 + rng.random::<f64>()) * inv - 0.5) * p.w;
            let x = p.x + u * c - v * s;
            let y = p.y + u * s + v * c;
            if inside(q, x, y) {
                hits += 1;
            }
        }
    }
    let area_p = p.l * p.w;
    let inter = area_p * hits as f64 / (n * n) as f64;
    let union = area_p + q.l * q.w - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A pair of boxes close enough that most pairs overlap.
pub fn random_box_pair(rng: &mut ChaCha8Rng) -> (Box7, Box7) {
    let mut one = |cx: f64, cy: f64, spread: f64| {
        Box7::new(
            cx + rng.random_range(-spread..=spread),
            cy + rng.random_range(-spread..=spread),
            0.0,
            rng.random_range(0.5..5.0),
            rng.random_range(0.3..3.0),
            1.0,
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        )
    };
    let a = one(0.0, 0.0, 2.0);
    let b = one(a.x, a.y, 2.5);
    (a, b)
}
