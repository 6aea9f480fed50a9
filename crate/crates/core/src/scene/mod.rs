//! Synthetic BEV scenes.
//!
//! Objects are rectangular boxes resting on the ground. Points are sampled
//! only on the faces that look toward the sensor, with a per-object budget
//! that falls off with the square of the range. This makes the point
//! distribution inside each box depend on the object's heading and on where
//! it sits relative to the sensor.

mod features;
mod grid;
mod io;

pub use features::{box_filter3, rasterize_features, FeatureSpec, RasterStats, BASE_CHANNELS};
pub use grid::{BevGrid, Pixel};
pub use io::{load_frames, parse_frames, save_frames, write_frames};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::geometry::{bev_intersection_area, Box7};

/// One LiDAR return: position in meters and reflectance in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub class_id: usize,
    pub bbox: Box7,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub frame_id: u64,
    pub points: Vec<Point>,
    pub gts: Vec<GtBox>,
}

impl Frame {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (index, gt) in self.gts.iter().enumerate() {
            if let Some(field) = gt.bbox.invalid_field() {
                return Err(Error::InvalidBox {
                    frame_id: self.frame_id,
                    index,
                    field: field.to_string(),
                });
            }
            if gt.class_id >= num_classes {
                return Err(Error::InvalidBox {
                    frame_id: self.frame_id,
                    index,
                    field: "cls".to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Size prior of one object class, as uniform ranges in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    pub name: String,
    pub weight: f64,
    pub length: (f64, f64),
    pub width: (f64, f64),
    pub height: (f64, f64),
}

pub fn default_class_priors() -> Vec<ClassPrior> {
    vec![
        ClassPrior {
            name: "vehicle".into(),
            weight: 0.5,
            length: (3.8, 5.2),
            width: (1.7, 2.1),
            height: (1.4, 1.8),
        },
        ClassPrior {
            name: "pedestrian".into(),
            weight: 0.25,
            length: (0.6, 1.0),
            width: (0.5, 0.8),
            height: (1.5, 1.9),
        },
        ClassPrior {
            name: "cyclist".into(),
            weight: 0.25,
            length: (1.6, 2.0),
            width: (0.5, 0.8),
            height: (1.5, 1.9),
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub grid: BevGrid,
    pub z_min: f64,
    pub z_max: f64,
    pub sensor_x: f64,
    pub sensor_y: f64,
    pub sensor_z: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub classes: Vec<ClassPrior>,
    /// Points per object at 1 m range; the budget is `base_rate / range^2`.
    pub base_rate: f64,
    pub min_points: usize,
    pub max_points: usize,
    pub ground_points: usize,
    pub clutter_min: usize,
    pub clutter_max: usize,
    pub point_jitter: f64,
    /// Keep-out distance from the grid border for object centers.
    pub margin: f64,
    /// Extra clearance between placed objects.
    pub spacing: f64,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let grid = BevGrid::default();
        Self {
            grid,
            z_min: -1.0,
            z_max: 4.0,
            sensor_x: grid.origin_x,
            sensor_y: grid.origin_y,
            sensor_z: 2.0,
            min_objects: 4,
            max_objects: 10,
            classes: default_class_priors(),
            base_rate: 40_000.0,
            min_points: 6,
            max_points: 600,
            ground_points: 400,
            clutter_min: 0,
            clutter_max: 4,
            point_jitter: 0.03,
            margin: 3.0,
            spacing: 0.6,
            max_retries: 100,
        }
    }
}

impl SceneConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.classes.is_empty() {
            return Err(Error::config("scene.classes", "at least one class is required"));
        }
        for c in &self.classes {
            for (name, (lo, hi)) in [("length", c.length), ("width", c.width), ("height", c.height)] {
                if !(lo > 0.0 && hi >= lo) {
                    return Err(Error::config(
                        format!("scene.class.{}.{}", c.name, name),
                        "range must satisfy 0 < lo <= hi",
                    ));
                }
            }
            if !(c.weight >= 0.0) {
                return Err(Error::config(format!("scene.class.{}.weight", c.name), "must be >= 0"));
            }
        }
        if self.classes.iter().map(|c| c.weight).sum::<f64>() <= 0.0 {
            return Err(Error::config("scene.classes", "weights must not all be zero"));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::config("scene.min_objects", "must not exceed scene.max_objects"));
        }
        if self.clutter_min > self.clutter_max {
            return Err(Error::config("scene.clutter_min", "must not exceed scene.clutter_max"));
        }
        if self.min_points > self.max_points {
            return Err(Error::config("scene.min_points", "must not exceed scene.max_points"));
        }
        if !(self.z_max > self.z_min) {
            return Err(Error::config("scene.z_max", "must exceed scene.z_min"));
        }
        if !(self.base_rate >= 0.0) || !(self.point_jitter >= 0.0) || !(self.margin >= 0.0) {
            return Err(Error::config("scene", "rates, jitter and margin must be non-negative"));
        }
        let g = &self.grid;
        if 2.0 * self.margin >= g.cell * g.height.min(g.width) as f64 {
            return Err(Error::config("scene.margin", "leaves no room for objects"));
        }
        Ok(())
    }

    pub fn feature_spec(&self, channels: usize) -> FeatureSpec {
        FeatureSpec {
            channels,
            sensor_x: self.sensor_x,
            sensor_y: self.sensor_y,
            range_scale: 100.0,
        }
    }

    pub fn sensor_range(&self, x: f64, y: f64) -> f64 {
        (x - self.sensor_x).hypot(y - self.sensor_y)
    }

    /// Unclamped per-object point budget at BEV range `range`.
    pub fn expected_point_count(&self, range: f64) -> f64 {
        self.base_rate / range.max(1.0).powi(2)
    }

    pub fn point_budget(&self, range: f64) -> usize {
        let n = self.expected_point_count(range).round() as usize;
        n.clamp(self.min_points, self.max_points)
    }

    fn in_bounds(&self, x: f64, y: f64, z: f64) -> bool {
        self.grid.contains(x, y) && z >= self.z_min && z <= self.z_max
    }
}

/// Samples `index` from `weights` (not necessarily normalised).
fn weighted_pick(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, &w) in weights.iter().enumerate() {
        if u < w {
            return k;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// A planar face of a box: center, outward normal, and two spanning half-axes.
struct Face {
    center: [f64; 3],
    normal: [f64; 3],
    u: [f64; 3],
    v: [f64; 3],
    area: f64,
}

fn box_faces(b: &Box7) -> [Face; 5] {
    let (s, c) = b.theta.sin_cos();
    let fwd = [c, s, 0.0];
    let left = [-s, c, 0.0];
    let up = [0.0, 0.0, 1.0];
    let hl = 0.5 * b.l;
    let hw = 0.5 * b.w;
    let hh = 0.5 * b.h;
    let at = |a: f64, bb: f64, cc: f64| {
        [
            b.x + a * fwd[0] + bb * left[0],
            b.y + a * fwd[1] + bb * left[1],
            b.z + cc,
        ]
    };
    let scale = |v: [f64; 3], k: f64| [v[0] * k, v[1] * k, v[2] * k];
    let neg = |v: [f64; 3]| [-v[0], -v[1], -v[2]];
    [
        Face {
            center: at(hl, 0.0, 0.0),
            normal: fwd,
            u: scale(left, hw),
            v: scale(up, hh),
            area: b.w * b.h,
        },
        Face {
            center: at(-hl, 0.0, 0.0),
            normal: neg(fwd),
            u: scale(left, hw),
            v: scale(up, hh),
            area: b.w * b.h,
        },
        Face {
            center: at(0.0, hw, 0.0),
            normal: left,
            u: scale(fwd, hl),
            v: scale(up, hh),
            area: b.l * b.h,
        },
        Face {
            center: at(0.0, -hw, 0.0),
            normal: neg(left),
            u: scale(fwd, hl),
            v: scale(up, hh),
            area: b.l * b.h,
        },
        Face {
            center: at(0.0, 0.0, hh),
            normal: up,
            u: scale(fwd, hl),
            v: scale(left, hw),
            area: b.l * b.w,
        },
    ]
}

/// Projected area of each face as seen from the sensor; zero for faces
/// turned away from it.
fn face_visibility(config: &SceneConfig, b: &Box7) -> ([Face; 5], [f64; 5]) {
    let faces = box_faces(b);
    let mut weights = [0.0; 5];
    for (k, f) in faces.iter().enumerate() {
        let d = [
            config.sensor_x - f.center[0],
            config.sensor_y - f.center[1],
            config.sensor_z - f.center[2],
        ];
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if norm <= 0.0 {
            continue;
        }
        let cos = (f.normal[0] * d[0] + f.normal[1] * d[1] + f.normal[2] * d[2]) / norm;
        weights[k] = (cos.max(0.0)) * f.area;
    }
    (faces, weights)
}

fn place_objects(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<GtBox> {
    let g = &config.grid;
    let count = rng.random_range(config.min_objects..=config.max_objects);
    let weights: Vec<f64> = config.classes.iter().map(|c| c.weight).collect();
    let x_range = (g.origin_x + config.margin, g.x_max() - config.margin);
    let y_range = (g.origin_y + config.margin, g.y_max() - config.margin);
    let mut placed: Vec<GtBox> = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = weighted_pick(rng, &weights);
        let prior = &config.classes[class_id];
        for _ in 0..config.max_retries.max(1) {
            let l = uniform(rng, prior.length);
            let w = uniform(rng, prior.width);
            let h = uniform(rng, prior.height);
            let theta = FRAC_PI_2 - rng.random::<f64>() * PI;
            let x = uniform(rng, x_range);
            let y = uniform(rng, y_range);
            let bbox = Box7::new(x, y, 0.5 * h, l, w, h, theta);
            let padded = Box7 {
                l: l + config.spacing,
                w: w + config.spacing,
                ..bbox
            };
            let center = g.pixel_of(x, y);
            let clear = placed.iter().all(|o| {
                bev_intersection_area(&padded, &o.bbox) <= 0.0
                    && g.pixel_of(o.bbox.x, o.bbox.y) != center
            });
            if clear && center.is_some() {
                placed.push(GtBox { class_id, bbox });
                break;
            }
        }
    }
    placed
}

fn sample_face_point(
    rng: &mut ChaCha8Rng,
    f: &Face,
    jitter: &Normal<f64>,
) -> (f64, f64, f64) {
    let a: f64 = rng.random_range(-1.0..1.0);
    let b: f64 = rng.random_range(-1.0..1.0);
    let mut p = [0.0; 3];
    for k in 0..3 {
        p[k] = f.center[k] + a * f.u[k] + b * f.v[k] + jitter.sample(rng);
    }
    (p[0], p[1], p[2])
}

/// Generates one frame. Fully determined by `(config, seed)`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Frame {
    generate_frame(config, seed, 0)
}

/// Like [`generate_scene`] but stamps `frame_id` on the result.
pub fn generate_frame(config: &SceneConfig, seed: u64, frame_id: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, config.point_jitter.max(1e-12)).expect("finite jitter");
    let gts = place_objects(config, &mut rng);
    let mut points = Vec::new();

    for gt in &gts {
        let b = &gt.bbox;
        let (faces, weights) = face_visibility(config, b);
        if weights.iter().all(|&w| w <= 0.0) {
            continue;
        }
        let budget = config.point_budget(config.sensor_range(b.x, b.y));
        let reflect = rng.random_range(0.3..0.9);
        for _ in 0..budget {
            let f = &faces[weighted_pick(&mut rng, &weights)];
            let (x, y, z) = sample_face_point(&mut rng, f, &jitter);
            let noise: f64 = rng.sample(StandardNormal);
            let r = (reflect + 0.05 * noise).clamp(0.0, 1.0);
            if config.in_bounds(x, y, z) {
                points.push(Point { x, y, z, r });
            }
        }
    }

    // Small unlabeled clusters (bushes, poles) that look object-like.
    let g = config.grid;
    let clutter = rng.random_range(config.clutter_min..=config.clutter_max);
    for _ in 0..clutter {
        let cx = rng.random_range(g.origin_x..g.x_max());
        let cy = rng.random_range(g.origin_y..g.y_max());
        let radius = rng.random_range(0.3..0.9);
        let top = rng.random_range(0.5..1.6);
        let n = (0.3 * config.expected_point_count(config.sensor_range(cx, cy))).round() as usize;
        let n = n.clamp(config.min_points, config.max_points / 2);
        for _ in 0..n {
            let ang = rng.random_range(-PI..PI);
            let rad = radius * rng.random::<f64>().sqrt();
            let x = cx + rad * ang.cos();
            let y = cy + rad * ang.sin();
            let z = rng.random_range(0.0..top);
            let r = rng.random_range(0.05..0.4);
            if config.in_bounds(x, y, z) && !gts.iter().any(|gt| gt.bbox.contains_bev(x, y)) {
                points.push(Point { x, y, z, r });
            }
        }
    }

    for _ in 0..config.ground_points {
        let x = rng.random_range(g.origin_x..g.x_max());
        let y = rng.random_range(g.origin_y..g.y_max());
        let noise: f64 = rng.sample(StandardNormal);
        let z = 0.05 * noise;
        let r = rng.random_range(0.0..0.2);
        if config.in_bounds(x, y, z) {
            points.push(Point { x, y, z, r });
        }
    }

    Frame {
        frame_id,
        points,
        gts,
    }
}

/// `count` frames with ids `first_id..first_id+count`, each seeded with
/// `seed + frame_id`.
pub fn generate_frames(config: &SceneConfig, seed: u64, first_id: u64, count: usize) -> Vec<Frame> {
    (0..count as u64)
        .map(|k| {
            let id = first_id + k;
            generate_frame(config, seed.wrapping_add(id), id)
        })
        .collect()
}
