//! Sample assignment: which pixels supervise which attribute groups.
//!
//! The center-based baseline gives every attribute group a single sample at
//! the pixel containing the object center. Decoupled assignment lets a
//! chosen subset of groups (by default only the center offset) use several
//! samples per object, first picked by local point density and later by the
//! measured quality of the box each candidate pixel decodes to.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::geometry::Box7;
use crate::scene::{BevGrid, Frame, Pixel};
use crate::tensor::Tensor3;

/// One regression task of the box head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttributeGroup {
    /// Sub-pixel center offset `(d_x, d_y)`.
    Xy,
    Z,
    /// `(ln l, ln w, ln h)`.
    Lwh,
    /// `(sin theta, cos theta)`.
    Theta,
}

impl AttributeGroup {
    pub const ALL: [AttributeGroup; 4] = [Self::Xy, Self::Z, Self::Lwh, Self::Theta];

    pub fn dims(self) -> usize {
        match self {
            Self::Xy => 2,
            Self::Z => 1,
            Self::Lwh => 3,
            Self::Theta => 2,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Xy => "xy",
            Self::Z => "z",
            Self::Lwh => "lwh",
            Self::Theta => "theta",
        }
    }
}

impl FromStr for AttributeGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim() {
            "xy" | "center" => Ok(Self::Xy),
            "z" => Ok(Self::Z),
            "lwh" => Ok(Self::Lwh),
            "theta" => Ok(Self::Theta),
            other => Err(Error::config("dar_groups", format!("unknown attribute group `{other}`"))),
        }
    }
}

/// Set of attribute groups that get decoupled multi-sample assignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupSet(u8);

impl GroupSet {
    pub fn empty() -> Self {
        GroupSet(0)
    }

    pub fn only_center() -> Self {
        GroupSet(1)
    }

    pub fn all() -> Self {
        GroupSet(0b1111)
    }

    pub fn with(mut self, g: AttributeGroup) -> Self {
        self.0 |= 1 << g.index();
        self
    }

    pub fn contains(&self, g: AttributeGroup) -> bool {
        self.0 & (1 << g.index()) != 0
    }

    pub fn iter(&self) -> impl Iterator<Item = AttributeGroup> + '_ {
        AttributeGroup::ALL.into_iter().filter(|g| self.contains(*g))
    }
}

impl Default for GroupSet {
    fn default() -> Self {
        Self::only_center()
    }
}

impl fmt::Display for GroupSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(|g| g.name()).collect();
        write!(f, "{}", names.join(","))
    }
}

impl FromStr for GroupSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        let mut set = GroupSet::empty();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            set = set.with(part.parse()?);
        }
        if !set.contains(AttributeGroup::Xy) {
            return Err(Error::config("dar_groups", "must contain the center group `xy`"));
        }
        Ok(set)
    }
}

/// Center offset of `gt` relative to the center of `pixel`, in pixel units.
pub fn encode_center_offset(gt: &Box7, pixel: Pixel, grid: &BevGrid) -> (f64, f64) {
    let (cx, cy) = grid.pixel_center(pixel);
    ((gt.x - cx) / grid.cell, (gt.y - cy) / grid.cell)
}

/// Regression target of one group at `pixel`; unused trailing entries are 0.
pub fn encode_group_target(gt: &Box7, pixel: Pixel, grid: &BevGrid, group: AttributeGroup) -> [f64; 3] {
    match group {
        AttributeGroup::Xy => {
            let (dx, dy) = encode_center_offset(gt, pixel, grid);
            [dx, dy, 0.0]
        }
        AttributeGroup::Z => [gt.z, 0.0, 0.0],
        AttributeGroup::Lwh => [gt.l.ln(), gt.w.ln(), gt.h.ln()],
        AttributeGroup::Theta => {
            let (s, c) = gt.theta.sin_cos();
            [s, c, 0.0]
        }
    }
}

pub fn encode_box_targets(gt: &Box7, pixel: Pixel, grid: &BevGrid) -> [[f64; 3]; 4] {
    AttributeGroup::ALL.map(|g| encode_group_target(gt, pixel, grid, g))
}

/// Pixel containing the box center, or `None` if it lies outside the grid.
pub fn center_pixel(gt: &Box7, grid: &BevGrid) -> Option<Pixel> {
    grid.pixel_of(gt.x, gt.y)
}

/// Gaussian radius such that a corner-shifted box keeps `min_overlap` IoU
/// with the original, for a box of `height x width` pixels.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let b1 = height + width;
    let c1 = width * height * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).max(0.0).sqrt()) / 2.0;

    let b2 = 2.0 * (height + width);
    let c2 = (1.0 - min_overlap) * width * height;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).max(0.0).sqrt()) / 2.0;

    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (height + width);
    let c3 = (min_overlap - 1.0) * width * height;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).max(0.0).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

pub const MIN_HEATMAP_RADIUS: usize = 2;
pub const HEATMAP_MIN_OVERLAP: f64 = 0.7;

/// Heatmap target parameters of one object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSplat {
    pub class_id: usize,
    pub center: Pixel,
    pub radius: usize,
}

impl HeatmapSplat {
    pub fn for_box(class_id: usize, gt: &Box7, center: Pixel, grid: &BevGrid) -> Self {
        let r = gaussian_radius(gt.l / grid.cell, gt.w / grid.cell, HEATMAP_MIN_OVERLAP);
        let radius = (r.max(0.0).floor() as usize).max(MIN_HEATMAP_RADIUS);
        Self {
            class_id,
            center,
            radius,
        }
    }

    /// Draws the Gaussian into `map` with an elementwise max.
    pub fn draw(&self, map: &mut Tensor3) {
        let r = self.radius as isize;
        let sigma = (2.0 * self.radius as f64 + 1.0) / 6.0;
        let denom = 2.0 * sigma * sigma;
        for di in -r..=r {
            for dj in -r..=r {
                let i = self.center.i as isize + di;
                let j = self.center.j as isize + dj;
                if i < 0 || j < 0 || i as usize >= map.height || j as usize >= map.width {
                    continue;
                }
                let v = (-((di * di + dj * dj) as f64) / denom).exp();
                if v < f64::EPSILON {
                    continue;
                }
                let k = map.idx(self.class_id, i as usize, j as usize);
                if v > map.data[k] {
                    map.data[k] = v;
                }
            }
        }
    }
}

/// One supervised pixel for one attribute group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub pixel: Pixel,
    pub target: [f64; 3],
    pub weight: f64,
}

/// Regression assignment of one ground-truth box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtPlan {
    pub gt_index: usize,
    pub class_id: usize,
    pub center: Pixel,
    /// Indexed by [`AttributeGroup::index`].
    pub groups: [Vec<Sample>; 4],
}

impl GtPlan {
    pub fn group(&self, g: AttributeGroup) -> &[Sample] {
        &self.groups[g.index()]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AssignmentPlan {
    pub splats: Vec<HeatmapSplat>,
    pub gts: Vec<GtPlan>,
    /// Boxes whose centers fall outside the grid.
    pub skipped_out_of_bounds: usize,
    /// Groups that received fewer samples than requested.
    pub shortfalls: usize,
}

impl AssignmentPlan {
    pub fn render_heatmap(&self, num_classes: usize, grid: &BevGrid) -> Tensor3 {
        let mut map = Tensor3::zeros(num_classes, grid.height, grid.width);
        for s in &self.splats {
            s.draw(&mut map);
        }
        map
    }

    pub fn num_samples(&self, g: AttributeGroup) -> usize {
        self.gts.iter().map(|p| p.group(g).len()).sum()
    }

    /// All distinct pixels referenced by any sample or center, sorted.
    pub fn pixels(&self) -> Vec<Pixel> {
        let mut v: Vec<Pixel> = self
            .gts
            .iter()
            .flat_map(|p| {
                std::iter::once(p.center).chain(p.groups.iter().flatten().map(|s| s.pixel))
            })
            .collect();
        v.sort();
        v.dedup();
        v
    }
}

/// Per-object facts shared by every strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct GtContext {
    pub gt_index: usize,
    pub class_id: usize,
    pub bbox: Box7,
    pub center: Pixel,
    /// Center pixel plus every pixel whose center lies inside the box, sorted.
    pub pool: Vec<Pixel>,
}

/// Frame-level precomputation for assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignContext {
    pub grid: BevGrid,
    pub splats: Vec<HeatmapSplat>,
    /// Objects that own regression targets (one per center pixel).
    pub gts: Vec<GtContext>,
    pub skipped_out_of_bounds: usize,
    point_counts: Vec<f64>,
}

fn in_box_pixels(gt: &Box7, center: Pixel, grid: &BevGrid) -> Vec<Pixel> {
    let r = 0.5 * gt.l.hypot(gt.w);
    let lo = |v: f64, o: f64| (((v - r - o) / grid.cell).floor().max(0.0)) as usize;
    let hi = |v: f64, o: f64, n: usize| ((((v + r - o) / grid.cell).floor()).max(0.0) as usize).min(n - 1);
    let mut out = vec![center];
    for i in lo(gt.x, grid.origin_x)..=hi(gt.x, grid.origin_x, grid.height) {
        for j in lo(gt.y, grid.origin_y)..=hi(gt.y, grid.origin_y, grid.width) {
            let p = Pixel::new(i, j);
            let (cx, cy) = grid.pixel_center(p);
            if p != center && gt.contains_bev(cx, cy) {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

/// Number of frame points per grid cell.
pub fn point_counts(frame: &Frame, grid: &BevGrid) -> Vec<f64> {
    let mut counts = vec![0.0; grid.len()];
    for p in &frame.points {
        if let Some(px) = grid.pixel_of(p.x, p.y) {
            counts[grid.flat(px)] += 1.0;
        }
    }
    counts
}

fn richness_from_counts(counts: &[f64], grid: &BevGrid, p: Pixel) -> f64 {
    let own = counts[grid.flat(p)];
    let around: f64 = grid.neighbors8(p).map(|q| counts[grid.flat(q)]).sum();
    own + 0.5 * around
}

/// Points in the candidate's cell plus half the points in its 8-neighbourhood.
pub fn point_richness(frame: &Frame, grid: &BevGrid, candidates: &[Pixel]) -> Vec<f64> {
    let counts = point_counts(frame, grid);
    candidates
        .iter()
        .map(|&p| richness_from_counts(&counts, grid, p))
        .collect()
}

impl AssignContext {
    pub fn new(frame: &Frame, grid: &BevGrid) -> Self {
        let mut splats = Vec::new();
        let mut owners: Vec<GtContext> = Vec::new();
        let mut skipped = 0;
        for (gt_index, gt) in frame.gts.iter().enumerate() {
            let Some(center) = center_pixel(&gt.bbox, grid) else {
                skipped += 1;
                continue;
            };
            splats.push(HeatmapSplat::for_box(gt.class_id, &gt.bbox, center, grid));
            let ctx = GtContext {
                gt_index,
                class_id: gt.class_id,
                bbox: gt.bbox,
                center,
                pool: in_box_pixels(&gt.bbox, center, grid),
            };
            // Two centers on one pixel: the larger box keeps the regression targets.
            match owners.iter_mut().find(|o| o.center == center) {
                Some(o) => {
                    if gt.bbox.bev_area() > o.bbox.bev_area() {
                        *o = ctx;
                    }
                }
                None => owners.push(ctx),
            }
        }
        owners.sort_by_key(|o| o.gt_index);
        Self {
            grid: *grid,
            splats,
            gts: owners,
            skipped_out_of_bounds: skipped,
            point_counts: point_counts(frame, grid),
        }
    }

    pub fn richness(&self, p: Pixel) -> f64 {
        richness_from_counts(&self.point_counts, &self.grid, p)
    }

    /// Union of every object's candidate pool, sorted.
    pub fn candidate_pixels(&self) -> Vec<Pixel> {
        let mut v: Vec<Pixel> = self.gts.iter().flat_map(|g| g.pool.iter().copied()).collect();
        v.sort();
        v.dedup();
        v
    }

    fn sample(&self, gt: &GtContext, pixel: Pixel, group: AttributeGroup, weight: f64) -> Sample {
        Sample {
            pixel,
            target: encode_group_target(&gt.bbox, pixel, &self.grid, group),
            weight,
        }
    }

    fn plan_with(&self, mut pick: impl FnMut(&GtContext, AttributeGroup) -> (Vec<Pixel>, bool)) -> AssignmentPlan {
        let mut shortfalls = 0;
        let gts = self
            .gts
            .iter()
            .map(|g| {
                let groups = AttributeGroup::ALL.map(|group| {
                    let (pixels, short) = pick(g, group);
                    shortfalls += short as usize;
                    let w = 1.0 / pixels.len() as f64;
                    pixels.into_iter().map(|p| self.sample(g, p, group, w)).collect()
                });
                GtPlan {
                    gt_index: g.gt_index,
                    class_id: g.class_id,
                    center: g.center,
                    groups,
                }
            })
            .collect();
        AssignmentPlan {
            splats: self.splats.clone(),
            gts,
            skipped_out_of_bounds: self.skipped_out_of_bounds,
            shortfalls,
        }
    }

    pub fn baseline(&self) -> AssignmentPlan {
        self.plan_with(|g, _| (vec![g.center], false))
    }

    /// Every in-box pixel of the `(2r+1)^2` neighbourhood, for all groups, at
    /// full weight each.
    pub fn multipos(&self, radius: usize) -> AssignmentPlan {
        let r = radius as isize;
        let mut plan = self.plan_with(|g, _| {
            let mut px = vec![g.center];
            px.extend(g.pool.iter().copied().filter(|p| {
                *p != g.center
                    && (p.i as isize - g.center.i as isize).abs() <= r
                    && (p.j as isize - g.center.j as isize).abs() <= r
            }));
            (px, false)
        });
        for gt in &mut plan.gts {
            for s in gt.groups.iter_mut().flatten() {
                s.weight = 1.0;
            }
        }
        plan
    }

    /// Center pixel plus the `n - 1` richest in-box pixels for DAR groups.
    pub fn dar_static(&self, groups: GroupSet, n: usize) -> AssignmentPlan {
        let n = n.max(1);
        self.plan_with(|g, group| {
            if !groups.contains(group) {
                return (vec![g.center], false);
            }
            let mut others: Vec<(f64, Pixel)> = g
                .pool
                .iter()
                .filter(|&&p| p != g.center)
                .map(|&p| (self.richness(p), p))
                .collect();
            others.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut px = vec![g.center];
            px.extend(others.into_iter().take(n - 1).map(|(_, p)| p));
            let short = px.len() < n;
            (px, short)
        })
    }

    /// Top-`k` pool pixels by `quality(gt_index, pixel)` for DAR groups.
    pub fn dar_dynamic(
        &self,
        groups: GroupSet,
        k: usize,
        quality: &dyn Fn(usize, Pixel) -> f64,
    ) -> AssignmentPlan {
        let k = k.max(1);
        self.plan_with(|g, group| {
            if !groups.contains(group) {
                return (vec![g.center], false);
            }
            let mut scored: Vec<(f64, Pixel)> =
                g.pool.iter().map(|&p| (quality(g.gt_index, p), p)).collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let px: Vec<Pixel> = scored.into_iter().take(k).map(|(_, p)| p).collect();
            let short = px.len() < k;
            (px, short)
        })
    }

    pub fn dar_switch(
        &self,
        groups: GroupSet,
        state: &SwitchState,
        quality: &dyn Fn(usize, Pixel) -> f64,
    ) -> AssignmentPlan {
        match state.phase {
            Phase::Static => self.dar_static(groups, state.k),
            Phase::Dynamic => self.dar_dynamic(groups, state.k, quality),
        }
    }
}

pub fn assign_baseline(frame: &Frame, grid: &BevGrid) -> AssignmentPlan {
    AssignContext::new(frame, grid).baseline()
}

pub fn assign_multipos(frame: &Frame, grid: &BevGrid, radius: usize) -> AssignmentPlan {
    AssignContext::new(frame, grid).multipos(radius)
}

pub fn assign_dar_static(frame: &Frame, grid: &BevGrid, groups: GroupSet, n: usize) -> AssignmentPlan {
    AssignContext::new(frame, grid).dar_static(groups, n)
}

pub fn assign_dar_dynamic(
    frame: &Frame,
    grid: &BevGrid,
    groups: GroupSet,
    k: usize,
    quality: &dyn Fn(usize, Pixel) -> f64,
) -> AssignmentPlan {
    AssignContext::new(frame, grid).dar_dynamic(groups, k, quality)
}

pub fn assign_dar_switch(
    frame: &Frame,
    grid: &BevGrid,
    groups: GroupSet,
    state: &SwitchState,
    quality: &dyn Fn(usize, Pixel) -> f64,
) -> AssignmentPlan {
    AssignContext::new(frame, grid).dar_switch(groups, state, quality)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Static,
    Dynamic,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Static => "static",
            Phase::Dynamic => "dynamic",
        })
    }
}

/// Static-to-dynamic phase machine driven by an EMA of the center IoU.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchState {
    pub phase: Phase,
    pub ema_center_iou: f64,
    pub ema_decay: f64,
    pub iou_th: f64,
    /// Samples per object in both phases.
    pub k: usize,
}

impl SwitchState {
    pub fn new(iou_th: f64, k: usize, ema_decay: f64) -> Self {
        Self {
            phase: Phase::Static,
            ema_center_iou: 0.0,
            ema_decay,
            iou_th,
            k,
        }
    }

    /// Folds one measurement into the EMA; `Dynamic` is absorbing.
    pub fn update(self, measured_center_iou: f64) -> Self {
        let ema = self.ema_decay * self.ema_center_iou + (1.0 - self.ema_decay) * measured_center_iou;
        let phase = match self.phase {
            Phase::Static if ema >= self.iou_th => Phase::Dynamic,
            p => p,
        };
        Self {
            phase,
            ema_center_iou: ema,
            ..self
        }
    }
}

pub fn switch_update(state: SwitchState, measured_center_iou: f64) -> SwitchState {
    state.update(measured_center_iou)
}
