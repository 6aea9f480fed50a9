//! Detection metrics and head diagnostics.

use serde::{Deserialize, Serialize};

use crate::decode::{is_local_max, Detection};
use crate::geometry::{iou_3d, rotated_iou_bev, Box7};
use crate::scene::{BevGrid, Frame, GtBox, Pixel};
use crate::tensor::Tensor3;

/// Guard added to the true offset norm in MRPE, in pixels.
pub const MRPE_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    #[default]
    Bev,
    #[serde(rename = "3d")]
    ThreeD,
}

impl IouKind {
    pub fn iou(self, a: &Box7, b: &Box7) -> f64 {
        match self {
            IouKind::Bev => rotated_iou_bev(a, b),
            IouKind::ThreeD => iou_3d(a, b),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    /// AP matching threshold per class.
    pub ap_iou: Vec<f64>,
    pub iou_kind: IouKind,
    /// Matching threshold for MRPE pairs.
    pub mrpe_match_iou: f64,
    /// Quality split of the IoU-prediction MSE.
    pub mse_split: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            ap_iou: vec![0.7, 0.5, 0.5],
            iou_kind: IouKind::Bev,
            mrpe_match_iou: 0.3,
            mse_split: 0.5,
        }
    }
}

fn by_score(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    idx
}

/// Greedy matching in score order: each detection takes the unmatched
/// same-class GT of highest IoU if that IoU reaches `thresh`. Returns the
/// matched GT index per detection (in input order).
pub fn match_detections(
    dets: &[Detection],
    gts: &[GtBox],
    thresh: f64,
    kind: IouKind,
) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for k in by_score(dets) {
        let d = &dets[k];
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class_id != d.class_id {
                continue;
            }
            let iou = kind.iou(&d.bbox, &gt.bbox);
            if iou >= thresh && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, g));
            }
        }
        if let Some((_, g)) = best {
            taken[g] = true;
            out[k] = Some(g);
        }
    }
    out
}

/// 101-point interpolated AP from score-ordered TP flags.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    // Precision envelope from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut cursor = 0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        while cursor < recall.len() && recall[cursor] < r - 1e-12 {
            cursor += 1;
        }
        if cursor < recall.len() {
            sum += precision[cursor];
        }
    }
    sum / 101.0
}

/// AP of one class over a set of frames; `None` when the class has no GT.
pub fn compute_ap(
    frames: &[Frame],
    dets: &[Vec<Detection>],
    class_id: usize,
    iou_thresh: f64,
    kind: IouKind,
) -> Option<f64> {
    let num_gt: usize = frames
        .iter()
        .map(|f| f.gts.iter().filter(|g| g.class_id == class_id).count())
        .sum();
    if num_gt == 0 {
        return None;
    }
    // (score, frame, position, tp)
    let mut all: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (fi, (f, ds)) in frames.iter().zip(dets).enumerate() {
        let class_dets: Vec<Detection> = ds.iter().filter(|d| d.class_id == class_id).copied().collect();
        let m = match_detections(&class_dets, &f.gts, iou_thresh, kind);
        for (k, (d, mk)) in class_dets.iter().zip(m).enumerate() {
            all.push((d.score, fi, k, mk.is_some()));
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let tp: Vec<bool> = all.iter().map(|t| t.3).collect();
    Some(interpolated_ap(&tp, num_gt))
}

/// Relative center error of one pair, in percent. Offsets are in pixels.
pub fn mrpe_pair(pred_d: (f64, f64), gt_d: (f64, f64)) -> f64 {
    let err = (pred_d.0 - gt_d.0).hypot(pred_d.1 - gt_d.1);
    100.0 * err / (gt_d.0.hypot(gt_d.1) + MRPE_EPS)
}

/// Sum and count of MRPE over matched pairs, optionally for one class.
pub fn mrpe_terms(
    frame: &Frame,
    dets: &[Detection],
    grid: &BevGrid,
    class_id: Option<usize>,
    match_iou: f64,
    kind: IouKind,
) -> (f64, usize) {
    let m = match_detections(dets, &frame.gts, match_iou, kind);
    let mut sum = 0.0;
    let mut n = 0;
    for (d, g) in dets.iter().zip(m) {
        let Some(g) = g else { continue };
        let gt = &frame.gts[g];
        if class_id.is_some_and(|c| c != gt.class_id) {
            continue;
        }
        let Some(cp) = grid.pixel_of(gt.bbox.x, gt.bbox.y) else {
            continue;
        };
        let (cx, cy) = grid.pixel_center(cp);
        let gt_d = ((gt.bbox.x - cx) / grid.cell, (gt.bbox.y - cy) / grid.cell);
        let pred_d = ((d.bbox.x - cx) / grid.cell, (d.bbox.y - cy) / grid.cell);
        sum += mrpe_pair(pred_d, gt_d);
        n += 1;
    }
    (sum, n)
}

/// Mean center MRPE in percent over matched pairs; `None` without matches.
pub fn center_mrpe(
    frames: &[Frame],
    dets: &[Vec<Detection>],
    grid: &BevGrid,
    class_id: Option<usize>,
    match_iou: f64,
    kind: IouKind,
) -> Option<f64> {
    let (s, n) = frames
        .iter()
        .zip(dets)
        .map(|(f, d)| mrpe_terms(f, d, grid, class_id, match_iou, kind))
        .fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    (n > 0).then(|| s / n as f64)
}

/// `(iou_pred, iou_gt)` for every detection, pairing it with its best-IoU
/// same-class GT (0 when there is none).
pub fn quality_pairs(frame: &Frame, dets: &[Detection], kind: IouKind) -> Vec<(f64, f64)> {
    dets.iter()
        .map(|d| {
            let gt_iou = frame
                .gts
                .iter()
                .filter(|g| g.class_id == d.class_id)
                .map(|g| kind.iou(&d.bbox, &g.bbox))
                .fold(0.0, f64::max);
            (d.iou_pred, gt_iou)
        })
        .collect()
}

/// MSE of the predicted IoU for pairs with true IoU `<= split` and `> split`.
pub fn mse_by_quality(pairs: &[(f64, f64)], split: f64) -> (Option<f64>, Option<f64>) {
    let (mut lo, mut nlo, mut hi, mut nhi) = (0.0, 0usize, 0.0, 0usize);
    for &(p, t) in pairs {
        let e = (p - t) * (p - t);
        if t <= split {
            lo += e;
            nlo += 1;
        } else {
            hi += e;
            nhi += 1;
        }
    }
    ((nlo > 0).then(|| lo / nlo as f64), (nhi > 0).then(|| hi / nhi as f64))
}

pub fn iou_mse_by_quality(
    frames: &[Frame],
    dets: &[Vec<Detection>],
    split: f64,
    kind: IouKind,
) -> (Option<f64>, Option<f64>) {
    let pairs: Vec<(f64, f64)> = frames
        .iter()
        .zip(dets)
        .flat_map(|(f, d)| quality_pairs(f, d, kind))
        .collect();
    mse_by_quality(&pairs, split)
}

/// Number of GTs whose nearest class-channel local maximum is not their
/// center pixel, and the number of GTs considered.
pub fn offcenter_counts(conf: &Tensor3, frame: &Frame, grid: &BevGrid) -> (usize, usize) {
    let (h, w) = (conf.height, conf.width);
    let mut maxima: Vec<Vec<Pixel>> = vec![Vec::new(); conf.channels];
    let mut off = 0;
    let mut total = 0;
    for gt in &frame.gts {
        let Some(cp) = grid.pixel_of(gt.bbox.x, gt.bbox.y) else {
            continue;
        };
        if gt.class_id >= conf.channels {
            continue;
        }
        let peaks = &mut maxima[gt.class_id];
        if peaks.is_empty() {
            let plane = conf.plane(gt.class_id);
            for i in 0..h {
                for j in 0..w {
                    if is_local_max(plane, h, w, i, j) {
                        peaks.push(Pixel::new(i, j));
                    }
                }
            }
        }
        let d2 = |p: &Pixel| {
            let di = p.i as i64 - cp.i as i64;
            let dj = p.j as i64 - cp.j as i64;
            di * di + dj * dj
        };
        let nearest = peaks.iter().min_by(|a, b| d2(a).cmp(&d2(b)).then(a.cmp(b)));
        total += 1;
        if nearest != Some(&cp) {
            off += 1;
        }
    }
    (off, total)
}

pub fn offcenter_rate(conf: &Tensor3, frame: &Frame, grid: &BevGrid) -> Option<f64> {
    let (off, total) = offcenter_counts(conf, frame, grid);
    (total > 0).then(|| off as f64 / total as f64)
}

/// Evaluation summary. Absent values are `None` (empty in CSV, null in JSON).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub num_frames: usize,
    pub num_detections: usize,
    pub class_names: Vec<String>,
    pub gt_counts: Vec<usize>,
    pub ap_iou: Vec<f64>,
    pub ap: Vec<Option<f64>>,
    pub map: Option<f64>,
    pub mrpe: Option<f64>,
    pub mrpe_per_class: Vec<Option<f64>>,
    pub mse_low: Option<f64>,
    pub mse_high: Option<f64>,
    pub offcenter_rate: Option<f64>,
}

/// Collects per-frame results; off-center counts are taken from each frame's
/// confidence map as it arrives.
#[derive(Clone, Debug)]
pub struct EvalAccumulator {
    pub frames: Vec<Frame>,
    pub dets: Vec<Vec<Detection>>,
    off: usize,
    off_total: usize,
}

impl Default for EvalAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

impl EvalAccumulator {
    pub fn new() -> Self {
        Self {
            frames: Vec::new(),
            dets: Vec::new(),
            off: 0,
            off_total: 0,
        }
    }

    pub fn push(&mut self, frame: Frame, dets: Vec<Detection>, conf: &Tensor3, grid: &BevGrid) {
        let (o, t) = offcenter_counts(conf, &frame, grid);
        self.off += o;
        self.off_total += t;
        self.frames.push(frame);
        self.dets.push(dets);
    }

    pub fn finish(&self, grid: &BevGrid, class_names: &[String], cfg: &MetricsConfig, config_hash: &str) -> EvalReport {
        let c = class_names.len();
        let (frames, dets) = (&self.frames, &self.dets);
        let ap: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let t = cfg.ap_iou.get(k).copied().unwrap_or(0.5);
                compute_ap(frames, dets, k, t, cfg.iou_kind)
            })
            .collect();
        let present: Vec<f64> = ap.iter().flatten().copied().collect();
        let map = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        let mrpe = center_mrpe(frames, dets, grid, None, cfg.mrpe_match_iou, cfg.iou_kind);
        let mrpe_per_class = (0..c)
            .map(|k| center_mrpe(frames, dets, grid, Some(k), cfg.mrpe_match_iou, cfg.iou_kind))
            .collect();
        let (mse_low, mse_high) = iou_mse_by_quality(frames, dets, cfg.mse_split, cfg.iou_kind);
        EvalReport {
            config_hash: config_hash.to_string(),
            num_frames: frames.len(),
            num_detections: dets.iter().map(Vec::len).sum(),
            class_names: class_names.to_vec(),
            gt_counts: (0..c)
                .map(|k| frames.iter().flat_map(|f| &f.gts).filter(|g| g.class_id == k).count())
                .collect(),
            ap_iou: (0..c).map(|k| cfg.ap_iou.get(k).copied().unwrap_or(0.5)).collect(),
            ap,
            map,
            mrpe,
            mrpe_per_class,
            mse_low,
            mse_high,
            offcenter_rate: (self.off_total > 0).then(|| self.off as f64 / self.off_total as f64),
        }
    }
}

/// Formats an optional value for CSV; absent values are empty.
pub fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub fn csv_header(&self) -> String {
        let mut cols = vec!["config_hash".to_string(), "frames".into(), "detections".into(), "map".into()];
        cols.extend(self.class_names.iter().map(|n| format!("ap_{n}")));
        cols.push("mrpe".into());
        cols.extend(self.class_names.iter().map(|n| format!("mrpe_{n}")));
        cols.extend(["mse_low", "mse_high", "offcenter_rate"].map(String::from));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.config_hash.clone(),
            self.num_frames.to_string(),
            self.num_detections.to_string(),
            csv_opt(self.map),
        ];
        cols.extend(self.ap.iter().map(|v| csv_opt(*v)));
        cols.push(csv_opt(self.mrpe));
        cols.extend(self.mrpe_per_class.iter().map(|v| csv_opt(*v)));
        cols.extend([self.mse_low, self.mse_high, self.offcenter_rate].map(csv_opt));
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", self.csv_header(), self.csv_row())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}
