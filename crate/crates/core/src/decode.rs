//! Turning head outputs into scored boxes.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::assign::{encode_box_targets, AssignContext};
use crate::error::Result;
use crate::geometry::{rotated_nms, Box7};
use crate::model::{HeadOutputs, HeadParams, Region};
use crate::scene::{BevGrid, Frame, Pixel};
use crate::tensor::Tensor3;

/// Bound on the exponent of the size decoding.
pub const MAX_LOG_SIZE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_dets: usize,
    pub min_conf: f64,
    /// Same-class boxes above this BEV IoU with a better box are dropped.
    pub nms_iou: f64,
    /// Exponent of the IoU term in the rectified score.
    pub alpha: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_dets: 100,
            min_conf: 0.05,
            nms_iou: 0.2,
            alpha: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub class_id: usize,
    pub pixel: Pixel,
    pub conf: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub pixel: Pixel,
    pub bbox: Box7,
    pub conf: f64,
    /// Predicted IoU mapped to [0, 1].
    pub iou_pred: f64,
    pub score: f64,
}

/// True if `(i, j)` is a 3x3 local maximum of `plane`. On plateaus the
/// lexicographically smallest pixel wins.
pub fn is_local_max(plane: &[f64], height: usize, width: usize, i: usize, j: usize) -> bool {
    let v = plane[i * width + j];
    for ii in i.saturating_sub(1)..=(i + 1).min(height - 1) {
        for jj in j.saturating_sub(1)..=(j + 1).min(width - 1) {
            if (ii, jj) == (i, j) {
                continue;
            }
            let q = plane[ii * width + jj];
            if q > v || (q == v && (ii, jj) < (i, j)) {
                return false;
            }
        }
    }
    true
}

/// Per-class local maxima with confidence at least `min_conf`, sorted by
/// confidence (descending), then class, then pixel.
pub fn extract_peaks(conf: &Tensor3, min_conf: f64) -> Vec<Peak> {
    let (h, w) = (conf.height, conf.width);
    let mut peaks = Vec::new();
    for c in 0..conf.channels {
        let plane = conf.plane(c);
        for i in 0..h {
            for j in 0..w {
                let v = plane[i * w + j];
                if v >= min_conf && is_local_max(plane, h, w, i, j) {
                    peaks.push(Peak {
                        class_id: c,
                        pixel: Pixel::new(i, j),
                        conf: v,
                    });
                }
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.conf
            .total_cmp(&a.conf)
            .then(a.class_id.cmp(&b.class_id))
            .then(a.pixel.cmp(&b.pixel))
    });
    peaks
}

/// Box regressed at `pixel`.
pub fn decode_box(out: &HeadOutputs, pixel: Pixel, grid: &BevGrid) -> Box7 {
    let k = grid.flat(pixel);
    let (cx, cy) = grid.pixel_center(pixel);
    let size = |c: usize| out.lwh.at_flat(c, k).clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp();
    let theta = out.theta.at_flat(0, k).atan2(out.theta.at_flat(1, k));
    Box7::new(
        cx + out.xy.at_flat(0, k) * grid.cell,
        cy + out.xy.at_flat(1, k) * grid.cell,
        out.z.at_flat(0, k),
        size(0),
        size(1),
        size(2),
        theta,
    )
}

/// IoU prediction at `pixel` mapped from [-1, 1] to [0, 1].
pub fn iou_pred_at(out: &HeadOutputs, pixel: Pixel, grid: &BevGrid) -> f64 {
    ((out.iou.at_flat(0, grid.flat(pixel)) + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// `conf^(1 - alpha) * iou^alpha`.
pub fn rectify_score(conf: f64, iou_pred: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        return conf;
    }
    conf.powf(1.0 - alpha) * iou_pred.max(0.0).powf(alpha)
}

/// Decodes every peak, applies per-class NMS on the rectified score and keeps
/// the best `max_dets`. Regression maps must be valid at every peak pixel.
pub fn decode_detections(out: &HeadOutputs, grid: &BevGrid, cfg: &DecodeConfig) -> Vec<Detection> {
    let peaks = extract_peaks(&out.conf, cfg.min_conf);
    decode_peaks(out, &peaks, grid, cfg)
}

/// Decodes the given peaks (see [`decode_detections`]).
pub fn decode_peaks(out: &HeadOutputs, peaks: &[Peak], grid: &BevGrid, cfg: &DecodeConfig) -> Vec<Detection> {
    let dets: Vec<Detection> = peaks
        .iter()
        .map(|p| {
            let iou_pred = iou_pred_at(out, p.pixel, grid);
            Detection {
                class_id: p.class_id,
                pixel: p.pixel,
                bbox: decode_box(out, p.pixel, grid),
                conf: p.conf,
                iou_pred,
                score: rectify_score(p.conf, iou_pred, cfg.alpha),
            }
        })
        .collect();
    let mut kept = Vec::new();
    for c in 0..out.conf.channels {
        let idx: Vec<usize> = (0..dets.len()).filter(|&k| dets[k].class_id == c).collect();
        let boxes: Vec<Box7> = idx.iter().map(|&k| dets[k].bbox).collect();
        let scores: Vec<f64> = idx.iter().map(|&k| dets[k].score).collect();
        kept.extend(rotated_nms(&boxes, &scores, cfg.nms_iou).into_iter().map(|k| dets[idx[k]]));
    }
    kept.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.class_id.cmp(&b.class_id))
            .then(a.pixel.cmp(&b.pixel))
    });
    kept.truncate(cfg.max_dets);
    kept
}

/// Runs the head on a feature map and decodes detections. Regression
/// branches are evaluated only at peak pixels.
pub fn detect(params: &HeadParams, features: &Tensor3, grid: &BevGrid, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
    let dense = params.forward_dense(features)?;
    let peaks = extract_peaks(&dense.conf, cfg.min_conf);
    let region = Region::sparse(peaks.iter().map(|p| grid.flat(p.pixel)).collect());
    let (out, _) = params.forward_sparse(features, dense, &region);
    Ok(decode_peaks(&out, &peaks, grid, cfg))
}

/// Head outputs that reproduce the ground truth exactly: the target heatmap as
/// confidence, exact regression targets and IoU 1 at every center pixel.
pub fn perfect_outputs(frame: &Frame, grid: &BevGrid, num_classes: usize) -> HeadOutputs {
    let ctx = AssignContext::new(frame, grid);
    let plan = ctx.baseline();
    let conf = plan.render_heatmap(num_classes, grid);
    let mut conf_logits = conf.clone();
    conf_logits.data.iter_mut().for_each(|v| {
        let p = v.clamp(1e-12, 1.0 - 1e-12);
        *v = (p / (1.0 - p)).ln();
    });
    let (h, w) = (grid.height, grid.width);
    let mut reg = [
        Tensor3::zeros(2, h, w),
        Tensor3::zeros(1, h, w),
        Tensor3::zeros(3, h, w),
        Tensor3::zeros(2, h, w),
    ];
    let mut iou = Tensor3::zeros(1, h, w);
    for g in &ctx.gts {
        let k = grid.flat(g.center);
        let targets = encode_box_targets(&g.bbox, g.center, grid);
        for (map, t) in reg.iter_mut().zip(targets) {
            for c in 0..map.channels {
                map.data[c * h * w + k] = t[c];
            }
        }
        iou.data[k] = 1.0;
    }
    let [xy, z, lwh, theta] = reg;
    HeadOutputs {
        conf_logits,
        conf,
        obj: None,
        gate: None,
        xy,
        z,
        lwh,
        theta,
        iou,
        region: Region::Dense,
    }
}

#[derive(Serialize)]
struct DetectionRecord<'a> {
    frame_id: u64,
    cls: usize,
    x: f64,
    y: f64,
    z: f64,
    l: f64,
    w: f64,
    h: f64,
    theta: f64,
    conf: f64,
    iou_pred: f64,
    score: f64,
    config_hash: &'a str,
}

/// Writes one JSON object per detection.
pub fn write_detections<W: Write>(
    out: &mut W,
    frame_id: u64,
    dets: &[Detection],
    config_hash: &str,
) -> std::io::Result<()> {
    for d in dets {
        let b = &d.bbox;
        let rec = DetectionRecord {
            frame_id,
            cls: d.class_id,
            x: b.x,
            y: b.y,
            z: b.z,
            l: b.l,
            w: b.w,
            h: b.h,
            theta: b.theta,
            conf: d.conf,
            iou_pred: d.iou_pred,
            score: d.score,
            config_hash,
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
