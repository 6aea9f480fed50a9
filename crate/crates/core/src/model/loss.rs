//! Training objectives and their gradients with respect to head outputs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::head::{HeadOutputs, IqpMode, OutputGrads};
use super::nn::{sigmoid, softplus};
use crate::assign::{AssignmentPlan, AttributeGroup};
use crate::error::{Error, Result};
use crate::decode::decode_box;
use crate::geometry::rotated_iou_bev;
use crate::scene::{BevGrid, Frame};
use crate::tensor::Tensor3;

/// Pixels that supervise the IoU branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouPositives {
    /// The center pixel of each ground truth.
    Center,
    /// Every pixel the assignment plan samples for a ground truth, in any group.
    Samples,
}

impl FromStr for IouPositives {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "center" => Ok(IouPositives::Center),
            "samples" => Ok(IouPositives::Samples),
            other => Err(Error::config(
                "iou_positives",
                format!("expected center or samples, got `{other}`"),
            )),
        }
    }
}

impl fmt::Display for IouPositives {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IouPositives::Center => "center",
            IouPositives::Samples => "samples",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub hm_weight: f64,
    pub reg_weight: f64,
    pub obj_weight: f64,
    pub iou_weight: f64,
    pub focal_alpha: f64,
    pub focal_beta: f64,
    /// Heatmap value at or above which a pixel counts as an objectness positive.
    pub obj_threshold: f64,
    /// Whether the IoU branch is supervised.
    pub train_iou: bool,
    pub iou_positives: IouPositives,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            hm_weight: 1.0,
            reg_weight: 2.0,
            obj_weight: 1.0,
            iou_weight: 1.0,
            focal_alpha: 2.0,
            focal_beta: 4.0,
            obj_threshold: 0.3,
            train_iou: true,
            iou_positives: IouPositives::Center,
        }
    }
}

/// Loss terms of one frame (already weighted into `total`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub hm: f64,
    pub reg: f64,
    pub obj: f64,
    pub iou: f64,
    /// Sum and count of the BEV IoU between the box decoded at each center
    /// pixel and its ground truth.
    pub center_iou_sum: f64,
    pub center_count: usize,
    /// Sum of the predicted center IoU in [0, 1].
    pub center_iou_pred_sum: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.hm += o.hm;
        self.reg += o.reg;
        self.obj += o.obj;
        self.iou += o.iou;
        self.center_iou_sum += o.center_iou_sum;
        self.center_count += o.center_count;
        self.center_iou_pred_sum += o.center_iou_pred_sum;
    }
}

/// Penalty-reduced focal loss on logits, normalised by the number of pixels
/// whose target is exactly 1. Returns the loss and its gradient.
pub fn focal_loss(logits: &Tensor3, target: &Tensor3, alpha: f64, beta: f64) -> (f64, Tensor3) {
    let num_pos = target.data.iter().filter(|&&t| t == 1.0).count().max(1) as f64;
    let mut grad = Tensor3::zeros(logits.channels, logits.height, logits.width);
    let mut loss = 0.0;
    for ((&x, &t), g) in logits.data.iter().zip(&target.data).zip(grad.data.iter_mut()) {
        let p = sigmoid(x);
        if t == 1.0 {
            // -(1-p)^a log p
            let sp = softplus(-x);
            let q = (1.0 - p).powf(alpha);
            loss += q * sp;
            *g = (-alpha * p * q * sp - q * (1.0 - p)) / num_pos;
        } else {
            // -(1-t)^b p^a log(1-p)
            let sp = softplus(x);
            let wt = (1.0 - t).powf(beta);
            let pa = p.powf(alpha);
            loss += wt * pa * sp;
            *g = wt * (alpha * pa * (1.0 - p) * sp + pa * p) / num_pos;
        }
    }
    (loss / num_pos, grad)
}

/// Binary cross-entropy on logits, summed and normalised by the number of
/// positives.
pub fn bce_loss(logits: &Tensor3, target: &Tensor3) -> (f64, Tensor3) {
    let num_pos = target.data.iter().filter(|&&t| t > 0.5).count().max(1) as f64;
    let mut grad = Tensor3::zeros(logits.channels, logits.height, logits.width);
    let mut loss = 0.0;
    for ((&x, &y), g) in logits.data.iter().zip(&target.data).zip(grad.data.iter_mut()) {
        loss += softplus(x) - y * x;
        *g = (sigmoid(x) - y) / num_pos;
    }
    (loss / num_pos, grad)
}

/// `|pred - target|` and its subgradient (0 at the kink).
pub fn l1(pred: f64, target: f64) -> (f64, f64) {
    let d = pred - target;
    (d.abs(), if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 })
}

/// Regression target of the IoU branch for a measured IoU in [0, 1].
pub fn iou_label(iou: f64) -> f64 {
    2.0 * iou - 1.0
}

/// Binarised objectness target: max over classes of `heatmap >= threshold`.
pub fn objectness_target(heatmap: &Tensor3, threshold: f64) -> Tensor3 {
    let n = heatmap.plane_len();
    let mut t = Tensor3::zeros(1, heatmap.height, heatmap.width);
    for k in 0..n {
        let m = (0..heatmap.channels)
            .map(|c| heatmap.data[c * n + k])
            .fold(0.0, f64::max);
        t.data[k] = if m >= threshold { 1.0 } else { 0.0 };
    }
    t
}

/// Full objective of one frame.
///
/// Regression is a weighted L1 per sample, divided by the number of objects.
/// The IoU branch is supervised at center pixels (or at every sampled pixel,
/// see [`IouPositives`]) with `2 IoU - 1`, where IoU
/// is measured between the box decoded there and its ground truth; the label
/// is treated as a constant. Objectness (V2 only) is BCE against the
/// binarised heatmap.
pub fn compute_loss(
    out: &HeadOutputs,
    iqp: IqpMode,
    plan: &AssignmentPlan,
    frame: &Frame,
    grid: &BevGrid,
    cfg: &LossConfig,
) -> (LossBreakdown, OutputGrads) {
    let mut grads = OutputGrads::zeros(out);
    let mut lb = LossBreakdown::default();
    let heatmap = plan.render_heatmap(out.conf.channels, grid);

    let (hm, mut g_hm) = focal_loss(&out.conf_logits, &heatmap, cfg.focal_alpha, cfg.focal_beta);
    g_hm.data.iter_mut().for_each(|g| *g *= cfg.hm_weight);
    grads.conf_logits = g_hm;
    lb.hm = hm;

    if iqp == IqpMode::V2 {
        if let Some(obj) = &out.obj {
            let target = objectness_target(&heatmap, cfg.obj_threshold);
            let (l, mut g) = bce_loss(obj, &target);
            g.data.iter_mut().for_each(|v| *v *= cfg.obj_weight);
            grads.obj = Some(g);
            lb.obj = l;
        }
    }

    let n_obj = plan.gts.len().max(1) as f64;
    let n = grid.len();
    for gp in &plan.gts {
        for group in AttributeGroup::ALL {
            let gi = group.index();
            let map = out.reg(gi);
            let gmap = grads.reg_mut(gi);
            for s in gp.group(group) {
                let k = grid.flat(s.pixel);
                for d in 0..group.dims() {
                    let (l, dl) = l1(map.data[d * n + k], s.target[d]);
                    lb.reg += s.weight * l / n_obj;
                    gmap.data[d * n + k] += cfg.reg_weight * s.weight * dl / n_obj;
                }
            }
        }
    }

    for gp in &plan.gts {
        let gt = &frame.gts[gp.gt_index].bbox;
        let k = grid.flat(gp.center);
        let measured = rotated_iou_bev(&decode_box(out, gp.center, grid), gt);
        lb.center_iou_sum += measured;
        lb.center_iou_pred_sum += ((out.iou.data[k] + 1.0) / 2.0).clamp(0.0, 1.0);
        lb.center_count += 1;
        if !cfg.train_iou {
            continue;
        }
        let mut pixels = vec![gp.center];
        if cfg.iou_positives == IouPositives::Samples {
            for group in AttributeGroup::ALL {
                pixels.extend(gp.group(group).iter().map(|s| s.pixel));
            }
            pixels.sort();
            pixels.dedup();
        }
        for p in pixels {
            let k = grid.flat(p);
            let measured = if p == gp.center {
                measured
            } else {
                rotated_iou_bev(&decode_box(out, p, grid), gt)
            };
            let (l, dl) = l1(out.iou.data[k], iou_label(measured));
            lb.iou += l / n_obj;
            grads.iou.data[k] += cfg.iou_weight * dl / n_obj;
        }
    }

    lb.total = cfg.hm_weight * lb.hm + cfg.reg_weight * lb.reg + cfg.obj_weight * lb.obj + cfg.iou_weight * lb.iou;
    (lb, grads)
}
