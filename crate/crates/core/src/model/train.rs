use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use super::head::{HeadParams, HeadShape};
use super::loss::{compute_loss, LossBreakdown, LossConfig};
use super::nn::Region;
use crate::assign::{AssignContext, AssignmentPlan, GroupSet, Phase, SwitchState};
use crate::decode::decode_box;
use crate::error::{Error, Result};
use crate::geometry::rotated_iou_bev;
use crate::scene::{rasterize_features, BevGrid, FeatureSpec, Frame, Pixel};

/// Label assignment strategy used during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Center pixel only.
    Baseline,
    /// Every in-box pixel near the center, for all attributes.
    Multipos,
    Static,
    Dynamic,
    Switch,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Multipos => "multipos",
            Strategy::Static => "static",
            Strategy::Dynamic => "dynamic",
            Strategy::Switch => "switch",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline" => Ok(Strategy::Baseline),
            "multipos" => Ok(Strategy::Multipos),
            "static" | "dar_static" => Ok(Strategy::Static),
            "dynamic" | "dar_dynamic" => Ok(Strategy::Dynamic),
            "switch" | "dar_switch" => Ok(Strategy::Switch),
            other => Err(Error::config(
                "strategy",
                format!("expected baseline, multipos, static, dynamic or switch, got `{other}`"),
            )),
        }
    }
}

/// Quantity fed to the switch EMA.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwitchSignal {
    /// IoU of the box decoded at the center pixel against its ground truth.
    Measured,
    /// The IoU branch output at the center pixel.
    Predicted,
}

impl FromStr for SwitchSignal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "measured" => Ok(SwitchSignal::Measured),
            "predicted" => Ok(SwitchSignal::Predicted),
            other => Err(Error::config(
                "switch_signal",
                format!("expected measured or predicted, got `{other}`"),
            )),
        }
    }
}

impl fmt::Display for SwitchSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SwitchSignal::Measured => "measured",
            SwitchSignal::Predicted => "predicted",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub head: HeadShape,
    pub strategy: Strategy,
    pub dar_groups: GroupSet,
    /// Samples per object for static and dynamic selection.
    pub samples_per_object: usize,
    pub multipos_radius: usize,
    pub switch_iou_th: f64,
    pub ema_decay: f64,
    pub switch_signal: SwitchSignal,
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Evaluate the frames of a batch on the rayon pool.
    pub parallel: bool,
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub loss_total: f64,
    pub loss_hm: f64,
    pub loss_reg: f64,
    pub loss_obj: f64,
    pub loss_iou: f64,
    pub ema_center_iou: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: HeadParams,
    pub logs: Vec<EpochLog>,
    pub switch: SwitchState,
}

/// Assignment plan of one frame given current head outputs.
pub fn plan_for_frame(
    ctx: &AssignContext,
    cfg: &TrainConfig,
    switch: &SwitchState,
    quality: &dyn Fn(usize, Pixel) -> f64,
) -> AssignmentPlan {
    match cfg.strategy {
        Strategy::Baseline => ctx.baseline(),
        Strategy::Multipos => ctx.multipos(cfg.multipos_radius),
        Strategy::Static => ctx.dar_static(cfg.dar_groups, cfg.samples_per_object),
        Strategy::Dynamic => ctx.dar_dynamic(cfg.dar_groups, cfg.samples_per_object, quality),
        Strategy::Switch => ctx.dar_switch(cfg.dar_groups, switch, quality),
    }
}

/// Loss and parameter gradient of one frame.
pub fn frame_gradient(
    params: &HeadParams,
    frame: &Frame,
    grid: &BevGrid,
    spec: &FeatureSpec,
    cfg: &TrainConfig,
    switch: &SwitchState,
) -> Result<(HeadParams, LossBreakdown)> {
    let (x, _) = rasterize_features(frame, grid, spec)?;
    let ctx = AssignContext::new(frame, grid);
    let region = Region::sparse(ctx.candidate_pixels().into_iter().map(|p| grid.flat(p)).collect());
    let (out, cache) = params.forward(&x, &region)?;
    let quality = |gi: usize, p| rotated_iou_bev(&decode_box(&out, p, grid), &frame.gts[gi].bbox);
    let plan = plan_for_frame(&ctx, cfg, switch, &quality);
    let (lb, og) = compute_loss(&out, params.shape.iqp, &plan, frame, grid, &cfg.loss);
    let mut grads = params.zeros_like();
    params.backward(&x, &out, &cache, &og, &mut grads, false);
    Ok((grads, lb))
}

/// Mini-batch SGD with momentum. Deterministic for a given seed regardless of
/// `parallel`. `init` overrides the seeded initialisation.
pub fn train_run(
    frames: &[Frame],
    grid: &BevGrid,
    spec: &FeatureSpec,
    cfg: &TrainConfig,
    init: Option<HeadParams>,
) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = match init {
        Some(p) => p,
        None => HeadParams::init(cfg.head, &mut rng),
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut velocity = params.zeros_like();
    let mut switch = SwitchState::new(cfg.switch_iou_th, cfg.samples_per_object, cfg.ema_decay);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let batch_size = cfg.batch_size.max(1);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..frames.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_sum = LossBreakdown::default();
        for (step, batch) in order.chunks(batch_size).enumerate() {
            let run = |&k: &usize| frame_gradient(&params, &frames[k], grid, spec, cfg, &switch);
            let results: Vec<Result<(HeadParams, LossBreakdown)>> = if cfg.parallel {
                batch.par_iter().map(run).collect()
            } else {
                batch.iter().map(run).collect()
            };
            let mut grads = params.zeros_like();
            let mut batch_sum = LossBreakdown::default();
            for r in results {
                let (g, lb) = r?;
                grads.axpy(1.0, &g);
                batch_sum.add(&lb);
            }
            if !batch_sum.total.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            grads.scale(1.0 / batch.len() as f64);
            let norm = grads.l2_norm();
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                grads.scale(cfg.grad_clip / norm);
            }
            velocity.scale(cfg.momentum);
            velocity.axpy(1.0, &grads);
            params.axpy(-cfg.lr, &velocity);

            if batch_sum.center_count > 0 {
                let signal = match cfg.switch_signal {
                    SwitchSignal::Measured => batch_sum.center_iou_sum,
                    SwitchSignal::Predicted => batch_sum.center_iou_pred_sum,
                } / batch_sum.center_count as f64;
                switch = switch.update(signal);
            }
            epoch_sum.add(&batch_sum);
        }
        let n = frames.len().max(1) as f64;
        logs.push(EpochLog {
            epoch,
            phase: switch.phase,
            loss_total: epoch_sum.total / n,
            loss_hm: epoch_sum.hm / n,
            loss_reg: epoch_sum.reg / n,
            loss_obj: epoch_sum.obj / n,
            loss_iou: epoch_sum.iou / n,
            ema_center_iou: switch.ema_center_iou,
        });
    }
    Ok(TrainOutcome {
        params,
        logs,
        switch,
    })
}
