//! Detection head, losses and training.

mod checkpoint;
mod head;
mod loss;
pub mod nn;
mod train;

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use head::{
    Branch, DenseStage, HeadCache, HeadOutputs, HeadParams, HeadShape, IqpMode, OutputGrads, PRIOR_LOGIT,
    REG_WIDTHS,
};
pub use loss::{
    bce_loss, compute_loss, focal_loss, iou_label, l1, objectness_target, IouPositives, LossBreakdown, LossConfig,
};
pub use nn::Region;
pub use train::{
    frame_gradient, plan_for_frame, train_run, EpochLog, Strategy, SwitchSignal, TrainConfig, TrainOutcome,
};
