//! Baseline training of source models and calibration of merged models.

mod backprop;
mod baseline;
mod calibrate;
mod egrad;

pub use baseline::{accuracy, train_baseline, EpochRecord, SgdConfig, TrainReport};
pub use calibrate::{
    calibrate, calibration_loss, CalibrationConfig, CalibrationEpoch, CalibrationLoss, CalibrationOutcome,
    GradientBundle, TaskBatch, TaskData, TaskLoss,
};
pub use egrad::{econv_backward, efc_backward, CodebookGrad, EConvGrad, EFcGrad};
