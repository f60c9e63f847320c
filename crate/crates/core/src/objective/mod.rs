//! Loss composition, optimizer and training loop.

mod adam;
mod checkpoint;
mod gradcheck;
mod losses;
mod model;
mod train;

pub use adam::{AdamState, ADAM_EPS, BETA1, BETA2};
pub use checkpoint::Checkpoint;
pub use gradcheck::{check_gradients, GradReport, TermReport, FD_FLOOR, FD_STEP, FD_TOLERANCE};
pub use losses::{
    cross_entropy, global_alignment, global_alignment_loss, mean_cross_entropy, one_hot,
    GlobalAlignment, LossBreakdown, PROB_FLOOR,
};
pub use model::{BatchItem, ForwardOutput, LocalDetail, LossVars, Model};
pub use train::{accuracy, batch_items, fit, train_step, BatchSampler, StepRecord, TrainData};
