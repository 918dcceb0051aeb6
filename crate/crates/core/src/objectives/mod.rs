//! Ranking and distillation objectives, the two training-stage losses and
//! the optimizer.

mod adamw;
mod loss;

pub use adamw::AdamW;
pub use loss::{
    check_frozen, distill_loss, ranking_loss, stage1_loss, stage2_loss, Degenerate, StageLoss, TrainConfig,
};
