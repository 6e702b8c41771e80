//! Stage 2: nearest-neighbor contrastive tuning.

pub mod loss;
pub mod queue;
pub mod schedule;
pub mod tune;

pub use loss::{nnclr_loss, nnclr_loss_and_grad};
pub use queue::{nearest_neighbor, SupportQueue};
pub use schedule::{build_tune_schedule, TuneSchedule};
pub use tune::{run_stage2, train_stage2, Stage2Config, Stage2Outcome, TuneMode};
