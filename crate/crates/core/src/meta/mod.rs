//! Meta-training of the controllers over truncated unrolled windows.

mod losses;
mod replay;
mod rollout;
mod trainer;

pub use losses::{loss_lp, loss_ls, lp_term, lp_term_grad, ls_term, softmax_weights};
pub use replay::ReplayBuffer;
pub use rollout::{rollout, RolloutConfig, RolloutTrace, StepTrace, StopReport, WindowState};
pub use trainer::{BatchSource, MetaConfig, MetaRecord, MetaTrainer, ReplayEntry};
