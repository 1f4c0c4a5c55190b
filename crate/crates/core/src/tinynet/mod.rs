//! Minimal dense network, Adam and the exponential learning-rate schedule.

mod adam;
mod mlp;
mod schedule;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use mlp::{Mlp, MlpCache, MlpShape};
pub use schedule::LrSchedule;
