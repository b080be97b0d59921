//! MLP building blocks, Adam and learning-rate schedules.

mod checkpoint;
mod layer;
mod optim;

pub use checkpoint::{Checkpoint, ParamRecord, FORMAT as CHECKPOINT_FORMAT};
pub use layer::{Activation, LinearLayer, Mlp, ParamIds};
pub use optim::{cosine_lr, Adam};
