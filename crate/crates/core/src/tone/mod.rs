//! Tone mapping operators: global tone perception, patch-wise 3D-LUT local
//! tuning, iterative detail enhancement, and the assembled model.

mod gtp;
mod ide;
mod ltt;
mod lut;
mod model;

pub use gtp::GtpParams;
pub use ide::IdeParams;
pub use ltt::{LttOut, LttParams};
pub use lut::Lut3D;
pub use model::{Model, ModelConfig, PipelineOut};
