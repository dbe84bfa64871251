//! Attention-guided multiphase alignment for lesion detection.

pub mod cli;
pub mod container;
pub mod detect;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod tensor;
