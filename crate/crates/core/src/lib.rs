//! Desk-scale laboratory for the baseline GPT decoder and its normalized
//! (hypersphere) variant: numerics, reverse-mode autodiff, both
//! architectures, the optimizer with post-step renormalization, training
//! and evaluation, and the inspection diagnostics.

pub mod autodiff;
pub mod diagnostics;
pub mod hypersphere;
pub mod model;
pub mod optimizer;
pub mod textgen;
pub mod training;
pub mod numerics;
