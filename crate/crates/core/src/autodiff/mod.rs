//! Reverse-mode automatic differentiation over a fixed operation set, with an
//! Adam optimizer and the WTS1 checkpoint format.

mod check;
mod kernels;
mod params;
mod tape;

pub use check::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use params::{AdamConfig, ParamId, ParamStore, WTS1_MAGIC};
pub use tape::{Gradients, Tape, Var};

#[cfg(test)]
mod tests;
