//! Network building blocks and the two model assemblies.

mod attention;
mod denoiser;
mod layers;
mod simvp;

pub use attention::{AttentionConfig, CauBlock, TauBlock, TranslatorBlock};
pub use denoiser::{noise_label, DenoiserConfig, DenoiserNet};
pub use layers::{norm_groups, Conv, ConvBlock, Dense, DwConv, Init};
pub use simvp::{MeanNet, MeanNetConfig};

use crate::autodiff::ParamStore;
use crate::grid::Real;

/// Number of trainable scalars held by a store.
pub fn count_params<T: Real>(store: &ParamStore<T>) -> usize {
    store.count()
}

#[cfg(test)]
mod tests;
