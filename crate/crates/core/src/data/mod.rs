//! Synthetic truth generation, coarse/fine pair construction, synthetic biased
//! coarse model output and per-cell quantile mapping.

mod pairs;
mod qmap;
mod synth;

pub use pairs::{coarsen, gen_biased_gcm, make_pairs, GcmBias, PairSet};
pub use qmap::{ks_distance, qmap_apply, qmap_fit, QuantileMap, QMP1_MAGIC};
pub use synth::{gen_synthetic, SynthConfig};
