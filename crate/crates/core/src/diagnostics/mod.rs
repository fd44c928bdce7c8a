//! Spectral, distributional and storm-count comparison of predicted and true fields.

mod report;
mod score;
mod storms;

pub use report::{emit_report, line_plot, pdf_csv, scorecard_csv, spatial_csv, storms_csv, Series};
pub use score::{
    band_distance, default_bands, histogram, kinetic_spectrum, spectral_scorecard, vorticity_pdf,
    vorticity_pdf_with, vorticity_series, wasserstein1, Band, BandScore, Histogram, LocationScore, PdfBins,
    ScoreCard, ScoreOptions, StormRow,
};
pub use storms::{track_storms, StormEvent, StormParams, StormReport};

use crate::error::Result;
use crate::grid::FieldSequence;
use crate::physics::Boundary;

/// Storms in the periodic vorticity of `seq`.
pub fn storm_count(seq: &FieldSequence, p: &StormParams) -> Result<StormReport> {
    track_storms(&vorticity_series(seq, Boundary::Periodic)?, p)
}
