use serde::{Deserialize, Serialize};

use super::storms::{track_storms, StormParams, StormReport};
use crate::error::{Error, Result};
use crate::grid::{FieldSequence, Tensor};
use crate::physics::{vorticity, Boundary, WindField};
use crate::spectral::{radial_spectrum, temporal_spectrum, SpatialSpectrum};

/// Vorticity of every frame, `[T, H, W]`.
pub fn vorticity_series(seq: &FieldSequence, boundary: Boundary) -> Result<Tensor<f64>> {
    let (u, v) = seq.wind_channels()?;
    if seq.steps() == 0 {
        return Err(Error::arg("empty sequence"));
    }
    let (h, w) = (seq.meta.n_lat, seq.meta.n_lon);
    let mut data = Vec::with_capacity(seq.steps() * h * w);
    for t in 0..seq.steps() {
        let f = WindField::new(seq.plane_f64(t, u), seq.plane_f64(t, v), seq.meta.d_lat, seq.meta.d_lon)?
            .with_boundary(boundary);
        data.extend(vorticity(&f).into_data());
    }
    Tensor::new(&[seq.steps(), h, w], data)
}

/// Equal-width bins on `[lo, hi]`; values outside fall into the end bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdfBins {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl PdfBins {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || !(self.hi > self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::arg(format!("invalid histogram bins {self:?}")));
        }
        Ok(())
    }

    pub fn index(&self, v: f64) -> usize {
        let x = ((v - self.lo) / (self.hi - self.lo) * self.n as f64).floor();
        x.clamp(0.0, (self.n - 1) as f64) as usize
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.n)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / self.n as f64)
            .collect()
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.n as f64
    }
}

/// Normalized histogram (probability mass per bin).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub bins: PdfBins,
    pub mass: Vec<f64>,
}

pub fn histogram(values: &[f64], bins: &PdfBins) -> Result<Histogram> {
    bins.validate()?;
    if values.is_empty() {
        return Err(Error::arg("histogram of no values"));
    }
    let mut counts = vec![0u64; bins.n];
    for &v in values {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite value {v} in histogram")));
        }
        counts[bins.index(v)] += 1;
    }
    let n = values.len() as f64;
    Ok(Histogram {
        bins: *bins,
        mass: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}

/// Pooled space-time histogram of vorticity.
pub fn vorticity_pdf(seq: &FieldSequence, bins: &PdfBins) -> Result<Histogram> {
    vorticity_pdf_with(seq, bins, Boundary::Periodic)
}

pub fn vorticity_pdf_with(seq: &FieldSequence, bins: &PdfBins, boundary: Boundary) -> Result<Histogram> {
    histogram(vorticity_series(seq, boundary)?.data(), bins)
}

/// Wasserstein-1 distance between two histograms on the same bins.
pub fn wasserstein1(a: &Histogram, b: &Histogram) -> Result<f64> {
    if a.bins != b.bins {
        return Err(Error::arg("histograms use different bins"));
    }
    let (mut ca, mut cb, mut d) = (0.0, 0.0, 0.0);
    for (x, y) in a.mass.iter().zip(&b.mass) {
        ca += x;
        cb += y;
        d += (ca - cb).abs();
    }
    Ok(d * a.bins.width())
}

/// Inclusive wavenumber range `k_lo..=k_hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub name: String,
    pub k_lo: usize,
    pub k_hi: usize,
}

/// `low = [1, k_c]`, `high = (k_c, nyquist]`.
pub fn default_bands(k_c: f64, n_lat: usize, n_lon: usize) -> Vec<Band> {
    let kc = k_c.floor().max(1.0) as usize;
    let nyq = n_lat.min(n_lon) / 2;
    vec![
        Band {
            name: "low".into(),
            k_lo: 1,
            k_hi: kc,
        },
        Band {
            name: "high".into(),
            k_lo: kc + 1,
            k_hi: nyq,
        },
    ]
}

/// Integrated `|ln(pred / truth)|` over `idx` with spacing `dx`, plus the signed integral.
fn log_ratio_distance(pred: &[f64], truth: &[f64], idx: impl Iterator<Item = usize>, dx: f64) -> (f64, f64) {
    let top = truth.iter().chain(pred).fold(0.0f64, |m, &v| m.max(v));
    let floor = if top > 0.0 { top * 1e-12 } else { f64::MIN_POSITIVE };
    let (mut abs, mut signed) = (0.0, 0.0);
    for k in idx {
        let r = (pred[k].max(floor) / truth[k].max(floor)).ln();
        abs += r.abs() * dx;
        signed += r * dx;
    }
    (abs, signed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandScore {
    pub band: Band,
    pub distance: f64,
    /// Signed integral of the log ratio; negative means too little energy.
    pub signed: f64,
}

impl BandScore {
    pub fn flag(&self) -> &'static str {
        if self.distance == 0.0 {
            "match"
        } else if self.signed < 0.0 {
            "underrepresents"
        } else {
            "overrepresents"
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocationScore {
    pub location: (usize, usize),
    pub distance: f64,
    pub freqs: Vec<f64>,
    pub truth: Vec<f64>,
    pub pred: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StormRow {
    pub region: String,
    pub truth: usize,
    pub pred: usize,
}

/// Everything the report renders.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreCard {
    pub bands: Vec<BandScore>,
    pub spatial_truth: Vec<f64>,
    pub spatial_pred: Vec<f64>,
    pub temporal: Vec<LocationScore>,
    pub pdf_truth: Option<Histogram>,
    pub pdf_pred: Option<Histogram>,
    pub vorticity_w1: Option<f64>,
    pub storm_params: StormParams,
    pub storms: Vec<StormRow>,
}

impl ScoreCard {
    pub fn empty(storm_params: StormParams) -> Self {
        Self {
            bands: Vec::new(),
            spatial_truth: Vec::new(),
            spatial_pred: Vec::new(),
            temporal: Vec::new(),
            pdf_truth: None,
            pdf_pred: None,
            vorticity_w1: None,
            storm_params,
            storms: Vec::new(),
        }
    }

    pub fn band(&self, name: &str) -> Option<&BandScore> {
        self.bands.iter().find(|b| b.band.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreOptions {
    pub pdf_bins: usize,
    /// Storm detection; a missing threshold scales with the truth vorticity spread.
    pub storms: Option<StormParams>,
    /// Threshold in units of the truth vorticity standard deviation when `storms` is unset.
    pub storm_sigmas: f64,
    pub segment_len: usize,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            pdf_bins: 81,
            storms: None,
            storm_sigmas: 3.0,
            segment_len: 64,
        }
    }
}

/// Time-averaged radial spectrum of `u` plus that of `v`.
pub fn kinetic_spectrum(seq: &FieldSequence) -> Result<SpatialSpectrum> {
    let (u, v) = seq.wind_channels()?;
    let mut frames = Vec::with_capacity(seq.steps());
    for t in 0..seq.steps() {
        let su = radial_spectrum(&seq.plane_f64(t, u))?;
        let sv = radial_spectrum(&seq.plane_f64(t, v))?;
        frames.push(SpatialSpectrum {
            power: su.power.iter().zip(&sv.power).map(|(a, b)| a + b).collect(),
            variance: su.variance + sv.variance,
            mean: 0.0,
        });
    }
    SpatialSpectrum::average(&frames)
}

fn point_spectrum(seq: &FieldSequence, loc: (usize, usize), seg: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (u, v) = seq.wind_channels()?;
    let cell = loc.0 * seq.meta.n_lon + loc.1;
    let series = |c: usize| (0..seq.steps()).map(|t| seq.plane(t, c)[cell] as f64).collect::<Vec<_>>();
    let su = temporal_spectrum(&series(u), seg, 0.5, seq.meta.dt)?;
    let sv = temporal_spectrum(&series(v), seg, 0.5, seq.meta.dt)?;
    Ok((su.freqs, su.power.iter().zip(&sv.power).map(|(a, b)| a + b).collect()))
}

fn region_of(c: (f64, f64), h: usize, w: usize) -> &'static str {
    match (c.0 < h as f64 / 2.0, c.1 < w as f64 / 2.0) {
        (true, true) => "nw",
        (true, false) => "ne",
        (false, true) => "sw",
        (false, false) => "se",
    }
}

fn storm_table(truth: &StormReport, pred: &StormReport, h: usize, w: usize) -> Vec<StormRow> {
    let count = |r: &StormReport, region: &str| {
        r.events
            .iter()
            .filter(|e| region == "all" || region_of(e.track[0], h, w) == region)
            .count()
    };
    ["all", "nw", "ne", "sw", "se"]
        .iter()
        .map(|&region| StormRow {
            region: region.into(),
            truth: count(truth, region),
            pred: count(pred, region),
        })
        .collect()
}

fn std_dev(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Compares `pred` against `truth` band by band, at point locations, in vorticity
/// distribution and in storm counts.
pub fn spectral_scorecard(
    pred: &FieldSequence,
    truth: &FieldSequence,
    locations: &[(usize, usize)],
    bands: &[Band],
    opts: &ScoreOptions,
) -> Result<ScoreCard> {
    if (pred.meta.n_lat, pred.meta.n_lon) != (truth.meta.n_lat, truth.meta.n_lon) || pred.steps() != truth.steps() {
        return Err(Error::shape(format!(
            "prediction {}x{} over {} steps vs truth {}x{} over {} steps",
            pred.meta.n_lat,
            pred.meta.n_lon,
            pred.steps(),
            truth.meta.n_lat,
            truth.meta.n_lon,
            truth.steps()
        )));
    }
    let (h, w) = (truth.meta.n_lat, truth.meta.n_lon);
    for &(i, j) in locations {
        if i >= h || j >= w {
            return Err(Error::arg(format!("location ({i}, {j}) outside {h}x{w} grid")));
        }
    }
    let st = kinetic_spectrum(truth)?;
    let sp = kinetic_spectrum(pred)?;
    let mut band_scores = Vec::with_capacity(bands.len());
    for b in bands {
        let hi = b.k_hi.min(st.power.len() - 1);
        let (distance, signed) = log_ratio_distance(&sp.power, &st.power, b.k_lo..=hi, 1.0);
        band_scores.push(BandScore {
            band: b.clone(),
            distance,
            signed,
        });
    }

    let mut temporal = Vec::new();
    let seg = opts.segment_len.min(truth.steps());
    if seg >= 8 {
        for &loc in locations {
            let (freqs, pt) = point_spectrum(truth, loc, seg)?;
            let (_, pp) = point_spectrum(pred, loc, seg)?;
            let df = freqs.get(1).copied().unwrap_or(1.0);
            let (distance, _) = log_ratio_distance(&pp, &pt, 1..freqs.len(), df);
            temporal.push(LocationScore {
                location: loc,
                distance,
                freqs,
                truth: pt,
                pred: pp,
            });
        }
    } else if !locations.is_empty() {
        log::warn!("{} steps are too few for temporal spectra", truth.steps());
    }

    let zt = vorticity_series(truth, Boundary::Periodic)?;
    let zp = vorticity_series(pred, Boundary::Periodic)?;
    let top = zt.max_abs().max(zp.max_abs());
    let span = if top > 0.0 { top } else { 1.0 };
    let bins = PdfBins {
        lo: -span,
        hi: span,
        n: opts.pdf_bins.max(1),
    };
    let pdf_truth = histogram(zt.data(), &bins)?;
    let pdf_pred = histogram(zp.data(), &bins)?;
    let w1 = wasserstein1(&pdf_pred, &pdf_truth)?;

    let storm_params = match opts.storms {
        Some(p) => p,
        None => StormParams {
            threshold: (opts.storm_sigmas * std_dev(zt.data())).max(f64::MIN_POSITIVE),
            ..StormParams::default()
        },
    };
    let storms = if truth.steps() >= storm_params.min_lifetime {
        let rt = track_storms(&zt, &storm_params)?;
        let rp = track_storms(&zp, &storm_params)?;
        storm_table(&rt, &rp, h, w)
    } else {
        Vec::new()
    };

    Ok(ScoreCard {
        bands: band_scores,
        spatial_truth: st.power,
        spatial_pred: sp.power,
        temporal,
        pdf_truth: Some(pdf_truth),
        pdf_pred: Some(pdf_pred),
        vorticity_w1: Some(w1),
        storm_params,
        storms,
    })
}

/// Integrated absolute log-ratio of kinetic spectra over one band.
pub fn band_distance(pred: &FieldSequence, truth: &FieldSequence, band: &Band) -> Result<f64> {
    let st = kinetic_spectrum(truth)?;
    let sp = kinetic_spectrum(pred)?;
    let hi = band.k_hi.min(st.power.len() - 1);
    Ok(log_ratio_distance(&sp.power, &st.power, band.k_lo..=hi, 1.0).0)
}
