//! Fourier analysis and band-limiting filters on planar periodic grids.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Tensor;

/// Unitary 2-D spectrum of an `[H, W]` field, row-major.
#[derive(Debug, Clone)]
pub struct Spectrum2 {
    pub h: usize,
    pub w: usize,
    pub data: Vec<Complex64>,
}

fn fft2_in_place(h: usize, w: usize, data: &mut [Complex64], inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_mut(w) {
        row.process(r);
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            buf[i] = data[i * w + j];
        }
        col.process(&mut buf);
        for i in 0..h {
            data[i * w + j] = buf[i];
        }
    }
    let norm = 1.0 / ((h * w) as f64).sqrt();
    for v in data.iter_mut() {
        *v *= norm;
    }
}

fn expect_hw(field: &Tensor<f64>) -> Result<(usize, usize)> {
    match *field.shape() {
        [h, w] if h >= 2 && w >= 2 => Ok((h, w)),
        _ => Err(Error::shape(format!(
            "expected an [H, W] field with H, W >= 2, got {:?}",
            field.shape()
        ))),
    }
}

/// Unitary 2-D discrete Fourier transform.
pub fn dft2(field: &Tensor<f64>) -> Result<Spectrum2> {
    let (h, w) = expect_hw(field)?;
    let mut data: Vec<Complex64> = field.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_in_place(h, w, &mut data, false);
    Ok(Spectrum2 { h, w, data })
}

/// Inverse of [`dft2`], keeping the real part.
pub fn idft2(spec: &Spectrum2) -> Tensor<f64> {
    let mut data = spec.data.clone();
    fft2_in_place(spec.h, spec.w, &mut data, true);
    Tensor::new(&[spec.h, spec.w], data.iter().map(|c| c.re).collect()).expect("extents")
}

/// Signed integer wavenumber of FFT index `i` on an axis of length `n`.
pub fn signed_wavenumber(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

fn radial_k(i: usize, j: usize, h: usize, w: usize) -> f64 {
    signed_wavenumber(i, h).hypot(signed_wavenumber(j, w))
}

/// Isotropic power spectrum in integer wavenumber bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialSpectrum {
    /// `power[n]` holds the energy of modes with `round(|k|) == n`; bin 0 (the mean) is zero.
    pub power: Vec<f64>,
    pub variance: f64,
    pub mean: f64,
}

impl SpatialSpectrum {
    pub fn bins(&self) -> impl Iterator<Item = usize> {
        0..self.power.len()
    }

    pub fn total(&self) -> f64 {
        self.power.iter().sum()
    }

    /// Element-wise mean of several spectra of equal length.
    pub fn average(spectra: &[SpatialSpectrum]) -> Result<Self> {
        let first = spectra
            .first()
            .ok_or_else(|| Error::arg("cannot average zero spectra"))?;
        let n = spectra.len() as f64;
        let mut out = SpatialSpectrum {
            power: vec![0.0; first.power.len()],
            variance: 0.0,
            mean: 0.0,
        };
        for s in spectra {
            if s.power.len() != first.power.len() {
                return Err(Error::shape("spectra of different lengths"));
            }
            for (a, b) in out.power.iter_mut().zip(&s.power) {
                *a += b / n;
            }
            out.variance += s.variance / n;
            out.mean += s.mean / n;
        }
        Ok(out)
    }
}

/// Radially binned spectrum; `sum(power)` equals the field variance.
pub fn radial_spectrum(field: &Tensor<f64>) -> Result<SpatialSpectrum> {
    let (h, w) = expect_hw(field)?;
    let spec = dft2(field)?;
    let kmax = radial_k(h / 2, w / 2, h, w).round() as usize;
    let mut power = vec![0.0; kmax + 1];
    let hw = (h * w) as f64;
    for i in 0..h {
        for j in 0..w {
            if i == 0 && j == 0 {
                continue;
            }
            let bin = radial_k(i, j, h, w).round() as usize;
            power[bin] += spec.data[i * w + j].norm_sqr() / hw;
        }
    }
    let mean = field.mean();
    let variance = field.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw;
    Ok(SpatialSpectrum {
        power,
        variance,
        mean,
    })
}

/// Sum of power over bins `k_lo..=k_hi`; an empty or out-of-range band yields 0.
pub fn band_energy(spectrum: &SpatialSpectrum, k_lo: usize, k_hi: usize) -> f64 {
    if k_lo > k_hi || k_lo >= spectrum.power.len() {
        log::warn!("empty wavenumber band [{k_lo}, {k_hi}]");
        return 0.0;
    }
    let hi = k_hi.min(spectrum.power.len() - 1);
    spectrum.power[k_lo..=hi].iter().sum()
}

/// Averaged Hann-windowed periodogram of a point time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalSpectrum {
    /// Cycles per unit time.
    pub freqs: Vec<f64>,
    /// One-sided power per frequency bin; bin 0 holds the squared series mean.
    pub power: Vec<f64>,
    pub location: Option<(usize, usize)>,
    pub segment_len: usize,
    pub n_segments: usize,
    pub overlap: f64,
}

impl TemporalSpectrum {
    pub fn total(&self) -> f64 {
        self.power.iter().sum()
    }
}

/// Welch estimate with Hann window; each segment is mean-removed and the DC
/// bin carries the squared series mean, so a constant series puts all power at zero
/// frequency and the total equals the mean square up to window gain.
pub fn temporal_spectrum(
    series: &[f64],
    segment_len: usize,
    overlap: f64,
    dt: f64,
) -> Result<TemporalSpectrum> {
    if segment_len < 8 {
        return Err(Error::arg(format!("segment length {segment_len} below 8")));
    }
    if segment_len > series.len() {
        return Err(Error::arg(format!(
            "segment length {segment_len} exceeds series length {}",
            series.len()
        )));
    }
    if !(0.0..1.0).contains(&overlap) || !(dt > 0.0) {
        return Err(Error::arg("overlap must lie in [0, 1) and dt must be positive"));
    }
    let n = segment_len;
    let step = ((n as f64) * (1.0 - overlap)).round().max(1.0) as usize;
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect();
    let u: f64 = window.iter().map(|w| w * w).sum();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let nbins = n / 2 + 1;
    let mut power = vec![0.0; nbins];
    let mut n_segments = 0;
    let mut start = 0;
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    while start + n <= series.len() {
        let seg = &series[start..start + n];
        let m = seg.iter().sum::<f64>() / n as f64;
        for (b, (&x, &wv)) in buf.iter_mut().zip(seg.iter().zip(&window)) {
            *b = Complex64::new((x - m) * wv, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate().skip(1) {
            let two_sided = buf[k].norm_sqr() / (n as f64 * u);
            *p += if 2 * k == n { two_sided } else { 2.0 * two_sided };
        }
        n_segments += 1;
        start += step;
    }
    for p in power.iter_mut().skip(1) {
        *p /= n_segments as f64;
    }
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    power[0] = mean * mean;
    let freqs = (0..nbins).map(|k| k as f64 / (n as f64 * dt)).collect();
    Ok(TemporalSpectrum {
        freqs,
        power,
        location: None,
        segment_len,
        n_segments,
        overlap,
    })
}

/// Band-limiting filter used for scale separation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FilterSpec {
    /// Zero every mode with `|k| > k_c`.
    SpectralCutoff { k_c: f64 },
    /// `levels`-level linear-interpolating lifting transform with details dropped.
    LiftingWavelet { levels: u32 },
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FilterSpec::SpectralCutoff { k_c } if !(k_c >= 1.0) => {
                Err(Error::arg(format!("cutoff k_c must be >= 1, got {k_c}")))
            }
            FilterSpec::LiftingWavelet { levels: 0 } => {
                Err(Error::arg("wavelet levels must be >= 1"))
            }
            _ => Ok(()),
        }
    }

    /// Wavenumber separating retained from removed scales on an `n`-point axis.
    pub fn cutoff(&self, n: usize) -> f64 {
        match *self {
            FilterSpec::SpectralCutoff { k_c } => k_c,
            FilterSpec::LiftingWavelet { levels } => n as f64 / 2f64.powi(levels as i32 + 1),
        }
    }

    /// Warning text when the filter cannot remove anything on an `h x w` grid.
    pub fn noop_warning(&self, h: usize, w: usize) -> Option<String> {
        match *self {
            FilterSpec::SpectralCutoff { k_c } if k_c >= (h.min(w) / 2) as f64 => Some(format!(
                "cutoff {k_c} at or above Nyquist {} of a {h}x{w} grid; filter is a no-op",
                h.min(w) / 2
            )),
            _ => None,
        }
    }
}

/// Applies `spec` to an `[H, W]` field.
pub fn lowpass(field: &Tensor<f64>, spec: &FilterSpec) -> Result<Tensor<f64>> {
    spec.validate()?;
    let (h, w) = expect_hw(field)?;
    if let Some(msg) = spec.noop_warning(h, w) {
        log::warn!("{msg}");
        return Ok(field.clone());
    }
    match *spec {
        FilterSpec::SpectralCutoff { k_c } => {
            let mut s = dft2(field)?;
            for i in 0..h {
                for j in 0..w {
                    if radial_k(i, j, h, w) > k_c {
                        s.data[i * w + j] = Complex64::new(0.0, 0.0);
                    }
                }
            }
            Ok(idft2(&s))
        }
        FilterSpec::LiftingWavelet { levels } => {
            let mut t = lifting_forward(field, levels)?;
            for lvl in &mut t.details {
                for d in lvl.iter_mut() {
                    d.data_mut().fill(0.0);
                }
            }
            lifting_inverse(&t)
        }
    }
}

/// Applies [`lowpass`] to each `[H, W]` plane of a `[..., H, W]` tensor.
pub fn lowpass_planes(field: &Tensor<f64>, spec: &FilterSpec) -> Result<Tensor<f64>> {
    let s = field.shape();
    if s.len() < 2 {
        return Err(Error::shape(format!("expected [..., H, W], got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = Vec::with_capacity(field.len());
    for plane in field.data().chunks(h * w) {
        let p = Tensor::new(&[h, w], plane.to_vec())?;
        out.extend(lowpass(&p, spec)?.into_data());
    }
    Tensor::new(s, out)
}

/// Multi-level separable lifting decomposition.
#[derive(Debug, Clone)]
pub struct LiftingTransform {
    pub approx: Tensor<f64>,
    /// Per level (finest first): `[LH, HL, HH]` detail bands.
    pub details: Vec<[Tensor<f64>; 3]>,
}

fn lift_1d(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() / 2;
    let mut s: Vec<f64> = (0..n).map(|i| x[2 * i]).collect();
    let d: Vec<f64> = (0..n)
        .map(|i| x[2 * i + 1] - 0.5 * (s[i] + s[(i + 1) % n]))
        .collect();
    for i in 0..n {
        s[i] += 0.25 * (d[(i + n - 1) % n] + d[i]);
    }
    (s, d)
}

fn unlift_1d(s: &[f64], d: &[f64]) -> Vec<f64> {
    let n = s.len();
    let even: Vec<f64> = (0..n)
        .map(|i| s[i] - 0.25 * (d[(i + n - 1) % n] + d[i]))
        .collect();
    let mut x = vec![0.0; 2 * n];
    for i in 0..n {
        x[2 * i] = even[i];
        x[2 * i + 1] = d[i] + 0.5 * (even[i] + even[(i + 1) % n]);
    }
    x
}

fn transpose(d: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut t = vec![0.0; d.len()];
    for i in 0..h {
        for j in 0..w {
            t[j * h + i] = d[i * w + j];
        }
    }
    t
}

/// Splits each row into (low, high) halves.
fn lift_rows(d: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lo = Vec::with_capacity(h * w / 2);
    let mut hi = Vec::with_capacity(h * w / 2);
    for row in d.chunks(w) {
        let (s, dd) = lift_1d(row);
        lo.extend(s);
        hi.extend(dd);
    }
    (lo, hi)
}

fn unlift_rows(lo: &[f64], hi: &[f64], h: usize, half_w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * half_w * 2);
    for i in 0..h {
        out.extend(unlift_1d(
            &lo[i * half_w..(i + 1) * half_w],
            &hi[i * half_w..(i + 1) * half_w],
        ));
    }
    out
}

pub fn lifting_forward(field: &Tensor<f64>, levels: u32) -> Result<LiftingTransform> {
    let (mut h, mut w) = expect_hw(field)?;
    let div = 1usize << levels;
    if levels == 0 || h % div != 0 || w % div != 0 || h / div < 2 || w / div < 2 {
        return Err(Error::arg(format!(
            "{levels} lifting levels need extents divisible by {div} (got {h}x{w})"
        )));
    }
    let mut cur = field.data().to_vec();
    let mut details = Vec::with_capacity(levels as usize);
    for _ in 0..levels {
        let (lo, hi) = lift_rows(&cur, h, w);
        let hw2 = w / 2;
        let (ll, lh) = lift_rows(&transpose(&lo, h, hw2), hw2, h);
        let (hl, hh) = lift_rows(&transpose(&hi, h, hw2), hw2, h);
        let (nh, nw) = (h / 2, w / 2);
        let band = |v: Vec<f64>| Tensor::new(&[nh, nw], transpose(&v, nw, nh)).expect("band");
        details.push([band(lh), band(hl), band(hh)]);
        cur = transpose(&ll, nw, nh);
        h = nh;
        w = nw;
    }
    Ok(LiftingTransform {
        approx: Tensor::new(&[h, w], cur)?,
        details,
    })
}

pub fn lifting_inverse(t: &LiftingTransform) -> Result<Tensor<f64>> {
    let (mut h, mut w) = (t.approx.shape()[0], t.approx.shape()[1]);
    let mut cur = t.approx.data().to_vec();
    for [lh, hl, hh] in t.details.iter().rev() {
        // columns first (undo the second pass), then rows
        let lo = unlift_rows(&transpose(&cur, h, w), &transpose(lh.data(), h, w), w, h);
        let hi = unlift_rows(&transpose(hl.data(), h, w), &transpose(hh.data(), h, w), w, h);
        let lo = transpose(&lo, w, 2 * h);
        let hi = transpose(&hi, w, 2 * h);
        cur = unlift_rows(&lo, &hi, 2 * h, w);
        h *= 2;
        w *= 2;
    }
    Tensor::new(&[h, w], cur)
}

/// Band-limited (zero-padded spectrum) interpolation onto a grid `factor` times finer.
pub fn fourier_upsample(field: &Tensor<f64>, factor: usize) -> Result<Tensor<f64>> {
    let (h, w) = expect_hw(field)?;
    if factor == 0 {
        return Err(Error::arg("factor must be at least 1"));
    }
    let s = dft2(field)?;
    let (hh, ww) = (h * factor, w * factor);
    let mut big = vec![Complex64::new(0.0, 0.0); hh * ww];
    for i in 0..h {
        for j in 0..w {
            let ki = signed_wavenumber(i, h);
            let kj = signed_wavenumber(j, w);
            // drop the ambiguous Nyquist rows/columns
            if (h % 2 == 0 && i == h / 2) || (w % 2 == 0 && j == w / 2) {
                continue;
            }
            let ii = ki.rem_euclid(hh as f64) as usize;
            let jj = kj.rem_euclid(ww as f64) as usize;
            big[ii * ww + jj] = s.data[i * w + j] * factor as f64;
        }
    }
    Ok(idft2(&Spectrum2 {
        h: hh,
        w: ww,
        data: big,
    }))
}

fn fmt9(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn spatial_csv(s: &SpatialSpectrum) -> String {
    let mut out = String::from("bin,power\n");
    for (k, p) in s.power.iter().enumerate() {
        let _ = writeln!(out, "{k},{}", fmt9(*p));
    }
    out
}

pub fn temporal_csv(s: &TemporalSpectrum) -> String {
    let mut out = String::from("freq,power\n");
    for (f, p) in s.freqs.iter().zip(&s.power) {
        let _ = writeln!(out, "{},{}", fmt9(*f), fmt9(*p));
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w], |_| StandardNormal.sample(&mut rng))
    }

    fn sine_x(n: usize, k: f64, amp: f64) -> Tensor<f64> {
        Tensor::from_fn(&[n, n], |idx| {
            amp * (2.0 * PI * k * (idx % n) as f64 / n as f64).sin()
        })
    }

    #[test]
    fn dft2_examples() {
        let c = Tensor::full(&[4, 6], 1.5).unwrap();
        let s = dft2(&c).unwrap();
        assert!((s.data[0].re - 1.5 * 24f64.sqrt()).abs() < 1e-12);
        assert!(s.data[1..].iter().all(|z| z.norm() < 1e-12));

        let mut d = Tensor::zeros(&[8, 8]);
        d.data_mut()[0] = 1.0;
        let s = dft2(&d).unwrap();
        assert!(s.data.iter().all(|z| (z.norm() - 1.0 / 8.0).abs() < 1e-14));

        let x = noise(16, 16, 1);
        let back = idft2(&dft2(&x).unwrap());
        let err = x.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10);
    }

    #[test]
    fn radial_spectrum_examples() {
        let s = radial_spectrum(&sine_x(32, 5.0, 1.0)).unwrap();
        assert!(s.power[5] >= 0.99 * s.total());
        assert!((s.total() - s.variance).abs() < 1e-12);

        let two = sine_x(64, 3.0, 1.0).zip_map(&sine_x(64, 9.0, 2.0), |a, b| a + b).unwrap();
        let s = radial_spectrum(&two).unwrap();
        assert!((s.power[9] / s.power[3] - 4.0).abs() < 0.04);
    }

    #[test]
    fn band_energy_examples() {
        let s = radial_spectrum(&noise(32, 32, 3)).unwrap();
        let top = s.power.len() - 1;
        assert!((band_energy(&s, 0, top) - s.variance).abs() < 1e-9 * s.variance);
        let split = band_energy(&s, 0, 7) + band_energy(&s, 8, top);
        assert!((split - band_energy(&s, 0, top)).abs() < 1e-12);
        assert_eq!(band_energy(&s, 9, 4), 0.0);
        let sine = radial_spectrum(&sine_x(32, 5.0, 1.0)).unwrap();
        assert!(band_energy(&sine, 4, 6) >= 0.99 * sine.total());
    }

    #[test]
    fn temporal_examples() {
        let t = 1024;
        let f0 = 32.0 / 256.0;
        let x: Vec<f64> = (0..t).map(|i| (2.0 * PI * f0 * i as f64).sin()).collect();
        let s = temporal_spectrum(&x, 256, 0.5, 1.0).unwrap();
        let peak = (0..s.power.len())
            .max_by(|&a, &b| s.power[a].total_cmp(&s.power[b]))
            .unwrap();
        assert!((s.freqs[peak] - f0).abs() < 1e-12);
        // window-gain corrected total equals the series variance (0.5 for a unit sine)
        assert!((s.total() - 0.5).abs() < 0.01);

        let c = vec![2.0; 512];
        let s = temporal_spectrum(&c, 64, 0.5, 1.0).unwrap();
        assert!((s.power[0] - 4.0).abs() < 1e-12);
        assert!(s.power[1..].iter().all(|&p| p.abs() < 1e-20));

        assert!(temporal_spectrum(&c, 1024, 0.5, 1.0).is_err());
        assert!(temporal_spectrum(&c, 4, 0.5, 1.0).is_err());
    }

    #[test]
    fn ar1_spectrum_matches_analytic_density() {
        // x_t = phi x_{t-1} + e_t, e ~ N(0, 1): two-sided density 1 / |1 - phi e^{-2 pi i f}|^2
        let phi = 0.9;
        let n = 1 << 18;
        let seg = 256;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut x = Vec::with_capacity(n);
        let mut prev = 0.0;
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            prev = phi * prev + e;
            x.push(prev);
        }
        let s = temporal_spectrum(&x, seg, 0.5, 1.0).unwrap();
        for k in seg / 16..seg / 4 {
            let f = s.freqs[k];
            let dens = 1.0 / (1.0 - 2.0 * phi * (2.0 * PI * f).cos() + phi * phi);
            let want = 2.0 * dens / seg as f64;
            assert!(
                (s.power[k] / want - 1.0).abs() < 0.10,
                "bin {k}: {} vs {want}",
                s.power[k]
            );
        }
        for k in 2..seg / 2 {
            assert!(s.power[k] < s.power[k - 1] * 1.15, "not decreasing at {k}");
        }
    }

    #[test]
    fn spectral_cutoff_examples() {
        let c = Tensor::full(&[16, 16], 3.0).unwrap();
        for spec in [
            FilterSpec::SpectralCutoff { k_c: 2.0 },
            FilterSpec::LiftingWavelet { levels: 2 },
        ] {
            let out = lowpass(&c, &spec).unwrap();
            assert!(out.data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
        }
        let out = lowpass(&sine_x(64, 10.0, 1.0), &FilterSpec::SpectralCutoff { k_c: 5.0 }).unwrap();
        assert!(out.max_abs() < 1e-10);

        let x = noise(32, 32, 5);
        let spec = FilterSpec::SpectralCutoff { k_c: 6.0 };
        let once = lowpass(&x, &spec).unwrap();
        let s = radial_spectrum(&once).unwrap();
        assert!(s.power[7..].iter().all(|&p| p < 1e-24));
        let twice = lowpass(&once, &spec).unwrap();
        let err = once.data().iter().zip(twice.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10);

        assert!(spec.noop_warning(32, 32).is_none());
        assert!(FilterSpec::SpectralCutoff { k_c: 16.0 }.noop_warning(32, 32).is_some());
        assert!(FilterSpec::SpectralCutoff { k_c: 0.5 }.validate().is_err());
        assert!(FilterSpec::LiftingWavelet { levels: 0 }.validate().is_err());
    }

    #[test]
    fn spectral_cutoff_is_linear() {
        let (x, y) = (noise(16, 16, 1), noise(16, 16, 2));
        let spec = FilterSpec::SpectralCutoff { k_c: 4.0 };
        let comb = x.zip_map(&y, |a, b| 2.0 * a - 0.5 * b).unwrap();
        let lhs = lowpass(&comb, &spec).unwrap();
        let (fx, fy) = (lowpass(&x, &spec).unwrap(), lowpass(&y, &spec).unwrap());
        for k in 0..lhs.len() {
            let rhs = 2.0 * fx.data()[k] - 0.5 * fy.data()[k];
            assert!((lhs.data()[k] - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn lifting_reconstructs_perfectly_and_is_idempotent() {
        let x = noise(32, 16, 9);
        let t = lifting_forward(&x, 3).unwrap();
        assert_eq!(t.approx.shape(), &[4, 2]);
        let back = lifting_inverse(&t).unwrap();
        let err = x.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);

        let spec = FilterSpec::LiftingWavelet { levels: 2 };
        let once = lowpass(&x, &spec).unwrap();
        let twice = lowpass(&once, &spec).unwrap();
        let drift = once.data().iter().zip(twice.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-12);
        assert!(lifting_forward(&noise(12, 12, 1), 3).is_err());
    }

    #[test]
    fn wavelet_lowpass_preserves_the_low_band() {
        let spec = FilterSpec::LiftingWavelet { levels: 2 };
        let kc = spec.cutoff(64) as usize;
        let (mut before, mut after) = (0.0, 0.0);
        for seed in 0..10 {
            let x = noise(64, 64, 100 + seed);
            before += band_energy(&radial_spectrum(&x).unwrap(), 1, kc);
            after += band_energy(&radial_spectrum(&lowpass(&x, &spec).unwrap()).unwrap(), 1, kc);
        }
        let db = 10.0 * (after / before).log10();
        assert!(db.abs() < 1.0, "low band changed by {db} dB");
    }

    #[test]
    fn subsampling_a_band_limited_field_is_alias_free() {
        use crate::grid::subsample;
        let x = noise(64, 64, 12);
        let filtered = lowpass(&x, &FilterSpec::SpectralCutoff { k_c: 7.0 }).unwrap();
        let coarse = subsample(&filtered.clone().reshape(&[1, 64, 64]).unwrap(), 4)
            .unwrap()
            .reshape(&[16, 16])
            .unwrap();
        let up = fourier_upsample(&coarse, 4).unwrap();
        let a = radial_spectrum(&filtered).unwrap();
        let b = radial_spectrum(&up).unwrap();
        for k in 1..=7 {
            assert!((a.power[k] - b.power[k]).abs() <= 1e-3 * a.power[k], "bin {k}");
        }
    }

    #[test]
    fn parseval_holds_on_rectangular_grids() {
        for seed in 0..5 {
            let x = noise(12, 20, seed);
            let s = radial_spectrum(&x).unwrap();
            assert!((s.total() - s.variance).abs() <= 1e-6 * s.variance);
        }
    }

    #[test]
    fn csv_layout() {
        let s = radial_spectrum(&sine_x(8, 1.0, 1.0)).unwrap();
        let csv = spatial_csv(&s);
        assert!(csv.starts_with("bin,power\n0,0.00000000e0\n"));
        assert_eq!(csv.lines().count(), s.power.len() + 1);
    }
}
