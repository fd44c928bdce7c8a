use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FieldSequence, GridMeta, Tensor};
use crate::spectral::{dft2, idft2, signed_wavenumber, Spectrum2};

/// Parameters of the synthetic advected, stochastically forced wind fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_lat: usize,
    pub n_lon: usize,
    pub steps: usize,
    /// Radial spectrum of each wind component decays as `k^-alpha`.
    pub alpha: f64,
    /// Advection speed in cells per step along (x = lon, y = lat).
    pub speed: (f64, f64),
    /// Fraction in [0, 1] of the variance above `small_scale_cutoff` that is
    /// carried by the Ornstein-Uhlenbeck component instead of the advected one.
    pub forcing_amplitude: f64,
    /// Wavenumber above which the stochastic component lives.
    pub small_scale_cutoff: f64,
    /// e-folding time of the stochastic component, in steps.
    pub decorrelation_time: f64,
    /// Standard deviation of u and v.
    pub amplitude: f64,
    pub orography_alpha: f64,
    pub dt: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_lat: 64,
            n_lon: 64,
            steps: 256,
            alpha: 3.0,
            speed: (1.0, 0.0),
            forcing_amplitude: 1.0,
            small_scale_cutoff: 8.0,
            decorrelation_time: 4.0,
            amplitude: 1.0,
            orography_alpha: 4.0,
            dt: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.n_lat < 4 || self.n_lon < 4 {
            return bad(format!("grid {}x{} below 4x4", self.n_lat, self.n_lon));
        }
        if self.steps < 16 {
            return bad(format!("steps {} below 16", self.steps));
        }
        if !(self.alpha > 0.0) || !(self.orography_alpha > 0.0) {
            return bad("spectral slopes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.forcing_amplitude) {
            return bad(format!("forcing_amplitude {} outside [0, 1]", self.forcing_amplitude));
        }
        if !(self.decorrelation_time > 0.0) || !(self.amplitude > 0.0) || !(self.dt > 0.0) {
            return bad("decorrelation_time, amplitude and dt must be positive".into());
        }
        if !(self.small_scale_cutoff >= 0.0) || !self.speed.0.is_finite() || !self.speed.1.is_finite() {
            return bad("small_scale_cutoff must be >= 0 and speed finite".into());
        }
        Ok(())
    }
}

/// Spectral amplitude filter with per-mode variance `k^-(alpha+1)`, so that the
/// radially binned power follows `k^-alpha`; normalized to unit field variance
/// before the band weight is applied.
fn shape_filter(h: usize, w: usize, alpha: f64, weight: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut g = vec![0.0; h * w];
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let k = signed_wavenumber(i, h).hypot(signed_wavenumber(j, w));
            if k > 0.0 {
                let s = k.powf(-(alpha + 1.0));
                total += s;
                g[i * w + j] = s;
            }
        }
    }
    let norm = (h * w) as f64 / total;
    for i in 0..h {
        for j in 0..w {
            let k = signed_wavenumber(i, h).hypot(signed_wavenumber(j, w));
            g[i * w + j] = (g[i * w + j] * norm * weight(k)).sqrt();
        }
    }
    g
}

fn white(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(&[h, w], |_| StandardNormal.sample(rng))
}

fn shaped(filter: &[f64], noise: &Tensor<f64>) -> Result<Spectrum2> {
    let mut s = dft2(noise)?;
    for (z, g) in s.data.iter_mut().zip(filter) {
        *z *= *g;
    }
    Ok(s)
}

/// Circular shift by `(dx, dy)` cells: exact roll for integers, Fourier phase shift otherwise.
fn advect(field: &Tensor<f64>, dx: f64, dy: f64) -> Result<Tensor<f64>> {
    let (h, w) = (field.shape()[0], field.shape()[1]);
    if dx.fract() == 0.0 && dy.fract() == 0.0 {
        let (sx, sy) = (dx.rem_euclid(w as f64) as usize, dy.rem_euclid(h as f64) as usize);
        let src = field.data();
        return Ok(Tensor::from_fn(&[h, w], |idx| {
            let (i, j) = (idx / w, idx % w);
            src[((i + h - sy) % h) * w + (j + w - sx) % w]
        }));
    }
    let mut s = dft2(field)?;
    for i in 0..h {
        for j in 0..w {
            let ph = -2.0 * std::f64::consts::PI
                * (signed_wavenumber(j, w) * dx / w as f64 + signed_wavenumber(i, h) * dy / h as f64);
            s.data[i * w + j] *= rustfft::num_complex::Complex64::from_polar(1.0, ph);
        }
    }
    Ok(idft2(&s))
}

/// Truth sequence with channels `u`, `v`, `orog`.
///
/// Each wind component is a frozen random field advected at `speed`, plus an
/// Ornstein-Uhlenbeck component above `small_scale_cutoff` that is advected and
/// partially refreshed every step. The two share the `k^-alpha` spectrum so the
/// expected total spectrum is the same power law at all times.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<FieldSequence> {
    cfg.validate()?;
    let (h, w, t_total) = (cfg.n_lat, cfg.n_lon, cfg.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let a = cfg.forcing_amplitude;
    let kc = cfg.small_scale_cutoff;
    let large = shape_filter(h, w, cfg.alpha, |k| if k > kc { 1.0 - a } else { 1.0 });
    let small = shape_filter(h, w, cfg.alpha, |k| if k > kc { a } else { 0.0 });
    let orog_filter = shape_filter(h, w, cfg.orography_alpha, |_| 1.0);
    let phi = (-1.0 / cfg.decorrelation_time).exp();
    let refresh = (1.0 - phi * phi).sqrt();
    let amp = cfg.amplitude;

    let mut frozen = Vec::with_capacity(2);
    let mut ou = Vec::with_capacity(2);
    for _ in 0..2 {
        frozen.push(idft2(&shaped(&large, &white(h, w, &mut rng))?));
        ou.push(idft2(&shaped(&small, &white(h, w, &mut rng))?));
    }
    let orog = idft2(&shaped(&orog_filter, &white(h, w, &mut rng))?);

    let plane = h * w;
    let mut data = Vec::with_capacity(t_total * 3 * plane);
    for t in 0..t_total {
        if t > 0 {
            for s in ou.iter_mut() {
                let moved = advect(s, cfg.speed.0, cfg.speed.1)?;
                let fresh = if a > 0.0 {
                    idft2(&shaped(&small, &white(h, w, &mut rng))?)
                } else {
                    Tensor::zeros(&[h, w])
                };
                *s = moved.zip_map(&fresh, |m, f| phi * m + refresh * f)?;
            }
        }
        for c in 0..2 {
            let base = advect(&frozen[c], cfg.speed.0 * t as f64, cfg.speed.1 * t as f64)?;
            for (b, s) in base.data().iter().zip(ou[c].data()) {
                data.push((amp * (b + s)) as f32);
            }
        }
        data.extend(orog.data().iter().map(|&v| v as f32));
    }
    let meta = GridMeta::new(h, w, &["u", "v", "orog"])?.with_spacing(1.0, 1.0, cfg.dt)?;
    FieldSequence::new(meta, Tensor::new(&[t_total, 3, h, w], data)?)
}
