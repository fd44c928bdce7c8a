use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sampler::Denoiser;
use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::Tensor;
use crate::nn::{noise_label, DenoiserNet};

/// Noise levels of the reverse process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub n_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            n_steps: 18,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho >= 1.0) || self.n_steps == 0 {
            return Err(Error::Config(format!(
                "need rho >= 1 and n_steps >= 1, got {} and {}",
                self.rho, self.n_steps
            )));
        }
        Ok(())
    }

    pub fn with_steps(mut self, n_steps: usize) -> Self {
        self.n_steps = n_steps;
        self
    }
}

/// `n_steps` decreasing levels interpolated in `sigma^(1/rho)`, followed by a terminal 0.
pub fn karras_sigmas(s: &NoiseSchedule) -> Result<Vec<f64>> {
    s.validate()?;
    let n = s.n_steps;
    if n == 1 {
        return Ok(vec![s.sigma_max, 0.0]);
    }
    let (a, b) = (s.sigma_max.powf(1.0 / s.rho), s.sigma_min.powf(1.0 / s.rho));
    let mut out: Vec<f64> = (0..n)
        .map(|i| (a + i as f64 / (n - 1) as f64 * (b - a)).powf(s.rho))
        .collect();
    out[0] = s.sigma_max;
    out[n - 1] = s.sigma_min;
    out.push(0.0);
    Ok(out)
}

/// Scalings that keep the network's input and target at unit variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preconditioner {
    pub sigma_data: f64,
}

impl Preconditioner {
    pub fn new(sigma_data: f64) -> Result<Self> {
        if !(sigma_data > 0.0 && sigma_data.is_finite()) {
            return Err(Error::arg(format!("sigma_data must be positive, got {sigma_data}")));
        }
        Ok(Self { sigma_data })
    }

    pub fn c_skip(&self, sigma: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        sd2 / (sigma * sigma + sd2)
    }

    pub fn c_out(&self, sigma: f64) -> f64 {
        sigma * self.sigma_data / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_in(&self, sigma: f64) -> f64 {
        1.0 / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_noise(&self, sigma: f64) -> f64 {
        noise_label(sigma)
    }

    pub fn loss_weight(&self, sigma: f64) -> f64 {
        let sd = self.sigma_data;
        (sigma * sigma + sd * sd) / (sigma * sd).powi(2)
    }

    pub fn check_sigma(sigma: f64) -> Result<()> {
        if sigma > 0.0 && sigma.is_finite() {
            Ok(())
        } else {
            Err(Error::arg(format!("sigma must be positive and finite, got {sigma}")))
        }
    }
}

/// Log-normal training noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SigmaSampler {
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for SigmaSampler {
    fn default() -> Self {
        Self {
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

impl SigmaSampler {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let z = Normal::new(self.p_mean, self.p_std).expect("finite std").sample(rng);
        z.exp()
    }
}

fn check_rows(r: &[usize], sigmas: &[f64]) -> Result<(usize, usize)> {
    if r.is_empty() || r[0] == 0 {
        return Err(Error::arg("score loss needs a non-empty batch"));
    }
    if sigmas.len() != r[0] {
        return Err(Error::shape(format!("{} noise levels for batch {}", sigmas.len(), r[0])));
    }
    for &s in sigmas {
        Preconditioner::check_sigma(s)?;
    }
    Ok((r[0], r[1..].iter().product()))
}

/// Weighted denoising loss `mean_b lambda(sigma_b) * mean((D(r_b + sigma_b n_b) - r_b)^2)`
/// for a direct denoiser (no tape).
pub fn score_loss_value(
    p: &Preconditioner,
    den: &dyn Denoiser,
    r_clean: &Tensor<f64>,
    sigmas: &[f64],
    noise: &Tensor<f64>,
) -> Result<f64> {
    let (b, row) = check_rows(r_clean.shape(), sigmas)?;
    noise.expect_shape(r_clean.shape())?;
    let mut total = 0.0;
    for i in 0..b {
        let r = &r_clean.data()[i * row..(i + 1) * row];
        let n = &noise.data()[i * row..(i + 1) * row];
        let x: Vec<f64> = r.iter().zip(n).map(|(a, e)| a + sigmas[i] * e).collect();
        let mut shape = r_clean.shape().to_vec();
        shape[0] = 1;
        let d = den.denoise(&Tensor::new(&shape, x)?, &[sigmas[i]])?;
        let se: f64 = d.data().iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
        total += p.loss_weight(sigmas[i]) * se / row as f64;
    }
    Ok(total / b as f64)
}

/// Differentiable version of [`score_loss_value`] for a network denoiser.
#[allow(clippy::too_many_arguments)]
pub fn score_loss(
    tape: &mut Tape<f32>,
    store: &ParamStore<f32>,
    net: &DenoiserNet,
    p: &Preconditioner,
    r_clean: &Tensor<f32>,
    cond: &Tensor<f32>,
    sigmas: &[f64],
    noise: &Tensor<f32>,
) -> Result<Var> {
    let (b, row) = check_rows(r_clean.shape(), sigmas)?;
    noise.expect_shape(r_clean.shape())?;
    let mut x = r_clean.clone();
    for (i, chunk) in x.data_mut().chunks_mut(row).enumerate() {
        let s = sigmas[i] as f32;
        for (v, e) in chunk.iter_mut().zip(&noise.data()[i * row..(i + 1) * row]) {
            *v += s * e;
        }
    }
    let c_in: Vec<f32> = sigmas.iter().map(|&s| p.c_in(s) as f32).collect();
    let c_skip: Vec<f32> = sigmas.iter().map(|&s| p.c_skip(s) as f32).collect();
    let c_out: Vec<f32> = sigmas.iter().map(|&s| p.c_out(s) as f32).collect();
    let weight: Vec<f32> = sigmas.iter().map(|&s| p.loss_weight(s) as f32).collect();
    let xv = tape.constant(x);
    let inp = tape.scale_rows(xv, &c_in)?;
    let cv = tape.constant(cond.clone());
    let f = net.forward(tape, store, inp, cv, sigmas)?;
    let skip = tape.scale_rows(xv, &c_skip)?;
    let out = tape.scale_rows(f, &c_out)?;
    let d = tape.add(skip, out)?;
    let target = tape.constant(r_clean.clone());
    let diff = tape.sub(d, target)?;
    let sq = tape.square(diff)?;
    let weighted = tape.scale_rows(sq, &weight)?;
    debug_assert_eq!(b * row, tape.value(weighted).len());
    tape.mean(weighted)
}
