use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::{karras_sigmas, NoiseSchedule, Preconditioner};
use crate::autodiff::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::grid::Tensor;
use crate::nn::DenoiserNet;

/// Denoised estimate `D(x; sigma)` for a batch whose rows share one noise level each.
pub trait Denoiser: Sync {
    fn denoise(&self, x: &Tensor<f64>, sigma: &[f64]) -> Result<Tensor<f64>>;

    /// Network evaluations performed so far (one per batched call).
    fn evaluations(&self) -> usize {
        0
    }
}

/// Always returns zero.
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn denoise(&self, x: &Tensor<f64>, _sigma: &[f64]) -> Result<Tensor<f64>> {
        Ok(Tensor::zeros(x.shape()))
    }
}

/// Exact posterior mean for data distributed as `N(0, sigma_data^2 I)`.
pub struct GaussianDenoiser {
    pub sigma_data: f64,
}

impl Denoiser for GaussianDenoiser {
    fn denoise(&self, x: &Tensor<f64>, sigma: &[f64]) -> Result<Tensor<f64>> {
        let row = row_len(x, sigma)?;
        let sd2 = self.sigma_data * self.sigma_data;
        let mut out = x.clone();
        for (i, chunk) in out.data_mut().chunks_mut(row).enumerate() {
            let k = sd2 / (sd2 + sigma[i] * sigma[i]);
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        Ok(out)
    }
}

fn row_len(x: &Tensor<f64>, sigma: &[f64]) -> Result<usize> {
    let rows = x.shape().first().copied().unwrap_or(0);
    if rows == 0 || sigma.len() != rows {
        return Err(Error::shape(format!(
            "{} noise levels for input {:?}",
            sigma.len(),
            x.shape()
        )));
    }
    for &s in sigma {
        Preconditioner::check_sigma(s)?;
    }
    Ok(x.len() / rows)
}

/// Preconditioned network: `c_skip x + c_out F(c_in x, cond, c_noise)`.
pub struct NetDenoiser<'a> {
    pub net: &'a DenoiserNet,
    pub store: &'a ParamStore<f32>,
    pub precond: Preconditioner,
    /// Guide fields, one row per sample row (or a single row broadcast to all).
    pub cond: Tensor<f32>,
    calls: AtomicUsize,
}

impl<'a> NetDenoiser<'a> {
    pub fn new(
        net: &'a DenoiserNet,
        store: &'a ParamStore<f32>,
        precond: Preconditioner,
        cond: Tensor<f32>,
    ) -> Self {
        Self {
            net,
            store,
            precond,
            cond,
            calls: AtomicUsize::new(0),
        }
    }

    fn cond_rows(&self, rows: usize) -> Result<Tensor<f32>> {
        let s = self.cond.shape();
        if s[0] == rows {
            return Ok(self.cond.clone());
        }
        if s[0] != 1 {
            return Err(Error::shape(format!("guide {s:?} for {rows} sample rows")));
        }
        let mut shape = s.to_vec();
        shape[0] = rows;
        let data = self.cond.data().repeat(rows);
        Tensor::new(&shape, data)
    }
}

impl Denoiser for NetDenoiser<'_> {
    fn denoise(&self, x: &Tensor<f64>, sigma: &[f64]) -> Result<Tensor<f64>> {
        let row = row_len(x, sigma)?;
        let p = &self.precond;
        let mut inp = x.cast::<f32>();
        for (i, chunk) in inp.data_mut().chunks_mut(row).enumerate() {
            let c = p.c_in(sigma[i]) as f32;
            chunk.iter_mut().for_each(|v| *v *= c);
        }
        let mut tape = Tape::new();
        let xv = tape.constant(inp);
        let cv = tape.constant(self.cond_rows(sigma.len())?);
        let f = self.net.forward(&mut tape, self.store, xv, cv, sigma)?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let f = tape.value(f);
        let mut out = x.clone();
        for (i, chunk) in out.data_mut().chunks_mut(row).enumerate() {
            let (cs, co) = (p.c_skip(sigma[i]), p.c_out(sigma[i]));
            for (v, fv) in chunk.iter_mut().zip(&f.data()[i * row..(i + 1) * row]) {
                *v = cs * *v + co * *fv as f64;
            }
        }
        Ok(out)
    }

    fn evaluations(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Deterministic,
    Stochastic,
}

/// Churn settings apply only in stochastic mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub s_churn: f64,
    pub s_tmin: f64,
    pub s_tmax: f64,
    pub s_noise: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplerMode::Deterministic,
            s_churn: 10.0,
            s_tmin: 0.05,
            s_tmax: 50.0,
            s_noise: 1.003,
            seed: 0,
        }
    }
}

/// Seed of ensemble member `m`: the SplitMix64 finalizer applied to
/// `base + (m + 1) * 0x9E3779B97F4A7C15` (wrapping).
pub fn member_seed(base: u64, m: u64) -> u64 {
    let mut z = base.wrapping_add((m + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_finite(x: &Tensor<f64>, step: usize) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite sampler state at step {step}")))
    }
}

/// Heun integration of the probability-flow ODE (with optional churn) for a batch of rows,
/// row `i` drawing all of its noise from a stream seeded with `seeds[i]`.
pub fn heun_sample_rows(
    den: &dyn Denoiser,
    row_shape: &[usize],
    seeds: &[u64],
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Tensor<f64>> {
    let sigmas = karras_sigmas(schedule)?;
    let rows = seeds.len();
    if rows == 0 {
        return Err(Error::arg("sampler needs at least one row"));
    }
    let row: usize = row_shape.iter().product();
    let mut shape = vec![rows];
    shape.extend_from_slice(row_shape);
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut data = Vec::with_capacity(rows * row);
    for rng in &mut rngs {
        for _ in 0..row {
            let z: f64 = StandardNormal.sample(rng);
            data.push(z * sigmas[0]);
        }
    }
    let mut x = Tensor::new(&shape, data)?;
    let n = schedule.n_steps;
    for i in 0..n {
        let (sigma, next) = (sigmas[i], sigmas[i + 1]);
        let gamma = if cfg.mode == SamplerMode::Stochastic && sigma >= cfg.s_tmin && sigma <= cfg.s_tmax {
            (cfg.s_churn / n as f64).min(2f64.sqrt() - 1.0)
        } else {
            0.0
        };
        let hat = sigma * (1.0 + gamma);
        if gamma > 0.0 {
            let amp = (hat * hat - sigma * sigma).sqrt() * cfg.s_noise;
            for (r, chunk) in x.data_mut().chunks_mut(row).enumerate() {
                for v in chunk {
                    let z: f64 = StandardNormal.sample(&mut rngs[r]);
                    *v += amp * z;
                }
            }
        }
        let d0 = den.denoise(&x, &vec![hat; rows])?;
        let slope: Vec<f64> = x.data().iter().zip(d0.data()).map(|(a, b)| (a - b) / hat).collect();
        let h = next - hat;
        let euler = Tensor::new(&shape, x.data().iter().zip(&slope).map(|(a, d)| a + h * d).collect())?;
        x = if next > 0.0 {
            check_finite(&euler, i)?;
            let d1 = den.denoise(&euler, &vec![next; rows])?;
            let data = x
                .data()
                .iter()
                .zip(&slope)
                .zip(euler.data().iter().zip(d1.data()))
                .map(|((a, s0), (e, dd))| a + h * 0.5 * (s0 + (e - dd) / next))
                .collect();
            Tensor::new(&shape, data)?
        } else {
            euler
        };
        check_finite(&x, i)?;
    }
    Ok(x)
}

/// One sample of shape `row_shape` (a leading batch axis of 1 is added for the denoiser).
pub fn heun_sample(
    den: &dyn Denoiser,
    row_shape: &[usize],
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Tensor<f64>> {
    let out = heun_sample_rows(den, row_shape, &[cfg.seed], schedule, cfg)?;
    out.reshape(row_shape)
}

/// `n_members` samples using seeds `member_seed(cfg.seed, m)`.
pub fn sample_ensemble(
    den: &dyn Denoiser,
    row_shape: &[usize],
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    n_members: usize,
) -> Result<Vec<Tensor<f64>>> {
    if n_members == 0 {
        return Err(Error::arg("ensemble needs at least one member"));
    }
    let seeds: Vec<u64> = (0..n_members as u64).map(|m| member_seed(cfg.seed, m)).collect();
    let all = heun_sample_rows(den, row_shape, &seeds, schedule, cfg)?;
    let row: usize = row_shape.iter().product();
    all.data()
        .chunks(row)
        .map(|c| Tensor::new(row_shape, c.to_vec()))
        .collect()
}
