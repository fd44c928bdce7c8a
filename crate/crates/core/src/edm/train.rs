use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::sampler::{heun_sample_rows, member_seed, Denoiser, NetDenoiser, SamplerConfig};
use super::schedule::{score_loss, NoiseSchedule, Preconditioner, SigmaSampler};
use crate::autodiff::{AdamConfig, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::grid::{upsample_bilinear, FieldSequence, Tensor};
use crate::nn::{DenoiserConfig, DenoiserNet};

/// What the denoiser generates and what it is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionMode {
    /// Residual `truth - mean` conditioned on the mean prediction.
    Correction,
    /// Full field conditioned on the interpolated coarse input.
    End2end,
}

impl DiffusionMode {
    pub fn name(self) -> &'static str {
        match self {
            DiffusionMode::Correction => "correction",
            DiffusionMode::End2end => "end2end",
        }
    }
}

impl std::str::FromStr for DiffusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correction" => Ok(DiffusionMode::Correction),
            "end2end" => Ok(DiffusionMode::End2end),
            other => Err(Error::Config(format!("unknown diffusion mode `{other}`"))),
        }
    }
}

/// Guide fields and clean targets, both `[N, C, H, W]`.
#[derive(Debug, Clone)]
pub struct DiffusionSet {
    pub mode: DiffusionMode,
    pub cond: Tensor<f32>,
    pub target: Tensor<f32>,
}

fn uv_frames(seq: &FieldSequence, start: usize) -> Result<Tensor<f32>> {
    let (u, v) = seq.wind_channels()?;
    let plane = seq.plane_len();
    let n = seq.steps() - start;
    let mut data = Vec::with_capacity(n * 2 * plane);
    for t in start..seq.steps() {
        data.extend_from_slice(seq.plane(t, u));
        data.extend_from_slice(seq.plane(t, v));
    }
    Tensor::new(&[n, 2, seq.meta.n_lat, seq.meta.n_lon], data)
}

/// Interpolated final frame of every `t_in` window of `coarse`: `[N, C, H, W]`.
pub fn end2end_guides(coarse: &FieldSequence, t_in: usize, factor: usize) -> Result<Tensor<f32>> {
    if coarse.steps() < t_in || t_in == 0 {
        return Err(Error::arg(format!("{} steps cannot hold windows of {t_in}", coarse.steps())));
    }
    let frames = (t_in - 1..coarse.steps())
        .map(|t| upsample_bilinear(&coarse.frame(t), factor))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&frames)
}

impl DiffusionSet {
    /// Residual pairs from mean predictions aligned with `truth` steps `t_in - 1 ..`.
    pub fn correction(mean: &FieldSequence, truth: &FieldSequence, t_in: usize) -> Result<Self> {
        let target_full = uv_frames(truth, t_in - 1)?;
        let cond = uv_frames(mean, 0)?;
        if cond.shape() != target_full.shape() {
            return Err(Error::shape(format!(
                "mean predictions {:?} do not align with truth frames {:?}",
                cond.shape(),
                target_full.shape()
            )));
        }
        let target = target_full.zip_map(&cond, |a, b| a - b)?;
        Ok(Self {
            mode: DiffusionMode::Correction,
            cond,
            target,
        })
    }

    pub fn end2end(coarse: &FieldSequence, truth: &FieldSequence, t_in: usize, factor: usize) -> Result<Self> {
        let cond = end2end_guides(coarse, t_in, factor)?;
        let target = uv_frames(truth, t_in - 1)?;
        if cond.shape()[0] != target.shape()[0] || cond.shape()[2..] != target.shape()[2..] {
            return Err(Error::shape(format!(
                "guides {:?} do not align with truth frames {:?}",
                cond.shape(),
                target.shape()
            )));
        }
        Ok(Self {
            mode: DiffusionMode::End2end,
            cond,
            target,
        })
    }

    pub fn len(&self) -> usize {
        self.target.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pooled standard deviation of the targets over `idx`.
    pub fn sigma_data(&self, idx: &[usize]) -> Result<f64> {
        let row = self.target.len() / self.len().max(1);
        let (mut s, mut s2, mut n) = (0.0f64, 0.0f64, 0usize);
        for &i in idx {
            for &v in &self.target.data()[i * row..(i + 1) * row] {
                s += v as f64;
                s2 += (v as f64) * (v as f64);
                n += 1;
            }
        }
        if n < 2 {
            return Err(Error::arg("need at least two target values to estimate sigma_data"));
        }
        let mean = s / n as f64;
        let var = (s2 / n as f64 - mean * mean).max(0.0);
        let sd = var.sqrt();
        if !(sd > 0.0) {
            return Err(Error::Numeric("targets have zero spread; sigma_data undefined".into()));
        }
        Ok(sd)
    }

    fn rows(&self, t: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
        let items = idx.iter().map(|&i| t.index_axis0(i)).collect::<Result<Vec<_>>>()?;
        Tensor::stack(&items)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub sigma: SigmaSampler,
    pub val_fraction: f64,
    pub max_pairs: usize,
}

impl Default for DiffTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch: 8,
            lr: 1e-3,
            seed: 0,
            sigma: SigmaSampler::default(),
            val_fraction: 0.1,
            max_pairs: 0,
        }
    }
}

impl DiffTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if !(self.sigma.p_std > 0.0 && self.sigma.p_std.is_finite() && self.sigma.p_mean.is_finite()) {
            return Err(Error::Config("sigma sampler needs finite p_mean and positive p_std".into()));
        }
        Ok(())
    }
}

/// Everything besides the weights needed to rebuild a trained denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionMeta {
    pub mode: DiffusionMode,
    pub sigma_data: f64,
    /// Input window length and refinement factor the guides were built with.
    pub t_in: usize,
    pub factor: usize,
    pub net: DenoiserConfig,
}

impl DiffusionMeta {
    pub fn sidecar_path(ckpt: &Path) -> std::path::PathBuf {
        let mut s = ckpt.as_os_str().to_owned();
        s.push(".json");
        s.into()
    }

    pub fn save(&self, ckpt: &Path) -> Result<()> {
        let path = Self::sidecar_path(ckpt);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(ckpt: &Path) -> Result<Self> {
        let path = Self::sidecar_path(ckpt);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DiffLog {
    /// `(epoch, step, loss)`.
    pub steps: Vec<(usize, usize, f64)>,
    /// `(epoch, val_loss, wall_seconds)`.
    pub epochs: Vec<(usize, Option<f64>, f64)>,
}

impl DiffLog {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("epoch,step,loss\n");
        for (e, st, l) in &self.steps {
            let _ = writeln!(s, "{e},{st},{l:.8e}");
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,val_loss\n");
        for (e, v, _) in &self.epochs {
            let v = v.map(|v| format!("{v:.8e}")).unwrap_or_default();
            let _ = writeln!(s, "{e},{v}");
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        crate::mean_model::timing_csv(self.epochs.iter().map(|&(e, _, w)| (e, w)))
    }
}

/// Noise levels and unit normals for one batch, drawn from `rng`.
fn draw_noise(rng: &mut ChaCha8Rng, sampler: &SigmaSampler, shape: &[usize]) -> Result<(Vec<f64>, Tensor<f32>)> {
    let sigmas = (0..shape[0]).map(|_| sampler.sample(rng)).collect();
    let n: usize = shape.iter().product();
    let noise = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect();
    Ok((sigmas, Tensor::new(shape, noise)?))
}

fn loss_on(
    set: &DiffusionSet,
    net: &DenoiserNet,
    store: &ParamStore<f32>,
    p: &Preconditioner,
    idx: &[usize],
    sampler: &SigmaSampler,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let r = set.rows(&set.target, idx)?;
    let c = set.rows(&set.cond, idx)?;
    let (sigmas, noise) = draw_noise(rng, sampler, r.shape())?;
    let mut tape = Tape::new();
    let l = score_loss(&mut tape, store, net, p, &r, &c, &sigmas, &noise)?;
    Ok(tape.value(l).data()[0] as f64)
}

/// Score-matching training; returns the best-by-validation weights, sigma_data and the log.
pub fn train_diffusion(
    set: &DiffusionSet,
    net: &DenoiserNet,
    store: &mut ParamStore<f32>,
    cfg: &DiffTrainConfig,
) -> Result<(ParamStore<f32>, f64, DiffLog)> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::arg("no diffusion training pairs"));
    }
    let nc = &net.config;
    if set.target.shape()[1] != nc.channels || set.cond.shape()[1] != nc.cond_channels {
        return Err(Error::shape(format!(
            "denoiser expects {} target and {} guide channels, data has {:?} and {:?}",
            nc.channels,
            nc.cond_channels,
            set.target.shape(),
            set.cond.shape()
        )));
    }
    let (train, val) = crate::mean_model::split_tail(set.len(), cfg.val_fraction, cfg.max_pairs)?;
    let sigma_data = set.sigma_data(&train)?;
    let p = Preconditioner::new(sigma_data)?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = DiffLog::default();
    let mut best = (f64::INFINITY, store.clone());
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order = train.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let r = set.rows(&set.target, chunk)?;
            let c = set.rows(&set.cond, chunk)?;
            let (sigmas, noise) = draw_noise(&mut rng, &cfg.sigma, r.shape())?;
            let mut tape = Tape::new();
            let l = score_loss(&mut tape, store, net, &p, &r, &c, &sigmas, &noise)?;
            let loss = tape.value(l).data()[0] as f64;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite score loss at epoch {epoch}, step {step}")));
            }
            let g = tape.backward(l)?;
            store.set_grads(&g);
            store.adam_step(&adam)?;
            log.steps.push((epoch, step, loss));
            step += 1;
        }
        // fixed validation noise so epochs are comparable
        let val_loss = if val.is_empty() {
            None
        } else {
            let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
            let mut total = 0.0;
            for chunk in val.chunks(cfg.batch) {
                total += loss_on(set, net, store, &p, chunk, &cfg.sigma, &mut vrng)? * chunk.len() as f64;
            }
            Some(total / val.len() as f64)
        };
        if val_loss.is_none() || val_loss.unwrap() <= best.0 {
            best = (val_loss.unwrap_or(f64::NEG_INFINITY), store.clone());
        }
        log::info!("diffusion epoch {epoch}: val {val_loss:?}");
        log.epochs.push((epoch, val_loss, started.elapsed().as_secs_f64()));
    }
    Ok((best.1, sigma_data, log))
}

/// Samples `members` fields for every guide row of `cond` (`[N, Cc, H, W]`).
///
/// Frame `t`, member `m` uses seed `member_seed(member_seed(cfg.seed, t), m)`; rows are
/// batched `batch` at a time. Returns `members` tensors `[N, C, H, W]` and the number
/// of network evaluations summed over rows, which does not depend on `batch`.
pub fn sample_fields(
    net: &DenoiserNet,
    store: &ParamStore<f32>,
    meta: &DiffusionMeta,
    cond: &Tensor<f32>,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    members: usize,
    batch: usize,
) -> Result<(Vec<Tensor<f32>>, usize)> {
    if members == 0 {
        return Err(Error::arg("ensemble needs at least one member"));
    }
    let s = cond.shape().to_vec();
    if s.len() != 4 || s[1] != net.config.cond_channels {
        return Err(Error::shape(format!(
            "guides must be [N, {}, H, W], got {s:?}",
            net.config.cond_channels
        )));
    }
    if !cond.all_finite() {
        return Err(Error::Numeric("non-finite value in the guide fields".into()));
    }
    let p = Preconditioner::new(meta.sigma_data)?;
    let row_shape = [net.config.channels, s[2], s[3]];
    let row: usize = row_shape.iter().product();
    // (frame, member) jobs in frame-major order
    let jobs: Vec<(usize, usize)> = (0..s[0]).flat_map(|t| (0..members).map(move |m| (t, m))).collect();
    let mut out: Vec<Vec<f32>> = vec![vec![0.0; s[0] * row]; members];
    let mut evals = 0usize;
    for chunk in jobs.chunks(batch.max(1)) {
        let guides = chunk
            .iter()
            .map(|&(t, _)| cond.index_axis0(t))
            .collect::<Result<Vec<_>>>()?;
        let den = NetDenoiser::new(net, store, p, Tensor::stack(&guides)?);
        let seeds: Vec<u64> = chunk
            .iter()
            .map(|&(t, m)| member_seed(member_seed(cfg.seed, t as u64), m as u64))
            .collect();
        let x = heun_sample_rows(&den, &row_shape, &seeds, schedule, cfg)?;
        evals += den.evaluations() * chunk.len();
        for (k, &(t, m)) in chunk.iter().enumerate() {
            let src = &x.data()[k * row..(k + 1) * row];
            for (d, &v) in out[m][t * row..(t + 1) * row].iter_mut().zip(src) {
                *d = v as f32;
            }
        }
    }
    let shape = [s[0], row_shape[0], row_shape[1], row_shape[2]];
    let fields = out.into_iter().map(|d| Tensor::new(&shape, d)).collect::<Result<Vec<_>>>()?;
    Ok((fields, evals))
}
