use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{subsample, FieldSequence, Tensor};
use crate::spectral::{dft2, idft2, lowpass, signed_wavenumber, FilterSpec};

/// Band-limits every plane with `filter` and keeps every `factor`-th node.
pub fn coarsen(seq: &FieldSequence, factor: usize, filter: &FilterSpec) -> Result<FieldSequence> {
    filter.validate()?;
    let meta = seq.meta.coarsened(factor)?;
    let (h, w) = (seq.meta.n_lat, seq.meta.n_lon);
    seq.map_frames(meta, |frame| {
        let c = frame.shape()[0];
        let mut planes = Vec::with_capacity(c * h * w);
        for plane in frame.data().chunks(h * w) {
            let p = Tensor::new(&[h, w], plane.iter().map(|&v| v as f64).collect())?;
            planes.extend(lowpass(&p, filter)?.into_data());
        }
        let filtered = Tensor::new(&[c, h, w], planes)?;
        Ok(subsample(&filtered, factor)?.cast())
    })
}

/// Coarse input windows and fine targets, stored without duplication: pair `i`
/// uses coarse frames `i .. i + t_in` and the fine `(u, v)` frame `i + t_in - 1`.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub coarse: FieldSequence,
    pub fine: FieldSequence,
    pub t_in: usize,
    pub factor: usize,
    pub filter: FilterSpec,
}

impl PairSet {
    pub fn new(coarse: FieldSequence, fine: FieldSequence, t_in: usize, factor: usize, filter: FilterSpec) -> Result<Self> {
        if coarse.steps() != fine.steps() {
            return Err(Error::shape(format!(
                "coarse has {} steps, fine has {}",
                coarse.steps(),
                fine.steps()
            )));
        }
        if coarse.meta.n_lat * factor != fine.meta.n_lat || coarse.meta.n_lon * factor != fine.meta.n_lon {
            return Err(Error::shape("coarse grid times factor must equal the fine grid"));
        }
        if t_in == 0 || t_in > coarse.steps() {
            return Err(Error::arg(format!("t_in {t_in} with {} steps", coarse.steps())));
        }
        fine.wind_channels()?;
        Ok(Self {
            coarse,
            fine,
            t_in,
            factor,
            filter,
        })
    }

    pub fn len(&self) -> usize {
        self.coarse.steps() + 1 - self.t_in
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Time index of the target of pair `i`.
    pub fn target_step(&self, i: usize) -> usize {
        i + self.t_in - 1
    }

    /// `[T_in, C, h, w]`.
    pub fn input(&self, i: usize) -> Result<Tensor<f32>> {
        Ok(self.coarse.window(i, self.t_in)?.into_data())
    }

    /// `[2, H, W]` wind frame.
    pub fn target(&self, i: usize) -> Result<Tensor<f32>> {
        let (u, v) = self.fine.wind_channels()?;
        let t = self.target_step(i);
        let mut data = self.fine.plane(t, u).to_vec();
        data.extend_from_slice(self.fine.plane(t, v));
        Tensor::new(&[2, self.fine.meta.n_lat, self.fine.meta.n_lon], data)
    }

    /// Stacks the inputs and targets of `idx` into `[B, T_in, C, h, w]` and `[B, 2, H, W]`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let inputs = idx.iter().map(|&i| self.input(i)).collect::<Result<Vec<_>>>()?;
        let targets = idx.iter().map(|&i| self.target(i)).collect::<Result<Vec<_>>>()?;
        Ok((Tensor::stack(&inputs)?, Tensor::stack(&targets)?))
    }
}

/// Coarse inputs from `lowpass` then `subsample` of the truth; targets are the full-resolution winds.
pub fn make_pairs(truth: &FieldSequence, t_in: usize, factor: usize, filter: &FilterSpec) -> Result<PairSet> {
    if factor == 0 || truth.meta.n_lat % factor != 0 || truth.meta.n_lon % factor != 0 {
        return Err(Error::arg(format!(
            "factor {factor} does not divide grid {}x{}",
            truth.meta.n_lat, truth.meta.n_lon
        )));
    }
    if t_in == 0 || truth.steps() < t_in {
        return Err(Error::arg(format!("{} steps cannot hold windows of {t_in}", truth.steps())));
    }
    let coarse = coarsen(truth, factor, filter)?;
    let fine = truth.select_channels(&["u", "v"])?;
    PairSet::new(coarse, fine, t_in, factor, *filter)
}

/// Systematic distortion applied to the coarse truth to emulate a biased coarse model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GcmBias {
    /// Multiplicative factor per wind channel (u, v).
    pub scale: [f64; 2],
    /// Additive offset per wind channel (u, v).
    pub offset: [f64; 2],
    /// Extra high-band damping `exp(-tilt (k / k_nyq)^2)` on the coarse grid; 0 disables.
    pub tilt: f64,
    /// Standard deviation of additive white noise; 0 disables.
    pub noise: f64,
    pub seed: u64,
}

impl Default for GcmBias {
    fn default() -> Self {
        Self {
            scale: [1.0, 1.0],
            offset: [0.0, 0.0],
            tilt: 0.0,
            noise: 0.0,
            seed: 0,
        }
    }
}

fn damp(plane: &Tensor<f64>, tilt: f64) -> Result<Tensor<f64>> {
    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    let nyq = (h.min(w) / 2) as f64;
    let mut s = dft2(plane)?;
    for i in 0..h {
        for j in 0..w {
            let k = signed_wavenumber(i, h).hypot(signed_wavenumber(j, w));
            s.data[i * w + j] *= (-tilt * (k / nyq).powi(2)).exp();
        }
    }
    Ok(idft2(&s))
}

/// `scale * coarse(truth) + offset` on the wind channels, with optional damping and noise;
/// other channels are the coarse truth.
pub fn gen_biased_gcm(
    truth: &FieldSequence,
    factor: usize,
    filter: &FilterSpec,
    bias: &GcmBias,
) -> Result<FieldSequence> {
    if bias.tilt < 0.0 || bias.noise < 0.0 {
        return Err(Error::arg("tilt and noise must be non-negative"));
    }
    let coarse = coarsen(truth, factor, filter)?;
    let (u, v) = coarse.wind_channels()?;
    let (h, w) = (coarse.meta.n_lat, coarse.meta.n_lon);
    let mut rng = ChaCha8Rng::seed_from_u64(bias.seed);
    let meta = coarse.meta.clone();
    coarse.map_frames(meta, |mut frame| {
        for (k, c) in [u, v].into_iter().enumerate() {
            let plane = &mut frame.data_mut()[c * h * w..(c + 1) * h * w];
            let mut p = Tensor::new(&[h, w], plane.iter().map(|&x| x as f64).collect())?;
            if bias.tilt > 0.0 {
                p = damp(&p, bias.tilt)?;
            }
            for (dst, &src) in plane.iter_mut().zip(p.data()) {
                let n: f64 = if bias.noise > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    bias.noise * z
                } else {
                    0.0
                };
                *dst = (bias.scale[k] * src + bias.offset[k] + n) as f32;
            }
        }
        Ok(frame)
    })
}
