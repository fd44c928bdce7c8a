use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Grid metadata in dimensionless model units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub n_lat: usize,
    pub n_lon: usize,
    pub d_lat: f64,
    pub d_lon: f64,
    pub dt: f64,
    pub channel_names: Vec<String>,
}

impl GridMeta {
    pub fn new(n_lat: usize, n_lon: usize, channel_names: &[&str]) -> Result<Self> {
        let meta = Self {
            n_lat,
            n_lon,
            d_lat: 1.0,
            d_lon: 1.0,
            dt: 1.0,
            channel_names: channel_names.iter().map(|s| s.to_string()).collect(),
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn with_spacing(mut self, d_lat: f64, d_lon: f64, dt: f64) -> Result<Self> {
        self.d_lat = d_lat;
        self.d_lon = d_lon;
        self.dt = dt;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_lat < 4 || self.n_lon < 4 {
            return Err(Error::arg(format!(
                "grid must be at least 4x4, got {}x{}",
                self.n_lat, self.n_lon
            )));
        }
        for (name, v) in [("d_lat", self.d_lat), ("d_lon", self.d_lon), ("dt", self.dt)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::arg(format!("{name} must be positive, got {v}")));
            }
        }
        for (i, a) in self.channel_names.iter().enumerate() {
            if self.channel_names[..i].contains(a) {
                return Err(Error::arg(format!("duplicate channel name `{a}`")));
            }
        }
        Ok(())
    }

    pub fn channel(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|c| c == name)
    }

    /// Same channels on a grid coarsened (`factor` > 1 shrinks) by an integer factor.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.n_lat % factor != 0 || self.n_lon % factor != 0 {
            return Err(Error::arg(format!(
                "factor {factor} does not divide grid {}x{}",
                self.n_lat, self.n_lon
            )));
        }
        let meta = Self {
            n_lat: self.n_lat / factor,
            n_lon: self.n_lon / factor,
            d_lat: self.d_lat * factor as f64,
            d_lon: self.d_lon * factor as f64,
            ..self.clone()
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn refined(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::arg("factor must be at least 1"));
        }
        let meta = Self {
            n_lat: self.n_lat * factor,
            n_lon: self.n_lon * factor,
            d_lat: self.d_lat / factor as f64,
            d_lon: self.d_lon / factor as f64,
            ..self.clone()
        };
        meta.validate()?;
        Ok(meta)
    }
}

/// Time-ordered stack of gridded channels, layout `[T, C, n_lat, n_lon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSequence {
    pub meta: GridMeta,
    data: Tensor<f32>,
}

impl FieldSequence {
    pub fn new(meta: GridMeta, data: Tensor<f32>) -> Result<Self> {
        meta.validate()?;
        let s = data.shape();
        if s.len() != 4
            || s[1] != meta.channel_names.len()
            || s[2] != meta.n_lat
            || s[3] != meta.n_lon
        {
            return Err(Error::shape(format!(
                "sequence data {:?} does not match grid {}x{} with {} channels",
                s,
                meta.n_lat,
                meta.n_lon,
                meta.channel_names.len()
            )));
        }
        Ok(Self { meta, data })
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_data(self) -> Tensor<f32> {
        self.data
    }

    pub fn steps(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn plane_len(&self) -> usize {
        self.meta.n_lat * self.meta.n_lon
    }

    /// One `[n_lat * n_lon]` plane.
    pub fn plane(&self, t: usize, c: usize) -> &[f32] {
        let n = self.plane_len();
        let off = (t * self.channels() + c) * n;
        &self.data.data()[off..off + n]
    }

    pub fn plane_f64(&self, t: usize, c: usize) -> Tensor<f64> {
        Tensor::new(
            &[self.meta.n_lat, self.meta.n_lon],
            self.plane(t, c).iter().map(|&v| v as f64).collect(),
        )
        .expect("plane extents")
    }

    /// Frame `t` as `[C, n_lat, n_lon]`.
    pub fn frame(&self, t: usize) -> Tensor<f32> {
        self.data.index_axis0(t).expect("frame index")
    }

    pub fn wind_channels(&self) -> Result<(usize, usize)> {
        match (self.meta.channel("u"), self.meta.channel("v")) {
            (Some(u), Some(v)) => Ok((u, v)),
            _ => Err(Error::arg(format!(
                "sequence lacks wind channels u,v (has {:?})",
                self.meta.channel_names
            ))),
        }
    }

    /// Copy holding only the named channels, in the given order.
    pub fn select_channels(&self, names: &[&str]) -> Result<Self> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.meta
                    .channel(n)
                    .ok_or_else(|| Error::arg(format!("no channel `{n}`")))
            })
            .collect::<Result<_>>()?;
        let n = self.plane_len();
        let mut data = Vec::with_capacity(self.steps() * idx.len() * n);
        for t in 0..self.steps() {
            for &c in &idx {
                data.extend_from_slice(self.plane(t, c));
            }
        }
        let mut meta = self.meta.clone();
        meta.channel_names = names.iter().map(|s| s.to_string()).collect();
        let tensor = Tensor::new(&[self.steps(), idx.len(), meta.n_lat, meta.n_lon], data)?;
        Self::new(meta, tensor)
    }

    /// Frames `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.steps() || len == 0 {
            return Err(Error::arg(format!(
                "window [{start}, {}) outside sequence of {} steps",
                start + len,
                self.steps()
            )));
        }
        let frame = self.channels() * self.plane_len();
        let data = self.data.data()[start * frame..(start + len) * frame].to_vec();
        let tensor = Tensor::new(
            &[len, self.channels(), self.meta.n_lat, self.meta.n_lon],
            data,
        )?;
        Self::new(self.meta.clone(), tensor)
    }

    /// Applies a per-frame transform `[C,H,W] -> [C,H',W']` and rebuilds the sequence on `meta`.
    pub fn map_frames(
        &self,
        meta: GridMeta,
        mut f: impl FnMut(Tensor<f32>) -> Result<Tensor<f32>>,
    ) -> Result<Self> {
        let mut frames = Vec::with_capacity(self.steps());
        for t in 0..self.steps() {
            frames.push(f(self.frame(t))?);
        }
        Self::new(meta, Tensor::stack(&frames)?)
    }
}

/// Node-aligned periodic bilinear upsampling of `planes` stacked `[h, w]` planes.
///
/// Fine node `(i, j)` sits at coarse coordinate `(i / f, j / f)`; the last interval
/// wraps to the first row/column.
pub(crate) fn upsample_planes<T: Real>(
    src: &[T],
    planes: usize,
    h: usize,
    w: usize,
    f: usize,
    dst: &mut [T],
) {
    let (hh, ww) = (h * f, w * f);
    let inv = T::one() / T::from_usize(f).unwrap();
    for p in 0..planes {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut dst[p * hh * ww..(p + 1) * hh * ww];
        for i in 0..hh {
            let i0 = i / f;
            let i1 = (i0 + 1) % h;
            let fy = T::from_usize(i % f).unwrap() * inv;
            for j in 0..ww {
                let j0 = j / f;
                let j1 = (j0 + 1) % w;
                let fx = T::from_usize(j % f).unwrap() * inv;
                let top = s[i0 * w + j0] * (T::one() - fx) + s[i0 * w + j1] * fx;
                let bot = s[i1 * w + j0] * (T::one() - fx) + s[i1 * w + j1] * fx;
                d[i * ww + j] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
}

/// Adjoint of [`upsample_planes`]: accumulates fine-grid values onto the coarse grid.
pub(crate) fn upsample_planes_adjoint<T: Real>(
    src: &[T],
    planes: usize,
    h: usize,
    w: usize,
    f: usize,
    dst: &mut [T],
) {
    let (hh, ww) = (h * f, w * f);
    let inv = T::one() / T::from_usize(f).unwrap();
    for p in 0..planes {
        let g = &src[p * hh * ww..(p + 1) * hh * ww];
        let d = &mut dst[p * h * w..(p + 1) * h * w];
        for i in 0..hh {
            let i0 = i / f;
            let i1 = (i0 + 1) % h;
            let fy = T::from_usize(i % f).unwrap() * inv;
            for j in 0..ww {
                let j0 = j / f;
                let j1 = (j0 + 1) % w;
                let fx = T::from_usize(j % f).unwrap() * inv;
                let v = g[i * ww + j];
                d[i0 * w + j0] += v * (T::one() - fy) * (T::one() - fx);
                d[i0 * w + j1] += v * (T::one() - fy) * fx;
                d[i1 * w + j0] += v * fy * (T::one() - fx);
                d[i1 * w + j1] += v * fy * fx;
            }
        }
    }
}

fn expect_chw<T: Real>(field: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *field.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!(
            "expected [C, H, W], got {:?}",
            field.shape()
        ))),
    }
}

/// Periodic bilinear interpolation onto a grid `factor` times finer.
pub fn upsample_bilinear<T: Real>(field: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 1 {
        return Err(Error::arg("upsample factor must be at least 1"));
    }
    let (c, h, w) = expect_chw(field)?;
    let mut out = Tensor::zeros(&[c, h * factor, w * factor]);
    upsample_planes(field.data(), c, h, w, factor, out.data_mut());
    Ok(out)
}

/// Keeps every `factor`-th node in both directions.
pub fn subsample<T: Real>(field: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, h, w) = expect_chw(field)?;
    if factor < 1 || h % factor != 0 || w % factor != 0 {
        return Err(Error::arg(format!(
            "subsample factor {factor} must divide extents {h}x{w}"
        )));
    }
    let (hh, ww) = (h / factor, w / factor);
    let src = field.data();
    let mut data = Vec::with_capacity(c * hh * ww);
    for p in 0..c {
        for i in 0..hh {
            for j in 0..ww {
                data.push(src[p * h * w + i * factor * w + j * factor]);
            }
        }
    }
    Tensor::new(&[c, hh, ww], data)
}
