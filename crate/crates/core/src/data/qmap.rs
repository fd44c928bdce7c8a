use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::FieldSequence;

pub const QMP1_MAGIC: &[u8; 4] = b"QMP1";

/// Per-cell, per-channel piecewise-linear quantile transfer from a source
/// distribution onto a target one. Only the wind channels are mapped.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileMap {
    pub n_quantiles: usize,
    pub n_lat: usize,
    pub n_lon: usize,
    /// Names of the mapped channels, in storage order.
    pub channels: Vec<String>,
    /// `[channel][cell][q]` source quantiles.
    source: Vec<f32>,
    target: Vec<f32>,
}

/// Type-7 empirical quantile of sorted `x` at probability `p`.
fn quantile_sorted(x: &[f64], p: f64) -> f64 {
    let h = (x.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(x.len() - 1);
    x[lo] + (h - lo as f64) * (x[hi] - x[lo])
}

fn quantiles(mut x: Vec<f64>, q: usize) -> Vec<f64> {
    x.sort_by(|a, b| a.total_cmp(b));
    (0..q)
        .map(|i| quantile_sorted(&x, i as f64 / (q - 1) as f64))
        .collect()
}

/// Piecewise-linear interpolation through `(xs, ys)`; outside the knots the
/// outermost segment is extended. Repeated knots take the mean of their targets.
fn interp(xs: &[f32], ys: &[f32], v: f64) -> f64 {
    let n = xs.len();
    let x = |i: usize| xs[i] as f64;
    let y = |i: usize| ys[i] as f64;
    // segment index k with x(k) <= v < x(k+1), clamped to the ends
    let k = match xs.partition_point(|&a| (a as f64) <= v) {
        0 => 0,
        p if p >= n => n - 2,
        p => p - 1,
    };
    let (x0, x1) = (x(k), x(k + 1));
    if x1 - x0 <= f64::EPSILON * x0.abs().max(1.0) {
        // flat source segment: collapse the tied knots
        let lo = xs.partition_point(|&a| (a as f64) < x0);
        let hi = xs.partition_point(|&a| (a as f64) <= x0);
        let sum: f64 = (lo..hi).map(y).sum();
        return sum / (hi - lo) as f64;
    }
    y(k) + (v - x0) * (y(k + 1) - y(k)) / (x1 - x0)
}

fn wind_pair(seq: &FieldSequence) -> Result<[usize; 2]> {
    let (u, v) = seq.wind_channels()?;
    Ok([u, v])
}

/// Fits per-cell quantile maps of the `u`/`v` channels taking `source` onto `target`.
pub fn qmap_fit(source: &FieldSequence, target: &FieldSequence, n_quantiles: usize) -> Result<QuantileMap> {
    if n_quantiles < 2 {
        return Err(Error::arg("need at least 2 quantiles"));
    }
    if (source.meta.n_lat, source.meta.n_lon) != (target.meta.n_lat, target.meta.n_lon) {
        return Err(Error::shape(format!(
            "source grid {}x{} differs from target grid {}x{}",
            source.meta.n_lat, source.meta.n_lon, target.meta.n_lat, target.meta.n_lon
        )));
    }
    let (h, w) = (source.meta.n_lat, source.meta.n_lon);
    for (name, seq) in [("source", source), ("target", target)] {
        if seq.steps() < n_quantiles {
            return Err(Error::arg(format!(
                "{name} has {} samples at cell (0, 0), need at least {n_quantiles}",
                seq.steps()
            )));
        }
    }
    let (sc, tc) = (wind_pair(source)?, wind_pair(target)?);
    let mut map = QuantileMap {
        n_quantiles,
        n_lat: h,
        n_lon: w,
        channels: vec!["u".into(), "v".into()],
        source: Vec::with_capacity(2 * h * w * n_quantiles),
        target: Vec::with_capacity(2 * h * w * n_quantiles),
    };
    for k in 0..2 {
        for cell in 0..h * w {
            let s: Vec<f64> = (0..source.steps()).map(|t| source.plane(t, sc[k])[cell] as f64).collect();
            let t: Vec<f64> = (0..target.steps()).map(|t| target.plane(t, tc[k])[cell] as f64).collect();
            if let Some(bad) = s.iter().chain(&t).find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite sample {bad} at cell ({}, {})",
                    cell / w,
                    cell % w
                )));
            }
            map.source.extend(quantiles(s, n_quantiles).into_iter().map(|v| v as f32));
            map.target.extend(quantiles(t, n_quantiles).into_iter().map(|v| v as f32));
        }
    }
    Ok(map)
}

impl QuantileMap {
    fn knots(&self, k: usize, cell: usize) -> (&[f32], &[f32]) {
        let q = self.n_quantiles;
        let off = (k * self.n_lat * self.n_lon + cell) * q;
        (&self.source[off..off + q], &self.target[off..off + q])
    }

    /// Maps one value of wind component `k` (0 = u, 1 = v) at `cell`.
    pub fn map_value(&self, k: usize, cell: usize, v: f64) -> f64 {
        let (xs, ys) = self.knots(k, cell);
        interp(xs, ys, v)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * self.source.len());
        out.extend_from_slice(QMP1_MAGIC);
        for n in [self.n_quantiles, self.channels.len(), self.n_lat, self.n_lon] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        let q = self.n_quantiles;
        for (s, t) in self.source.chunks(q).zip(self.target.chunks(q)) {
            for v in s.iter().chain(t) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < 20 {
            return Err(Error::format(buf.len() as u64, "truncated QMP1 header"));
        }
        if &buf[..4] != QMP1_MAGIC {
            return Err(Error::format(0, "bad magic, expected QMP1"));
        }
        let u = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (q, c, h, w) = (u(0), u(1), u(2), u(3));
        if q < 2 || c != 2 {
            return Err(Error::format(4, format!("unsupported QMP1 header q={q} channels={c}")));
        }
        let want = 20 + c * h * w * 2 * q * 4;
        if buf.len() != want {
            return Err(Error::format(
                buf.len().min(want) as u64,
                format!("QMP1 payload is {} bytes, expected {want}", buf.len()),
            ));
        }
        let vals: Vec<f32> = buf[20..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let (mut source, mut target) = (Vec::new(), Vec::new());
        for block in vals.chunks(2 * q) {
            source.extend_from_slice(&block[..q]);
            target.extend_from_slice(&block[q..]);
        }
        Ok(Self {
            n_quantiles: q,
            n_lat: h,
            n_lon: w,
            channels: vec!["u".into(), "v".into()],
            source,
            target,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&buf)
    }
}

/// Applies `map` to the wind channels of `seq`; other channels pass through.
pub fn qmap_apply(map: &QuantileMap, seq: &FieldSequence) -> Result<FieldSequence> {
    if (seq.meta.n_lat, seq.meta.n_lon) != (map.n_lat, map.n_lon) {
        return Err(Error::shape(format!(
            "map fitted on {}x{}, input is {}x{}",
            map.n_lat, map.n_lon, seq.meta.n_lat, seq.meta.n_lon
        )));
    }
    let ch = wind_pair(seq)?;
    let n = map.n_lat * map.n_lon;
    seq.map_frames(seq.meta.clone(), |mut frame| {
        for (k, &c) in ch.iter().enumerate() {
            let plane = &mut frame.data_mut()[c * n..(c + 1) * n];
            for (cell, x) in plane.iter_mut().enumerate() {
                *x = map.map_value(k, cell, *x as f64) as f32;
            }
        }
        Ok(frame)
    })
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 1.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    let (mut i, mut j, mut d) = (0usize, 0usize, 0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridMeta, Tensor};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// `[T, 3, 4, 4]` with u, v drawn from `du`, `dv` and a constant third channel.
    fn seq(steps: usize, seed: u64, du: Normal<f64>, dv: Normal<f64>) -> FieldSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let meta = GridMeta::new(4, 4, &["u", "v", "orog"]).unwrap();
        let mut data = Vec::with_capacity(steps * 48);
        for _ in 0..steps {
            data.extend((0..16).map(|_| du.sample(&mut rng) as f32));
            data.extend((0..16).map(|_| dv.sample(&mut rng) as f32));
            data.extend(std::iter::repeat_n(0.25f32, 16));
        }
        FieldSequence::new(meta, Tensor::new(&[steps, 3, 4, 4], data).unwrap()).unwrap()
    }

    fn n(m: f64, s: f64) -> Normal<f64> {
        Normal::new(m, s).unwrap()
    }

    fn column(s: &FieldSequence, c: usize, cell: usize) -> Vec<f64> {
        (0..s.steps()).map(|t| s.plane(t, c)[cell] as f64).collect()
    }

    #[test]
    fn type7_quantiles_match_hand_values() {
        let x = vec![4.0, 1.0, 3.0, 2.0];
        let q = quantiles(x, 5);
        assert_eq!(q, vec![1.0, 1.75, 2.5, 3.25, 4.0]);
    }

    #[test]
    fn identity_map_is_identity() {
        let a = seq(2000, 1, n(0.0, 1.0), n(1.0, 2.0));
        let m = qmap_fit(&a, &a, 101).unwrap();
        let b = qmap_apply(&m, &a).unwrap();
        for (x, y) in a.data().data().iter().zip(b.data().data()) {
            assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs()), "{x} -> {y}");
        }
    }

    #[test]
    fn shifted_normal_is_corrected() {
        let src = seq(100_000, 2, n(0.0, 1.0), n(0.0, 1.0));
        let tgt = seq(100_000, 3, n(3.0, 1.0), n(-1.0, 0.5));
        let m = qmap_fit(&src, &tgt, 101).unwrap();
        let fresh = seq(100_000, 4, n(0.0, 1.0), n(0.0, 1.0));
        let out = qmap_apply(&m, &fresh).unwrap();
        for cell in [0, 5, 15] {
            let u = column(&out, 0, cell);
            let mean = u.iter().sum::<f64>() / u.len() as f64;
            assert!((mean - 3.0).abs() < 0.02, "mean {mean}");
            let ks = ks_distance(&u, &column(&tgt, 0, cell));
            assert!(ks < 0.02, "ks {ks}");
            let v = column(&out, 1, cell);
            assert!(ks_distance(&v, &column(&tgt, 1, cell)) < 0.02);
        }
        // third channel untouched
        assert_eq!(out.plane(7, 2), fresh.plane(7, 2));
    }

    #[test]
    fn refitting_corrected_data_changes_little() {
        let src = seq(20_000, 5, n(0.0, 1.0), n(0.5, 1.5));
        let tgt = seq(20_000, 6, n(1.0, 2.0), n(-1.0, 0.7));
        let once = qmap_apply(&qmap_fit(&src, &tgt, 101).unwrap(), &src).unwrap();
        let twice = qmap_apply(&qmap_fit(&once, &tgt, 101).unwrap(), &once).unwrap();
        for (c, sd) in [(0, 2.0), (1, 0.7)] {
            for cell in 0..16 {
                let d = column(&once, c, cell)
                    .iter()
                    .zip(column(&twice, c, cell))
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                assert!(d < 0.01 * sd, "channel {c} cell {cell}: {d}");
            }
        }
    }

    #[test]
    fn too_few_samples_names_the_cell() {
        let a = seq(50, 1, n(0.0, 1.0), n(0.0, 1.0));
        match qmap_fit(&a, &a, 101) {
            Err(Error::Argument(msg)) => assert!(msg.contains("cell") && msg.contains("50"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn qmp1_roundtrip() {
        let a = seq(300, 1, n(0.0, 1.0), n(0.0, 1.0));
        let b = seq(300, 2, n(2.0, 1.0), n(0.0, 3.0));
        let m = qmap_fit(&a, &b, 11).unwrap();
        let bytes = m.encode();
        assert_eq!(&bytes[..4], b"QMP1");
        assert_eq!(bytes.len(), 20 + 2 * 16 * 2 * 11 * 4);
        assert_eq!(QuantileMap::decode(&bytes).unwrap(), m);
        assert!(QuantileMap::decode(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn ks_of_identical_samples_is_zero() {
        let x = [0.3, -1.0, 2.0, 2.0];
        assert_eq!(ks_distance(&x, &x), 0.0);
        assert_eq!(ks_distance(&[0.0, 1.0], &[2.0, 3.0]), 1.0);
    }

    proptest! {
        #[test]
        fn map_is_monotone_and_preserves_rank(
            src in prop::collection::vec(-5.0f64..5.0, 20..60),
            tgt in prop::collection::vec(-5.0f64..5.0, 20..60),
            probes in prop::collection::vec(-8.0f64..8.0, 2..30),
        ) {
            let mut xs: Vec<f32> = quantiles(src, 11).into_iter().map(|v| v as f32).collect();
            let ys: Vec<f32> = quantiles(tgt, 11).into_iter().map(|v| v as f32).collect();
            xs.sort_by(|a, b| a.total_cmp(b));
            let mut p = probes.clone();
            p.sort_by(|a, b| a.total_cmp(b));
            let mapped: Vec<f64> = p.iter().map(|&v| interp(&xs, &ys, v)).collect();
            for pair in mapped.windows(2) {
                prop_assert!(pair[1] >= pair[0] - 1e-9, "{:?}", pair);
            }
        }
    }
}
