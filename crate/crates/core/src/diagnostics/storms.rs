use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Tensor;

/// Detection and tracking thresholds for persistent vorticity features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StormParams {
    /// Minimum `|vorticity|` of a storm cell.
    pub threshold: f64,
    /// Minimum connected area in cells.
    pub min_area: usize,
    /// Minimum number of consecutive steps.
    pub min_lifetime: usize,
    /// Largest centroid displacement between consecutive steps, in cells.
    pub max_travel: f64,
}

impl Default for StormParams {
    fn default() -> Self {
        Self {
            threshold: 1.0,
            min_area: 4,
            min_lifetime: 3,
            max_travel: 3.0,
        }
    }
}

impl StormParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::Config(format!("storm threshold must be positive, got {}", self.threshold)));
        }
        if self.min_area == 0 || self.min_lifetime == 0 || !(self.max_travel >= 1.0) {
            return Err(Error::Config(
                "storm min_area and min_lifetime must be >= 1 and max_travel >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// A thresholded connected component. The centroid is kept as exact integer sums of
/// unwrapped coordinates so periodic distances are shift-invariant.
#[derive(Debug, Clone)]
struct Blob {
    sum_i: i64,
    sum_j: i64,
    area: i64,
    peak: f64,
}

impl Blob {
    fn centroid(&self, h: usize, w: usize) -> (f64, f64) {
        let wrap = |s: i64, n: usize| (s as f64 / self.area as f64).rem_euclid(n as f64);
        (wrap(self.sum_i, h), wrap(self.sum_j, w))
    }
}

/// Squared periodic centroid distance times `(a1 a2)^2`, exact.
fn scaled_dist2(a: &Blob, b: &Blob, h: usize, w: usize) -> i128 {
    let axis = |sa: i64, sb: i64, n: usize| -> i128 {
        let m = n as i128 * a.area as i128 * b.area as i128;
        let d = (sa as i128 * b.area as i128 - sb as i128 * a.area as i128).rem_euclid(m);
        let d = if 2 * d > m { d - m } else { d };
        d * d
    };
    axis(a.sum_i, b.sum_i, h) + axis(a.sum_j, b.sum_j, w)
}

/// 8-connected components of `|z| >= threshold` on a periodic `[H, W]` grid.
fn blobs(z: &[f64], h: usize, w: usize, threshold: f64, min_area: usize) -> Vec<Blob> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || z[start].abs() < threshold {
            continue;
        }
        seen[start] = true;
        // unwrapped coordinates relative to the first cell reached
        stack.push((start, (start / w) as i64, (start % w) as i64));
        let mut blob = Blob {
            sum_i: 0,
            sum_j: 0,
            area: 0,
            peak: 0.0,
        };
        while let Some((idx, ui, uj)) = stack.pop() {
            blob.sum_i += ui;
            blob.sum_j += uj;
            blob.area += 1;
            blob.peak = blob.peak.max(z[idx].abs());
            let (i, j) = ((idx / w) as i64, (idx % w) as i64);
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let ni = (i + di).rem_euclid(h as i64) as usize;
                    let nj = (j + dj).rem_euclid(w as i64) as usize;
                    let n = ni * w + nj;
                    if !seen[n] && z[n].abs() >= threshold {
                        seen[n] = true;
                        stack.push((n, ui + di, uj + dj));
                    }
                }
            }
        }
        if blob.area as usize >= min_area {
            out.push(blob);
        }
    }
    out
}

/// One tracked storm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StormEvent {
    pub birth: usize,
    pub lifetime: usize,
    pub peak: f64,
    /// Centroid `(row, col)` per step, in grid cells.
    pub track: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StormReport {
    pub params: StormParams,
    pub events: Vec<StormEvent>,
}

impl StormReport {
    pub fn count(&self) -> usize {
        self.events.len()
    }
}

struct Track {
    birth: usize,
    last: Blob,
    peak: f64,
    track: Vec<(f64, f64)>,
}

/// Detects thresholded vorticity features in `[T, H, W]` and links them across steps
/// by nearest periodic centroid within `max_travel`; features lasting at least
/// `min_lifetime` steps are reported.
pub fn track_storms(vort: &Tensor<f64>, p: &StormParams) -> Result<StormReport> {
    p.validate()?;
    let (t_len, h, w) = match *vort.shape() {
        [t, h, w] => (t, h, w),
        _ => return Err(Error::shape(format!("expected [T, H, W] vorticity, got {:?}", vort.shape()))),
    };
    let mut active: Vec<Track> = Vec::new();
    let mut done: Vec<Track> = Vec::new();
    for t in 0..t_len {
        let z = &vort.data()[t * h * w..(t + 1) * h * w];
        let found = blobs(z, h, w, p.threshold, p.min_area);
        // squared distance is a shift-invariant function of exact integer sums
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (a, tr) in active.iter().enumerate() {
            for (b, blob) in found.iter().enumerate() {
                let d2 = scaled_dist2(&tr.last, blob, h, w);
                let scale = (tr.last.area as f64 * blob.area as f64).powi(2);
                if d2 as f64 <= p.max_travel * p.max_travel * scale {
                    pairs.push((d2 as f64 / scale, a, b));
                }
            }
        }
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        let mut track_used = vec![false; active.len()];
        let mut blob_used = vec![false; found.len()];
        let mut next_of: Vec<Option<usize>> = vec![None; active.len()];
        for (_, a, b) in pairs {
            if !track_used[a] && !blob_used[b] {
                track_used[a] = true;
                blob_used[b] = true;
                next_of[a] = Some(b);
            }
        }
        let mut still = Vec::new();
        for (a, mut tr) in active.into_iter().enumerate() {
            match next_of[a] {
                Some(b) => {
                    let blob = found[b].clone();
                    tr.peak = tr.peak.max(blob.peak);
                    tr.track.push(blob.centroid(h, w));
                    tr.last = blob;
                    still.push(tr);
                }
                None => done.push(tr),
            }
        }
        for (b, blob) in found.into_iter().enumerate() {
            if !blob_used[b] {
                still.push(Track {
                    birth: t,
                    peak: blob.peak,
                    track: vec![blob.centroid(h, w)],
                    last: blob,
                });
            }
        }
        active = still;
    }
    done.extend(active);
    let mut events: Vec<StormEvent> = done
        .into_iter()
        .filter(|tr| tr.track.len() >= p.min_lifetime)
        .map(|tr| StormEvent {
            birth: tr.birth,
            lifetime: tr.track.len(),
            peak: tr.peak,
            track: tr.track,
        })
        .collect();
    events.sort_by(|a, b| {
        (a.birth, a.track[0].0, a.track[0].1)
            .partial_cmp(&(b.birth, b.track[0].0, b.track[0].1))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(StormReport { params: *p, events })
}
