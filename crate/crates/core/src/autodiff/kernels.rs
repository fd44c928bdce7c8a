//! Slice-level kernels behind the tape ops. Layouts are row-major NCHW.

use rayon::prelude::*;

use crate::grid::Real;

/// Geometry of a stride-1, zero-padded 2-D convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.k);
    let pad = g.pad as isize;
    for c in 0..g.cin {
        let plane = &x[c * g.hw()..(c + 1) * g.hw()];
        for a in 0..k {
            for b in 0..k {
                let row = (c * k + a) * k + b;
                let dst = &mut col[row * g.hw()..(row + 1) * g.hw()];
                let (da, db) = (a as isize - pad, b as isize - pad);
                for i in 0..h {
                    let si = i + da;
                    let drow = &mut dst[(i * w) as usize..((i + 1) * w) as usize];
                    if si < 0 || si >= h {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[(si * w) as usize..((si + 1) * w) as usize];
                    for j in 0..w {
                        let sj = j + db;
                        drow[j as usize] = if sj < 0 || sj >= w {
                            T::zero()
                        } else {
                            srow[sj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.k);
    let pad = g.pad as isize;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.hw()..(c + 1) * g.hw()];
        for a in 0..k {
            for b in 0..k {
                let row = (c * k + a) * k + b;
                let src = &col[row * g.hw()..(row + 1) * g.hw()];
                let (da, db) = (a as isize - pad, b as isize - pad);
                for i in 0..h {
                    let si = i + da;
                    if si < 0 || si >= h {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j + db;
                        if sj >= 0 && sj < w {
                            plane[(si * w + sj) as usize] += src[(i * w + j) as usize];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    n: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let in_len = g.cin * g.hw();
    let out_len = g.cout * g.hw();
    let mut out = vec![T::zero(); n * out_len];
    out.par_chunks_mut(out_len)
        .zip(x.par_chunks(in_len))
        .for_each(|(y, xs)| {
            if g.pointwise() {
                T::gemm(g.cout, g.cin, g.hw(), T::one(), weight, false, xs, false, T::zero(), y);
            } else {
                let mut col = vec![T::zero(); g.col_rows() * g.hw()];
                im2col(xs, g, &mut col);
                T::gemm(
                    g.cout,
                    g.col_rows(),
                    g.hw(),
                    T::one(),
                    weight,
                    false,
                    &col,
                    false,
                    T::zero(),
                    y,
                );
            }
            if let Some(b) = bias {
                for (co, plane) in y.chunks_mut(g.hw()).enumerate() {
                    for v in plane {
                        *v += b[co];
                    }
                }
            }
        });
    out
}

/// Returns `(dx, dweight, dbias)`; each is computed only when requested.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    n: usize,
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let in_len = g.cin * g.hw();
    let out_len = g.cout * g.hw();
    let wlen = g.cout * g.col_rows();
    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let xs = &x[s * in_len..(s + 1) * in_len];
            let dys = &dy[s * out_len..(s + 1) * out_len];
            let mut dx = None;
            let mut dw = None;
            if g.pointwise() {
                if want_dw {
                    let mut d = vec![T::zero(); wlen];
                    T::gemm(g.cout, g.hw(), g.cin, T::one(), dys, false, xs, true, T::zero(), &mut d);
                    dw = Some(d);
                }
                if want_dx {
                    let mut d = vec![T::zero(); in_len];
                    T::gemm(g.cin, g.cout, g.hw(), T::one(), weight, true, dys, false, T::zero(), &mut d);
                    dx = Some(d);
                }
            } else {
                if want_dw {
                    let mut col = vec![T::zero(); g.col_rows() * g.hw()];
                    im2col(xs, g, &mut col);
                    let mut d = vec![T::zero(); wlen];
                    T::gemm(
                        g.cout,
                        g.hw(),
                        g.col_rows(),
                        T::one(),
                        dys,
                        false,
                        &col,
                        true,
                        T::zero(),
                        &mut d,
                    );
                    dw = Some(d);
                }
                if want_dx {
                    let mut dcol = vec![T::zero(); g.col_rows() * g.hw()];
                    T::gemm(
                        g.col_rows(),
                        g.cout,
                        g.hw(),
                        T::one(),
                        weight,
                        true,
                        dys,
                        false,
                        T::zero(),
                        &mut dcol,
                    );
                    let mut d = vec![T::zero(); in_len];
                    col2im(&dcol, g, &mut d);
                    dx = Some(d);
                }
            }
            (dx, dw)
        })
        .collect();

    let dx = want_dx.then(|| {
        let mut out = Vec::with_capacity(n * in_len);
        for (d, _) in &per_sample {
            out.extend_from_slice(d.as_ref().unwrap());
        }
        out
    });
    let dw = want_dw.then(|| {
        let mut acc = vec![T::zero(); wlen];
        for (_, d) in &per_sample {
            for (a, &b) in acc.iter_mut().zip(d.as_ref().unwrap()) {
                *a += b;
            }
        }
        acc
    });
    let db = want_db.then(|| {
        let mut acc = vec![T::zero(); g.cout];
        for s in 0..n {
            for (co, a) in acc.iter_mut().enumerate() {
                let off = s * out_len + co * g.hw();
                *a += dy[off..off + g.hw()].iter().copied().sum::<T>();
            }
        }
        acc
    });
    (dx, dw, db)
}

/// Geometry of a depthwise convolution with dilation; padding keeps extents.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DwGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub dilation: usize,
}

impl DwGeom {
    fn pad(&self) -> isize {
        (self.dilation * (self.k - 1) / 2) as isize
    }
}

pub(crate) fn dwconv_forward<T: Real>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    n: usize,
    g: &DwGeom,
) -> Vec<T> {
    let hw = g.h * g.w;
    let mut out = vec![T::zero(); n * g.c * hw];
    let (h, w, d, pad) = (g.h as isize, g.w as isize, g.dilation as isize, g.pad());
    out.par_chunks_mut(hw)
        .zip(x.par_chunks(hw))
        .enumerate()
        .for_each(|(p, (y, xp))| {
            let c = p % g.c;
            let kern = &weight[c * g.k * g.k..(c + 1) * g.k * g.k];
            let b0 = bias.map_or(T::zero(), |b| b[c]);
            y.fill(b0);
            for a in 0..g.k {
                let di = a as isize * d - pad;
                for bb in 0..g.k {
                    let dj = bb as isize * d - pad;
                    let wv = kern[a * g.k + bb];
                    let i_lo = (-di).max(0);
                    let i_hi = (h - di).min(h);
                    let j_lo = (-dj).max(0);
                    let j_hi = (w - dj).min(w);
                    for i in i_lo..i_hi {
                        let yrow = (i * w) as usize;
                        let xrow = ((i + di) * w) as usize;
                        for j in j_lo..j_hi {
                            y[yrow + j as usize] += wv * xp[xrow + (j + dj) as usize];
                        }
                    }
                }
            }
        });
    out
}

pub(crate) fn dwconv_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    n: usize,
    g: &DwGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hw = g.h * g.w;
    let kk = g.k * g.k;
    let (h, w, d, pad) = (g.h as isize, g.w as isize, g.dilation as isize, g.pad());
    let mut dx = vec![T::zero(); n * g.c * hw];
    let mut dw = vec![T::zero(); g.c * kk];
    let mut db = vec![T::zero(); g.c];
    for p in 0..n * g.c {
        let c = p % g.c;
        let kern = &weight[c * kk..(c + 1) * kk];
        let xp = &x[p * hw..(p + 1) * hw];
        let dyp = &dy[p * hw..(p + 1) * hw];
        let dxp = &mut dx[p * hw..(p + 1) * hw];
        db[c] += dyp.iter().copied().sum::<T>();
        for a in 0..g.k {
            let di = a as isize * d - pad;
            for bb in 0..g.k {
                let dj = bb as isize * d - pad;
                let wv = kern[a * g.k + bb];
                let mut acc = T::zero();
                for i in (-di).max(0)..(h - di).min(h) {
                    let yrow = (i * w) as usize;
                    let xrow = ((i + di) * w) as usize;
                    for j in (-dj).max(0)..(w - dj).min(w) {
                        let gy = dyp[yrow + j as usize];
                        let xi = xrow + (j + dj) as usize;
                        acc += gy * xp[xi];
                        dxp[xi] += gy * wv;
                    }
                }
                dw[c * kk + a * g.k + bb] += acc;
            }
        }
    }
    (dx, dw, db)
}

/// Group-normalization forward; returns `(y, xhat, rstd)` with `rstd` per (sample, group).
pub(crate) fn groupnorm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = c / groups;
    let m = cg * hw;
    let mf = T::from_usize(m).unwrap();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n * groups];
    for s in 0..n {
        for gi in 0..groups {
            let off = (s * c + gi * cg) * hw;
            let xs = &x[off..off + m];
            let mean = xs.iter().copied().sum::<T>() / mf;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let r = T::one() / (var + eps).sqrt();
            rstd[s * groups + gi] = r;
            for ci in 0..cg {
                let ch = gi * cg + ci;
                for p in 0..hw {
                    let idx = off + ci * hw + p;
                    let xh = (x[idx] - mean) * r;
                    xhat[idx] = xh;
                    y[idx] = xh * gamma[ch] + beta[ch];
                }
            }
        }
    }
    (y, xhat, rstd)
}

pub(crate) fn groupnorm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = c / groups;
    let m = cg * hw;
    let mf = T::from_usize(m).unwrap();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for s in 0..n {
        for gi in 0..groups {
            let off = (s * c + gi * cg) * hw;
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for ci in 0..cg {
                let ch = gi * cg + ci;
                for p in 0..hw {
                    let idx = off + ci * hw + p;
                    let g = dy[idx];
                    dgamma[ch] += g * xhat[idx];
                    dbeta[ch] += g;
                    let dxh = g * gamma[ch];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xhat[idx];
                }
            }
            let r = rstd[s * groups + gi];
            for ci in 0..cg {
                let ch = gi * cg + ci;
                for p in 0..hw {
                    let idx = off + ci * hw + p;
                    let dxh = dy[idx] * gamma[ch];
                    dx[idx] = r / mf * (mf * dxh - sum_dxh - xhat[idx] * sum_dxh_xh);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Circular shift of `x` (viewed as `[outer, len, inner]`) by `shift` along the middle axis.
pub(crate) fn roll<T: Real>(x: &[T], outer: usize, len: usize, inner: usize, shift: isize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    let s = shift.rem_euclid(len as isize) as usize;
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..len {
            let dst = (i + s) % len;
            y[base + dst * inner..base + (dst + 1) * inner]
                .copy_from_slice(&x[base + i * inner..base + (i + 1) * inner]);
        }
    }
    y
}
