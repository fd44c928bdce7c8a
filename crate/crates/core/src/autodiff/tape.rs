use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom, DwGeom};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::grid::{upsample_planes, upsample_planes_adjoint, Real, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape: u64,
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Variable,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    ScaleRows(usize, Vec<T>),
    Abs(usize),
    MatMul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    DwConv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: DwGeom,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Silu(usize),
    Sigmoid(usize),
    Softmax(usize),
    Gap(usize),
    AvgPool2(usize),
    Upsample {
        x: usize,
        factor: usize,
    },
    Concat {
        xs: Vec<usize>,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Roll {
        x: usize,
        axis: usize,
        shift: isize,
    },
    Reshape(usize),
    AddBias {
        x: usize,
        b: usize,
    },
    AddChannel {
        x: usize,
        b: usize,
    },
    MulChannel {
        x: usize,
        s: usize,
    },
    Sum(usize),
    Mean(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run recording of tensor operations for reverse-mode differentiation.
pub struct Tape<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    params: Vec<(ParamId, Tensor<T>)>,
    vars: Vec<(usize, Tensor<T>)>,
    tape: u64,
}

impl<T: Real> Gradients<T> {
    /// Summed gradient for a parameter, `None` when unreachable.
    pub fn param(&self, id: ParamId) -> Option<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        for (p, g) in &self.params {
            if *p == id {
                match &mut acc {
                    None => acc = Some(g.clone()),
                    Some(a) => add_into(a.data_mut(), g.data()),
                }
            }
        }
        acc
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.vars.iter().find(|(i, _)| *i == v.idx).map(|(_, g)| g)
    }

    pub(crate) fn param_entries(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

fn nchw(op: &str, t: &Tensor<impl Real>) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(shape_err(op, format!("expected [N, C, H, W], got {:?}", t.shape()))),
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes; outstanding [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE.fetch_add(1, Ordering::Relaxed);
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::State(format!(
                "variable {} was not recorded on this tape (forward not executed or tape reset)",
                v.idx
            )));
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let i = self.check(v).expect("variable belongs to this tape");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {:?}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            idx: self.nodes.len() - 1,
            tape: self.id,
        })
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
            .expect("constant inputs must be finite")
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Variable, true)
            .expect("variable inputs must be finite")
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = store.value(id).clone();
        self.push(t, Op::Param(id), true)
            .expect("parameters must be finite")
    }

    fn binary_same(&self, op: &str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.binary_same("add", ia, ib)?;
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x + y)?;
        let rg = self.rg(&[ia, ib]);
        self.push(v, Op::Add(ia, ib), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.binary_same("sub", ia, ib)?;
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x - y)?;
        let rg = self.rg(&[ia, ib]);
        self.push(v, Op::Sub(ia, ib), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.binary_same("mul", ia, ib)?;
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x * y)?;
        let rg = self.rg(&[ia, ib]);
        self.push(v, Op::Mul(ia, ib), rg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(|x| x * s);
        let rg = self.rg(&[ia]);
        self.push(v, Op::Scale(ia, s), rg)
    }

    /// Multiplies each leading-axis slice `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: &[T]) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        let n = x.shape().first().copied().unwrap_or(0);
        if factors.len() != n {
            return Err(shape_err(
                "scale_rows",
                format!("{} factors for leading extent {n}", factors.len()),
            ));
        }
        let inner = x.len() / n.max(1);
        let mut v = x.clone();
        for (row, &f) in v.data_mut().chunks_mut(inner.max(1)).zip(factors) {
            for e in row {
                *e *= f;
            }
        }
        let rg = self.rg(&[ia]);
        self.push(v, Op::ScaleRows(ia, factors.to_vec()), rg)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(|x| x.abs());
        let rg = self.rg(&[ia]);
        self.push(v, Op::Abs(ia), rg)
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(shape_err("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.nodes[ia].value.data(),
            false,
            self.nodes[ib].value.data(),
            false,
            T::zero(),
            &mut out,
        );
        let rg = self.rg(&[ia, ib]);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(ia, ib), rg)
    }

    /// Stride-1 convolution, weight `[C_out, C_in, k, k]` with odd `k`, zero padding `k / 2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = b.map(|b| self.check(b)).transpose()?;
        let (n, cin, h, wd) = nchw("conv2d", &self.nodes[ix].value)?;
        let ws = self.nodes[iw].value.shape();
        let (cout, k) = match *ws {
            [co, ci, k1, k2] if ci == cin && k1 == k2 && k1 % 2 == 1 => (co, k1),
            _ => {
                return Err(shape_err(
                    "conv2d",
                    format!(
                        "weight {ws:?} incompatible with input {:?}",
                        self.nodes[ix].value.shape()
                    ),
                ))
            }
        };
        if let Some(ib) = ib {
            if self.nodes[ib].value.shape() != [cout] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {cout} outputs", self.nodes[ib].value.shape()),
                ));
            }
        }
        let geom = ConvGeom {
            cin,
            cout,
            h,
            w: wd,
            k,
            pad: k / 2,
        };
        let y = kernels::conv2d_forward(
            self.nodes[ix].value.data(),
            self.nodes[iw].value.data(),
            ib.map(|i| self.nodes[i].value.data()),
            n,
            &geom,
        );
        let mut deps = vec![ix, iw];
        deps.extend(ib);
        let rg = self.rg(&deps);
        self.push(
            Tensor::new(&[n, cout, h, wd], y)?,
            Op::Conv2d {
                x: ix,
                w: iw,
                b: ib,
                geom,
            },
            rg,
        )
    }

    /// Depthwise convolution, weight `[C, 1, k, k]`, padding `dilation * (k - 1) / 2`.
    pub fn dwconv2d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = b.map(|b| self.check(b)).transpose()?;
        let (n, c, h, wd) = nchw("dwconv2d", &self.nodes[ix].value)?;
        let ws = self.nodes[iw].value.shape();
        let k = match *ws {
            [cc, 1, k1, k2] if cc == c && k1 == k2 && k1 % 2 == 1 => k1,
            _ => {
                return Err(shape_err(
                    "dwconv2d",
                    format!(
                        "weight {ws:?} incompatible with input {:?}",
                        self.nodes[ix].value.shape()
                    ),
                ))
            }
        };
        if dilation == 0 {
            return Err(Error::arg("dwconv2d: dilation must be at least 1"));
        }
        if let Some(ib) = ib {
            if self.nodes[ib].value.shape() != [c] {
                return Err(shape_err(
                    "dwconv2d",
                    format!("bias {:?} for {c} channels", self.nodes[ib].value.shape()),
                ));
            }
        }
        let geom = DwGeom {
            c,
            h,
            w: wd,
            k,
            dilation,
        };
        let y = kernels::dwconv_forward(
            self.nodes[ix].value.data(),
            self.nodes[iw].value.data(),
            ib.map(|i| self.nodes[i].value.data()),
            n,
            &geom,
        );
        let mut deps = vec![ix, iw];
        deps.extend(ib);
        let rg = self.rg(&deps);
        self.push(
            Tensor::new(&[n, c, h, wd], y)?,
            Op::DwConv2d {
                x: ix,
                w: iw,
                b: ib,
                geom,
            },
            rg,
        )
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (n, c, h, w) = nchw("group_norm", &self.nodes[ix].value)?;
        if groups == 0 || c % groups != 0 {
            return Err(shape_err(
                "group_norm",
                format!("{groups} groups do not divide {c} channels"),
            ));
        }
        if self.nodes[ig].value.shape() != [c] || self.nodes[ib].value.shape() != [c] {
            return Err(shape_err(
                "group_norm",
                format!(
                    "affine params {:?}/{:?} for {c} channels",
                    self.nodes[ig].value.shape(),
                    self.nodes[ib].value.shape()
                ),
            ));
        }
        let (y, xhat, rstd) = kernels::groupnorm_forward(
            self.nodes[ix].value.data(),
            self.nodes[ig].value.data(),
            self.nodes[ib].value.data(),
            n,
            c,
            h * w,
            groups,
            T::from_f64_lossy(1e-5),
        );
        let rg = self.rg(&[ix, ig, ib]);
        self.push(
            Tensor::new(&[n, c, h, w], y)?,
            Op::GroupNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                groups,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.nodes[ix].value.map(|a| a * sigmoid(a));
        let rg = self.rg(&[ix]);
        self.push(v, Op::Silu(ix), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.nodes[ix].value.map(sigmoid);
        let rg = self.rg(&[ix]);
        self.push(v, Op::Sigmoid(ix), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = &self.nodes[ix].value;
        let last = *xv
            .shape()
            .last()
            .ok_or_else(|| shape_err("softmax", "rank-0 input".into()))?;
        let mut v = xv.clone();
        for row in v.data_mut().chunks_mut(last) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                s += *e;
            }
            for e in row.iter_mut() {
                *e /= s;
            }
        }
        let rg = self.rg(&[ix]);
        self.push(v, Op::Softmax(ix), rg)
    }

    /// Global average pool `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let (n, c, h, w) = nchw("global_avg_pool", &self.nodes[ix].value)?;
        let hw = T::from_usize(h * w).unwrap();
        let data: Vec<T> = self.nodes[ix]
            .value
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / hw)
            .collect();
        let rg = self.rg(&[ix]);
        self.push(Tensor::new(&[n, c], data)?, Op::Gap(ix), rg)
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let (n, c, h, w) = nchw("avg_pool2", &self.nodes[ix].value)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("avg_pool2", format!("odd extents {h}x{w}")));
        }
        let (hh, ww) = (h / 2, w / 2);
        let src = self.nodes[ix].value.data();
        let q = T::from_f64_lossy(0.25);
        let mut out = Vec::with_capacity(n * c * hh * ww);
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            for i in 0..hh {
                for j in 0..ww {
                    let a = s[2 * i * w + 2 * j]
                        + s[2 * i * w + 2 * j + 1]
                        + s[(2 * i + 1) * w + 2 * j]
                        + s[(2 * i + 1) * w + 2 * j + 1];
                    out.push(a * q);
                }
            }
        }
        let rg = self.rg(&[ix]);
        self.push(Tensor::new(&[n, c, hh, ww], out)?, Op::AvgPool2(ix), rg)
    }

    /// Periodic bilinear upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let ix = self.check(x)?;
        if factor == 0 {
            return Err(Error::arg("upsample: factor must be at least 1"));
        }
        let (n, c, h, w) = nchw("upsample", &self.nodes[ix].value)?;
        let mut out = vec![T::zero(); n * c * h * w * factor * factor];
        upsample_planes(self.nodes[ix].value.data(), n * c, h, w, factor, &mut out);
        let rg = self.rg(&[ix]);
        self.push(
            Tensor::new(&[n, c, h * factor, w * factor], out)?,
            Op::Upsample { x: ix, factor },
            rg,
        )
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = xs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let first = self.nodes[*idx
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs".into()))?]
        .value
        .shape()
        .to_vec();
        if first.len() < 2 {
            return Err(shape_err("concat", format!("rank {} input", first.len())));
        }
        let mut channels = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(shape_err("concat", format!("{s:?} vs {first:?}")));
            }
            channels += s[1];
        }
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut data = Vec::with_capacity(n * channels * inner);
        for s in 0..n {
            for &i in &idx {
                let t = &self.nodes[i].value;
                let block = t.shape()[1] * inner;
                data.extend_from_slice(&t.data()[s * block..(s + 1) * block]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let rg = self.rg(&idx);
        self.push(Tensor::new(&shape, data)?, Op::Concat { xs: idx }, rg)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.nodes[ix].value.shape().to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.nodes[ix].value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let rg = self.rg(&[ix]);
        self.push(Tensor::new(&shape, data)?, Op::Slice { x: ix, axis, start }, rg)
    }

    /// Circular shift: `y[.., i, ..] = x[.., i - shift, ..]` along `axis`.
    pub fn roll(&mut self, x: Var, axis: usize, shift: isize) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.nodes[ix].value.shape().to_vec();
        if axis >= s.len() {
            return Err(shape_err("roll", format!("axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let data = kernels::roll(self.nodes[ix].value.data(), outer, s[axis], inner, shift);
        let rg = self.rg(&[ix]);
        self.push(Tensor::new(&s, data)?, Op::Roll { x: ix, axis, shift }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.nodes[ix]
            .value
            .clone()
            .reshape(shape)
            .map_err(|e| shape_err("reshape", e.to_string()))?;
        let rg = self.rg(&[ix]);
        self.push(v, Op::Reshape(ix), rg)
    }

    /// `x[N, C, ...] + b[C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(b)?);
        let s = self.nodes[ix].value.shape().to_vec();
        if s.len() < 2 || self.nodes[ib].value.shape() != [s[1]] {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} for input {s:?}", self.nodes[ib].value.shape()),
            ));
        }
        let inner: usize = s[2..].iter().product();
        let mut v = self.nodes[ix].value.clone();
        let bias = self.nodes[ib].value.data();
        for (k, chunk) in v.data_mut().chunks_mut(inner).enumerate() {
            let bv = bias[k % s[1]];
            for e in chunk {
                *e += bv;
            }
        }
        let rg = self.rg(&[ix, ib]);
        self.push(v, Op::AddBias { x: ix, b: ib }, rg)
    }

    /// `x[N, C, H, W] + b[N, C]` broadcast over space.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(b)?);
        let (n, c, h, w) = nchw("add_channel", &self.nodes[ix].value)?;
        if self.nodes[ib].value.shape() != [n, c] {
            return Err(shape_err(
                "add_channel",
                format!("{:?} for input [{n}, {c}, ..]", self.nodes[ib].value.shape()),
            ));
        }
        let mut v = self.nodes[ix].value.clone();
        let bias = self.nodes[ib].value.data();
        for (k, plane) in v.data_mut().chunks_mut(h * w).enumerate() {
            for e in plane {
                *e += bias[k];
            }
        }
        let rg = self.rg(&[ix, ib]);
        self.push(v, Op::AddChannel { x: ix, b: ib }, rg)
    }

    /// `x[N, C, H, W] * s[N, C]` broadcast over space.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let (ix, is) = (self.check(x)?, self.check(s)?);
        let (n, c, h, w) = nchw("mul_channel", &self.nodes[ix].value)?;
        if self.nodes[is].value.shape() != [n, c] {
            return Err(shape_err(
                "mul_channel",
                format!("{:?} for input [{n}, {c}, ..]", self.nodes[is].value.shape()),
            ));
        }
        let mut v = self.nodes[ix].value.clone();
        let sc = self.nodes[is].value.data();
        for (k, plane) in v.data_mut().chunks_mut(h * w).enumerate() {
            for e in plane {
                *e *= sc[k];
            }
        }
        let rg = self.rg(&[ix, is]);
        self.push(v, Op::MulChannel { x: ix, s: is }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = Tensor::scalar(self.nodes[ix].value.sum());
        let rg = self.rg(&[ix]);
        self.push(v, Op::Sum(ix), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = Tensor::scalar(self.nodes[ix].value.mean());
        let rg = self.rg(&[ix]);
        self.push(v, Op::Mean(ix), rg)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Mean absolute difference.
    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let ab = self.abs(d)?;
        self.mean(ab)
    }

    /// Reverse pass seeded with ones (the output is usually a scalar loss).
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        let io = self.check(out)?;
        let seed = Tensor::from_fn(self.nodes[io].value.shape(), |_| T::one());
        self.backward_with(out, seed)
    }

    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        let io = self.check(out)?;
        seed.expect_shape(self.nodes[io].value.shape())?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..=io).map(|_| None).collect();
        grads[io] = Some(seed);
        let mut result = Gradients {
            params: Vec::new(),
            vars: Vec::new(),
            tape: self.id,
        };

        for i in (0..=io).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let mut send = |j: usize, d: Tensor<T>| {
                if !self.nodes[j].requires_grad {
                    return;
                }
                match &mut grads[j] {
                    Some(acc) => add_into(acc.data_mut(), d.data()),
                    slot @ None => *slot = Some(d),
                }
            };
            let val = |j: usize| &self.nodes[j].value;
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Variable => result.vars.push((i, g)),
                Op::Param(id) => result.params.push((*id, g)),
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    send(*a, g.zip_map(val(*b), |x, y| x * y)?);
                    send(*b, g.zip_map(val(*a), |x, y| x * y)?);
                }
                Op::Scale(a, s) => send(*a, g.map(|v| v * *s)),
                Op::ScaleRows(a, f) => {
                    let mut d = g;
                    let inner = d.len() / f.len().max(1);
                    for (row, &fv) in d.data_mut().chunks_mut(inner.max(1)).zip(f) {
                        for e in row {
                            *e *= fv;
                        }
                    }
                    send(*a, d);
                }
                Op::Abs(a) => send(
                    *a,
                    g.zip_map(val(*a), |gv, x| {
                        if x > T::zero() {
                            gv
                        } else if x < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })?,
                ),
                Op::MatMul(a, b) => {
                    let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                    let n = val(*b).shape()[1];
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g.data(), false, val(*b).data(), true, T::zero(), &mut da);
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), val(*a).data(), true, g.data(), false, T::zero(), &mut db);
                    send(*a, Tensor::new(&[m, k], da)?);
                    send(*b, Tensor::new(&[k, n], db)?);
                }
                Op::Conv2d { x, w, b, geom } => {
                    let n = val(*x).shape()[0];
                    let (dx, dw, db) = kernels::conv2d_backward(
                        val(*x).data(),
                        val(*w).data(),
                        g.data(),
                        n,
                        geom,
                        self.nodes[*x].requires_grad,
                        self.nodes[*w].requires_grad,
                        b.is_some_and(|b| self.nodes[b].requires_grad),
                    );
                    if let Some(dx) = dx {
                        send(*x, Tensor::new(val(*x).shape(), dx)?);
                    }
                    if let Some(dw) = dw {
                        send(*w, Tensor::new(val(*w).shape(), dw)?);
                    }
                    if let (Some(b), Some(db)) = (b, db) {
                        send(*b, Tensor::new(&[geom.cout], db)?);
                    }
                }
                Op::DwConv2d { x, w, b, geom } => {
                    let n = val(*x).shape()[0];
                    let (dx, dw, db) =
                        kernels::dwconv_backward(val(*x).data(), val(*w).data(), g.data(), n, geom);
                    send(*x, Tensor::new(val(*x).shape(), dx)?);
                    send(*w, Tensor::new(val(*w).shape(), dw)?);
                    if let Some(b) = b {
                        send(*b, Tensor::new(&[geom.c], db)?);
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    rstd,
                } => {
                    let (n, c, h, w) = nchw("group_norm", val(*x))?;
                    let (dx, dg, db) = kernels::groupnorm_backward(
                        g.data(),
                        xhat,
                        rstd,
                        val(*gamma).data(),
                        n,
                        c,
                        h * w,
                        *groups,
                    );
                    send(*x, Tensor::new(&[n, c, h, w], dx)?);
                    send(*gamma, Tensor::new(&[c], dg)?);
                    send(*beta, Tensor::new(&[c], db)?);
                }
                Op::Silu(a) => send(
                    *a,
                    g.zip_map(val(*a), |gv, x| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (T::one() - s))
                    })?,
                ),
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    send(*a, g.zip_map(y, |gv, s| gv * s * (T::one() - s))?);
                }
                Op::Softmax(a) => {
                    let y = &self.nodes[i].value;
                    let last = *y.shape().last().unwrap();
                    let mut d = g.clone();
                    for (drow, yrow) in d.data_mut().chunks_mut(last).zip(y.data().chunks(last)) {
                        let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for (e, &yv) in drow.iter_mut().zip(yrow) {
                            *e = yv * (*e - dot);
                        }
                    }
                    send(*a, d);
                }
                Op::Gap(a) => {
                    let (n, c, h, w) = nchw("global_avg_pool", val(*a))?;
                    let inv = T::one() / T::from_usize(h * w).unwrap();
                    let mut d = Vec::with_capacity(n * c * h * w);
                    for &gv in g.data() {
                        d.extend(std::iter::repeat_n(gv * inv, h * w));
                    }
                    send(*a, Tensor::new(&[n, c, h, w], d)?);
                }
                Op::AvgPool2(a) => {
                    let (n, c, h, w) = nchw("avg_pool2", val(*a))?;
                    let (hh, ww) = (h / 2, w / 2);
                    let q = T::from_f64_lossy(0.25);
                    let mut d = vec![T::zero(); n * c * h * w];
                    for p in 0..n * c {
                        for ii in 0..h {
                            for jj in 0..w {
                                d[p * h * w + ii * w + jj] =
                                    g.data()[p * hh * ww + (ii / 2) * ww + jj / 2] * q;
                            }
                        }
                    }
                    send(*a, Tensor::new(&[n, c, h, w], d)?);
                }
                Op::Upsample { x, factor } => {
                    let (n, c, h, w) = nchw("upsample", val(*x))?;
                    let mut d = vec![T::zero(); n * c * h * w];
                    upsample_planes_adjoint(g.data(), n * c, h, w, *factor, &mut d);
                    send(*x, Tensor::new(&[n, c, h, w], d)?);
                }
                Op::Concat { xs } => {
                    let s = g.shape().to_vec();
                    let inner: usize = s[2..].iter().product();
                    let mut offset = 0;
                    for &j in xs {
                        let cj = val(j).shape()[1];
                        let mut d = Vec::with_capacity(val(j).len());
                        for smp in 0..s[0] {
                            let base = (smp * s[1] + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + cj * inner]);
                        }
                        offset += cj;
                        send(j, Tensor::new(val(j).shape(), d)?);
                    }
                }
                Op::Slice { x, axis, start } => {
                    let s = val(*x).shape().to_vec();
                    let len = g.shape()[*axis];
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[*axis + 1..].iter().product();
                    let mut d = vec![T::zero(); val(*x).len()];
                    for o in 0..outer {
                        let dst = (o * s[*axis] + start) * inner;
                        let src = o * len * inner;
                        d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    send(*x, Tensor::new(&s, d)?);
                }
                Op::Roll { x, axis, shift } => {
                    let s = val(*x).shape().to_vec();
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[*axis + 1..].iter().product();
                    let d = kernels::roll(g.data(), outer, s[*axis], inner, -shift);
                    send(*x, Tensor::new(&s, d)?);
                }
                Op::Reshape(a) => send(*a, g.reshape(val(*a).shape())?),
                Op::AddBias { x, b } => {
                    let s = val(*x).shape();
                    let c = s[1];
                    let inner: usize = s[2..].iter().product();
                    let mut db = vec![T::zero(); c];
                    for (k, chunk) in g.data().chunks(inner).enumerate() {
                        db[k % c] += chunk.iter().copied().sum::<T>();
                    }
                    send(*b, Tensor::new(&[c], db)?);
                    send(*x, g);
                }
                Op::AddChannel { x, b } => {
                    let (n, c, h, w) = nchw("add_channel", val(*x))?;
                    let db: Vec<T> = g.data().chunks(h * w).map(|p| p.iter().copied().sum()).collect();
                    send(*b, Tensor::new(&[n, c], db)?);
                    send(*x, g);
                }
                Op::MulChannel { x, s } => {
                    let (n, c, h, w) = nchw("mul_channel", val(*x))?;
                    let sc = val(*s).data();
                    let xv = val(*x).data();
                    let mut ds = vec![T::zero(); n * c];
                    let mut dx = g.clone();
                    for (k, (dp, xp)) in dx
                        .data_mut()
                        .chunks_mut(h * w)
                        .zip(xv.chunks(h * w))
                        .enumerate()
                    {
                        let mut acc = T::zero();
                        for (e, &xe) in dp.iter_mut().zip(xp) {
                            acc += *e * xe;
                            *e *= sc[k];
                        }
                        ds[k] = acc;
                    }
                    send(*s, Tensor::new(&[n, c], ds)?);
                    send(*x, dx);
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    send(*a, Tensor::from_fn(val(*a).shape(), |_| gv));
                }
                Op::Mean(a) => {
                    let gv = g.data()[0] / T::from_usize(val(*a).len().max(1)).unwrap();
                    send(*a, Tensor::from_fn(val(*a).shape(), |_| gv));
                }
            }
        }
        Ok(result)
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Variable => "variable",
        Op::Param(_) => "param",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::ScaleRows(..) => "scale_rows",
        Op::Abs(_) => "abs",
        Op::MatMul(..) => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::DwConv2d { .. } => "dwconv2d",
        Op::GroupNorm { .. } => "group_norm",
        Op::Silu(_) => "silu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Softmax(_) => "softmax",
        Op::Gap(_) => "global_avg_pool",
        Op::AvgPool2(_) => "avg_pool2",
        Op::Upsample { .. } => "upsample",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Roll { .. } => "roll",
        Op::Reshape(_) => "reshape",
        Op::AddBias { .. } => "add_bias",
        Op::AddChannel { .. } => "add_channel",
        Op::MulChannel { .. } => "mul_channel",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
    }
}
