use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::grid::{Real, Tensor};

/// Parameter allocator with a seeded uniform fan-in initializer.
pub struct Init<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..=bound)));
        self.store.add(name, t)
    }

    pub fn full(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, T::from_f64_lossy(v))?)
    }
}

/// Stride-1 "same" convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv {
    pub fn new<T: Real>(
        init: &mut Init<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let w = init.uniform(&format!("{name}.w"), &[cout, cin, k, k], bound)?;
        let b = if bias {
            Some(init.uniform(&format!("{name}.b"), &[cout], bound)?)
        } else {
            None
        };
        Ok(Self { w, b, cin, cout, k })
    }

    /// Weights and bias start at zero.
    pub fn zeroed<T: Real>(init: &mut Init<T>, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        let w = init.full(&format!("{name}.w"), &[cout, cin, k, k], 0.0)?;
        let b = Some(init.full(&format!("{name}.b"), &[cout], 0.0)?);
        Ok(Self { w, b, cin, cout, k })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b)
    }
}

/// Depthwise convolution `[C, 1, k, k]` with bias.
#[derive(Debug, Clone)]
pub struct DwConv {
    pub w: ParamId,
    pub b: ParamId,
    pub dilation: usize,
}

impl DwConv {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, c: usize, k: usize, dilation: usize) -> Result<Self> {
        let bound = 1.0 / ((k * k) as f64).sqrt();
        Ok(Self {
            w: init.uniform(&format!("{name}.w"), &[c, 1, k, k], bound)?,
            b: init.uniform(&format!("{name}.b"), &[c], bound)?,
            dilation,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.dwconv2d(x, w, Some(b), self.dilation)
    }
}

/// Fully connected layer on `[N, in]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            w: init.uniform(&format!("{name}.w"), &[fan_in, fan_out], bound)?,
            b: init.uniform(&format!("{name}.b"), &[fan_out], bound)?,
        })
    }

    pub fn zeroed<T: Real>(init: &mut Init<T>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            w: init.full(&format!("{name}.w"), &[fan_in, fan_out], 0.0)?,
            b: init.full(&format!("{name}.b"), &[fan_out], 0.0)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// Largest divisor of `c` not exceeding `max_groups`.
pub fn norm_groups(c: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

/// Conv, group norm, SiLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl ConvBlock {
    pub fn new<T: Real>(
        init: &mut Init<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        max_groups: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(init, &format!("{name}.conv"), cin, cout, k, true)?,
            gamma: init.full(&format!("{name}.gn.gamma"), &[cout], 1.0)?,
            beta: init.full(&format!("{name}.gn.beta"), &[cout], 0.0)?,
            groups: norm_groups(cout, max_groups),
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let y = tape.group_norm(y, g, b, self.groups)?;
        tape.silu(y)
    }
}
