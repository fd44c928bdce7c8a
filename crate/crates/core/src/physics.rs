//! Finite-difference operators on planar wind fields and the physics-consistency loss.
//!
//! `x` runs along the last (longitude) axis with spacing `d_lon`; `y` runs along
//! the latitude axis with spacing `d_lat`. Derivatives are second-order central
//! differences.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{Real, Tensor};

/// Treatment of the grid edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Wrap-around neighbours.
    #[default]
    Periodic,
    /// Second-order one-sided stencils on the first and last rows/columns.
    OneSided,
}

/// Velocity components `u`, `v` on a `[H, W]` grid.
#[derive(Debug, Clone)]
pub struct WindField {
    pub u: Tensor<f64>,
    pub v: Tensor<f64>,
    pub d_lat: f64,
    pub d_lon: f64,
    pub boundary: Boundary,
}

impl WindField {
    pub fn new(u: Tensor<f64>, v: Tensor<f64>, d_lat: f64, d_lon: f64) -> Result<Self> {
        if u.shape() != v.shape() {
            return Err(Error::shape(format!(
                "u {:?} and v {:?} differ",
                u.shape(),
                v.shape()
            )));
        }
        match *u.shape() {
            [h, w] if h >= 4 && w >= 4 => {}
            _ => {
                return Err(Error::shape(format!(
                    "wind components must be [H, W] with H, W >= 4, got {:?}",
                    u.shape()
                )))
            }
        }
        if !(d_lat > 0.0 && d_lon > 0.0) {
            return Err(Error::arg("grid spacing must be positive"));
        }
        Ok(Self {
            u,
            v,
            d_lat,
            d_lon,
            boundary: Boundary::Periodic,
        })
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary;
        self
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.u.shape()[0], self.u.shape()[1])
    }

    fn check_compatible(&self, other: &WindField) -> Result<()> {
        if self.u.shape() != other.u.shape() {
            return Err(Error::shape(format!(
                "wind fields {:?} and {:?} differ",
                self.u.shape(),
                other.u.shape()
            )));
        }
        Ok(())
    }
}

fn derivative(f: &Tensor<f64>, along_x: bool, spacing: f64, boundary: Boundary) -> Tensor<f64> {
    let (h, w) = (f.shape()[0], f.shape()[1]);
    let d = f.data();
    let (n, stride) = if along_x { (w, 1) } else { (h, w) };
    let inv2 = 1.0 / (2.0 * spacing);
    Tensor::from_fn(&[h, w], |idx| {
        let (i, j) = (idx / w, idx % w);
        let pos = if along_x { j } else { i };
        let base = idx - pos * stride;
        let at = |p: usize| d[base + p * stride];
        match boundary {
            Boundary::Periodic => (at((pos + 1) % n) - at((pos + n - 1) % n)) * inv2,
            Boundary::OneSided => {
                if pos == 0 {
                    (-3.0 * at(0) + 4.0 * at(1) - at(2)) * inv2
                } else if pos == n - 1 {
                    (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) * inv2
                } else {
                    (at(pos + 1) - at(pos - 1)) * inv2
                }
            }
        }
    })
}

pub fn ddx(f: &Tensor<f64>, d_lon: f64, boundary: Boundary) -> Tensor<f64> {
    derivative(f, true, d_lon, boundary)
}

pub fn ddy(f: &Tensor<f64>, d_lat: f64, boundary: Boundary) -> Tensor<f64> {
    derivative(f, false, d_lat, boundary)
}

/// Relative vorticity `dv/dx - du/dy`.
pub fn vorticity(f: &WindField) -> Tensor<f64> {
    let dvdx = ddx(&f.v, f.d_lon, f.boundary);
    let dudy = ddy(&f.u, f.d_lat, f.boundary);
    dvdx.zip_map(&dudy, |a, b| a - b).expect("same grid")
}

/// Divergence `du/dx + dv/dy`.
pub fn divergence(f: &WindField) -> Tensor<f64> {
    let dudx = ddx(&f.u, f.d_lon, f.boundary);
    let dvdy = ddy(&f.v, f.d_lat, f.boundary);
    dudx.zip_map(&dvdy, |a, b| a + b).expect("same grid")
}

/// Self-advection `(u d/dx + v d/dy)` applied to `u` and to `v`.
pub fn advection(f: &WindField) -> (Tensor<f64>, Tensor<f64>) {
    let apply = |c: &Tensor<f64>| {
        let cx = ddx(c, f.d_lon, f.boundary);
        let cy = ddy(c, f.d_lat, f.boundary);
        Tensor::from_fn(c.shape(), |k| {
            f.u.data()[k] * cx.data()[k] + f.v.data()[k] * cy.data()[k]
        })
    };
    (apply(&f.u), apply(&f.v))
}

/// Weights of the mean-model training loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsLossWeights {
    pub w_mae: f64,
    pub w_mse: f64,
    pub w_adv: f64,
    pub w_vort: f64,
    pub w_div: f64,
}

impl Default for PhysicsLossWeights {
    fn default() -> Self {
        Self {
            w_mae: 1.0,
            w_mse: 1.0,
            w_adv: 0.1,
            w_vort: 0.1,
            w_div: 0.1,
        }
    }
}

impl PhysicsLossWeights {
    pub fn new(w_mae: f64, w_mse: f64, w_adv: f64, w_vort: f64, w_div: f64) -> Result<Self> {
        let w = Self {
            w_mae,
            w_mse,
            w_adv,
            w_vort,
            w_div,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.w_mae, self.w_mse, self.w_adv, self.w_vort, self.w_div]
    }

    pub fn validate(&self) -> Result<()> {
        let ws = self.as_array();
        if ws.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::arg(format!("loss weights must be non-negative: {ws:?}")));
        }
        if ws.iter().all(|&w| w == 0.0) {
            return Err(Error::arg("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// Unweighted loss components, ordered MAE, MSE, advection, vorticity, divergence.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub mae: f64,
    pub mse: f64,
    pub adv: f64,
    pub vort: f64,
    pub div: f64,
}

impl LossComponents {
    pub fn weighted_total(&self, w: &PhysicsLossWeights) -> f64 {
        w.w_mae * self.mae
            + w.w_mse * self.mse
            + w.w_adv * self.adv
            + w.w_vort * self.vort
            + w.w_div * self.div
    }
}

fn mse(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

pub fn loss_components(pred: &WindField, target: &WindField) -> Result<LossComponents> {
    pred.check_compatible(target)?;
    let n = (pred.u.len() * 2) as f64;
    let pairs = [(&pred.u, &target.u), (&pred.v, &target.v)];
    let mae = pairs
        .iter()
        .flat_map(|(a, b)| a.data().iter().zip(b.data()))
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n;
    let mse_uv = (mse(&pred.u, &target.u) + mse(&pred.v, &target.v)) / 2.0;
    let (pa, pb) = advection(pred);
    let (ta, tb) = advection(target);
    Ok(LossComponents {
        mae,
        mse: mse_uv,
        adv: (mse(&pa, &ta) + mse(&pb, &tb)) / 2.0,
        vort: mse(&vorticity(pred), &vorticity(target)),
        div: mse(&divergence(pred), &divergence(target)),
    })
}

/// Weighted sum of MAE, MSE and the advection/vorticity/divergence mismatches.
pub fn physics_loss(pred: &WindField, target: &WindField, w: &PhysicsLossWeights) -> Result<f64> {
    w.validate()?;
    Ok(loss_components(pred, target)?.weighted_total(w))
}

/// Differentiable counterparts of the operators above, periodic boundaries only.
pub mod tape_ops {
    use super::*;

    /// Central difference along the last axis of `f`.
    pub fn ddx<T: Real>(tape: &mut Tape<T>, f: Var, d_lon: f64) -> Result<Var> {
        let axis = tape.shape(f).len() - 1;
        central(tape, f, axis, d_lon)
    }

    /// Central difference along the second-to-last axis of `f`.
    pub fn ddy<T: Real>(tape: &mut Tape<T>, f: Var, d_lat: f64) -> Result<Var> {
        let axis = tape.shape(f).len() - 2;
        central(tape, f, axis, d_lat)
    }

    fn central<T: Real>(tape: &mut Tape<T>, f: Var, axis: usize, h: f64) -> Result<Var> {
        let fwd = tape.roll(f, axis, -1)?;
        let back = tape.roll(f, axis, 1)?;
        let d = tape.sub(fwd, back)?;
        tape.scale(d, T::from_f64_lossy(1.0 / (2.0 * h)))
    }

    /// Splits `[N, 2, H, W]` into its `u` and `v` channels.
    pub fn split_uv<T: Real>(tape: &mut Tape<T>, f: Var) -> Result<(Var, Var)> {
        let s = tape.shape(f);
        if s.len() != 4 || s[1] != 2 {
            return Err(Error::shape(format!(
                "physics loss expects [N, 2, H, W] wind tensors, got {s:?}"
            )));
        }
        Ok((tape.slice(f, 1, 0, 1)?, tape.slice(f, 1, 1, 1)?))
    }

    pub fn vorticity<T: Real>(tape: &mut Tape<T>, u: Var, v: Var, d: (f64, f64)) -> Result<Var> {
        let dvdx = ddx(tape, v, d.1)?;
        let dudy = ddy(tape, u, d.0)?;
        tape.sub(dvdx, dudy)
    }

    pub fn divergence<T: Real>(tape: &mut Tape<T>, u: Var, v: Var, d: (f64, f64)) -> Result<Var> {
        let dudx = ddx(tape, u, d.1)?;
        let dvdy = ddy(tape, v, d.0)?;
        tape.add(dudx, dvdy)
    }

    pub fn advection<T: Real>(
        tape: &mut Tape<T>,
        u: Var,
        v: Var,
        d: (f64, f64),
    ) -> Result<(Var, Var)> {
        let mut apply = |c: Var| -> Result<Var> {
            let cx = ddx(tape, c, d.1)?;
            let cy = ddy(tape, c, d.0)?;
            let a = tape.mul(u, cx)?;
            let b = tape.mul(v, cy)?;
            tape.add(a, b)
        };
        let au = apply(u)?;
        let av = apply(v)?;
        Ok((au, av))
    }

    /// Loss graph nodes for every component plus the weighted total.
    pub struct LossTerms {
        pub total: Var,
        pub mae: Var,
        pub mse: Var,
        pub adv: Var,
        pub vort: Var,
        pub div: Var,
    }

    impl LossTerms {
        pub fn components<T: Real>(&self, tape: &Tape<T>) -> LossComponents {
            let v = |x: Var| tape.value(x).data()[0].as_f64();
            LossComponents {
                mae: v(self.mae),
                mse: v(self.mse),
                adv: v(self.adv),
                vort: v(self.vort),
                div: v(self.div),
            }
        }
    }

    /// Physics loss between `[N, 2, H, W]` prediction and target; `spacing = (d_lat, d_lon)`.
    pub fn physics_loss<T: Real>(
        tape: &mut Tape<T>,
        pred: Var,
        target: Var,
        spacing: (f64, f64),
        w: &PhysicsLossWeights,
    ) -> Result<LossTerms> {
        w.validate()?;
        if tape.shape(pred) != tape.shape(target) {
            return Err(Error::shape(format!(
                "physics_loss: prediction {:?} vs target {:?}",
                tape.shape(pred),
                tape.shape(target)
            )));
        }
        let mae = tape.mae(pred, target)?;
        let mse = tape.mse(pred, target)?;
        let (pu, pv) = split_uv(tape, pred)?;
        let (tu, tv) = split_uv(tape, target)?;
        let (pau, pav) = advection(tape, pu, pv, spacing)?;
        let (tau, tav) = advection(tape, tu, tv, spacing)?;
        let pa = tape.concat(&[pau, pav])?;
        let ta = tape.concat(&[tau, tav])?;
        let adv = tape.mse(pa, ta)?;
        let pz = vorticity(tape, pu, pv, spacing)?;
        let tz = vorticity(tape, tu, tv, spacing)?;
        let vort = tape.mse(pz, tz)?;
        let pd = divergence(tape, pu, pv, spacing)?;
        let td = divergence(tape, tu, tv, spacing)?;
        let div = tape.mse(pd, td)?;

        let mut total: Option<Var> = None;
        for (term, weight) in [mae, mse, adv, vort, div].into_iter().zip(w.as_array()) {
            if weight == 0.0 {
                continue;
            }
            let scaled = tape.scale(term, T::from_f64_lossy(weight))?;
            total = Some(match total {
                None => scaled,
                Some(t) => tape.add(t, scaled)?,
            });
        }
        Ok(LossTerms {
            total: total.expect("validated weights include a positive entry"),
            mae,
            mse,
            adv,
            vort,
            div,
        })
    }
}
