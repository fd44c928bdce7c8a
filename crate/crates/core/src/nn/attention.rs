use serde::{Deserialize, Serialize};

use super::layers::{Conv, Dense, DwConv, Init};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::Real;

/// Kernel geometry of the statical branch and bottleneck of the dynamical branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub kernel: usize,
    pub dilation: usize,
    pub reduction: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            kernel: 3,
            dilation: 2,
            reduction: 4,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.dilation == 0 || self.reduction == 0 {
            return Err(Error::Config(format!(
                "attention needs odd kernel, dilation >= 1, reduction >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Shared machinery of the temporal and channel attention units:
/// `out = SA(x) * DA(x[, cond]) * x`.
#[derive(Debug, Clone)]
struct AttentionUnit {
    channels: usize,
    cond_channels: usize,
    dw: DwConv,
    dw_dilated: DwConv,
    pointwise: Conv,
    fc1: Dense,
    fc2: Dense,
}

impl AttentionUnit {
    /// The statical map starts at 2 and the dynamical weights at 1/2, so the
    /// unit starts as the identity while DA stays sigmoid-bounded.
    fn new<T: Real>(
        init: &mut Init<T>,
        name: &str,
        channels: usize,
        cond_channels: usize,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let hidden = channels.div_ceil(cfg.reduction).max(1);
        let pw_w = init.full(&format!("{name}.sa.pw.w"), &[channels, channels, 1, 1], 0.0)?;
        let pw_b = init.full(&format!("{name}.sa.pw.b"), &[channels], 2.0)?;
        Ok(Self {
            channels,
            cond_channels,
            dw: DwConv::new(init, &format!("{name}.sa.dw"), channels, cfg.kernel, 1)?,
            dw_dilated: DwConv::new(init, &format!("{name}.sa.dwd"), channels, cfg.kernel, cfg.dilation)?,
            pointwise: Conv {
                w: pw_w,
                b: Some(pw_b),
                cin: channels,
                cout: channels,
                k: 1,
            },
            fc1: Dense::new(init, &format!("{name}.da.fc1"), channels + cond_channels, hidden)?,
            fc2: Dense::zeroed(init, &format!("{name}.da.fc2"), hidden, channels)?,
        })
    }

    fn statical<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = self.dw.forward(tape, store, x)?;
        let a = self.dw_dilated.forward(tape, store, a)?;
        self.pointwise.forward(tape, store, a)
    }

    fn dynamical<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, pooled: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, pooled)?;
        let h = tape.silu(h)?;
        let h = self.fc2.forward(tape, store, h)?;
        tape.sigmoid(h)
    }

    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        cond: Option<Var>,
    ) -> Result<Var> {
        let xs = tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != self.channels {
            return Err(Error::shape(format!(
                "attention unit expects [N, {}, H, W], got {xs:?}",
                self.channels
            )));
        }
        let pooled_x = tape.global_avg_pool(x)?;
        let pooled = match cond {
            None if self.cond_channels == 0 => pooled_x,
            Some(c) if self.cond_channels > 0 => {
                let cs = tape.shape(c).to_vec();
                if cs.len() != 4 || cs[0] != xs[0] || cs[1] != self.cond_channels || cs[2..] != xs[2..] {
                    return Err(Error::shape(format!(
                        "conditioning {cs:?} does not match input {xs:?} with {} channels",
                        self.cond_channels
                    )));
                }
                let pc = tape.global_avg_pool(c)?;
                tape.concat(&[pooled_x, pc])?
            }
            _ => {
                return Err(Error::arg(
                    "conditioning must be given exactly when the unit has conditioning channels",
                ))
            }
        };
        let sa = self.statical(tape, store, x)?;
        let da = self.dynamical(tape, store, pooled)?;
        let y = tape.mul(sa, x)?;
        tape.mul_channel(y, da)
    }

    /// Per-channel dynamical weights, `[N, C]`.
    fn weights<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        cond: Option<Var>,
    ) -> Result<Var> {
        let px = tape.global_avg_pool(x)?;
        let pooled = match cond {
            Some(c) => {
                let pc = tape.global_avg_pool(c)?;
                tape.concat(&[px, pc])?
            }
            None => px,
        };
        self.dynamical(tape, store, pooled)
    }
}

/// Temporal attention unit over a time-stacked channel volume.
#[derive(Debug, Clone)]
pub struct TauBlock(AttentionUnit);

impl TauBlock {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, channels: usize, cfg: &AttentionConfig) -> Result<Self> {
        Ok(Self(AttentionUnit::new(init, name, channels, 0, cfg)?))
    }

    pub fn channels(&self) -> usize {
        self.0.channels
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.0.forward(tape, store, x, None)
    }

    pub fn dynamical_weights<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.0.weights(tape, store, x, None)
    }
}

/// Channel attention unit whose dynamical branch also sees conditioning channels.
#[derive(Debug, Clone)]
pub struct CauBlock(AttentionUnit);

impl CauBlock {
    pub fn new<T: Real>(
        init: &mut Init<T>,
        name: &str,
        channels: usize,
        cond_channels: usize,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        if cond_channels == 0 {
            return Err(Error::arg("channel attention needs at least one conditioning channel"));
        }
        Ok(Self(AttentionUnit::new(init, name, channels, cond_channels, cfg)?))
    }

    pub fn channels(&self) -> usize {
        self.0.channels
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        cond: Var,
    ) -> Result<Var> {
        self.0.forward(tape, store, x, Some(cond))
    }

    pub fn dynamical_weights<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        cond: Var,
    ) -> Result<Var> {
        self.0.weights(tape, store, x, Some(cond))
    }
}

/// Attention unit followed by a residual pointwise MLP whose output layer starts at zero.
#[derive(Debug, Clone)]
pub struct TranslatorBlock {
    tau: Option<TauBlock>,
    cau: Option<CauBlock>,
    mlp_in: Conv,
    mlp_out: Conv,
}

impl TranslatorBlock {
    pub fn new<T: Real>(
        init: &mut Init<T>,
        name: &str,
        channels: usize,
        cond_channels: usize,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        let (tau, cau) = if cond_channels == 0 {
            (Some(TauBlock::new(init, &format!("{name}.tau"), channels, cfg)?), None)
        } else {
            (None, Some(CauBlock::new(init, &format!("{name}.cau"), channels, cond_channels, cfg)?))
        };
        Ok(Self {
            tau,
            cau,
            mlp_in: Conv::new(init, &format!("{name}.mlp.0"), channels, 2 * channels, 1, true)?,
            mlp_out: Conv::zeroed(init, &format!("{name}.mlp.1"), 2 * channels, channels, 1)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        cond: Option<Var>,
    ) -> Result<Var> {
        let h = match (&self.tau, &self.cau, cond) {
            (Some(t), _, None) => t.forward(tape, store, x)?,
            (_, Some(c), Some(cv)) => c.forward(tape, store, x, cv)?,
            _ => return Err(Error::arg("translator block conditioning mismatch")),
        };
        let m = self.mlp_in.forward(tape, store, h)?;
        let m = tape.silu(m)?;
        let m = self.mlp_out.forward(tape, store, m)?;
        tape.add(h, m)
    }
}
