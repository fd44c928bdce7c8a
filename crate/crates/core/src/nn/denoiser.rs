use serde::{Deserialize, Serialize};

use super::attention::{AttentionConfig, TranslatorBlock};
use super::layers::{Conv, Dense, Init};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{Real, Tensor};

/// Noise-level label fed to the embedding: `ln(sigma) / 4`.
pub fn noise_label(sigma: f64) -> f64 {
    sigma.ln() / 4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Channels of the noisy field and of the output.
    pub channels: usize,
    pub cond_channels: usize,
    /// Widths per level, finest first.
    pub widths: Vec<usize>,
    /// Dense-block growth per level.
    pub growth: Vec<usize>,
    pub translator_blocks: usize,
    pub fourier_features: usize,
    pub embed_dim: usize,
    pub kernel: usize,
    pub residual_scale: f64,
    pub attention: AttentionConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 2,
            cond_channels: 2,
            widths: vec![16, 24, 32],
            growth: vec![8, 12, 16],
            translator_blocks: 2,
            fourier_features: 6,
            embed_dim: 32,
            kernel: 3,
            residual_scale: 0.2,
            attention: AttentionConfig::default(),
        }
    }
}

impl DenoiserConfig {
    /// A configuration in the low-millions parameter range.
    pub fn full_scale() -> Self {
        Self {
            widths: vec![32, 64, 128],
            growth: vec![16, 32, 64],
            translator_blocks: 4,
            embed_dim: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("denoiser: {m}")));
        if self.channels == 0 || self.cond_channels == 0 {
            return bad("channels and cond_channels must be positive");
        }
        if self.widths.is_empty() || self.widths.len() != self.growth.len() {
            return bad("widths and growth must be non-empty and of equal length");
        }
        if self.widths.iter().chain(&self.growth).any(|&w| w == 0) {
            return bad("widths and growth must be positive");
        }
        if self.fourier_features == 0 || self.embed_dim == 0 || self.kernel % 2 == 0 {
            return bad("fourier_features, embed_dim and an odd kernel are required");
        }
        if !(self.residual_scale.is_finite() && self.residual_scale > 0.0) {
            return bad("residual_scale must be positive");
        }
        self.attention.validate()
    }

    pub fn spatial_multiple(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

/// Densely connected conv group with a scaled local residual.
#[derive(Debug, Clone)]
struct DenseBlock {
    convs: Vec<Conv>,
    fuse: Conv,
    scale: f64,
}

impl DenseBlock {
    fn new<T: Real>(init: &mut Init<T>, name: &str, c: usize, g: usize, k: usize, scale: f64) -> Result<Self> {
        let convs = (0..3)
            .map(|i| Conv::new(init, &format!("{name}.c{i}"), c + i * g, g, k, true))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Conv::new(init, &format!("{name}.fuse"), c + 3 * g, c, 1, true)?;
        Ok(Self { convs, fuse, scale })
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut feats = vec![x];
        for conv in &self.convs {
            let inp = if feats.len() == 1 { x } else { tape.concat(&feats)? };
            let y = conv.forward(tape, store, inp)?;
            feats.push(tape.silu(y)?);
        }
        let all = tape.concat(&feats)?;
        let f = self.fuse.forward(tape, store, all)?;
        let f = tape.scale(f, T::from_f64_lossy(self.scale))?;
        tape.add(x, f)
    }
}

/// Residual dense UNet conditioned on a guide field and a noise level.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    pub config: DenoiserConfig,
    emb1: Dense,
    emb2: Dense,
    level_emb: Vec<Dense>,
    enc_conv: Vec<Conv>,
    enc_block: Vec<DenseBlock>,
    translator: Vec<TranslatorBlock>,
    dec_conv: Vec<Conv>,
    dec_block: Vec<DenseBlock>,
    head: Conv,
}

impl DenoiserNet {
    pub fn new<T: Real>(config: DenoiserConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut init = Init::new(store, seed);
        let k = c.kernel;
        let e = c.embed_dim;
        let emb1 = Dense::new(&mut init, "den.emb.0", 2 * c.fourier_features, e)?;
        let emb2 = Dense::new(&mut init, "den.emb.1", e, e)?;
        let mut level_emb = Vec::new();
        let mut enc_conv = Vec::new();
        let mut enc_block = Vec::new();
        for (l, (&w, &g)) in c.widths.iter().zip(&c.growth).enumerate() {
            let cin = if l == 0 { c.channels + c.cond_channels } else { c.widths[l - 1] };
            enc_conv.push(Conv::new(&mut init, &format!("den.enc{l}.conv"), cin, w, k, true)?);
            level_emb.push(Dense::new(&mut init, &format!("den.enc{l}.emb"), e, w)?);
            enc_block.push(DenseBlock::new(&mut init, &format!("den.enc{l}.rdb"), w, g, k, c.residual_scale)?);
        }
        let top = *c.widths.last().unwrap();
        let translator = (0..c.translator_blocks)
            .map(|b| {
                TranslatorBlock::new(&mut init, &format!("den.trans.{b}"), top, c.cond_channels, &c.attention)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut dec_conv = Vec::new();
        let mut dec_block = Vec::new();
        for l in (0..c.widths.len() - 1).rev() {
            let (wl, wu) = (c.widths[l], c.widths[l + 1]);
            dec_conv.push(Conv::new(&mut init, &format!("den.dec{l}.conv"), wl + wu, wl, k, true)?);
            dec_block.push(DenseBlock::new(
                &mut init,
                &format!("den.dec{l}.rdb"),
                wl,
                c.growth[l],
                k,
                c.residual_scale,
            )?);
        }
        let head = Conv::zeroed(&mut init, "den.head", c.widths[0], c.channels, k)?;
        Ok(Self {
            config,
            emb1,
            emb2,
            level_emb,
            enc_conv,
            enc_block,
            translator,
            dec_conv,
            dec_block,
            head,
        })
    }

    fn fourier<T: Real>(&self, sigma: &[f64]) -> Result<Tensor<T>> {
        let f = self.config.fourier_features;
        let mut data = Vec::with_capacity(sigma.len() * 2 * f);
        for &s in sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::arg(format!("noise level must be positive and finite, got {s}")));
            }
            let c = noise_label(s);
            for j in 0..f {
                let a = c * 2f64.powi(j as i32);
                data.push(T::from_f64_lossy(a.sin()));
            }
            for j in 0..f {
                let a = c * 2f64.powi(j as i32);
                data.push(T::from_f64_lossy(a.cos()));
            }
        }
        Tensor::new(&[sigma.len(), 2 * f], data)
    }

    /// Raw network output for input `x [N, C, H, W]`, guide `cond [N, C_cond, H, W]`
    /// and one noise level per sample.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        cond: Var,
        sigma: &[f64],
    ) -> Result<Var> {
        let c = &self.config;
        let xs = tape.shape(x).to_vec();
        let cs = tape.shape(cond).to_vec();
        let m = c.spatial_multiple();
        if xs.len() != 4 || xs[1] != c.channels || xs[2] % m != 0 || xs[3] % m != 0 || xs[2] < m {
            return Err(Error::shape(format!(
                "denoiser expects [N, {}, H, W] with H, W multiples of {m}, got {xs:?}",
                c.channels
            )));
        }
        if cs.len() != 4 || cs[0] != xs[0] || cs[1] != c.cond_channels || cs[2..] != xs[2..] {
            return Err(Error::shape(format!(
                "denoiser guide {cs:?} does not match input {xs:?} with {} channels",
                c.cond_channels
            )));
        }
        if sigma.len() != xs[0] {
            return Err(Error::shape(format!("{} noise levels for batch {}", sigma.len(), xs[0])));
        }
        let feats = tape.constant(self.fourier(sigma)?);
        let e = self.emb1.forward(tape, store, feats)?;
        let e = tape.silu(e)?;
        let e = self.emb2.forward(tape, store, e)?;
        let emb = tape.silu(e)?;

        let mut skips = Vec::new();
        let mut cur = tape.concat(&[x, cond])?;
        let mut guide = cond;
        for l in 0..c.widths.len() {
            if l > 0 {
                cur = tape.avg_pool2(cur)?;
                guide = tape.avg_pool2(guide)?;
            }
            cur = self.enc_conv[l].forward(tape, store, cur)?;
            let bias = self.level_emb[l].forward(tape, store, emb)?;
            cur = tape.add_channel(cur, bias)?;
            cur = tape.silu(cur)?;
            cur = self.enc_block[l].forward(tape, store, cur)?;
            skips.push(cur);
        }
        for b in &self.translator {
            cur = b.forward(tape, store, cur, Some(guide))?;
        }
        for (i, (conv, block)) in self.dec_conv.iter().zip(&self.dec_block).enumerate() {
            let l = c.widths.len() - 2 - i;
            cur = tape.upsample(cur, 2)?;
            cur = tape.concat(&[cur, skips[l]])?;
            cur = conv.forward(tape, store, cur)?;
            cur = tape.silu(cur)?;
            cur = block.forward(tape, store, cur)?;
        }
        self.head.forward(tape, store, cur)
    }
}
