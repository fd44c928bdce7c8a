use serde::{Deserialize, Serialize};

use super::attention::{AttentionConfig, TranslatorBlock};
use super::layers::{Conv, ConvBlock, Init};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{Real, Tensor};

/// Widths and depths of the encoder, translator and decoder of the mean network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeanNetConfig {
    pub t_in: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub factor: usize,
    /// Encoder/decoder widths per level, finest first.
    pub widths: Vec<usize>,
    pub translator_channels: usize,
    pub translator_blocks: usize,
    /// Widths of the x2 upsampling stages from coarse to target resolution.
    pub up_widths: Vec<usize>,
    pub kernel: usize,
    pub norm_groups: usize,
    pub attention: AttentionConfig,
    /// Add the upsampled last input frame to the prediction.
    pub input_skip: bool,
}

impl Default for MeanNetConfig {
    fn default() -> Self {
        Self {
            t_in: 4,
            c_in: 3,
            c_out: 2,
            factor: 4,
            widths: vec![32, 64, 128],
            translator_channels: 128,
            translator_blocks: 2,
            up_widths: vec![32, 16],
            kernel: 3,
            norm_groups: 8,
            attention: AttentionConfig::default(),
            input_skip: true,
        }
    }
}

impl MeanNetConfig {
    /// A configuration in the tens-of-millions parameter range.
    pub fn full_scale() -> Self {
        Self {
            widths: vec![64, 128, 256],
            translator_channels: 512,
            translator_blocks: 8,
            up_widths: vec![64, 32],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("mean network: {m}")));
        if self.t_in == 0 || self.c_in == 0 || self.c_out == 0 {
            return bad("t_in, c_in and c_out must be positive");
        }
        if !self.factor.is_power_of_two() {
            return bad("factor must be a power of two");
        }
        if self.up_widths.len() != self.factor.trailing_zeros() as usize {
            return bad("up_widths needs one entry per x2 stage of the factor");
        }
        if self.widths.is_empty() || self.widths.iter().chain(&self.up_widths).any(|&w| w == 0) {
            return bad("widths must be non-empty and positive");
        }
        if self.translator_channels == 0 || self.kernel % 2 == 0 || self.norm_groups == 0 {
            return bad("translator channels, odd kernel and norm groups required");
        }
        if self.input_skip && self.c_out > self.c_in {
            return bad("input skip needs c_out <= c_in");
        }
        self.attention.validate()
    }

    /// Coarse extents must be divisible by this.
    pub fn coarse_multiple(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

/// Encoder, time-stacked translator and upsampling decoder for mean-field downscaling.
#[derive(Debug, Clone)]
pub struct MeanNet {
    pub config: MeanNetConfig,
    enc: Vec<(ConvBlock, ConvBlock)>,
    trans_in: Conv,
    blocks: Vec<TranslatorBlock>,
    trans_out: Conv,
    dec: Vec<(ConvBlock, ConvBlock)>,
    up: Vec<ConvBlock>,
    head: Conv,
}

impl MeanNet {
    pub fn new<T: Real>(config: MeanNetConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut init = Init::new(store, seed);
        let (k, g) = (c.kernel, c.norm_groups);
        let mut enc = Vec::new();
        let mut prev = c.c_in;
        for (l, &w) in c.widths.iter().enumerate() {
            enc.push((
                ConvBlock::new(&mut init, &format!("mean.enc{l}.0"), prev, w, k, g)?,
                ConvBlock::new(&mut init, &format!("mean.enc{l}.1"), w, w, k, g)?,
            ));
            prev = w;
        }
        let top = *c.widths.last().unwrap();
        let hid = c.translator_channels;
        let trans_in = Conv::new(&mut init, "mean.trans.in", c.t_in * top, hid, 1, true)?;
        let blocks = (0..c.translator_blocks)
            .map(|b| TranslatorBlock::new(&mut init, &format!("mean.trans.{b}"), hid, 0, &c.attention))
            .collect::<Result<Vec<_>>>()?;
        let trans_out = Conv::new(&mut init, "mean.trans.out", hid, top, 1, true)?;
        let mut dec = Vec::new();
        for l in (0..c.widths.len() - 1).rev() {
            let (wl, wu) = (c.widths[l], c.widths[l + 1]);
            dec.push((
                ConvBlock::new(&mut init, &format!("mean.dec{l}.0"), wu + wl, wl, k, g)?,
                ConvBlock::new(&mut init, &format!("mean.dec{l}.1"), wl, wl, k, g)?,
            ));
        }
        let mut up = Vec::new();
        let mut prev = c.widths[0];
        for (i, &w) in c.up_widths.iter().enumerate() {
            up.push(ConvBlock::new(&mut init, &format!("mean.up{i}"), prev, w, k, g)?);
            prev = w;
        }
        let head = Conv::zeroed(&mut init, "mean.head", prev, c.c_out, k)?;
        Ok(Self {
            config,
            enc,
            trans_in,
            blocks,
            trans_out,
            dec,
            up,
            head,
        })
    }

    /// Selects the final frame from frame-batched features `[N*T, C, h, w]`.
    fn last_frame<T: Real>(&self, tape: &mut Tape<T>, feat: Var, n: usize) -> Result<Var> {
        let s = tape.shape(feat).to_vec();
        let t = self.config.t_in;
        let stacked = tape.reshape(feat, &[n, t * s[1], s[2], s[3]])?;
        tape.slice(stacked, 1, (t - 1) * s[1], s[1])
    }

    /// `[N, T_in, C_in, h, w] -> [N, C_out, h * factor, w * factor]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = &self.config;
        let s = tape.shape(x).to_vec();
        let m = c.coarse_multiple();
        if s.len() != 5 || s[1] != c.t_in || s[2] != c.c_in || s[3] % m != 0 || s[4] % m != 0 || s[3] < m {
            return Err(Error::shape(format!(
                "mean network expects [N, {}, {}, h, w] with h, w multiples of {m}, got {s:?}",
                c.t_in, c.c_in
            )));
        }
        let (n, h, w) = (s[0], s[3], s[4]);
        let frames = tape.reshape(x, &[n * c.t_in, c.c_in, h, w])?;
        let mut feats = Vec::new();
        let mut cur = frames;
        for (l, (a, b)) in self.enc.iter().enumerate() {
            if l > 0 {
                cur = tape.avg_pool2(cur)?;
            }
            cur = a.forward(tape, store, cur)?;
            cur = b.forward(tape, store, cur)?;
            feats.push(cur);
        }
        let top = tape.shape(cur).to_vec();
        let stacked = tape.reshape(cur, &[n, c.t_in * top[1], top[2], top[3]])?;
        let mut z = self.trans_in.forward(tape, store, stacked)?;
        for b in &self.blocks {
            z = b.forward(tape, store, z, None)?;
        }
        let z = self.trans_out.forward(tape, store, z)?;
        let last_top = self.last_frame(tape, cur, n)?;
        let mut d = tape.add(z, last_top)?;
        for (i, (a, b)) in self.dec.iter().enumerate() {
            let l = c.widths.len() - 2 - i;
            d = tape.upsample(d, 2)?;
            let skip = self.last_frame(tape, feats[l], n)?;
            d = tape.concat(&[d, skip])?;
            d = a.forward(tape, store, d)?;
            d = b.forward(tape, store, d)?;
        }
        for u in &self.up {
            d = tape.upsample(d, 2)?;
            d = u.forward(tape, store, d)?;
        }
        let out = self.head.forward(tape, store, d)?;
        if !c.input_skip {
            return Ok(out);
        }
        let flat = tape.reshape(x, &[n, c.t_in * c.c_in, h, w])?;
        let last = tape.slice(flat, 1, (c.t_in - 1) * c.c_in, c.c_out)?;
        let base = tape.upsample(last, c.factor)?;
        tape.add(out, base)
    }

    /// Single-window prediction `[T_in, C_in, h, w] -> [C_out, H, W]`.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, seq: &Tensor<T>) -> Result<Tensor<T>> {
        let s = seq.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("expected [T, C, h, w], got {s:?}")));
        }
        let batch = seq.clone().reshape(&[1, s[0], s[1], s[2], s[3]])?;
        let out = self.predict_batch(store, &batch)?;
        let os = out.shape().to_vec();
        out.reshape(&os[1..])
    }

    pub fn predict_batch<T: Real>(&self, store: &ParamStore<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let y = self.forward(&mut tape, store, x)?;
        Ok(tape.value(y).clone())
    }
}
