//! Training and sliding-window inference for the deterministic mean-field network.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, ParamStore, Tape, Var};
use crate::data::PairSet;
use crate::error::{Error, Result};
use crate::grid::{FieldSequence, Tensor};
use crate::nn::MeanNet;
use crate::physics::{tape_ops, LossComponents, PhysicsLossWeights};

/// Indexed supervised pairs `(input window, target frame)`.
pub trait Pairs {
    fn len(&self) -> usize;
    /// Stacked `([B, ...input], [B, 2, H, W])` for the given indices.
    fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)>;
    /// Target grid spacing `(d_lat, d_lon)`.
    fn spacing(&self) -> (f64, f64);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Pairs for PairSet {
    fn len(&self) -> usize {
        PairSet::len(self)
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        PairSet::batch(self, idx)
    }

    fn spacing(&self) -> (f64, f64) {
        (self.fine.meta.d_lat, self.fine.meta.d_lon)
    }
}

/// Pairs held as two stacked tensors sharing the leading axis.
#[derive(Debug, Clone)]
pub struct TensorPairs {
    pub inputs: Tensor<f32>,
    pub targets: Tensor<f32>,
    pub spacing: (f64, f64),
}

impl TensorPairs {
    pub fn new(inputs: Tensor<f32>, targets: Tensor<f32>, spacing: (f64, f64)) -> Result<Self> {
        if inputs.rank() == 0 || targets.rank() != 4 || inputs.shape()[0] != targets.shape()[0] {
            return Err(Error::shape(format!(
                "inputs {:?} and targets {:?} must share the leading axis, targets [N, 2, H, W]",
                inputs.shape(),
                targets.shape()
            )));
        }
        Ok(Self {
            inputs,
            targets,
            spacing,
        })
    }
}

impl Pairs for TensorPairs {
    fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let pick = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
            let items = idx.iter().map(|&i| t.index_axis0(i)).collect::<Result<Vec<_>>>()?;
            Tensor::stack(&items)
        };
        Ok((pick(&self.inputs)?, pick(&self.targets)?))
    }

    fn spacing(&self) -> (f64, f64) {
        self.spacing
    }
}

/// A differentiable map from an input batch to `[B, 2, H, W]`.
pub trait Regressor {
    fn forward(&self, tape: &mut Tape<f32>, store: &ParamStore<f32>, x: Var) -> Result<Var>;
}

impl Regressor for MeanNet {
    fn forward(&self, tape: &mut Tape<f32>, store: &ParamStore<f32>, x: Var) -> Result<Var> {
        MeanNet::forward(self, tape, store, x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weights: PhysicsLossWeights,
    pub seed: u64,
    /// Write a numbered checkpoint every this many epochs; 0 keeps only the best.
    pub checkpoint_every: usize,
    /// Fraction of pairs, taken from the end, held out for model selection.
    pub val_fraction: f64,
    /// Use at most this many training pairs (0 = all).
    pub max_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch: 8,
            lr: 1e-3,
            weights: PhysicsLossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            val_fraction: 0.1,
            max_pairs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub components: LossComponents,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    pub val_mse: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainLog {
    /// Per-step losses; contains no timings.
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("epoch,step,mae,mse,adv,vort,div,total\n");
        for r in &self.steps {
            let c = &r.components;
            let _ = writeln!(
                s,
                "{},{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
                r.epoch, r.step, c.mae, c.mse, c.adv, c.vort, c.div, r.total
            );
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,mean_total,val_mse\n");
        for r in &self.epochs {
            let val = r.val_mse.map(|v| format!("{v:.8e}")).unwrap_or_default();
            let _ = writeln!(s, "{},{:.8e},{}", r.epoch, r.mean_total, val);
        }
        s
    }

    /// Wall-clock seconds per epoch, kept apart so the other logs are reproducible.
    pub fn timing_csv(&self) -> String {
        timing_csv(self.epochs.iter().map(|r| (r.epoch, r.wall_seconds)))
    }
}

/// Where checkpoints go: the best weights at `path`, numbered ones beside it.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub path: PathBuf,
}

impl CheckpointSink {
    fn numbered(&self, epoch: usize) -> PathBuf {
        let stem = self.path.file_stem().and_then(|s| s.to_str()).unwrap_or("ckpt");
        self.path.with_file_name(format!("{stem}.epoch{epoch}.wts"))
    }
}

/// Contiguous train / validation index ranges with the validation tail at the end.
pub fn split_tail(n: usize, val_fraction: f64, max_pairs: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_val >= n {
        return Err(Error::arg(format!("{n} pairs leave nothing to train on")));
    }
    let mut train: Vec<usize> = (0..n - n_val).collect();
    if max_pairs > 0 && train.len() > max_pairs {
        train.truncate(max_pairs);
    }
    Ok((train, (n - n_val..n).collect()))
}

fn batch_loss<M: Regressor>(
    model: &M,
    tape: &mut Tape<f32>,
    store: &ParamStore<f32>,
    x: Tensor<f32>,
    y: Tensor<f32>,
    spacing: (f64, f64),
    w: &PhysicsLossWeights,
) -> Result<tape_ops::LossTerms> {
    let xv = tape.constant(x);
    let pred = model.forward(tape, store, xv)?;
    if tape.shape(pred) != y.shape() {
        return Err(Error::shape(format!(
            "model output {:?} does not match target batch {:?}",
            tape.shape(pred),
            y.shape()
        )));
    }
    let yv = tape.constant(y);
    tape_ops::physics_loss(tape, pred, yv, spacing, w)
}

/// Mean squared error of `model` over `idx`.
pub fn evaluate_mse<M: Regressor, P: Pairs + ?Sized>(
    model: &M,
    store: &ParamStore<f32>,
    data: &P,
    idx: &[usize],
    batch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let pred = model.forward(&mut tape, store, xv)?;
        let p = tape.value(pred);
        y.expect_shape(p.shape())?;
        total += p
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>();
        count += y.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Trains `model` in place on `store`; returns the best-by-validation weights and the log.
pub fn train_mean<M: Regressor, P: Pairs + ?Sized>(
    data: &P,
    model: &M,
    store: &mut ParamStore<f32>,
    cfg: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<(ParamStore<f32>, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::arg("no training pairs"));
    }
    let (train, val) = split_tail(data.len(), cfg.val_fraction, cfg.max_pairs)?;
    let spacing = data.spacing();
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };

    // shape contract before touching the weights
    {
        let (x, y) = data.batch(&train[..cfg.batch.min(train.len())])?;
        let mut tape = Tape::new();
        batch_loss(model, &mut tape, store, x, y, spacing, &cfg.weights)?;
    }

    let mut log = TrainLog::default();
    let mut best = (f64::INFINITY, store.clone());
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order = train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9)));
        let mut sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let (x, y) = data.batch(chunk)?;
            let mut tape = Tape::new();
            let terms = batch_loss(model, &mut tape, store, x, y, spacing, &cfg.weights)?;
            let total = tape.value(terms.total).data()[0] as f64;
            if !total.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, step {step}")));
            }
            let grads = tape.backward(terms.total)?;
            store.set_grads(&grads);
            store.adam_step(&adam)?;
            log.steps.push(StepRecord {
                epoch,
                step,
                components: terms.components(&tape),
                total,
            });
            sum += total;
            n_batches += 1;
            step += 1;
        }
        let val_mse = if val.is_empty() {
            None
        } else {
            Some(evaluate_mse(model, store, data, &val, cfg.batch)?)
        };
        // without a hold-out the latest weights count as best
        let score = val_mse.unwrap_or(f64::NEG_INFINITY);
        if score <= best.0 || val_mse.is_none() {
            best = (score, store.clone());
            log.best_epoch = epoch;
            if let Some(s) = sink {
                store.save_wts1(&s.path)?;
            }
        }
        if let Some(s) = sink {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                store.save_wts1(s.numbered(epoch + 1))?;
            }
        }
        log.epochs.push(EpochRecord {
            epoch,
            mean_total: sum / n_batches.max(1) as f64,
            val_mse,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "mean epoch {epoch}: loss {:.5} val {:?}",
            sum / n_batches.max(1) as f64,
            val_mse
        );
    }
    Ok((best.1, log))
}

/// Sliding-window (stride 1) prediction over a coarse sequence: one fine `(u, v)`
/// frame per window, aligned with the window's last step.
pub fn predict_mean(net: &MeanNet, store: &ParamStore<f32>, seq: &FieldSequence, batch: usize) -> Result<FieldSequence> {
    let c = &net.config;
    if seq.channels() != c.c_in {
        return Err(Error::shape(format!(
            "model expects {} input channels, sequence has {}",
            c.c_in,
            seq.channels()
        )));
    }
    if !seq.data().all_finite() {
        return Err(Error::Numeric("non-finite value in the coarse input".into()));
    }
    if seq.steps() < c.t_in {
        return Err(Error::arg(format!(
            "sequence of {} steps is shorter than the {}-step input window",
            seq.steps(),
            c.t_in
        )));
    }
    let n = seq.steps() + 1 - c.t_in;
    let mut frames = Vec::with_capacity(n);
    let starts: Vec<usize> = (0..n).collect();
    for chunk in starts.chunks(batch.max(1)) {
        let windows = chunk
            .iter()
            .map(|&s| Ok(seq.window(s, c.t_in)?.into_data()))
            .collect::<Result<Vec<_>>>()?;
        let out = net.predict_batch(store, &Tensor::stack(&windows)?)?;
        if !out.all_finite() {
            return Err(Error::Numeric(format!("non-finite mean prediction in window {}", chunk[0])));
        }
        for i in 0..chunk.len() {
            frames.push(out.index_axis0(i)?);
        }
    }
    let mut meta = seq.meta.refined(c.factor)?;
    meta.channel_names = vec!["u".into(), "v".into()];
    if c.c_out != 2 {
        meta.channel_names = (0..c.c_out).map(|i| format!("c{i}")).collect();
    }
    FieldSequence::new(meta, Tensor::stack(&frames)?)
}

/// Writes the step and epoch CSVs of a training log into `dir` with the given prefix.
pub fn write_train_log(log: &TrainLog, dir: &Path, prefix: &str) -> Result<()> {
    crate::spectral::write_text(dir.join(format!("{prefix}_log.csv")), &log.steps_csv())?;
    crate::spectral::write_text(dir.join(format!("{prefix}_epochs.csv")), &log.epochs_csv())?;
    crate::spectral::write_text(dir.join(format!("{prefix}_timing.csv")), &log.timing_csv())
}

pub(crate) fn timing_csv(rows: impl Iterator<Item = (usize, f64)>) -> String {
    let mut s = String::from("epoch,wall_seconds\n");
    for (e, w) in rows {
        let _ = writeln!(s, "{e},{w:.3}");
    }
    s
}
