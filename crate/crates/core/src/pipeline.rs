//! Run configuration and the commands behind the `windscale` binary.
//!
//! Artifacts live under one directory with fixed names:
//! `truth.grd`, `test_truth.grd`, `gcm.grd` from data generation,
//! `<stem>_coarse.grd` and `<stem>_pairs.json` from pairing,
//! `mean.wts` and `diff_<mode>.wts` (each with a `.json` sidecar) from training,
//! `samples.grd` from sampling and a report directory from diagnosis.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::data::{gen_biased_gcm, gen_synthetic, make_pairs, qmap_apply, qmap_fit, GcmBias, PairSet, SynthConfig};
use crate::diagnostics::{default_bands, emit_report, spectral_scorecard, ScoreCard, ScoreOptions};
use crate::edm::{
    end2end_guides, member_seed, sample_fields, train_diffusion, DiffTrainConfig, DiffusionMeta, DiffusionMode,
    DiffusionSet, NoiseSchedule, SamplerConfig,
};
use crate::error::{Error, Result};
use crate::grid::{read_grd1, write_grd1, FieldSequence};
use crate::mean_model::{predict_mean, train_mean, write_train_log, CheckpointSink, TrainConfig};
use crate::nn::{count_params, DenoiserConfig, DenoiserNet, MeanNet, MeanNetConfig};
use crate::spectral::{write_text, FilterSpec};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairsSection {
    pub t_in: usize,
    pub factor: usize,
    pub filter: FilterSpec,
}

impl Default for PairsSection {
    fn default() -> Self {
        Self {
            t_in: 4,
            factor: 4,
            filter: FilterSpec::SpectralCutoff { k_c: 8.0 },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeanSection {
    pub net: MeanNetConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffSection {
    pub train: DiffTrainConfig,
    /// Training settings for the end-to-end baseline; `train` when unset.
    pub end2end_train: Option<DiffTrainConfig>,
    pub correction: DenoiserConfig,
    pub end2end: DenoiserConfig,
}

impl Default for DiffSection {
    fn default() -> Self {
        Self {
            train: DiffTrainConfig::default(),
            end2end_train: None,
            correction: DenoiserConfig::default(),
            end2end: end2end_denoiser(),
        }
    }
}

/// Baseline denoiser that maps the interpolated coarse input (winds and orography)
/// straight to the fine winds.
pub fn end2end_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        cond_channels: 3,
        ..DenoiserConfig::full_scale()
    }
}

impl DiffSection {
    pub fn net(&self, mode: DiffusionMode) -> &DenoiserConfig {
        match mode {
            DiffusionMode::Correction => &self.correction,
            DiffusionMode::End2end => &self.end2end,
        }
    }

    pub fn train_for(&self, mode: DiffusionMode) -> &DiffTrainConfig {
        match mode {
            DiffusionMode::End2end => self.end2end_train.as_ref().unwrap_or(&self.train),
            DiffusionMode::Correction => &self.train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub schedule: NoiseSchedule,
    pub config: SamplerConfig,
    pub members: usize,
    /// Rows per denoiser call.
    pub batch: usize,
    pub bench_steps: Vec<usize>,
    pub bench_members: Vec<usize>,
    /// Output frames generated per benchmark cell.
    pub bench_frames: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            schedule: NoiseSchedule::default(),
            config: SamplerConfig::default(),
            members: 1,
            batch: 8,
            bench_steps: vec![8, 16],
            bench_members: vec![1, 2],
            bench_frames: 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasSection {
    pub gcm: GcmBias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagSection {
    /// Length of the independently seeded evaluation sequence.
    pub eval_steps: usize,
    pub score: ScoreOptions,
}

impl Default for DiagSection {
    fn default() -> Self {
        Self {
            eval_steps: 128,
            score: ScoreOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub pairs: PairsSection,
    pub mean_train: MeanSection,
    pub diff_train: DiffSection,
    pub sampler: SamplerSection,
    pub bias: BiasSection,
    pub diagnostics: DiagSection,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            pairs: PairsSection::default(),
            mean_train: MeanSection::default(),
            diff_train: DiffSection::default(),
            sampler: SamplerSection::default(),
            bias: BiasSection::default(),
            diagnostics: DiagSection::default(),
            output_dir: PathBuf::from("run"),
            seed: 0,
        }
    }
}

/// Independent stream ids for the global seed.
mod stream {
    pub const TRUTH: u64 = 1;
    pub const EVAL: u64 = 2;
    pub const GCM: u64 = 3;
    pub const MEAN: u64 = 4;
    pub const CORRECTION: u64 = 5;
    pub const END2END: u64 = 6;
    pub const SAMPLER: u64 = 7;
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.synth.validate()?;
        let p = &self.pairs;
        p.filter.validate().map_err(|e| Error::Config(format!("pairs.filter: {e}")))?;
        if p.factor < 2 || self.synth.n_lat % p.factor != 0 || self.synth.n_lon % p.factor != 0 {
            return bad(format!(
                "pairs.factor {} must be >= 2 and divide the {}x{} grid",
                p.factor, self.synth.n_lat, self.synth.n_lon
            ));
        }
        if p.t_in == 0 || p.t_in > self.synth.steps.min(self.diagnostics.eval_steps) {
            return bad(format!("pairs.t_in {} must be in 1..=steps", p.t_in));
        }
        let net = &self.mean_train.net;
        if net.t_in != p.t_in || net.factor != p.factor || net.c_in != 3 || net.c_out != 2 {
            return bad(format!(
                "mean_train.net must have t_in {}, factor {}, c_in 3, c_out 2 (got {}, {}, {}, {})",
                p.t_in, p.factor, net.t_in, net.factor, net.c_in, net.c_out
            ));
        }
        net.validate().map_err(|e| Error::Config(format!("mean_train.net: {e}")))?;
        self.mean_train.train.validate()?;
        for (mode, cond) in [(DiffusionMode::Correction, 2), (DiffusionMode::End2end, 3)] {
            let d = self.diff_train.net(mode);
            if d.channels != 2 || d.cond_channels != cond {
                return bad(format!(
                    "diff_train.{} needs channels 2 and cond_channels {cond}",
                    mode.name()
                ));
            }
            d.validate().map_err(|e| Error::Config(format!("diff_train.{}: {e}", mode.name())))?;
            self.diff_train.train_for(mode).validate()?;
        }
        let s = &self.sampler;
        s.schedule.validate().map_err(|e| Error::Config(format!("sampler.schedule: {e}")))?;
        if s.members == 0 || s.batch == 0 || s.bench_frames == 0 {
            return bad("sampler.members, batch and bench_frames must be >= 1".into());
        }
        if s.bench_steps.iter().chain(&s.bench_members).any(|&n| n == 0) {
            return bad("sampler bench grid entries must be >= 1".into());
        }
        if self.diagnostics.eval_steps < 16 {
            return bad("diagnostics.eval_steps must be >= 16".into());
        }
        if self.output_dir.as_os_str().is_empty() {
            return bad("output_dir is empty".into());
        }
        Ok(())
    }

    fn seed_for(&self, section: u64, id: u64) -> u64 {
        member_seed(self.seed ^ section, id)
    }

    pub fn truth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed_for(self.synth.seed, stream::TRUTH),
            ..self.synth.clone()
        }
    }

    pub fn eval_config(&self) -> SynthConfig {
        SynthConfig {
            steps: self.diagnostics.eval_steps,
            seed: self.seed_for(self.synth.seed, stream::EVAL),
            ..self.synth.clone()
        }
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        write_text(dir.join(RESOLVED_CONFIG), &(text + "\n"))
    }
}

/// `Io(NotFound)` for a missing upstream artifact.
pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)))
    }
}

/// Reads a GRD1 file and rejects NaN or infinite values.
pub fn read_finite(path: impl AsRef<Path>) -> Result<FieldSequence> {
    let path = path.as_ref();
    let seq = read_grd1(path)?;
    if let Some(k) = seq.data().data().iter().position(|v| !v.is_finite()) {
        let (c, n) = (seq.channels(), seq.plane_len());
        let w = seq.meta.n_lon;
        let (t, ch, cell) = (k / (c * n), (k / n) % c, k % n);
        return Err(Error::Numeric(format!(
            "{}: non-finite value at step {t}, channel {}, cell ({}, {})",
            path.display(),
            seq.meta.channel_names[ch],
            cell / w,
            cell % w
        )));
    }
    Ok(seq)
}

fn make_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

/// Truth, evaluation truth and biased coarse-model output for the evaluation period.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    make_dir(out)?;
    let truth = gen_synthetic(&cfg.truth_config())?;
    let eval = gen_synthetic(&cfg.eval_config())?;
    let bias = GcmBias {
        seed: cfg.seed_for(cfg.bias.gcm.seed, stream::GCM),
        ..cfg.bias.gcm.clone()
    };
    let gcm = gen_biased_gcm(&eval, cfg.pairs.factor, &cfg.pairs.filter, &bias)?;
    let paths = vec![out.join("truth.grd"), out.join("test_truth.grd"), out.join("gcm.grd")];
    write_grd1(&truth, &paths[0])?;
    write_grd1(&eval, &paths[1])?;
    write_grd1(&gcm, &paths[2])?;
    cfg.write_resolved(out)?;
    Ok(paths)
}

/// Pairing parameters stored beside the coarse sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsInfo {
    pub truth: String,
    pub t_in: usize,
    pub factor: usize,
    pub filter: FilterSpec,
    pub pairs: usize,
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into())
}

pub fn coarse_path(dir: &Path, truth_stem: &str) -> PathBuf {
    dir.join(format!("{truth_stem}_coarse.grd"))
}

pub fn pairs_info_path(dir: &Path, truth_stem: &str) -> PathBuf {
    dir.join(format!("{truth_stem}_pairs.json"))
}

/// Writes `<stem>_coarse.grd` and `<stem>_pairs.json` into `out` (the truth's directory by default).
pub fn cmd_make_pairs(truth_path: &Path, t_in: usize, factor: usize, filter: FilterSpec, out: Option<&Path>) -> Result<Vec<PathBuf>> {
    require(truth_path)?;
    filter.validate()?;
    let truth = read_finite(truth_path)?;
    if let Some(w) = filter.noop_warning(truth.meta.n_lat, truth.meta.n_lon) {
        log::warn!("{w}");
    }
    let set = make_pairs(&truth, t_in, factor, &filter)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| truth_path.parent().unwrap_or(Path::new(".")).to_path_buf());
    make_dir(&dir)?;
    let s = stem(truth_path);
    let info = PairsInfo {
        truth: truth_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        t_in,
        factor,
        filter,
        pairs: set.len(),
    };
    let paths = vec![coarse_path(&dir, &s), pairs_info_path(&dir, &s)];
    write_grd1(&set.coarse, &paths[0])?;
    write_json(&paths[1], &info)?;
    Ok(paths)
}

fn load_pairs(dir: &Path, cfg: &RunConfig) -> Result<(PairSet, FieldSequence)> {
    let truth_path = dir.join("truth.grd");
    let info_path = pairs_info_path(dir, "truth");
    let coarse = coarse_path(dir, "truth");
    for p in [&truth_path, &info_path, &coarse] {
        require(p)?;
    }
    let info: PairsInfo = read_json(&info_path)?;
    let p = &cfg.pairs;
    if info.t_in != p.t_in || info.factor != p.factor || info.filter != p.filter {
        return Err(Error::Config(format!(
            "{} was made with t_in {}, factor {}, {:?}; config says t_in {}, factor {}, {:?}",
            info_path.display(),
            info.t_in,
            info.factor,
            info.filter,
            p.t_in,
            p.factor,
            p.filter
        )));
    }
    let truth = read_finite(&truth_path)?;
    let set = PairSet::new(read_finite(&coarse)?, truth.select_channels(&["u", "v"])?, p.t_in, p.factor, p.filter)?;
    Ok((set, truth))
}

pub fn mean_ckpt(dir: &Path) -> PathBuf {
    dir.join("mean.wts")
}

pub fn diff_ckpt(dir: &Path, mode: DiffusionMode) -> PathBuf {
    dir.join(format!("diff_{}.wts", mode.name()))
}

fn sidecar(ckpt: &Path) -> PathBuf {
    DiffusionMeta::sidecar_path(ckpt)
}

pub fn cmd_train_mean(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = &cfg.output_dir;
    let (set, _) = load_pairs(dir, cfg)?;
    let mut store = ParamStore::new();
    let net = MeanNet::new(cfg.mean_train.net.clone(), &mut store, cfg.seed_for(0, stream::MEAN))?;
    log::info!("mean model: {} parameters, {} pairs", count_params(&store), set.len());
    let train = TrainConfig {
        seed: cfg.seed_for(cfg.mean_train.train.seed, stream::MEAN),
        ..cfg.mean_train.train.clone()
    };
    let ckpt = mean_ckpt(dir);
    let sink = CheckpointSink { path: ckpt.clone() };
    let (best, log) = train_mean(&set, &net, &mut store, &train, Some(&sink))?;
    best.save_wts1(&ckpt)?;
    write_json(&sidecar(&ckpt), &net.config)?;
    write_train_log(&log, dir, "mean")?;
    cfg.write_resolved(dir)?;
    Ok(vec![ckpt, dir.join("mean_log.csv"), dir.join("mean_epochs.csv")])
}

pub fn load_mean(ckpt: &Path) -> Result<(MeanNet, ParamStore<f32>)> {
    require(ckpt)?;
    let config: MeanNetConfig = read_json(&sidecar(ckpt))?;
    let loaded = ParamStore::<f32>::load_wts1(ckpt)?;
    let mut store = ParamStore::new();
    let net = MeanNet::new(config, &mut store, 0)?;
    store.load_values_from(&loaded)?;
    Ok((net, store))
}

pub fn load_denoiser(ckpt: &Path) -> Result<(DenoiserNet, ParamStore<f32>, DiffusionMeta)> {
    require(ckpt)?;
    let meta = DiffusionMeta::load(ckpt)?;
    let loaded = ParamStore::<f32>::load_wts1(ckpt)?;
    let mut store = ParamStore::new();
    let net = DenoiserNet::new(meta.net.clone(), &mut store, 0)?;
    store.load_values_from(&loaded)?;
    Ok((net, store, meta))
}

pub fn cmd_train_diff(cfg: &RunConfig, mode: DiffusionMode) -> Result<Vec<PathBuf>> {
    let dir = &cfg.output_dir;
    let (pairs, truth) = load_pairs(dir, cfg)?;
    let (t_in, factor) = (cfg.pairs.t_in, cfg.pairs.factor);
    let set = match mode {
        DiffusionMode::Correction => {
            let (mean_net, mean_store) = load_mean(&mean_ckpt(dir))?;
            let mean = predict_mean(&mean_net, &mean_store, &pairs.coarse, cfg.sampler.batch)?;
            DiffusionSet::correction(&mean, &truth, t_in)?
        }
        DiffusionMode::End2end => DiffusionSet::end2end(&pairs.coarse, &truth, t_in, factor)?,
    };
    drop(pairs);
    let id = match mode {
        DiffusionMode::Correction => stream::CORRECTION,
        DiffusionMode::End2end => stream::END2END,
    };
    let base = cfg.diff_train.train_for(mode);
    let train = DiffTrainConfig {
        seed: cfg.seed_for(base.seed, id),
        ..base.clone()
    };
    let mut store = ParamStore::new();
    let net = DenoiserNet::new(cfg.diff_train.net(mode).clone(), &mut store, cfg.seed_for(0, id))?;
    log::info!("{} denoiser: {} parameters, {} pairs", mode.name(), count_params(&store), set.len());
    let (best, sigma_data, log) = train_diffusion(&set, &net, &mut store, &train)?;
    let ckpt = diff_ckpt(dir, mode);
    best.save_wts1(&ckpt)?;
    DiffusionMeta {
        mode,
        sigma_data,
        t_in,
        factor,
        net: net.config.clone(),
    }
    .save(&ckpt)?;
    let prefix = format!("diff_{}", mode.name());
    write_text(dir.join(format!("{prefix}_log.csv")), &log.steps_csv())?;
    write_text(dir.join(format!("{prefix}_epochs.csv")), &log.epochs_csv())?;
    write_text(dir.join(format!("{prefix}_timing.csv")), &log.timing_csv())?;
    cfg.write_resolved(dir)?;
    Ok(vec![ckpt, dir.join(format!("{prefix}_log.csv"))])
}

/// Path of the fitted map written beside the corrected output.
pub fn qmap_path(out: &Path) -> PathBuf {
    out.with_extension("qmp")
}

/// Fits `source -> target` per cell with `levels` quantiles and writes the mapped source.
pub fn cmd_bias_correct(source: &Path, target: &Path, out: &Path, levels: usize) -> Result<Vec<PathBuf>> {
    require(source)?;
    require(target)?;
    let src = read_finite(source)?;
    let map = qmap_fit(&src, &read_finite(target)?, levels)?;
    let corrected = qmap_apply(&map, &src)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        make_dir(parent)?;
    }
    write_grd1(&corrected, out)?;
    map.save(qmap_path(out))?;
    Ok(vec![out.to_path_buf(), qmap_path(out)])
}

#[derive(Debug, Clone)]
pub struct SampleArgs {
    pub mean_ckpt: Option<PathBuf>,
    pub diff_ckpt: PathBuf,
    pub input: PathBuf,
    pub members: usize,
    pub steps: usize,
    pub seed: u64,
    pub batch: usize,
    /// `samples.grd` beside the input when unset.
    pub out: Option<PathBuf>,
}

/// Generated fields plus the per-field count of denoiser evaluations.
pub struct Generated {
    pub mean: Option<FieldSequence>,
    pub members: Vec<FieldSequence>,
    pub evaluations_per_field: usize,
}

fn wind_meta(input: &FieldSequence, factor: usize) -> Result<crate::grid::GridMeta> {
    let mut meta = input.meta.refined(factor)?;
    meta.channel_names = vec!["u".into(), "v".into()];
    Ok(meta)
}

/// Mean prediction (correction mode) and sampled fields for every window of `input`.
pub fn generate(
    mean: Option<(&MeanNet, &ParamStore<f32>)>,
    den: (&DenoiserNet, &ParamStore<f32>, &DiffusionMeta),
    input: &FieldSequence,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    members: usize,
    batch: usize,
) -> Result<Generated> {
    let (net, store, meta) = den;
    let out_meta = wind_meta(input, meta.factor)?;
    let (mean_seq, cond) = match meta.mode {
        DiffusionMode::Correction => {
            let (m, s) = mean.ok_or_else(|| Error::Argument("correction sampling needs a mean checkpoint".into()))?;
            if m.config.t_in != meta.t_in || m.config.factor != meta.factor {
                return Err(Error::Config(format!(
                    "mean model (t_in {}, factor {}) and denoiser (t_in {}, factor {}) disagree",
                    m.config.t_in, m.config.factor, meta.t_in, meta.factor
                )));
            }
            let seq = predict_mean(m, s, input, batch)?;
            let cond = seq.data().clone();
            (Some(seq), cond)
        }
        DiffusionMode::End2end => (None, end2end_guides(input, meta.t_in, meta.factor)?),
    };
    let (fields, evals) = sample_fields(net, store, meta, &cond, schedule, sampler, members, batch)?;
    let n = cond.shape()[0] * members;
    let members = fields
        .into_iter()
        .map(|f| {
            let data = match &mean_seq {
                Some(m) => f.zip_map(m.data(), |r, b| r + b)?,
                None => f,
            };
            if !data.all_finite() {
                return Err(Error::Numeric("non-finite sampled field".into()));
            }
            FieldSequence::new(out_meta.clone(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Generated {
        mean: mean_seq,
        members,
        evaluations_per_field: evals / n.max(1),
    })
}

/// Writes `samples.grd` (member 0), `samples_m<k>.grd` for further members and, in
/// correction mode, the mean-only prediction as `samples_mean.grd`.
pub fn cmd_sample(a: &SampleArgs) -> Result<Vec<PathBuf>> {
    require(&a.input)?;
    let (den_net, den_store, meta) = load_denoiser(&a.diff_ckpt)?;
    let mean = match (&a.mean_ckpt, meta.mode) {
        (Some(p), _) => Some(load_mean(p)?),
        (None, DiffusionMode::Correction) => {
            return Err(Error::Argument("--mean-ckpt is required for a correction-mode denoiser".into()))
        }
        (None, DiffusionMode::End2end) => None,
    };
    if a.members == 0 || a.steps == 0 {
        return Err(Error::Argument("--members and --steps must be >= 1".into()));
    }
    let input = read_finite(&a.input)?;
    let schedule = NoiseSchedule::default().with_steps(a.steps);
    let sampler = SamplerConfig {
        seed: a.seed,
        ..SamplerConfig::default()
    };
    let g = generate(
        mean.as_ref().map(|(n, s)| (n, s)),
        (&den_net, &den_store, &meta),
        &input,
        &schedule,
        &sampler,
        a.members,
        a.batch,
    )?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.input.parent().unwrap_or(Path::new(".")).join("samples.grd"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        make_dir(parent)?;
    }
    let s = stem(&out);
    let dir = out.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut paths = Vec::new();
    for (m, seq) in g.members.iter().enumerate() {
        let p = if m == 0 { out.clone() } else { dir.join(format!("{s}_m{m}.grd")) };
        write_grd1(seq, &p)?;
        paths.push(p);
    }
    if let Some(mean) = &g.mean {
        let p = dir.join(format!("{s}_mean.grd"));
        write_grd1(mean, &p)?;
        paths.push(p);
    }
    log::info!("{} denoiser evaluations per field", g.evaluations_per_field);
    Ok(paths)
}

/// Parses `"i,j;i,j"` grid points.
pub fn parse_points(text: &str) -> Result<Vec<(usize, usize)>> {
    text.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let mut it = s.split(',').map(|v| v.trim().parse::<usize>());
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(i)), Some(Ok(j)), None) => Ok((i, j)),
                _ => Err(Error::Argument(format!("bad point `{s}`, expected `i,j`"))),
            }
        })
        .collect()
}

/// Latest `pred.steps()` frames of `truth`: predictions cover the windows' final steps.
pub fn align_truth(pred: &FieldSequence, truth: &FieldSequence) -> Result<FieldSequence> {
    match truth.steps().checked_sub(pred.steps()) {
        Some(0) => Ok(truth.clone()),
        Some(skip) => truth.window(skip, pred.steps()),
        None => Err(Error::shape(format!(
            "prediction has {} steps, truth only {}",
            pred.steps(),
            truth.steps()
        ))),
    }
}

/// Scores `pred` against the aligned truth and writes the report into `out`.
pub fn cmd_diagnose(
    pred: &Path,
    truth: &Path,
    points: &[(usize, usize)],
    out: &Path,
    k_c: Option<f64>,
    opts: &ScoreOptions,
) -> Result<ScoreCard> {
    require(pred)?;
    require(truth)?;
    let p = read_finite(pred)?;
    let t = align_truth(&p, &read_finite(truth)?)?;
    let (h, w) = (t.meta.n_lat, t.meta.n_lon);
    for &(i, j) in points {
        if i >= h || j >= w {
            return Err(Error::Argument(format!("point ({i}, {j}) outside the {h}x{w} grid")));
        }
    }
    let k_c = k_c.unwrap_or((h.min(w) / 8) as f64);
    let card = spectral_scorecard(&p, &t, points, &default_bands(k_c, h, w), opts)?;
    make_dir(out)?;
    emit_report(&card, out)?;
    Ok(card)
}

/// Band cutoff implied by the pairing filter on the truth grid.
pub fn band_cutoff(cfg: &RunConfig) -> f64 {
    cfg.pairs.filter.cutoff(cfg.synth.n_lat.min(cfg.synth.n_lon))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub mode: DiffusionMode,
    pub n_steps: usize,
    pub n_members: usize,
    pub params: usize,
    pub evaluations_per_field: usize,
    pub wall_seconds: f64,
    pub fields_per_second: f64,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("n_steps,n_members,wall_seconds,fields_per_second\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6},{:.6}\n", r.n_steps, r.n_members, r.wall_seconds, r.fields_per_second));
    }
    s
}

/// Evaluation counts only, so it is reproducible.
pub fn bench_counts_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("mode,n_steps,n_members,params,evaluations_per_field\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.mode.name(),
            r.n_steps,
            r.n_members,
            r.params,
            r.evaluations_per_field
        ));
    }
    s
}

/// Times both diffusion modes over the configured `n_steps x members` grid on the start
/// of the evaluation coarse sequence; correction timings include the mean model.
pub fn cmd_bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let dir = &cfg.output_dir;
    let mean_path = mean_ckpt(dir);
    let paths = [
        mean_path.clone(),
        diff_ckpt(dir, DiffusionMode::Correction),
        diff_ckpt(dir, DiffusionMode::End2end),
    ];
    for p in &paths {
        require(p)?;
    }
    let (mean_net, mean_store) = load_mean(&mean_path)?;
    let input_path = coarse_path(dir, "test_truth");
    let coarse = if input_path.exists() {
        read_finite(&input_path)?
    } else {
        require(&coarse_path(dir, "truth"))?;
        read_finite(coarse_path(dir, "truth"))?
    };
    let frames = cfg.sampler.bench_frames;
    let input = coarse.window(0, (cfg.pairs.t_in + frames - 1).min(coarse.steps()))?;
    let mut rows = Vec::new();
    for mode in [DiffusionMode::Correction, DiffusionMode::End2end] {
        let (net, store, meta) = load_denoiser(&diff_ckpt(dir, mode))?;
        let params = count_params(&store);
        for &n_steps in &cfg.sampler.bench_steps {
            for &members in &cfg.sampler.bench_members {
                let schedule = NoiseSchedule {
                    n_steps,
                    ..cfg.sampler.schedule
                };
                let sampler = SamplerConfig {
                    seed: cfg.seed_for(cfg.sampler.config.seed, stream::SAMPLER),
                    ..cfg.sampler.config
                };
                let mean = (mode == DiffusionMode::Correction).then_some((&mean_net, &mean_store));
                let started = Instant::now();
                let g = generate(mean, (&net, &store, &meta), &input, &schedule, &sampler, members, cfg.sampler.batch)?;
                let wall = started.elapsed().as_secs_f64();
                let fields = g.members.len() * g.members[0].steps();
                rows.push(BenchRow {
                    mode,
                    n_steps,
                    n_members: members,
                    params,
                    evaluations_per_field: g.evaluations_per_field,
                    wall_seconds: wall,
                    fields_per_second: fields as f64 / wall.max(1e-9),
                });
            }
        }
    }
    for mode in [DiffusionMode::Correction, DiffusionMode::End2end] {
        let these: Vec<BenchRow> = rows.iter().filter(|r| r.mode == mode).cloned().collect();
        write_text(dir.join(format!("bench_{}.csv", mode.name())), &bench_csv(&these))?;
    }
    write_text(dir.join("bench_counts.csv"), &bench_counts_csv(&rows))?;
    cfg.write_resolved(dir)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_inconsistent_sections_are_config_errors() {
        for text in [
            r#"{"bogus": 1}"#,
            r#"{"synth": {"n_lat": 64, "typo": 2}}"#,
            r#"{"pairs": {"t_in": 3}}"#,
            r#"{"pairs": {"factor": 5}}"#,
            r#"{"diff_train": {"correction": {"cond_channels": 3}}}"#,
            r#"{"sampler": {"members": 0}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
        let ok = r#"{"pairs": {"t_in": 3}, "mean_train": {"net": {"t_in": 3}}}"#;
        assert_eq!(RunConfig::from_json(ok).unwrap().pairs.t_in, 3);
    }

    #[test]
    fn seeds_follow_the_global_seed() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..a.clone() };
        assert_ne!(a.truth_config().seed, b.truth_config().seed);
        assert_ne!(a.truth_config().seed, a.eval_config().seed);
        assert_eq!(a.truth_config(), RunConfig::default().truth_config());
    }

    #[test]
    fn points_parse() {
        assert_eq!(parse_points("1,2; 30,4").unwrap(), vec![(1, 2), (30, 4)]);
        assert_eq!(parse_points("").unwrap(), vec![]);
        assert!(parse_points("1,2,3").is_err());
        assert!(parse_points("a,b").is_err());
    }

    #[test]
    fn missing_inputs_are_not_found() {
        let err = cmd_bias_correct(Path::new("/nonexistent/a.grd"), Path::new("b"), Path::new("c"), 11).unwrap_err();
        assert!(matches!(err, Error::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound));
    }

    #[test]
    fn truth_alignment_takes_the_tail() {
        let cfg = SynthConfig {
            n_lat: 8,
            n_lon: 8,
            steps: 20,
            ..SynthConfig::default()
        };
        let truth = gen_synthetic(&cfg).unwrap();
        let pred = truth.window(0, 17).unwrap();
        let t = align_truth(&pred, &truth).unwrap();
        assert_eq!(t.frame(0), truth.frame(3));
        assert!(align_truth(&truth, &pred).is_err());
    }
}
