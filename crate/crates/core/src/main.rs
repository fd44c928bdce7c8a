use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::{ContextKind, ContextValue, ErrorKind};
use clap::{Parser, Subcommand, ValueEnum};

use windscale::diagnostics::ScoreOptions;
use windscale::edm::DiffusionMode;
use windscale::pipeline::{self, RunConfig, SampleArgs};
use windscale::spectral::FilterSpec;
use windscale::Error;

/// Downscale coarse wind fields with a mean model plus a correction diffusion model.
#[derive(Parser)]
#[command(name = "windscale", version)]
struct Cli {
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum FilterKind {
    Spectral,
    Wavelet,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Correction,
    End2end,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate truth, evaluation truth and biased coarse-model sequences.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Coarsen a truth sequence into model inputs.
    MakePairs {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long = "t-in")]
        t_in: usize,
        #[arg(long)]
        factor: usize,
        #[arg(long, value_enum)]
        filter: FilterKind,
        /// Cutoff wavenumber (spectral) or number of levels (wavelet).
        #[arg(long)]
        cutoff: f64,
        /// Output directory; the truth file's directory by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the mean model on the paired data in the config's output directory.
    TrainMean {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a diffusion model on residuals (correction) or on full fields (end2end).
    TrainDiff {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
    },
    /// Quantile-map a coarse sequence onto a target distribution.
    BiasCorrect {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        levels: usize,
    },
    /// Downscale a coarse sequence.
    Sample {
        #[arg(long = "mean-ckpt")]
        mean_ckpt: Option<PathBuf>,
        #[arg(long = "diff-ckpt")]
        diff_ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        members: usize,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        seed: u64,
        /// Rows per denoiser call.
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Output path; `samples.grd` beside the input by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against truth and write the report directory.
    Diagnose {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Grid points for temporal spectra, as `i,j;i,j`.
        #[arg(long, default_value = "")]
        points: String,
        #[arg(long)]
        out: PathBuf,
        /// Band split wavenumber; taken from the config's pairing filter, else a quarter of Nyquist.
        #[arg(long)]
        cutoff: Option<f64>,
        /// Run config supplying score options and the band split.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Time both sampling modes over the configured steps x members grid.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
}

fn category(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ("missing_file", 2),
        Error::Config(_) | Error::Argument(_) => ("config", 3),
        Error::Numeric(_) => ("numeric", 4),
        Error::Io { .. } => ("io", 1),
        Error::Format { .. } => ("format", 1),
        Error::Shape(_) => ("shape", 1),
        Error::State(_) | Error::MissingGradient(_) => ("internal", 1),
    }
}

fn filter_spec(kind: FilterKind, cutoff: f64) -> windscale::Result<FilterSpec> {
    Ok(match kind {
        FilterKind::Spectral => FilterSpec::SpectralCutoff { k_c: cutoff },
        FilterKind::Wavelet => {
            if cutoff.fract() != 0.0 || !(1.0..=16.0).contains(&cutoff) {
                return Err(Error::Argument(format!("wavelet --cutoff is a level count, got {cutoff}")));
            }
            FilterSpec::LiftingWavelet { levels: cutoff as u32 }
        }
    })
}

fn run(cmd: Cmd) -> windscale::Result<()> {
    match cmd {
        Cmd::GenData { config, out } => {
            let cfg = RunConfig::load(&config)?;
            pipeline::cmd_gen_data(&cfg, &out)?;
        }
        Cmd::MakePairs {
            truth,
            t_in,
            factor,
            filter,
            cutoff,
            out,
        } => {
            pipeline::cmd_make_pairs(&truth, t_in, factor, filter_spec(filter, cutoff)?, out.as_deref())?;
        }
        Cmd::TrainMean { config } => {
            pipeline::cmd_train_mean(&RunConfig::load(&config)?)?;
        }
        Cmd::TrainDiff { config, mode } => {
            let mode = match mode {
                Mode::Correction => DiffusionMode::Correction,
                Mode::End2end => DiffusionMode::End2end,
            };
            pipeline::cmd_train_diff(&RunConfig::load(&config)?, mode)?;
        }
        Cmd::BiasCorrect {
            source,
            target,
            out,
            levels,
        } => {
            pipeline::cmd_bias_correct(&source, &target, &out, levels)?;
        }
        Cmd::Sample {
            mean_ckpt,
            diff_ckpt,
            input,
            members,
            steps,
            seed,
            batch,
            out,
        } => {
            pipeline::cmd_sample(&SampleArgs {
                mean_ckpt,
                diff_ckpt,
                input,
                members,
                steps,
                seed,
                batch,
                out,
            })?;
        }
        Cmd::Diagnose {
            pred,
            truth,
            points,
            out,
            cutoff,
            config,
        } => {
            let points = pipeline::parse_points(&points)?;
            let (k_c, opts) = match config {
                Some(c) => {
                    let cfg = RunConfig::load(&c)?;
                    (cutoff.or(Some(pipeline::band_cutoff(&cfg))), cfg.diagnostics.score)
                }
                None => (cutoff, ScoreOptions::default()),
            };
            pipeline::cmd_diagnose(&pred, &truth, &points, &out, k_c, &opts)?;
        }
        Cmd::Bench { config } => {
            for r in pipeline::cmd_bench(&RunConfig::load(&config)?)? {
                log::info!(
                    "{} n_steps {} members {}: {:.3} fields/s",
                    r.mode.name(),
                    r.n_steps,
                    r.n_members,
                    r.fields_per_second
                );
            }
        }
    }
    Ok(())
}

fn usage_error(e: &clap::Error) -> String {
    if e.kind() == ErrorKind::UnknownArgument {
        if let Some(ContextValue::String(flag)) = e.get(ContextKind::InvalidArg) {
            return format!("unknown flag `{flag}`");
        }
    }
    let text = e.to_string();
    let line = text.lines().next().unwrap_or("invalid arguments");
    line.trim_start_matches("error: ").to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                let _ = e.print();
                eprintln!("error: config: missing subcommand");
                return ExitCode::from(3);
            }
            _ => {
                eprintln!("error: config: {}", usage_error(&e));
                return ExitCode::from(3);
            }
        },
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: config: --threads must be >= 1");
            return ExitCode::from(3);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: internal: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (cat, code) = category(&e);
            eprintln!("error: {cat}: {}", e.to_string().replace('\n', " "));
            ExitCode::from(code)
        }
    }
}
