use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use parafac2::select::Method;
use parafac2::synth::{NoiseMode, SynthSpec};
use parafac2::vb::{Noise, Orthogonality};

#[derive(Debug, Parser)]
#[command(name = "parafac2", version, about = "PARAFAC2 by direct ALS and by variational Bayes", allow_negative_numbers = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Draw a synthetic dataset and write it as a dataset directory.
    Generate(GenerateArgs),
    /// Fit one model to a dataset directory.
    Fit(FitArgs),
    /// Sweep model orders and methods, then apply the selection rules.
    Select(SelectArgs),
    /// Noiseless R2 against SNR for each method.
    SnrStudy(SnrArgs),
    /// Re-run a recorded `run.json`.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NoiseArg {
    Homo,
    Hetero,
}

impl From<NoiseArg> for Noise {
    fn from(n: NoiseArg) -> Noise {
        match n {
            NoiseArg::Homo => Noise::Homo,
            NoiseArg::Hetero => Noise::Hetero,
        }
    }
}

impl From<NoiseArg> for NoiseMode {
    fn from(n: NoiseArg) -> NoiseMode {
        match n {
            NoiseArg::Homo => NoiseMode::Homo,
            NoiseArg::Hetero => NoiseMode::Hetero,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OrthArg {
    Vmf,
    Cmn,
}

impl From<OrthArg> for Orthogonality {
    fn from(o: OrthArg) -> Orthogonality {
        match o {
            OrthArg::Vmf => Orthogonality::Vmf,
            OrthArg::Cmn => Orthogonality::Cmn,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Direct,
    Vb,
}

/// Generator settings shared by `generate`, `select` and `snr-study`; the
/// SNR flag is per command.
#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long = "i", default_value_t = 50)]
    pub i: usize,
    #[arg(long = "j", default_value_t = 50)]
    pub j: usize,
    #[arg(long = "k", default_value_t = 10)]
    pub k: usize,
    /// Number of true components.
    #[arg(long, default_value_t = 4)]
    pub m_true: usize,
    #[arg(long, value_enum, default_value = "homo")]
    pub noise: NoiseArg,
    /// Off-diagonal correlation of the target Gram matrix of F.
    #[arg(long, default_value_t = 0.4)]
    pub offdiag: f64,
    #[arg(long, default_value_t = 0.0)]
    pub c_min: f64,
    #[arg(long, default_value_t = 30.0)]
    pub c_max: f64,
}

impl SynthArgs {
    pub fn spec(&self, snr_db: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            i: self.i,
            j: self.j,
            k: self.k,
            m_true: self.m_true,
            snr_db,
            noise_mode: self.noise.into(),
            offdiag: self.offdiag,
            c_range: (self.c_min, self.c_max),
            seed,
        }
    }
}

/// Optimiser settings shared by the fitting commands.
#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    #[arg(long, default_value_t = 10_000)]
    pub max_iters: usize,
    /// Relative ELBO change that stops a VB run.
    #[arg(long, default_value_t = 1e-9)]
    pub vb_tol: f64,
    /// Relative R2 change that stops a direct fit.
    #[arg(long, default_value_t = 1e-12)]
    pub direct_tol: f64,
    /// Iterations before q(τ) starts updating.
    #[arg(long, default_value_t = 50)]
    pub tau_delay: usize,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub synth: SynthArgs,
    /// Signal-to-noise ratio in dB; `inf` for noiseless data.
    #[arg(long, default_value_t = f64::INFINITY)]
    pub snr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[arg(long, value_enum, default_value = "vmf")]
    pub orth: OrthArg,
    #[arg(long, value_enum, default_value = "hetero")]
    pub noise: NoiseArg,
    #[arg(long)]
    pub components: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Experiment configuration (JSON); replaces every other flag but `--out`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directories; without any, synthetic replicates are drawn.
    #[arg(long)]
    pub data: Vec<PathBuf>,
    #[command(flatten)]
    pub synth: SynthArgs,
    #[arg(long, default_value_t = f64::INFINITY)]
    pub snr: f64,
    /// Synthetic replicates when no `--data` is given.
    #[arg(long, default_value_t = 1)]
    pub replicates: usize,
    /// Comma-separated methods, e.g. `direct,vb-vmf-hetero`.
    #[arg(long, value_delimiter = ',', default_value = "direct,vb-vmf-homo,vb-vmf-hetero,vb-cmn-homo,vb-cmn-hetero")]
    pub methods: Vec<Method>,
    /// Model orders: `lo:hi`, `lo:step:hi` or a comma list.
    #[arg(long, default_value = "1:8")]
    pub components: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SnrArgs {
    #[command(flatten)]
    pub synth: SynthArgs,
    /// SNR grid in dB: `lo:step:hi` or a comma list.
    #[arg(long, default_value = "-20:2:10", allow_hyphen_values = true)]
    pub snr: String,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long, value_delimiter = ',', default_value = "direct,vb-vmf-homo,vb-vmf-hetero,vb-cmn-homo,vb-cmn-hetero")]
    pub methods: Vec<Method>,
    /// Model orders fitted at every SNR level.
    #[arg(long, default_value = "4")]
    pub components: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// A `run.json` written by an earlier command.
    pub run: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
