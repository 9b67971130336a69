// SPDX-License-Identifier: Apache-2.0

//! `vbse`: batch commands for data synthesis, training, evaluation,
//! ablation and binaural analysis.

mod analyze;
mod commands;
#[cfg(feature = "heatmap")]
mod heatmap;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vbse_core::binaural::ScenarioKind;
use vbse_core::wav::WavFormat;
use vbse_core::Error;

/// Exit status for internal faults.
pub const EXIT_FAULT: u8 = 1;
/// Exit status for bad input files or arguments.
pub const EXIT_INPUT: u8 = 2;
/// Exit status for configuration or checkpoint problems.
pub const EXIT_CONFIG: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "vbse",
    version,
    about = "Speech enhancement through virtual binaural mapping"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write seeded synthetic speech and noise sources.
    MakeSources(MakeSourcesArgs),
    /// Draw a JSON-lines mixture manifest from speech and noise directories.
    MakeManifest(MakeManifestArgs),
    /// Generate a dataset directory from a manifest.
    Synth(SynthArgs),
    /// Write synthetic binaural room impulse responses as stereo WAVs.
    Brir(BrirArgs),
    /// Train a model from a pipeline configuration.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest or a generated dataset.
    Eval(EvalArgs),
    /// Train and score every variant along one ablation axis.
    Ablate(AblateArgs),
    /// PSD ratio and inter-channel phase grids of a left/right pair.
    Analyze(AnalyzeArgs),
    /// Write a freshly initialized or identity-mask checkpoint.
    InitCheckpoint(InitCheckpointArgs),
    /// Print the pipeline configuration JSON schema.
    Schema(SchemaArgs),
}

#[derive(Args, Debug)]
pub struct MakeSourcesArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub n_speech: usize,
    #[arg(long, default_value_t = 3)]
    pub n_noise: usize,
    /// Length of every source in seconds.
    #[arg(long, default_value_t = 4.0)]
    pub seconds: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct MakeManifestArgs {
    #[arg(long)]
    pub speech_dir: PathBuf,
    #[arg(long)]
    pub noise_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value = "antiphasic")]
    pub scenario: ScenarioKind,
    /// SNR draw range in dB as `lo:hi`.
    #[arg(long, default_value = "-15:15", allow_hyphen_values = true)]
    pub snr_range: String,
    /// Speech level draw range in dB as `lo:hi`.
    #[arg(long, default_value = "-35:-15", allow_hyphen_values = true)]
    pub eps_range: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = vbse_core::dataset::DEFAULT_SEGMENT_LEN)]
    pub segment_len: usize,
    #[arg(long, default_value_t = vbse_core::dsp::DEFAULT_SAMPLE_RATE)]
    pub sample_rate: u32,
    #[arg(long, value_enum, default_value = "float32")]
    pub wav_format: WavFormatArg,
    /// Directory of `<scenario>_speech.wav` / `<scenario>_noise.wav` responses.
    #[arg(long)]
    pub brir_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum WavFormatArg {
    Float32,
    Pcm16,
}

impl From<WavFormatArg> for WavFormat {
    fn from(a: WavFormatArg) -> Self {
        match a {
            WavFormatArg::Float32 => WavFormat::Float32,
            WavFormatArg::Pcm16 => WavFormat::Pcm16,
        }
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct BrirArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Write single responses at these azimuths (degrees) instead of the scenario set.
    #[arg(long, allow_hyphen_values = true)]
    pub azimuth: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Report every this many steps on standard error.
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest to generate and score; its data goes to `--data-dir` or `<out-dir>/data`.
    #[arg(long, conflicts_with = "dataset")]
    pub manifest: Option<PathBuf>,
    /// Already generated dataset directory.
    #[arg(long, required_unless_present = "manifest")]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Reject checkpoints whose model differs from this configuration's.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON object of externally computed PESQ scores keyed by utterance id.
    #[arg(long)]
    pub pesq: Option<PathBuf>,
    #[arg(long, default_value = "eval_out")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// ssm_pairs, scenario or component_case.
    #[arg(long)]
    pub axis: vbse_core::train_eval::AblationAxis,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub left: PathBuf,
    #[arg(long)]
    pub right: PathBuf,
    /// Output prefix; an existing directory receives plain file names.
    #[arg(long)]
    pub out_prefix: PathBuf,
    /// Bins within this many dB of the left-channel peak count as active.
    #[arg(long, default_value_t = 40.0)]
    pub active_db: f64,
    /// Also write PNG heatmaps.
    #[arg(long)]
    pub heatmap: bool,
}

#[derive(Args, Debug)]
pub struct InitCheckpointArgs {
    /// Pipeline configuration supplying the model; defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Identity masks everywhere: the network passes its input through.
    #[arg(long)]
    pub identity: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SchemaArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Maps a failure onto the documented exit statuses.
pub fn exit_code(e: &Error) -> u8 {
    if e.is_config_error() {
        EXIT_CONFIG
    } else if e.is_input_error() {
        EXIT_INPUT
    } else {
        EXIT_FAULT
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeSources(a) => commands::make_sources(&a),
        Command::MakeManifest(a) => commands::make_manifest(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Brir(a) => commands::brir(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Analyze(a) => analyze::run(&a),
        Command::InitCheckpoint(a) => commands::init_checkpoint(&a),
        Command::Schema(a) => commands::schema(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
