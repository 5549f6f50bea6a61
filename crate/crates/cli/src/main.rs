//! Command line front end: `train`, `dub`, `eval`, and `inspect-phrases`.
//!
//! Exit codes: 0 on full success, 1 when individual entries failed or a run
//! broke partway, 2 on configuration or schema problems.

use clap::{Parser, Subcommand};
use dubvae::checkpoint::Checkpoint;
use dubvae::corpus::FrameSpec;
use dubvae::evaluation::{FeatureEmbedder, SpectralSummaryEmbedder};
use dubvae::pipeline::{
    inspect_phrases, load_requests, run_dub, run_eval, run_train, DubOptions, EvalRequest,
    RunConfig, RunMode,
};
use dubvae::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dubvae",
    version,
    about = "Phrase-level prosody transfer for dubbing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a corpus manifest.
    Train {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
    },
    /// Synthesize dubbed features for a batch of requests.
    Dub {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON request file naming the source manifest and entries.
        #[arg(long)]
        requests: PathBuf,
        /// Output directory for feature files and outputs.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Inference variant: pvae, gvae, or gvae-pp.  Defaults to the
        /// checkpoint's training mode.
        #[arg(long)]
        variant: Option<String>,
        /// Run a variant whose training mode differs from the checkpoint's.
        #[arg(long)]
        allow_mode_mismatch: bool,
        /// Frames per phoneme for requests without explicit durations.
        #[arg(long, default_value_t = 6)]
        default_duration: usize,
    },
    /// Score a dub output directory.
    Eval {
        /// Directory written by `dub`; metrics.json lands here too.
        #[arg(long)]
        out: PathBuf,
        /// JSONL reference/hypothesis transcripts; enables WER.
        #[arg(long)]
        transcripts: Option<PathBuf>,
        /// Manifest of reference recordings keyed by the dubbed ids.
        #[arg(long)]
        reference_manifest: Option<PathBuf>,
        /// Compute the conditional Fréchet distance over dubbed features.
        #[arg(long)]
        cfdsd: bool,
        /// Feature extractor plug-in; "spectral" is the only built-in.
        #[arg(long)]
        extractor: Option<String>,
        /// Band count for the spectral extractor.
        #[arg(long, default_value_t = 8)]
        bands: usize,
    },
    /// Print the phrase structure of every utterance in a manifest.
    InspectPhrases {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 24_000)]
        sample_rate: u32,
        #[arg(long, default_value_t = 1024)]
        window: usize,
        #[arg(long, default_value_t = 256)]
        hop: usize,
        #[arg(long, default_value_t = 513)]
        bins: usize,
        /// Minimum silence duration that opens a phrase boundary, seconds.
        #[arg(long, default_value_t = 0.05)]
        min_silence: f64,
        /// Silences longer than this are trimmed before segmenting, seconds.
        #[arg(long, default_value_t = 2.0)]
        max_silence: f64,
    },
}

fn parse_variant(name: &str) -> Result<RunMode, Error> {
    match name {
        "pvae" => Ok(RunMode::Pvae),
        "gvae" => Ok(RunMode::Gvae),
        "gvae-pp" => Ok(RunMode::GvaePp),
        other => Err(Error::Config {
            msg: format!("unknown variant `{other}` (expected pvae, gvae, or gvae-pp)"),
        }),
    }
}

fn exit_code_for(e: &Error) -> ExitCode {
    match e {
        Error::Config { .. }
        | Error::ManifestSchema { .. }
        | Error::ManifestParse { .. }
        | Error::Checkpoint { .. }
        | Error::CheckpointVersion { .. }
        | Error::ModeMismatch { .. } => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Train { config } => {
            let config = RunConfig::load(&config)?;
            let outcome = run_train(&config)?;
            println!(
                "trained {} steps, final loss {:.6}",
                outcome.steps, outcome.final_loss.total
            );
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            println!("log: {}", outcome.log_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Dub {
            checkpoint,
            requests,
            out,
            variant,
            allow_mode_mismatch,
            default_duration,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let requests = load_requests(&requests)?;
            let options = DubOptions {
                variant: variant.as_deref().map(parse_variant).transpose()?,
                allow_mode_mismatch,
                default_duration_frames: default_duration,
            };
            let outcome = run_dub(&ckpt, &requests, &out, &options)?;
            for o in &outcome.outputs {
                println!(
                    "{}: {} ({} frames)",
                    o.request_id,
                    o.feature_path.display(),
                    o.num_frames
                );
            }
            for f in &outcome.failures {
                eprintln!("{}: failed: {}", f.request_id, f.message);
            }
            println!(
                "{} ok, {} failed; manifest: {}",
                outcome.outputs.len(),
                outcome.failures.len(),
                outcome.outputs_manifest.display()
            );
            if outcome.failures.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }
        Command::Eval {
            out,
            transcripts,
            reference_manifest,
            cfdsd,
            extractor,
            bands,
        } => {
            let embedder: Option<Box<dyn FeatureEmbedder>> = match extractor.as_deref() {
                None => None,
                Some("spectral") => Some(Box::new(SpectralSummaryEmbedder { bands })),
                Some(other) => {
                    return Err(Error::Config {
                        msg: format!("unknown extractor `{other}` (built-in: spectral)"),
                    })
                }
            };
            let report = run_eval(&EvalRequest {
                out_dir: &out,
                transcripts: transcripts.as_deref(),
                reference_manifest: reference_manifest.as_deref(),
                embedder: embedder.as_deref(),
                want_cfdsd: cfdsd,
            })?;
            if let Some(wer) = report.corpus_wer {
                println!("corpus WER: {wer:.4}");
            }
            if let Some(wer) = report.shortest_quartile_wer {
                println!("shortest-quartile WER: {wer:.4}");
            }
            if let Some(d) = report.cfdsd {
                println!("cFDSD: {d:.6}");
            }
            println!("report: {}", out.join("metrics.json").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::InspectPhrases {
            manifest,
            sample_rate,
            window,
            hop,
            bins,
            min_silence,
            max_silence,
        } => {
            let spec = FrameSpec {
                sample_rate_hz: sample_rate,
                window,
                hop,
                num_bins: bins,
            };
            spec.validate()?;
            let report = inspect_phrases(&manifest, &spec, min_silence, max_silence)?;
            for utterance in &report {
                println!(
                    "{}: {} phrases, {} frames",
                    utterance.utterance_id,
                    utterance.rows.len(),
                    utterance.total_frames
                );
                for row in &utterance.rows {
                    let silence = match row.boundary_silence_s {
                        Some(s) => format!("{s:.3}s"),
                        None => "-".into(),
                    };
                    println!(
                        "  span {}: phonemes [{}, {}) frames [{}, {}) L={} silence {}",
                        row.index,
                        row.phoneme_start,
                        row.phoneme_end,
                        row.frame_start,
                        row.frame_end,
                        row.phoneme_count,
                        silence
                    );
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    // Die quietly when a downstream pipe closes, like any other filter.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
