//! `dyncp` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (missing or malformed files), 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dyncp::dsp::{StftConfig, Waveform};
use dyncp::io::{dataset_load, load_weights, save_weights, wav_read, wav_write, RunConfig};
use dyncp::metrics::{activity_map, pruning_stats};
use dyncp::model::{ModelConfig, ModelWeights};
use dyncp::runtime::{
    count_macs_analytic, count_macs_runtime, enhance_offline, static_prune, stream_waveform, ChannelActivity,
    GatingAssumption, InferenceModel, MacCounter, PruneOptions,
};
use dyncp::training::{finetune_dyncp, history_to_jsonl, synth_dataset, train_baseline, utterance_gates, Dataset};
use dyncp::ErrorKind;
use log::info;
use serde_json::json;

#[derive(Parser)]
#[command(name = "dyncp", version, about = "Speech enhancement with dynamic channel pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a baseline model without gating.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines history; defaults to `<out>.history.jsonl`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Add gating to a baseline and train with the ratio penalty.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Enhance a WAV file over the whole utterance.
    Enhance {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        hop: Option<usize>,
        /// Gate pooling: `boxcar` as in training, `iir` as in streaming.
        #[arg(long, value_enum, default_value_t = Pooling::Boxcar)]
        pooling: Pooling,
    },
    /// Enhance a WAV file frame by frame and report the executed MACs.
    Stream {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// MAC report; printed to stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        hop: Option<usize>,
        /// Keep batch norm as a separate step.
        #[arg(long)]
        no_fold: bool,
    },
    /// Count MACs per frame for a config or weights file.
    Profile {
        /// Run config; the default architecture when neither source is given.
        #[arg(long, conflicts_with = "weights")]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Active ratio for the expected count; defaults to the config target.
        #[arg(long)]
        ratio: Option<f64>,
        /// Measure executed MACs on this WAV file (needs `--weights`).
        #[arg(long, requires = "weights")]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Derive static channel roles from calibration data.
    Prune {
        #[arg(long)]
        weights: PathBuf,
        /// Run config naming the calibration data.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also remove rarely active channels and pin nearly always active ones.
        #[arg(long)]
        heuristic: bool,
    },
    /// Gate activity for one WAV file.
    Report {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Channel-by-frame activity matrix of one block.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        block: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Pooling {
    Boxcar,
    Iir,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<dyncp::Error>()).map(|d| d.kind()) {
        Some(ErrorKind::Usage) => 1,
        Some(ErrorKind::Numerical) => 3,
        Some(ErrorKind::Data) => 2,
        None if e.chain().any(|c| c.is::<std::io::Error>() || c.is::<serde_json::Error>()) => 2,
        None => 1,
    }
}

/// Frame size implied by the model's frequency bins, half-overlapped
/// unless `hop` is given.
fn stft_for(cfg: &ModelConfig, hop: Option<usize>) -> Result<StftConfig> {
    if cfg.freq_bins < 2 {
        return Err(dyncp::Error::Config("model needs at least two frequency bins".into()).into());
    }
    let window_length = 2 * (cfg.freq_bins - 1);
    let s = StftConfig {
        window_length,
        hop: hop.unwrap_or(window_length / 2),
        ..StftConfig::default()
    };
    s.validate()?;
    Ok(s)
}

fn load_dataset(run: &RunConfig) -> Result<Dataset> {
    Ok(match (&run.clean_dir, &run.noisy_dir) {
        (Some(c), Some(n)) => dataset_load(c, n)?,
        _ => {
            info!("synthesizing {} pairs of {} s", run.synthetic_pairs, run.synthetic_seconds);
            synth_dataset(run.synthetic_pairs, run.seed, run.synthetic_seconds)?
        }
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit(path: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn history_path(out: &Path, history: Option<PathBuf>) -> PathBuf {
    history.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".history.jsonl");
        PathBuf::from(s)
    })
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, out, history } => {
            let run = RunConfig::load(&config)?;
            let data = load_dataset(&run)?;
            let outcome = train_baseline(&run.train, &data, run.seed)?;
            save_weights(&out, &outcome.weights)?;
            write_text(&history_path(&out, history), &history_to_jsonl(&outcome.history)?)?;
            info!("best epoch {} metric {:.6}", outcome.best_epoch, outcome.best_metric);
        }
        Command::Finetune { config, baseline, out, history } => {
            let run = RunConfig::load(&config)?;
            let base = load_weights(&baseline)?;
            if base.config.gating_enabled {
                return Err(dyncp::Error::Config("--baseline must be a model without gating".into()).into());
            }
            let data = load_dataset(&run)?;
            let mut cfg = run.train.clone();
            cfg.model.gating_enabled = true;
            let outcome = finetune_dyncp(&base, &cfg, &data, run.seed)?;
            save_weights(&out, &outcome.weights)?;
            write_text(&history_path(&out, history), &history_to_jsonl(&outcome.history)?)?;
            info!("best epoch {} metric {:.6}", outcome.best_epoch, outcome.best_metric);
        }
        Command::Enhance { weights, input, output, hop, pooling } => {
            let w = load_weights(&weights)?;
            let stft = stft_for(&w.config, hop)?;
            let x = wav_read(&input)?;
            let mode = match pooling {
                Pooling::Boxcar => w.config.training_pooling(),
                Pooling::Iir => w.config.streaming_pooling(),
            };
            let (y, _) = enhance_offline(&w, &x, &stft, mode)?;
            wav_write(&output, &y)?;
        }
        Command::Stream { weights, input, output, report, hop, no_fold } => {
            let w = load_weights(&weights)?;
            let stft = stft_for(&w.config, hop)?;
            let mut model = InferenceModel::new(w)?;
            if !no_fold {
                model = model.fold_batchnorm()?;
            }
            let x = wav_read(&input)?;
            let (y, run) = stream_waveform(&model, &x, stft, None)?;
            wav_write(&output, &y)?;
            emit(report.as_deref(), &serde_json::to_value(&run.report)?)?;
        }
        Command::Profile { config, weights, ratio, input, output } => profile(config, weights, ratio, input, output)?,
        Command::Prune { weights, config, out, report, heuristic } => {
            let run = RunConfig::load(&config)?;
            let w = load_weights(&weights)?;
            let stft = stft_for(&w.config, None)?;
            let data = load_dataset(&run)?;
            let mut activity = ChannelActivity::new(w.config.total_blocks(), w.config.c_res);
            for pair in &data.pairs {
                if let Some(g) = utterance_gates(&w, pair, &stft)? {
                    activity.add(&g)?;
                }
            }
            let opts = PruneOptions {
                volatile_heuristic: heuristic,
                ..PruneOptions::default()
            };
            let (pruned, rep) = static_prune(&w, &activity, &opts)?;
            save_weights(&out, &pruned)?;
            emit(report.as_deref(), &serde_json::to_value(&rep)?)?;
        }
        Command::Report { weights, input, csv, block, output } => {
            let w = load_weights(&weights)?;
            if !w.config.gating_enabled {
                return Err(dyncp::Error::Config("activity report needs a gated model".into()).into());
            }
            let stft = stft_for(&w.config, None)?;
            let x = wav_read(&input)?;
            let (_, out) = enhance_offline(&w, &x, &stft, w.config.training_pooling())?;
            let gates = out.gates.context("model produced no gates")?;
            if let Some(p) = csv {
                write_text(&p, &activity_map(&gates, block)?.to_csv()?)?;
            }
            emit(output.as_deref(), &serde_json::to_value(pruning_stats(&gates))?)?;
        }
    }
    Ok(())
}

fn profile(
    config: Option<PathBuf>,
    weights: Option<PathBuf>,
    ratio: Option<f64>,
    input: Option<PathBuf>,
    output: Option<PathBuf>,
) -> Result<()> {
    let (model, target, w): (ModelConfig, f64, Option<ModelWeights<f32>>) = match (&config, &weights) {
        (Some(c), _) => {
            let run = RunConfig::load(c)?;
            (run.train.model, run.train.loss.target_ratio, None)
        }
        (None, Some(p)) => {
            let w = load_weights(p)?;
            (w.config.clone(), RunConfig::default().train.loss.target_ratio, Some(w))
        }
        (None, None) => {
            let run = RunConfig::default();
            (run.train.model, run.train.loss.target_ratio, None)
        }
    };
    let ratio = ratio.unwrap_or(target);
    let mut report = json!({
        "static": count_macs_analytic(&model, GatingAssumption::Static)?,
    });
    // The expected count always describes the gated variant of the architecture.
    let gated = ModelConfig {
        gating_enabled: true,
        ..model.clone()
    };
    report["expected"] = serde_json::to_value(count_macs_analytic(&gated, GatingAssumption::Expected(ratio))?)?;
    if let (Some(path), Some(w)) = (input, w) {
        let stft = stft_for(&model, None)?;
        let x: Waveform = wav_read(&path)?;
        let measured = if model.causal {
            let m = InferenceModel::new(w)?.fold_batchnorm()?;
            stream_waveform(&m, &x, stft, None)?.1.report
        } else {
            let (_, out) = enhance_offline(&w, &x, &stft, model.training_pooling())?;
            let mut c = MacCounter::new(model.total_blocks(), model.gating_enabled);
            c.add_offline(&model, 1, out.mask.shape()[2], out.gates.as_ref(), w.roles.as_deref())?;
            count_macs_runtime(&model, &c)?
        };
        report["runtime"] = serde_json::to_value(measured)?;
    }
    emit(output.as_deref(), &report)
}
