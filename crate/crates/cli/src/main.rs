//! `affectkit` command line: synth, train, predict, postprocess, eval, plot.
//!
//! Exit codes: 0 success, 2 argument or configuration error, 3 data error,
//! 4 numerical failure during training.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use affectkit::config::{Config, ConfigError};
use affectkit::data::{load_manifest, parse_manifest, synth_corpus, DataError, Dataset, SynthConfig, SynthFormat};
use affectkit::model::{build, spec_from_container, ModelError, ParamStore};
use affectkit::plot::{training_report, PlotError};
use affectkit::postproc::{
    evaluate, parse_predictions, run_postprocess, tracks_from_container, tracks_to_container, write_predictions,
    PostprocError, UtterancePrediction,
};
use affectkit::tensor::{Container, ContainerError};
use affectkit::trainer::{parse_log, predict_tracks, train, TrainError, SEQ_LEN_ATTR};

const THREADS_VAR: &str = "AFFECTKIT_THREADS";

#[derive(Parser)]
#[command(name = "affectkit", version, about = "Valence/arousal estimation from face-frame sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Png,
    Raw,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic labelled corpus (manifest.csv plus frames)
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        utterances: usize,
        /// Frame side in pixels
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        frames_min: usize,
        #[arg(long, default_value_t = 200)]
        frames_max: usize,
        /// Uniform pixel noise amplitude in grey levels
        #[arg(long, default_value_t = 8.0)]
        noise: f64,
        #[arg(long, default_value_t = 4)]
        per_video: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, value_enum, default_value = "png")]
        format: FormatArg,
    },
    /// Train a network; writes best.ckpt, last.ckpt, train.log and train.cfg into --out
    Train {
        /// key = value configuration; every key defaults (see README)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training manifest
        #[arg(long)]
        train: PathBuf,
        /// Validation manifest [default: evaluate on the training set]
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override train.epochs [default: 50]
        #[arg(long)]
        epochs: Option<usize>,
        /// Override train.seed [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// Override any key, as section.key=value (repeatable)
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Per-frame predictions for every utterance of a manifest
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output track container
        #[arg(long)]
        out: PathBuf,
        /// Window length [default: the checkpoint's training length, else 80]
        #[arg(long)]
        seq_len: Option<usize>,
    },
    /// Median filtering, utterance scoring and short-utterance smoothing
    Postprocess {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Configuration file; only [postproc] and [data] are used
        #[arg(long)]
        config: Option<PathBuf>,
        /// Valence median window [default: 81]
        #[arg(long)]
        window_valence: Option<usize>,
        /// Arousal median window [default: 3]
        #[arg(long)]
        window_arousal: Option<usize>,
        /// Frame-to-utterance aggregator, mean or median [default: median]
        #[arg(long)]
        agg: Option<String>,
        /// Skip short-utterance smoothing [default: smoothing on]
        #[arg(long)]
        no_smoothing: bool,
        /// Gold manifest; each step is kept only if it does not lower CCC [default: keep every step]
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// CCC of utterance predictions against manifest labels
    Eval {
        #[arg(long)]
        preds: PathBuf,
        /// Manifest holding the gold labels
        #[arg(long)]
        gold: PathBuf,
        /// Structured JSON report [default: <preds>.report.json]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// SVG training curves, plus a prediction-vs-gold scatter with --preds and --gold
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, requires = "gold")]
        preds: Option<PathBuf>,
        #[arg(long, requires = "preds")]
        gold: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl ToString) -> Self {
        Self {
            code: 2,
            message: message.to_string(),
        }
    }

    fn data(message: impl ToString) -> Self {
        Self {
            code: 3,
            message: message.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::usage(e)
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Self::data(e)
    }
}

impl From<PostprocError> for Failure {
    fn from(e: PostprocError) -> Self {
        Self::data(e)
    }
}

impl From<ContainerError> for Failure {
    fn from(e: ContainerError) -> Self {
        Self::data(e)
    }
}

impl From<PlotError> for Failure {
    fn from(e: PlotError) -> Self {
        Self::data(e)
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Self::data(e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::NonFinite { .. } => 4,
            TrainError::Config(_) | TrainError::Model(ModelError::Spec(_)) => 2,
            _ => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<Config, Failure> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            Config::parse(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))
        }
        None => Ok(Config::default()),
    }
}

/// `<dir of out>/<command>.cfg`, the effective configuration of one command.
fn echo_config(out: &Path, command: &str, cfg: &Config) -> Result<(), Failure> {
    let dir = out.parent().unwrap_or(Path::new(""));
    write(&dir.join(format!("{command}.cfg")), cfg.to_text())
}

fn gold_labels(path: &Path) -> Result<Vec<UtterancePrediction>, Failure> {
    Ok(parse_manifest(&read(path)?)?
        .into_iter()
        .map(|r| UtterancePrediction::new(r.id, r.valence, r.arousal))
        .collect())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth {
            out,
            utterances,
            side,
            seed,
            frames_min,
            frames_max,
            noise,
            per_video,
            channels,
            format,
        } => {
            let cfg = SynthConfig {
                utterances,
                frames_min,
                frames_max,
                side,
                channels,
                seed,
                noise,
                per_video,
                format: match format {
                    FormatArg::Png => SynthFormat::Png,
                    FormatArg::Raw => SynthFormat::Raw,
                },
                ..SynthConfig::default()
            };
            if utterances == 0 || !(channels == 1 || channels == 3) || noise.is_nan() || noise < 0.0 {
                return Err(Failure::usage("need utterances > 0, channels 1 or 3 and noise >= 0"));
            }
            let utts = synth_corpus(&out, &cfg).map_err(|e| match e {
                DataError::Manifest(m) => Failure::usage(m),
                other => other.into(),
            })?;
            println!("wrote {} utterances to {}", utts.len(), out.join("manifest.csv").display());
        }
        Command::Train {
            config,
            train: train_manifest,
            val,
            out,
            epochs,
            seed,
            overrides,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.set("train.epochs", &e.to_string())?;
            }
            if let Some(s) = seed {
                cfg.set("train.seed", &s.to_string())?;
            }
            for o in &overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| Failure::usage(format!("--set expects SECTION.KEY=VALUE, got `{o}`")))?;
                cfg.set(k.trim(), v)?;
            }
            let tc = cfg.train_config()?;
            tc.validate()?;
            fs::create_dir_all(&out).map_err(|e| Failure::data(format!("{}: {e}", out.display())))?;
            echo_config(&out.join("train.log"), "train", &cfg)?;
            let load = |m: &Path| -> Result<Dataset, Failure> {
                Ok(Dataset::load(load_manifest(m)?, tc.arch.input_side, tc.arch.channels, tc.seq_len)?)
            };
            let train_set = load(&train_manifest)?;
            let val_set = val.as_deref().map(load).transpose()?;
            let trainer = train(tc, &train_set, val_set.as_ref(), Some(&out))?;
            if let Some(last) = trainer.log.entries.last() {
                println!("{last}");
            }
            eprintln!(
                "{} steps, {} epochs in {:.1}s",
                trainer.steps_taken(),
                trainer.epochs_done(),
                trainer.log.wall_seconds
            );
        }
        Command::Predict {
            checkpoint,
            manifest,
            out,
            seq_len,
        } => {
            let c = Container::load(&checkpoint)?;
            let spec = spec_from_container(&c)?;
            let net = build(&spec)?;
            let params = ParamStore::from_container(&net, &c)?;
            let steps = match seq_len {
                Some(t) => t,
                None => match c.attr(SEQ_LEN_ATTR) {
                    Some(v) => v
                        .parse()
                        .map_err(|_| Failure::data(format!("checkpoint attribute {SEQ_LEN_ATTR} = `{v}`")))?,
                    None => 80,
                },
            };
            if steps == 0 {
                return Err(Failure::usage("--seq-len must be positive"));
            }
            let mut cfg = Config {
                arch: spec.clone(),
                ..Config::default()
            };
            cfg.set("train.seq_len", &steps.to_string())?;
            let ds = Dataset::load(load_manifest(&manifest)?, spec.input_side, spec.channels, steps)?;
            let tracks = predict_tracks(&net, &params, &ds)?;
            tracks_to_container(&tracks)?.save(&out)?;
            echo_config(&out, "predict", &cfg)?;
            println!("wrote {} tracks to {}", tracks.len(), out.display());
        }
        Command::Postprocess {
            tracks,
            out,
            config,
            window_valence,
            window_arousal,
            agg,
            no_smoothing,
            gold,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(w) = window_valence {
                cfg.set("postproc.window_valence", &w.to_string())?;
            }
            if let Some(w) = window_arousal {
                cfg.set("postproc.window_arousal", &w.to_string())?;
            }
            if let Some(a) = &agg {
                cfg.set("postproc.aggregator", a)?;
            }
            if no_smoothing {
                cfg.set("postproc.smoothing", "false")?;
            }
            for (flag, w) in [("--window-valence", cfg.postproc.window_valence), ("--window-arousal", cfg.postproc.window_arousal)] {
                if w.is_multiple_of(2) {
                    return Err(Failure::usage(format!("{flag} must be odd, got {w}")));
                }
            }
            let tracks = tracks_from_container(&Container::load(&tracks)?)?;
            let gold = gold.as_deref().map(gold_labels).transpose()?;
            let outcome = run_postprocess(&tracks, &cfg.postproc_config(), gold.as_deref())?;
            for d in &outcome.decisions {
                if let (Some(b), Some(a)) = (d.ccc_before, d.ccc_after) {
                    eprintln!(
                        "{} {}: {b:.6} -> {a:.6} {}",
                        d.step,
                        d.dimension,
                        if d.kept { "kept" } else { "dropped" }
                    );
                }
            }
            write(&out, write_predictions(&outcome.predictions))?;
            echo_config(&out, "postprocess", &cfg)?;
            println!("wrote {} predictions to {}", outcome.predictions.len(), out.display());
        }
        Command::Eval { preds, gold, out } => {
            let p = parse_predictions(&read(&preds)?)?;
            let g = gold_labels(&gold)?;
            let report = evaluate(&p, &g)?;
            let out = out.unwrap_or_else(|| preds.with_extension("report.json"));
            write(&out, report.to_json())?;
            print!("{}", report.to_text());
        }
        Command::Plot { log, out, preds, gold } => {
            let parsed = parse_log(&read(&log)?).map_err(Failure::data)?;
            let scatter = match (preds, gold) {
                (Some(p), Some(g)) => Some((parse_predictions(&read(&p)?)?, gold_labels(&g)?)),
                _ => None,
            };
            let svg = training_report(&parsed, scatter.as_ref().map(|(p, g)| (p.as_slice(), g.as_slice())))?;
            write(&out, svg)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("{THREADS_VAR} must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
