//! Training loop, evaluation pass, checkpoints and fusion initialization.

mod log;
mod optim;

pub use log::{parse_log, LogEntry, TrainLog};
pub use optim::{clip_global_norm, global_norm, Optimizer, OptimizerKind};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{make_batches, BatchMode, DataError, Dataset, SequenceBatch};
use crate::model::{
    build, init_parameters, sequence_rng, ArchitectureSpec, ModelError, Network, ParamStore, Variant,
};
use crate::objective::{ccc_loss_joint, Aggregator, JointLoss, ObjectiveError};
use crate::postproc::{evaluate, utterance_score, EvalReport, FrameTrack, LabelRanges, PostprocError, UtterancePrediction};
use crate::tensor::{Container, ContainerError, Mode, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training set yields no batches")]
    EmptyTrainingSet,
    #[error("non-finite loss or gradient at step {step}")]
    NonFinite { step: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Postproc(#[from] PostprocError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum InitMode {
    #[default]
    Fresh,
    /// Every tensor from one checkpoint of the same architecture.
    LoadWhole(PathBuf),
    /// Fusion branches from standalone checkpoints; the head starts fresh.
    LoadComponents { a: PathBuf, b: PathBuf },
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitMode::Fresh => "fresh",
            InitMode::LoadWhole(_) => "load-whole",
            InitMode::LoadComponents { .. } => "load-components",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchitectureSpec,
    pub aggregator: Aggregator,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub seq_len: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub init_mode: InitMode,
    pub ranges: LabelRanges,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchitectureSpec::default(),
            aggregator: Aggregator::Median,
            learning_rate: 0.001,
            optimizer: OptimizerKind::Adam,
            batch_size: 4,
            seq_len: 80,
            epochs: 50,
            seed: 0,
            clip_norm: 5.0,
            init_mode: InitMode::Fresh,
            ranges: LabelRanges::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        // 0 is admitted: a null update is a useful invariance check
        if !(0.0..1.0).contains(&self.learning_rate) {
            return Err(TrainError::Config(format!(
                "learning_rate {} outside [0, 1)",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!("batch_size {} below 2", self.batch_size)));
        }
        if self.seq_len == 0 {
            return Err(TrainError::Config("seq_len must be positive".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(TrainError::Config(format!("clip_norm {} must be positive", self.clip_norm)));
        }
        if matches!(self.init_mode, InitMode::LoadComponents { .. }) && self.arch.variant != Variant::Fusion {
            return Err(TrainError::Config("load-components needs variant = fusion".into()));
        }
        self.arch.validate()?;
        Ok(())
    }
}

impl FromStr for InitMode {
    type Err = String;

    /// Only the bare mode; paths are attached separately.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fresh" => Ok(InitMode::Fresh),
            "load-whole" => Ok(InitMode::LoadWhole(PathBuf::new())),
            "load-components" => Ok(InitMode::LoadComponents {
                a: PathBuf::new(),
                b: PathBuf::new(),
            }),
            other => Err(format!(
                "unknown init_mode `{other}` (expected fresh, load-whole or load-components)"
            )),
        }
    }
}

/// Loss and summed parameter gradients of one batch.
pub struct BatchGradients {
    pub loss: JointLoss,
    /// One tensor per parameter, in [`ParamStore`] order.
    pub grads: Vec<Tensor>,
}

/// Forward every sequence, take the joint CCC loss over the batch, and
/// back-propagate each sequence's slice of the loss gradient. Per-sequence
/// gradients are summed in sequence order, so the result does not depend on
/// thread scheduling.
pub fn batch_gradients(
    net: &Network,
    params: &ParamStore,
    batch: &SequenceBatch,
    agg: Aggregator,
    mode: Mode,
    seed: u64,
    step: u64,
) -> Result<BatchGradients, TrainError> {
    let forwards = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = sequence_rng(seed, step, i as u64);
            net.forward(params, &batch.sequence_frames(i), mode, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let steps = batch.steps();
    let mut preds = Vec::with_capacity(batch.len() * steps * 2);
    for f in &forwards {
        preds.extend_from_slice(f.graph.value(f.output()).data());
    }
    let preds = Tensor::new(vec![batch.len(), steps, 2], preds).map_err(ModelError::from)?;
    let loss = ccc_loss_joint(&preds, &batch.labels, agg, Some(&batch.pad_mask))?;

    let per_sequence = forwards
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let seed = Tensor::new(vec![steps, 2], loss.grad.slab(i).to_vec()).map_err(ModelError::from)?;
            let mut g = f.graph.backward_seeded(f.output(), seed).map_err(ModelError::from)?;
            Ok(f.params.iter().map(|&p| g.take(p)).collect::<Vec<Option<Tensor>>>())
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for seq in per_sequence {
        for (acc, g) in grads.iter_mut().zip(seq) {
            if let Some(g) = g {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
        }
    }
    Ok(BatchGradients { loss, grads })
}

/// Per-frame predictions for every utterance of `ds`, in eval mode.
///
/// Where windows overlap, a frame keeps the prediction of the first window
/// that covered it. Tracks therefore have one entry per utterance frame.
pub fn predict_tracks(net: &Network, params: &ParamStore, ds: &Dataset) -> Result<Vec<FrameTrack>, TrainError> {
    let outputs = (0..ds.windows.len())
        .into_par_iter()
        .map(|wi| {
            let batch = ds.batch(&[wi]);
            let mut rng = sequence_rng(0, 0, 0);
            let fwd = net.forward(params, &batch.sequence_frames(0), Mode::Eval, &mut rng)?;
            Ok(fwd.graph.value(fwd.output()).clone())
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let mut tracks: Vec<(Vec<[f64; 2]>, Vec<bool>)> = ds
        .utterances
        .iter()
        .map(|u| (vec![[0.0; 2]; u.frame_count], vec![false; u.frame_count]))
        .collect();
    for (wi, out) in outputs.iter().enumerate() {
        let w = &ds.windows[wi];
        let (values, seen) = &mut tracks[ds.window_owner[wi]];
        for (t, (&frame, &pad)) in w.frames.iter().zip(&w.pad_mask).enumerate() {
            if !pad && !seen[frame] {
                values[frame] = [out.data()[2 * t], out.data()[2 * t + 1]];
                seen[frame] = true;
            }
        }
    }
    Ok(ds
        .utterances
        .iter()
        .zip(tracks)
        .map(|(u, (values, _))| FrameTrack::new(u.id.clone(), values))
        .collect())
}

/// Utterance-level CCC of a parameter set on `ds`: eval-mode tracks,
/// aggregated per utterance, against the utterance labels.
pub fn evaluate_dataset(
    net: &Network,
    params: &ParamStore,
    ds: &Dataset,
    agg: Aggregator,
    ranges: &LabelRanges,
) -> Result<EvalReport, TrainError> {
    let tracks = predict_tracks(net, params, ds)?;
    let preds = tracks
        .iter()
        .map(|t| utterance_score(t, agg, ranges))
        .collect::<Result<Vec<_>, _>>()?;
    let gold: Vec<UtterancePrediction> = ds
        .utterances
        .iter()
        .map(|u| UtterancePrediction::new(u.id.clone(), u.valence, u.arousal))
        .collect();
    Ok(evaluate(&preds, &gold)?)
}

/// Fusion network with branch parameters taken from standalone checkpoints.
/// Branches left as `None`, and the joint head, keep their seeded
/// initialization.
pub fn init_fusion(
    cfg: &TrainConfig,
    checkpoint_a: Option<&Container>,
    checkpoint_b: Option<&Container>,
) -> Result<(Network, ParamStore), TrainError> {
    if cfg.arch.variant != Variant::Fusion {
        return Err(TrainError::Config("init_fusion needs variant = fusion".into()));
    }
    let net = build(&cfg.arch)?;
    let mut params = init_parameters(&net, cfg.seed);
    if let Some(c) = checkpoint_a {
        params.load_prefixed(c, "fusion.a.")?;
    }
    if let Some(c) = checkpoint_b {
        params.load_prefixed(c, "fusion.b.")?;
    }
    Ok((net, params))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub ccc_valence: f64,
    pub ccc_arousal: f64,
}

/// Checkpoint attribute holding the training window length.
pub const SEQ_LEN_ATTR: &str = "train.seq_len";

/// Parameters, optimizer state and log of one training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: Network,
    pub params: ParamStore,
    optimizer: Optimizer,
    step: u64,
    epoch: usize,
    pub log: TrainLog,
    best: Option<(f64, ParamStore)>,
}

fn load_container(path: &Path) -> Result<Container, TrainError> {
    Ok(Container::load(path)?)
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let (net, params) = match &cfg.init_mode {
            InitMode::Fresh => {
                let net = build(&cfg.arch)?;
                let params = init_parameters(&net, cfg.seed);
                (net, params)
            }
            InitMode::LoadWhole(path) => {
                let net = build(&cfg.arch)?;
                let params = ParamStore::from_container(&net, &load_container(path)?)?;
                (net, params)
            }
            InitMode::LoadComponents { a, b } => {
                let (ca, cb) = (load_container(a)?, load_container(b)?);
                init_fusion(&cfg, Some(&ca), Some(&cb))?
            }
        };
        Ok(Self::with_parameters(cfg, net, params))
    }

    pub fn with_parameters(cfg: TrainConfig, net: Network, params: ParamStore) -> Self {
        let optimizer = Optimizer::new(cfg.optimizer, &params);
        Self {
            cfg,
            net,
            params,
            optimizer,
            step: 0,
            epoch: 0,
            log: TrainLog::default(),
            best: None,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One optimizer update on `batch`, with dropout active.
    pub fn train_step(&mut self, batch: &SequenceBatch) -> Result<StepReport, TrainError> {
        let step = self.step + 1;
        let BatchGradients { loss, mut grads } = batch_gradients(
            &self.net,
            &self.params,
            batch,
            self.cfg.aggregator,
            Mode::Train,
            self.cfg.seed,
            step,
        )?;
        let grad_norm = clip_global_norm(&mut grads, self.cfg.clip_norm);
        if !loss.value.is_finite() || !grad_norm.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        self.optimizer.step(&mut self.params, &grads, self.cfg.learning_rate);
        self.step = step;
        self.log.entries.push(LogEntry::Step { step, loss: loss.value });
        Ok(StepReport {
            step,
            loss: loss.value,
            grad_norm,
        })
    }

    /// One pass over shuffled training batches, then an eval-mode pass over
    /// `val` (or the training set when `val` is `None`).
    pub fn run_epoch(&mut self, train: &Dataset, val: Option<&Dataset>) -> Result<EpochReport, TrainError> {
        let started = Instant::now();
        let epoch = self.epoch + 1;
        let order_seed = self.cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let batches = make_batches(train.windows.len(), self.cfg.batch_size, order_seed, BatchMode::Train)?;
        if batches.is_empty() {
            return Err(TrainError::EmptyTrainingSet);
        }
        let mut total = 0.0;
        for idx in &batches {
            total += self.train_step(&train.batch(idx))?.loss;
        }
        let report = evaluate_dataset(
            &self.net,
            &self.params,
            val.unwrap_or(train),
            self.cfg.aggregator,
            &self.cfg.ranges,
        )?;
        self.epoch = epoch;
        self.log.entries.push(LogEntry::Epoch {
            epoch,
            ccc_v: report.ccc_valence,
            ccc_a: report.ccc_arousal,
        });
        let score = report.ccc_valence + report.ccc_arousal;
        if self.best.as_ref().is_none_or(|(b, _)| score > *b) {
            self.best = Some((score, self.params.clone()));
        }
        self.log.wall_seconds += started.elapsed().as_secs_f64();
        Ok(EpochReport {
            epoch,
            mean_loss: total / batches.len() as f64,
            ccc_valence: report.ccc_valence,
            ccc_arousal: report.ccc_arousal,
        })
    }

    /// Parameters of the epoch with the highest summed validation CCC.
    pub fn best_params(&self) -> &ParamStore {
        self.best.as_ref().map_or(&self.params, |(_, p)| p)
    }

    pub fn checkpoint(&self, params: &ParamStore) -> Result<Container, TrainError> {
        let mut c = params.to_container(&self.net)?;
        c.set_attr("train.step", &self.step.to_string())?;
        c.set_attr("train.epoch", &self.epoch.to_string())?;
        c.set_attr(SEQ_LEN_ATTR, &self.cfg.seq_len.to_string())?;
        Ok(c)
    }

    /// Write `best.ckpt`, `last.ckpt` and `train.log` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        self.checkpoint(self.best_params())?.save(&dir.join("best.ckpt"))?;
        self.checkpoint(&self.params)?.save(&dir.join("last.ckpt"))?;
        let path = dir.join("train.log");
        std::fs::write(&path, self.log.to_text()).map_err(|source| TrainError::Io { path, source })
    }
}

/// Run `cfg.epochs` epochs, writing checkpoints and the log into `out` after
/// each one. Returns the trainer for inspection.
pub fn train(cfg: TrainConfig, train_set: &Dataset, val: Option<&Dataset>, out: Option<&Path>) -> Result<Trainer, TrainError> {
    if train_set.windows.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut trainer = Trainer::new(cfg)?;
    for _ in 0..trainer.cfg.epochs {
        let result = trainer.run_epoch(train_set, val);
        if let Some(dir) = out {
            trainer.save(dir)?;
        }
        result?;
    }
    Ok(trainer)
}
