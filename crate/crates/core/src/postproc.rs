//! Post-processing of per-frame predictions: median filtering, utterance
//! scoring, short-utterance smoothing, CCC evaluation, and the runner that
//! keeps a step only when it does not hurt validation CCC.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::objective::{aggregate_with_weights, ccc, Aggregator, ObjectiveError};
use crate::tensor::{Container, ContainerError, Tensor};

#[derive(Debug, Error)]
pub enum PostprocError {
    #[error("median window must be odd, got {0}")]
    EvenWindow(usize),
    #[error("utterance `{0}` has no unmasked frames")]
    AllMasked(String),
    #[error("prediction ids do not match gold ids; missing: {missing:?}; extra: {extra:?}")]
    IdMismatch { missing: Vec<String>, extra: Vec<String> },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("track `{id}`: {reason}")]
    Track { id: String, reason: String },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Per-frame (valence, arousal) predictions for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTrack {
    pub id: String,
    pub values: Vec<[f64; 2]>,
    /// `true` marks a padding frame, excluded from every statistic.
    pub pad_mask: Vec<bool>,
}

impl FrameTrack {
    pub fn new(id: impl Into<String>, values: Vec<[f64; 2]>) -> Self {
        let pad_mask = vec![false; values.len()];
        Self {
            id: id.into(),
            values,
            pad_mask,
        }
    }

    pub fn live_frames(&self) -> usize {
        self.pad_mask.iter().filter(|m| !**m).count()
    }

    fn column(&self, dim: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[dim]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UtterancePrediction {
    pub id: String,
    pub valence: f64,
    pub arousal: f64,
}

impl UtterancePrediction {
    pub fn new(id: impl Into<String>, valence: f64, arousal: f64) -> Self {
        Self {
            id: id.into(),
            valence,
            arousal,
        }
    }

    pub fn get(&self, dim: usize) -> f64 {
        if dim == 0 {
            self.valence
        } else {
            self.arousal
        }
    }

    fn set(&mut self, dim: usize, v: f64) {
        if dim == 0 {
            self.valence = v
        } else {
            self.arousal = v
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LabelRanges {
    pub valence: (f64, f64),
    pub arousal: (f64, f64),
}

impl Default for LabelRanges {
    fn default() -> Self {
        Self {
            valence: (-1.0, 1.0),
            arousal: (0.0, 1.0),
        }
    }
}

impl LabelRanges {
    fn clamp(&self, dim: usize, v: f64) -> f64 {
        let (lo, hi) = if dim == 0 { self.valence } else { self.arousal };
        v.clamp(lo, hi)
    }
}

/// Centered running median with replicate-edge padding.
///
/// A window longer than the signal shrinks to the largest odd length that
/// fits. The window is kept as a sorted buffer and updated by one removal and
/// one insertion per step.
pub fn median_filter(signal: &[f64], window: usize) -> Result<Vec<f64>, PostprocError> {
    if window.is_multiple_of(2) {
        return Err(PostprocError::EvenWindow(window));
    }
    let n = signal.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let window = if window > n { n - (1 - n % 2) } else { window };
    let half = (window / 2) as isize;
    let at = |i: isize| signal[i.clamp(0, n as isize - 1) as usize];

    let mut sorted: Vec<f64> = (-half..=half).map(at).collect();
    sorted.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(n);
    out.push(sorted[half as usize]);
    for i in 1..n as isize {
        let leaving = at(i - 1 - half);
        let pos = sorted.partition_point(|v| v.total_cmp(&leaving).is_lt());
        sorted.remove(pos);
        let entering = at(i + half);
        let pos = sorted.partition_point(|v| v.total_cmp(&entering).is_lt());
        sorted.insert(pos, entering);
        out.push(sorted[half as usize]);
    }
    Ok(out)
}

/// Filter each dimension over the unmasked frames; masked frames keep their values.
pub fn filter_track(
    track: &FrameTrack,
    window_valence: usize,
    window_arousal: usize,
) -> Result<FrameTrack, PostprocError> {
    let live: Vec<usize> = (0..track.values.len()).filter(|&i| !track.pad_mask[i]).collect();
    let mut out = track.clone();
    for (dim, window) in [(0, window_valence), (1, window_arousal)] {
        let signal: Vec<f64> = live.iter().map(|&i| track.values[i][dim]).collect();
        let filtered = median_filter(&signal, window)?;
        for (&i, v) in live.iter().zip(filtered) {
            out.values[i][dim] = v;
        }
    }
    Ok(out)
}

/// Aggregate the unmasked frames of a track into one clamped prediction.
pub fn utterance_score(
    track: &FrameTrack,
    agg: Aggregator,
    ranges: &LabelRanges,
) -> Result<UtterancePrediction, PostprocError> {
    let mut pred = UtterancePrediction::new(track.id.clone(), 0.0, 0.0);
    for dim in 0..2 {
        let (v, _) = aggregate_with_weights(&track.column(dim), Some(&track.pad_mask), agg)
            .map_err(|_| PostprocError::AllMasked(track.id.clone()))?;
        pred.set(dim, ranges.clamp(dim, v));
    }
    Ok(pred)
}

/// Ids of the form `<video>/<utterance>` group by video; an id without a
/// slash is its own video.
pub fn video_of(id: &str) -> &str {
    id.rsplit_once('/').map_or(id, |(v, _)| v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SmoothingConfig {
    pub min_frames: usize,
    pub alpha: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            min_frames: 16,
            alpha: 0.5,
        }
    }
}

/// Blend each utterance shorter than `min_frames` with the mean of its
/// adjacent utterances from the same video:
/// `alpha · own + (1 - alpha) · mean(neighbours)`.
///
/// `preds` must be in video order; `frame_counts[i]` belongs to `preds[i]`.
/// Neighbour values are read from the unsmoothed input.
pub fn smooth_short_utterances(
    preds: &[UtterancePrediction],
    frame_counts: &[usize],
    cfg: SmoothingConfig,
) -> Vec<UtterancePrediction> {
    assert_eq!(preds.len(), frame_counts.len(), "one frame count per prediction");
    let mut out = preds.to_vec();
    for i in 0..preds.len() {
        if frame_counts[i] >= cfg.min_frames {
            continue;
        }
        let video = video_of(&preds[i].id);
        let neighbours: Vec<&UtterancePrediction> = [i.checked_sub(1), Some(i + 1)]
            .into_iter()
            .flatten()
            .filter_map(|j| preds.get(j))
            .filter(|p| video_of(&p.id) == video)
            .collect();
        if neighbours.is_empty() {
            continue;
        }
        for dim in 0..2 {
            let mean = neighbours.iter().map(|p| p.get(dim)).sum::<f64>() / neighbours.len() as f64;
            out[i].set(dim, cfg.alpha * preds[i].get(dim) + (1.0 - cfg.alpha) * mean);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub ccc_valence: f64,
    pub ccc_arousal: f64,
    pub utterances: usize,
    /// Echo of the settings that produced the predictions, in insertion order.
    pub settings: Vec<(String, String)>,
}

impl EvalReport {
    pub fn with_setting(mut self, key: &str, value: impl ToString) -> Self {
        self.settings.push((key.to_string(), value.to_string()));
        self
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "ccc_valence={:.6}\nccc_arousal={:.6}\nutterances={}\n",
            self.ccc_valence, self.ccc_arousal, self.utterances
        );
        for (k, v) in &self.settings {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn to_json(&self) -> String {
        let settings: BTreeMap<&str, &str> =
            self.settings.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        let value = serde_json::json!({
            "ccc_valence": self.ccc_valence,
            "ccc_arousal": self.ccc_arousal,
            "utterances": self.utterances,
            "settings": settings,
        });
        serde_json::to_string_pretty(&value).expect("report serializes") + "\n"
    }
}

/// CCC per dimension over utterances, in gold order.
pub fn evaluate(
    preds: &[UtterancePrediction],
    gold: &[UtterancePrediction],
) -> Result<EvalReport, PostprocError> {
    let mut by_id: BTreeMap<&str, &UtterancePrediction> = BTreeMap::new();
    for p in preds {
        if by_id.insert(&p.id, p).is_some() {
            return Err(PostprocError::DuplicateId(p.id.clone()));
        }
    }
    let gold_ids: BTreeSet<&str> = gold.iter().map(|g| g.id.as_str()).collect();
    let missing: Vec<String> = gold_ids
        .iter()
        .filter(|id| !by_id.contains_key(**id))
        .map(|s| s.to_string())
        .collect();
    let extra: Vec<String> = by_id
        .keys()
        .filter(|id| !gold_ids.contains(**id))
        .map(|s| s.to_string())
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(PostprocError::IdMismatch { missing, extra });
    }
    let mut scores = [0.0; 2];
    for (dim, score) in scores.iter_mut().enumerate() {
        let p: Vec<f64> = gold.iter().map(|g| by_id[g.id.as_str()].get(dim)).collect();
        let g: Vec<f64> = gold.iter().map(|g| g.get(dim)).collect();
        *score = ccc(&p, &g)?;
    }
    Ok(EvalReport {
        ccc_valence: scores[0],
        ccc_arousal: scores[1],
        utterances: gold.len(),
        settings: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PostprocConfig {
    pub window_valence: usize,
    pub window_arousal: usize,
    pub aggregator: String,
    pub smoothing: Option<SmoothingConfig>,
    pub ranges: LabelRanges,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            window_valence: 81,
            window_arousal: 3,
            aggregator: Aggregator::Median.to_string(),
            smoothing: Some(SmoothingConfig::default()),
            ranges: LabelRanges::default(),
        }
    }
}

impl PostprocConfig {
    pub fn aggregator(&self) -> Aggregator {
        self.aggregator.parse().unwrap_or_default()
    }
}

/// Whether one step was kept for one dimension.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepDecision {
    pub step: &'static str,
    pub dimension: &'static str,
    pub ccc_before: Option<f64>,
    pub ccc_after: Option<f64>,
    pub kept: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PostprocOutcome {
    pub predictions: Vec<UtterancePrediction>,
    pub decisions: Vec<StepDecision>,
}

const DIM_NAMES: [&str; 2] = ["valence", "arousal"];

fn dim_ccc(preds: &[UtterancePrediction], gold: &[UtterancePrediction], dim: usize) -> Result<f64, PostprocError> {
    let r = evaluate(preds, gold)?;
    Ok(if dim == 0 { r.ccc_valence } else { r.ccc_arousal })
}

/// Run median filtering then smoothing. With `gold`, each step is kept per
/// dimension only when that dimension's CCC does not decrease; without it,
/// every configured step is applied.
pub fn run_postprocess(
    tracks: &[FrameTrack],
    cfg: &PostprocConfig,
    gold: Option<&[UtterancePrediction]>,
) -> Result<PostprocOutcome, PostprocError> {
    let agg = cfg.aggregator();
    let score_all = |tracks: &[FrameTrack]| -> Result<Vec<UtterancePrediction>, PostprocError> {
        tracks.iter().map(|t| utterance_score(t, agg, &cfg.ranges)).collect()
    };
    let mut current = score_all(tracks)?;
    let mut decisions = Vec::new();

    let filtered_tracks: Vec<FrameTrack> = tracks
        .iter()
        .map(|t| filter_track(t, cfg.window_valence, cfg.window_arousal))
        .collect::<Result<_, _>>()?;
    let filtered = score_all(&filtered_tracks)?;
    select_step("median_filter", &mut current, &filtered, gold, &mut decisions)?;

    if let Some(smoothing) = cfg.smoothing {
        let counts: Vec<usize> = tracks.iter().map(FrameTrack::live_frames).collect();
        let smoothed = smooth_short_utterances(&current, &counts, smoothing);
        select_step("smoothing", &mut current, &smoothed, gold, &mut decisions)?;
    }
    Ok(PostprocOutcome {
        predictions: current,
        decisions,
    })
}

fn select_step(
    step: &'static str,
    current: &mut [UtterancePrediction],
    candidate: &[UtterancePrediction],
    gold: Option<&[UtterancePrediction]>,
    decisions: &mut Vec<StepDecision>,
) -> Result<(), PostprocError> {
    for (dim, dimension) in DIM_NAMES.into_iter().enumerate() {
        let (before, after, kept) = match gold {
            Some(g) => {
                let before = dim_ccc(current, g, dim)?;
                let after = dim_ccc(candidate, g, dim)?;
                (Some(before), Some(after), after >= before)
            }
            None => (None, None, true),
        };
        if kept {
            for (c, n) in current.iter_mut().zip(candidate) {
                c.set(dim, n.get(dim));
            }
        }
        decisions.push(StepDecision {
            step,
            dimension,
            ccc_before: before,
            ccc_after: after,
            kept,
        });
    }
    Ok(())
}

/// `id,valence,arousal` CSV with six decimals.
pub fn write_predictions(preds: &[UtterancePrediction]) -> String {
    let mut s = String::from("id,valence,arousal\n");
    for p in preds {
        let _ = writeln!(s, "{},{:.6},{:.6}", p.id, p.valence, p.arousal);
    }
    s
}

pub fn parse_predictions(text: &str) -> Result<Vec<UtterancePrediction>, PostprocError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == "id,valence,arousal" => {}
        _ => {
            return Err(PostprocError::Parse {
                line: 1,
                reason: "expected header `id,valence,arousal`".into(),
            })
        }
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| PostprocError::Parse { line: line_no, reason };
        let fields: Vec<&str> = line.split(',').collect();
        let [id, v, a] = fields[..] else {
            return Err(err(format!("expected 3 fields, got {}", fields.len())));
        };
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(err(format!("invalid id `{id}`")));
        }
        let num = |s: &str, what: &str| -> Result<f64, PostprocError> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("{what} `{s}` is not a finite number")))
        };
        let (v, a) = (num(v, "valence")?, num(a, "arousal")?);
        if !seen.insert(id.to_string()) {
            return Err(PostprocError::DuplicateId(id.to_string()));
        }
        out.push(UtterancePrediction::new(id, v, a));
    }
    Ok(out)
}

/// Pack tracks into a container: `track:<id>` as `[T,2]`, `mask:<id>` as `[T]` of 0/1.
pub fn tracks_to_container(tracks: &[FrameTrack]) -> Result<Container, PostprocError> {
    let mut c = Container::new();
    c.set_attr("kind", "frame-tracks")?;
    for t in tracks {
        if t.values.is_empty() {
            return Err(PostprocError::Track {
                id: t.id.clone(),
                reason: "empty track".into(),
            });
        }
        let data = t.values.iter().flat_map(|v| [v[0], v[1]]).collect();
        c.push(&format!("track:{}", t.id), Tensor::new(vec![t.values.len(), 2], data).expect("shape"))?;
        let mask = t.pad_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        c.push(&format!("mask:{}", t.id), Tensor::vector(mask))?;
    }
    Ok(c)
}

pub fn tracks_from_container(c: &Container) -> Result<Vec<FrameTrack>, PostprocError> {
    let mut out = Vec::new();
    for (name, tensor) in c.tensors() {
        let Some(id) = name.strip_prefix("track:") else { continue };
        let bad = |reason: String| PostprocError::Track { id: id.to_string(), reason };
        let [t, 2] = *tensor.shape() else {
            return Err(bad(format!("shape {:?} is not [T,2]", tensor.shape())));
        };
        let values = tensor.data().chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let mask = c
            .get(&format!("mask:{id}"))
            .ok_or_else(|| bad("missing mask".into()))?;
        if mask.shape() != [t] {
            return Err(bad(format!("mask shape {:?} != [{t}]", mask.shape())));
        }
        let pad_mask = mask.data().iter().map(|&m| m != 0.0).collect();
        out.push(FrameTrack {
            id: id.to_string(),
            values,
            pad_mask,
        });
    }
    Ok(out)
}
