//! Concordance correlation coefficient and the sequence-aggregated CCC loss.
//!
//! Each sequence's frame predictions are reduced to one value (mean or
//! median); the CCC is then taken across the batch of reduced values against
//! the per-sequence labels, and the loss is `1 - ccc`. Variances and the
//! covariance are population (divide-by-N) statistics.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("ccc needs at least 2 points, got {0}")]
    TooShort(usize),
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("cannot aggregate an empty list")]
    Empty,
    #[error("batch of {0} sequences is too small; the loss needs at least 2")]
    BatchTooSmall(usize),
    #[error("prediction tensor shape {0:?} does not fit the labels")]
    Shape(Vec<usize>),
    #[error("sequence {0} has every frame masked")]
    AllMasked(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Aggregator {
    Mean,
    #[default]
    Median,
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregator::Mean => "mean",
            Aggregator::Median => "median",
        })
    }
}

impl FromStr for Aggregator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Aggregator::Mean),
            "median" => Ok(Aggregator::Median),
            other => Err(format!("unknown aggregator `{other}` (expected mean or median)")),
        }
    }
}

/// The five moments the CCC is built from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CccStats {
    pub mean_pred: f64,
    pub mean_gold: f64,
    pub var_pred: f64,
    pub var_gold: f64,
    pub covar: f64,
}

impl CccStats {
    pub fn compute(pred: &[f64], gold: &[f64]) -> Result<Self, ObjectiveError> {
        if pred.len() != gold.len() {
            return Err(ObjectiveError::LengthMismatch(pred.len(), gold.len()));
        }
        if pred.len() < 2 {
            return Err(ObjectiveError::TooShort(pred.len()));
        }
        let n = pred.len() as f64;
        // shifting by the first element keeps constant series exactly constant
        let mean_of = |xs: &[f64]| xs[0] + xs.iter().map(|x| x - xs[0]).sum::<f64>() / n;
        let mean_pred = mean_of(pred);
        let mean_gold = mean_of(gold);
        let (mut var_pred, mut var_gold, mut covar) = (0.0, 0.0, 0.0);
        for (p, g) in pred.iter().zip(gold) {
            let dp = p - mean_pred;
            let dg = g - mean_gold;
            var_pred += dp * dp;
            var_gold += dg * dg;
            covar += dp * dg;
        }
        Ok(Self {
            mean_pred,
            mean_gold,
            var_pred: var_pred / n,
            var_gold: var_gold / n,
            covar: covar / n,
        })
    }

    fn denominator(&self) -> f64 {
        let gap = self.mean_pred - self.mean_gold;
        self.var_pred + self.var_gold + gap * gap
    }

    /// Zero denominator only happens for two equal constant series, which
    /// agree perfectly.
    pub fn is_degenerate(&self) -> bool {
        self.denominator() == 0.0
    }

    pub fn ccc(&self) -> f64 {
        let d = self.denominator();
        if d == 0.0 {
            return 1.0;
        }
        (2.0 * self.covar / d).clamp(-1.0, 1.0)
    }
}

pub fn ccc(pred: &[f64], gold: &[f64]) -> Result<f64, ObjectiveError> {
    Ok(CccStats::compute(pred, gold)?.ccc())
}

/// Pearson correlation, for diagnostics only. Zero when either side is constant.
pub fn pearson(pred: &[f64], gold: &[f64]) -> Result<f64, ObjectiveError> {
    let s = CccStats::compute(pred, gold)?;
    let denom = (s.var_pred * s.var_gold).sqrt();
    Ok(if denom == 0.0 { 0.0 } else { (s.covar / denom).clamp(-1.0, 1.0) })
}

pub fn aggregate(values: &[f64], agg: Aggregator) -> Result<f64, ObjectiveError> {
    aggregate_with_weights(values, None, agg).map(|(v, _)| v)
}

/// Aggregate over the unmasked entries and return the derivative of the
/// result with respect to each entry. `pad_mask[i] == true` excludes entry `i`.
///
/// The median routes its whole subgradient to the middle order statistic, or
/// splits it 1/2–1/2 between the two middle ones for an even count. Ties are
/// broken by position so the choice is deterministic.
pub fn aggregate_with_weights(
    values: &[f64],
    pad_mask: Option<&[bool]>,
    agg: Aggregator,
) -> Result<(f64, Vec<f64>), ObjectiveError> {
    let live: Vec<usize> = (0..values.len())
        .filter(|&i| pad_mask.is_none_or(|m| !m[i]))
        .collect();
    if live.is_empty() {
        return Err(ObjectiveError::Empty);
    }
    let mut weights = vec![0.0; values.len()];
    let value = match agg {
        Aggregator::Mean => {
            let w = 1.0 / live.len() as f64;
            for &i in &live {
                weights[i] = w;
            }
            live.iter().map(|&i| values[i]).sum::<f64>() * w
        }
        Aggregator::Median => {
            let mut order = live;
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
            let n = order.len();
            if n % 2 == 1 {
                let mid = order[n / 2];
                weights[mid] = 1.0;
                values[mid]
            } else {
                let (lo, hi) = (order[n / 2 - 1], order[n / 2]);
                weights[lo] += 0.5;
                weights[hi] += 0.5;
                0.5 * (values[lo] + values[hi])
            }
        }
    };
    Ok((value, weights))
}

/// Value and gradient of `1 - ccc` with respect to the predictions.
fn ccc_loss_on_points(pred: &[f64], gold: &[f64]) -> Result<(f64, Vec<f64>, bool), ObjectiveError> {
    let s = CccStats::compute(pred, gold)?;
    if s.is_degenerate() {
        return Ok((0.0, vec![0.0; pred.len()], true));
    }
    let n = pred.len() as f64;
    let d = s.denominator();
    let gap = s.mean_pred - s.mean_gold;
    let grad = pred
        .iter()
        .zip(gold)
        .map(|(&p, &g)| {
            let dcov = (g - s.mean_gold) / n;
            let dden = 2.0 * (p - s.mean_pred) / n + 2.0 * gap / n;
            let drho = (2.0 * dcov * d - 2.0 * s.covar * dden) / (d * d);
            -drho
        })
        .collect();
    Ok((1.0 - s.ccc(), grad, false))
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    /// Same shape as the predictions the loss was taken over.
    pub grad: Tensor,
    /// The label batch (and the aggregates) were constant and equal, so the
    /// loss is pinned at 0 with a zero gradient.
    pub degenerate: bool,
    pub aggregates: Vec<f64>,
}

/// `1 - ccc(aggregates, labels)` for predictions shaped `[B, T]`.
pub fn ccc_loss(
    per_frame: &Tensor,
    labels: &[f64],
    agg: Aggregator,
    pad_mask: Option<&[bool]>,
) -> Result<LossOutput, ObjectiveError> {
    let (b, t) = match *per_frame.shape() {
        [b, t] if b == labels.len() => (b, t),
        _ => return Err(ObjectiveError::Shape(per_frame.shape().to_vec())),
    };
    if b < 2 {
        return Err(ObjectiveError::BatchTooSmall(b));
    }
    if let Some(m) = pad_mask {
        if m.len() != b * t {
            return Err(ObjectiveError::Shape(vec![m.len()]));
        }
    }
    let mut aggregates = Vec::with_capacity(b);
    let mut weights = Vec::with_capacity(b);
    for seq in 0..b {
        let row = per_frame.slab(seq);
        let mask = pad_mask.map(|m| &m[seq * t..(seq + 1) * t]);
        let (v, w) = aggregate_with_weights(row, mask, agg).map_err(|e| match e {
            ObjectiveError::Empty => ObjectiveError::AllMasked(seq),
            other => other,
        })?;
        aggregates.push(v);
        weights.push(w);
    }
    let (value, dagg, degenerate) = ccc_loss_on_points(&aggregates, labels)?;
    let mut grad = Vec::with_capacity(b * t);
    for (w, da) in weights.iter().zip(&dagg) {
        grad.extend(w.iter().map(|wi| wi * da));
    }
    Ok(LossOutput {
        value,
        grad: Tensor::new(vec![b, t], grad).expect("shape matches"),
        degenerate,
        aggregates,
    })
}

#[derive(Clone, Debug)]
pub struct JointLoss {
    pub value: f64,
    pub valence: LossOutput,
    pub arousal: LossOutput,
    /// Gradient shaped `[B, T, 2]`.
    pub grad: Tensor,
}

/// Unweighted sum of the valence and arousal losses over `[B, T, 2]` predictions.
pub fn ccc_loss_joint(
    preds: &Tensor,
    labels: &[[f64; 2]],
    agg: Aggregator,
    pad_mask: Option<&[bool]>,
) -> Result<JointLoss, ObjectiveError> {
    let (b, t) = match *preds.shape() {
        [b, t, 2] if b == labels.len() => (b, t),
        _ => return Err(ObjectiveError::Shape(preds.shape().to_vec())),
    };
    let column = |dim: usize| -> Tensor {
        let data = preds.data().iter().skip(dim).step_by(2).copied().collect();
        Tensor::new(vec![b, t], data).expect("shape matches")
    };
    let valence_labels: Vec<f64> = labels.iter().map(|l| l[0]).collect();
    let arousal_labels: Vec<f64> = labels.iter().map(|l| l[1]).collect();
    let valence = ccc_loss(&column(0), &valence_labels, agg, pad_mask)?;
    let arousal = ccc_loss(&column(1), &arousal_labels, agg, pad_mask)?;
    let mut grad = Vec::with_capacity(b * t * 2);
    for (gv, ga) in valence.grad.data().iter().zip(arousal.grad.data()) {
        grad.push(*gv);
        grad.push(*ga);
    }
    Ok(JointLoss {
        value: valence.value + arousal.value,
        grad: Tensor::new(vec![b, t, 2], grad).expect("shape matches"),
        valence,
        arousal,
    })
}
