use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{DataError, Utterance};
use crate::tensor::Tensor;

/// A fixed-length run of frame indices into one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub utterance: String,
    /// Frame index of every position; repeated indices are padding.
    pub frames: Vec<usize>,
    /// True exactly on repeated-pad positions.
    pub pad_mask: Vec<bool>,
    pub labels: [f64; 2],
}

impl Window {
    pub fn start(&self) -> usize {
        self.frames[0]
    }
}

/// Non-overlapping windows of `t` frames. A tail shorter than `t` becomes
/// the last `t` frames of the utterance; an utterance shorter than `t` is
/// right-padded by repeating its final frame.
pub fn make_sequences(u: &Utterance, t: usize) -> Result<Vec<Window>, DataError> {
    if t == 0 {
        return Err(DataError::SequenceLength);
    }
    let n = u.frame_count;
    let window = |frames: Vec<usize>, pad_mask: Vec<bool>| Window {
        utterance: u.id.clone(),
        frames,
        pad_mask,
        labels: u.labels(),
    };
    if n == 0 {
        return Ok(Vec::new());
    }
    if n < t {
        let frames = (0..t).map(|i| i.min(n - 1)).collect();
        let mask = (0..t).map(|i| i >= n).collect();
        return Ok(vec![window(frames, mask)]);
    }
    let mut starts: Vec<usize> = (0..n / t).map(|i| i * t).collect();
    if !n.is_multiple_of(t) {
        starts.push(n - t);
    }
    Ok(starts
        .into_iter()
        .map(|s| window((s..s + t).collect(), vec![false; t]))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Shuffled, remainder dropped.
    Train,
    /// File order, remainder kept.
    Eval,
}

/// Group sequence indices into batches of `b`.
pub fn make_batches(count: usize, b: usize, seed: u64, mode: BatchMode) -> Result<Vec<Vec<usize>>, DataError> {
    let mut order: Vec<usize> = (0..count).collect();
    match mode {
        BatchMode::Train => {
            if b < 2 {
                return Err(DataError::BatchSize(b));
            }
            if count < b {
                return Err(DataError::TooFewSequences { needed: b, have: count });
            }
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            Ok(order.chunks_exact(b).map(<[usize]>::to_vec).collect())
        }
        BatchMode::Eval => {
            if b == 0 {
                return Err(DataError::BatchSize(b));
            }
            Ok(order.chunks(b).map(<[usize]>::to_vec).collect())
        }
    }
}

/// `B` sequences of `T` normalized frames with their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    /// `[B, T, H, W, C]`
    pub frames: Tensor,
    pub labels: Vec<[f64; 2]>,
    pub source: Vec<String>,
    /// Row-major `[B, T]`.
    pub pad_mask: Vec<bool>,
    /// Index into [`Dataset::windows`] of each sequence.
    pub windows: Vec<usize>,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.frames.shape()[1]
    }

    /// `[T, H, W, C]` frames of sequence `i`.
    pub fn sequence_frames(&self, i: usize) -> Tensor {
        Tensor::new(self.frames.shape()[1..].to_vec(), self.frames.slab(i).to_vec())
            .expect("slab matches its own shape")
    }
}

/// Utterances with frames loaded into memory and cut into windows.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    /// `[frames, side, side, C]` per utterance.
    pub frames: Vec<Tensor>,
    pub windows: Vec<Window>,
    /// Utterance index of each window.
    pub window_owner: Vec<usize>,
    pub steps: usize,
}

impl Dataset {
    pub fn load(utterances: Vec<Utterance>, side: usize, channels: usize, steps: usize) -> Result<Self, DataError> {
        let frames: Vec<Tensor> = utterances
            .par_iter()
            .map(|u| u.load_frames(side, channels))
            .collect::<Result<_, _>>()?;
        Self::from_frames(utterances, frames, steps)
    }

    pub fn from_frames(utterances: Vec<Utterance>, frames: Vec<Tensor>, steps: usize) -> Result<Self, DataError> {
        let mut windows = Vec::new();
        let mut window_owner = Vec::new();
        for (i, u) in utterances.iter().enumerate() {
            for w in make_sequences(u, steps)? {
                windows.push(w);
                window_owner.push(i);
            }
        }
        Ok(Self {
            utterances,
            frames,
            windows,
            window_owner,
            steps,
        })
    }

    pub fn batch(&self, indices: &[usize]) -> SequenceBatch {
        let frame_len = self.frames.first().map_or(0, |f| f.len() / f.shape()[0].max(1));
        let mut shape = vec![indices.len(), self.steps];
        if let Some(f) = self.frames.first() {
            shape.extend_from_slice(&f.shape()[1..]);
        }
        let mut data = Vec::with_capacity(indices.len() * self.steps * frame_len);
        let mut labels = Vec::with_capacity(indices.len());
        let mut source = Vec::with_capacity(indices.len());
        let mut pad_mask = Vec::with_capacity(indices.len() * self.steps);
        for &wi in indices {
            let w = &self.windows[wi];
            let f = &self.frames[self.window_owner[wi]];
            for &fi in &w.frames {
                data.extend_from_slice(f.slab(fi));
            }
            labels.push(w.labels);
            source.push(w.utterance.clone());
            pad_mask.extend_from_slice(&w.pad_mask);
        }
        SequenceBatch {
            frames: Tensor::new(shape, data).expect("frames assembled to shape"),
            labels,
            source,
            pad_mask,
            windows: indices.to_vec(),
        }
    }
}
