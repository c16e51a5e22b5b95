use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::frames::{denormalize, FRAME_ENTRY, RAW_FRAMES_FILE};
use super::manifest::{load_manifest, write_manifest};
use super::{DataError, Utterance};
use crate::tensor::{Container, Tensor};

/// Grey level at valence 0.
const BASE: f64 = 128.0;
/// Grey-level change per unit of valence.
const VALENCE_GAIN: f64 = 60.0;
/// Peak-to-peak stripe contrast per unit of arousal.
const AROUSAL_GAIN: f64 = 100.0;
/// Stripe period in pixels; the first half of each period is bright.
const STRIPE_PERIOD: usize = 4;

fn stripe(x: usize) -> f64 {
    if x % STRIPE_PERIOD < STRIPE_PERIOD / 2 {
        0.5
    } else {
        -0.5
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthFormat {
    Png,
    Raw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub utterances: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub side: usize,
    pub channels: usize,
    pub seed: u64,
    /// Uniform per-pixel noise amplitude in grey levels.
    pub noise: f64,
    /// Utterances per source video; ids are `vNN/uNN`.
    pub per_video: usize,
    pub valence_range: (f64, f64),
    pub arousal_range: (f64, f64),
    pub format: SynthFormat,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            utterances: 16,
            frames_min: 40,
            frames_max: 200,
            side: 32,
            channels: 3,
            seed: 0,
            noise: 8.0,
            per_video: 4,
            valence_range: (-1.0, 1.0),
            arousal_range: (0.0, 1.0),
            format: SynthFormat::Png,
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Raw `[T, side, side, C]` grey levels: brightness tracks valence, the
/// contrast of vertical stripes tracks arousal.
fn render(rng: &mut ChaCha8Rng, cfg: &SynthConfig, frames: usize, valence: f64, arousal: f64) -> Tensor {
    let side = cfg.side;
    let mut data = Vec::with_capacity(frames * side * side * cfg.channels);
    for _ in 0..frames {
        for _y in 0..side {
            for x in 0..side {
                let level = BASE + VALENCE_GAIN * valence + AROUSAL_GAIN * arousal * stripe(x);
                for _c in 0..cfg.channels {
                    let noise = if cfg.noise > 0.0 {
                        rng.gen_range(-cfg.noise..=cfg.noise)
                    } else {
                        0.0
                    };
                    data.push((level + noise).round().clamp(0.0, 255.0));
                }
            }
        }
    }
    Tensor::new(vec![frames, side, side, cfg.channels], data).expect("rendered to shape")
}

fn write_png(path: &Path, frame: &[f64], side: usize, channels: usize) -> Result<(), DataError> {
    let bytes: Vec<u8> = frame.iter().map(|&v| v as u8).collect();
    let side = side as u32;
    let result = match channels {
        1 => ImageBuffer::<Luma<u8>, _>::from_raw(side, side, bytes).map(|img| img.save(path)),
        3 => ImageBuffer::<Rgb<u8>, _>::from_raw(side, side, bytes).map(|img| img.save(path)),
        n => {
            return Err(DataError::Frames {
                path: path.to_path_buf(),
                detail: format!("cannot write {n}-channel PNG"),
            })
        }
    };
    match result {
        Some(Ok(())) => Ok(()),
        Some(Err(e)) => Err(DataError::Frames {
            path: path.to_path_buf(),
            detail: e.to_string(),
        }),
        None => unreachable!("buffer length matches side²·channels"),
    }
}

/// Write a deterministic labelled corpus under `dir` (`manifest.csv` plus one
/// frame directory per utterance) and load it back.
pub fn synth_corpus(dir: &Path, cfg: &SynthConfig) -> Result<Vec<Utterance>, DataError> {
    if cfg.frames_min == 0 || cfg.frames_min > cfg.frames_max || cfg.side == 0 || cfg.per_video == 0 {
        return Err(DataError::Manifest(format!(
            "invalid synth settings: frames {}..={}, side {}, per_video {}",
            cfg.frames_min, cfg.frames_max, cfg.side, cfg.per_video
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.utterances);
    for i in 0..cfg.utterances {
        let id = format!("v{:02}/u{:02}", i / cfg.per_video, i % cfg.per_video);
        let valence = rng.gen_range(cfg.valence_range.0..=cfg.valence_range.1);
        let arousal = rng.gen_range(cfg.arousal_range.0..=cfg.arousal_range.1);
        let frames = rng.gen_range(cfg.frames_min..=cfg.frames_max);
        let pixels = render(&mut rng, cfg, frames, valence, arousal);
        let rel = format!("frames/{id}");
        let out = dir.join(&rel);
        fs::create_dir_all(&out).map_err(io(&out))?;
        match cfg.format {
            SynthFormat::Raw => {
                let mut c = Container::new();
                c.push(FRAME_ENTRY, pixels)?;
                c.save(&out.join(RAW_FRAMES_FILE))?;
            }
            SynthFormat::Png => {
                for f in 0..frames {
                    let path = out.join(format!("frame_{:06}.png", f + 1));
                    write_png(&path, pixels.slab(f), cfg.side, cfg.channels)?;
                }
            }
        }
        rows.push((id, rel, valence, arousal));
    }
    let manifest = dir.join("manifest.csv");
    let text = write_manifest(rows.iter().map(|(id, rel, v, a)| (id.as_str(), rel.as_str(), *v, *a)));
    fs::write(&manifest, text).map_err(io(&manifest))?;
    load_manifest(&manifest)
}

/// Recover `(valence, arousal)` from normalized synthetic frames
/// `[T, H, W, C]` of the generated side: mean grey level for valence,
/// bright-minus-dark stripe contrast for arousal.
pub fn decode_labels(frames: &Tensor) -> [f64; 2] {
    let [t, h, w, c] = frames.shape()[..] else {
        panic!("decode_labels expects [T,H,W,C], got {:?}", frames.shape());
    };
    let (mut bright, mut dark, mut nb, mut nd) = (0.0, 0.0, 0usize, 0usize);
    for (i, &v) in frames.data().iter().enumerate() {
        let x = (i / c) % w;
        if stripe(x) > 0.0 {
            bright += denormalize(v);
            nb += 1;
        } else {
            dark += denormalize(v);
            nd += 1;
        }
    }
    debug_assert_eq!(nb + nd, t * h * w * c);
    let (bright, dark) = (bright / nb.max(1) as f64, dark / nd.max(1) as f64);
    // columns split evenly only when the width is a multiple of the period
    let mean = (bright * nb as f64 + dark * nd as f64) / (nb + nd) as f64;
    let stripe_mean = (nb as f64 * 0.5 - nd as f64 * 0.5) / (nb + nd) as f64;
    let contrast = bright - dark;
    let arousal = contrast / AROUSAL_GAIN;
    [(mean - BASE - AROUSAL_GAIN * arousal * stripe_mean) / VALENCE_GAIN, arousal]
}
