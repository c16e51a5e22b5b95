use std::fs;
use std::path::{Path, PathBuf};

use super::{DataError, FrameSource, Utterance};
use crate::tensor::{Container, Tensor};

pub const RAW_FRAMES_FILE: &str = "frames.akt";
/// Entry name of the `[T, H, W, C]` tensor inside a raw frames container.
pub const FRAME_ENTRY: &str = "frames";

/// `x / 127.5 - 1` for pixel values in `[0, 255]`.
pub fn normalize_frame(pixels: &Tensor) -> Result<Tensor, DataError> {
    let mut out = pixels.clone();
    for v in out.data_mut() {
        if !(0.0..=255.0).contains(v) {
            return Err(DataError::PixelRange(*v));
        }
        *v = *v / 127.5 - 1.0;
    }
    Ok(out)
}

/// Inverse of [`normalize_frame`].
pub fn denormalize(x: f64) -> f64 {
    (x + 1.0) * 127.5
}

/// Bilinear resampling of `[H, W, C]` to `[side, side, C]` with half-pixel
/// centres and clamped borders.
pub fn resize_bilinear(img: &Tensor, side: usize) -> Result<Tensor, DataError> {
    let (h, w, c) = match *img.shape() {
        [h, w, c] => (h, w, c),
        ref s => {
            return Err(DataError::Frames {
                path: PathBuf::new(),
                detail: format!("frame must be [H,W,C], got {s:?}"),
            })
        }
    };
    if h == side && w == side {
        return Ok(img.clone());
    }
    let src = img.data();
    let axis = |out: usize, extent: usize| {
        let pos = ((out as f64 + 0.5) * extent as f64 / side as f64 - 0.5).clamp(0.0, (extent - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(extent - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut data = Vec::with_capacity(side * side * c);
    for oy in 0..side {
        let (y0, y1, fy) = axis(oy, h);
        for ox in 0..side {
            let (x0, x1, fx) = axis(ox, w);
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
                let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
                data.push(top + (bottom - top) * fy);
            }
        }
    }
    Ok(Tensor::new(vec![side, side, c], data)?)
}

fn frame_number(name: &str) -> Option<u64> {
    let digits = name.strip_prefix("frame_")?.strip_suffix(".png")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// `frame_*.png` files of a directory in numeric order.
pub(crate) fn list_images(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let io = |source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let entry = entry.map_err(io)?;
        let name = entry.file_name();
        if let Some(n) = name.to_str().and_then(frame_number) {
            found.push((n, entry.path()));
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

fn raw_frames(path: &Path) -> Result<Tensor, DataError> {
    let c = Container::load(path)?;
    let t = c.require(FRAME_ENTRY)?;
    if t.rank() != 4 {
        return Err(DataError::Frames {
            path: path.to_path_buf(),
            detail: format!("`{FRAME_ENTRY}` must be [T,H,W,C], got {:?}", t.shape()),
        });
    }
    Ok(t.clone())
}

pub(crate) fn raw_frame_count(path: &Path) -> Result<usize, DataError> {
    Ok(raw_frames(path)?.shape()[0])
}

fn read_png(path: &Path, channels: usize) -> Result<Tensor, DataError> {
    let err = |detail: String| DataError::Frames {
        path: path.to_path_buf(),
        detail,
    };
    let img = image::open(path).map_err(|e| err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bytes = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        n => return Err(err(format!("cannot read {n}-channel frames from PNG"))),
    };
    Ok(Tensor::new(
        vec![h, w, channels],
        bytes.into_iter().map(f64::from).collect(),
    )?)
}

impl Utterance {
    /// All frames, normalized to `[-1, 1]` and resized to `[T, side, side, C]`.
    pub fn load_frames(&self, side: usize, channels: usize) -> Result<Tensor, DataError> {
        let raw: Vec<Tensor> = match &self.frames {
            FrameSource::Images(files) => files
                .iter()
                .map(|p| read_png(p, channels))
                .collect::<Result<_, _>>()?,
            FrameSource::Raw(path) => {
                let t = raw_frames(path)?;
                let shape = t.shape()[1..].to_vec();
                if shape[2] != channels {
                    return Err(DataError::Frames {
                        path: path.clone(),
                        detail: format!("frames have {} channels, expected {channels}", shape[2]),
                    });
                }
                (0..t.shape()[0])
                    .map(|i| Tensor::new(shape.clone(), t.slab(i).to_vec()))
                    .collect::<Result<_, _>>()?
            }
        };
        let mut data = Vec::with_capacity(raw.len() * side * side * channels);
        for frame in &raw {
            let resized = resize_bilinear(&normalize_frame(frame)?, side)?;
            data.extend_from_slice(resized.data());
        }
        Ok(Tensor::new(vec![raw.len(), side, side, channels], data)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_endpoints() {
        let t = normalize_frame(&Tensor::vector(vec![0.0, 255.0, 128.0])).unwrap();
        assert_eq!(t.data()[..2], [-1.0, 1.0]);
        assert!((t.data()[2] - 0.003_921_568_627_450_98).abs() < 1e-15);
        assert!(normalize_frame(&Tensor::vector(vec![256.0])).is_err());
        assert!(normalize_frame(&Tensor::vector(vec![-0.5])).is_err());
    }

    #[test]
    fn denormalize_rounds_back() {
        for x in 0..=255u32 {
            let n = normalize_frame(&Tensor::scalar(f64::from(x))).unwrap().item();
            assert_eq!(denormalize(n).round() as u32, x);
        }
    }

    #[test]
    fn resize_keeps_constants() {
        let img = Tensor::full(&[7, 5, 3], 0.25);
        let r = resize_bilinear(&img, 12).unwrap();
        assert_eq!(r.shape(), [12, 12, 3]);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let down = resize_bilinear(&Tensor::full(&[64, 64, 1], -0.5), 32).unwrap();
        assert!(down.data().iter().all(|&v| (v + 0.5).abs() < 1e-15));
    }

    #[test]
    fn resize_halves_by_averaging_pairs() {
        // 4 → 2 samples at source positions 0.5 and 2.5
        let img = Tensor::new(vec![1, 4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = resize_bilinear(&img, 2).unwrap();
        assert_eq!(r.shape(), [2, 2, 1]);
        assert_eq!(r.data(), [0.5, 2.5, 0.5, 2.5]);
    }

    #[test]
    fn frame_numbers() {
        assert_eq!(frame_number("frame_000012.png"), Some(12));
        assert_eq!(frame_number("frame_.png"), None);
        assert_eq!(frame_number("frame_12.jpg"), None);
        assert_eq!(frame_number("other.png"), None);
    }
}
