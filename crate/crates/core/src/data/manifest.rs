use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::frames::{list_images, raw_frame_count, RAW_FRAMES_FILE};
use super::{DataError, FrameSource, Utterance};

pub const MANIFEST_HEADER: &str = "id,frames_dir,valence,arousal";

/// One parsed manifest line, before any filesystem access.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    /// 1-based line number in the file (the header is line 1).
    pub row: usize,
    pub id: String,
    pub frames_dir: String,
    pub valence: f64,
    pub arousal: f64,
}

/// Parse manifest text. Blank lines are skipped; everything else must be a
/// four-field row with a unique, whitespace-free id and finite labels.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>, DataError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r').trim_start_matches('\u{feff}') == MANIFEST_HEADER => {}
        Some((_, h)) => {
            return Err(DataError::Manifest(format!(
                "header must be `{MANIFEST_HEADER}`, found `{h}`"
            )))
        }
        None => return Err(DataError::Manifest("empty manifest".into())),
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines {
        let row = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let err = |detail: String| DataError::Row { row, detail };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [id, dir, v, a] = fields[..] else {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        };
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(err(format!("invalid id `{id}`")));
        }
        if dir.is_empty() {
            return Err(err("empty frames_dir".into()));
        }
        let label = |name: &str, s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("{name} `{s}` is not a finite number")))
        };
        let valence = label("valence", v)?;
        let arousal = label("arousal", a)?;
        if !seen.insert(id.to_string()) {
            return Err(err(format!("duplicate id `{id}`")));
        }
        rows.push(ManifestRow {
            row,
            id: id.to_string(),
            frames_dir: dir.to_string(),
            valence,
            arousal,
        });
    }
    Ok(rows)
}

/// Load a manifest and resolve each row's frames relative to the manifest's
/// directory. A directory with `frames.akt` is read as a raw container;
/// otherwise it must hold `frame_NNNNNN.png` files.
pub fn load_manifest(path: &Path) -> Result<Vec<Utterance>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text)?
        .into_iter()
        .map(|r| {
            let dir = base.join(&r.frames_dir);
            let row_err = |detail: String| DataError::Row { row: r.row, detail };
            let raw = dir.join(RAW_FRAMES_FILE);
            let (frames, frame_count) = if raw.is_file() {
                let n = raw_frame_count(&raw).map_err(|e| row_err(e.to_string()))?;
                (FrameSource::Raw(raw), n)
            } else {
                let files: Vec<PathBuf> = list_images(&dir).map_err(|e| row_err(e.to_string()))?;
                let n = files.len();
                (FrameSource::Images(files), n)
            };
            if frame_count == 0 {
                return Err(row_err(format!("no frames in {}", dir.display())));
            }
            Ok(Utterance {
                id: r.id,
                frames,
                frame_count,
                valence: r.valence,
                arousal: r.arousal,
            })
        })
        .collect()
}

/// Manifest text for `(id, frames_dir, valence, arousal)` rows.
pub fn write_manifest<'a>(rows: impl IntoIterator<Item = (&'a str, &'a str, f64, f64)>) -> String {
    let mut out = format!("{MANIFEST_HEADER}\n");
    for (id, dir, v, a) in rows {
        out.push_str(&format!("{id},{dir},{v},{a}\n"));
    }
    out
}
