//! Named-tensor container used for checkpoints, raw frame blocks and
//! prediction tracks.
//!
//! Layout: a UTF-8 text index followed by a binary payload.
//!
//! ```text
//! affectkit-tensors 1\n
//! attr <key> <value>\n              (zero or more; value runs to end of line)
//! tensor <name> <rank> <d0> ... \n  (zero or more, payload order)
//! end\n
//! <little-endian f64 values of every tensor, concatenated>
//! ```
//!
//! Keys and names are non-empty and contain no whitespace. Nothing in the
//! layout depends on the host, so equal containers encode to equal bytes.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::Tensor;

pub const CONTAINER_MAGIC: &str = "affectkit-tensors 1";

const MAX_RANK: usize = 8;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a tensor container (bad magic line)")]
    BadMagic,
    #[error("header line {line}: {reason}")]
    Header { line: usize, reason: String },
    #[error("header is not terminated by an `end` line")]
    Unterminated,
    #[error("payload holds {actual} bytes but the index describes {expected}")]
    PayloadLength { expected: usize, actual: usize },
    #[error("duplicate {kind} `{name}`")]
    Duplicate { kind: &'static str, name: String },
    #[error("invalid {kind} `{name}`: must be non-empty without whitespace")]
    InvalidName { kind: &'static str, name: String },
    #[error("no tensor named `{0}`")]
    Missing(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    attrs: Vec<(String, String)>,
    tensors: Vec<(String, Tensor)>,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_attr(&mut self, key: &str, value: &str) -> Result<(), ContainerError> {
        if !valid_token(key) {
            return Err(ContainerError::InvalidName {
                kind: "attribute key",
                name: key.to_string(),
            });
        }
        if value.contains(['\n', '\r']) {
            return Err(ContainerError::InvalidName {
                kind: "attribute value",
                name: value.to_string(),
            });
        }
        match self.attrs.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value.to_string(),
            None => self.attrs.push((key.to_string(), value.to_string())),
        }
        Ok(())
    }

    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attrs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn attrs(&self) -> &[(String, String)] {
        &self.attrs
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) -> Result<(), ContainerError> {
        if !valid_token(name) {
            return Err(ContainerError::InvalidName {
                kind: "tensor name",
                name: name.to_string(),
            });
        }
        if self.get(name).is_some() {
            return Err(ContainerError::Duplicate {
                kind: "tensor",
                name: name.to_string(),
            });
        }
        self.tensors.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, ContainerError> {
        self.get(name).ok_or_else(|| ContainerError::Missing(name.to_string()))
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn into_tensors(self) -> Vec<(String, Tensor)> {
        self.tensors
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(CONTAINER_MAGIC);
        header.push('\n');
        for (k, v) in &self.attrs {
            header.push_str(&format!("attr {k} {v}\n"));
        }
        for (name, t) in &self.tensors {
            header.push_str(&format!("tensor {name} {}", t.rank()));
            for d in t.shape() {
                header.push_str(&format!(" {d}"));
            }
            header.push('\n');
        }
        header.push_str("end\n");
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(header.len() + payload);
        out.extend_from_slice(header.as_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut pos = 0usize;
        let mut line_no = 0usize;
        let next_line = |pos: &mut usize| -> Option<&[u8]> {
            let rest = &bytes[*pos..];
            let nl = rest.iter().position(|&b| b == b'\n')?;
            *pos += nl + 1;
            Some(&rest[..nl])
        };

        let magic = next_line(&mut pos).ok_or(ContainerError::BadMagic)?;
        if magic != CONTAINER_MAGIC.as_bytes() {
            return Err(ContainerError::BadMagic);
        }

        let mut container = Container::new();
        let mut shapes: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let mut payload_len = 0usize;
        loop {
            line_no += 1;
            let raw = next_line(&mut pos).ok_or(ContainerError::Unterminated)?;
            let header_err = |reason: String| ContainerError::Header {
                line: line_no + 1,
                reason,
            };
            let line = std::str::from_utf8(raw).map_err(|_| header_err("not UTF-8".into()))?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("attr ") {
                let (key, value) = rest.split_once(' ').unwrap_or((rest, ""));
                if !valid_token(key) || value.contains('\r') {
                    return Err(header_err(format!("bad attribute `{rest}`")));
                }
                if container.attr(key).is_some() {
                    return Err(ContainerError::Duplicate {
                        kind: "attribute",
                        name: key.to_string(),
                    });
                }
                container.attrs.push((key.to_string(), value.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let mut fields = rest.split(' ');
                let name = fields.next().unwrap_or("");
                if !valid_token(name) {
                    return Err(header_err(format!("bad tensor name `{name}`")));
                }
                let rank: usize = fields
                    .next()
                    .and_then(|r| r.parse().ok())
                    .ok_or_else(|| header_err("missing or invalid rank".into()))?;
                if rank > MAX_RANK {
                    return Err(header_err(format!("rank {rank} exceeds {MAX_RANK}")));
                }
                let dims: Vec<usize> = fields
                    .map(|d| d.parse::<usize>().ok().filter(|&v| v > 0))
                    .collect::<Option<_>>()
                    .ok_or_else(|| header_err("extents must be positive integers".into()))?;
                if dims.len() != rank {
                    return Err(header_err(format!("rank {rank} but {} extents", dims.len())));
                }
                let count = dims
                    .iter()
                    .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                    .and_then(|c| c.checked_mul(8).map(|_| c))
                    .ok_or_else(|| header_err("tensor size overflows".into()))?;
                payload_len = payload_len
                    .checked_add(count * 8)
                    .ok_or_else(|| header_err("payload size overflows".into()))?;
                if shapes.iter().any(|(n, _, _)| n == name) {
                    return Err(ContainerError::Duplicate {
                        kind: "tensor",
                        name: name.to_string(),
                    });
                }
                shapes.push((name.to_string(), dims, count));
            } else {
                return Err(header_err(format!("unrecognised line `{line}`")));
            }
        }

        let payload = &bytes[pos..];
        if payload.len() != payload_len {
            return Err(ContainerError::PayloadLength {
                expected: payload_len,
                actual: payload.len(),
            });
        }
        let mut cursor = 0;
        for (name, dims, count) in shapes {
            let data: Vec<f64> = payload[cursor..cursor + count * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            cursor += count * 8;
            let tensor = Tensor::new(dims, data).expect("extents validated above");
            container.tensors.push((name, tensor));
        }
        Ok(container)
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        fs::write(path, self.encode()).map_err(|source| ContainerError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        let bytes = fs::read(path).map_err(|source| ContainerError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes)
    }
}
