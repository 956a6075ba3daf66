//! Binary checkpoint format.
//!
//! ```text
//! BARNN1
//! @key value          (zero or more metadata lines)
//! name d1 d2 ...      (one line per parameter, fixed order)
//!                     (blank line)
//! <little-endian f64 payload, parameters concatenated>
//! ```

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &str = "BARNN1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint version mismatch: expected {expected:?}, found {found:?}")]
    Version { expected: &'static str, found: String },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("parameter {name}: header declares {declared} values but payload holds {available}")]
    Length {
        name: String,
        declared: usize,
        available: usize,
    },
    #[error("{0} trailing bytes after the last parameter")]
    Trailing(usize),
    #[error("malformed header line {line:?}: {detail}")]
    Header { line: String, detail: String },
    #[error("missing parameter {0}")]
    Missing(String),
    #[error("missing metadata key {0}")]
    MissingMeta(String),
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

type CkResult<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> CkResult<&str> {
        self.meta(key).ok_or_else(|| CheckpointError::MissingMeta(key.to_string()))
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.params.push((name.into(), t.clone()));
    }

    pub fn param(&self, name: &str) -> CkResult<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    /// Copies the stored parameter into `dst`, which fixes the expected shape.
    pub fn load_into(&self, name: &str, dst: &mut Tensor) -> CkResult<()> {
        let src = self.param(name)?;
        if src.shape() != dst.shape() {
            return Err(CheckpointError::Shape {
                name: name.to_string(),
                expected: dst.shape().to_vec(),
                found: src.shape().to_vec(),
            });
        }
        *dst = src.clone();
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        for (k, v) in &self.meta {
            out.extend_from_slice(format!("@{k} {v}\n").as_bytes());
        }
        for (name, t) in &self.params {
            let mut line = name.clone();
            for d in t.shape() {
                line.push(' ');
                line.push_str(&d.to_string());
            }
            line.push('\n');
            out.extend_from_slice(line.as_bytes());
        }
        out.push(b'\n');
        for (_, t) in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CkResult<Self> {
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> CkResult<String> {
            let rest = &bytes[*pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| CheckpointError::Truncated("header ends without a blank line".into()))?;
            *pos += end + 1;
            String::from_utf8(rest[..end].to_vec()).map_err(|_| CheckpointError::Header {
                line: String::from_utf8_lossy(&rest[..end]).into_owned(),
                detail: "not valid UTF-8".into(),
            })
        };

        let first = match next_line(&mut pos) {
            Ok(l) => l,
            Err(_) if !bytes.starts_with(MAGIC.as_bytes()) => {
                return Err(CheckpointError::Version {
                    expected: MAGIC,
                    found: String::from_utf8_lossy(&bytes[..bytes.len().min(16)]).into_owned(),
                })
            }
            Err(e) => return Err(e),
        };
        if first != MAGIC {
            return Err(CheckpointError::Version {
                expected: MAGIC,
                found: first,
            });
        }

        let mut ck = Checkpoint::new();
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let line = next_line(&mut pos)?;
            if line.is_empty() {
                break;
            }
            if let Some(rest) = line.strip_prefix('@') {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.push((k.to_string(), v.to_string()));
                continue;
            }
            let mut parts = line.split(' ');
            let name = parts.next().unwrap_or_default().to_string();
            let shape = parts
                .map(|p| p.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CheckpointError::Header {
                    line: line.clone(),
                    detail: e.to_string(),
                })?;
            if name.is_empty() {
                return Err(CheckpointError::Header {
                    line,
                    detail: "empty parameter name".into(),
                });
            }
            shapes.push((name, shape));
        }

        for (name, shape) in shapes {
            let declared: usize = shape.iter().product();
            let available = (bytes.len() - pos) / 8;
            if declared > available {
                return Err(CheckpointError::Length {
                    name,
                    declared,
                    available,
                });
            }
            let data = bytes[pos..pos + declared * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += declared * 8;
            let t = Tensor::new(shape, data).expect("length checked above");
            ck.params.push((name, t));
        }
        if pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - pos));
        }
        Ok(ck)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from(mut r: impl Read) -> crate::Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Ok(Self::from_bytes(&bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("variant", "barnn-tvamp");
        ck.push("lift.weight", &Tensor::from_fn([3, 2], |i| i as f64 * 0.1 - 0.25));
        ck.push("lift.bias", &Tensor::vector(vec![f64::MIN_POSITIVE, -0.0]));
        ck.push("scale", &Tensor::scalar(std::f64::consts::PI));
        ck
    }

    #[test]
    fn roundtrip_is_lossless_and_byte_stable() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta("variant"), Some("barnn-tvamp"));
        for ((n1, a), (n2, b)) in ck.params.iter().zip(&back.params) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("BARNN1\n@variant barnn-tvamp\nlift.weight 3 2\nlift.bias 2\nscale\n\n"));
    }

    #[test]
    fn truncated_payload_names_parameter() {
        let bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        match err {
            CheckpointError::Length { name, .. } => assert_eq!(name, "scale"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn truncated_header_and_trailing_bytes() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..20]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0u8; 8]);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(CheckpointError::Trailing(8))));
    }

    #[test]
    fn version_mismatch_names_expected() {
        let mut bytes = sample().to_bytes();
        bytes[5] = b'2';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, CheckpointError::Version { .. }));
        assert!(err.to_string().contains("BARNN1"));
        assert!(matches!(
            Checkpoint::from_bytes(b"garbage"),
            Err(CheckpointError::Version { .. })
        ));
    }

    #[test]
    fn shape_checked_on_load_into() {
        let ck = sample();
        let mut wrong = Tensor::zeros([2, 3]);
        assert!(matches!(
            ck.load_into("lift.weight", &mut wrong),
            Err(CheckpointError::Shape { .. })
        ));
        assert!(matches!(ck.param("nope"), Err(CheckpointError::Missing(_))));
    }
}
