//! Binary container shared by every dump the crate writes.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size | content |
//! |---|---|---|
//! | 0 | 8 | magic `TRIMF32\0` |
//! | 8 | 8 | `u64` manifest length `L` in bytes |
//! | 16 | `L` | UTF-8 JSON manifest |
//! | 16 + L | `4 * n` | `f32` payload |
//!
//! The manifest is an object with a mandatory `version` (currently 1), a
//! `kind` string naming the content, free-form `meta`, and `arrays`: a
//! list of `{ "name", "shape" }` entries. The payload holds the arrays
//! back to back in manifest order, each in row-major order, so
//! `n = sum(product(shape))`. Trailing bytes after the payload are an
//! error.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const MAGIC: [u8; 8] = *b"TRIMF32\0";
pub const VERSION: u32 = 1;
/// Manifests larger than this are rejected before allocation.
const MAX_MANIFEST: u64 = 1 << 30;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 8]),
    #[error("unsupported container version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("payload truncated: manifest declares {expected} values, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} unexpected bytes after the payload")]
    Trailing(usize),
    #[error("expected a `{expected}` container, found `{found}`")]
    Kind { expected: String, found: String },
    #[error("array `{0}` missing")]
    MissingArray(String),
    #[error("array `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid content: {0}")]
    Content(String),
}

pub type Result<T> = std::result::Result<T, FormatError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ArraySpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    kind: String,
    #[serde(default)]
    meta: Value,
    arrays: Vec<ArraySpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub spec: ArraySpec,
    pub data: Vec<f32>,
}

/// In-memory form of one container file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub arrays: Vec<Array>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            arrays: Vec::new(),
        }
    }

    /// Appends an array; `data.len()` must equal the product of `shape`.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let spec = ArraySpec {
            name: name.into(),
            shape,
        };
        if spec.len() != data.len() {
            return Err(FormatError::Shape {
                name: spec.name,
                expected: spec.shape,
                found: vec![data.len()],
            });
        }
        self.arrays.push(Array { spec, data });
        Ok(())
    }

    pub fn push_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f64]) -> Result<()> {
        self.push(name, shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn array(&self, name: &str) -> Result<&Array> {
        self.arrays
            .iter()
            .find(|a| a.spec.name == name)
            .ok_or_else(|| FormatError::MissingArray(name.to_owned()))
    }

    /// Array `name`, checked against `shape`.
    pub fn array_shaped(&self, name: &str, shape: &[usize]) -> Result<&[f32]> {
        let a = self.array(name)?;
        if a.spec.shape != shape {
            return Err(FormatError::Shape {
                name: name.to_owned(),
                expected: shape.to_vec(),
                found: a.spec.shape.clone(),
            });
        }
        Ok(&a.data)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(FormatError::Kind {
                expected: kind.to_owned(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let manifest = Manifest {
            version: VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: self.arrays.iter().map(|a| a.spec.clone()).collect(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| FormatError::Manifest(e.to_string()))?;
        w.write_all(&MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for a in &self.arrays {
            for v in &a.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len);
        if len > MAX_MANIFEST {
            return Err(FormatError::Manifest(format!("manifest length {len} too large")));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json)
            .map_err(|_| FormatError::Manifest("manifest shorter than its declared length".into()))?;
        let raw: Value = serde_json::from_slice(&json).map_err(|e| FormatError::Manifest(e.to_string()))?;
        let found = raw
            .get("version")
            .and_then(Value::as_u64)
            .ok_or_else(|| FormatError::Manifest("missing `version`".into()))?;
        if found != u64::from(VERSION) {
            return Err(FormatError::Version {
                found: u32::try_from(found).unwrap_or(u32::MAX),
            });
        }
        let manifest: Manifest = serde_json::from_value(raw).map_err(|e| FormatError::Manifest(e.to_string()))?;

        let expected: usize = manifest.arrays.iter().map(ArraySpec::len).sum();
        let mut bytes = Vec::with_capacity(expected * 4);
        r.read_to_end(&mut bytes)?;
        if bytes.len() < expected * 4 {
            return Err(FormatError::Truncated {
                expected,
                found: bytes.len() / 4,
            });
        }
        if bytes.len() > expected * 4 {
            return Err(FormatError::Trailing(bytes.len() - expected * 4));
        }
        let mut values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let arrays = manifest
            .arrays
            .into_iter()
            .map(|spec| {
                let data = values.by_ref().take(spec.len()).collect();
                Array { spec, data }
            })
            .collect();
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Reads a required field of `meta` into `T`.
pub fn meta_field<T: serde::de::DeserializeOwned>(meta: &Value, key: &str) -> Result<T> {
    let v = meta
        .get(key)
        .ok_or_else(|| FormatError::Manifest(format!("meta field `{key}` missing")))?;
    serde_json::from_value(v.clone()).map_err(|e| FormatError::Manifest(format!("meta field `{key}`: {e}")))
}
