//! Single-file checkpoint reader/writer.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header mapping
//! each tensor name to `{dtype, shape, data_offsets}` (plus an optional
//! `__metadata__` string map), then the raw little-endian tensor bytes.
//! Offsets are relative to the start of the data section.
//!
//! Values are held as `f64` in memory regardless of the stored dtype; the
//! stored dtype is remembered so that saving writes the same dtype back.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use half::{bf16, f16};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F16,
    BF16,
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F16 | DType::BF16 => 2,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "F16" => DType::F16,
            "BF16" => DType::BF16,
            "F32" => DType::F32,
            "F64" => DType::F64,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F16 => "F16",
            DType::BF16 => "BF16",
            DType::F32 => "F32",
            DType::F64 => "F64",
        }
    }

    /// Rounds an `f64` to the nearest value representable in this dtype.
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F16 => f16::from_f64(v).to_f64(),
            DType::BF16 => bf16::from_f64(v).to_f64(),
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    fn decode(self, bytes: &[u8], out: &mut Vec<f64>) {
        match self {
            DType::F16 => out.extend(
                bytes
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64()),
            ),
            DType::BF16 => out.extend(
                bytes
                    .chunks_exact(2)
                    .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f64()),
            ),
            DType::F32 => out.extend(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64),
            ),
            DType::F64 => out.extend(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap())),
            ),
        }
    }

    /// Appends the encoding of `v`; returns `false` if the rounded value is
    /// not finite in this dtype.
    fn encode(self, v: f64, out: &mut Vec<u8>) -> bool {
        match self {
            DType::F16 => {
                let h = f16::from_f64(v);
                out.extend_from_slice(&h.to_le_bytes());
                h.is_finite()
            }
            DType::BF16 => {
                let h = bf16::from_f64(v);
                out.extend_from_slice(&h.to_le_bytes());
                h.is_finite()
            }
            DType::F32 => {
                let f = v as f32;
                out.extend_from_slice(&f.to_le_bytes());
                f.is_finite()
            }
            DType::F64 => {
                out.extend_from_slice(&v.to_le_bytes());
                v.is_finite()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorData {
    pub fn new(dtype: DType, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Dimension {
                op: "tensor construction",
                left: shape,
                right: vec![values.len()],
            });
        }
        Ok(Self {
            dtype,
            shape,
            values,
        })
    }

    pub fn from_matrix(m: &Matrix, dtype: DType) -> Self {
        Self {
            dtype,
            shape: vec![m.rows(), m.cols()],
            values: m.data().to_vec(),
        }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// The tensor as a matrix, if it has rank 2.
    pub fn matrix(&self) -> Option<Matrix> {
        match self.shape[..] {
            [r, c] => Matrix::new(r, c, self.values.clone()).ok(),
            _ => None,
        }
    }

    /// Values rounded to the stored dtype.
    pub fn rounded(&self) -> TensorData {
        TensorData {
            dtype: self.dtype,
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| self.dtype.round(v)).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, TensorData>,
    pub metadata: Option<BTreeMap<String, String>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: TensorData) -> Option<TensorData> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Tensors in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorData)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.get(name).ok_or_else(|| Error::Integrity {
            tensor: name.to_string(),
            message: "tensor not present".into(),
        })?;
        t.matrix().ok_or_else(|| Error::Integrity {
            tensor: name.to_string(),
            message: format!("expected rank 2, found shape {:?}", t.shape),
        })
    }

    /// Applies prefix rewrite rules to every tensor name (first match wins).
    pub fn remap_names(self, rules: &[RemapRule]) -> Self {
        if rules.is_empty() {
            return self;
        }
        let tensors = self
            .tensors
            .into_iter()
            .map(|(name, t)| {
                let renamed = rules
                    .iter()
                    .find_map(|r| {
                        name.strip_prefix(r.from.as_str())
                            .map(|rest| format!("{}{rest}", r.to))
                    })
                    .unwrap_or(name);
                (renamed, t)
            })
            .collect();
        Self {
            tensors,
            metadata: self.metadata,
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Parse {
                offset: 0,
                message: format!("file is {} bytes, shorter than the length prefix", bytes.len()),
            });
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let available = (bytes.len() - 8) as u64;
        if header_len > available {
            return Err(Error::Parse {
                offset: 0,
                message: format!("header length {header_len} exceeds remaining {available} bytes"),
            });
        }
        let header_end = 8 + header_len as usize;
        let header = &bytes[8..header_end];
        let text = std::str::from_utf8(header).map_err(|e| Error::Parse {
            offset: 8 + e.valid_up_to() as u64,
            message: "header is not valid UTF-8".into(),
        })?;
        let map: Map<String, Value> = serde_json::from_str(text).map_err(|e| Error::Parse {
            offset: 8 + json_error_offset(text, &e),
            message: e.to_string(),
        })?;
        let data = &bytes[header_end..];

        let mut ckpt = Checkpoint::new();
        let mut spans: Vec<(usize, usize, String)> = Vec::new();
        for (name, entry) in map {
            if name == METADATA_KEY {
                let meta: BTreeMap<String, String> =
                    serde_json::from_value(entry).map_err(|e| Error::Parse {
                        offset: 8,
                        message: format!("{METADATA_KEY}: {e}"),
                    })?;
                ckpt.metadata = Some(meta);
                continue;
            }
            let raw: RawEntry = serde_json::from_value(entry).map_err(|e| Error::Parse {
                offset: 8,
                message: format!("tensor {name:?}: {e}"),
            })?;
            let dtype = DType::parse(&raw.dtype).ok_or_else(|| Error::Parse {
                offset: 8,
                message: format!("tensor {name:?}: unsupported dtype {:?}", raw.dtype),
            })?;
            let integrity = |message: String| Error::Integrity {
                tensor: name.clone(),
                message,
            };
            let [begin, end] = raw.data_offsets;
            let numel = raw
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| integrity("shape overflows".into()))?;
            let expected = numel
                .checked_mul(dtype.size())
                .ok_or_else(|| integrity("shape overflows".into()))?;
            if end < begin || end - begin != expected {
                return Err(integrity(format!(
                    "offsets [{begin}, {end}) hold {} bytes but shape {:?} of {} needs {expected}",
                    end.saturating_sub(begin),
                    raw.shape,
                    dtype.as_str()
                )));
            }
            if end > data.len() {
                return Err(integrity(format!(
                    "data section truncated: tensor ends at {end}, section has {} bytes",
                    data.len()
                )));
            }
            let mut values = Vec::with_capacity(numel);
            dtype.decode(&data[begin..end], &mut values);
            spans.push((begin, end, name.clone()));
            ckpt.tensors.insert(
                name,
                TensorData {
                    dtype,
                    shape: raw.shape,
                    values,
                },
            );
        }

        spans.sort();
        let mut cursor = 0;
        for (begin, end, name) in &spans {
            if *begin != cursor {
                return Err(Error::Integrity {
                    tensor: name.clone(),
                    message: format!("data starts at {begin}, expected {cursor} (gap or overlap)"),
                });
            }
            cursor = *end;
        }
        if cursor != data.len() {
            return Err(Error::Integrity {
                tensor: spans.last().map(|s| s.2.clone()).unwrap_or_default(),
                message: format!("{} trailing bytes after last tensor", data.len() - cursor),
            });
        }
        Ok(ckpt)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Map::new();
        if let Some(meta) = &self.metadata {
            header.insert(METADATA_KEY.into(), serde_json::to_value(meta)?);
        }
        let mut data = Vec::new();
        for (name, t) in &self.tensors {
            let begin = data.len();
            for (index, &v) in t.values.iter().enumerate() {
                if !v.is_finite() || !t.dtype.encode(v, &mut data) {
                    return Err(Error::NonFinite {
                        tensor: name.clone(),
                        index,
                    });
                }
            }
            header.insert(
                name.clone(),
                serde_json::json!({
                    "dtype": t.dtype.as_str(),
                    "shape": t.shape,
                    "data_offsets": [begin, data.len()],
                }),
            );
        }
        let mut header = serde_json::to_vec(&Value::Object(header))?;
        while header.len() % 8 != 0 {
            header.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + header.len() + data.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }
}

#[derive(Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

fn json_error_offset(text: &str, e: &serde_json::Error) -> u64 {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(e.line().saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + e.column().saturating_sub(1)) as u64
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemapRule {
    pub from: String,
    pub to: String,
}

/// Input description for a merge: one pretrained checkpoint and its experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub pretrained: PathBuf,
    pub experts: Vec<PathBuf>,
    #[serde(default)]
    pub lora: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub name_remap: Vec<RemapRule>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() {
            return Err(Error::Config("manifest lists no experts".into()));
        }
        Ok(())
    }

    /// Parses a manifest; relative paths resolve against the manifest's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m: Manifest = serde_json::from_slice(&fs::read(path)?)?;
        m.validate()?;
        if let Some(dir) = path.parent() {
            let resolve = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            resolve(&mut m.pretrained);
            m.experts.iter_mut().for_each(resolve);
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeMismatch {
    pub name: String,
    pub pretrained: Vec<usize>,
    pub expert: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExpertCompatibility {
    pub expert: usize,
    /// In the pretrained checkpoint but absent from the expert.
    pub missing: Vec<String>,
    /// In the expert but absent from the pretrained checkpoint.
    pub extra: Vec<String>,
    pub shape_mismatches: Vec<ShapeMismatch>,
}

impl ExpertCompatibility {
    pub fn is_compatible(&self) -> bool {
        self.missing.is_empty() && self.extra.is_empty() && self.shape_mismatches.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CompatibilityReport {
    pub experts: Vec<ExpertCompatibility>,
}

impl CompatibilityReport {
    pub fn is_compatible(&self) -> bool {
        self.experts.iter().all(ExpertCompatibility::is_compatible)
    }

    pub fn into_result(self) -> Result<()> {
        match self.experts.iter().find(|e| !e.is_compatible()) {
            None => Ok(()),
            Some(e) => Err(Error::Incompatible(format!(
                "expert {}: missing {:?}, extra {:?}, shape mismatches {:?}",
                e.expert,
                e.missing,
                e.extra,
                e.shape_mismatches
                    .iter()
                    .map(|m| format!("{} {:?} vs {:?}", m.name, m.pretrained, m.expert))
                    .collect::<Vec<_>>()
            ))),
        }
    }
}

pub fn validate_compatible(pretrained: &Checkpoint, experts: &[Checkpoint]) -> CompatibilityReport {
    let base: BTreeSet<&str> = pretrained.names().collect();
    let experts = experts
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let names: BTreeSet<&str> = e.names().collect();
            ExpertCompatibility {
                expert: i,
                missing: base.difference(&names).map(|s| s.to_string()).collect(),
                extra: names.difference(&base).map(|s| s.to_string()).collect(),
                shape_mismatches: base
                    .intersection(&names)
                    .filter_map(|&n| {
                        let (p, x) = (&pretrained.get(n).unwrap().shape, &e.get(n).unwrap().shape);
                        (p != x).then(|| ShapeMismatch {
                            name: n.to_string(),
                            pretrained: p.clone(),
                            expert: x.clone(),
                        })
                    })
                    .collect(),
            }
        })
        .collect();
    CompatibilityReport { experts }
}
