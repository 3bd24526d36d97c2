// SPDX-License-Identifier: MIT OR Apache-2.0

//! Direction bank files.
//!
//! Both encodings store reals as 32-bit floats.
//!
//! * Text: a JSON document
//!   `{"format": "valsteer-bank", "version": 1, "directions": [...]}`;
//!   each direction is `{value_id, method, normalized, layers: {"<idx>": [..]}, metadata, probes}`.
//! * Binary: the 4-byte magic `VDB1`, a little-endian `u32` header length,
//!   the same JSON document with every float array replaced by
//!   `{"offset": o, "len": n}`, then a blob of little-endian `f32` values
//!   (`offset` and `len` count floats, not bytes).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::probe::ProbeModel;
use crate::backend::PositionPolicy;
use crate::error::{Error, Result};

const FORMAT: &str = "valsteer-bank";
const VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"VDB1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pca,
    MeanDiff,
    Probe,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Pca => "pca",
            Method::MeanDiff => "mean_diff",
            Method::Probe => "probe",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(Method::Pca),
            "mean" | "mean_diff" => Ok(Method::MeanDiff),
            "probe" => Ok(Method::Probe),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetadata {
    pub train_pairs: usize,
    pub seed: u64,
    pub position_policy: PositionPolicy,
    /// Mean activation norm per layer over the estimation texts.
    #[serde(default)]
    pub mean_norms: BTreeMap<usize, f64>,
    /// Held-out probe accuracy per candidate layer (probe method).
    #[serde(default)]
    pub layer_accuracy: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueDirection {
    pub value_id: String,
    pub method: Method,
    pub normalized: bool,
    pub layers: BTreeMap<usize, Vec<f64>>,
    pub metadata: DirectionMetadata,
    #[serde(default)]
    pub probes: BTreeMap<usize, ProbeModel>,
}

impl ValueDirection {
    pub fn layer(&self, layer: usize) -> Option<&[f64]> {
        self.layers.get(&layer).map(Vec::as_slice)
    }

    pub fn layer_indices(&self) -> Vec<usize> {
        self.layers.keys().copied().collect()
    }

    /// Rounds every stored real to `f32`, as a save/load cycle would.
    pub fn quantized(&self) -> ValueDirection {
        let q = |v: &[f64]| v.iter().map(|x| *x as f32 as f64).collect::<Vec<_>>();
        let mut out = self.clone();
        for v in out.layers.values_mut() {
            *v = q(v);
        }
        for p in out.probes.values_mut() {
            p.weights = q(&p.weights);
            p.bias = p.bias as f32 as f64;
        }
        out.metadata.mean_norms.values_mut().for_each(|x| *x = *x as f32 as f64);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BankEncoding {
    #[default]
    Text,
    Binary,
}

/// Directions keyed by value id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DirectionBank {
    pub directions: BTreeMap<String, ValueDirection>,
}

impl DirectionBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, direction: ValueDirection) {
        self.directions.insert(direction.value_id.clone(), direction);
    }

    pub fn get(&self, value_id: &str) -> Option<&ValueDirection> {
        self.directions.get(value_id)
    }

    pub fn require(&self, value_id: &str) -> Result<&ValueDirection> {
        self.get(value_id)
            .ok_or_else(|| Error::MissingDirection(value_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn to_bytes(&self, encoding: BankEncoding) -> Vec<u8> {
        match encoding {
            BankEncoding::Text => {
                let doc = self.to_file(&mut None);
                let mut out = serde_json::to_vec_pretty(&doc).expect("bank serializes");
                out.push(b'\n');
                out
            }
            BankEncoding::Binary => {
                let mut blob = Some(Vec::new());
                let doc = self.to_file(&mut blob);
                let header = serde_json::to_vec(&doc).expect("bank serializes");
                let blob = blob.unwrap_or_default();
                let mut out = Vec::with_capacity(8 + header.len() + 4 * blob.len());
                out.extend_from_slice(MAGIC);
                out.extend_from_slice(&(header.len() as u32).to_le_bytes());
                out.extend_from_slice(&header);
                for x in blob {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                out
            }
        }
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        if bytes.starts_with(MAGIC) {
            if bytes.len() < 8 {
                return Err(Error::parse(context, "truncated binary header"));
            }
            let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
            let header = bytes
                .get(8..8 + len)
                .ok_or_else(|| Error::parse(context, "truncated binary header"))?;
            let rest = &bytes[8 + len..];
            if !rest.len().is_multiple_of(4) {
                return Err(Error::parse(context, "float blob is not a multiple of 4 bytes"));
            }
            let blob: Vec<f32> = rest
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let doc: BankFile =
                serde_json::from_slice(header).map_err(|e| Error::parse(context, e))?;
            Self::from_file(doc, Some(&blob), context)
        } else {
            let doc: BankFile =
                serde_json::from_slice(bytes).map_err(|e| Error::parse(context, e))?;
            Self::from_file(doc, None, context)
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, encoding: BankEncoding) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes(encoding)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    fn to_file(&self, blob: &mut Option<Vec<f32>>) -> BankFile {
        let mut floats = |v: &[f64]| -> Floats {
            let v32: Vec<f32> = v.iter().map(|x| *x as f32).collect();
            match blob {
                None => Floats::Inline(v32),
                Some(b) => {
                    let offset = b.len();
                    b.extend_from_slice(&v32);
                    Floats::Blob { offset, len: v32.len() }
                }
            }
        };
        let directions = self
            .directions
            .values()
            .map(|d| DirectionRecord {
                value_id: d.value_id.clone(),
                method: d.method,
                normalized: d.normalized,
                layers: d.layers.iter().map(|(l, v)| (*l, floats(v))).collect(),
                metadata: MetadataRecord {
                    train_pairs: d.metadata.train_pairs,
                    seed: d.metadata.seed,
                    position_policy: d.metadata.position_policy,
                    mean_norms: d
                        .metadata
                        .mean_norms
                        .iter()
                        .map(|(l, x)| (*l, *x as f32))
                        .collect(),
                    layer_accuracy: d.metadata.layer_accuracy.clone(),
                },
                probes: d
                    .probes
                    .iter()
                    .map(|(l, p)| {
                        (
                            *l,
                            ProbeRecord {
                                weights: floats(&p.weights),
                                bias: p.bias as f32,
                                seed: p.seed,
                                train_accuracy: p.train_accuracy,
                                val_accuracy: p.val_accuracy,
                            },
                        )
                    })
                    .collect(),
            })
            .collect();
        BankFile {
            format: FORMAT.to_string(),
            version: VERSION,
            directions,
        }
    }

    fn from_file(doc: BankFile, blob: Option<&[f32]>, context: &str) -> Result<Self> {
        if doc.format != FORMAT || doc.version != VERSION {
            return Err(Error::parse(
                context,
                format!("unsupported bank format {} v{}", doc.format, doc.version),
            ));
        }
        let resolve = |f: Floats| -> Result<Vec<f64>> {
            match (f, blob) {
                (Floats::Inline(v), _) => Ok(v.into_iter().map(f64::from).collect()),
                (Floats::Blob { offset, len }, Some(b)) => b
                    .get(offset..offset + len)
                    .map(|s| s.iter().map(|x| f64::from(*x)).collect())
                    .ok_or_else(|| Error::parse(context, "blob reference out of range")),
                (Floats::Blob { .. }, None) => {
                    Err(Error::parse(context, "blob reference in a text bank"))
                }
            }
        };

        let mut bank = DirectionBank::new();
        for rec in doc.directions {
            let mut layers = BTreeMap::new();
            for (l, f) in rec.layers {
                layers.insert(l, resolve(f)?);
            }
            let mut probes = BTreeMap::new();
            for (l, p) in rec.probes {
                probes.insert(
                    l,
                    ProbeModel {
                        weights: resolve(p.weights)?,
                        bias: f64::from(p.bias),
                        seed: p.seed,
                        train_accuracy: p.train_accuracy,
                        val_accuracy: p.val_accuracy,
                    },
                );
            }
            if let Some(dim) = layers.values().next().map(Vec::len) {
                if let Some(bad) = layers.values().chain(probes.values().map(|p| &p.weights)).find(|v| v.len() != dim) {
                    return Err(Error::validation(
                        &rec.value_id,
                        format!("vector of length {} in a bank of dimension {dim}", bad.len()),
                    ));
                }
            }
            if rec.normalized {
                if let Some((l, _)) = layers
                    .iter()
                    .find(|(_, v)| (crate::linalg::norm(v) - 1.0).abs() > 1e-6)
                {
                    return Err(Error::validation(
                        format!("{} layer {l}", rec.value_id),
                        "normalized direction is not unit length",
                    ));
                }
            }
            bank.insert(ValueDirection {
                value_id: rec.value_id,
                method: rec.method,
                normalized: rec.normalized,
                layers,
                metadata: DirectionMetadata {
                    train_pairs: rec.metadata.train_pairs,
                    seed: rec.metadata.seed,
                    position_policy: rec.metadata.position_policy,
                    mean_norms: rec
                        .metadata
                        .mean_norms
                        .into_iter()
                        .map(|(l, x)| (l, f64::from(x)))
                        .collect(),
                    layer_accuracy: rec.metadata.layer_accuracy,
                },
                probes,
            });
        }
        Ok(bank)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Floats {
    Inline(Vec<f32>),
    Blob { offset: usize, len: usize },
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    format: String,
    version: u32,
    directions: Vec<DirectionRecord>,
}

#[derive(Serialize, Deserialize)]
struct DirectionRecord {
    value_id: String,
    method: Method,
    normalized: bool,
    layers: BTreeMap<usize, Floats>,
    metadata: MetadataRecord,
    #[serde(default)]
    probes: BTreeMap<usize, ProbeRecord>,
}

#[derive(Serialize, Deserialize)]
struct MetadataRecord {
    train_pairs: usize,
    seed: u64,
    position_policy: PositionPolicy,
    #[serde(default)]
    mean_norms: BTreeMap<usize, f32>,
    #[serde(default)]
    layer_accuracy: BTreeMap<usize, f64>,
}

#[derive(Serialize, Deserialize)]
struct ProbeRecord {
    weights: Floats,
    bias: f32,
    seed: u64,
    train_accuracy: f64,
    #[serde(default)]
    val_accuracy: Option<f64>,
}
