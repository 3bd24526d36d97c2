// SPDX-License-Identifier: MIT OR Apache-2.0

//! Value taxonomy and context-controlled contrastive datasets.
//!
//! The taxonomy manifest is a JSON document:
//!
//! ```json
//! { "version": "1.0.0",
//!   "expected_counts": { "schwartz": 10, ... },
//!   "values": [ { "id": "benevolence", "display_name": "Benevolence",
//!                 "category": "schwartz", "description": "..." } ] }
//! ```
//!
//! Contrastive corpora are JSON lines of
//! `{value_id, scenario_id, positive, negative}`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_MANIFEST: &str = include_str!("../data/taxonomy.json");
const SAMPLE_CORPUS: &str = include_str!("../data/contrastive_sample.jsonl");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Schwartz,
    Cultural,
    MoralTheory,
    AiSafety,
    NonWeird,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Schwartz,
        Category::Cultural,
        Category::MoralTheory,
        Category::AiSafety,
        Category::NonWeird,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Schwartz => "schwartz",
            Category::Cultural => "cultural",
            Category::MoralTheory => "moral_theory",
            Category::AiSafety => "ai_safety",
            Category::NonWeird => "non_weird",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueSpec {
    pub id: String,
    pub display_name: String,
    pub category: Category,
    /// Statement used for relevance scoring and coverage checks.
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueTaxonomy {
    pub version: String,
    pub expected_counts: BTreeMap<Category, usize>,
    pub values: Vec<ValueSpec>,
}

// Raw manifest with the category as a string so unknown categories produce a
// validation error naming the entry instead of a bare serde failure.
#[derive(Deserialize)]
struct RawManifest {
    version: String,
    expected_counts: BTreeMap<String, usize>,
    values: Vec<RawValue>,
}

#[derive(Deserialize)]
struct RawValue {
    id: String,
    display_name: String,
    category: String,
    description: String,
}

fn parse_category(s: &str) -> Option<Category> {
    Category::ALL.into_iter().find(|c| c.as_str() == s)
}

/// True for lowercase snake identifiers: `[a-z][a-z0-9_]*`.
pub fn is_value_id(id: &str) -> bool {
    let mut chars = id.chars();
    matches!(chars.next(), Some('a'..='z'))
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

impl ValueTaxonomy {
    /// The bundled 31-value taxonomy.
    pub fn default_manifest() -> Self {
        Self::from_json_str(DEFAULT_MANIFEST, "bundled taxonomy")
            .expect("bundled taxonomy manifest is valid")
    }

    pub fn from_json_str(text: &str, context: &str) -> Result<Self> {
        let raw: RawManifest = serde_json::from_str(text).map_err(|e| Error::parse(context, e))?;

        let mut expected_counts = BTreeMap::new();
        for (name, count) in raw.expected_counts {
            let cat = parse_category(&name).ok_or_else(|| {
                Error::validation(format!("expected_counts.{name}"), "unknown category")
            })?;
            expected_counts.insert(cat, count);
        }

        let mut values = Vec::with_capacity(raw.values.len());
        for v in raw.values {
            let category = parse_category(&v.category).ok_or_else(|| {
                Error::validation(&v.id, format!("unknown category {:?}", v.category))
            })?;
            values.push(ValueSpec {
                id: v.id,
                display_name: v.display_name,
                category,
                description: v.description,
            });
        }

        let taxonomy = ValueTaxonomy {
            version: raw.version,
            expected_counts,
            values,
        };
        taxonomy.validate()?;
        Ok(taxonomy)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut duplicates = Vec::new();
        for v in &self.values {
            if !is_value_id(&v.id) {
                return Err(Error::validation(&v.id, "id must be a lowercase snake identifier"));
            }
            if v.description.trim().is_empty() {
                return Err(Error::validation(&v.id, "empty description"));
            }
            if !seen.insert(v.id.as_str()) {
                duplicates.push(v.id.clone());
            }
        }
        if !duplicates.is_empty() {
            return Err(Error::validation(
                duplicates.join(", "),
                "duplicate value id",
            ));
        }

        for cat in Category::ALL {
            let actual = self.values.iter().filter(|v| v.category == cat).count();
            let expected = self.expected_counts.get(&cat).copied().unwrap_or(0);
            if actual != expected {
                return Err(Error::validation(
                    format!("category {cat}"),
                    format!("declared {expected} values, found {actual}"),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ValueSpec> {
        self.values.iter().find(|v| v.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get(id).is_some()
    }

    pub fn count_by_category(&self) -> BTreeMap<Category, usize> {
        let mut counts = BTreeMap::new();
        for v in &self.values {
            *counts.entry(v.category).or_insert(0) += 1;
        }
        counts
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("taxonomy serializes")
    }
}

/// Loads and validates a taxonomy manifest.
pub fn load_taxonomy(path: impl AsRef<Path>) -> Result<ValueTaxonomy> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ValueTaxonomy::from_json_str(&text, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub value_id: String,
    pub scenario_id: String,
    pub positive: String,
    pub negative: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveDataset {
    pub value_id: String,
    pub pairs: Vec<ContrastivePair>,
    pub split_seed: u64,
}

impl ContrastiveDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positives(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.positive.as_str()).collect()
    }

    pub fn negatives(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.negative.as_str()).collect()
    }
}

/// Parses a JSONL contrastive corpus and groups it by value.
pub fn parse_contrastive_jsonl(
    text: &str,
    taxonomy: &ValueTaxonomy,
    context: &str,
) -> Result<BTreeMap<String, ContrastiveDataset>> {
    let mut out: BTreeMap<String, ContrastiveDataset> = BTreeMap::new();
    let mut keys = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry = format!("{context}:{}", lineno + 1);
        let pair: ContrastivePair =
            serde_json::from_str(line).map_err(|e| Error::parse(&entry, e))?;
        if !taxonomy.contains(&pair.value_id) {
            return Err(Error::validation(
                entry,
                format!("unknown value_id {:?}", pair.value_id),
            ));
        }
        if pair.positive.trim().is_empty() || pair.negative.trim().is_empty() {
            return Err(Error::validation(entry, "empty positive or negative text"));
        }
        if pair.positive == pair.negative {
            return Err(Error::validation(entry, "positive and negative texts are identical"));
        }
        if !keys.insert((pair.value_id.clone(), pair.scenario_id.clone())) {
            return Err(Error::validation(
                entry,
                format!(
                    "duplicate (value_id, scenario_id) = ({}, {})",
                    pair.value_id, pair.scenario_id
                ),
            ));
        }
        out.entry(pair.value_id.clone())
            .or_insert_with(|| ContrastiveDataset {
                value_id: pair.value_id.clone(),
                pairs: Vec::new(),
                split_seed: 0,
            })
            .pairs
            .push(pair);
    }
    Ok(out)
}

pub fn load_contrastive_dataset(
    path: impl AsRef<Path>,
    taxonomy: &ValueTaxonomy,
) -> Result<BTreeMap<String, ContrastiveDataset>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_contrastive_jsonl(&text, taxonomy, &path.display().to_string())
}

/// The synthetic smoke corpus shipped with the crate, grouped by value.
pub fn sample_corpus(taxonomy: &ValueTaxonomy) -> Result<BTreeMap<String, ContrastiveDataset>> {
    parse_contrastive_jsonl(SAMPLE_CORPUS, taxonomy, "bundled corpus")
}

pub fn write_contrastive_jsonl<'a>(pairs: impl IntoIterator<Item = &'a ContrastivePair>) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p).expect("pair serializes"));
        out.push('\n');
    }
    out
}

/// Splits a dataset into train and validation parts, keeping pairs whole.
/// Deterministic for a fixed seed (ChaCha8 stream).
pub fn split_pairs(
    ds: &ContrastiveDataset,
    fraction: f64,
    seed: u64,
) -> Result<(ContrastiveDataset, ContrastiveDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = ds.pairs.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "dataset for {} has {n} pair(s); at least 2 are needed to split",
            ds.value_id
        )));
    }
    let n_train = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let (train_idx, val_idx) = order.split_at(n_train);
    let mut train_idx = train_idx.to_vec();
    let mut val_idx = val_idx.to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();

    let pick = |idx: &[usize]| ContrastiveDataset {
        value_id: ds.value_id.clone(),
        pairs: idx.iter().map(|&i| ds.pairs[i].clone()).collect(),
        split_seed: seed,
    };
    Ok((pick(&train_idx), pick(&val_idx)))
}
