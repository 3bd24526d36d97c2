// SPDX-License-Identifier: MIT OR Apache-2.0

//! Value relevance scoring and Top-k gating.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::value_pool::ValueTaxonomy;
use crate::wire::LineClient;

/// Default number of gated values.
pub const DEFAULT_K: usize = 6;

/// Default hypothesis for the entailment scorer; `{description}` is replaced
/// by the value description.
pub const DEFAULT_HYPOTHESIS: &str = "This situation involves the value of {description}.";

/// Scores how relevant a value (given by its description) is to an input.
///
/// Scores lie in `[0, 1]`. Implementations must be deterministic for fixed
/// inputs.
pub trait RelevanceScorer {
    fn score(&self, input: &str, value_description: &str) -> Result<f64>;

    /// Whether one instance may be used from several threads at once.
    fn share_safe(&self) -> bool {
        false
    }
}

impl<S: RelevanceScorer + ?Sized> RelevanceScorer for &S {
    fn score(&self, input: &str, value_description: &str) -> Result<f64> {
        (**self).score(input, value_description)
    }

    fn share_safe(&self) -> bool {
        (**self).share_safe()
    }
}

impl<S: RelevanceScorer + ?Sized> RelevanceScorer for Box<S> {
    fn score(&self, input: &str, value_description: &str) -> Result<f64> {
        (**self).score(input, value_description)
    }

    fn share_safe(&self) -> bool {
        (**self).share_safe()
    }
}

const STOPWORDS: &[&str] = &[
    "the", "and", "for", "with", "that", "this", "are", "was", "from", "one", "ones", "its",
    "their", "them", "they", "into", "onto", "such", "than", "then", "not", "but", "all", "any",
    "who", "whom", "which", "what", "about", "over", "under", "own", "has", "have", "had",
];

fn content_tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .map(str::to_lowercase)
        .filter(|t| t.chars().count() >= 3 && !STOPWORDS.contains(&t.as_str()))
        .collect()
}

/// Offline stand-in for an entailment model: Jaccard similarity between the
/// content-word sets of the input and the value description.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalScorer;

impl RelevanceScorer for LexicalScorer {
    fn score(&self, input: &str, value_description: &str) -> Result<f64> {
        let a = content_tokens(input);
        let b = content_tokens(value_description);
        let union = a.union(&b).count();
        if union == 0 {
            return Ok(0.0);
        }
        Ok(a.intersection(&b).count() as f64 / union as f64)
    }

    fn share_safe(&self) -> bool {
        true
    }
}

/// Looks scores up by value description; unknown descriptions get `default`.
#[derive(Debug, Clone, Default)]
pub struct TableScorer {
    pub table: HashMap<String, f64>,
    pub default: f64,
}

impl TableScorer {
    pub fn new(table: impl IntoIterator<Item = (String, f64)>) -> Self {
        TableScorer {
            table: table.into_iter().collect(),
            default: 0.0,
        }
    }
}

impl RelevanceScorer for TableScorer {
    fn score(&self, _input: &str, value_description: &str) -> Result<f64> {
        Ok(self
            .table
            .get(value_description)
            .copied()
            .unwrap_or(self.default))
    }

    fn share_safe(&self) -> bool {
        true
    }
}

#[derive(Serialize)]
struct EntailmentRequest<'a> {
    premise: &'a str,
    hypothesis: &'a str,
}

#[derive(Deserialize)]
struct EntailmentResponse {
    entailment: f64,
}

/// Client for an external entailment service speaking line-delimited JSON:
/// `{"premise", "hypothesis"}` in, `{"entailment"}` out.
#[derive(Debug, Clone)]
pub struct NliScorer {
    client: LineClient,
    pub hypothesis_template: String,
}

impl NliScorer {
    pub fn new(endpoint: impl Into<String>) -> Self {
        NliScorer {
            client: LineClient::new(endpoint),
            hypothesis_template: DEFAULT_HYPOTHESIS.to_string(),
        }
    }

    pub fn with_template(mut self, template: impl Into<String>) -> Self {
        self.hypothesis_template = template.into();
        self
    }

    pub fn hypothesis(&self, description: &str) -> String {
        self.hypothesis_template.replace("{description}", description)
    }
}

impl RelevanceScorer for NliScorer {
    fn score(&self, input: &str, value_description: &str) -> Result<f64> {
        let hypothesis = self.hypothesis(value_description);
        let resp: EntailmentResponse = self.client.request(&EntailmentRequest {
            premise: input,
            hypothesis: &hypothesis,
        })?;
        Ok(resp.entailment)
    }

    fn share_safe(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedValue {
    pub value_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub input_id: String,
    /// Top-k values, descending score, ties by ascending id.
    pub ranked: Vec<RankedValue>,
    pub k: usize,
    /// Raw scores for every taxonomy value from the exhaustive scoring pass.
    pub scores: BTreeMap<String, f64>,
}

impl GateResult {
    pub fn value_ids(&self) -> impl Iterator<Item = &str> {
        self.ranked.iter().map(|r| r.value_id.as_str())
    }

    pub fn contains(&self, value_id: &str) -> bool {
        self.ranked.iter().any(|r| r.value_id == value_id)
    }

    pub fn score_of(&self, value_id: &str) -> Option<f64> {
        self.scores.get(value_id).copied()
    }
}

fn score_all(
    input: &str,
    taxonomy: &ValueTaxonomy,
    scorer: &dyn RelevanceScorer,
) -> Result<Vec<RankedValue>> {
    let mut all = Vec::with_capacity(taxonomy.len());
    for v in &taxonomy.values {
        let score = scorer
            .score(input, &v.description)
            .map_err(|e| Error::Scorer {
                value_id: v.id.clone(),
                message: e.to_string(),
            })?;
        if !score.is_finite() {
            return Err(Error::Scorer {
                value_id: v.id.clone(),
                message: format!("non-finite score {score}"),
            });
        }
        all.push(RankedValue {
            value_id: v.id.clone(),
            score,
        });
    }
    all.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.value_id.cmp(&b.value_id)));
    Ok(all)
}

/// Scores every taxonomy value against `input` and keeps the `k` best.
pub fn gate_top_k(
    input_id: &str,
    input: &str,
    taxonomy: &ValueTaxonomy,
    scorer: &dyn RelevanceScorer,
    k: usize,
) -> Result<GateResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if taxonomy.is_empty() {
        return Err(Error::InvalidArgument("taxonomy is empty".into()));
    }
    let all = score_all(input, taxonomy, scorer)?;
    let scores = all.iter().map(|r| (r.value_id.clone(), r.score)).collect();
    let mut ranked = all;
    ranked.truncate(k);
    Ok(GateResult {
        input_id: input_id.to_string(),
        ranked,
        k,
        scores,
    })
}

/// Like [`gate_top_k`], but guarantees `forced` is selected: when it falls
/// outside the Top-k it replaces the lowest-ranked entry.
pub fn gate_top_k_forced(
    input_id: &str,
    input: &str,
    taxonomy: &ValueTaxonomy,
    scorer: &dyn RelevanceScorer,
    k: usize,
    forced: &str,
) -> Result<GateResult> {
    if !taxonomy.contains(forced) {
        return Err(Error::InvalidArgument(format!("unknown value {forced}")));
    }
    let mut gate = gate_top_k(input_id, input, taxonomy, scorer, k)?;
    if !gate.contains(forced) {
        gate.ranked.pop();
        gate.ranked.push(RankedValue {
            value_id: forced.to_string(),
            score: gate.scores[forced],
        });
    }
    Ok(gate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueSelection {
    pub value_id: String,
    pub top1_pct: f64,
    pub topk_pct: f64,
    pub avg_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub k: usize,
    pub num_inputs: usize,
    /// One row per taxonomy value, in taxonomy order.
    pub per_value: Vec<ValueSelection>,
}

impl SelectionStats {
    pub fn get(&self, value_id: &str) -> Option<&ValueSelection> {
        self.per_value.iter().find(|v| v.value_id == value_id)
    }
}

/// Corpus-level Top-1 frequency, Top-k coverage and mean relevance per value.
pub fn selection_statistics(
    results: &[GateResult],
    taxonomy: &ValueTaxonomy,
) -> Result<SelectionStats> {
    let first = results
        .first()
        .ok_or_else(|| Error::InvalidArgument("no gate results".into()))?;
    if let Some(bad) = results.iter().find(|r| r.k != first.k) {
        return Err(Error::InvalidArgument(format!(
            "mixed k values: {} and {} (input {})",
            first.k, bad.k, bad.input_id
        )));
    }
    let n = results.len() as f64;
    let per_value = taxonomy
        .values
        .iter()
        .map(|v| {
            let top1 = results
                .iter()
                .filter(|r| r.ranked.first().is_some_and(|t| t.value_id == v.id))
                .count();
            let topk = results.iter().filter(|r| r.contains(&v.id)).count();
            let total: f64 = results.iter().map(|r| r.score_of(&v.id).unwrap_or(0.0)).sum();
            ValueSelection {
                value_id: v.id.clone(),
                top1_pct: 100.0 * top1 as f64 / n,
                topk_pct: 100.0 * topk as f64 / n,
                avg_score: total / n,
            }
        })
        .collect();
    Ok(SelectionStats {
        k: first.k,
        num_inputs: results.len(),
        per_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value_pool::{Category, ValueSpec};

    fn taxonomy(ids: &[&str]) -> ValueTaxonomy {
        let values: Vec<ValueSpec> = ids
            .iter()
            .map(|id| ValueSpec {
                id: id.to_string(),
                display_name: id.to_string(),
                category: Category::Schwartz,
                description: id.to_string(),
            })
            .collect();
        ValueTaxonomy {
            version: "t".into(),
            expected_counts: [(Category::Schwartz, values.len())].into_iter().collect(),
            values,
        }
    }

    struct Constant(f64);
    impl RelevanceScorer for Constant {
        fn score(&self, _: &str, _: &str) -> Result<f64> {
            Ok(self.0)
        }
    }

    struct Failing;
    impl RelevanceScorer for Failing {
        fn score(&self, _: &str, d: &str) -> Result<f64> {
            if d == "b" {
                Err(Error::Backend("boom".into()))
            } else {
                Ok(0.1)
            }
        }
    }

    #[test]
    fn constant_scores_tie_break_by_id() {
        let t = ValueTaxonomy::default_manifest();
        let g = gate_top_k("x", "anything", &t, &Constant(0.5), 3).unwrap();
        let mut ids: Vec<&str> = t.values.iter().map(|v| v.id.as_str()).collect();
        ids.sort();
        assert_eq!(g.value_ids().collect::<Vec<_>>(), ids[..3].to_vec());
        assert_eq!(g.scores.len(), 31);
    }

    #[test]
    fn table_scorer_top2() {
        let t = taxonomy(&["a", "b", "c"]);
        let s = TableScorer::new([("a".into(), 0.9), ("b".into(), 0.2), ("c".into(), 0.7)]);
        let g = gate_top_k("x", "in", &t, &s, 2).unwrap();
        assert_eq!(
            g.ranked,
            vec![
                RankedValue { value_id: "a".into(), score: 0.9 },
                RankedValue { value_id: "c".into(), score: 0.7 },
            ]
        );
    }

    #[test]
    fn k_larger_than_taxonomy_returns_all() {
        let t = taxonomy(&["a", "b", "c"]);
        let g = gate_top_k("x", "in", &t, &Constant(0.1), 10).unwrap();
        assert_eq!(g.ranked.len(), 3);
    }

    #[test]
    fn scorer_failure_names_value() {
        let t = taxonomy(&["a", "b"]);
        let err = gate_top_k("x", "in", &t, &Failing, 1).unwrap_err();
        assert!(matches!(err, Error::Scorer { ref value_id, .. } if value_id == "b"));
    }

    #[test]
    fn zero_k_rejected() {
        let t = taxonomy(&["a"]);
        assert!(gate_top_k("x", "in", &t, &Constant(0.1), 0).is_err());
    }

    #[test]
    fn forced_inclusion_replaces_last() {
        let t = taxonomy(&["a", "b", "c"]);
        let s = TableScorer::new([("a".into(), 0.9), ("b".into(), 0.2), ("c".into(), 0.7)]);
        let g = gate_top_k_forced("x", "in", &t, &s, 2, "b").unwrap();
        assert_eq!(g.value_ids().collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(g.ranked.len(), 2);
    }

    #[test]
    fn lexical_scorer_overlap() {
        let s = LexicalScorer;
        assert_eq!(s.score("caring kindness", "kindness caring").unwrap(), 1.0);
        assert_eq!(s.score("caring", "power").unwrap(), 0.0);
        let half = s.score("caring kindness", "caring").unwrap();
        assert!((half - 0.5).abs() < 1e-12);
    }

    fn result(id: &str, ranked: &[(&str, f64)], scores: &[(&str, f64)]) -> GateResult {
        GateResult {
            input_id: id.into(),
            ranked: ranked
                .iter()
                .map(|(v, s)| RankedValue { value_id: v.to_string(), score: *s })
                .collect(),
            k: 2,
            scores: scores.iter().map(|(v, s)| (v.to_string(), *s)).collect(),
        }
    }

    #[test]
    fn statistics_counting() {
        let t = taxonomy(&["x", "y", "z"]);
        let r1 = result("1", &[("x", 0.9), ("y", 0.5)], &[("x", 0.9), ("y", 0.5), ("z", 0.1)]);
        let r2 = result("2", &[("y", 0.8), ("x", 0.6)], &[("x", 0.6), ("y", 0.8), ("z", 0.3)]);
        let s = selection_statistics(&[r1, r2], &t).unwrap();
        let x = s.get("x").unwrap();
        assert_eq!(x.top1_pct, 50.0);
        assert_eq!(x.topk_pct, 100.0);
        assert!((x.avg_score - 0.75).abs() < 1e-12);
        let z = s.get("z").unwrap();
        assert_eq!(z.topk_pct, 0.0);
        assert!((z.avg_score - 0.2).abs() < 1e-12);
        let total_top1: f64 = s.per_value.iter().map(|v| v.top1_pct).sum();
        assert!((total_top1 - 100.0).abs() < 1e-9);
    }

    #[test]
    fn statistics_all_top1() {
        let t = taxonomy(&["x", "y"]);
        let rs: Vec<_> = (0..10)
            .map(|i| result(&i.to_string(), &[("x", 0.9)], &[("x", 0.9), ("y", 0.1)]))
            .collect();
        assert_eq!(selection_statistics(&rs, &t).unwrap().get("x").unwrap().top1_pct, 100.0);
    }

    #[test]
    fn statistics_errors() {
        let t = taxonomy(&["x"]);
        assert!(selection_statistics(&[], &t).is_err());
        let mut r2 = result("2", &[("x", 0.1)], &[("x", 0.1)]);
        r2.k = 3;
        let r1 = result("1", &[("x", 0.1)], &[("x", 0.1)]);
        assert!(selection_statistics(&[r1, r2], &t).is_err());
    }
}
