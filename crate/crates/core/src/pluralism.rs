// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steered per-value comments and the three composition modes.
//!
//! Overton summarizes every comment into one response, Steerable answers
//! from the comment of a single requested value, and Distributional turns
//! per-comment answer choices into a probability distribution.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{ActivationRecord, GenerateRequest, ModelBackend, PositionPolicy, TokenPolicy};
use crate::directions::{DirectionBank, Method};
use crate::error::{Error, Result};
use crate::relevance::GateResult;
use crate::steering::{build_plan, MagnitudePolicy};
use crate::value_pool::ValueTaxonomy;

const DEFAULT_TEMPLATES: &str = include_str!("../data/templates.json");

/// Prompt templates. Placeholders are `{name}` and are substituted in a
/// single pass, so braces inside substituted text are left alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub version: String,
    /// Open-ended comment prompt; `{input}`.
    pub comment: String,
    /// `{input}`, `{comments}`.
    pub overton: String,
    /// One line per comment inside `{comments}`; `{name}`, `{comment}`.
    pub overton_item: String,
    /// `{input}`, `{name}`, `{comment}`.
    pub steerable: String,
    /// Answer prompt for distributional mode; `{input}`, `{options}`.
    pub choice: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_TEMPLATES).expect("bundled templates are valid")
    }
}

impl PromptTemplates {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }
}

/// Substitutes `{key}` placeholders in one left-to-right pass. Unknown
/// placeholders are kept verbatim.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        let hit = tail.find('}').and_then(|close| {
            let key = &tail[..close];
            vars.iter().find(|(k, _)| *k == key).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &tail[close + 1..];
            }
            None => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueComment {
    pub value_id: String,
    pub text: String,
    /// Gate score of the value for this input.
    pub relevance: f64,
    pub method: Method,
    pub layers: Vec<usize>,
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommentSet {
    pub input_id: String,
    /// Gate ranking order.
    pub comments: Vec<ValueComment>,
}

impl CommentSet {
    pub fn get(&self, value_id: &str) -> Option<&ValueComment> {
        self.comments.iter().find(|c| c.value_id == value_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommentSettings {
    /// Steering layers; `None` steers every layer stored for the value.
    pub layers: Option<Vec<usize>>,
    pub max_tokens: usize,
    pub seed: u64,
    pub token_policy: TokenPolicy,
    /// Forced answer strings for distributional prompts.
    pub choices: Option<Vec<String>>,
}

impl Default for CommentSettings {
    fn default() -> Self {
        CommentSettings {
            layers: None,
            max_tokens: 32,
            seed: 0,
            token_policy: TokenPolicy::GeneratedOnly,
            choices: None,
        }
    }
}

/// Generates one steered comment per gated value, in gate order. `prompt`
/// is the fully rendered comment prompt; every value sees the same prompt
/// and seed and differs only by its steering plan.
pub fn generate_value_comments(
    backend: &dyn ModelBackend,
    gate: &GateResult,
    bank: &DirectionBank,
    policy: &MagnitudePolicy,
    prompt: &str,
    settings: &CommentSettings,
) -> Result<CommentSet> {
    // every direction must exist before any generation starts
    let mut directions = Vec::with_capacity(gate.ranked.len());
    for id in gate.value_ids() {
        let direction = bank.require(id)?;
        let layers = settings.layers.clone().unwrap_or_else(|| direction.layer_indices());
        directions.push((direction, layers));
    }
    let context = match policy {
        MagnitudePolicy::Calibrated { .. } => {
            let mut all: Vec<usize> = directions.iter().flat_map(|(_, l)| l.iter().copied()).collect();
            all.sort_unstable();
            all.dedup();
            Some(ActivationRecord {
                text_id: gate.input_id.clone(),
                position_policy: PositionPolicy::LastToken,
                layers: backend.capture(prompt, &all, PositionPolicy::LastToken)?,
            })
        }
        _ => None,
    };

    let mut comments = Vec::with_capacity(gate.ranked.len());
    for (ranked, (direction, layers)) in gate.ranked.iter().zip(&directions) {
        let mut plan = build_plan(direction, policy, layers, context.as_ref())?;
        plan.token_policy = settings.token_policy;
        plan.validate(backend.num_layers(), backend.hidden_size())?;
        let mut req = GenerateRequest::new(prompt, settings.max_tokens, settings.seed);
        req.choices = settings.choices.clone();
        let text = backend.generate(&req, Some(&plan))?;
        if text.is_empty() {
            return Err(Error::Backend(format!(
                "empty comment for value {}",
                ranked.value_id
            )));
        }
        comments.push(ValueComment {
            value_id: ranked.value_id.clone(),
            text,
            relevance: ranked.score,
            method: direction.method,
            coefficients: plan.coefficients(),
            layers: plan.layers(),
        });
    }
    Ok(CommentSet {
        input_id: gate.input_id.clone(),
        comments,
    })
}

fn display_name<'a>(taxonomy: &'a ValueTaxonomy, value_id: &'a str) -> &'a str {
    taxonomy
        .get(value_id)
        .map_or(value_id, |v| v.display_name.as_str())
}

/// Settings for the backbone call that composes the final response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComposeSettings {
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for ComposeSettings {
    fn default() -> Self {
        ComposeSettings { max_tokens: 64, seed: 0 }
    }
}

fn check_budget(
    backbone: &dyn ModelBackend,
    prompt: &str,
    max_tokens: usize,
    comments: &[&ValueComment],
) -> Result<()> {
    let prompt_tokens = backbone.tokenize(prompt)?.len();
    let budget = backbone.max_context();
    if prompt_tokens + max_tokens > budget {
        let comment_lengths = comments
            .iter()
            .map(|c| backbone.tokenize(&c.text).map(|t| t.len()))
            .collect::<Result<Vec<_>>>()?;
        return Err(Error::ContextOverflow {
            prompt_tokens,
            max_tokens,
            budget,
            comment_lengths,
        });
    }
    Ok(())
}

/// Overton prompt with every comment labeled by its value's display name.
pub fn overton_prompt(
    input: &str,
    comments: &CommentSet,
    taxonomy: &ValueTaxonomy,
    templates: &PromptTemplates,
) -> String {
    let items: Vec<String> = comments
        .comments
        .iter()
        .map(|c| {
            render(
                &templates.overton_item,
                &[("name", display_name(taxonomy, &c.value_id)), ("comment", c.text.trim())],
            )
        })
        .collect();
    render(&templates.overton, &[("input", input), ("comments", &items.join("\n"))])
}

/// One response summarizing all comments. Fails with
/// [`Error::ContextOverflow`] instead of truncating.
pub fn compose_overton(
    input: &str,
    comments: &CommentSet,
    taxonomy: &ValueTaxonomy,
    backbone: &dyn ModelBackend,
    templates: &PromptTemplates,
    settings: &ComposeSettings,
) -> Result<String> {
    if comments.comments.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "input {} has no comments to compose",
            comments.input_id
        )));
    }
    let prompt = overton_prompt(input, comments, taxonomy, templates);
    let all: Vec<&ValueComment> = comments.comments.iter().collect();
    check_budget(backbone, &prompt, settings.max_tokens, &all)?;
    backbone.generate(&GenerateRequest::new(prompt, settings.max_tokens, settings.seed), None)
}

/// Steerable prompt built from the target's comment alone.
pub fn steerable_prompt(
    input: &str,
    comments: &CommentSet,
    target_value: &str,
    taxonomy: &ValueTaxonomy,
    templates: &PromptTemplates,
) -> Result<String> {
    let comment = comments
        .get(target_value)
        .ok_or_else(|| Error::TargetNotGated(target_value.to_string()))?;
    Ok(render(
        &templates.steerable,
        &[
            ("input", input),
            ("name", display_name(taxonomy, target_value)),
            ("comment", comment.text.trim()),
        ],
    ))
}

/// One response conditioned on the target value's comment only.
pub fn compose_steerable(
    input: &str,
    comments: &CommentSet,
    target_value: &str,
    taxonomy: &ValueTaxonomy,
    backbone: &dyn ModelBackend,
    templates: &PromptTemplates,
    settings: &ComposeSettings,
) -> Result<String> {
    let prompt = steerable_prompt(input, comments, target_value, taxonomy, templates)?;
    let comment = comments.get(target_value).expect("checked by steerable_prompt");
    check_budget(backbone, &prompt, settings.max_tokens, &[comment])?;
    backbone.generate(&GenerateRequest::new(prompt, settings.max_tokens, settings.seed), None)
}

/// Answer prompt listing the option labels.
pub fn choice_prompt(input: &str, options: &[String], templates: &PromptTemplates) -> String {
    render(&templates.choice, &[("input", input), ("options", &options.join(", "))])
}

/// Strings forced at the start of distributional comments: each label
/// followed by a period, so the label stays a standalone token.
pub fn forced_choices(options: &[String]) -> Vec<String> {
    options.iter().map(|o| format!("{o}.")).collect()
}

/// First option label that appears as a standalone token (a maximal run of
/// alphanumeric characters) in `text`.
pub fn extract_choice(text: &str, options: &[String]) -> Option<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .find_map(|t| options.iter().find(|o| o.as_str() == t).cloned())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Uniform,
    Relevance,
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Weighting::Uniform),
            "relevance" => Ok(Weighting::Relevance),
            _ => Err(Error::InvalidArgument(format!("unknown weighting {s:?}"))),
        }
    }
}

/// Probability distribution over ordered option labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution")]
pub struct ChoiceDistribution {
    pub options: Vec<String>,
    pub probs: Vec<f64>,
}

#[derive(Deserialize)]
struct RawDistribution {
    options: Vec<String>,
    probs: Vec<f64>,
}

impl TryFrom<RawDistribution> for ChoiceDistribution {
    type Error = Error;

    fn try_from(raw: RawDistribution) -> Result<Self> {
        ChoiceDistribution::new(raw.options, raw.probs)
    }
}

impl ChoiceDistribution {
    pub fn new(options: Vec<String>, probs: Vec<f64>) -> Result<Self> {
        check_options(&options)?;
        if probs.len() != options.len() {
            return Err(Error::InvalidArgument(format!(
                "{} options but {} probabilities",
                options.len(),
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidArgument(format!("invalid probability {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(ChoiceDistribution { options, probs })
    }

    pub fn prob(&self, option: &str) -> Option<f64> {
        self.options.iter().position(|o| o == option).map(|i| self.probs[i])
    }
}

fn check_options(options: &[String]) -> Result<()> {
    if options.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 options".into()));
    }
    for (i, o) in options.iter().enumerate() {
        if o.is_empty() || !o.chars().all(char::is_alphanumeric) {
            return Err(Error::InvalidArgument(format!(
                "option label {o:?} must be a single alphanumeric token"
            )));
        }
        if options[..i].contains(o) {
            return Err(Error::InvalidArgument(format!("duplicate option {o:?}")));
        }
    }
    Ok(())
}

/// Aggregates per-comment choices into a distribution. Each parsed choice
/// is one-hot; unparseable comments are dropped; the weighted mean is
/// renormalized.
pub fn compose_distributional(
    comment_sets: &[CommentSet],
    options: &[String],
    weighting: Weighting,
) -> Result<ChoiceDistribution> {
    check_options(options)?;
    let mut mass = vec![0.0; options.len()];
    let mut parsed = 0usize;
    let mut total = 0usize;
    for c in comment_sets.iter().flat_map(|s| &s.comments) {
        total += 1;
        let Some(choice) = extract_choice(&c.text, options) else {
            continue;
        };
        let w = match weighting {
            Weighting::Uniform => 1.0,
            Weighting::Relevance => c.relevance,
        };
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "relevance weight {w} of {} is not a non-negative number",
                c.value_id
            )));
        }
        parsed += 1;
        let i = options.iter().position(|o| *o == choice).expect("choice is an option");
        mass[i] += w;
    }
    if parsed == 0 {
        return Err(Error::Unparseable(total));
    }
    let sum: f64 = mass.iter().sum();
    if sum <= 0.0 {
        return Err(Error::InvalidArgument(
            "parsed choices carry zero total relevance weight".into(),
        ));
    }
    let mut probs: Vec<f64> = mass.iter().map(|m| m / sum).collect();
    // absorb rounding so the sum is 1 to machine precision
    let drift: f64 = 1.0 - probs.iter().sum::<f64>();
    let top = (0..probs.len()).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).expect("non-empty");
    probs[top] += drift;
    ChoiceDistribution::new(options.to_vec(), probs)
}

/// Per-comment choices keyed by value id, `None` when unparseable.
pub fn comment_choices(set: &CommentSet, options: &[String]) -> BTreeMap<String, Option<String>> {
    set.comments
        .iter()
        .map(|c| (c.value_id.clone(), extract_choice(&c.text, options)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(labels: &[&str]) -> Vec<String> {
        labels.iter().map(|s| s.to_string()).collect()
    }

    fn comment(value_id: &str, text: &str, relevance: f64) -> ValueComment {
        ValueComment {
            value_id: value_id.into(),
            text: text.into(),
            relevance,
            method: Method::MeanDiff,
            layers: vec![3],
            coefficients: vec![0.5],
        }
    }

    fn set(comments: Vec<ValueComment>) -> CommentSet {
        CommentSet { input_id: "x".into(), comments }
    }

    #[test]
    fn render_is_single_pass() {
        let out = render("a {x} b {y} {z}", &[("x", "{y}"), ("y", "2")]);
        assert_eq!(out, "a {y} b 2 {z}");
        assert_eq!(render("{", &[]), "{");
    }

    #[test]
    fn extract_choice_examples() {
        let ab = opts(&["A", "B"]);
        assert_eq!(extract_choice("Answer: A", &ab).as_deref(), Some("A"));
        assert_eq!(extract_choice("I think both", &ab), None);
        assert_eq!(extract_choice("B. definitely, not A later", &ab).as_deref(), Some("B"));
        assert_eq!(extract_choice("AB", &ab), None);
    }

    #[test]
    fn distributional_examples() {
        let ab = opts(&["A", "B"]);
        let d = compose_distributional(&[set(vec![comment("v", "A", 1.0)])], &ab, Weighting::Uniform).unwrap();
        assert_eq!(d.probs, vec![1.0, 0.0]);

        let s = set(vec![comment("u", "A.", 0.2), comment("v", "A!", 0.3), comment("w", "B", 0.5)]);
        let d = compose_distributional(&[s], &ab, Weighting::Uniform).unwrap();
        assert!((d.probs[0] - 2.0 / 3.0).abs() < 1e-12 && (d.probs[1] - 1.0 / 3.0).abs() < 1e-12);

        let s = set(vec![comment("u", "A", 0.9), comment("v", "B", 0.1)]);
        let d = compose_distributional(&[s], &ab, Weighting::Relevance).unwrap();
        assert!((d.probs[0] - 0.9).abs() < 1e-12 && (d.probs[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn distributional_drops_unparseable_and_fails_when_all_are() {
        let ab = opts(&["A", "B"]);
        let s = set(vec![comment("u", "none", 1.0), comment("v", "B", 1.0)]);
        assert_eq!(compose_distributional(&[s], &ab, Weighting::Uniform).unwrap().probs, vec![0.0, 1.0]);
        let s = set(vec![comment("u", "none", 1.0), comment("v", "nope", 1.0)]);
        assert!(matches!(compose_distributional(&[s], &ab, Weighting::Uniform), Err(Error::Unparseable(2))));
    }

    #[test]
    fn distribution_validation() {
        assert!(ChoiceDistribution::new(opts(&["A"]), vec![1.0]).is_err());
        assert!(ChoiceDistribution::new(opts(&["A", "A"]), vec![0.5, 0.5]).is_err());
        assert!(ChoiceDistribution::new(opts(&["A", "B"]), vec![0.7, 0.7]).is_err());
        assert!(ChoiceDistribution::new(opts(&["A", "B"]), vec![1.5, -0.5]).is_err());
        assert!(serde_json::from_str::<ChoiceDistribution>(r#"{"options":["A","B"],"probs":[0.2,0.2]}"#).is_err());
    }

    #[test]
    fn steerable_prompt_uses_only_the_target() {
        let t = ValueTaxonomy::default_manifest();
        let s = set(vec![comment("benevolence", "help them", 0.9), comment("power", "take control", 0.5)]);
        let p = steerable_prompt("spill", &s, "power", &t, &PromptTemplates::default()).unwrap();
        assert!(p.contains("take control") && !p.contains("help them"));
        assert!(matches!(
            steerable_prompt("spill", &s, "tradition", &t, &PromptTemplates::default()),
            Err(Error::TargetNotGated(_))
        ));
    }

    #[test]
    fn overton_prompt_labels_with_display_names() {
        let t = ValueTaxonomy::default_manifest();
        let s = set(vec![comment("benevolence", "help them", 0.9)]);
        let p = overton_prompt("spill", &s, &t, &PromptTemplates::default());
        let name = &t.get("benevolence").unwrap().display_name;
        assert!(p.contains(&format!("- {name}: help them")), "{p}");
    }
}
