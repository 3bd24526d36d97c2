// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration, JSONL artifacts and the end-to-end pipeline
//! (gate, estimate, compose, eval).
//!
//! Every artifact is written under the run's output directory, carries the
//! run seed and is listed with its SHA-256 in `manifest.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{default_steering_layers, ExternalBackend, ModelBackend, ReferenceConfig, ReferenceModel, TokenPolicy};
use crate::directions::{estimate_directions, BankEncoding, DirectionBank, EstimationConfig, Method};
use crate::error::{Error, Result};
use crate::evaluation::{
    bootstrap_ci, fluency_metrics, js_distance, overton_coverage, steerable_hits, CiReport, CoverageReport,
    FluencyReport, DEFAULT_BOOTSTRAP_ITERATIONS, DEFAULT_TAU,
};
use crate::pluralism::{
    choice_prompt, compose_distributional, compose_overton, compose_steerable, forced_choices,
    generate_value_comments, render, ChoiceDistribution, CommentSet, CommentSettings, ComposeSettings,
    PromptTemplates, Weighting,
};
use crate::relevance::{gate_top_k, gate_top_k_forced, GateResult, LexicalScorer, NliScorer, RelevanceScorer, TableScorer, DEFAULT_K};
use crate::steering::MagnitudePolicy;
use crate::value_pool::{load_contrastive_dataset, load_taxonomy, sample_corpus, ContrastiveDataset, ValueSpec, ValueTaxonomy};
use crate::wire::{endpoint_from_env, ENDPOINT_ENV};

pub const GATES_FILE: &str = "gates.jsonl";
pub const BANK_FILE: &str = "bank.vdb";
pub const COMMENTS_FILE: &str = "comments.jsonl";
pub const RESPONSES_FILE: &str = "responses.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Overton,
    Steerable,
    Distributional,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Overton => "overton",
            Mode::Steerable => "steerable",
            Mode::Distributional => "distributional",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overton" => Ok(Mode::Overton),
            "steerable" => Ok(Mode::Steerable),
            "distributional" => Ok(Mode::Distributional),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerConfig {
    #[default]
    Lexical,
    /// JSON object mapping value id to a fixed score.
    Table {
        path: PathBuf,
        #[serde(default)]
        default: f64,
    },
    /// External entailment service; the endpoint falls back to the
    /// environment variable.
    Nli {
        #[serde(default)]
        endpoint: Option<String>,
        #[serde(default)]
        hypothesis: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Reference {
        #[serde(default)]
        seed: u64,
    },
    External {
        #[serde(default)]
        endpoint: Option<String>,
        num_layers: usize,
        hidden_size: usize,
        max_context: usize,
    },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Reference { seed: 0 }
    }
}

impl BackendConfig {
    pub fn num_layers(&self) -> usize {
        match self {
            BackendConfig::Reference { .. } => ReferenceConfig::default().num_layers,
            BackendConfig::External { num_layers, .. } => *num_layers,
        }
    }
}

fn default_k() -> usize {
    DEFAULT_K
}
fn default_method() -> Method {
    Method::MeanDiff
}
fn default_comment_tokens() -> usize {
    32
}
fn default_compose_tokens() -> usize {
    64
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_ci() -> usize {
    DEFAULT_BOOTSTRAP_ITERATIONS
}

/// A full run description. Relative paths are resolved against the
/// directory of the config file by [`RunConfig::load`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Mandatory: there is no clock-derived default.
    pub seed: u64,
    pub mode: Mode,
    pub inputs: PathBuf,
    pub output_dir: PathBuf,
    /// Taxonomy manifest; the bundled one when absent.
    #[serde(default)]
    pub taxonomy: Option<PathBuf>,
    /// Contrastive corpora; the bundled sample corpus when empty.
    #[serde(default)]
    pub corpus: Vec<PathBuf>,
    /// Pre-built direction bank. When absent the estimate stage builds one.
    #[serde(default)]
    pub bank: Option<PathBuf>,
    #[serde(default)]
    pub gold: Option<PathBuf>,
    #[serde(default)]
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub scorer: ScorerConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub magnitude: MagnitudePolicy,
    /// Steering layers; the backend's default band when absent.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub weighting: Weighting,
    /// Answer options for distributional inputs that list none.
    #[serde(default)]
    pub options: Option<Vec<String>>,
    #[serde(default)]
    pub token_policy: TokenPolicy,
    #[serde(default = "default_comment_tokens")]
    pub comment_max_tokens: usize,
    #[serde(default = "default_compose_tokens")]
    pub compose_max_tokens: usize,
    /// Caps pairs per value during estimation.
    #[serde(default)]
    pub max_pairs: Option<usize>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_ci")]
    pub ci_iterations: usize,
}

impl RunConfig {
    pub fn from_json_str(text: &str, context: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(context, e))
    }

    /// Reads a config and resolves its relative paths against the config's
    /// own directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json_str(&text, &path.display().to_string())?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.inputs);
        fix(&mut self.output_dir);
        self.taxonomy.iter_mut().for_each(fix);
        self.corpus.iter_mut().for_each(fix);
        self.bank.iter_mut().for_each(fix);
        self.gold.iter_mut().for_each(fix);
        self.templates.iter_mut().for_each(fix);
        if let ScorerConfig::Table { path, .. } = &mut self.scorer {
            fix(path);
        }
    }
}

/// One input line. `target` is the requested value in steerable mode;
/// `options` are answer labels in distributional mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub input_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub seed: u64,
    pub text: String,
    #[serde(flatten)]
    pub gate: GateResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommentRecord {
    pub seed: u64,
    /// True when the target value was added by a forced re-gate.
    #[serde(default)]
    pub regated: bool,
    #[serde(flatten)]
    pub set: CommentSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub input_id: String,
    pub seed: u64,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<ChoiceDistribution>,
}

/// Reference answers: gold values (Overton), a target (Steerable) or a
/// distribution (Distributional).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub input_id: String,
    #[serde(default)]
    pub values: Vec<String>,
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub distribution: Option<ChoiceDistribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsReport {
    pub per_input: BTreeMap<String, f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub seed: u64,
    pub tau: f64,
    pub num_responses: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steerable_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub js: Option<JsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distributions: Option<BTreeMap<String, ChoiceDistribution>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<CiReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fluency: Option<FluencyReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub stage: String,
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config: RunConfig,
    pub artifacts: Vec<ArtifactEntry>,
}

impl RunManifest {
    pub fn artifact(&self, name: &str) -> Option<&ArtifactEntry> {
        self.artifacts.iter().find(|a| a.path == name)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 1), e)))
        .collect()
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("records serialize");
        out.push(b'\n');
    }
    out
}

pub fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn load_taxonomy_or_default(path: Option<&Path>) -> Result<ValueTaxonomy> {
    let t = match path {
        Some(p) => load_taxonomy(p)?,
        None => ValueTaxonomy::default_manifest(),
    };
    t.validate()?;
    Ok(t)
}

pub fn build_scorer(config: &ScorerConfig, taxonomy: &ValueTaxonomy) -> Result<Box<dyn RelevanceScorer>> {
    match config {
        ScorerConfig::Lexical => Ok(Box::new(LexicalScorer)),
        ScorerConfig::Table { path, default } => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let by_id: BTreeMap<String, f64> =
                serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
            let mut table = Vec::with_capacity(by_id.len());
            for (id, score) in by_id {
                let spec = taxonomy
                    .get(&id)
                    .ok_or_else(|| Error::validation(path.display().to_string(), format!("unknown value {id}")))?;
                table.push((spec.description.clone(), score));
            }
            let mut scorer = TableScorer::new(table);
            scorer.default = *default;
            Ok(Box::new(scorer))
        }
        ScorerConfig::Nli { endpoint, hypothesis } => {
            let endpoint = endpoint.clone().or_else(endpoint_from_env).ok_or_else(|| {
                Error::InvalidArgument(format!("entailment scorer needs an endpoint or {ENDPOINT_ENV}"))
            })?;
            let mut scorer = NliScorer::new(endpoint);
            if let Some(h) = hypothesis {
                scorer = scorer.with_template(h.clone());
            }
            Ok(Box::new(scorer))
        }
    }
}

pub fn build_backend(config: &BackendConfig) -> Result<Box<dyn ModelBackend>> {
    match config {
        BackendConfig::Reference { seed } => Ok(Box::new(ReferenceModel::new(ReferenceConfig {
            seed: *seed,
            ..ReferenceConfig::default()
        })?)),
        BackendConfig::External { endpoint, num_layers, hidden_size, max_context } => {
            let endpoint = endpoint.clone().or_else(endpoint_from_env).ok_or_else(|| {
                Error::InvalidArgument(format!("external backend needs an endpoint or {ENDPOINT_ENV}"))
            })?;
            Ok(Box::new(ExternalBackend::new(endpoint, *num_layers, *hidden_size, *max_context)))
        }
    }
}

/// Loads and merges contrastive corpora; the bundled sample when `paths`
/// is empty.
pub fn load_corpora(paths: &[PathBuf], taxonomy: &ValueTaxonomy) -> Result<BTreeMap<String, ContrastiveDataset>> {
    if paths.is_empty() {
        return sample_corpus(taxonomy);
    }
    let mut merged: BTreeMap<String, ContrastiveDataset> = BTreeMap::new();
    for p in paths {
        for (id, ds) in load_contrastive_dataset(p, taxonomy)? {
            match merged.get_mut(&id) {
                Some(existing) => existing.pairs.extend(ds.pairs),
                None => {
                    merged.insert(id, ds);
                }
            }
        }
    }
    Ok(merged)
}

fn check_options(options: &[String]) -> std::result::Result<(), String> {
    ChoiceDistribution::new(options.to_vec(), {
        let mut p = vec![0.0; options.len()];
        if let Some(first) = p.first_mut() {
            *first = 1.0;
        }
        p
    })
    .map(|_| ())
    .map_err(|e| e.to_string())
}

/// Checks a config without running it and reports every violation found.
/// The bank file, when given, is only opened by the compose stage.
pub fn validate_config(config: &RunConfig) -> std::result::Result<(), Vec<String>> {
    let mut v = Vec::new();
    if config.k < 1 {
        v.push("k must be ≥ 1".to_string());
    }
    let exists = |p: &Path, what: &str, v: &mut Vec<String>| {
        if !p.is_file() {
            v.push(format!("{what} file {} does not exist", p.display()));
            false
        } else {
            true
        }
    };

    let taxonomy = match &config.taxonomy {
        Some(p) if !exists(p, "taxonomy", &mut v) => None,
        other => match load_taxonomy_or_default(other.as_deref()) {
            Ok(t) => Some(t),
            Err(e) => {
                v.push(format!("taxonomy: {e}"));
                None
            }
        },
    };
    if let Some(t) = &taxonomy {
        if config.k > t.len() {
            v.push(format!("k = {} exceeds the {} taxonomy values", config.k, t.len()));
        }
    }
    for p in &config.corpus {
        if exists(p, "corpus", &mut v) {
            if let Some(t) = &taxonomy {
                if let Err(e) = load_contrastive_dataset(p, t) {
                    v.push(format!("corpus: {e}"));
                }
            }
        }
    }
    if let Some(p) = &config.gold {
        exists(p, "gold", &mut v);
    }
    if let Some(p) = &config.templates {
        if exists(p, "templates", &mut v) {
            if let Err(e) = PromptTemplates::load(p) {
                v.push(format!("templates: {e}"));
            }
        }
    }
    match &config.scorer {
        ScorerConfig::Table { path, .. } => {
            if exists(path, "scorer table", &mut v) {
                if let Some(t) = &taxonomy {
                    if let Err(e) = build_scorer(&config.scorer, t) {
                        v.push(format!("scorer: {e}"));
                    }
                }
            }
        }
        ScorerConfig::Nli { endpoint: None, .. } if endpoint_from_env().is_none() => {
            v.push(format!("entailment scorer needs an endpoint or {ENDPOINT_ENV}"));
        }
        _ => {}
    }
    match &config.backend {
        BackendConfig::External { endpoint, num_layers, hidden_size, max_context } => {
            if endpoint.is_none() && endpoint_from_env().is_none() {
                v.push(format!("external backend needs an endpoint or {ENDPOINT_ENV}"));
            }
            if *num_layers == 0 || *hidden_size == 0 || *max_context == 0 {
                v.push("external backend dimensions must be positive".into());
            }
        }
        BackendConfig::Reference { .. } => {}
    }
    if let Some(layers) = &config.layers {
        let num_layers = config.backend.num_layers();
        if layers.is_empty() {
            v.push("layers must not be empty".into());
        }
        if let Some(l) = layers.iter().find(|l| **l >= num_layers) {
            v.push(format!("layer {l} out of range for {num_layers} layers"));
        }
        if layers.iter().collect::<BTreeSet<_>>().len() != layers.len() {
            v.push("layers must be distinct".into());
        }
    }
    if let Err(e) = config.magnitude.validate() {
        v.push(format!("magnitude: {e}"));
    }
    if !(config.tau > 0.0 && config.tau < 1.0) {
        v.push(format!("tau must lie in (0, 1), got {}", config.tau));
    }
    if config.ci_iterations == 0 {
        v.push("ci_iterations must be ≥ 1".into());
    }
    if config.comment_max_tokens == 0 || config.compose_max_tokens == 0 {
        v.push("token budgets must be ≥ 1".into());
    }
    if config.max_pairs.is_some_and(|n| n < 2) {
        v.push("max_pairs must be ≥ 2".into());
    }
    if let Some(opts) = &config.options {
        if let Err(e) = check_options(opts) {
            v.push(format!("options: {e}"));
        }
    }
    if config.output_dir.as_os_str().is_empty() {
        v.push("output_dir must not be empty".into());
    }

    if exists(&config.inputs, "inputs", &mut v) {
        match read_jsonl::<InputRecord>(&config.inputs) {
            Err(e) => v.push(format!("inputs: {e}")),
            Ok(inputs) => {
                if inputs.is_empty() {
                    v.push("inputs file has no records".into());
                }
                let mut ids = BTreeSet::new();
                for input in &inputs {
                    if !ids.insert(&input.input_id) {
                        v.push(format!("duplicate input_id {}", input.input_id));
                    }
                    match config.mode {
                        Mode::Steerable => match (&input.target, &taxonomy) {
                            (None, _) => v.push(format!("input {} has no target value", input.input_id)),
                            (Some(t), Some(tax)) if !tax.contains(t) => {
                                v.push(format!("input {} targets unknown value {t}", input.input_id))
                            }
                            _ => {}
                        },
                        Mode::Distributional => match input.options.as_ref().or(config.options.as_ref()) {
                            None => v.push(format!("input {} has no answer options", input.input_id)),
                            Some(opts) => {
                                if let Err(e) = check_options(opts) {
                                    v.push(format!("input {}: {e}", input.input_id));
                                }
                            }
                        },
                        Mode::Overton => {}
                    }
                }
            }
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Gates every input.
pub fn gate_inputs(
    inputs: &[InputRecord],
    taxonomy: &ValueTaxonomy,
    scorer: &dyn RelevanceScorer,
    k: usize,
    seed: u64,
) -> Result<Vec<GateRecord>> {
    inputs
        .iter()
        .map(|input| {
            Ok(GateRecord {
                seed,
                text: input.text.clone(),
                gate: gate_top_k(&input.input_id, &input.text, taxonomy, scorer, k)?,
            })
        })
        .collect()
}

/// Everything the compose stage needs besides the per-input data.
pub struct ComposeContext<'a> {
    pub backend: &'a dyn ModelBackend,
    pub taxonomy: &'a ValueTaxonomy,
    pub scorer: &'a dyn RelevanceScorer,
    pub bank: &'a DirectionBank,
    pub templates: &'a PromptTemplates,
    pub policy: &'a MagnitudePolicy,
    pub mode: Mode,
    pub weighting: Weighting,
    pub layers: Option<Vec<usize>>,
    pub token_policy: TokenPolicy,
    pub comment_max_tokens: usize,
    pub compose_max_tokens: usize,
    pub default_options: Option<Vec<String>>,
    pub seed: u64,
}

/// Generates the comments for one gated input and composes its response.
/// In steerable mode a target outside the Top-k is re-gated with forced
/// inclusion.
pub fn compose_input(
    ctx: &ComposeContext<'_>,
    input: &InputRecord,
    gate: &GateResult,
) -> Result<(CommentRecord, ResponseRecord)> {
    let mut settings = CommentSettings {
        layers: ctx.layers.clone(),
        max_tokens: ctx.comment_max_tokens,
        seed: ctx.seed,
        token_policy: ctx.token_policy,
        choices: None,
    };
    let compose = ComposeSettings {
        max_tokens: ctx.compose_max_tokens,
        seed: ctx.seed,
    };
    let mut response = ResponseRecord {
        input_id: input.input_id.clone(),
        seed: ctx.seed,
        mode: ctx.mode,
        target: None,
        response: None,
        distribution: None,
    };
    let mut regated = false;
    let comment_prompt = render(&ctx.templates.comment, &[("input", &input.text)]);

    let set = match ctx.mode {
        Mode::Overton => {
            let set = generate_value_comments(ctx.backend, gate, ctx.bank, ctx.policy, &comment_prompt, &settings)?;
            response.response = Some(compose_overton(&input.text, &set, ctx.taxonomy, ctx.backend, ctx.templates, &compose)?);
            set
        }
        Mode::Steerable => {
            let target = input
                .target
                .as_deref()
                .ok_or_else(|| Error::InvalidArgument(format!("input {} has no target", input.input_id)))?;
            let forced;
            let gate = if gate.contains(target) {
                gate
            } else {
                regated = true;
                forced = gate_top_k_forced(&input.input_id, &input.text, ctx.taxonomy, ctx.scorer, gate.k, target)?;
                &forced
            };
            let set = generate_value_comments(ctx.backend, gate, ctx.bank, ctx.policy, &comment_prompt, &settings)?;
            response.target = Some(target.to_string());
            response.response = Some(compose_steerable(
                &input.text,
                &set,
                target,
                ctx.taxonomy,
                ctx.backend,
                ctx.templates,
                &compose,
            )?);
            set
        }
        Mode::Distributional => {
            let options = input
                .options
                .clone()
                .or_else(|| ctx.default_options.clone())
                .ok_or_else(|| Error::InvalidArgument(format!("input {} has no answer options", input.input_id)))?;
            settings.choices = Some(forced_choices(&options));
            let prompt = choice_prompt(&input.text, &options, ctx.templates);
            let set = generate_value_comments(ctx.backend, gate, ctx.bank, ctx.policy, &prompt, &settings)?;
            response.distribution = Some(compose_distributional(std::slice::from_ref(&set), &options, ctx.weighting)?);
            set
        }
    };
    Ok((
        CommentRecord {
            seed: ctx.seed,
            regated,
            set,
        },
        response,
    ))
}

/// Scores responses against gold records. Only inputs present in both are
/// evaluated. `texts_for_fluency` defaults to the response texts.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    mode: Mode,
    responses: &[ResponseRecord],
    gold: &[GoldRecord],
    taxonomy: &ValueTaxonomy,
    scorer: &dyn RelevanceScorer,
    tau: f64,
    ci_iterations: usize,
    seed: u64,
) -> Result<EvalReport> {
    let gold_by_id: BTreeMap<&str, &GoldRecord> = gold.iter().map(|g| (g.input_id.as_str(), g)).collect();
    let matched: Vec<(&ResponseRecord, &GoldRecord)> = responses
        .iter()
        .filter_map(|r| gold_by_id.get(r.input_id.as_str()).map(|g| (r, *g)))
        .collect();
    if matched.is_empty() {
        return Err(Error::InvalidArgument("no response has a gold record".into()));
    }
    let spec = |id: &str| -> Result<&ValueSpec> {
        taxonomy
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown value {id} in gold data")))
    };
    let text_of = |r: &ResponseRecord| -> Result<String> {
        r.response
            .clone()
            .ok_or_else(|| Error::InvalidArgument(format!("input {} has no response text", r.input_id)))
    };

    let mut report = EvalReport {
        mode,
        seed,
        tau,
        num_responses: matched.len(),
        coverage: None,
        steerable_accuracy: None,
        js: None,
        distributions: None,
        ci: None,
        fluency: None,
    };
    let samples: Vec<f64>;
    let metric: &str;
    match mode {
        Mode::Overton => {
            let mut entries = Vec::with_capacity(matched.len());
            for (r, g) in &matched {
                let golds = g.values.iter().map(|id| spec(id)).collect::<Result<Vec<_>>>()?;
                entries.push(overton_coverage(&r.input_id, &text_of(r)?, &golds, scorer, tau)?);
            }
            samples = entries.iter().map(|e| e.coverage_pct).collect();
            metric = "coverage_pct";
            report.coverage = Some(CoverageReport::from_entries(tau, entries)?);
        }
        Mode::Steerable => {
            let mut pairs = Vec::with_capacity(matched.len());
            for (r, g) in &matched {
                let target = g.target.as_deref().or(r.target.as_deref()).ok_or_else(|| {
                    Error::InvalidArgument(format!("input {} has no steer target", r.input_id))
                })?;
                pairs.push((text_of(r)?, spec(target)?));
            }
            let refs: Vec<(&str, &ValueSpec)> = pairs.iter().map(|(t, s)| (t.as_str(), *s)).collect();
            let hits = steerable_hits(&refs, scorer, tau)?;
            samples = hits.iter().map(|h| if *h { 100.0 } else { 0.0 }).collect();
            metric = "steerable_accuracy";
            report.steerable_accuracy = Some(samples.iter().sum::<f64>() / samples.len() as f64);
        }
        Mode::Distributional => {
            let mut per_input = BTreeMap::new();
            let mut dists = BTreeMap::new();
            for (r, g) in &matched {
                let pred = r.distribution.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!("input {} has no distribution", r.input_id))
                })?;
                let reference = g.distribution.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!("gold for {} has no distribution", r.input_id))
                })?;
                per_input.insert(r.input_id.clone(), js_distance(pred, reference)?);
                dists.insert(r.input_id.clone(), pred.clone());
            }
            samples = per_input.values().copied().collect();
            metric = "js_distance";
            let mean = samples.iter().sum::<f64>() / samples.len() as f64;
            report.js = Some(JsReport { per_input, mean });
            report.distributions = Some(dists);
        }
    }
    let mut ci = bootstrap_ci(&samples, ci_iterations, seed, 2.5, 97.5)?;
    ci.metric = metric.to_string();
    report.ci = Some(ci);
    let texts: Vec<String> = matched.iter().filter_map(|(r, _)| r.response.clone()).collect();
    if !texts.is_empty() {
        report.fluency = Some(fluency_metrics(&texts)?);
    }
    Ok(report)
}

struct Run {
    out: PathBuf,
    artifacts: Vec<ArtifactEntry>,
}

impl Run {
    fn write(&mut self, stage: &str, name: &str, bytes: &[u8]) -> Result<()> {
        write_file(self.out.join(name), bytes)?;
        self.artifacts.push(ArtifactEntry {
            stage: stage.to_string(),
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn stage<T>(&self, stage: &str, result: Result<T>) -> Result<T> {
        result.map_err(|e| Error::Stage {
            stage: stage.to_string(),
            partial: self.artifacts.iter().map(|a| self.out.join(&a.path)).collect(),
            source: Box::new(e),
        })
    }
}

/// Runs gate, estimate (when no bank is configured), compose and eval, and
/// writes `manifest.json`. A failing stage aborts with its name; artifacts
/// written by earlier stages stay on disk.
pub fn run_pipeline(config: &RunConfig) -> Result<RunManifest> {
    validate_config(config).map_err(|v| Error::validation("config", v.join("; ")))?;
    let out = config.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut run = Run { out, artifacts: Vec::new() };
    let seed = config.seed;

    let setup = (|| -> Result<_> {
        let taxonomy = load_taxonomy_or_default(config.taxonomy.as_deref())?;
        let templates = match &config.templates {
            Some(p) => PromptTemplates::load(p)?,
            None => PromptTemplates::default(),
        };
        let scorer = build_scorer(&config.scorer, &taxonomy)?;
        let backend = build_backend(&config.backend)?;
        let inputs: Vec<InputRecord> = read_jsonl(&config.inputs)?;
        Ok((taxonomy, templates, scorer, backend, inputs))
    })();
    let (taxonomy, templates, scorer, backend, inputs) = run.stage("setup", setup)?;

    // gate
    let gates = run.stage("gate", gate_inputs(&inputs, &taxonomy, scorer.as_ref(), config.k, seed))?;
    let bytes = to_jsonl(&gates);
    let written = run.write("gate", GATES_FILE, &bytes);
    run.stage("gate", written)?;

    // estimate
    let bank_path = match &config.bank {
        Some(p) => p.clone(),
        None => {
            let mut needed: BTreeSet<String> = gates.iter().flat_map(|g| g.gate.value_ids().map(str::to_string)).collect();
            if config.mode == Mode::Steerable {
                needed.extend(inputs.iter().filter_map(|i| i.target.clone()));
            }
            let bank = run.stage("estimate", estimate_bank(config, backend.as_ref(), &taxonomy, &needed))?;
            let bytes = bank.to_bytes(BankEncoding::Binary);
            let written = run.write("estimate", BANK_FILE, &bytes);
            run.stage("estimate", written)?;
            run.out.join(BANK_FILE)
        }
    };

    // compose
    let composed = (|| -> Result<(Vec<CommentRecord>, Vec<ResponseRecord>)> {
        let bank = DirectionBank::load(&bank_path)?;
        let ctx = ComposeContext {
            backend: backend.as_ref(),
            taxonomy: &taxonomy,
            scorer: scorer.as_ref(),
            bank: &bank,
            templates: &templates,
            policy: &config.magnitude,
            mode: config.mode,
            weighting: config.weighting,
            layers: config.layers.clone(),
            token_policy: config.token_policy,
            comment_max_tokens: config.comment_max_tokens,
            compose_max_tokens: config.compose_max_tokens,
            default_options: config.options.clone(),
            seed,
        };
        let mut comments = Vec::with_capacity(inputs.len());
        let mut responses = Vec::with_capacity(inputs.len());
        for (input, gate) in inputs.iter().zip(&gates) {
            let (c, r) = compose_input(&ctx, input, &gate.gate)?;
            comments.push(c);
            responses.push(r);
        }
        Ok((comments, responses))
    })();
    let (comments, responses) = run.stage("compose", composed)?;
    let (cb, rb) = (to_jsonl(&comments), to_jsonl(&responses));
    let written = run.write("compose", COMMENTS_FILE, &cb).and_then(|_| run.write("compose", RESPONSES_FILE, &rb));
    run.stage("compose", written)?;

    // eval
    let evaluated = (|| -> Result<EvalReport> {
        match &config.gold {
            Some(path) => {
                let gold: Vec<GoldRecord> = read_jsonl(path)?;
                evaluate(config.mode, &responses, &gold, &taxonomy, scorer.as_ref(), config.tau, config.ci_iterations, seed)
            }
            None => {
                let texts: Vec<String> = responses.iter().filter_map(|r| r.response.clone()).collect();
                Ok(EvalReport {
                    mode: config.mode,
                    seed,
                    tau: config.tau,
                    num_responses: responses.len(),
                    coverage: None,
                    steerable_accuracy: None,
                    js: None,
                    distributions: None,
                    ci: None,
                    fluency: if texts.is_empty() { None } else { Some(fluency_metrics(&texts)?) },
                })
            }
        }
    })();
    let report = run.stage("eval", evaluated)?;
    let mut bytes = serde_json::to_vec_pretty(&report).expect("report serializes");
    bytes.push(b'\n');
    let written = run.write("eval", REPORT_FILE, &bytes);
    run.stage("eval", written)?;

    let manifest = RunManifest {
        seed,
        config: config.clone(),
        artifacts: run.artifacts,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    write_file(run.out.join(MANIFEST_FILE), &bytes)?;
    Ok(manifest)
}

/// Estimates directions for `values` as configured.
pub fn estimate_bank(
    config: &RunConfig,
    backend: &dyn ModelBackend,
    taxonomy: &ValueTaxonomy,
    values: &BTreeSet<String>,
) -> Result<DirectionBank> {
    let corpora = load_corpora(&config.corpus, taxonomy)?;
    let est = EstimationConfig {
        layers: config.layers.clone().unwrap_or_else(|| default_steering_layers(backend.num_layers())),
        position_policy: Default::default(),
        seed: config.seed,
        attach_probes: matches!(config.magnitude, MagnitudePolicy::Calibrated { .. }),
        ..EstimationConfig::default()
    };
    let mut bank = DirectionBank::new();
    for id in values {
        let mut ds = corpora
            .get(id)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("no contrastive pairs for value {id}")))?;
        if let Some(n) = config.max_pairs {
            ds.pairs.truncate(n);
        }
        bank.insert(estimate_directions(backend, &ds, config.method, &est)?);
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(dir: &Path) -> RunConfig {
        let inputs = dir.join("inputs.jsonl");
        write_file(&inputs, b"{\"input_id\":\"q1\",\"text\":\"A friend asks for help.\"}\n").unwrap();
        RunConfig::from_json_str(
            &format!(
                r#"{{"seed": 1, "mode": "overton", "inputs": {:?}, "output_dir": {:?}, "k": 2}}"#,
                inputs,
                dir.join("out")
            ),
            "test",
        )
        .unwrap()
    }

    #[test]
    fn seed_is_mandatory() {
        let err = RunConfig::from_json_str(r#"{"mode":"overton","inputs":"a","output_dir":"b"}"#, "t");
        assert!(err.is_err());
    }

    #[test]
    fn validation_reports_all_violations() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = minimal(dir.path());
        assert_eq!(validate_config(&cfg), Ok(()));
        cfg.k = 0;
        cfg.tau = 2.0;
        let v = validate_config(&cfg).unwrap_err();
        assert!(v.contains(&"k must be ≥ 1".to_string()), "{v:?}");
        assert!(v.iter().any(|m| m.contains("tau")), "{v:?}");
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let mut cfg = RunConfig::from_json_str(
            r#"{"seed":1,"mode":"overton","inputs":"in.jsonl","output_dir":"out","corpus":["c.jsonl"]}"#,
            "t",
        )
        .unwrap();
        cfg.resolve_paths(Path::new("/base"));
        assert_eq!(cfg.inputs, Path::new("/base/in.jsonl"));
        assert_eq!(cfg.corpus[0], Path::new("/base/c.jsonl"));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![GoldRecord { input_id: "a".into(), values: vec!["power".into()], target: None, distribution: None }];
        let p = dir.path().join("g.jsonl");
        write_file(&p, &to_jsonl(&recs)).unwrap();
        assert_eq!(read_jsonl::<GoldRecord>(&p).unwrap(), recs);
    }
}
