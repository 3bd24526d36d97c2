// SPDX-License-Identifier: MIT OR Apache-2.0

//! Language-model backends with per-layer hidden-state hooks.
//!
//! "Hidden state at layer ℓ" is the residual stream after decoder block ℓ.
//! A hook registered at ℓ sees that state before block ℓ+1 consumes it and
//! may overwrite it in place.
//!
//! During generation, step `i` is the forward position whose output picks
//! the `i`-th new token; step 0 is the last prompt position. Positions before
//! it are [`Phase::Prompt`].

mod external;
mod reference;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::steering::SteeringPlan;

pub use external::ExternalBackend;
pub use reference::{ReferenceConfig, ReferenceModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionPolicy {
    #[default]
    LastToken,
    MeanOverTokens,
}

/// Which positions a steering plan touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenPolicy {
    /// Every generation step (last prompt position onward).
    #[default]
    GeneratedOnly,
    /// Prompt positions as well.
    AllPositions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Prompt,
    Generation(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HookSite {
    pub layer: usize,
    pub position: usize,
    pub phase: Phase,
}

/// Observes and may replace hidden states as the model runs.
pub trait LayerHook {
    fn on_hidden(&mut self, site: &HookSite, hidden: &mut [f64]);
}

/// Runs several hooks in order at every site.
pub struct HookStack<'a> {
    hooks: Vec<&'a mut dyn LayerHook>,
}

impl<'a> HookStack<'a> {
    pub fn new(hooks: Vec<&'a mut dyn LayerHook>) -> Self {
        HookStack { hooks }
    }
}

impl LayerHook for HookStack<'_> {
    fn on_hidden(&mut self, site: &HookSite, hidden: &mut [f64]) {
        for h in self.hooks.iter_mut() {
            h.on_hidden(site, hidden);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedState {
    pub layer: usize,
    pub position: usize,
    pub phase: Phase,
    pub hidden: Vec<f64>,
}

/// Records (a copy of) the hidden state at the chosen layers.
#[derive(Debug, Clone, Default)]
pub struct RecordingHook {
    layers: BTreeSet<usize>,
    pub records: Vec<RecordedState>,
}

impl RecordingHook {
    pub fn new(layers: impl IntoIterator<Item = usize>) -> Self {
        RecordingHook {
            layers: layers.into_iter().collect(),
            records: Vec::new(),
        }
    }

    /// Last recorded state at `layer` for generation step `step`.
    pub fn at_step(&self, layer: usize, step: usize) -> Option<&[f64]> {
        self.records
            .iter()
            .rev()
            .find(|r| r.layer == layer && r.phase == Phase::Generation(step))
            .map(|r| r.hidden.as_slice())
    }

    /// Last recorded state at `layer`.
    pub fn last(&self, layer: usize) -> Option<&[f64]> {
        self.records
            .iter()
            .rev()
            .find(|r| r.layer == layer)
            .map(|r| r.hidden.as_slice())
    }
}

impl LayerHook for RecordingHook {
    fn on_hidden(&mut self, site: &HookSite, hidden: &mut [f64]) {
        if self.layers.contains(&site.layer) {
            self.records.push(RecordedState {
                layer: site.layer,
                position: site.position,
                phase: site.phase,
                hidden: hidden.to_vec(),
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub seed: u64,
    /// When set, the first emitted text is forced to be the most likely of
    /// these strings (scored under the active hooks); generation continues
    /// freely afterwards. `max_tokens` counts the forced tokens too.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
}

impl GenerateRequest {
    pub fn new(prompt: impl Into<String>, max_tokens: usize, seed: u64) -> Self {
        GenerateRequest {
            prompt: prompt.into(),
            max_tokens,
            seed,
            choices: None,
        }
    }

    pub fn with_choices(mut self, choices: Vec<String>) -> Self {
        self.choices = Some(choices);
        self
    }
}

/// A decoder language model exposing per-layer hidden states.
pub trait ModelBackend {
    fn num_layers(&self) -> usize;
    fn hidden_size(&self) -> usize;
    /// Maximum number of positions (prompt plus generated tokens).
    fn max_context(&self) -> usize;
    fn tokenize(&self, text: &str) -> Result<Vec<u32>>;

    /// Generates with an optional steering plan. `None` is unsteered.
    fn generate(&self, req: &GenerateRequest, plan: Option<&SteeringPlan>) -> Result<String>;

    /// Generates with an arbitrary in-process hook.
    fn generate_hooked(&self, _req: &GenerateRequest, _hook: &mut dyn LayerHook) -> Result<String> {
        Err(Error::Unsupported("in-process hooks".into()))
    }

    /// Unsteered hidden states of `text` at `layers`, reduced per `policy`.
    fn capture(
        &self,
        text: &str,
        layers: &[usize],
        policy: PositionPolicy,
    ) -> Result<BTreeMap<usize, Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub text_id: String,
    pub position_policy: PositionPolicy,
    pub layers: BTreeMap<usize, Vec<f64>>,
}

impl ActivationRecord {
    pub fn layer(&self, layer: usize) -> Option<&[f64]> {
        self.layers.get(&layer).map(Vec::as_slice)
    }
}

pub(crate) fn check_layers(layers: &[usize], num_layers: usize) -> Result<()> {
    match layers.iter().find(|&&l| l >= num_layers) {
        Some(&layer) => Err(Error::LayerOutOfRange { layer, num_layers }),
        None => Ok(()),
    }
}

/// Captures one record per text (ids are the text indices).
pub fn capture_activations<S: AsRef<str>>(
    backend: &dyn ModelBackend,
    texts: &[S],
    layers: &[usize],
    policy: PositionPolicy,
) -> Result<Vec<ActivationRecord>> {
    if texts.is_empty() {
        return Err(Error::InvalidArgument("no texts to capture".into()));
    }
    check_layers(layers, backend.num_layers())?;
    let d = backend.hidden_size();
    texts
        .iter()
        .enumerate()
        .map(|(i, text)| {
            let layers = backend.capture(text.as_ref(), layers, policy)?;
            for (layer, v) in &layers {
                if v.len() != d {
                    return Err(Error::DimensionMismatch { expected: d, actual: v.len() });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Backend(format!("non-finite activation at layer {layer}")));
                }
            }
            Ok(ActivationRecord {
                text_id: i.to_string(),
                position_policy: policy,
                layers,
            })
        })
        .collect()
}

/// Generates from `prompt`, applying `plan` at its layers when given.
pub fn generate_with_hooks(
    backend: &dyn ModelBackend,
    prompt: &str,
    plan: Option<&SteeringPlan>,
    max_tokens: usize,
    seed: u64,
) -> Result<String> {
    if max_tokens == 0 {
        return Err(Error::InvalidArgument("max_tokens must be >= 1".into()));
    }
    if let Some(plan) = plan {
        plan.validate(backend.num_layers(), backend.hidden_size())?;
    }
    backend.generate(&GenerateRequest::new(prompt, max_tokens, seed), plan)
}

/// Default steering layers: 10–25 on deep models, otherwise the band
/// `[3L/8, 3L/4)` (layers {3, 4, 5} on an 8-layer model).
pub fn default_steering_layers(num_layers: usize) -> Vec<usize> {
    if num_layers > 25 {
        return (10..=25).collect();
    }
    let lo = 3 * num_layers / 8;
    let hi = (3 * num_layers / 4).max(lo + 1).min(num_layers);
    (lo..hi).collect()
}
