// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adapter for a model hosted out of process (e.g. on a GPU box).
//!
//! Generation request, one JSON object per line:
//! `{"prompt", "max_tokens", "seed", "token_policy", "layer_edits": [{"layer", "vector", "coefficient"}], "choices"?}`
//! answered by `{"text"}`.
//!
//! Capture request: `{"capture": {"text", "layers", "policy"}}` answered by
//! `{"layers": {"<index>": [..]}}`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GenerateRequest, ModelBackend, PositionPolicy, TokenPolicy};
use crate::error::{Error, Result};
use crate::steering::SteeringPlan;
use crate::wire::LineClient;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEdit {
    pub layer: usize,
    pub vector: Vec<f64>,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalGenerateRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub seed: u64,
    pub token_policy: TokenPolicy,
    pub layer_edits: Vec<LayerEdit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalGenerateResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureSpec {
    pub text: String,
    pub layers: Vec<usize>,
    pub policy: PositionPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalCaptureRequest {
    pub capture: CaptureSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalCaptureResponse {
    pub layers: BTreeMap<usize, Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ExternalBackend {
    client: LineClient,
    num_layers: usize,
    hidden_size: usize,
    max_context: usize,
}

impl ExternalBackend {
    pub fn new(
        endpoint: impl Into<String>,
        num_layers: usize,
        hidden_size: usize,
        max_context: usize,
    ) -> Self {
        ExternalBackend {
            client: LineClient::new(endpoint),
            num_layers,
            hidden_size,
            max_context,
        }
    }

    pub fn request_for(req: &GenerateRequest, plan: Option<&SteeringPlan>) -> Result<ExternalGenerateRequest> {
        let (token_policy, layer_edits) = match plan {
            None => (TokenPolicy::default(), Vec::new()),
            Some(plan) => {
                if plan.entries.iter().any(|e| e.recalibrate.is_some()) {
                    return Err(Error::Unsupported(
                        "per-token recalibration on an external backend".into(),
                    ));
                }
                let edits = plan
                    .entries
                    .iter()
                    .map(|e| LayerEdit {
                        layer: e.layer,
                        vector: e.direction.clone(),
                        coefficient: e.coefficient,
                    })
                    .collect();
                (plan.token_policy, edits)
            }
        };
        Ok(ExternalGenerateRequest {
            prompt: req.prompt.clone(),
            max_tokens: req.max_tokens,
            seed: req.seed,
            token_policy,
            layer_edits,
            choices: req.choices.clone(),
        })
    }
}

impl ModelBackend for ExternalBackend {
    fn num_layers(&self) -> usize {
        self.num_layers
    }

    fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    fn max_context(&self) -> usize {
        self.max_context
    }

    /// Byte count; the remote tokenizer is unknown, so this is only a budget
    /// estimate.
    fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        if text.is_empty() {
            return Err(Error::InvalidArgument("cannot tokenize an empty string".into()));
        }
        Ok(text.bytes().map(u32::from).collect())
    }

    fn generate(&self, req: &GenerateRequest, plan: Option<&SteeringPlan>) -> Result<String> {
        if let Some(plan) = plan {
            plan.validate(self.num_layers, self.hidden_size)?;
        }
        let wire = Self::request_for(req, plan)?;
        let resp: ExternalGenerateResponse = self.client.request(&wire)?;
        Ok(resp.text)
    }

    fn capture(
        &self,
        text: &str,
        layers: &[usize],
        policy: PositionPolicy,
    ) -> Result<BTreeMap<usize, Vec<f64>>> {
        super::check_layers(layers, self.num_layers)?;
        let resp: ExternalCaptureResponse = self.client.request(&ExternalCaptureRequest {
            capture: CaptureSpec {
                text: text.to_string(),
                layers: layers.to_vec(),
                policy,
            },
        })?;
        Ok(resp.layers)
    }
}
