// SPDX-License-Identifier: MIT OR Apache-2.0

//! Value-conditioned activation steering for pluralistic generation.
//!
//! The crate gates a taxonomy of human values by relevance to an input,
//! estimates a steering direction per value from contrastive activations,
//! generates one steered comment per selected value and composes those
//! comments into a final answer. Evaluation metrics and a run orchestrator
//! sit on top.

pub mod backend;
pub mod directions;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod pipeline;
pub mod pluralism;
pub mod relevance;
pub mod steering;
pub mod value_pool;
pub mod wire;

pub use backend::{
    capture_activations, default_steering_layers, generate_with_hooks, ActivationRecord,
    ExternalBackend, GenerateRequest, ModelBackend, PositionPolicy, ReferenceConfig,
    ReferenceModel, TokenPolicy,
};
pub use directions::{
    estimate_directions, estimate_mean_difference, estimate_pca, train_probe, BankEncoding,
    DirectionBank, EstimationConfig, Method, ProbeModel, ValueDirection,
};
pub use error::{Error, Result};
pub use evaluation::{bootstrap_ci, fluency_metrics, js_distance, overton_coverage, steerable_accuracy};
pub use pipeline::{run_pipeline, validate_config, RunConfig, RunManifest};
pub use pluralism::{
    compose_distributional, compose_overton, compose_steerable, extract_choice,
    generate_value_comments, ChoiceDistribution, CommentSet, ValueComment, Weighting,
};
pub use relevance::{gate_top_k, gate_top_k_forced, selection_statistics, GateResult, RelevanceScorer};
pub use steering::{build_plan, calibrated_magnitude, fixed_magnitude, MagnitudePolicy, SteeringPlan};
pub use value_pool::{load_taxonomy, ContrastiveDataset, ContrastivePair, ValueSpec, ValueTaxonomy};
