// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-value, per-layer steering directions from contrastive activations.

mod bank;
mod estimators;
mod probe;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::{ModelBackend, PositionPolicy};
use crate::error::{Error, Result};
use crate::linalg::{norm, normalized};
use crate::value_pool::{split_pairs, ContrastiveDataset};

pub use bank::{BankEncoding, DirectionBank, DirectionMetadata, Method, ValueDirection};
pub use estimators::{estimate_mean_difference, estimate_pca};
pub use probe::{probe_direction, select_layers_auto, train_probe, ProbeConfig, ProbeModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub layers: Vec<usize>,
    pub position_policy: PositionPolicy,
    /// Normalize mean-difference directions (PCA and probe directions are
    /// always unit length).
    pub normalize: bool,
    pub seed: u64,
    pub probe: ProbeConfig,
    /// Share of pairs held out to score probes (probe method).
    pub val_fraction: f64,
    pub accuracy_threshold: f64,
    pub max_layers: usize,
    /// Also fit a probe per layer for PCA and mean-difference directions,
    /// which calibrated magnitudes need.
    pub attach_probes: bool,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            layers: vec![3, 4, 5],
            position_policy: PositionPolicy::LastToken,
            normalize: false,
            seed: 0,
            probe: ProbeConfig::default(),
            val_fraction: 0.25,
            accuracy_threshold: 0.8,
            max_layers: 5,
            attach_probes: false,
        }
    }
}

struct Captured {
    pos: BTreeMap<usize, Vec<Vec<f64>>>,
    neg: BTreeMap<usize, Vec<Vec<f64>>>,
}

fn capture_pairs(
    backend: &dyn ModelBackend,
    ds: &ContrastiveDataset,
    layers: &[usize],
    policy: PositionPolicy,
) -> Result<Captured> {
    let mut pos: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    let mut neg: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for pair in &ds.pairs {
        for (layer, v) in backend.capture(&pair.positive, layers, policy)? {
            pos.entry(layer).or_default().push(v);
        }
        for (layer, v) in backend.capture(&pair.negative, layers, policy)? {
            neg.entry(layer).or_default().push(v);
        }
    }
    Ok(Captured { pos, neg })
}

/// Captures activations for every pair and runs the chosen estimator on each
/// configured layer. The probe method keeps only layers picked by
/// [`select_layers_auto`] on held-out accuracy.
pub fn estimate_directions(
    backend: &dyn ModelBackend,
    ds: &ContrastiveDataset,
    method: Method,
    config: &EstimationConfig,
) -> Result<ValueDirection> {
    if config.layers.is_empty() {
        return Err(Error::InvalidArgument("empty layer set".into()));
    }
    if ds.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "value {} has {} pair(s); estimation needs at least 2",
            ds.value_id,
            ds.len()
        )));
    }
    crate::backend::check_layers(&config.layers, backend.num_layers())?;

    let mut layers_sorted = config.layers.clone();
    layers_sorted.sort_unstable();
    layers_sorted.dedup();

    let captured = capture_pairs(backend, ds, &layers_sorted, config.position_policy)?;
    let mean_norms: BTreeMap<usize, f64> = layers_sorted
        .iter()
        .map(|l| {
            let all = captured.pos[l].iter().chain(&captured.neg[l]);
            let count = captured.pos[l].len() + captured.neg[l].len();
            (*l, all.map(|v| norm(v)).sum::<f64>() / count as f64)
        })
        .collect();

    let mut layers = BTreeMap::new();
    let mut probes = BTreeMap::new();
    let mut layer_accuracy = BTreeMap::new();
    let mut train_pairs = ds.len();
    let normalized_out;

    match method {
        Method::MeanDiff | Method::Pca => {
            for &l in &layers_sorted {
                let (pos, neg) = (&captured.pos[&l], &captured.neg[&l]);
                let v = if method == Method::Pca {
                    estimate_pca(pos, neg)?
                } else {
                    let raw = estimate_mean_difference(pos, neg)?;
                    if config.normalize {
                        normalized(&raw).ok_or_else(|| {
                            Error::DegenerateData(format!(
                                "zero mean difference for {} at layer {l}",
                                ds.value_id
                            ))
                        })?
                    } else {
                        raw
                    }
                };
                layers.insert(l, v);
                if config.attach_probes {
                    probes.insert(l, train_probe(pos, neg, config.seed, &config.probe)?);
                }
            }
            normalized_out = method == Method::Pca || config.normalize;
        }
        Method::Probe => {
            let (train, val) = split_pairs(ds, 1.0 - config.val_fraction, config.seed)?;
            train_pairs = train.len();
            let index: BTreeMap<&str, usize> = ds
                .pairs
                .iter()
                .enumerate()
                .map(|(i, p)| (p.scenario_id.as_str(), i))
                .collect();
            let pick = |part: &ContrastiveDataset, vs: &[Vec<f64>]| -> Vec<Vec<f64>> {
                part.pairs
                    .iter()
                    .map(|p| vs[index[p.scenario_id.as_str()]].clone())
                    .collect()
            };

            let mut candidates = BTreeMap::new();
            for &l in &layers_sorted {
                let (pos, neg) = (&captured.pos[&l], &captured.neg[&l]);
                let probe = train_probe(&pick(&train, pos), &pick(&train, neg), config.seed, &config.probe)?
                    .validated(&pick(&val, pos), &pick(&val, neg));
                layer_accuracy.insert(l, probe.val_accuracy.unwrap_or(0.0));
                candidates.insert(l, probe);
            }
            let selected =
                select_layers_auto(&layer_accuracy, config.accuracy_threshold, config.max_layers)?;
            for l in selected {
                let probe = candidates.remove(&l).expect("selected from candidates");
                layers.insert(l, probe_direction(&probe)?);
                probes.insert(l, probe);
            }
            normalized_out = true;
        }
    }

    Ok(ValueDirection {
        value_id: ds.value_id.clone(),
        method,
        normalized: normalized_out,
        layers,
        metadata: DirectionMetadata {
            train_pairs,
            seed: config.seed,
            position_policy: config.position_policy,
            mean_norms,
            layer_accuracy,
        },
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ReferenceModel;
    use crate::value_pool::{sample_corpus, ValueTaxonomy};

    fn dataset(n: usize) -> ContrastiveDataset {
        let t = ValueTaxonomy::default_manifest();
        let mut ds = sample_corpus(&t).unwrap().remove("benevolence").unwrap();
        ds.pairs.truncate(n);
        ds
    }

    #[test]
    fn mean_diff_end_to_end() {
        let model = ReferenceModel::with_seed(0);
        let ds = dataset(8);
        let cfg = EstimationConfig::default();
        let dir = estimate_directions(&model, &ds, Method::MeanDiff, &cfg).unwrap();
        assert_eq!(dir.layer_indices(), vec![3, 4, 5]);
        assert!(!dir.normalized);
        for l in [3, 4, 5] {
            // independent check against the estimator on freshly captured states
            let pos: Vec<_> = ds.pairs.iter().map(|p| model.capture(&p.positive, &[l], cfg.position_policy).unwrap()[&l].clone()).collect();
            let neg: Vec<_> = ds.pairs.iter().map(|p| model.capture(&p.negative, &[l], cfg.position_policy).unwrap()[&l].clone()).collect();
            let expected = estimate_mean_difference(&pos, &neg).unwrap();
            assert_eq!(dir.layer(l).unwrap(), expected.as_slice());
            assert!(norm(&expected) > 0.0);
        }
    }

    #[test]
    fn rerun_is_bit_identical() {
        let model = ReferenceModel::with_seed(0);
        let ds = dataset(6);
        let cfg = EstimationConfig { attach_probes: true, ..EstimationConfig::default() };
        let bank = |d: ValueDirection| {
            let mut b = DirectionBank::new();
            b.insert(d);
            b.to_bytes(BankEncoding::Text)
        };
        let a = estimate_directions(&model, &ds, Method::Pca, &cfg).unwrap();
        let b = estimate_directions(&model, &ds, Method::Pca, &cfg).unwrap();
        assert_eq!(bank(a), bank(b));
    }

    #[test]
    fn probe_method_propagates_no_layer_error() {
        let model = ReferenceModel::with_seed(0);
        let ds = dataset(8);
        let cfg = EstimationConfig { accuracy_threshold: 1.01, ..EstimationConfig::default() };
        assert!(matches!(
            estimate_directions(&model, &ds, Method::Probe, &cfg),
            Err(Error::NoLayerQualifies { .. })
        ));
    }

    #[test]
    fn rejects_empty_layers_and_tiny_data() {
        let model = ReferenceModel::with_seed(0);
        let cfg = EstimationConfig { layers: vec![], ..EstimationConfig::default() };
        assert!(estimate_directions(&model, &dataset(4), Method::MeanDiff, &cfg).is_err());
        let cfg = EstimationConfig::default();
        assert!(estimate_directions(&model, &dataset(1), Method::MeanDiff, &cfg).is_err());
        let cfg = EstimationConfig { layers: vec![8], ..EstimationConfig::default() };
        assert!(estimate_directions(&model, &dataset(4), Method::MeanDiff, &cfg).is_err());
    }
}
