// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steering magnitudes and executable steering plans.
//!
//! A plan adds `coefficient · direction` to the hidden state of each listed
//! layer at every position selected by its [`TokenPolicy`].

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::backend::{ActivationRecord, HookSite, LayerHook, Phase, TokenPolicy};
use crate::directions::{ProbeModel, ValueDirection};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, logit, norm};

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_P0: f64 = 0.9;
/// Default calibration bound, in units of the layer's mean activation norm.
pub const EPSILON_MAX_NORM_FACTOR: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MagnitudePolicy {
    Fixed {
        alpha: f64,
    },
    PerValue {
        table: BTreeMap<String, f64>,
        /// Used for values missing from the table.
        alpha: f64,
    },
    Calibrated {
        p0: f64,
        /// `None` means 20 × the layer's mean activation norm.
        #[serde(default)]
        epsilon_max: Option<f64>,
        /// Recompute ε at every steered position instead of once per input.
        #[serde(default)]
        per_token: bool,
    },
}

impl Default for MagnitudePolicy {
    fn default() -> Self {
        MagnitudePolicy::Fixed { alpha: DEFAULT_ALPHA }
    }
}

impl MagnitudePolicy {
    pub fn calibrated(p0: f64) -> Self {
        MagnitudePolicy::Calibrated {
            p0,
            epsilon_max: None,
            per_token: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MagnitudePolicy::Fixed { alpha } => fixed_magnitude(*alpha).map(|_| ()),
            MagnitudePolicy::PerValue { table, alpha } => {
                fixed_magnitude(*alpha)?;
                table.values().try_for_each(|a| fixed_magnitude(*a).map(|_| ()))
            }
            MagnitudePolicy::Calibrated { p0, epsilon_max, .. } => {
                check_p0(*p0)?;
                match epsilon_max {
                    Some(e) if !(e.is_finite() && *e > 0.0) => Err(Error::InvalidArgument(
                        format!("epsilon_max must be positive, got {e}"),
                    )),
                    _ => Ok(()),
                }
            }
        }
    }
}

impl std::str::FromStr for MagnitudePolicy {
    type Err = Error;

    /// `fixed:<alpha>` or `calibrated:<p0>`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        let num = |default: f64| -> Result<f64> {
            if arg.is_empty() {
                Ok(default)
            } else {
                arg.parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad number in policy {s:?}")))
            }
        };
        let policy = match kind {
            "fixed" => MagnitudePolicy::Fixed { alpha: num(DEFAULT_ALPHA)? },
            "calibrated" => MagnitudePolicy::calibrated(num(DEFAULT_P0)?),
            _ => return Err(Error::InvalidArgument(format!("unknown policy {s:?}"))),
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// Fixed steering coefficient; passes `alpha` through unchanged.
pub fn fixed_magnitude(alpha: f64) -> Result<f64> {
    if alpha.is_finite() {
        Ok(alpha)
    } else {
        Err(Error::InvalidArgument(format!("non-finite coefficient {alpha}")))
    }
}

fn check_p0(p0: f64) -> Result<()> {
    if p0 > 0.0 && p0 < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("P0 must lie in (0, 1), got {p0}")))
    }
}

fn check_calibration_inputs(h: &[f64], v: &[f64], probe: &ProbeModel, p0: f64) -> Result<()> {
    check_p0(p0)?;
    let d = probe.weights.len();
    for x in [h, v] {
        if x.len() != d {
            return Err(Error::DimensionMismatch { expected: d, actual: x.len() });
        }
    }
    let n = norm(v);
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "calibration needs a unit direction, got norm {n}"
        )));
    }
    Ok(())
}

/// Probe confidence after moving `h` by `epsilon · v`, evaluated directly.
pub fn probe_response(h: &[f64], v: &[f64], probe: &ProbeModel, epsilon: f64) -> f64 {
    let shifted: Vec<f64> = h.iter().zip(v).map(|(a, b)| a + epsilon * b).collect();
    probe.score(&shifted)
}

/// Minimal-|ε| solution of `σ(w·(h+εv)+b) ≥ P0` from the logit equation.
/// `None` when `w·v = 0` and the constraint does not already hold.
pub fn calibrate_closed_form(h: &[f64], v: &[f64], probe: &ProbeModel, p0: f64) -> Option<f64> {
    let target = logit(p0);
    let base = probe.logit(h);
    if base >= target {
        return Some(0.0);
    }
    let slope = dot(&probe.weights, v);
    if slope == 0.0 {
        return None;
    }
    let mut eps = (target - base) / slope;
    // the logit equation is exact; rounding can leave us a hair short
    for _ in 0..64 {
        if probe_response(h, v, probe, eps) >= p0 {
            break;
        }
        eps += eps.abs().max(1e-300) * 1e-12 * eps.signum();
    }
    Some(eps)
}

/// Bisection on the 1-D probe response: the non-negative ray
/// `[0, epsilon_max]` first, then `[-epsilon_max, 0]`. Returns the feasible
/// end of the final bracket.
pub fn calibrate_bisection(
    h: &[f64],
    v: &[f64],
    probe: &ProbeModel,
    p0: f64,
    epsilon_max: f64,
) -> Result<f64> {
    let holds = |e: f64| probe_response(h, v, probe, e) >= p0;
    if holds(0.0) {
        return Ok(0.0);
    }
    for sign in [1.0, -1.0] {
        let far = sign * epsilon_max;
        if !holds(far) {
            continue;
        }
        let (mut fail, mut ok) = (0.0_f64, far);
        for _ in 0..200 {
            let mid = 0.5 * (fail + ok);
            if mid == fail || mid == ok {
                break;
            }
            if holds(mid) {
                ok = mid;
            } else {
                fail = mid;
            }
            if (ok - fail).abs() <= 1e-13 * ok.abs() {
                break;
            }
        }
        return Ok(ok);
    }
    let achieved = probe_response(h, v, probe, epsilon_max)
        .max(probe_response(h, v, probe, -epsilon_max));
    Err(Error::CalibrationFailure {
        target: p0,
        achieved,
        epsilon_max,
    })
}

/// Smallest-|ε| steering coefficient that lifts the probe's confidence to
/// `p0`. Zero when the constraint already holds; closed form when
/// `w·v > 0`, bisection otherwise.
pub fn calibrated_magnitude(
    h: &[f64],
    v: &[f64],
    probe: &ProbeModel,
    p0: f64,
    epsilon_max: f64,
) -> Result<f64> {
    check_calibration_inputs(h, v, probe, p0)?;
    if !(epsilon_max.is_finite() && epsilon_max > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon_max must be positive, got {epsilon_max}"
        )));
    }
    if dot(&probe.weights, v) > 0.0 {
        let eps = calibrate_closed_form(h, v, probe, p0).expect("slope is positive");
        if eps > epsilon_max {
            return Err(Error::CalibrationFailure {
                target: p0,
                achieved: probe_response(h, v, probe, epsilon_max),
                epsilon_max,
            });
        }
        Ok(eps)
    } else {
        calibrate_bisection(h, v, probe, p0, epsilon_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recalibration {
    pub probe: ProbeModel,
    pub p0: f64,
    pub epsilon_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub layer: usize,
    pub direction: Vec<f64>,
    pub coefficient: f64,
    /// When set, the coefficient is recomputed from the live hidden state at
    /// each steered position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recalibrate: Option<Recalibration>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SteeringPlan {
    #[serde(default)]
    pub value_id: Option<String>,
    pub entries: Vec<PlanEntry>,
    #[serde(default)]
    pub token_policy: TokenPolicy,
}

impl SteeringPlan {
    /// A plan adding `coefficient · direction` at a single layer.
    pub fn single(layer: usize, direction: Vec<f64>, coefficient: f64) -> Self {
        SteeringPlan {
            value_id: None,
            entries: vec![PlanEntry {
                layer,
                direction,
                coefficient,
                recalibrate: None,
            }],
            token_policy: TokenPolicy::default(),
        }
    }

    pub fn with_token_policy(mut self, policy: TokenPolicy) -> Self {
        self.token_policy = policy;
        self
    }

    pub fn layers(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.layer).collect()
    }

    pub fn coefficients(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.coefficient).collect()
    }

    pub fn validate(&self, num_layers: usize, hidden_size: usize) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.layer >= num_layers {
                return Err(Error::LayerOutOfRange { layer: e.layer, num_layers });
            }
            if !seen.insert(e.layer) {
                return Err(Error::InvalidArgument(format!(
                    "layer {} appears twice in the plan",
                    e.layer
                )));
            }
            if e.direction.len() != hidden_size {
                return Err(Error::DimensionMismatch {
                    expected: hidden_size,
                    actual: e.direction.len(),
                });
            }
            if !e.coefficient.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite coefficient {} at layer {}",
                    e.coefficient, e.layer
                )));
            }
            if e.direction.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "non-finite direction at layer {}",
                    e.layer
                )));
            }
        }
        Ok(())
    }
}

/// Applies a [`SteeringPlan`] as a layer hook.
pub struct PlanHook<'a> {
    plan: &'a SteeringPlan,
    by_layer: HashMap<usize, usize>,
    error: Option<Error>,
}

impl<'a> PlanHook<'a> {
    pub fn new(plan: &'a SteeringPlan) -> Self {
        PlanHook {
            plan,
            by_layer: plan.entries.iter().enumerate().map(|(i, e)| (e.layer, i)).collect(),
            error: None,
        }
    }

    /// Surfaces the first per-token recalibration failure, if any.
    pub fn finish(self) -> Result<()> {
        self.error.map_or(Ok(()), Err)
    }
}

impl LayerHook for PlanHook<'_> {
    fn on_hidden(&mut self, site: &HookSite, hidden: &mut [f64]) {
        let active = match (self.plan.token_policy, site.phase) {
            (_, Phase::Generation(_)) => true,
            (TokenPolicy::AllPositions, Phase::Prompt) => true,
            (TokenPolicy::GeneratedOnly, Phase::Prompt) => false,
        };
        if !active {
            return;
        }
        let Some(&i) = self.by_layer.get(&site.layer) else {
            return;
        };
        let entry = &self.plan.entries[i];
        let coefficient = match &entry.recalibrate {
            None => entry.coefficient,
            Some(r) => match calibrated_magnitude(hidden, &entry.direction, &r.probe, r.p0, r.epsilon_max) {
                Ok(eps) => eps,
                Err(e) => {
                    self.error.get_or_insert(e);
                    0.0
                }
            },
        };
        if coefficient != 0.0 {
            axpy(coefficient, &entry.direction, hidden);
        }
    }
}

/// Builds a plan steering `direction` at `layers` with magnitudes from
/// `policy`. Calibrated policies need the prompt's activation record and a
/// probe for every layer; ε is computed per layer from that layer's probe.
pub fn build_plan(
    direction: &ValueDirection,
    policy: &MagnitudePolicy,
    layers: &[usize],
    context_activation: Option<&ActivationRecord>,
) -> Result<SteeringPlan> {
    policy.validate()?;
    let mut entries = Vec::with_capacity(layers.len());
    for &layer in layers {
        let v = direction.layer(layer).ok_or_else(|| Error::MissingLayer {
            value_id: direction.value_id.clone(),
            layer,
        })?;
        let (coefficient, recalibrate) = match policy {
            MagnitudePolicy::Fixed { alpha } => (fixed_magnitude(*alpha)?, None),
            MagnitudePolicy::PerValue { table, alpha } => (
                fixed_magnitude(table.get(&direction.value_id).copied().unwrap_or(*alpha))?,
                None,
            ),
            MagnitudePolicy::Calibrated { p0, epsilon_max, per_token } => {
                let probe = direction.probes.get(&layer).ok_or_else(|| Error::MissingProbe {
                    value_id: direction.value_id.clone(),
                    layer,
                })?;
                let context = context_activation.ok_or_else(|| {
                    Error::InvalidArgument("calibrated magnitudes need a context activation".into())
                })?;
                let h = context.layer(layer).ok_or_else(|| {
                    Error::InvalidArgument(format!("context activation lacks layer {layer}"))
                })?;
                let bound = epsilon_max.unwrap_or_else(|| {
                    let scale = direction
                        .metadata
                        .mean_norms
                        .get(&layer)
                        .copied()
                        .unwrap_or_else(|| norm(h));
                    EPSILON_MAX_NORM_FACTOR * scale
                });
                let eps = calibrated_magnitude(h, v, probe, *p0, bound)?;
                let recal = per_token.then(|| Recalibration {
                    probe: probe.clone(),
                    p0: *p0,
                    epsilon_max: bound,
                });
                (eps, recal)
            }
        };
        entries.push(PlanEntry {
            layer,
            direction: v.to_vec(),
            coefficient,
            recalibrate,
        });
    }
    let plan = SteeringPlan {
        value_id: Some(direction.value_id.clone()),
        entries,
        token_policy: TokenPolicy::default(),
    };
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::PositionPolicy;
    use crate::directions::{DirectionMetadata, Method};

    fn probe(w: Vec<f64>, b: f64) -> ProbeModel {
        ProbeModel { weights: w, bias: b, seed: 0, train_accuracy: 1.0, val_accuracy: None }
    }

    #[test]
    fn fixed_passes_through() {
        assert_eq!(fixed_magnitude(DEFAULT_ALPHA).unwrap(), 0.5);
        assert_eq!(fixed_magnitude(0.0).unwrap(), 0.0);
        assert_eq!(fixed_magnitude(-1.2).unwrap(), -1.2);
        assert!(fixed_magnitude(f64::NAN).is_err());
        assert!(fixed_magnitude(f64::INFINITY).is_err());
    }

    #[test]
    fn calibrated_examples() {
        let p = probe(vec![1.0, 0.0], 0.0);
        let v = [1.0, 0.0];
        assert_eq!(calibrated_magnitude(&[0.0, 0.0], &v, &p, 0.5, 10.0).unwrap(), 0.0);
        let eps = calibrated_magnitude(&[0.0, 0.0], &v, &p, 0.9, 10.0).unwrap();
        assert!((eps - 9f64.ln()).abs() < 1e-4, "{eps}");
        assert_eq!(calibrated_magnitude(&[3.0, 0.0], &v, &p, 0.9, 10.0).unwrap(), 0.0);
    }

    #[test]
    fn anti_directional_probe_uses_negative_ray() {
        let p = probe(vec![-2.0, 0.0], 0.0);
        let eps = calibrated_magnitude(&[0.0, 0.0], &[1.0, 0.0], &p, 0.9, 10.0).unwrap();
        assert!(eps < 0.0);
        assert!((eps + 9f64.ln() / 2.0).abs() < 1e-9);
    }

    #[test]
    fn calibration_failures() {
        let p = probe(vec![1.0, 0.0], 0.0);
        assert!(matches!(
            calibrated_magnitude(&[0.0, 0.0], &[1.0, 0.0], &p, 0.9, 1.0),
            Err(Error::CalibrationFailure { .. })
        ));
        // orthogonal direction can never help
        assert!(matches!(
            calibrated_magnitude(&[0.0, 0.0], &[0.0, 1.0], &p, 0.9, 100.0),
            Err(Error::CalibrationFailure { .. })
        ));
        assert!(calibrated_magnitude(&[0.0, 0.0], &[2.0, 0.0], &p, 0.9, 10.0).is_err());
        assert!(calibrated_magnitude(&[0.0, 0.0], &[1.0, 0.0], &p, 1.0, 10.0).is_err());
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("fixed:0.5".parse::<MagnitudePolicy>().unwrap(), MagnitudePolicy::Fixed { alpha: 0.5 });
        assert_eq!("calibrated:0.9".parse::<MagnitudePolicy>().unwrap(), MagnitudePolicy::calibrated(0.9));
        assert!("calibrated:1.5".parse::<MagnitudePolicy>().is_err());
        assert!("magic".parse::<MagnitudePolicy>().is_err());
    }

    fn direction() -> ValueDirection {
        ValueDirection {
            value_id: "benevolence".into(),
            method: Method::Probe,
            normalized: true,
            layers: [(3, vec![1.0, 0.0]), (4, vec![0.0, 1.0])].into_iter().collect(),
            metadata: DirectionMetadata {
                train_pairs: 2,
                seed: 0,
                position_policy: PositionPolicy::LastToken,
                mean_norms: [(3, 1.0), (4, 1.0)].into_iter().collect(),
                layer_accuracy: BTreeMap::new(),
            },
            probes: [(3, probe(vec![1.0, 0.0], 0.0))].into_iter().collect(),
        }
    }

    #[test]
    fn plan_fixed_and_per_value() {
        let d = direction();
        let plan = build_plan(&d, &MagnitudePolicy::Fixed { alpha: 0.5 }, &[3, 4], None).unwrap();
        assert_eq!(plan.coefficients(), vec![0.5, 0.5]);
        let table = [("benevolence".to_string(), 1.5)].into_iter().collect();
        let plan = build_plan(&d, &MagnitudePolicy::PerValue { table, alpha: 0.5 }, &[3], None).unwrap();
        assert_eq!(plan.coefficients(), vec![1.5]);
    }

    #[test]
    fn plan_errors() {
        let d = direction();
        assert!(matches!(
            build_plan(&d, &MagnitudePolicy::default(), &[5], None),
            Err(Error::MissingLayer { layer: 5, .. })
        ));
        let ctx = ActivationRecord {
            text_id: "0".into(),
            position_policy: PositionPolicy::LastToken,
            layers: [(3, vec![0.0, 0.0]), (4, vec![0.0, 0.0])].into_iter().collect(),
        };
        assert!(matches!(
            build_plan(&d, &MagnitudePolicy::calibrated(0.9), &[4], Some(&ctx)),
            Err(Error::MissingProbe { layer: 4, .. })
        ));
        assert!(build_plan(&d, &MagnitudePolicy::calibrated(0.9), &[3], None).is_err());
        let plan = build_plan(&d, &MagnitudePolicy::calibrated(0.9), &[3], Some(&ctx)).unwrap();
        assert!((plan.coefficients()[0] - 9f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn plan_validation() {
        let plan = SteeringPlan::single(2, vec![1.0; 4], 1.0);
        assert!(plan.validate(8, 4).is_ok());
        assert!(matches!(plan.validate(2, 4), Err(Error::LayerOutOfRange { .. })));
        assert!(matches!(plan.validate(8, 5), Err(Error::DimensionMismatch { .. })));
        let nan = SteeringPlan::single(2, vec![1.0; 4], f64::NAN);
        assert!(nan.validate(8, 4).is_err());
        let mut dup = SteeringPlan::single(2, vec![1.0; 4], 1.0);
        dup.entries.push(dup.entries[0].clone());
        assert!(dup.validate(8, 4).is_err());
    }

    #[test]
    fn hook_respects_token_policy() {
        let plan = SteeringPlan::single(1, vec![1.0, 2.0], 2.0);
        let mut hook = PlanHook::new(&plan);
        let mut h = vec![0.0, 0.0];
        hook.on_hidden(&HookSite { layer: 1, position: 0, phase: Phase::Prompt }, &mut h);
        assert_eq!(h, vec![0.0, 0.0]);
        hook.on_hidden(&HookSite { layer: 0, position: 1, phase: Phase::Generation(0) }, &mut h);
        assert_eq!(h, vec![0.0, 0.0]);
        hook.on_hidden(&HookSite { layer: 1, position: 1, phase: Phase::Generation(0) }, &mut h);
        assert_eq!(h, vec![2.0, 4.0]);

        let all = plan.clone().with_token_policy(TokenPolicy::AllPositions);
        let mut hook = PlanHook::new(&all);
        let mut h = vec![0.0, 0.0];
        hook.on_hidden(&HookSite { layer: 1, position: 0, phase: Phase::Prompt }, &mut h);
        assert_eq!(h, vec![2.0, 4.0]);
    }
}
