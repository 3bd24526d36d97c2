// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logistic linear probes `σ(w·h + b)` and automatic layer selection.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, mean_vector, normalized, sigmoid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// L2 penalty on `w` (the bias is not penalized).
    pub reg_strength: f64,
    pub max_iters: usize,
    /// Stop once the objective changes by less than this between iterations.
    pub tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            reg_strength: 1e-3,
            max_iters: 500,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub seed: u64,
    pub train_accuracy: f64,
    /// Accuracy on held-out pairs, when a validation split was given.
    #[serde(default)]
    pub val_accuracy: Option<f64>,
}

impl ProbeModel {
    pub fn logit(&self, h: &[f64]) -> f64 {
        dot(&self.weights, h) + self.bias
    }

    /// Probe confidence that `h` expresses the value.
    pub fn score(&self, h: &[f64]) -> f64 {
        sigmoid(self.logit(h))
    }

    /// Fraction classified correctly; positives count when the logit is ≥ 0.
    pub fn accuracy(&self, pos: &[Vec<f64>], neg: &[Vec<f64>]) -> f64 {
        let total = pos.len() + neg.len();
        if total == 0 {
            return 0.0;
        }
        let hits = pos.iter().filter(|h| self.logit(h) >= 0.0).count()
            + neg.iter().filter(|h| self.logit(h) < 0.0).count();
        hits as f64 / total as f64
    }

    pub fn validated(mut self, val_pos: &[Vec<f64>], val_neg: &[Vec<f64>]) -> Self {
        self.val_accuracy = Some(self.accuracy(val_pos, val_neg));
        self
    }
}

fn objective(w: &[f64], b: f64, xs: &[Vec<f64>], ys: &[f64], reg: f64) -> f64 {
    let n = xs.len() as f64;
    let bce: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let z = dot(w, x) + b;
            // log(1 + e^z) - y z, computed stably
            let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            softplus - y * z
        })
        .sum();
    bce / n + 0.5 * reg * dot(w, w)
}

fn gradient(w: &[f64], b: f64, xs: &[Vec<f64>], ys: &[f64], reg: f64) -> (Vec<f64>, f64) {
    let n = xs.len() as f64;
    let mut gw: Vec<f64> = w.iter().map(|wi| reg * wi).collect();
    let mut gb = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let r = (sigmoid(dot(w, x) + b) - y) / n;
        for (g, xi) in gw.iter_mut().zip(x) {
            *g += r * xi;
        }
        gb += r;
    }
    (gw, gb)
}

/// Largest eigenvalue of the (uncentered) second-moment matrix of `[x, 1]`,
/// by power iteration.
fn second_moment_bound(xs: &[Vec<f64>]) -> f64 {
    let dim = xs[0].len() + 1;
    let n = xs.len() as f64;
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let mut next = vec![0.0; dim];
        for x in xs {
            let proj = dot(&x[..], &v[..dim - 1]) + v[dim - 1];
            for (o, xi) in next.iter_mut().zip(x) {
                *o += proj * xi / n;
            }
            next[dim - 1] += proj / n;
        }
        let new_lambda = dot(&next, &v);
        match normalized(&next) {
            Some(u) => v = u,
            None => return 0.0,
        }
        if (new_lambda - lambda).abs() <= 1e-10 * new_lambda.abs() {
            lambda = new_lambda;
            break;
        }
        lambda = new_lambda;
    }
    // power iteration approaches from below; pad a little
    lambda * 1.05
}

/// Fits a logistic probe separating `pos` (label 1) from `neg` (label 0).
///
/// Full-batch Nesterov-accelerated gradient descent on mean binary
/// cross-entropy plus `reg/2 ‖w‖²`, with step `1/L` for the exact smoothness
/// constant and a restart whenever the objective rises. Features are
/// centered on the pooled mean internally; with an unpenalized bias this is
/// an exact reparametrization, it only improves conditioning.
pub fn train_probe(
    pos: &[Vec<f64>],
    neg: &[Vec<f64>],
    seed: u64,
    config: &ProbeConfig,
) -> Result<ProbeModel> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument("probe needs both classes".into()));
    }
    if config.max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
    }
    if !(config.reg_strength.is_finite() && config.reg_strength >= 0.0) {
        return Err(Error::InvalidArgument("reg_strength must be a finite value >= 0".into()));
    }
    let dim = pos[0].len();
    for x in pos.iter().chain(neg) {
        if x.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite activation".into()));
        }
    }

    let raw: Vec<Vec<f64>> = pos.iter().chain(neg).cloned().collect();
    let center = mean_vector(&raw)?;
    let xs: Vec<Vec<f64>> = raw
        .iter()
        .map(|x| x.iter().zip(&center).map(|(a, c)| a - c).collect())
        .collect();
    let ys: Vec<f64> = std::iter::repeat_n(1.0, pos.len())
        .chain(std::iter::repeat_n(0.0, neg.len()))
        .collect();

    let reg = config.reg_strength;
    let smooth = 0.25 * second_moment_bound(&xs) + reg;
    let step = if smooth > 0.0 { 1.0 / smooth } else { 1.0 };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w: Vec<f64> = (0..dim).map(|_| (rng.random::<f64>() - 0.5) * 0.02).collect();
    let mut b = 0.0;
    let mut yw = w.clone();
    let mut yb = b;
    let mut t = 1.0_f64;
    let mut loss = objective(&w, b, &xs, &ys, reg);

    for _ in 0..config.max_iters {
        let (gw, gb) = gradient(&yw, yb, &xs, &ys, reg);
        let next_w: Vec<f64> = yw.iter().zip(&gw).map(|(y, g)| y - step * g).collect();
        let next_b = yb - step * gb;
        let next_loss = objective(&next_w, next_b, &xs, &ys, reg);

        if next_loss > loss {
            // adaptive restart: drop momentum, retry from the last iterate
            yw = w.clone();
            yb = b;
            t = 1.0;
            continue;
        }
        let next_t = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let momentum = (t - 1.0) / next_t;
        yw = next_w
            .iter()
            .zip(&w)
            .map(|(nw, ow)| nw + momentum * (nw - ow))
            .collect();
        yb = next_b + momentum * (next_b - b);
        t = next_t;

        let change = loss - next_loss;
        w = next_w;
        b = next_b;
        loss = next_loss;
        if change < config.tolerance {
            break;
        }
    }

    // back to raw coordinates: w·(x − c) + b = w·x + (b − w·c)
    let bias = b - dot(&w, &center);
    if w.iter().any(|v| !v.is_finite()) || !bias.is_finite() {
        return Err(Error::DegenerateData("probe training diverged".into()));
    }
    let mut model = ProbeModel {
        weights: w,
        bias,
        seed,
        train_accuracy: 0.0,
        val_accuracy: None,
    };
    model.train_accuracy = model.accuracy(pos, neg);
    Ok(model)
}

/// `w / ‖w‖`.
pub fn probe_direction(probe: &ProbeModel) -> Result<Vec<f64>> {
    normalized(&probe.weights)
        .ok_or_else(|| Error::DegenerateData("probe weight vector is zero".into()))
}

/// Layers with accuracy ≥ `threshold`, best first (ties by lower index),
/// at most `max_layers`.
pub fn select_layers_auto(
    per_layer_accuracy: &BTreeMap<usize, f64>,
    threshold: f64,
    max_layers: usize,
) -> Result<Vec<usize>> {
    if per_layer_accuracy.is_empty() {
        return Err(Error::InvalidArgument("no layer accuracies given".into()));
    }
    if max_layers == 0 {
        return Err(Error::InvalidArgument("max_layers must be >= 1".into()));
    }
    let mut ranked: Vec<(usize, f64)> = per_layer_accuracy
        .iter()
        .filter(|(_, &acc)| acc >= threshold)
        .map(|(&l, &acc)| (l, acc))
        .collect();
    if ranked.is_empty() {
        let best = per_layer_accuracy.values().copied().fold(f64::NEG_INFINITY, f64::max);
        return Err(Error::NoLayerQualifies {
            threshold,
            best_accuracy: best,
        });
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(max_layers);
    Ok(ranked.into_iter().map(|(l, _)| l).collect())
}
