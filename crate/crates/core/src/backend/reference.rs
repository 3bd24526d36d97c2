// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded byte-level decoder-only transformer.
//!
//! Randomly initialized and untrained: it exists to give the steering code
//! real, deterministic, hook-observable dynamics at desk scale. Pre-norm
//! blocks (RMSNorm, multi-head causal attention, GELU MLP), learned absolute
//! positions, tied input/output embeddings. Decoding emits printable ASCII
//! only.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    check_layers, GenerateRequest, HookSite, LayerHook, ModelBackend, Phase, PositionPolicy,
};
use crate::error::{Error, Result};
use crate::steering::{PlanHook, SteeringPlan};

const VOCAB: usize = 256;
const PRINTABLE: std::ops::RangeInclusive<usize> = 32..=126;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub mlp_size: usize,
    pub max_context: usize,
    pub seed: u64,
    /// 0 means greedy decoding.
    pub temperature: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            num_layers: 8,
            hidden_size: 64,
            num_heads: 4,
            mlp_size: 256,
            max_context: 2048,
            seed: 0,
            temperature: 0.0,
        }
    }
}

struct Block {
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
}

pub struct ReferenceModel {
    cfg: ReferenceConfig,
    tok_emb: Vec<f64>,
    pos_emb: Vec<f64>,
    blocks: Vec<Block>,
}

#[derive(Clone)]
struct Session {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect()
}

/// `out = W x` for row-major `W` with `rows × x.len()`.
fn matvec(w: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn log_softmax_printable(logits: &[f64]) -> Vec<f64> {
    let max = PRINTABLE.map(|i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + PRINTABLE.map(|i| (logits[i] - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

impl ReferenceModel {
    pub fn new(cfg: ReferenceConfig) -> Result<Self> {
        if cfg.num_layers == 0 || cfg.hidden_size == 0 || cfg.num_heads == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        if !cfg.hidden_size.is_multiple_of(cfg.num_heads) {
            return Err(Error::InvalidArgument(format!(
                "hidden size {} is not divisible by {} heads",
                cfg.hidden_size, cfg.num_heads
            )));
        }
        let d = cfg.hidden_size;
        let m = cfg.mlp_size;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let tok_emb = gaussian(&mut rng, VOCAB * d, 1.0);
        let pos_emb = gaussian(&mut rng, cfg.max_context * d, 0.3);
        let proj = 1.0 / (d as f64).sqrt();
        let blocks = (0..cfg.num_layers)
            .map(|_| Block {
                wq: gaussian(&mut rng, d * d, proj),
                wk: gaussian(&mut rng, d * d, proj),
                wv: gaussian(&mut rng, d * d, proj),
                wo: gaussian(&mut rng, d * d, proj),
                w1: gaussian(&mut rng, m * d, proj),
                b1: gaussian(&mut rng, m, 0.1),
                w2: gaussian(&mut rng, d * m, 1.0 / (m as f64).sqrt()),
            })
            .collect();
        Ok(ReferenceModel {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
        })
    }

    /// The default 8-layer, 64-wide model with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self::new(ReferenceConfig {
            seed,
            ..ReferenceConfig::default()
        })
        .expect("default config is valid")
    }

    pub fn config(&self) -> &ReferenceConfig {
        &self.cfg
    }

    fn new_session(&self) -> Session {
        Session {
            keys: vec![Vec::new(); self.cfg.num_layers],
            values: vec![Vec::new(); self.cfg.num_layers],
            len: 0,
        }
    }

    /// Runs one position through the network, appending to the KV cache.
    /// `visit` sees the hidden state after every block; it is the hook site.
    fn step(
        &self,
        session: &mut Session,
        token: u32,
        phase: Phase,
        visit: &mut dyn FnMut(&HookSite, &mut [f64]),
    ) -> Vec<f64> {
        let d = self.cfg.hidden_size;
        let heads = self.cfg.num_heads;
        let hd = d / heads;
        let pos = session.len;
        let t = token as usize;

        let mut x: Vec<f64> = (0..d)
            .map(|i| self.tok_emb[t * d + i] + self.pos_emb[pos * d + i])
            .collect();

        for (layer, block) in self.blocks.iter().enumerate() {
            let a = rms_norm(&x);
            let q = matvec(&block.wq, &a, d);
            let k = matvec(&block.wk, &a, d);
            let v = matvec(&block.wv, &a, d);
            session.keys[layer].extend_from_slice(&k);
            session.values[layer].extend_from_slice(&v);
            let keys = &session.keys[layer];
            let vals = &session.values[layer];
            let n = pos + 1;

            let mut attn = vec![0.0; d];
            let scale = 1.0 / (hd as f64).sqrt();
            for h in 0..heads {
                let off = h * hd;
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        let kj = &keys[j * d + off..j * d + off + hd];
                        q[off..off + hd].iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                    })
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = weights.iter().sum();
                for (j, w) in weights.iter().enumerate() {
                    let vj = &vals[j * d + off..j * d + off + hd];
                    for (o, vv) in attn[off..off + hd].iter_mut().zip(vj) {
                        *o += w / total * vv;
                    }
                }
            }
            let attn_out = matvec(&block.wo, &attn, d);
            for (xi, ai) in x.iter_mut().zip(&attn_out) {
                *xi += ai;
            }

            let mnorm = rms_norm(&x);
            let mut hidden = matvec(&block.w1, &mnorm, self.cfg.mlp_size);
            for (hv, b) in hidden.iter_mut().zip(&block.b1) {
                *hv = gelu(*hv + b);
            }
            let mlp_out = matvec(&block.w2, &hidden, d);
            for (xi, mi) in x.iter_mut().zip(&mlp_out) {
                *xi += mi;
            }

            visit(
                &HookSite {
                    layer,
                    position: pos,
                    phase,
                },
                &mut x,
            );
        }
        session.len += 1;

        let f = rms_norm(&x);
        (0..VOCAB)
            .map(|tok| {
                self.tok_emb[tok * d..(tok + 1) * d]
                    .iter()
                    .zip(&f)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    fn pick(&self, logits: &[f64], rng: &mut ChaCha8Rng) -> u32 {
        if self.cfg.temperature <= 0.0 {
            // argmax, lowest byte wins ties
            let mut best = *PRINTABLE.start();
            for i in PRINTABLE {
                if logits[i] > logits[best] {
                    best = i;
                }
            }
            return best as u32;
        }
        let lp = log_softmax_printable(logits);
        let weights: Vec<f64> = PRINTABLE.map(|i| (lp[i] / self.cfg.temperature).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (w, tok) in weights.iter().zip(PRINTABLE) {
            if u < *w {
                return tok as u32;
            }
            u -= w;
        }
        *PRINTABLE.end() as u32
    }

    fn run_generation(&self, req: &GenerateRequest, hook: &mut dyn LayerHook) -> Result<String> {
        let prompt = self.tokenize(&req.prompt)?;
        if prompt.len() + req.max_tokens > self.cfg.max_context {
            return Err(Error::ContextOverflow {
                prompt_tokens: prompt.len(),
                max_tokens: req.max_tokens,
                budget: self.cfg.max_context,
                comment_lengths: Vec::new(),
            });
        }
        let mut visit = |site: &HookSite, h: &mut [f64]| hook.on_hidden(site, h);
        let mut session = self.new_session();
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);

        let last = prompt.len() - 1;
        for &tok in &prompt[..last] {
            self.step(&mut session, tok, Phase::Prompt, &mut visit);
        }
        let mut logits = self.step(&mut session, prompt[last], Phase::Generation(0), &mut visit);
        let mut out: Vec<u8> = Vec::with_capacity(req.max_tokens);
        let mut step = 0;

        if let Some(choices) = &req.choices {
            let mut best: Option<(f64, Vec<u8>, Session, Vec<f64>)> = None;
            for choice in choices {
                let bytes = choice.as_bytes();
                if bytes.is_empty() || bytes.len() > req.max_tokens {
                    return Err(Error::InvalidArgument(format!(
                        "choice {choice:?} must be non-empty and fit in max_tokens"
                    )));
                }
                let mut s = session.clone();
                let mut lp = log_softmax_printable(&logits);
                let mut total = 0.0;
                let mut next = logits.clone();
                for (i, &b) in bytes.iter().enumerate() {
                    total += lp[b as usize];
                    next = self.step(&mut s, b as u32, Phase::Generation(step + 1 + i), &mut visit);
                    lp = log_softmax_printable(&next);
                }
                if best.as_ref().is_none_or(|(score, ..)| total > *score) {
                    best = Some((total, bytes.to_vec(), s, next));
                }
            }
            let (_, bytes, s, next) =
                best.ok_or_else(|| Error::InvalidArgument("empty choice list".into()))?;
            step += bytes.len();
            out.extend_from_slice(&bytes);
            session = s;
            logits = next;
        }

        while out.len() < req.max_tokens {
            let tok = self.pick(&logits, &mut rng);
            out.push(tok as u8);
            if out.len() == req.max_tokens {
                break;
            }
            step += 1;
            logits = self.step(&mut session, tok, Phase::Generation(step), &mut visit);
        }
        Ok(String::from_utf8(out).expect("printable ASCII"))
    }
}

struct NoHook;

impl LayerHook for NoHook {
    fn on_hidden(&mut self, _site: &HookSite, _hidden: &mut [f64]) {}
}

impl ModelBackend for ReferenceModel {
    fn num_layers(&self) -> usize {
        self.cfg.num_layers
    }

    fn hidden_size(&self) -> usize {
        self.cfg.hidden_size
    }

    fn max_context(&self) -> usize {
        self.cfg.max_context
    }

    fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        if text.is_empty() {
            return Err(Error::InvalidArgument("cannot tokenize an empty string".into()));
        }
        Ok(text.bytes().map(u32::from).collect())
    }

    fn generate(&self, req: &GenerateRequest, plan: Option<&SteeringPlan>) -> Result<String> {
        match plan {
            None => self.run_generation(req, &mut NoHook),
            Some(plan) => {
                plan.validate(self.cfg.num_layers, self.cfg.hidden_size)?;
                let mut hook = PlanHook::new(plan);
                let text = self.run_generation(req, &mut hook)?;
                hook.finish()?;
                Ok(text)
            }
        }
    }

    fn generate_hooked(&self, req: &GenerateRequest, hook: &mut dyn LayerHook) -> Result<String> {
        self.run_generation(req, hook)
    }

    fn capture(
        &self,
        text: &str,
        layers: &[usize],
        policy: PositionPolicy,
    ) -> Result<BTreeMap<usize, Vec<f64>>> {
        check_layers(layers, self.cfg.num_layers)?;
        let tokens = self.tokenize(text)?;
        if tokens.len() > self.cfg.max_context {
            return Err(Error::ContextOverflow {
                prompt_tokens: tokens.len(),
                max_tokens: 0,
                budget: self.cfg.max_context,
                comment_lengths: Vec::new(),
            });
        }
        let d = self.cfg.hidden_size;
        let mut sums: BTreeMap<usize, Vec<f64>> =
            layers.iter().map(|&l| (l, vec![0.0; d])).collect();
        let mut lasts: BTreeMap<usize, Vec<f64>> = BTreeMap::new();

        let mut session = self.new_session();
        let last = tokens.len() - 1;
        for (i, &tok) in tokens.iter().enumerate() {
            // Phase labels match generation so recorded sites line up.
            let phase = if i == last { Phase::Generation(0) } else { Phase::Prompt };
            let mut visit = |site: &HookSite, h: &mut [f64]| {
                if let Some(acc) = sums.get_mut(&site.layer) {
                    for (a, v) in acc.iter_mut().zip(h.iter()) {
                        *a += v;
                    }
                    if site.position == last {
                        lasts.insert(site.layer, h.to_vec());
                    }
                }
            };
            self.step(&mut session, tok, phase, &mut visit);
        }

        Ok(match policy {
            PositionPolicy::LastToken => lasts,
            PositionPolicy::MeanOverTokens => {
                let n = tokens.len() as f64;
                sums.into_iter()
                    .map(|(l, v)| (l, v.into_iter().map(|x| x / n).collect()))
                    .collect()
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{capture_activations, RecordingHook};

    #[test]
    fn same_seed_same_weights_and_text() {
        let a = ReferenceModel::with_seed(3);
        let b = ReferenceModel::with_seed(3);
        let req = GenerateRequest::new("Hello there", 16, 0);
        assert_eq!(a.generate(&req, None).unwrap(), b.generate(&req, None).unwrap());
        let c = ReferenceModel::with_seed(4);
        assert_ne!(a.tok_emb, c.tok_emb);
    }

    #[test]
    fn output_is_printable_and_sized() {
        let m = ReferenceModel::with_seed(1);
        let text = m.generate(&GenerateRequest::new("abc", 20, 0), None).unwrap();
        assert_eq!(text.len(), 20);
        assert!(text.bytes().all(|b| (32..=126).contains(&b)));
    }

    #[test]
    fn capture_shapes_and_policies() {
        let m = ReferenceModel::with_seed(1);
        let recs = capture_activations(&m, &["one text"], &[3], PositionPolicy::LastToken).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].layers.len(), 1);
        assert_eq!(recs[0].layer(3).unwrap().len(), 64);

        let last = m.capture("x", &[2, 5], PositionPolicy::LastToken).unwrap();
        let mean = m.capture("x", &[2, 5], PositionPolicy::MeanOverTokens).unwrap();
        assert_eq!(last, mean);
    }

    #[test]
    fn capture_errors() {
        let m = ReferenceModel::with_seed(1);
        assert!(matches!(
            m.capture("abc", &[8], PositionPolicy::LastToken),
            Err(Error::LayerOutOfRange { layer: 8, .. })
        ));
        assert!(m.capture("", &[1], PositionPolicy::LastToken).is_err());
    }

    #[test]
    fn capture_matches_hook_at_step_zero() {
        let m = ReferenceModel::with_seed(9);
        let prompt = "The council debates the dam.";
        let captured = m.capture(prompt, &[4], PositionPolicy::LastToken).unwrap();
        let mut rec = RecordingHook::new([4]);
        m.generate_hooked(&GenerateRequest::new(prompt, 4, 0), &mut rec).unwrap();
        let seen = rec.at_step(4, 0).unwrap();
        for (a, b) in captured[&4].iter().zip(seen) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn forced_choice_prefixes_output() {
        let m = ReferenceModel::with_seed(2);
        let req = GenerateRequest::new("Pick one. Answer:", 8, 0)
            .with_choices(vec!["A.".into(), "B.".into()]);
        let text = m.generate(&req, None).unwrap();
        assert!(text.starts_with("A.") || text.starts_with("B."), "{text}");
        assert_eq!(text.len(), 8);
    }

    #[test]
    fn sampling_is_seeded() {
        let m = ReferenceModel::new(ReferenceConfig {
            temperature: 1.0,
            ..ReferenceConfig::default()
        })
        .unwrap();
        let a = m.generate(&GenerateRequest::new("seeded", 24, 5), None).unwrap();
        let b = m.generate(&GenerateRequest::new("seeded", 24, 5), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn context_budget_enforced() {
        let m = ReferenceModel::new(ReferenceConfig {
            max_context: 8,
            ..ReferenceConfig::default()
        })
        .unwrap();
        assert!(matches!(
            m.generate(&GenerateRequest::new("abcdef", 4, 0), None),
            Err(Error::ContextOverflow { .. })
        ));
    }
}
