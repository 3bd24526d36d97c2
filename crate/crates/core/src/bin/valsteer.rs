// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use valsteer::backend::{capture_activations, generate_with_hooks, PositionPolicy, TokenPolicy};
use valsteer::directions::{estimate_directions, BankEncoding, DirectionBank, EstimationConfig, Method};
use valsteer::pipeline::{
    build_backend, build_scorer, compose_input, evaluate, gate_inputs, load_corpora, load_taxonomy_or_default,
    read_jsonl, run_pipeline, to_jsonl, validate_config, write_file, BackendConfig, ComposeContext, GateRecord,
    GoldRecord, InputRecord, Mode, ResponseRecord, RunConfig, ScorerConfig,
};
use valsteer::pluralism::{PromptTemplates, Weighting};
use valsteer::relevance::{gate_top_k_forced, selection_statistics, DEFAULT_K};
use valsteer::steering::{build_plan, MagnitudePolicy};
use valsteer::{Error, Result};

#[derive(Parser)]
#[command(name = "valsteer", version, about = "Value-conditioned activation steering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct BackendArgs {
    /// Use the external backend at --endpoint (or VALSTEER_ENDPOINT).
    #[arg(long)]
    external: bool,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    #[arg(long, requires = "external")]
    num_layers: Option<usize>,
    #[arg(long, requires = "external")]
    hidden_size: Option<usize>,
    #[arg(long, requires = "external", default_value_t = 4096)]
    max_context: usize,
}

impl BackendArgs {
    fn config(&self) -> Result<BackendConfig> {
        if !self.external {
            return Ok(BackendConfig::Reference { seed: self.model_seed });
        }
        let need = |v: Option<usize>, name: &str| {
            v.ok_or_else(|| Error::InvalidArgument(format!("--{name} is required with --external")))
        };
        Ok(BackendConfig::External {
            endpoint: self.endpoint.clone(),
            num_layers: need(self.num_layers, "num-layers")?,
            hidden_size: need(self.hidden_size, "hidden-size")?,
            max_context: self.max_context,
        })
    }
}

#[derive(Args, Clone)]
struct ScorerArgs {
    /// lexical (alias stub), table or nli
    #[arg(long, default_value = "lexical")]
    scorer: String,
    /// JSON object of value id to score (table scorer).
    #[arg(long)]
    scorer_table: Option<PathBuf>,
    /// Entailment service address (nli scorer); falls back to VALSTEER_ENDPOINT.
    #[arg(long)]
    scorer_endpoint: Option<String>,
}

impl ScorerArgs {
    fn config(&self) -> Result<ScorerConfig> {
        match self.scorer.as_str() {
            "lexical" | "stub" => Ok(ScorerConfig::Lexical),
            "table" => Ok(ScorerConfig::Table {
                path: self
                    .scorer_table
                    .clone()
                    .ok_or_else(|| Error::InvalidArgument("--scorer-table is required".into()))?,
                default: 0.0,
            }),
            "nli" => Ok(ScorerConfig::Nli { endpoint: self.scorer_endpoint.clone(), hypothesis: None }),
            other => Err(Error::InvalidArgument(format!("unknown scorer {other:?}"))),
        }
    }
}

fn parse_list(s: &str) -> Vec<String> {
    s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect()
}

#[derive(Subcommand)]
enum Command {
    /// Select the Top-k relevant values for each input.
    Gate {
        #[arg(long, alias = "input")]
        inputs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// Always include this value, replacing the lowest-ranked one.
        #[arg(long)]
        force: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        scorer: ScorerArgs,
    },
    /// Estimate steering directions and write a bank.
    Estimate {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated value ids, or `all` (the default) for every value with pairs.
        #[arg(long)]
        values: Option<String>,
        #[arg(long, alias = "data")]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// mean_diff, pca or probe
        #[arg(long, default_value = "mean_diff")]
        method: String,
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        normalize: bool,
        /// Also fit per-layer probes (needed by calibrated magnitudes).
        #[arg(long)]
        attach_probes: bool,
        #[arg(long)]
        max_pairs: Option<usize>,
        /// Held-out probe accuracy a layer needs to be kept (probe method).
        #[arg(long, default_value_t = 0.8)]
        accuracy_threshold: f64,
        /// Most layers the probe method keeps.
        #[arg(long, default_value_t = 5)]
        max_layers: usize,
        /// Average hidden states over all tokens instead of the last one.
        #[arg(long)]
        mean_over_tokens: bool,
        /// Write the JSON encoding instead of the binary one.
        #[arg(long)]
        text: bool,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Generate one steered completion.
    Steer {
        #[arg(long, required_unless_present = "prompt_file", conflicts_with = "prompt_file")]
        prompt: Option<String>,
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        #[arg(long)]
        value: String,
        #[arg(long)]
        bank: PathBuf,
        /// fixed:<alpha> or calibrated:<p0>
        #[arg(long, default_value = "fixed:0.5")]
        policy: String,
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        #[arg(long, default_value_t = 32)]
        max_tokens: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Steer prompt positions too.
        #[arg(long)]
        all_positions: bool,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Generate comments for gated inputs and compose responses.
    Compose {
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        gates: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the comment sets here.
        #[arg(long)]
        comments_out: Option<PathBuf>,
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        options: Option<String>,
        #[arg(long, default_value = "uniform")]
        weighting: Weighting,
        #[arg(long, default_value = "fixed:0.5")]
        policy: String,
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        comment_tokens: usize,
        #[arg(long, default_value_t = 64)]
        compose_tokens: usize,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Score responses against gold data.
    Eval {
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Bootstrap iterations.
        #[arg(long, default_value_t = 1000)]
        ci: usize,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[command(flatten)]
        scorer: ScorerArgs,
    },
    /// Run gate, estimate, compose and eval from a config file.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
    /// Per-value selection statistics over a gates file.
    Stats {
        #[arg(long)]
        gates: PathBuf,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config file and list every violation.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn emit_json(value: &impl serde::Serialize, out: Option<&PathBuf>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    match out {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Gate { inputs, out, k, taxonomy, force, seed, scorer } => {
            let taxonomy = load_taxonomy_or_default(taxonomy.as_deref())?;
            let scorer = build_scorer(&scorer.config()?, &taxonomy)?;
            let inputs: Vec<InputRecord> = read_jsonl(&inputs)?;
            let records = match force {
                None => gate_inputs(&inputs, &taxonomy, scorer.as_ref(), k, seed)?,
                Some(forced) => inputs
                    .iter()
                    .map(|i| {
                        Ok(GateRecord {
                            seed,
                            text: i.text.clone(),
                            gate: gate_top_k_forced(&i.input_id, &i.text, &taxonomy, scorer.as_ref(), k, &forced)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            };
            write_file(&out, &to_jsonl(&records))?;
            eprintln!("gated {} inputs into {}", records.len(), out.display());
        }
        Command::Estimate {
            out,
            values,
            corpus,
            taxonomy,
            method,
            layers,
            seed,
            normalize,
            attach_probes,
            max_pairs,
            accuracy_threshold,
            max_layers,
            mean_over_tokens,
            text,
            backend,
        } => {
            let taxonomy = load_taxonomy_or_default(taxonomy.as_deref())?;
            let backend = build_backend(&backend.config()?)?;
            let corpora = load_corpora(&corpus, &taxonomy)?;
            let method: Method = method.parse()?;
            let ids: BTreeSet<String> = match values {
                Some(v) if v != "all" => parse_list(&v).into_iter().collect(),
                _ => corpora.keys().cloned().collect(),
            };
            let mut cfg = EstimationConfig {
                seed,
                normalize,
                attach_probes,
                accuracy_threshold,
                max_layers,
                position_policy: if mean_over_tokens { PositionPolicy::MeanOverTokens } else { PositionPolicy::LastToken },
                ..EstimationConfig::default()
            };
            cfg.layers = layers.unwrap_or_else(|| valsteer::default_steering_layers(backend.num_layers()));
            let mut bank = DirectionBank::new();
            for id in &ids {
                let mut ds = corpora
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("no contrastive pairs for value {id}")))?;
                if let Some(n) = max_pairs {
                    ds.pairs.truncate(n);
                }
                bank.insert(estimate_directions(backend.as_ref(), &ds, method, &cfg)?);
            }
            bank.save(&out, if text { BankEncoding::Text } else { BankEncoding::Binary })?;
            eprintln!("wrote {} directions to {}", bank.len(), out.display());
        }
        Command::Steer { prompt, prompt_file, value, bank, policy, layers, max_tokens, seed, all_positions, backend } => {
            let prompt = match (prompt, prompt_file) {
                (Some(p), _) => p,
                (None, Some(path)) => std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?,
                (None, None) => unreachable!("clap requires one of them"),
            };
            let backend = build_backend(&backend.config()?)?;
            let bank = DirectionBank::load(&bank)?;
            let policy: MagnitudePolicy = policy.parse()?;
            let direction = bank.require(&value)?;
            let layers = layers.unwrap_or_else(|| direction.layer_indices());
            let context = match policy {
                MagnitudePolicy::Calibrated { .. } => {
                    capture_activations(backend.as_ref(), &[prompt.as_str()], &layers, PositionPolicy::LastToken)?.pop()
                }
                _ => None,
            };
            let mut plan = build_plan(direction, &policy, &layers, context.as_ref())?;
            if all_positions {
                plan.token_policy = TokenPolicy::AllPositions;
            }
            let unsteered = generate_with_hooks(backend.as_ref(), &prompt, None, max_tokens, seed)?;
            let steered = generate_with_hooks(backend.as_ref(), &prompt, Some(&plan), max_tokens, seed)?;
            emit_json(
                &serde_json::json!({
                    "value_id": value,
                    "layers": plan.layers(),
                    "coefficients": plan.coefficients(),
                    "unsteered": unsteered,
                    "steered": steered,
                }),
                None,
            )?;
        }
        Command::Compose {
            mode,
            gates,
            bank,
            out,
            comments_out,
            target,
            options,
            weighting,
            policy,
            layers,
            taxonomy,
            templates,
            seed,
            comment_tokens,
            compose_tokens,
            scorer,
            backend,
        } => {
            let taxonomy = load_taxonomy_or_default(taxonomy.as_deref())?;
            let templates = match templates {
                Some(p) => PromptTemplates::load(p)?,
                None => PromptTemplates::default(),
            };
            let scorer = build_scorer(&scorer.config()?, &taxonomy)?;
            let backend = build_backend(&backend.config()?)?;
            let bank = DirectionBank::load(&bank)?;
            let policy: MagnitudePolicy = policy.parse()?;
            let gates: Vec<GateRecord> = read_jsonl(&gates)?;
            let ctx = ComposeContext {
                backend: backend.as_ref(),
                taxonomy: &taxonomy,
                scorer: scorer.as_ref(),
                bank: &bank,
                templates: &templates,
                policy: &policy,
                mode,
                weighting,
                layers,
                token_policy: TokenPolicy::GeneratedOnly,
                comment_max_tokens: comment_tokens,
                compose_max_tokens: compose_tokens,
                default_options: options.as_deref().map(parse_list),
                seed,
            };
            let mut comments = Vec::new();
            let mut responses = Vec::new();
            for g in &gates {
                let input = InputRecord {
                    input_id: g.gate.input_id.clone(),
                    text: g.text.clone(),
                    target: target.clone(),
                    options: None,
                };
                let (c, r) = compose_input(&ctx, &input, &g.gate)?;
                comments.push(c);
                responses.push(r);
            }
            write_file(&out, &to_jsonl(&responses))?;
            if let Some(p) = comments_out {
                write_file(&p, &to_jsonl(&comments))?;
            }
            eprintln!("composed {} responses into {}", responses.len(), out.display());
        }
        Command::Eval { mode, pred, gold, report, ci, tau, seed, taxonomy, scorer } => {
            let taxonomy = load_taxonomy_or_default(taxonomy.as_deref())?;
            let scorer = build_scorer(&scorer.config()?, &taxonomy)?;
            let responses: Vec<ResponseRecord> = read_jsonl(&pred)?;
            let gold: Vec<GoldRecord> = read_jsonl(&gold)?;
            let r = evaluate(mode, &responses, &gold, &taxonomy, scorer.as_ref(), tau, ci, seed)?;
            emit_json(&r, Some(&report))?;
        }
        Command::Pipeline { config } => {
            let cfg = RunConfig::load(&config)?;
            let manifest = run_pipeline(&cfg)?;
            emit_json(&manifest, None)?;
        }
        Command::Stats { gates, taxonomy, out } => {
            let taxonomy = load_taxonomy_or_default(taxonomy.as_deref())?;
            let gates: Vec<GateRecord> = read_jsonl(&gates)?;
            let results: Vec<_> = gates.into_iter().map(|g| g.gate).collect();
            emit_json(&selection_statistics(&results, &taxonomy)?, out.as_ref())?;
        }
        Command::Validate { config } => {
            let cfg = RunConfig::load(&config)?;
            match validate_config(&cfg) {
                Ok(()) => println!("ok"),
                Err(violations) => {
                    for v in violations {
                        println!("{v}");
                    }
                    return Ok(ExitCode::from(2));
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
