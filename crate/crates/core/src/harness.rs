//! Experiment harness: seeded task sweeps evaluated under FLOP-matched
//! inference conditions, with one CSV row per (task, condition) and
//! persisted adaptation traces.

use crate::adapt::{run_qttt_with_cache, AdaptationConfig, AdaptationTrace};
use crate::diagnostics::attention_mass;
use crate::error::{Error, Result};
use crate::flops::FlopModel;
use crate::model::checkpoint::load_checkpoint;
use crate::model::{
    prefill_and_cache, tokens_from_bytes, DecodeSession, KVCache, ModelParams,
    SamplerConfig, EOS,
};
use crate::numeric::Rng;
use crate::tasks::{
    gen_code_needle_task, gen_transaction_task, render_task_tokens, score_answer, BugType,
    PromptStyle, TaskInstance, TaskKind,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Forced between free "thinking" decoding and answer decoding.
pub const FORCED_ANSWER_PREFIX: &str = "\n[ANSWER]\n";

pub const CSV_HEADER: &str =
    "task_kind,length_param,condition,seed,accuracy,needle_mass_mean,needle_mass_std,margin_mean,flops";

/// What to generate for a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub lengths: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Bug types cycled across seeds (transactions only).
    #[serde(default = "default_bug_mix")]
    pub bug_mix: Vec<BugType>,
    #[serde(default = "default_n_accounts")]
    pub n_accounts: usize,
    /// Lift the default n_ops range check (needed below 25 ops).
    #[serde(default)]
    pub wide: bool,
}

fn default_bug_mix() -> Vec<BugType> {
    BugType::ALL_BUGS.to_vec()
}

fn default_n_accounts() -> usize {
    3
}

/// One inference-time strategy to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ConditionSpec {
    /// Plain decoding of the answer.
    InContext,
    /// Decode `tokens` scratch tokens before the answer.
    Thinking { tokens: usize },
    /// Query-only adaptation, then decode the answer.
    Qttt,
    /// `n` sampled trajectories, each with an equal share of the matched
    /// scratch budget, combined by majority vote (ties by log-prob).
    BestOfN { n: usize },
}

impl ConditionSpec {
    pub fn label(&self) -> String {
        match self {
            ConditionSpec::InContext => "in_context".into(),
            ConditionSpec::Thinking { tokens } => format!("thinking_{tokens}"),
            ConditionSpec::Qttt => "qttt".into(),
            ConditionSpec::BestOfN { n } => format!("bon_{n}"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub checkpoint: PathBuf,
    pub conditions: Vec<ConditionSpec>,
    pub adaptation: AdaptationConfig,
    #[serde(default = "default_answer_tokens")]
    pub answer_tokens: usize,
    #[serde(default = "default_budget_tolerance")]
    pub budget_tolerance: f64,
    #[serde(default = "default_bon_temperature")]
    pub bon_temperature: f64,
    pub out_dir: PathBuf,
}

fn default_answer_tokens() -> usize {
    64
}

fn default_budget_tolerance() -> f64 {
    0.05
}

fn default_bon_temperature() -> f64 {
    0.8
}

impl ExperimentConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One CSV row. Column order is pinned by `CSV_HEADER`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task_kind: String,
    pub length_param: usize,
    pub condition: String,
    pub seed: u64,
    pub accuracy: f64,
    pub needle_mass_mean: f64,
    pub needle_mass_std: f64,
    pub margin_mean: f64,
    pub flops: u128,
}

impl EvalRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.task_kind,
            self.length_param,
            self.condition,
            self.seed,
            self.accuracy,
            self.needle_mass_mean,
            self.needle_mass_std,
            self.margin_mean,
            self.flops
        )
    }
}

pub fn rows_to_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

/// Settings shared by all conditions in one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSettings {
    pub adaptation: AdaptationConfig,
    pub answer_tokens: usize,
    pub budget_tolerance: f64,
    pub bon_temperature: f64,
}

/// Check FLOP matching between the declared conditions before anything
/// runs. The thinking budget must sit within the tolerance of the
/// rule-of-thumb 2 N k; best-of-N requires a thinking or adaptation budget
/// to split.
pub fn validate_budgets(conditions: &[ConditionSpec], settings: &RunSettings) -> Result<()> {
    let rule_tokens = 2 * settings.adaptation.n_steps * settings.adaptation.span_len;
    let has_qttt = conditions.iter().any(|c| matches!(c, ConditionSpec::Qttt));
    let thinking: Vec<usize> = conditions
        .iter()
        .filter_map(|c| match c {
            ConditionSpec::Thinking { tokens } => Some(*tokens),
            _ => None,
        })
        .collect();
    if has_qttt {
        for &m in &thinking {
            let rel = (m as f64 - rule_tokens as f64).abs() / (rule_tokens as f64).max(1.0);
            if rel > settings.budget_tolerance {
                return Err(Error::BudgetMismatch(format!(
                    "thinking budget {m} vs rule-of-thumb {} (2*N*k) differs by {:.1}% > {:.1}%",
                    rule_tokens,
                    rel * 100.0,
                    settings.budget_tolerance * 100.0
                )));
            }
        }
    }
    if conditions.iter().any(|c| matches!(c, ConditionSpec::BestOfN { .. }))
        && thinking.is_empty()
        && !has_qttt
    {
        return Err(Error::BudgetMismatch(
            "best-of-N needs a thinking or adaptation budget to split".into(),
        ));
    }
    Ok(())
}

fn scratch_budget(conditions: &[ConditionSpec], settings: &RunSettings) -> usize {
    conditions
        .iter()
        .find_map(|c| match c {
            ConditionSpec::Thinking { tokens } => Some(*tokens),
            _ => None,
        })
        .unwrap_or(2 * settings.adaptation.n_steps * settings.adaptation.span_len)
}

fn tokens_to_text(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .take_while(|&&t| t != EOS)
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

fn effective_answer_len(tokens: &[u32]) -> usize {
    tokens.iter().position(|&t| t == EOS).map_or(tokens.len(), |p| p + 1).max(1)
}

fn mass_to_margin(m: f64) -> f64 {
    let m = m.clamp(1e-12, 1.0 - 1e-12);
    (m / (1.0 - m)).ln()
}

struct TaskEval<'a> {
    params: &'a ModelParams,
    task: &'a TaskInstance,
    settings: &'a RunSettings,
    flops: FlopModel,
}

struct ConditionOutcome {
    row: EvalRow,
    trace: Option<AdaptationTrace>,
}

impl<'a> TaskEval<'a> {
    /// Needle token positions inside the prompt (byte offset + 1 for BOS).
    fn needle_token_indices(&self, prompt_len: usize) -> Vec<usize> {
        match self.task.needle_byte_span() {
            Some((s, e)) => (s + 1..e + 1).filter(|&i| i < prompt_len).collect(),
            None => Vec::new(),
        }
    }

    fn mass_and_margin(
        &self,
        params: &ModelParams,
        cache: &KVCache,
        full_tokens: &[u32],
        targets: &[usize],
        steps: &[usize],
    ) -> Result<(f64, f64, f64)> {
        if targets.is_empty() {
            return Ok((f64::NAN, f64::NAN, f64::NAN));
        }
        let report = attention_mass(params, cache, full_tokens, targets, steps)?;
        let margin_mean = report.cells.iter().map(|c| mass_to_margin(c.mass)).sum::<f64>()
            / report.cells.len() as f64;
        Ok((report.mean, report.std, margin_mean))
    }

    fn row(
        &self,
        condition: &ConditionSpec,
        accuracy: f64,
        mass: (f64, f64, f64),
        flops: u128,
    ) -> EvalRow {
        EvalRow {
            task_kind: self.task.kind.as_str().to_string(),
            length_param: self.task.length_param,
            condition: condition.label(),
            seed: self.task.seed,
            accuracy,
            needle_mass_mean: mass.0,
            needle_mass_std: mass.1,
            margin_mean: mass.2,
            flops,
        }
    }

    fn eval_in_context(&self, condition: &ConditionSpec) -> Result<ConditionOutcome> {
        let prompt = tokens_from_bytes(&render_task_tokens(self.task, PromptStyle::Direct));
        let cache = prefill_and_cache(self.params, &prompt)?;
        let n_ans = self.settings.answer_tokens;
        let decoded =
            crate::model::decode(self.params, &cache, &prompt, n_ans, SamplerConfig::greedy())?;
        let text = tokens_to_text(&decoded);
        let score = score_answer(self.task, &text);

        let n_eff = effective_answer_len(&decoded);
        let mut full = prompt.clone();
        full.extend(&decoded);
        let steps: Vec<usize> = (prompt.len() - 1..prompt.len() - 1 + n_eff).collect();
        let targets = self.needle_token_indices(prompt.len());
        let mass = self.mass_and_margin(self.params, &cache, &full, &targets, &steps)?;

        let t = prompt.len() as u64;
        let flops = self.flops.prefill_flops(t)?.flops + self.flops.gen_flops(n_ans as u64, t).flops;
        Ok(ConditionOutcome {
            row: self.row(condition, score.correct as u8 as f64, mass, flops),
            trace: None,
        })
    }

    fn eval_thinking(&self, condition: &ConditionSpec, m: usize) -> Result<ConditionOutcome> {
        if m == 0 {
            // A zero-token scratch budget is plain in-context decoding.
            return self.eval_in_context(condition);
        }
        let prompt = tokens_from_bytes(&render_task_tokens(self.task, PromptStyle::Scratchpad));
        let cache = prefill_and_cache(self.params, &prompt)?;
        let (decoded, full, answer_start) = self.think_then_answer(
            self.params,
            &cache,
            &prompt,
            m,
            SamplerConfig::greedy(),
            SamplerConfig::greedy(),
        )?;
        let text = tokens_to_text(&decoded);
        let score = score_answer(self.task, &text);

        let n_eff = effective_answer_len(&decoded);
        let steps: Vec<usize> = (answer_start - 1..answer_start - 1 + n_eff).collect();
        let targets = self.needle_token_indices(prompt.len());
        let mass = self.mass_and_margin(self.params, &cache, &full, &targets, &steps)?;

        let t = prompt.len() as u64;
        let extra = (m + FORCED_ANSWER_PREFIX.len() + self.settings.answer_tokens) as u64;
        let flops = self.flops.prefill_flops(t)?.flops + self.flops.gen_flops(extra, t).flops;
        Ok(ConditionOutcome {
            row: self.row(condition, score.correct as u8 as f64, mass, flops),
            trace: None,
        })
    }

    /// Decode `m` scratch tokens, force the answer marker, decode the
    /// answer. Returns (answer tokens, full teacher-forced sequence, answer
    /// start position).
    fn think_then_answer(
        &self,
        params: &ModelParams,
        cache: &KVCache,
        prompt: &[u32],
        m: usize,
        scratch_sampler: SamplerConfig,
        answer_sampler: SamplerConfig,
    ) -> Result<(Vec<u32>, Vec<u32>, usize)> {
        let budget = m + FORCED_ANSWER_PREFIX.len() + self.settings.answer_tokens;
        if cache.len() + budget > params.config.max_context {
            return Err(Error::ContextTooLong {
                got: cache.len() + budget,
                max: params.config.max_context,
            });
        }
        let mut session = DecodeSession::new(params, cache)?;
        let mut rng = Rng::new(scratch_sampler.seed);
        let mut full = prompt.to_vec();
        let mut logits = session.reforward(cache.len() - 1, prompt[cache.len() - 1], None)?;
        for _ in 0..m {
            let tok = scratch_sampler.sample(&logits, &mut rng)?;
            full.push(tok);
            logits = session.append(tok, None)?;
        }
        for &b in FORCED_ANSWER_PREFIX.as_bytes() {
            full.push(b as u32);
            logits = session.append(b as u32, None)?;
        }
        let answer_start = full.len();
        let mut answer_rng = Rng::new(answer_sampler.seed ^ 0x616e73);
        let mut answer = Vec::with_capacity(self.settings.answer_tokens);
        for _ in 0..self.settings.answer_tokens {
            let tok = answer_sampler.sample(&logits, &mut answer_rng)?;
            answer.push(tok);
            full.push(tok);
            logits = session.append(tok, None)?;
        }
        Ok((answer, full, answer_start))
    }

    fn eval_qttt(&self, condition: &ConditionSpec) -> Result<ConditionOutcome> {
        let prompt = tokens_from_bytes(&render_task_tokens(self.task, PromptStyle::Direct));
        let cache = prefill_and_cache(self.params, &prompt)?;
        let mut adapt_cfg = self.settings.adaptation.clone();
        adapt_cfg.seed ^= self.task.seed;
        let (adapted, trace) = run_qttt_with_cache(self.params, &cache, &prompt, &adapt_cfg)?;

        let n_ans = self.settings.answer_tokens;
        let decoded =
            crate::model::decode(&adapted, &cache, &prompt, n_ans, SamplerConfig::greedy())?;
        let text = tokens_to_text(&decoded);
        let score = score_answer(self.task, &text);

        let n_eff = effective_answer_len(&decoded);
        let mut full = prompt.clone();
        full.extend(&decoded);
        let steps: Vec<usize> = (prompt.len() - 1..prompt.len() - 1 + n_eff).collect();
        let targets = self.needle_token_indices(prompt.len());
        let mass = self.mass_and_margin(&adapted, &cache, &full, &targets, &steps)?;

        let t = prompt.len() as u64;
        let flops = self.flops.prefill_flops(t)?.flops
            + self
                .flops
                .qttt_partial_flops(
                    adapt_cfg.span_len as u64,
                    t,
                    adapt_cfg.n_steps as u64,
                    false,
                )?
                .flops
            + self.flops.gen_flops(n_ans as u64, t).flops;
        Ok(ConditionOutcome {
            row: self.row(condition, score.correct as u8 as f64, mass, flops),
            trace: Some(trace),
        })
    }

    fn eval_best_of_n(
        &self,
        condition: &ConditionSpec,
        n: usize,
        scratch_total: usize,
    ) -> Result<ConditionOutcome> {
        if n == 0 {
            return Err(Error::Precondition("best-of-N needs n >= 1".into()));
        }
        let per_traj = (scratch_total / n).max(1);
        let prompt = tokens_from_bytes(&render_task_tokens(self.task, PromptStyle::Scratchpad));
        let cache = prefill_and_cache(self.params, &prompt)?;

        struct Traj {
            vote_key: String,
            text: String,
            log_prob: f64,
            full: Vec<u32>,
            answer_start: usize,
            n_eff: usize,
        }
        let mut trajectories = Vec::with_capacity(n);
        for i in 0..n {
            let sampler = SamplerConfig {
                temperature: self.settings.bon_temperature,
                seed: self.task.seed ^ ((i as u64 + 1) * 0x9e37),
            };
            let (answer, full, answer_start) =
                self.think_then_answer(self.params, &cache, &prompt, per_traj, sampler, sampler)?;
            let text = tokens_to_text(&answer);
            let score = score_answer(self.task, &text);
            let vote_key = serde_json::to_string(&score.parsed)?;
            // Sequence log-prob of the answer under greedy re-scoring.
            let log_prob = self.answer_log_prob(&cache, &full, answer_start)?;
            trajectories.push(Traj {
                vote_key,
                text,
                log_prob,
                full,
                answer_start,
                n_eff: effective_answer_len(&answer),
            });
        }

        let mut votes: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
        for t in &trajectories {
            let e = votes.entry(&t.vote_key).or_insert((0, f64::NEG_INFINITY));
            e.0 += 1;
            e.1 = e.1.max(t.log_prob);
        }
        let winner_key = votes
            .iter()
            .max_by(|a, b| {
                (a.1 .0, a.1 .1)
                    .partial_cmp(&(b.1 .0, b.1 .1))
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .map(|(k, _)| k.to_string())
            .unwrap();
        let winner = trajectories
            .iter()
            .filter(|t| t.vote_key == winner_key)
            .max_by(|a, b| a.log_prob.partial_cmp(&b.log_prob).unwrap_or(std::cmp::Ordering::Equal))
            .unwrap();

        let score = score_answer(self.task, &winner.text);
        let steps: Vec<usize> =
            (winner.answer_start - 1..winner.answer_start - 1 + winner.n_eff).collect();
        let targets = self.needle_token_indices(prompt.len());
        let mass = self.mass_and_margin(self.params, &cache, &winner.full, &targets, &steps)?;

        let t = prompt.len() as u64;
        let per_traj_cost = self
            .flops
            .gen_flops(
                (per_traj + FORCED_ANSWER_PREFIX.len() + self.settings.answer_tokens) as u64,
                t,
            )
            .flops;
        let flops = self.flops.prefill_flops(t)?.flops + n as u128 * per_traj_cost;
        Ok(ConditionOutcome {
            row: self.row(condition, score.correct as u8 as f64, mass, flops),
            trace: None,
        })
    }

    /// Total log-probability of the teacher-forced answer region.
    fn answer_log_prob(
        &self,
        cache: &KVCache,
        full: &[u32],
        answer_start: usize,
    ) -> Result<f64> {
        let mut session = DecodeSession::new(self.params, cache)?;
        let mut logits =
            session.reforward(cache.len() - 1, full[cache.len() - 1], None)?;
        let mut lp = 0.0;
        for p in cache.len()..full.len() {
            if p >= answer_start {
                let lse = crate::numeric::log_sum_exp(&logits)?;
                lp += logits[full[p] as usize] - lse;
            }
            if p + 1 < full.len() {
                logits = session.append(full[p], None)?;
            }
        }
        Ok(lp)
    }
}

/// Evaluate every task under every condition. Budgets are validated before
/// any model work (refuse-early). Returns rows in (task, condition) order
/// plus the adaptation traces keyed by "<task_id>_<condition>".
pub fn margin_sweep_report(
    params: &ModelParams,
    tasks: &[TaskInstance],
    conditions: &[ConditionSpec],
    settings: &RunSettings,
) -> Result<(Vec<EvalRow>, Vec<(String, AdaptationTrace)>)> {
    validate_budgets(conditions, settings)?;
    let scratch_total = scratch_budget(conditions, settings);

    // Refuse-early context check: longest prompt plus the largest decode
    // extension must fit the model window.
    let max_extra = conditions
        .iter()
        .map(|c| match c {
            ConditionSpec::InContext => settings.answer_tokens,
            ConditionSpec::Thinking { tokens } => {
                tokens + FORCED_ANSWER_PREFIX.len() + settings.answer_tokens
            }
            ConditionSpec::Qttt => settings.answer_tokens,
            ConditionSpec::BestOfN { n } => {
                (scratch_total / (*n).max(1)).max(1)
                    + FORCED_ANSWER_PREFIX.len()
                    + settings.answer_tokens
            }
        })
        .max()
        .unwrap_or(settings.answer_tokens);
    for task in tasks {
        let len = render_task_tokens(task, PromptStyle::Scratchpad).len() + 1;
        if len + max_extra > params.config.max_context {
            return Err(Error::ContextTooLong {
                got: len + max_extra,
                max: params.config.max_context,
            });
        }
    }

    let flop_model = params.config.flop_model();
    let results: Result<Vec<Vec<ConditionOutcome>>> = tasks
        .par_iter()
        .map(|task| {
            let eval = TaskEval { params, task, settings, flops: flop_model };
            conditions
                .iter()
                .map(|c| match c {
                    ConditionSpec::InContext => eval.eval_in_context(c),
                    ConditionSpec::Thinking { tokens } => eval.eval_thinking(c, *tokens),
                    ConditionSpec::Qttt => eval.eval_qttt(c),
                    ConditionSpec::BestOfN { n } => eval.eval_best_of_n(c, *n, scratch_total),
                })
                .collect()
        })
        .collect();

    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for (task, outcomes) in tasks.iter().zip(results?) {
        for (c, outcome) in conditions.iter().zip(outcomes) {
            rows.push(outcome.row);
            if let Some(t) = outcome.trace {
                traces.push((format!("{}_{}", task.id, c.label()), t));
            }
        }
    }
    Ok((rows, traces))
}

/// Training documents for the base model: each task rendered as prompt,
/// canonical answer, and terminator. Teaching the answer format on small
/// instances is what makes the long-context evaluations non-vacuous.
pub fn training_corpus(spec: &TaskSpec) -> Result<Vec<Vec<u32>>> {
    let tasks = generate_dataset(spec)?;
    Ok(tasks
        .iter()
        .map(|t| {
            let mut bytes = render_task_tokens(t, PromptStyle::Direct);
            bytes.extend(crate::tasks::canonical_answer_text(&t.answer).into_bytes());
            let mut toks = tokens_from_bytes(&bytes);
            toks.push(EOS);
            toks
        })
        .collect())
}

/// Generate the dataset a `TaskSpec` describes, deterministically.
pub fn generate_dataset(spec: &TaskSpec) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    for &len in &spec.lengths {
        for (i, &seed) in spec.seeds.iter().enumerate() {
            match spec.kind {
                TaskKind::Transactions => {
                    let bug = spec.bug_mix[i % spec.bug_mix.len()];
                    let gen = gen_transaction_task(len, spec.n_accounts, bug, seed, spec.wide)?;
                    out.push(TaskInstance::from_transaction(&gen.task, seed));
                }
                TaskKind::Code => {
                    let task = gen_code_needle_task(len, seed)?;
                    out.push(TaskInstance::from_code(&task, seed));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub csv_path: PathBuf,
    pub csv_text: String,
    pub rows: Vec<EvalRow>,
    pub n_traces: usize,
}

/// Full experiment: generate tasks, validate budgets, evaluate, persist
/// results.csv and per-run adaptation traces under the output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let params = load_checkpoint(&config.checkpoint)?;
    let settings = RunSettings {
        adaptation: config.adaptation.clone(),
        answer_tokens: config.answer_tokens,
        budget_tolerance: config.budget_tolerance,
        bon_temperature: config.bon_temperature,
    };
    validate_budgets(&config.conditions, &settings)?;
    let tasks = generate_dataset(&config.task)?;
    let (rows, traces) = margin_sweep_report(&params, &tasks, &config.conditions, &settings)?;

    std::fs::create_dir_all(&config.out_dir)?;
    let csv_text = rows_to_csv(&rows);
    let csv_path = config.out_dir.join("results.csv");
    std::fs::write(&csv_path, &csv_text)?;
    let trace_dir = config.out_dir.join("traces");
    std::fs::create_dir_all(&trace_dir)?;
    for (name, trace) in &traces {
        std::fs::write(trace_dir.join(format!("{name}.json")), trace.to_json()?)?;
    }
    let resolved = serde_json::to_string_pretty(config)?;
    std::fs::write(config.out_dir.join("config.json"), resolved)?;
    Ok(RunArtifacts {
        csv_path,
        csv_text,
        rows,
        n_traces: traces.len(),
    })
}

/// Parse a results.csv back into rows.
pub fn parse_csv(text: &str) -> Result<Vec<EvalRow>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != CSV_HEADER {
        return Err(Error::Parse { line: 1, msg: format!("unexpected header {header:?}") });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Parse {
                line: i + 2,
                msg: format!("expected 9 fields, got {}", f.len()),
            });
        }
        let parse_f64 = |s: &str, line: usize| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Parse { line, msg: format!("bad float {s:?}") })
        };
        rows.push(EvalRow {
            task_kind: f[0].to_string(),
            length_param: f[1]
                .parse()
                .map_err(|_| Error::Parse { line: i + 2, msg: "bad length".into() })?,
            condition: f[2].to_string(),
            seed: f[3]
                .parse()
                .map_err(|_| Error::Parse { line: i + 2, msg: "bad seed".into() })?,
            accuracy: parse_f64(f[4], i + 2)?,
            needle_mass_mean: parse_f64(f[5], i + 2)?,
            needle_mass_std: parse_f64(f[6], i + 2)?,
            margin_mean: parse_f64(f[7], i + 2)?,
            flops: f[8]
                .parse()
                .map_err(|_| Error::Parse { line: i + 2, msg: "bad flops".into() })?,
        });
    }
    Ok(rows)
}

/// Aggregate tables: accuracy and attention mass per (kind, length,
/// condition), averaged over seeds. Deterministic layout.
pub fn report_tables(rows: &[EvalRow]) -> String {
    #[derive(Default)]
    struct Agg {
        n: usize,
        acc: f64,
        mass: f64,
        mass_sq: f64,
        margin: f64,
    }
    let mut agg: BTreeMap<(String, usize, String), Agg> = BTreeMap::new();
    let mut conditions: Vec<String> = Vec::new();
    for r in rows {
        let key = (r.task_kind.clone(), r.length_param, r.condition.clone());
        let a = agg.entry(key).or_default();
        a.n += 1;
        a.acc += r.accuracy;
        if r.needle_mass_mean.is_finite() {
            a.mass += r.needle_mass_mean;
            a.mass_sq += r.needle_mass_mean * r.needle_mass_mean;
            a.margin += r.margin_mean;
        }
        if !conditions.contains(&r.condition) {
            conditions.push(r.condition.clone());
        }
    }

    let mut kinds_lengths: Vec<(String, usize)> = agg
        .keys()
        .map(|(k, l, _)| (k.clone(), *l))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    kinds_lengths.sort();

    let mut out = String::new();
    for table in ["accuracy", "needle_mass"] {
        out.push_str(&format!("== {table} by context length ==\n"));
        out.push_str(&format!("{:<14}{:<10}", "task_kind", "length"));
        for c in &conditions {
            out.push_str(&format!("{c:<18}"));
        }
        out.push('\n');
        for (kind, len) in &kinds_lengths {
            out.push_str(&format!("{kind:<14}{len:<10}"));
            for c in &conditions {
                let cell = match agg.get(&(kind.clone(), *len, c.clone())) {
                    Some(a) if a.n > 0 => match table {
                        "accuracy" => format!("{:.3}", a.acc / a.n as f64),
                        _ => {
                            let mean = a.mass / a.n as f64;
                            let var = (a.mass_sq / a.n as f64 - mean * mean).max(0.0);
                            format!("{:.3}±{:.3}", mean, var.sqrt())
                        }
                    },
                    _ => "-".to_string(),
                };
                out.push_str(&format!("{cell:<18}"));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Read results.csv from a run directory and render the report tables.
pub fn report_from_dir(dir: impl AsRef<Path>) -> Result<String> {
    let csv = std::fs::read_to_string(dir.as_ref().join("results.csv"))?;
    let rows = parse_csv(&csv)?;
    Ok(report_tables(&rows))
}
