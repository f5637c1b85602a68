//! Query-only test-time training.
//!
//! One prefill freezes the KV cache; a handful of gradient steps then
//! reshape only the query projections against it. The closed-form
//! single-query analysis (gradient direction, first-order margin gain)
//! lives here too so it can be verified independently of the full model.

use crate::attention::AttentionBlockState;
use crate::error::{Error, Result};
use crate::model::{
    prefill_and_cache, span_forward_frozen_kv, span_loss_and_wq_grads, ModelParams,
};
use crate::numeric::{dot, Rng};
use crate::optim::{OptimKind, Optimizer, OptimizerConfig};
use serde::{Deserialize, Serialize};

pub use crate::model::Span;

/// Adaptation hyperparameters.
///
/// The learning-rate default targets the desk-scale model; pick a value for
/// a different architecture with [`sweep_learning_rates`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub n_steps: usize,
    pub span_len: usize,
    pub lr: f64,
    pub optimizer: OptimKind,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            n_steps: 32,
            span_len: 128,
            lr: 1e-3,
            optimizer: OptimKind::AdaptiveMoment,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.span_len == 0 {
            return Err(Error::Precondition("span_len must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Precondition("lr must be > 0".into()));
        }
        Ok(())
    }

    fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr: self.lr,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One adaptation step as recorded evidence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub span: Span,
    pub loss_before: f64,
    pub loss_after: f64,
    pub grad_norm: f64,
    /// KV-cache content hash re-computed after the step.
    pub fingerprint: String,
}

/// Full record of one adaptation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptationTrace {
    pub config: AdaptationConfig,
    pub initial_fingerprint: String,
    pub steps: Vec<StepRecord>,
    /// Set when a non-finite loss aborted the run; the returned parameters
    /// are then the last finite checkpoint.
    pub diverged_at: Option<usize>,
}

impl AdaptationTrace {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Run query-only adaptation on one context.
///
/// Prefills once, then for each step samples a span uniformly over valid
/// starts and applies one optimizer update to the query projections only.
/// Every other tensor comes back byte-identical; the cache is never
/// touched. A non-finite loss aborts the loop and returns the last finite
/// parameters with `diverged_at` set.
pub fn run_qttt(
    params: &ModelParams,
    tokens: &[u32],
    config: &AdaptationConfig,
) -> Result<(ModelParams, AdaptationTrace)> {
    let cache = prefill_and_cache(params, tokens)?;
    run_qttt_with_cache(params, &cache, tokens, config)
}

/// [`run_qttt`] against an existing prefill. The harness uses this so the
/// single expensive prefill is shared between adaptation and the final
/// answer decode, as the cost accounting assumes.
pub fn run_qttt_with_cache(
    params: &ModelParams,
    cache: &crate::model::KVCache,
    tokens: &[u32],
    config: &AdaptationConfig,
) -> Result<(ModelParams, AdaptationTrace)> {
    config.validate()?;
    if tokens.len() < config.span_len + 1 {
        return Err(Error::SpanOutOfRange {
            start: 0,
            len: config.span_len,
            ctx: tokens.len(),
        });
    }
    let mut trace = AdaptationTrace {
        config: config.clone(),
        initial_fingerprint: cache.fingerprint().to_string(),
        steps: Vec::with_capacity(config.n_steps),
        diverged_at: None,
    };

    let mut adapted = params.clone();
    let mut opt = Optimizer::new(config.optimizer_config());
    let mut rng = Rng::new(config.seed);

    for step in 0..config.n_steps {
        let span = Span::sample_uniform(tokens.len(), config.span_len, &mut rng)?;
        let (loss_before, mut grads) =
            span_loss_and_wq_grads(&adapted, cache, tokens, span)?;
        if !loss_before.is_finite() || !grads.is_finite() {
            trace.diverged_at = Some(step);
            break;
        }
        let checkpoint = adapted.clone();
        let grad_norm = opt.step(&mut adapted, &mut grads);
        let (loss_after, _) = span_forward_frozen_kv(&adapted, cache, tokens, span)?;
        if !loss_after.is_finite() {
            adapted = checkpoint;
            trace.diverged_at = Some(step);
            break;
        }
        trace.steps.push(StepRecord {
            step,
            span,
            loss_before,
            loss_after,
            grad_norm,
            fingerprint: cache.recompute_fingerprint(),
        });
    }
    Ok((adapted, trace))
}

/// Gradient of -log(needle weight) with respect to the query, in closed
/// form: (mu - k_needle) / sqrt(d_k) with mu the attention-weighted key
/// mean.
pub fn query_gradient_closed_form(state: &AttentionBlockState) -> Vec<f64> {
    let dk = state.d_k;
    let t = state.seq_len();
    let mut mu = vec![0.0; dk];
    for j in 0..t {
        let k = state.keys.row(j);
        let a = state.weights[j];
        for c in 0..dk {
            mu[c] += a * k[c];
        }
    }
    let k_star = state.keys.row(state.needle);
    let scale = 1.0 / (dk as f64).sqrt();
    (0..dk).map(|c| (mu[c] - k_star[c]) * scale).collect()
}

/// One explicit descent step on the query; logits and weights of the
/// returned state are recomputed from the moved query.
pub fn query_descent_step(state: &AttentionBlockState, eta: f64) -> Result<AttentionBlockState> {
    if eta < 0.0 {
        return Err(Error::Precondition(format!("eta {eta} < 0")));
    }
    let g = query_gradient_closed_form(state);
    let q: Vec<f64> = state.q.iter().zip(&g).map(|(&qi, &gi)| qi - eta * gi).collect();
    state.with_query(q)
}

/// First-order gain comparison for one descent step on M = log(needle
/// weight) = -loss, the objective whose expansion is
/// M(q - eta grad) = M(q) + eta |grad|^2 + O(eta^2).
///
/// Returns (predicted, actual): predicted = eta * |grad|^2, actual =
/// M(q - eta grad) - M(q). The true logit margin gamma = M - log(1 - alpha)
/// moves in the same direction but with slope 1/(1 - alpha); the identity
/// as stated is for M. Errors when the gradient vanishes (there is nothing
/// to predict).
pub fn margin_gain_check(state: &AttentionBlockState, eta: f64) -> Result<(f64, f64)> {
    let g = query_gradient_closed_form(state);
    let gnorm2 = dot(&g, &g);
    if gnorm2 == 0.0 {
        return Err(Error::Precondition("zero query gradient".into()));
    }
    let log_alpha = |s: &AttentionBlockState| {
        crate::numeric::log_sum_exp(&s.logits).map(|lse| s.logits[s.needle] - lse)
    };
    let before = log_alpha(state)?;
    let stepped = query_descent_step(state, eta)?;
    let after = log_alpha(&stepped)?;
    Ok((eta * gnorm2, after - before))
}

/// Squared gradient norm identity: |grad|^2 = |k_needle - mu|^2 / d_k.
pub fn gradient_norm_identity(state: &AttentionBlockState) -> (f64, f64) {
    let g = query_gradient_closed_form(state);
    let dk = state.d_k;
    let mut mu = vec![0.0; dk];
    for j in 0..state.seq_len() {
        let k = state.keys.row(j);
        let a = state.weights[j];
        for c in 0..dk {
            mu[c] += a * k[c];
        }
    }
    let k_star = state.keys.row(state.needle);
    let diff: Vec<f64> = (0..dk).map(|c| k_star[c] - mu[c]).collect();
    (dot(&g, &g), dot(&diff, &diff) / dk as f64)
}

/// Summary of one learning-rate trial from [`sweep_learning_rates`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrTrial {
    pub lr: f64,
    pub mean_loss_first_quarter: f64,
    pub mean_loss_last_quarter: f64,
    pub diverged: bool,
}

/// Try each learning rate on one context and report first-vs-last quarter
/// span losses; the documented way to pick `AdaptationConfig::lr` for a new
/// architecture.
pub fn sweep_learning_rates(
    params: &ModelParams,
    tokens: &[u32],
    base: &AdaptationConfig,
    rates: &[f64],
) -> Result<Vec<LrTrial>> {
    let mut out = Vec::with_capacity(rates.len());
    for &lr in rates {
        let mut cfg = base.clone();
        cfg.lr = lr;
        let (_, trace) = run_qttt(params, tokens, &cfg)?;
        let n = trace.steps.len();
        let quarter = (n / 4).max(1);
        let mean = |s: &[StepRecord]| {
            s.iter().map(|r| r.loss_before).sum::<f64>() / s.len().max(1) as f64
        };
        out.push(LrTrial {
            lr,
            mean_loss_first_quarter: if n == 0 { f64::NAN } else { mean(&trace.steps[..quarter]) },
            mean_loss_last_quarter: if n == 0 { f64::NAN } else { mean(&trace.steps[n - quarter..]) },
            diverged: trace.diverged_at.is_some(),
        });
    }
    Ok(out)
}
