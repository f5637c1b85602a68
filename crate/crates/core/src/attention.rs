//! Single-query attention evaluation and the retrieval-margin analysis
//! built on top of it: needle mass, logit margins, score-dilution bounds,
//! the logarithmic margin requirement, and the needle-signal bounds for
//! generated tokens.
//!
//! Throughout, position `needle` holds the key/value pair carrying the
//! evidence; every other position is a distractor.

use crate::error::{Error, Result};
use crate::numeric::{dot, log_sum_exp, softmax_row, Matrix, Rng};

/// One attention evaluation, fully materialized: query, keys, values,
/// scaled logits, softmax weights, and the ground-truth needle index.
#[derive(Debug, Clone)]
pub struct AttentionBlockState {
    pub q: Vec<f64>,
    pub keys: Matrix,
    pub values: Matrix,
    pub d_k: usize,
    pub needle: usize,
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
}

impl AttentionBlockState {
    /// Build a state from raw q/K/V; logits and weights are derived here so
    /// the `z_j = q.k_j / sqrt(d_k)` invariant holds by construction.
    pub fn new(q: Vec<f64>, keys: Matrix, values: Matrix, needle: usize) -> Result<Self> {
        let d_k = keys.cols();
        if q.len() != d_k {
            return Err(Error::DimensionMismatch(format!(
                "query length {} vs key width {}",
                q.len(),
                d_k
            )));
        }
        if keys.rows() == 0 {
            return Err(Error::EmptyInput("attention with T = 0"));
        }
        if keys.rows() != values.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} keys vs {} values",
                keys.rows(),
                values.rows()
            )));
        }
        if needle >= keys.rows() {
            return Err(Error::Precondition(format!(
                "needle {} outside [0, {})",
                needle,
                keys.rows()
            )));
        }
        let scale = 1.0 / (d_k as f64).sqrt();
        let logits: Vec<f64> = (0..keys.rows())
            .map(|j| dot(&q, keys.row(j)) * scale)
            .collect();
        let weights = softmax_row(&logits)?;
        Ok(AttentionBlockState { q, keys, values, d_k, needle, logits, weights })
    }

    /// Build a state whose logits equal `logits` exactly, using d_k = 1,
    /// q = [1], k_j = [z_j]. Useful when a test or sweep is about the logit
    /// pattern rather than the geometry.
    pub fn from_logits(logits: &[f64], values: Matrix, needle: usize) -> Result<Self> {
        let keys = Matrix::from_vec(logits.len(), 1, logits.to_vec())?;
        AttentionBlockState::new(vec![1.0], keys, values, needle)
    }

    pub fn seq_len(&self) -> usize {
        self.keys.rows()
    }

    pub fn needle_mass(&self) -> f64 {
        self.weights[self.needle]
    }

    /// Attention output o = sum_j alpha_j v_j.
    pub fn output(&self) -> Vec<f64> {
        let d_v = self.values.cols();
        let mut o = vec![0.0; d_v];
        for j in 0..self.seq_len() {
            let v = self.values.row(j);
            let a = self.weights[j];
            for c in 0..d_v {
                o[c] += a * v[c];
            }
        }
        o
    }

    /// Replace the query and re-derive logits and weights.
    pub fn with_query(&self, q: Vec<f64>) -> Result<Self> {
        AttentionBlockState::new(q, self.keys.clone(), self.values.clone(), self.needle)
    }
}

/// Margin/threshold report for one state. The three success criteria
/// (mass >= tau, margin >= logit(tau), the mass-margin bijection) are all
/// evaluated and cross-checked at construction.
#[derive(Debug, Clone)]
pub struct MarginReport {
    pub gamma: f64,
    pub needle_mass: f64,
    pub tau: f64,
    pub success: bool,
}

/// Forward pass of single-query scaled dot-product attention.
///
/// Returns (logits, weights, output).
pub fn attention_forward(
    q: &[f64],
    keys: &Matrix,
    values: &Matrix,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let state = AttentionBlockState::new(q.to_vec(), keys.clone(), values.clone(), 0)?;
    let o = state.output();
    Ok((state.logits, state.weights, o))
}

/// Logit margin of the needle against all distractors:
/// gamma = z_needle - lse(z_distractors), with needle mass recovered through
/// mass = 1 / (1 + exp(-gamma)).
pub fn margin(state: &AttentionBlockState, tau: f64) -> Result<MarginReport> {
    let t = state.seq_len();
    if t < 2 {
        return Err(Error::Precondition(
            "margin needs at least one distractor (T >= 2)".into(),
        ));
    }
    if !(0.0 < tau && tau < 1.0) {
        return Err(Error::Precondition(format!("tau {tau} outside (0,1)")));
    }
    let distractors: Vec<f64> = state
        .logits
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != state.needle)
        .map(|(_, &z)| z)
        .collect();
    let gamma = state.logits[state.needle] - log_sum_exp(&distractors)?;
    let needle_mass = 1.0 / (1.0 + (-gamma).exp());

    // Cross-checks: the margin-form mass must agree with the softmax entry,
    // and the two success criteria must agree.
    let direct = state.needle_mass();
    debug_assert!(
        (needle_mass - direct).abs() <= 1e-9 * direct.max(1e-300),
        "margin-form mass {needle_mass} disagrees with softmax entry {direct}"
    );
    let by_mass = needle_mass >= tau;
    let by_margin = gamma >= (tau / (1.0 - tau)).ln();
    debug_assert_eq!(by_mass, by_margin);

    Ok(MarginReport { gamma, needle_mass, tau, success: by_mass })
}

/// Score-dilution bound: with at least `m` distractors within `delta` of
/// the needle logit, the needle mass is at most 1 / (1 + m e^{-delta}).
///
/// The precondition (the state really contains `m` qualifying distractors)
/// is checked, not assumed.
pub fn dilution_bound(state: &AttentionBlockState, m: usize, delta: f64) -> Result<f64> {
    if m == 0 {
        return Err(Error::Precondition("dilution bound needs m >= 1".into()));
    }
    if delta < 0.0 {
        return Err(Error::Precondition(format!("delta {delta} < 0")));
    }
    let z_star = state.logits[state.needle];
    let qualifying = state
        .logits
        .iter()
        .enumerate()
        .filter(|(j, &z)| *j != state.needle && z >= z_star - delta)
        .count();
    if qualifying < m {
        return Err(Error::Precondition(format!(
            "only {qualifying} distractors within delta = {delta} of the needle, need {m}"
        )));
    }
    Ok(1.0 / (1.0 + m as f64 * (-delta).exp()))
}

/// Margin needed to guarantee needle mass >= 1 - eps against worst-case
/// distractors in a context of length T: ln((T-1)(1-eps)/eps).
pub fn required_margin(t: usize, eps: f64) -> Result<f64> {
    if t < 2 {
        return Err(Error::Precondition("required_margin needs T >= 2".into()));
    }
    if !(0.0 < eps && eps < 1.0) {
        return Err(Error::Precondition(format!("eps {eps} outside (0,1)")));
    }
    Ok(((t as f64 - 1.0) * (1.0 - eps) / eps).ln())
}

/// Upper bound on the needle signal any single attention output can carry
/// along direction `u`:
/// <u, o> <= alpha_needle <u, v_needle> + (1 - alpha_needle) max_{j != needle} <u, v_j>.
///
/// Returns (lhs, rhs). Requires at least one distractor.
pub fn needle_signal_bound(state: &AttentionBlockState, u: &[f64]) -> Result<(f64, f64)> {
    if u.len() != state.values.cols() {
        return Err(Error::DimensionMismatch(format!(
            "direction length {} vs value width {}",
            u.len(),
            state.values.cols()
        )));
    }
    if state.seq_len() < 2 {
        return Err(Error::Precondition(
            "needle_signal_bound needs at least one distractor".into(),
        ));
    }
    let o = state.output();
    let lhs = dot(u, &o);
    let a_star = state.needle_mass();
    let needle_term = dot(u, state.values.row(state.needle));
    let max_distractor = (0..state.seq_len())
        .filter(|&j| j != state.needle)
        .map(|j| dot(u, state.values.row(j)))
        .fold(f64::NEG_INFINITY, f64::max);
    let rhs = a_star * needle_term + (1.0 - a_star) * max_distractor;
    Ok((lhs, rhs))
}

/// Same bound with the needle mass replaced by a cap `eps` on it
/// (specialization under small margin). Precondition: the state's needle
/// mass is really at most eps, checked through the margin form.
///
/// The substitution is performed exactly as stated; the resulting rhs is
/// only guaranteed to dominate lhs when the needle carries the strongest
/// u-signal, i.e. <u, v_needle> >= max_{j != needle} <u, v_j>.
pub fn specialization_bound(
    state: &AttentionBlockState,
    u: &[f64],
    eps: f64,
) -> Result<(f64, f64)> {
    if !(0.0 < eps && eps < 1.0) {
        return Err(Error::Precondition(format!("eps {eps} outside (0,1)")));
    }
    let report = margin(state, 0.5)?;
    if report.gamma > (eps / (1.0 - eps)).ln() + 1e-12 {
        return Err(Error::Precondition(format!(
            "needle mass {} exceeds eps {eps}",
            report.needle_mass
        )));
    }
    let (lhs, _) = needle_signal_bound(state, u)?;
    let needle_term = dot(u, state.values.row(state.needle));
    let max_distractor = (0..state.seq_len())
        .filter(|&j| j != state.needle)
        .map(|j| dot(u, state.values.row(j)))
        .fold(f64::NEG_INFINITY, f64::max);
    let rhs = eps * needle_term + (1.0 - eps) * max_distractor;
    Ok((lhs, rhs))
}

/// Random-state generation used by the verification suites and tests.
pub mod sampling {
    use super::*;

    /// Logit pattern families the property suites draw from.
    #[derive(Debug, Clone, Copy, PartialEq)]
    pub enum LogitDistribution {
        /// Logits i.i.d. uniform in [lo, hi].
        Uniform { lo: f64, hi: f64 },
        /// Logits i.i.d. Gaussian with the given std.
        Gaussian { std: f64 },
        /// Adversarial dilution regime: `near_tie` distractors uniform in
        /// [z* - delta, z*], the rest well below the needle.
        NearTie { near_tie: usize, delta: f64 },
    }

    /// Draw a state with T positions, head width d_k, value width d_v and a
    /// uniformly random needle index, with logits following `dist`.
    ///
    /// Geometry realizes the requested logits exactly via the d_k = 1
    /// embedding of `AttentionBlockState::from_logits`, then values are
    /// drawn i.i.d. Gaussian.
    pub fn random_logit_state(
        rng: &mut Rng,
        t: usize,
        d_v: usize,
        dist: LogitDistribution,
    ) -> AttentionBlockState {
        assert!(t >= 2);
        let needle = rng.below(t as u64) as usize;
        let mut logits = vec![0.0; t];
        match dist {
            LogitDistribution::Uniform { lo, hi } => {
                for z in logits.iter_mut() {
                    *z = rng.uniform_in(lo, hi);
                }
            }
            LogitDistribution::Gaussian { std } => {
                for z in logits.iter_mut() {
                    *z = rng.gauss() * std;
                }
            }
            LogitDistribution::NearTie { near_tie, delta } => {
                let z_star = rng.uniform_in(-1.0, 1.0);
                logits[needle] = z_star;
                let m = near_tie.min(t - 1);
                let mut distractors: Vec<usize> =
                    (0..t).filter(|&j| j != needle).collect();
                // Fisher-Yates over the distractor index list.
                for i in (1..distractors.len()).rev() {
                    let j = rng.below(i as u64 + 1) as usize;
                    distractors.swap(i, j);
                }
                for (rank, &j) in distractors.iter().enumerate() {
                    logits[j] = if rank < m {
                        rng.uniform_in(z_star - delta, z_star)
                    } else {
                        rng.uniform_in(z_star - delta - 20.0, z_star - delta - 10.0)
                    };
                }
                // Re-pin the needle in case t - 1 < near_tie callers expect.
                logits[needle] = z_star;
            }
        }
        let values = Matrix::random_gauss(t, d_v, 1.0, rng);
        AttentionBlockState::from_logits(&logits, values, needle).expect("finite logits")
    }

    /// Draw a geometric state: q, K, V all Gaussian in their natural
    /// dimensions, logits derived from the actual dot products.
    pub fn random_geometric_state(
        rng: &mut Rng,
        t: usize,
        d_k: usize,
        d_v: usize,
    ) -> AttentionBlockState {
        assert!(t >= 2);
        let needle = rng.below(t as u64) as usize;
        let q = rng.gauss_vec(d_k);
        let keys = Matrix::random_gauss(t, d_k, 1.0, rng);
        let values = Matrix::random_gauss(t, d_v, 1.0, rng);
        AttentionBlockState::new(q, keys, values, needle).expect("valid dims")
    }
}
