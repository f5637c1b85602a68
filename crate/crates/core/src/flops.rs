//! Inference-compute cost model and budget matching.
//!
//! Costs are dominant-term FLOP counts for a dense decoder with `L` layers,
//! hidden size `d`, and MLP ratio `r`:
//!
//! * `C_quad = 2 L d` — coefficient of the quadratic attention term,
//! * `C_tok = (4 + 2r) L d^2` — per-token projection/MLP cost.
//!
//! Everything is exact unsigned 128-bit integer arithmetic; budgets at
//! realistic scales reach ~10^18 and equality tests must not round.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Architecture constants entering the cost formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopModel {
    pub layers: u64,
    pub hidden: u64,
    pub mlp_ratio: u64,
}

/// An exact FLOP count plus a human-readable account of where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub flops: u128,
    pub provenance: String,
}

impl FlopModel {
    pub fn new(layers: u64, hidden: u64, mlp_ratio: u64) -> Self {
        FlopModel { layers, hidden, mlp_ratio }
    }

    /// 2 L d.
    pub fn c_quad(&self) -> u128 {
        2 * self.layers as u128 * self.hidden as u128
    }

    /// (4 + 2r) L d^2.
    pub fn c_tok(&self) -> u128 {
        (4 + 2 * self.mlp_ratio as u128)
            * self.layers as u128
            * self.hidden as u128
            * self.hidden as u128
    }

    /// Parallel forward over T tokens: C_quad T^2 + C_tok T.
    pub fn prefill_flops(&self, t: u64) -> Result<Budget> {
        if t == 0 {
            return Err(Error::Precondition("prefill needs T >= 1".into()));
        }
        let t = t as u128;
        let flops = self.c_quad() * t * t + self.c_tok() * t;
        Ok(Budget {
            flops,
            provenance: format!("prefill over T={t}"),
        })
    }

    /// Autoregressive generation of `t_think` tokens against a cache of
    /// length T: C_quad (t_think T + t_think (t_think - 1) / 2) + C_tok t_think.
    pub fn gen_flops(&self, t_think: u64, t: u64) -> Budget {
        let n = t_think as u128;
        let t = t as u128;
        let flops = self.c_quad() * (n * t + n * (n.saturating_sub(1)) / 2) + self.c_tok() * n;
        Budget {
            flops,
            provenance: format!("generate {n} tokens after a T={t} prefill"),
        }
    }

    /// Query-only update cost: n_steps * 2 (C_quad k T + (2 + 2r) L k d^2).
    ///
    /// With `include_in_span`, the within-span terms C_quad k^2 + 2 L k d^2
    /// are added inside the doubled bracket; they are dominated by the kT
    /// term when k << T, which is why the default drops them.
    pub fn qttt_partial_flops(
        &self,
        k: u64,
        t: u64,
        n_steps: u64,
        include_in_span: bool,
    ) -> Result<Budget> {
        if k == 0 || k > t {
            return Err(Error::Precondition(format!(
                "span length {k} outside [1, T={t}]"
            )));
        }
        let (k, t, n) = (k as u128, t as u128, n_steps as u128);
        let l = self.layers as u128;
        let d = self.hidden as u128;
        let mut per_pass = self.c_quad() * k * t + (2 + 2 * self.mlp_ratio as u128) * l * k * d * d;
        if include_in_span {
            per_pass += self.c_quad() * k * k + 2 * l * k * d * d;
        }
        let flops = n * 2 * per_pass;
        Ok(Budget {
            flops,
            provenance: format!(
                "{n} query-only steps, span k={k}, T={t}, in-span terms {}",
                if include_in_span { "included" } else { "dropped" }
            ),
        })
    }

    /// Thinking-token count that matches `n_steps` query-only updates of
    /// span `k`.
    pub fn matched_thinking_tokens(
        &self,
        k: u64,
        n_steps: u64,
        t: u64,
        mode: MatchMode,
    ) -> Result<u64> {
        match mode {
            MatchMode::RuleOfThumb => Ok(2 * n_steps * k),
            MatchMode::Exact => {
                let budget = self.qttt_partial_flops(k, t, n_steps, false)?;
                Ok(self.invert_gen_flops(budget.flops, t))
            }
        }
    }

    /// Largest t_think with gen_flops(t_think, T) <= budget; the residual is
    /// below one additional token's cost.
    pub fn invert_gen_flops(&self, budget: u128, t: u64) -> u64 {
        let mut lo = 0u64;
        let mut hi = 1u64;
        while self.gen_flops(hi, t).flops <= budget {
            hi = hi.saturating_mul(2);
            if hi == u64::MAX {
                break;
            }
        }
        while lo < hi {
            let mid = lo + (hi - lo).div_ceil(2);
            if self.gen_flops(mid, t).flops <= budget {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        lo
    }

    /// Number of best-of-N trajectories of `per_traj_tokens` each that fit
    /// in `budget` (floor, minimum 1 so a vote always has one member).
    pub fn matched_bon_trajectories(
        &self,
        budget: &Budget,
        per_traj_tokens: u64,
        t: u64,
    ) -> Result<u64> {
        if per_traj_tokens == 0 {
            return Err(Error::Precondition(
                "best-of-N trajectories need at least one token".into(),
            ));
        }
        let per = self.gen_flops(per_traj_tokens, t).flops;
        Ok(((budget.flops / per) as u64).max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchMode {
    RuleOfThumb,
    Exact,
}
