//! Minimal decoder-only transformer.
//!
//! Pre-normalization blocks (RMS norm with learned gains), fused multi-head
//! attention with rotary positions (toggleable), GELU MLP, untied embedding
//! and unembedding, byte-level vocabulary of 256 plus 4 control tokens.
//! All math is f64 with fixed accumulation order.
//!
//! The module revolves around one contract: a prefill produces an immutable
//! [`KVCache`], and every later computation (span losses, query-projection
//! gradients, decoding, attention measurements) recomputes queries from the
//! current parameters while reading keys/values from that cache.

mod backward;
pub mod checkpoint;
mod forward;
pub mod rope;
mod train;

pub use backward::{grad_wq_span, span_loss_and_wq_grads};
pub use forward::{
    decode, full_forward_logits, prefill_and_cache, prefill_with_attention,
    span_forward_frozen_kv, AttnSink, DecodeSession, SamplerConfig,
};
pub use train::{train_base_model, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::flops::FlopModel;
use crate::numeric::{Matrix, Rng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

pub const BYTE_VOCAB: usize = 256;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const SEP: u32 = 258;
pub const PAD: u32 = 259;
/// 256 byte values plus the 4 control tokens above.
pub const VOCAB_SIZE: usize = 260;

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub vocab: usize,
    pub rope_enabled: bool,
    pub max_context: usize,
    /// Recorded architecture choice: embedding and unembedding are separate
    /// tensors (untied).
    pub tied_embeddings: bool,
}

impl ModelConfig {
    /// Default desk-scale model.
    pub fn tiny() -> Self {
        ModelConfig {
            layers: 4,
            heads: 4,
            dim: 128,
            mlp_ratio: 4,
            vocab: VOCAB_SIZE,
            rope_enabled: true,
            max_context: 4096,
            tied_embeddings: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.mlp_ratio * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.dim == 0 {
            return Err(Error::Precondition("zero-sized model".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Precondition(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Precondition(format!(
                "head dim {} must be even for rotary positions",
                self.head_dim()
            )));
        }
        if self.mlp_ratio < 1 {
            return Err(Error::Precondition("mlp_ratio must be >= 1".into()));
        }
        if self.vocab < 2 {
            return Err(Error::Precondition("vocab must be >= 2".into()));
        }
        if self.tied_embeddings {
            return Err(Error::Precondition(
                "tied embeddings are recorded but not implemented".into(),
            ));
        }
        Ok(())
    }

    pub fn flop_model(&self) -> FlopModel {
        FlopModel::new(self.layers as u64, self.dim as u64, self.mlp_ratio as u64)
    }
}

/// Which side of the adaptation partition a tensor belongs to. Exactly the
/// per-layer query projections are `Query`; everything else is `Other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamFlag {
    Query,
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Vec<f64>,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln2_gain: Vec<f64>,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embed: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_gain: Vec<f64>,
    pub unembed: Matrix,
}

impl ModelParams {
    /// Seeded initialization: N(0, 0.02) for projections and embeddings with
    /// the residual-feeding tensors (attention output, MLP down) shrunk by
    /// 1/sqrt(2L); gains start at 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let d = config.dim;
        let dff = config.mlp_dim();
        let std = 0.02;
        let resid_std = std / ((2 * config.layers) as f64).sqrt();
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerParams {
                ln1_gain: vec![1.0; d],
                w_q: Matrix::random_gauss(d, d, std, &mut rng),
                w_k: Matrix::random_gauss(d, d, std, &mut rng),
                w_v: Matrix::random_gauss(d, d, std, &mut rng),
                w_o: Matrix::random_gauss(d, d, resid_std, &mut rng),
                ln2_gain: vec![1.0; d],
                w_up: Matrix::random_gauss(dff, d, std, &mut rng),
                w_down: Matrix::random_gauss(d, dff, resid_std, &mut rng),
            });
        }
        Ok(ModelParams {
            config: config.clone(),
            embed: Matrix::random_gauss(config.vocab, d, std, &mut rng),
            layers,
            final_gain: vec![1.0; d],
            unembed: Matrix::random_gauss(d, config.vocab, std, &mut rng),
        })
    }

    /// Visit every tensor in declared (serialization) order.
    pub fn visit_tensors(&self, mut f: impl FnMut(&str, ParamFlag, usize, usize, &[f64])) {
        f("embed", ParamFlag::Other, self.embed.rows(), self.embed.cols(), self.embed.data());
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("layer{i}.ln1"), ParamFlag::Other, 1, l.ln1_gain.len(), &l.ln1_gain);
            f(&format!("layer{i}.wq"), ParamFlag::Query, l.w_q.rows(), l.w_q.cols(), l.w_q.data());
            f(&format!("layer{i}.wk"), ParamFlag::Other, l.w_k.rows(), l.w_k.cols(), l.w_k.data());
            f(&format!("layer{i}.wv"), ParamFlag::Other, l.w_v.rows(), l.w_v.cols(), l.w_v.data());
            f(&format!("layer{i}.wo"), ParamFlag::Other, l.w_o.rows(), l.w_o.cols(), l.w_o.data());
            f(&format!("layer{i}.ln2"), ParamFlag::Other, 1, l.ln2_gain.len(), &l.ln2_gain);
            f(&format!("layer{i}.up"), ParamFlag::Other, l.w_up.rows(), l.w_up.cols(), l.w_up.data());
            f(&format!("layer{i}.down"), ParamFlag::Other, l.w_down.rows(), l.w_down.cols(), l.w_down.data());
        }
        f("final_norm", ParamFlag::Other, 1, self.final_gain.len(), &self.final_gain);
        f("unembed", ParamFlag::Other, self.unembed.rows(), self.unembed.cols(), self.unembed.data());
    }

    /// Visit every tensor mutably, in the same declared order.
    pub fn visit_tensors_mut(&mut self, mut f: impl FnMut(&str, ParamFlag, &mut [f64])) {
        f("embed", ParamFlag::Other, self.embed.data_mut());
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("layer{i}.ln1"), ParamFlag::Other, &mut l.ln1_gain);
            f(&format!("layer{i}.wq"), ParamFlag::Query, l.w_q.data_mut());
            f(&format!("layer{i}.wk"), ParamFlag::Other, l.w_k.data_mut());
            f(&format!("layer{i}.wv"), ParamFlag::Other, l.w_v.data_mut());
            f(&format!("layer{i}.wo"), ParamFlag::Other, l.w_o.data_mut());
            f(&format!("layer{i}.ln2"), ParamFlag::Other, &mut l.ln2_gain);
            f(&format!("layer{i}.up"), ParamFlag::Other, l.w_up.data_mut());
            f(&format!("layer{i}.down"), ParamFlag::Other, l.w_down.data_mut());
        }
        f("final_norm", ParamFlag::Other, &mut self.final_gain);
        f("unembed", ParamFlag::Other, self.unembed.data_mut());
    }

    /// Names of the query-flagged tensors, in declared order.
    pub fn query_tensor_names(&self) -> Vec<String> {
        (0..self.layers.len()).map(|i| format!("layer{i}.wq")).collect()
    }
}

/// Accumulated gradients, keyed by tensor name. Only the tensors that were
/// actually differentiated appear.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    pub tensors: BTreeMap<String, Vec<f64>>,
}

impl Grads {
    pub fn entry(&mut self, name: &str, len: usize) -> &mut Vec<f64> {
        self.tensors
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; len])
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for v in self.tensors.values() {
            for &g in v {
                acc += g * g;
            }
        }
        acc.sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.tensors.values_mut() {
            for g in v.iter_mut() {
                *g *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|v| v.iter().all(|g| g.is_finite()))
    }
}

/// Per-layer frozen key/value tensors from one prefill. Heads are fused:
/// head h of row t occupies columns [h*d_k, (h+1)*d_k). Keys are stored
/// post-rotation.
#[derive(Debug, Clone)]
pub struct LayerKV {
    pub k: Matrix,
    pub v: Matrix,
}

#[derive(Debug, Clone)]
pub struct KVCache {
    layers: Vec<LayerKV>,
    len: usize,
    fingerprint: String,
}

impl KVCache {
    pub(crate) fn new(layers: Vec<LayerKV>, len: usize) -> Self {
        let fingerprint = Self::hash(&layers, len);
        KVCache { layers, len, fingerprint }
    }

    fn hash(layers: &[LayerKV], len: usize) -> String {
        let mut h = Sha256::new();
        h.update((len as u64).to_le_bytes());
        h.update((layers.len() as u64).to_le_bytes());
        for l in layers {
            for m in [&l.k, &l.v] {
                h.update((m.rows() as u64).to_le_bytes());
                h.update((m.cols() as u64).to_le_bytes());
                for &v in m.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn layer(&self, l: usize) -> &LayerKV {
        &self.layers[l]
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Content hash computed at creation.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Re-hash the current contents; equals `fingerprint()` as long as the
    /// cache has not been tampered with.
    pub fn recompute_fingerprint(&self) -> String {
        Self::hash(&self.layers, self.len)
    }
}

/// Contiguous span of context positions used for the adaptation loss.
///
/// `start` is a 0-based token index; the loss reads positions
/// `start .. start+len` as queries and predicts their successors, so
/// `start + len` must stay strictly inside the token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn new(start: usize, len: usize, context_len: usize) -> Result<Self> {
        if len == 0 || start + len >= context_len {
            return Err(Error::SpanOutOfRange { start, len, ctx: context_len });
        }
        Ok(Span { start, len })
    }

    /// Uniform over all valid starts for a length-`len` span in a
    /// length-`context_len` sequence.
    pub fn sample_uniform(context_len: usize, len: usize, rng: &mut Rng) -> Result<Self> {
        if context_len < len + 1 {
            return Err(Error::SpanOutOfRange { start: 0, len, ctx: context_len });
        }
        let n_starts = (context_len - len) as u64;
        let start = rng.below(n_starts) as usize;
        Span::new(start, len, context_len)
    }
}

pub(crate) fn rmsnorm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let mut ms = 0.0;
    for &v in x {
        ms += v * v;
    }
    let r = (ms / x.len() as f64 + RMS_EPS).sqrt();
    x.iter().zip(gain).map(|(&v, &g)| g * v / r).collect()
}

/// y = W x for a row-major W of shape (out, in).
pub(crate) fn matvec(w: &Matrix, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.cols(), x.len());
    let mut out = vec![0.0; w.rows()];
    for r in 0..w.rows() {
        let row = w.row(r);
        let mut acc = 0.0;
        for i in 0..x.len() {
            acc += row[i] * x[i];
        }
        out[r] = acc;
    }
    out
}

/// y = W^T x for a row-major W of shape (out, in); accumulates into `out`.
pub(crate) fn matvec_t_accum(w: &Matrix, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.rows(), x.len());
    debug_assert_eq!(w.cols(), out.len());
    for r in 0..w.rows() {
        let row = w.row(r);
        let xr = x[r];
        for i in 0..out.len() {
            out[i] += row[i] * xr;
        }
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Render text bytes as model tokens with a leading BOS.
pub fn tokens_from_bytes(bytes: &[u8]) -> Vec<u32> {
    let mut out = Vec::with_capacity(bytes.len() + 1);
    out.push(BOS);
    out.extend(bytes.iter().map(|&b| b as u32));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::tiny().validate().is_ok());
        let mut c = ModelConfig::tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.vocab = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn partition_flags_exactly_query_projections() {
        let cfg = ModelConfig {
            layers: 3,
            heads: 2,
            dim: 8,
            mlp_ratio: 2,
            vocab: 16,
            rope_enabled: true,
            max_context: 64,
            tied_embeddings: false,
        };
        let p = ModelParams::init(&cfg, 1).unwrap();
        let mut queries = Vec::new();
        let mut names = Vec::new();
        p.visit_tensors(|name, flag, _, _, _| {
            names.push(name.to_string());
            if flag == ParamFlag::Query {
                queries.push(name.to_string());
            }
        });
        assert_eq!(queries, vec!["layer0.wq", "layer1.wq", "layer2.wq"]);
        // Partition covers every tensor exactly once.
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(names.len(), 3 + 8 * 3);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig {
            layers: 2,
            heads: 2,
            dim: 8,
            mlp_ratio: 2,
            vocab: 16,
            rope_enabled: true,
            max_context: 64,
            tied_embeddings: false,
        };
        let a = ModelParams::init(&cfg, 7).unwrap();
        let b = ModelParams::init(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn span_bounds() {
        assert!(Span::new(0, 4, 16).is_ok());
        assert!(Span::new(11, 4, 16).is_ok());
        assert!(Span::new(12, 4, 16).is_err());
        assert!(Span::new(0, 0, 16).is_err());
        let mut rng = Rng::new(5);
        for _ in 0..500 {
            let s = Span::sample_uniform(16, 4, &mut rng).unwrap();
            assert!(s.start + s.len < 16);
        }
        assert!(Span::sample_uniform(4, 4, &mut rng).is_err());
    }

    #[test]
    fn rmsnorm_scale_invariant_direction() {
        let x = vec![1.0, -2.0, 3.0, 0.5];
        let g = vec![1.0; 4];
        let y = rmsnorm(&x, &g);
        let ms: f64 = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((ms - 1.0).abs() < 1e-6);
    }
}
