//! Forward paths: batch prefill over a full context, and the incremental
//! single-position path used for span losses, decoding, and attention
//! measurements. Both walk the layers with identical inner loops so a
//! recomputed position reproduces the prefill arithmetic.

use super::rope::rotate_in_place;
use super::{
    gelu, matvec, matvec_t_accum, rmsnorm, KVCache, LayerKV, ModelParams, Span,
};
use crate::error::{Error, Result};
use crate::numeric::{dot, log_sum_exp, softmax_row, Matrix, Rng};
use serde::{Deserialize, Serialize};

/// Observer for attention weights: (layer, head, query position, weights
/// over the attended rows 0..=position).
pub type AttnSink<'a> = &'a mut dyn FnMut(usize, usize, usize, &[f64]);

fn validate_tokens(params: &ModelParams, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("token sequence"));
    }
    if tokens.len() > params.config.max_context {
        return Err(Error::ContextTooLong {
            got: tokens.len(),
            max: params.config.max_context,
        });
    }
    for &t in tokens {
        if t as usize >= params.config.vocab {
            return Err(Error::UnknownToken(t));
        }
    }
    Ok(())
}

fn forward_full(
    params: &ModelParams,
    tokens: &[u32],
    mut sink: Option<AttnSink>,
) -> Result<(Matrix, Vec<LayerKV>)> {
    validate_tokens(params, tokens)?;
    let cfg = &params.config;
    let (t, d, heads, dk) = (tokens.len(), cfg.dim, cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dk as f64).sqrt();

    let mut h = Matrix::zeros(t, d);
    for (i, &tok) in tokens.iter().enumerate() {
        h.row_mut(i).copy_from_slice(params.embed.row(tok as usize));
    }

    let mut kvs = Vec::with_capacity(cfg.layers);
    for (l, layer) in params.layers.iter().enumerate() {
        let mut q_mat = Matrix::zeros(t, d);
        let mut k_mat = Matrix::zeros(t, d);
        let mut v_mat = Matrix::zeros(t, d);
        for i in 0..t {
            let xn = rmsnorm(h.row(i), &layer.ln1_gain);
            let mut q = matvec(&layer.w_q, &xn);
            let mut k = matvec(&layer.w_k, &xn);
            let v = matvec(&layer.w_v, &xn);
            for hd in 0..heads {
                rotate_in_place(&mut q[hd * dk..(hd + 1) * dk], i, cfg.rope_enabled);
                rotate_in_place(&mut k[hd * dk..(hd + 1) * dk], i, cfg.rope_enabled);
            }
            q_mat.row_mut(i).copy_from_slice(&q);
            k_mat.row_mut(i).copy_from_slice(&k);
            v_mat.row_mut(i).copy_from_slice(&v);
        }

        for i in 0..t {
            let mut concat = vec![0.0; d];
            for hd in 0..heads {
                let cols = hd * dk..(hd + 1) * dk;
                let q_h = &q_mat.row(i)[cols.clone()];
                let mut scores = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    scores.push(dot(q_h, &k_mat.row(j)[cols.clone()]) * scale);
                }
                let alpha = softmax_row(&scores)?;
                if let Some(s) = sink.as_deref_mut() {
                    s(l, hd, i, &alpha);
                }
                let out = &mut concat[cols.clone()];
                for j in 0..=i {
                    let v_h = &v_mat.row(j)[cols.clone()];
                    let a = alpha[j];
                    for c in 0..dk {
                        out[c] += a * v_h[c];
                    }
                }
            }
            let o = matvec(&layer.w_o, &concat);
            let a_mid: Vec<f64> = h.row(i).iter().zip(&o).map(|(x, y)| x + y).collect();
            let xn2 = rmsnorm(&a_mid, &layer.ln2_gain);
            let m1 = matvec(&layer.w_up, &xn2);
            let act: Vec<f64> = m1.iter().map(|&v| gelu(v)).collect();
            let m2 = matvec(&layer.w_down, &act);
            for (c, slot) in h.row_mut(i).iter_mut().enumerate() {
                *slot = a_mid[c] + m2[c];
            }
        }
        kvs.push(LayerKV { k: k_mat, v: v_mat });
    }
    Ok((h, kvs))
}

/// One full forward pass over the context, caching keys and values for
/// every layer and position.
pub fn prefill_and_cache(params: &ModelParams, tokens: &[u32]) -> Result<KVCache> {
    let (_, kvs) = forward_full(params, tokens, None)?;
    Ok(KVCache::new(kvs, tokens.len()))
}

/// Prefill that also streams every attention weight row to `sink`. Meant
/// for small contexts; weights are O(T^2) per layer/head.
pub fn prefill_with_attention(
    params: &ModelParams,
    tokens: &[u32],
    sink: AttnSink,
) -> Result<KVCache> {
    let (_, kvs) = forward_full(params, tokens, Some(sink))?;
    Ok(KVCache::new(kvs, tokens.len()))
}

/// Next-token logits at every position from a plain full forward.
pub fn full_forward_logits(params: &ModelParams, tokens: &[u32]) -> Result<Matrix> {
    let (h, _) = forward_full(params, tokens, None)?;
    let vocab = params.config.vocab;
    let mut logits = Matrix::zeros(tokens.len(), vocab);
    for i in 0..tokens.len() {
        let y = rmsnorm(h.row(i), &params.final_gain);
        matvec_t_accum(&params.unembed, &y, logits.row_mut(i));
    }
    Ok(logits)
}

/// Per-position intermediates captured by the traced forward; consumed by
/// the query-projection backward pass.
pub(crate) struct PosLayerTrace {
    pub x_in: Vec<f64>,
    pub xn1: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
    pub a_mid: Vec<f64>,
    pub m1: Vec<f64>,
}

pub(crate) struct PosTrace {
    pub layers: Vec<PosLayerTrace>,
    pub h_final: Vec<f64>,
    pub probs: Vec<f64>,
    pub lse: f64,
    pub logits: Vec<f64>,
}

struct ExtLayer {
    k_rows: Vec<Vec<f64>>,
    v_rows: Vec<Vec<f64>>,
}

/// Incremental forward over a frozen prefill cache.
///
/// The prefill cache is shared read-only; keys/values for newly generated
/// (or force-fed) tokens live in a session-local extension. The prefill
/// artifact is never touched, so its fingerprint is stable across any
/// number of sessions.
pub struct DecodeSession<'a> {
    params: &'a ModelParams,
    base: &'a KVCache,
    ext: Vec<ExtLayer>,
}

impl<'a> DecodeSession<'a> {
    pub fn new(params: &'a ModelParams, base: &'a KVCache) -> Result<Self> {
        if base.n_layers() != params.config.layers {
            return Err(Error::DimensionMismatch(format!(
                "cache has {} layers, model has {}",
                base.n_layers(),
                params.config.layers
            )));
        }
        let ext = (0..params.config.layers)
            .map(|_| ExtLayer { k_rows: Vec::new(), v_rows: Vec::new() })
            .collect();
        Ok(DecodeSession { params, base, ext })
    }

    /// Cached prefill length plus appended tokens.
    pub fn total_len(&self) -> usize {
        self.base.len() + self.ext[0].k_rows.len()
    }

    fn k_row(&self, layer: usize, t: usize) -> &[f64] {
        if t < self.base.len() {
            self.base.layer(layer).k.row(t)
        } else {
            &self.ext[layer].k_rows[t - self.base.len()]
        }
    }

    fn v_row(&self, layer: usize, t: usize) -> &[f64] {
        if t < self.base.len() {
            self.base.layer(layer).v.row(t)
        } else {
            &self.ext[layer].v_rows[t - self.base.len()]
        }
    }

    /// Recompute the forward of a position whose keys/values are already
    /// present (a context position, or a previously appended one). Queries
    /// come from the current parameters; cached rows are read as-is.
    pub fn reforward(
        &mut self,
        pos: usize,
        token: u32,
        sink: Option<AttnSink>,
    ) -> Result<Vec<f64>> {
        if pos >= self.total_len() {
            return Err(Error::Precondition(format!(
                "reforward position {pos} beyond attended length {}",
                self.total_len()
            )));
        }
        self.step(pos, token, false, sink, None)
    }

    /// Forward a new token at the next position, appending its keys/values
    /// to the session extension.
    pub fn append(&mut self, token: u32, sink: Option<AttnSink>) -> Result<Vec<f64>> {
        if self.total_len() >= self.params.config.max_context {
            return Err(Error::ContextTooLong {
                got: self.total_len() + 1,
                max: self.params.config.max_context,
            });
        }
        self.step(self.total_len(), token, true, sink, None)
    }

    pub(crate) fn reforward_traced(&mut self, pos: usize, token: u32) -> Result<PosTrace> {
        let mut trace = PosTrace {
            layers: Vec::with_capacity(self.params.config.layers),
            h_final: Vec::new(),
            probs: Vec::new(),
            lse: 0.0,
            logits: Vec::new(),
        };
        self.step(pos, token, false, None, Some(&mut trace))?;
        Ok(trace)
    }

    fn step(
        &mut self,
        pos: usize,
        token: u32,
        append: bool,
        mut sink: Option<AttnSink>,
        mut trace: Option<&mut PosTrace>,
    ) -> Result<Vec<f64>> {
        let cfg = &self.params.config;
        if token as usize >= cfg.vocab {
            return Err(Error::UnknownToken(token));
        }
        let (d, heads, dk) = (cfg.dim, cfg.heads, cfg.head_dim());
        let scale = 1.0 / (dk as f64).sqrt();

        let mut x: Vec<f64> = self.params.embed.row(token as usize).to_vec();
        for (l, layer) in self.params.layers.iter().enumerate() {
            let xn1 = rmsnorm(&x, &layer.ln1_gain);
            let mut q = matvec(&layer.w_q, &xn1);
            for hd in 0..heads {
                rotate_in_place(&mut q[hd * dk..(hd + 1) * dk], pos, cfg.rope_enabled);
            }
            if append {
                let mut k = matvec(&layer.w_k, &xn1);
                for hd in 0..heads {
                    rotate_in_place(&mut k[hd * dk..(hd + 1) * dk], pos, cfg.rope_enabled);
                }
                let v = matvec(&layer.w_v, &xn1);
                self.ext[l].k_rows.push(k);
                self.ext[l].v_rows.push(v);
            }

            let mut concat = vec![0.0; d];
            let mut alphas = Vec::with_capacity(if trace.is_some() { heads } else { 0 });
            for hd in 0..heads {
                let cols = hd * dk..(hd + 1) * dk;
                let q_h = &q[cols.clone()];
                let mut scores = Vec::with_capacity(pos + 1);
                for j in 0..=pos {
                    scores.push(dot(q_h, &self.k_row(l, j)[cols.clone()]) * scale);
                }
                let alpha = softmax_row(&scores)?;
                if let Some(s) = sink.as_deref_mut() {
                    s(l, hd, pos, &alpha);
                }
                for j in 0..=pos {
                    let v_h = &self.v_row(l, j)[cols.clone()];
                    let a = alpha[j];
                    let out = &mut concat[cols.clone()];
                    for c in 0..dk {
                        out[c] += a * v_h[c];
                    }
                }
                if trace.is_some() {
                    alphas.push(alpha);
                }
            }
            let o = matvec(&layer.w_o, &concat);
            let a_mid: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
            let xn2 = rmsnorm(&a_mid, &layer.ln2_gain);
            let m1 = matvec(&layer.w_up, &xn2);
            let act: Vec<f64> = m1.iter().map(|&v| gelu(v)).collect();
            let m2 = matvec(&layer.w_down, &act);
            let next: Vec<f64> = a_mid.iter().zip(&m2).map(|(a, b)| a + b).collect();

            if let Some(t) = trace.as_deref_mut() {
                t.layers.push(PosLayerTrace {
                    x_in: x.clone(),
                    xn1,
                    alpha: alphas,
                    a_mid,
                    m1,
                });
            }
            x = next;
        }

        let y = rmsnorm(&x, &self.params.final_gain);
        let mut logits = vec![0.0; cfg.vocab];
        matvec_t_accum(&self.params.unembed, &y, &mut logits);

        if let Some(t) = trace {
            t.h_final = x;
            t.lse = log_sum_exp(&logits)?;
            t.probs = softmax_row(&logits)?;
            t.logits = logits.clone();
        }
        Ok(logits)
    }
}

/// Next-token loss over a context span, with every attention read served by
/// the frozen cache. Returns the summed loss and the per-position logits.
///
/// Normalization statistics for the span positions are recomputed on the
/// current parameters (their hidden states change as the query projections
/// move); only keys and values stay pinned to the prefill.
pub fn span_forward_frozen_kv(
    params: &ModelParams,
    cache: &KVCache,
    tokens: &[u32],
    span: Span,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if tokens.len() != cache.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} tokens vs cache length {}",
            tokens.len(),
            cache.len()
        )));
    }
    if span.len == 0 || span.start + span.len >= tokens.len() {
        return Err(Error::SpanOutOfRange {
            start: span.start,
            len: span.len,
            ctx: tokens.len(),
        });
    }
    let mut session = DecodeSession::new(params, cache)?;
    let mut loss = 0.0;
    let mut all_logits = Vec::with_capacity(span.len);
    for p in span.start..span.start + span.len {
        let logits = session.reforward(p, tokens[p], None)?;
        let target = tokens[p + 1] as usize;
        loss += log_sum_exp(&logits)? - logits[target];
        all_logits.push(logits);
    }
    Ok((loss, all_logits))
}

/// Decoding controls. Temperature 0 means greedy (ties to the lowest id);
/// positive temperatures sample from the tempered distribution using the
/// seeded stream.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        SamplerConfig { temperature: 0.0, seed: 0 }
    }

    pub fn sample(&self, logits: &[f64], rng: &mut Rng) -> Result<u32> {
        if self.temperature == 0.0 {
            let mut best = 0usize;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            Ok(best as u32)
        } else {
            let scaled: Vec<f64> = logits.iter().map(|&v| v / self.temperature).collect();
            let p = softmax_row(&scaled)?;
            Ok(rng.categorical(&p) as u32)
        }
    }
}

/// Autoregressive generation of `n_tokens` continuations of the cached
/// prompt. The prefill cache is read-only; new keys/values accumulate in a
/// session extension, so after generating M tokens the attended length is
/// prompt + M.
pub fn decode(
    params: &ModelParams,
    cache: &KVCache,
    tokens: &[u32],
    n_tokens: usize,
    sampler: SamplerConfig,
) -> Result<Vec<u32>> {
    if tokens.len() != cache.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} prompt tokens vs cache length {}",
            tokens.len(),
            cache.len()
        )));
    }
    if n_tokens == 0 {
        return Ok(Vec::new());
    }
    if cache.len() + n_tokens > params.config.max_context {
        return Err(Error::ContextTooLong {
            got: cache.len() + n_tokens,
            max: params.config.max_context,
        });
    }
    let mut session = DecodeSession::new(params, cache)?;
    let mut rng = Rng::new(sampler.seed);
    let mut out = Vec::with_capacity(n_tokens);
    let mut logits = session.reforward(cache.len() - 1, *tokens.last().unwrap(), None)?;
    for _ in 0..n_tokens {
        let tok = sampler.sample(&logits, &mut rng)?;
        out.push(tok);
        logits = session.append(tok, None)?;
    }
    Ok(out)
}
