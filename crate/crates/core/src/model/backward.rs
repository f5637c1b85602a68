//! Reverse-mode gradients.
//!
//! Two paths live here. `span_loss_and_wq_grads` differentiates the frozen-
//! cache span loss with respect to the query projections only: cached keys
//! and values are constants, no gradient is materialized for any other
//! tensor, but the chain rule does run through the span positions' full
//! residual/MLP stack (those activations depend on lower-layer queries).
//! `train_forward_backward` is the standard full-parameter pass used for
//! base-model training.

use super::forward::DecodeSession;
use super::rope::{rotate_in_place, rotate_inverse_in_place};
use super::{
    gelu, gelu_prime, matvec, matvec_t_accum, rmsnorm, Grads, KVCache, ModelParams, Span,
    RMS_EPS,
};
use crate::error::{Error, Result};
use crate::numeric::{dot, log_sum_exp, softmax_row, Matrix};

/// d(rmsnorm(x) * gain)/dx accumulated into `dx`; optionally also the gain
/// gradient.
fn rmsnorm_backward(
    x: &[f64],
    gain: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    mut dgain: Option<&mut [f64]>,
) {
    let n = x.len() as f64;
    let mut ms = 0.0;
    for &v in x {
        ms += v * v;
    }
    let r = (ms / n + RMS_EPS).sqrt();
    let mut proj = 0.0;
    for i in 0..x.len() {
        proj += gain[i] * dy[i] * x[i];
    }
    let r3n = n * r * r * r;
    for i in 0..x.len() {
        dx[i] += gain[i] * dy[i] / r - x[i] * proj / r3n;
        if let Some(dg) = dgain.as_deref_mut() {
            dg[i] += dy[i] * x[i] / r;
        }
    }
}

/// Gradient of the frozen-cache span loss with respect to every per-layer
/// query projection. Returns (span loss, gradients). The gradient map
/// contains exactly the query-flagged tensors.
pub fn span_loss_and_wq_grads(
    params: &ModelParams,
    cache: &KVCache,
    tokens: &[u32],
    span: Span,
) -> Result<(f64, Grads)> {
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

    let cfg = &params.config;
    let (d, heads, dk) = (cfg.dim, cfg.heads, cfg.head_dim());
    let dff = cfg.mlp_dim();
    let scale = 1.0 / (dk as f64).sqrt();

    let mut grads = Grads::default();
    for name in params.query_tensor_names() {
        grads.entry(&name, d * d);
    }
    let mut session = DecodeSession::new(params, cache)?;
    let mut total_loss = 0.0;

    for p in span.start..span.start + span.len {
        let trace = session.reforward_traced(p, tokens[p])?;
        let target = tokens[p + 1] as usize;
        total_loss += trace.lse - trace.logits[target];

        // d(loss)/d(logits) = probs - onehot(target).
        let mut dlogits = trace.probs.clone();
        dlogits[target] -= 1.0;

        // Through the unembedding (constant) and final norm (constant gain).
        let dy = matvec(&params.unembed, &dlogits);
        let mut dh = vec![0.0; d];
        rmsnorm_backward(&trace.h_final, &params.final_gain, &dy, &mut dh, None);

        for l in (0..cfg.layers).rev() {
            let layer = &params.layers[l];
            let tr = &trace.layers[l];

            // h = a_mid + W_down gelu(W_up xn2)
            let dm2 = dh.clone();
            let mut da = dh;
            let mut dact = vec![0.0; dff];
            matvec_t_accum(&layer.w_down, &dm2, &mut dact);
            let dm1: Vec<f64> = dact
                .iter()
                .zip(&tr.m1)
                .map(|(&g, &m)| g * gelu_prime(m))
                .collect();
            let mut dxn2 = vec![0.0; d];
            matvec_t_accum(&layer.w_up, &dm1, &mut dxn2);
            rmsnorm_backward(&tr.a_mid, &layer.ln2_gain, &dxn2, &mut da, None);

            // a_mid = x_in + W_o concat
            let dattn = da.clone();
            let mut dx = da;
            let mut dconcat = vec![0.0; d];
            matvec_t_accum(&layer.w_o, &dattn, &mut dconcat);

            // Attention: cached K/V are constants; gradient reaches the
            // (rotated) query of each head.
            let mut dq = vec![0.0; d];
            for hd in 0..heads {
                let cols = hd * dk..(hd + 1) * dk;
                let do_h = &dconcat[cols.clone()];
                let alpha = &tr.alpha[hd];
                let mut dalpha = Vec::with_capacity(p + 1);
                for j in 0..=p {
                    let v_row = if j < cache.len() {
                        cache.layer(l).v.row(j)
                    } else {
                        unreachable!("span positions lie inside the cache")
                    };
                    dalpha.push(dot(do_h, &v_row[cols.clone()]));
                }
                let mut s = 0.0;
                for j in 0..=p {
                    s += alpha[j] * dalpha[j];
                }
                let dq_h = &mut dq[cols.clone()];
                for j in 0..=p {
                    let dz = alpha[j] * (dalpha[j] - s);
                    let k_row = &cache.layer(l).k.row(j)[cols.clone()];
                    let w = dz * scale;
                    for c in 0..dk {
                        dq_h[c] += w * k_row[c];
                    }
                }
                rotate_inverse_in_place(&mut dq[cols], p, cfg.rope_enabled);
            }

            // dW_q += dq (x) xn1; residual-stream gradient continues through
            // the query projection (constant matrix for this purpose).
            let g = grads.entry(&format!("layer{l}.wq"), d * d);
            for r in 0..d {
                let dqr = dq[r];
                let row = &mut g[r * d..(r + 1) * d];
                for c in 0..d {
                    row[c] += dqr * tr.xn1[c];
                }
            }
            let mut dxn1 = vec![0.0; d];
            matvec_t_accum(&layer.w_q, &dq, &mut dxn1);
            rmsnorm_backward(&tr.x_in, &layer.ln1_gain, &dxn1, &mut dx, None);

            dh = dx;
        }
        // Gradient into the embedding row is intentionally dropped.
    }
    Ok((total_loss, grads))
}

/// Query-projection gradients of the span loss (frozen cache).
pub fn grad_wq_span(
    params: &ModelParams,
    cache: &KVCache,
    tokens: &[u32],
    span: Span,
) -> Result<Grads> {
    span_loss_and_wq_grads(params, cache, tokens, span).map(|(_, g)| g)
}

/// Full forward + backward over a training window. The loss is the mean
/// next-token cross entropy over the window's S-1 predictions. Returns
/// (loss, gradients for every tensor).
pub(crate) fn train_forward_backward(
    params: &ModelParams,
    tokens: &[u32],
) -> Result<(f64, Grads)> {
    if tokens.len() < 2 {
        return Err(Error::Precondition(
            "training window needs at least 2 tokens".into(),
        ));
    }
    let cfg = &params.config;
    let (s, d, heads, dk) = (tokens.len(), cfg.dim, cfg.heads, cfg.head_dim());
    let dff = cfg.mlp_dim();
    let vocab = cfg.vocab;
    let scale = 1.0 / (dk as f64).sqrt();
    for &t in tokens {
        if t as usize >= vocab {
            return Err(Error::UnknownToken(t));
        }
    }

    struct LayerStash {
        x_in: Matrix,
        xn1: Matrix,
        q_rot: Matrix,
        k_rot: Matrix,
        v: Matrix,
        alpha: Vec<Vec<Vec<f64>>>, // head -> position -> weights
        concat: Matrix,
        a_mid: Matrix,
        xn2: Matrix,
        m1: Matrix,
        act: Matrix,
    }

    // ---- forward ----
    let mut h = Matrix::zeros(s, d);
    for (i, &tok) in tokens.iter().enumerate() {
        h.row_mut(i).copy_from_slice(params.embed.row(tok as usize));
    }
    let mut stash: Vec<LayerStash> = Vec::with_capacity(cfg.layers);
    for layer in &params.layers {
        let x_in = h.clone();
        let mut xn1 = Matrix::zeros(s, d);
        let mut q_rot = Matrix::zeros(s, d);
        let mut k_rot = Matrix::zeros(s, d);
        let mut v_mat = Matrix::zeros(s, d);
        for i in 0..s {
            let xn = rmsnorm(x_in.row(i), &layer.ln1_gain);
            let mut q = matvec(&layer.w_q, &xn);
            let mut k = matvec(&layer.w_k, &xn);
            let v = matvec(&layer.w_v, &xn);
            for hd in 0..heads {
                rotate_in_place(&mut q[hd * dk..(hd + 1) * dk], i, cfg.rope_enabled);
                rotate_in_place(&mut k[hd * dk..(hd + 1) * dk], i, cfg.rope_enabled);
            }
            xn1.row_mut(i).copy_from_slice(&xn);
            q_rot.row_mut(i).copy_from_slice(&q);
            k_rot.row_mut(i).copy_from_slice(&k);
            v_mat.row_mut(i).copy_from_slice(&v);
        }
        let mut alpha_stash: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(s); heads];
        let mut concat = Matrix::zeros(s, d);
        for i in 0..s {
            for hd in 0..heads {
                let cols = hd * dk..(hd + 1) * dk;
                let q_h = &q_rot.row(i)[cols.clone()];
                let mut scores = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    scores.push(dot(q_h, &k_rot.row(j)[cols.clone()]) * scale);
                }
                let alpha = softmax_row(&scores)?;
                let out = &mut concat.row_mut(i)[cols.clone()];
                for j in 0..=i {
                    let v_h = &v_mat.row(j)[cols.clone()];
                    let a = alpha[j];
                    for c in 0..dk {
                        out[c] += a * v_h[c];
                    }
                }
                alpha_stash[hd].push(alpha);
            }
        }
        let mut a_mid = Matrix::zeros(s, d);
        let mut xn2 = Matrix::zeros(s, d);
        let mut m1 = Matrix::zeros(s, dff);
        let mut act = Matrix::zeros(s, dff);
        for i in 0..s {
            let o = matvec(&layer.w_o, concat.row(i));
            for c in 0..d {
                a_mid.row_mut(i)[c] = x_in.row(i)[c] + o[c];
            }
            let n2 = rmsnorm(a_mid.row(i), &layer.ln2_gain);
            xn2.row_mut(i).copy_from_slice(&n2);
            let mm1 = matvec(&layer.w_up, &n2);
            let aa: Vec<f64> = mm1.iter().map(|&u| gelu(u)).collect();
            let mm2 = matvec(&layer.w_down, &aa);
            for c in 0..d {
                h.row_mut(i)[c] = a_mid.row(i)[c] + mm2[c];
            }
            m1.row_mut(i).copy_from_slice(&mm1);
            act.row_mut(i).copy_from_slice(&aa);
        }
        stash.push(LayerStash {
            x_in,
            xn1,
            q_rot,
            k_rot,
            v: v_mat,
            alpha: alpha_stash,
            concat,
            a_mid,
            xn2,
            m1,
            act,
        });
    }

    let n_pred = (s - 1) as f64;
    let mut y_final = Matrix::zeros(s, d);
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(s, vocab);
    for i in 0..s {
        let y = rmsnorm(h.row(i), &params.final_gain);
        y_final.row_mut(i).copy_from_slice(&y);
        if i + 1 < s {
            let mut logits = vec![0.0; vocab];
            matvec_t_accum(&params.unembed, &y, &mut logits);
            let lse = log_sum_exp(&logits)?;
            let target = tokens[i + 1] as usize;
            loss += (lse - logits[target]) / n_pred;
            let probs = softmax_row(&logits)?;
            let drow = dlogits.row_mut(i);
            for c in 0..vocab {
                drow[c] = probs[c] / n_pred;
            }
            drow[target] -= 1.0 / n_pred;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Diverged { step: 0 });
    }

    // ---- backward ----
    let mut grads = Grads::default();
    params.visit_tensors(|name, _, rows, cols, _| {
        grads.entry(name, rows * cols);
    });

    let mut dh = Matrix::zeros(s, d);
    for i in 0..s - 1 {
        // Through unembed: dU += y (x) dlogits, dy = U dlogits.
        let drow = dlogits.row(i);
        {
            let du = grads.entry("unembed", d * vocab);
            let y = y_final.row(i);
            for r in 0..d {
                let yr = y[r];
                let dst = &mut du[r * vocab..(r + 1) * vocab];
                for c in 0..vocab {
                    dst[c] += yr * drow[c];
                }
            }
        }
        let dy = matvec(&params.unembed, drow);
        let dgf = grads.entry("final_norm", d);
        let mut dgf_local = std::mem::take(dgf);
        rmsnorm_backward(h.row(i), &params.final_gain, &dy, dh.row_mut(i), Some(&mut dgf_local));
        *grads.entry("final_norm", d) = dgf_local;
    }

    for l in (0..cfg.layers).rev() {
        let layer = &params.layers[l];
        let st = &stash[l];
        let mut dx = Matrix::zeros(s, d);
        let mut dq_rot = Matrix::zeros(s, d);
        let mut dk_rot = Matrix::zeros(s, d);
        let mut dv = Matrix::zeros(s, d);
        let mut dconcat = Matrix::zeros(s, d);

        for i in 0..s {
            // MLP block backward.
            let dm2 = dh.row(i).to_vec();
            let mut da = dh.row(i).to_vec();
            let mut dact = vec![0.0; dff];
            matvec_t_accum(&layer.w_down, &dm2, &mut dact);
            {
                let g = grads.entry(&format!("layer{l}.down"), d * dff);
                let act_row = st.act.row(i);
                for r in 0..d {
                    let dr = dm2[r];
                    let dst = &mut g[r * dff..(r + 1) * dff];
                    for c in 0..dff {
                        dst[c] += dr * act_row[c];
                    }
                }
            }
            let dm1: Vec<f64> = dact
                .iter()
                .zip(st.m1.row(i))
                .map(|(&g, &m)| g * gelu_prime(m))
                .collect();
            let mut dxn2 = vec![0.0; d];
            matvec_t_accum(&layer.w_up, &dm1, &mut dxn2);
            {
                let g = grads.entry(&format!("layer{l}.up"), dff * d);
                let xn2_row = st.xn2.row(i);
                for r in 0..dff {
                    let dr = dm1[r];
                    let dst = &mut g[r * d..(r + 1) * d];
                    for c in 0..d {
                        dst[c] += dr * xn2_row[c];
                    }
                }
            }
            {
                let g = grads.entry(&format!("layer{l}.ln2"), d);
                let mut g_local = std::mem::take(g);
                rmsnorm_backward(st.a_mid.row(i), &layer.ln2_gain, &dxn2, &mut da, Some(&mut g_local));
                *grads.entry(&format!("layer{l}.ln2"), d) = g_local;
            }

            // Residual into attention output and the stream.
            let dattn = da.clone();
            for c in 0..d {
                dx.row_mut(i)[c] += da[c];
            }
            matvec_t_accum(&layer.w_o, &dattn, dconcat.row_mut(i));
            {
                let g = grads.entry(&format!("layer{l}.wo"), d * d);
                let con = st.concat.row(i);
                for r in 0..d {
                    let dr = dattn[r];
                    let dst = &mut g[r * d..(r + 1) * d];
                    for c in 0..d {
                        dst[c] += dr * con[c];
                    }
                }
            }
        }

        // Attention backward over all positions per head.
        for hd in 0..heads {
            let cols0 = hd * dk;
            for i in 0..s {
                let do_h = &dconcat.row(i)[cols0..cols0 + dk];
                let alpha = &st.alpha[hd][i];
                let mut dalpha = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    dalpha.push(dot(do_h, &st.v.row(j)[cols0..cols0 + dk]));
                }
                let mut sdot = 0.0;
                for j in 0..=i {
                    sdot += alpha[j] * dalpha[j];
                }
                for j in 0..=i {
                    let dz = alpha[j] * (dalpha[j] - sdot);
                    let w = dz * scale;
                    let k_row = &st.k_rot.row(j)[cols0..cols0 + dk];
                    let q_row = &st.q_rot.row(i)[cols0..cols0 + dk];
                    {
                        let dq_h = &mut dq_rot.row_mut(i)[cols0..cols0 + dk];
                        for c in 0..dk {
                            dq_h[c] += w * k_row[c];
                        }
                    }
                    {
                        let dk_h = &mut dk_rot.row_mut(j)[cols0..cols0 + dk];
                        for c in 0..dk {
                            dk_h[c] += w * q_row[c];
                        }
                    }
                    {
                        let dv_h = &mut dv.row_mut(j)[cols0..cols0 + dk];
                        let a = alpha[j];
                        for c in 0..dk {
                            dv_h[c] += a * do_h[c];
                        }
                    }
                }
            }
        }

        // Un-rotate, project back through Q/K/V, then through the first norm.
        for i in 0..s {
            for hd in 0..heads {
                let cols = hd * dk..(hd + 1) * dk;
                rotate_inverse_in_place(&mut dq_rot.row_mut(i)[cols.clone()], i, cfg.rope_enabled);
                rotate_inverse_in_place(&mut dk_rot.row_mut(i)[cols], i, cfg.rope_enabled);
            }
            let mut dxn1 = vec![0.0; d];
            {
                let g = grads.entry(&format!("layer{l}.wq"), d * d);
                let dq = dq_rot.row(i);
                let xn1 = st.xn1.row(i);
                for r in 0..d {
                    let dr = dq[r];
                    let dst = &mut g[r * d..(r + 1) * d];
                    for c in 0..d {
                        dst[c] += dr * xn1[c];
                    }
                }
            }
            matvec_t_accum(&layer.w_q, dq_rot.row(i), &mut dxn1);
            {
                let g = grads.entry(&format!("layer{l}.wk"), d * d);
                let dkr = dk_rot.row(i);
                let xn1 = st.xn1.row(i);
                for r in 0..d {
                    let dr = dkr[r];
                    let dst = &mut g[r * d..(r + 1) * d];
                    for c in 0..d {
                        dst[c] += dr * xn1[c];
                    }
                }
            }
            matvec_t_accum(&layer.w_k, dk_rot.row(i), &mut dxn1);
            {
                let g = grads.entry(&format!("layer{l}.wv"), d * d);
                let dvr = dv.row(i);
                let xn1 = st.xn1.row(i);
                for r in 0..d {
                    let dr = dvr[r];
                    let dst = &mut g[r * d..(r + 1) * d];
                    for c in 0..d {
                        dst[c] += dr * xn1[c];
                    }
                }
            }
            matvec_t_accum(&layer.w_v, dv.row(i), &mut dxn1);

            let g = grads.entry(&format!("layer{l}.ln1"), d);
            let mut g_local = std::mem::take(g);
            rmsnorm_backward(st.x_in.row(i), &layer.ln1_gain, &dxn1, dx.row_mut(i), Some(&mut g_local));
            *grads.entry(&format!("layer{l}.ln1"), d) = g_local;
        }

        dh = dx;
    }

    {
        let g = grads.entry("embed", vocab * d);
        for (i, &tok) in tokens.iter().enumerate() {
            let base = tok as usize * d;
            let src = dh.row(i);
            for c in 0..d {
                g[base + c] += src[c];
            }
        }
    }

    Ok((loss, grads))
}
