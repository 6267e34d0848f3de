//! Full-sequence training forward plus hand-written backward pass.
//!
//! Gradients land in a flat buffer mirroring [`super::ModelParams`]'s
//! layout. Batches are split into fixed-size chunks processed in parallel;
//! chunk boundaries and the merge order are independent of the worker
//! count, so results are bit-identical under any thread configuration.

use rayon::prelude::*;

use crate::tensorcore::{dot, layer_norm, softmax_row, Matrix};

use super::{ModelError, ModelParams, Result, LN_EPS};

/// Fixed parallel chunk size; changing it changes f64 summation order.
const GRAD_CHUNK: usize = 8;

/// One training sequence: visual features, the token stream (starting at
/// `<bos>`), and an optional target per token position. `targets[i]` is the
/// token the position of `tokens[i]` must predict.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub features: Matrix,
    pub tokens: Vec<u32>,
    pub targets: Vec<Option<u32>>,
}

/// Loss, flat gradient buffer, and the number of supervised positions.
#[derive(Debug, Clone)]
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub target_count: usize,
}

struct LayerCache {
    x_in: Vec<f64>,
    a_in: Vec<f64>,
    mean1: Vec<f64>,
    inv1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    att: Vec<f64>, // heads * S * S, row-major (h, p, j)
    mixed: Vec<f64>,
    x2: Vec<f64>,
    m_in: Vec<f64>,
    mean2: Vec<f64>,
    inv2: Vec<f64>,
    u: Vec<f64>, // S * mlp_hidden, pre-ReLU
}

struct ForwardCache {
    seq: usize,
    layers: Vec<LayerCache>,
    x3: Vec<f64>, // final block output, S * d
    f: Vec<f64>,  // after final layer norm
    meanf: Vec<f64>,
    invf: Vec<f64>,
}

fn layer_norm_backward(
    dy: &[f64],
    x: &[f64],
    gain: &[f64],
    mean: f64,
    inv_std: f64,
    dgain: &mut [f64],
    dbias: &mut [f64],
    dx: &mut [f64],
) {
    let n = x.len() as f64;
    let mut sum_dxhat = 0.0;
    let mut sum_dxhat_xhat = 0.0;
    for i in 0..x.len() {
        let xhat = (x[i] - mean) * inv_std;
        let dxhat = dy[i] * gain[i];
        dgain[i] += dy[i] * xhat;
        dbias[i] += dy[i];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
    }
    for i in 0..x.len() {
        let xhat = (x[i] - mean) * inv_std;
        let dxhat = dy[i] * gain[i];
        dx[i] += inv_std * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
    }
}

/// Full-sequence forward with every intermediate cached.
fn train_forward(params: &ModelParams, example: &TrainExample) -> Result<ForwardCache> {
    let cfg = params.config();
    let d = cfg.dim;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let slots = cfg.visual_slots;
    let seq = slots + example.tokens.len();

    if example.features.rows() != slots || example.features.cols() != cfg.feat_dim {
        return Err(ModelError::FeatureShape {
            rows: example.features.rows(),
            cols: example.features.cols(),
            expected_rows: slots,
            expected_cols: cfg.feat_dim,
        });
    }
    if seq > cfg.max_positions {
        return Err(ModelError::SequenceTooLong {
            len: seq,
            max: cfg.max_positions,
        });
    }

    // Embeddings.
    let mut x = vec![0.0; seq * d];
    for p in 0..seq {
        let row = &mut x[p * d..(p + 1) * d];
        if p < slots {
            let feat = example.features.row(p);
            let proj = params.vis_proj();
            for i in 0..d {
                row[i] = dot(&proj[i * cfg.feat_dim..(i + 1) * cfg.feat_dim], feat);
            }
        } else {
            let token = example.tokens[p - slots];
            if token as usize >= cfg.vocab {
                return Err(ModelError::TokenOutOfVocab {
                    token,
                    vocab: cfg.vocab,
                });
            }
            row.copy_from_slice(params.tok_emb(token as usize));
        }
        for (xi, pi) in row.iter_mut().zip(params.pos_emb(p)) {
            *xi += pi;
        }
    }

    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let lr = params.layer(l).clone();
        let ln1_g = params.vec_at(lr.ln1_g, d);
        let ln1_b = params.vec_at(lr.ln1_b, d);
        let ln2_g = params.vec_at(lr.ln2_g, d);
        let ln2_b = params.vec_at(lr.ln2_b, d);
        let wq = params.vec_at(lr.wq, d * d);
        let wk = params.vec_at(lr.wk, d * d);
        let wv = params.vec_at(lr.wv, d * d);
        let wo = params.vec_at(lr.wo, d * d);
        let w1 = params.vec_at(lr.w1, cfg.mlp_hidden * d);
        let w2 = params.vec_at(lr.w2, d * cfg.mlp_hidden);

        let mut cache = LayerCache {
            x_in: x.clone(),
            a_in: vec![0.0; seq * d],
            mean1: vec![0.0; seq],
            inv1: vec![0.0; seq],
            q: vec![0.0; seq * d],
            k: vec![0.0; seq * d],
            v: vec![0.0; seq * d],
            att: vec![0.0; heads * seq * seq],
            mixed: vec![0.0; seq * d],
            x2: vec![0.0; seq * d],
            m_in: vec![0.0; seq * d],
            mean2: vec![0.0; seq],
            inv2: vec![0.0; seq],
            u: vec![0.0; seq * cfg.mlp_hidden],
        };

        for p in 0..seq {
            let (a, mean, inv) = layer_norm(&cache.x_in[p * d..(p + 1) * d], ln1_g, ln1_b, LN_EPS);
            cache.a_in[p * d..(p + 1) * d].copy_from_slice(&a);
            cache.mean1[p] = mean;
            cache.inv1[p] = inv;
            for i in 0..d {
                cache.q[p * d + i] = dot(&wq[i * d..(i + 1) * d], &a);
                cache.k[p * d + i] = dot(&wk[i * d..(i + 1) * d], &a);
                cache.v[p * d + i] = dot(&wv[i * d..(i + 1) * d], &a);
            }
        }

        // Causal attention.
        for h in 0..heads {
            for p in 0..seq {
                let qh = &cache.q[p * d + h * dh..p * d + (h + 1) * dh];
                let mut scores = Vec::with_capacity(p + 1);
                for j in 0..=p {
                    let kj = &cache.k[j * d + h * dh..j * d + (h + 1) * dh];
                    scores.push(dot(qh, kj) * scale);
                }
                let soft = softmax_row(&scores)?;
                let base = h * seq * seq + p * seq;
                cache.att[base..base + p + 1].copy_from_slice(&soft);
            }
        }
        for p in 0..seq {
            for h in 0..heads {
                let base = h * seq * seq + p * seq;
                let out = &mut cache.mixed[p * d + h * dh..p * d + (h + 1) * dh];
                for j in 0..=p {
                    let w = cache.att[base + j];
                    if w == 0.0 {
                        continue;
                    }
                    let vj = &cache.v[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += w * vv;
                    }
                }
            }
        }

        for p in 0..seq {
            let mixed = &cache.mixed[p * d..(p + 1) * d];
            for i in 0..d {
                cache.x2[p * d + i] =
                    cache.x_in[p * d + i] + dot(&wo[i * d..(i + 1) * d], mixed);
            }
            let (m, mean, inv) = layer_norm(&cache.x2[p * d..(p + 1) * d], ln2_g, ln2_b, LN_EPS);
            cache.m_in[p * d..(p + 1) * d].copy_from_slice(&m);
            cache.mean2[p] = mean;
            cache.inv2[p] = inv;
            for i in 0..cfg.mlp_hidden {
                cache.u[p * cfg.mlp_hidden + i] = dot(&w1[i * d..(i + 1) * d], &m);
            }
            for i in 0..d {
                let mut acc = cache.x2[p * d + i];
                let wrow = &w2[i * cfg.mlp_hidden..(i + 1) * cfg.mlp_hidden];
                for (j, &w) in wrow.iter().enumerate() {
                    let r = cache.u[p * cfg.mlp_hidden + j].max(0.0);
                    acc += w * r;
                }
                x[p * d + i] = acc;
            }
        }

        layers.push(cache);
    }

    let mut f = vec![0.0; seq * d];
    let mut meanf = vec![0.0; seq];
    let mut invf = vec![0.0; seq];
    for p in 0..seq {
        let (out, mean, inv) = layer_norm(
            &x[p * d..(p + 1) * d],
            params.lnf_gain(),
            params.lnf_bias(),
            LN_EPS,
        );
        f[p * d..(p + 1) * d].copy_from_slice(&out);
        meanf[p] = mean;
        invf[p] = inv;
    }

    Ok(ForwardCache {
        seq,
        layers,
        x3: x,
        f,
        meanf,
        invf,
    })
}

/// Accumulates one example's loss and gradients. `inv_total` is the
/// reciprocal of the batch-wide supervised-position count (loss and grads
/// are batch means).
fn accumulate_example(
    params: &ModelParams,
    example: &TrainExample,
    inv_total: f64,
    grads: &mut [f64],
) -> Result<f64> {
    let cfg = params.config();
    let d = cfg.dim;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let slots = cfg.visual_slots;
    let mlp = cfg.mlp_hidden;
    let layout = params.layout();

    let cache = train_forward(params, example)?;
    let seq = cache.seq;

    // Loss and dlogits -> df.
    let w_out = params.w_out();
    let mut loss = 0.0;
    let mut df = vec![0.0; seq * d];
    for (i, maybe_target) in example.targets.iter().enumerate() {
        let Some(target) = maybe_target else { continue };
        let t = *target as usize;
        if t >= cfg.vocab {
            return Err(ModelError::TargetOutOfVocab {
                token: *target,
                vocab: cfg.vocab,
            });
        }
        let p = slots + i;
        let fp = &cache.f[p * d..(p + 1) * d];
        let logits: Vec<f64> = (0..cfg.vocab)
            .map(|tk| dot(&w_out[tk * d..(tk + 1) * d], fp))
            .collect();
        let probs = softmax_row(&logits)?;
        loss -= probs[t].max(1e-300).ln() * inv_total;
        for (tk, &prob) in probs.iter().enumerate() {
            let mut dl = prob;
            if tk == t {
                dl -= 1.0;
            }
            dl *= inv_total;
            if dl == 0.0 {
                continue;
            }
            // dW_out[tk] += dl * f[p]; df[p] += dl * w_out[tk]
            let wrow = &w_out[tk * d..(tk + 1) * d];
            let gbase = layout.w_out + tk * d;
            for i2 in 0..d {
                grads[gbase + i2] += dl * fp[i2];
                df[p * d + i2] += dl * wrow[i2];
            }
        }
    }

    // Final layer norm backward.
    let mut dx = vec![0.0; seq * d];
    {
        let (gq, bq) = (layout.lnf_g, layout.lnf_b);
        // Split-borrow the two gradient slices out of the flat buffer.
        for p in 0..seq {
            let dyp = df[p * d..(p + 1) * d].to_vec();
            if dyp.iter().all(|&v| v == 0.0) {
                continue;
            }
            let xp = &cache.x3[p * d..(p + 1) * d];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            let mut dxp = vec![0.0; d];
            layer_norm_backward(
                &dyp,
                xp,
                params.lnf_gain(),
                cache.meanf[p],
                cache.invf[p],
                &mut dgain,
                &mut dbias,
                &mut dxp,
            );
            for i in 0..d {
                grads[gq + i] += dgain[i];
                grads[bq + i] += dbias[i];
                dx[p * d + i] += dxp[i];
            }
        }
    }

    // Layers in reverse.
    for l in (0..cfg.layers).rev() {
        let lc = &cache.layers[l];
        let lr = params.layer(l).clone();
        let ln1_g = params.vec_at(lr.ln1_g, d).to_vec();
        let ln2_g = params.vec_at(lr.ln2_g, d).to_vec();
        let wq = params.vec_at(lr.wq, d * d);
        let wk = params.vec_at(lr.wk, d * d);
        let wv = params.vec_at(lr.wv, d * d);
        let wo = params.vec_at(lr.wo, d * d);
        let w1 = params.vec_at(lr.w1, mlp * d);
        let w2 = params.vec_at(lr.w2, d * mlp);

        // --- MLP backward: x3 = x2 + W2 relu(W1 m_in) ---
        let mut dx2 = vec![0.0; seq * d];
        for p in 0..seq {
            let dy = &dx[p * d..(p + 1) * d];
            if dy.iter().all(|&v| v == 0.0) {
                continue;
            }
            // residual
            for i in 0..d {
                dx2[p * d + i] += dy[i];
            }
            // dW2 += dy (x) r ; dr = W2^T dy
            let mut dr = vec![0.0; mlp];
            for i in 0..d {
                let dyi = dy[i];
                if dyi == 0.0 {
                    continue;
                }
                let gbase = lr.w2 + i * mlp;
                let wrow = &w2[i * mlp..(i + 1) * mlp];
                for j in 0..mlp {
                    let r = lc.u[p * mlp + j].max(0.0);
                    grads[gbase + j] += dyi * r;
                    dr[j] += dyi * wrow[j];
                }
            }
            // du = dr * relu'(u); dW1 += du (x) m_in; dm = W1^T du
            let mut dm = vec![0.0; d];
            let m_in = &lc.m_in[p * d..(p + 1) * d];
            for j in 0..mlp {
                if lc.u[p * mlp + j] <= 0.0 || dr[j] == 0.0 {
                    continue;
                }
                let du = dr[j];
                let gbase = lr.w1 + j * d;
                let wrow = &w1[j * d..(j + 1) * d];
                for i in 0..d {
                    grads[gbase + i] += du * m_in[i];
                    dm[i] += du * wrow[i];
                }
            }
            // ln2 backward into dx2
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            let mut dxp = vec![0.0; d];
            layer_norm_backward(
                &dm,
                &lc.x2[p * d..(p + 1) * d],
                &ln2_g,
                lc.mean2[p],
                lc.inv2[p],
                &mut dgain,
                &mut dbias,
                &mut dxp,
            );
            for i in 0..d {
                grads[lr.ln2_g + i] += dgain[i];
                grads[lr.ln2_b + i] += dbias[i];
                dx2[p * d + i] += dxp[i];
            }
        }

        // --- Attention backward: x2 = x_in + Wo mixed ---
        let mut dx_in = vec![0.0; seq * d];
        let mut dmixed = vec![0.0; seq * d];
        for p in 0..seq {
            let dy = &dx2[p * d..(p + 1) * d];
            if dy.iter().all(|&v| v == 0.0) {
                continue;
            }
            for i in 0..d {
                dx_in[p * d + i] += dy[i];
            }
            let mixed = &lc.mixed[p * d..(p + 1) * d];
            for i in 0..d {
                let dyi = dy[i];
                if dyi == 0.0 {
                    continue;
                }
                let gbase = lr.wo + i * d;
                let wrow = &wo[i * d..(i + 1) * d];
                for j in 0..d {
                    grads[gbase + j] += dyi * mixed[j];
                    dmixed[p * d + j] += dyi * wrow[j];
                }
            }
        }

        // Heads: mixed -> (att, v) -> scores -> (q, k).
        let mut dq = vec![0.0; seq * d];
        let mut dk = vec![0.0; seq * d];
        let mut dv = vec![0.0; seq * d];
        for h in 0..heads {
            for p in 0..seq {
                let dhout = &dmixed[p * d + h * dh..p * d + (h + 1) * dh];
                if dhout.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let base = h * seq * seq + p * seq;
                let mut datt = vec![0.0; p + 1];
                for j in 0..=p {
                    let vj = &lc.v[j * d + h * dh..j * d + (h + 1) * dh];
                    datt[j] = dot(dhout, vj);
                    let w = lc.att[base + j];
                    if w != 0.0 {
                        let dvj = &mut dv[j * d + h * dh..j * d + (h + 1) * dh];
                        for (o, &g) in dvj.iter_mut().zip(dhout) {
                            *o += w * g;
                        }
                    }
                }
                // softmax backward
                let att_row = &lc.att[base..base + p + 1];
                let inner: f64 = datt.iter().zip(att_row).map(|(da, a)| da * a).sum();
                let qh = lc.q[p * d + h * dh..p * d + (h + 1) * dh].to_vec();
                for j in 0..=p {
                    let ds = att_row[j] * (datt[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &lc.k[j * d + h * dh..j * d + (h + 1) * dh];
                    let dqh = &mut dq[p * d + h * dh..p * d + (h + 1) * dh];
                    for (o, &kv) in dqh.iter_mut().zip(kj) {
                        *o += ds * kv;
                    }
                    let dkj = &mut dk[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, &qv) in dkj.iter_mut().zip(&qh) {
                        *o += ds * qv;
                    }
                }
            }
        }

        // Projections and ln1.
        for p in 0..seq {
            let a_in = &lc.a_in[p * d..(p + 1) * d];
            let mut da = vec![0.0; d];
            for (w_off, grad_off, dvec) in [
                (wq, lr.wq, &dq),
                (wk, lr.wk, &dk),
                (wv, lr.wv, &dv),
            ] {
                for i in 0..d {
                    let g = dvec[p * d + i];
                    if g == 0.0 {
                        continue;
                    }
                    let gbase = grad_off + i * d;
                    let wrow = &w_off[i * d..(i + 1) * d];
                    for j in 0..d {
                        grads[gbase + j] += g * a_in[j];
                        da[j] += g * wrow[j];
                    }
                }
            }
            if da.iter().all(|&v| v == 0.0) {
                continue;
            }
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            let mut dxp = vec![0.0; d];
            layer_norm_backward(
                &da,
                &lc.x_in[p * d..(p + 1) * d],
                &ln1_g,
                lc.mean1[p],
                lc.inv1[p],
                &mut dgain,
                &mut dbias,
                &mut dxp,
            );
            for i in 0..d {
                grads[lr.ln1_g + i] += dgain[i];
                grads[lr.ln1_b + i] += dbias[i];
                dx_in[p * d + i] += dxp[i];
            }
        }

        dx = dx_in;
    }

    // Embedding backward.
    for p in 0..seq {
        let dyp = &dx[p * d..(p + 1) * d];
        if dyp.iter().all(|&v| v == 0.0) {
            continue;
        }
        if p < slots {
            let feat = example.features.row(p);
            for i in 0..d {
                let g = dyp[i];
                if g == 0.0 {
                    continue;
                }
                let gbase = layout.vis_proj + i * cfg.feat_dim;
                for (fidx, &fv) in feat.iter().enumerate() {
                    grads[gbase + fidx] += g * fv;
                }
            }
        } else {
            let token = example.tokens[p - slots] as usize;
            let gbase = layout.tok_emb + token * d;
            for i in 0..d {
                grads[gbase + i] += dyp[i];
            }
        }
        let gbase = layout.pos_emb + p * d;
        for i in 0..d {
            grads[gbase + i] += dyp[i];
        }
    }

    Ok(loss)
}

/// Mean cross-entropy over every supervised position in `batch`, plus the
/// matching gradient buffer.
pub fn loss_and_grads(params: &ModelParams, batch: &[TrainExample]) -> Result<LossAndGrads> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let target_count: usize = batch
        .iter()
        .map(|e| e.targets.iter().flatten().count())
        .sum();
    if target_count == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let inv_total = 1.0 / target_count as f64;
    let n_params = params.num_params();

    // Fixed-size chunks keep summation order independent of thread count.
    let partials: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = vec![0.0; n_params];
            let mut loss = 0.0;
            for example in chunk {
                loss += accumulate_example(params, example, inv_total, &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect();

    let mut loss = 0.0;
    let mut grads = vec![0.0; n_params];
    for partial in partials {
        let (l, g) = partial?;
        loss += l;
        for (acc, v) in grads.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    Ok(LossAndGrads {
        loss,
        grads,
        target_count,
    })
}
