//! Forward and backward passes of the pre-norm decoder-only transformer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{LayerParams, LmParams};
use super::real::{matmul, matmul_a_bt, matmul_at_b, Real};
use crate::corpus::TokenBatch;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Logits for every position, row-major `[batch, seq, vocab]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<F> {
    pub batch: usize,
    pub seq: usize,
    pub vocab: usize,
    pub data: Vec<F>,
}

impl<F: Real> Logits<F> {
    pub fn row(&self, b: usize, t: usize) -> &[F] {
        let start = (b * self.seq + t) * self.vocab;
        &self.data[start..start + self.vocab]
    }
}

struct LnCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

struct LayerCache<F> {
    ln1: LnCache<F>,
    a: Vec<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    att: Vec<F>,
    drop_attn: Option<Vec<F>>,
    ln2: LnCache<F>,
    c: Vec<F>,
    h: Vec<F>,
    g: Vec<F>,
    drop_ffn: Option<Vec<F>>,
}

struct Cache<F> {
    layers: Vec<LayerCache<F>>,
    lnf: LnCache<F>,
    z: Vec<F>,
}

fn validate_batch<F: Real>(params: &LmParams<F>, batch: &TokenBatch) -> Result<()> {
    let cfg = &params.config;
    if batch.seq_len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: batch.seq_len,
            max: cfg.max_seq_len,
        });
    }
    let n = batch.batch_size * batch.seq_len;
    if batch.tokens.len() != n || batch.targets.len() != n || batch.mask.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "batch buffers do not match shape [{}, {}]",
            batch.batch_size, batch.seq_len
        )));
    }
    let v = cfg.vocab_size as u32;
    if let Some(&bad) = batch.tokens.iter().find(|&&t| t >= v) {
        return Err(Error::InvalidArgument(format!(
            "token id {bad} outside vocabulary of size {v}"
        )));
    }
    if let Some((&bad, _)) = batch
        .targets
        .iter()
        .zip(&batch.mask)
        .find(|(&t, &m)| m && t >= v)
    {
        return Err(Error::InvalidArgument(format!(
            "target id {bad} outside vocabulary of size {v}"
        )));
    }
    Ok(())
}

fn layer_norm<F: Real>(x: &[F], gain: &[F], bias: &[F], d: usize) -> (Vec<F>, LnCache<F>) {
    let rows = x.len() / d;
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    let eps = F::from_f64_lossy(LN_EPS);
    let inv_d = F::one() / F::from_usize(d).unwrap();
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let xh = (row[i] - mean) * rs;
            xhat[r * d + i] = xh;
            y[r * d + i] = xh * gain[i] + bias[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Accumulates gain/bias grads and returns the input gradient.
fn layer_norm_backward<F: Real>(
    dy: &[F],
    cache: &LnCache<F>,
    gain: &[F],
    dgain: &mut [F],
    dbias: &mut [F],
    d: usize,
) -> Vec<F> {
    let rows = dy.len() / d;
    let mut dx = vec![F::zero(); dy.len()];
    let inv_d = F::one() / F::from_usize(d).unwrap();
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for i in 0..d {
            dgain[i] = dgain[i] + dyr[i] * xh[i];
            dbias[i] = dbias[i] + dyr[i];
            let dxh = dyr[i] * gain[i];
            mean_dxhat = mean_dxhat + dxh;
            mean_dxhat_xhat = mean_dxhat_xhat + dxh * xh[i];
        }
        mean_dxhat = mean_dxhat * inv_d;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
        let rs = cache.rstd[r];
        for i in 0..d {
            let dxh = dyr[i] * gain[i];
            dx[r * d + i] = rs * (dxh - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
    dx
}

fn add_bias<F: Real>(x: &mut [F], bias: &[F]) {
    let n = bias.len();
    for row in x.chunks_mut(n) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v = *v + *b;
        }
    }
}

fn accumulate_bias_grad<F: Real>(dbias: &mut [F], dy: &[F]) {
    let n = dbias.len();
    for row in dy.chunks(n) {
        for (g, v) in dbias.iter_mut().zip(row) {
            *g = *g + *v;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<F: Real>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let half = F::from_f64_lossy(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + three * a * x * x)
}

fn dropout_mask<F: Real>(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<F> {
    let keep = F::from_f64_lossy(1.0 / (1.0 - p));
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < p {
                F::zero()
            } else {
                keep
            }
        })
        .collect()
}

struct Dims {
    b: usize,
    t: usize,
    d: usize,
    h: usize,
    hd: usize,
}

fn attention_forward<F: Real>(qkv: &[F], dims: &Dims) -> (Vec<F>, Vec<F>) {
    let Dims { b, t, d, h, hd } = *dims;
    let scale = F::one() / F::from_usize(hd).unwrap().sqrt();
    let mut out = vec![F::zero(); b * t * d];
    let mut probs = vec![F::zero(); b * h * t * t];
    let mut scores = vec![F::zero(); t];
    for bi in 0..b {
        for head in 0..h {
            for i in 0..t {
                let q = &qkv[(bi * t + i) * 3 * d + head * hd..][..hd];
                let mut max = F::neg_infinity();
                for j in 0..=i {
                    let k = &qkv[(bi * t + j) * 3 * d + d + head * hd..][..hd];
                    let s = q.iter().zip(k).map(|(&x, &y)| x * y).sum::<F>() * scale;
                    scores[j] = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut sum = F::zero();
                for s in scores.iter_mut().take(i + 1) {
                    *s = (*s - max).exp();
                    sum = sum + *s;
                }
                let p_row = &mut probs[((bi * h + head) * t + i) * t..][..t];
                let o = &mut out[(bi * t + i) * d + head * hd..][..hd];
                for j in 0..=i {
                    let p = scores[j] / sum;
                    p_row[j] = p;
                    let v = &qkv[(bi * t + j) * 3 * d + 2 * d + head * hd..][..hd];
                    for (oo, &vv) in o.iter_mut().zip(v) {
                        *oo = *oo + p * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward<F: Real>(datt: &[F], qkv: &[F], probs: &[F], dims: &Dims) -> Vec<F> {
    let Dims { b, t, d, h, hd } = *dims;
    let scale = F::one() / F::from_usize(hd).unwrap().sqrt();
    let mut dqkv = vec![F::zero(); b * t * 3 * d];
    let mut dp = vec![F::zero(); t];
    for bi in 0..b {
        for head in 0..h {
            for i in 0..t {
                let dout = &datt[(bi * t + i) * d + head * hd..][..hd];
                let p_row = &probs[((bi * h + head) * t + i) * t..][..t];
                let mut dot = F::zero();
                for j in 0..=i {
                    let vo = (bi * t + j) * 3 * d + 2 * d + head * hd;
                    let v = &qkv[vo..vo + hd];
                    let g = dout.iter().zip(v).map(|(&x, &y)| x * y).sum::<F>();
                    dp[j] = g;
                    dot = dot + p_row[j] * g;
                    let dv = &mut dqkv[vo..vo + hd];
                    for (dvv, &o) in dv.iter_mut().zip(dout) {
                        *dvv = *dvv + p_row[j] * o;
                    }
                }
                let qo = (bi * t + i) * 3 * d + head * hd;
                for j in 0..=i {
                    let ds = p_row[j] * (dp[j] - dot) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    let ko = (bi * t + j) * 3 * d + d + head * hd;
                    for e in 0..hd {
                        let k = qkv[ko + e];
                        let q = qkv[qo + e];
                        dqkv[qo + e] = dqkv[qo + e] + ds * k;
                        dqkv[ko + e] = dqkv[ko + e] + ds * q;
                    }
                }
            }
        }
    }
    dqkv
}

fn embed<F: Real>(params: &LmParams<F>, batch: &TokenBatch) -> Vec<F> {
    let d = params.config.d_model;
    let mut x = vec![F::zero(); batch.tokens.len() * d];
    for (i, &tok) in batch.tokens.iter().enumerate() {
        let pos = i % batch.seq_len;
        let te = &params.token_embedding.data[tok as usize * d..][..d];
        let pe = &params.position_embedding.data[pos * d..][..d];
        for ((x, &a), &b) in x[i * d..(i + 1) * d].iter_mut().zip(te).zip(pe) {
            *x = a + b;
        }
    }
    x
}

fn layer_forward<F: Real>(
    layer: &LayerParams<F>,
    x: &mut [F],
    dims: &Dims,
    d_ff: usize,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> LayerCache<F> {
    let d = dims.d;
    let n = dims.b * dims.t;
    let (a, ln1) = layer_norm(x, &layer.ln1_gain.data, &layer.ln1_bias.data, d);
    let mut qkv = vec![F::zero(); n * 3 * d];
    matmul(&mut qkv, &a, &layer.qkv_weight.data, n, d, 3 * d, false);
    add_bias(&mut qkv, &layer.qkv_bias.data);
    let (att, probs) = attention_forward(&qkv, dims);
    let mut o = vec![F::zero(); n * d];
    matmul(&mut o, &att, &layer.attn_out_weight.data, n, d, d, false);
    add_bias(&mut o, &layer.attn_out_bias.data);

    let (mut drop_attn, mut drop_ffn) = (None, None);
    let mut dropout = dropout;
    if let Some((p, rng)) = dropout.as_mut() {
        let mask = dropout_mask::<F>(n * d, *p, rng);
        for (v, m) in o.iter_mut().zip(&mask) {
            *v = *v * *m;
        }
        drop_attn = Some(mask);
    }
    for (xv, ov) in x.iter_mut().zip(&o) {
        *xv = *xv + *ov;
    }

    let (c, ln2) = layer_norm(x, &layer.ln2_gain.data, &layer.ln2_bias.data, d);
    let mut h = vec![F::zero(); n * d_ff];
    matmul(&mut h, &c, &layer.fc_weight.data, n, d, d_ff, false);
    add_bias(&mut h, &layer.fc_bias.data);
    let g: Vec<F> = h.iter().map(|&v| gelu(v)).collect();
    let mut f = vec![F::zero(); n * d];
    matmul(&mut f, &g, &layer.proj_weight.data, n, d_ff, d, false);
    add_bias(&mut f, &layer.proj_bias.data);
    if let Some((p, rng)) = dropout.as_mut() {
        let mask = dropout_mask::<F>(n * d, *p, rng);
        for (v, m) in f.iter_mut().zip(&mask) {
            *v = *v * *m;
        }
        drop_ffn = Some(mask);
    }
    for (xv, fv) in x.iter_mut().zip(&f) {
        *xv = *xv + *fv;
    }
    LayerCache {
        ln1,
        a,
        qkv,
        probs,
        att,
        drop_attn,
        ln2,
        c,
        h,
        g,
        drop_ffn,
    }
}

fn forward_cached<F: Real>(
    params: &LmParams<F>,
    batch: &TokenBatch,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> (Vec<F>, Cache<F>) {
    let cfg = &params.config;
    let dims = Dims {
        b: batch.batch_size,
        t: batch.seq_len,
        d: cfg.d_model,
        h: cfg.n_heads,
        hd: cfg.head_dim(),
    };
    let n = dims.b * dims.t;
    let mut x = embed(params, batch);
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let drop = match dropout.as_deref_mut() {
            Some(rng) if cfg.dropout > 0.0 => Some((cfg.dropout, rng)),
            _ => None,
        };
        layers.push(layer_forward(layer, &mut x, &dims, cfg.d_ff, drop));
    }
    let (z, lnf) = layer_norm(
        &x,
        &params.final_ln_gain.data,
        &params.final_ln_bias.data,
        dims.d,
    );
    let mut logits = vec![F::zero(); n * cfg.vocab_size];
    matmul(
        &mut logits,
        &z,
        &params.output_weight.data,
        n,
        dims.d,
        cfg.vocab_size,
        false,
    );
    (logits, Cache { layers, lnf, z })
}

/// Next-token logits for every position (causal; no dropout).
pub fn forward<F: Real>(params: &LmParams<F>, batch: &TokenBatch) -> Result<Logits<F>> {
    validate_batch(params, batch)?;
    let (data, _) = forward_cached(params, batch, None);
    Ok(Logits {
        batch: batch.batch_size,
        seq: batch.seq_len,
        vocab: params.config.vocab_size,
        data,
    })
}

/// Mean NLL over unmasked targets, plus `dL/dlogits` when requested.
fn nll<F: Real>(
    logits: &[F],
    batch: &TokenBatch,
    vocab: usize,
    want_grad: bool,
) -> Result<(f64, Vec<F>)> {
    let count = batch.target_count();
    if count == 0 {
        return Err(Error::FullyMasked);
    }
    let inv = F::one() / F::from_usize(count).unwrap();
    let mut total = 0.0f64;
    let mut grad = if want_grad {
        vec![F::zero(); logits.len()]
    } else {
        Vec::new()
    };
    for (i, (&target, &m)) in batch.targets.iter().zip(&batch.mask).enumerate() {
        if !m {
            continue;
        }
        let row = &logits[i * vocab..(i + 1) * vocab];
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let sum = row.iter().map(|&v| (v - max).exp()).sum::<F>();
        let lse = max + sum.ln();
        total += (lse - row[target as usize]).as_f64();
        if want_grad {
            let g = &mut grad[i * vocab..(i + 1) * vocab];
            for (gv, &v) in g.iter_mut().zip(row) {
                *gv = (v - lse).exp() * inv;
            }
            g[target as usize] = g[target as usize] - inv;
        }
    }
    Ok((total / count as f64, grad))
}

/// Mean token-level negative log-likelihood of the batch.
pub fn loss<F: Real>(params: &LmParams<F>, batch: &TokenBatch) -> Result<f64> {
    validate_batch(params, batch)?;
    let (logits, _) = forward_cached(params, batch, None);
    Ok(nll(&logits, batch, params.config.vocab_size, false)?.0)
}

/// Mean NLL and its gradient with respect to every parameter tensor.
pub fn loss_and_grads<F: Real>(
    params: &LmParams<F>,
    batch: &TokenBatch,
) -> Result<(f64, LmParams<F>)> {
    loss_and_grads_with(params, batch, None)
}

pub(crate) fn loss_and_grads_with<F: Real>(
    params: &LmParams<F>,
    batch: &TokenBatch,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, LmParams<F>)> {
    validate_batch(params, batch)?;
    let cfg = params.config;
    let (logits, cache) = forward_cached(params, batch, dropout);
    let (loss, dlogits) = nll(&logits, batch, cfg.vocab_size, true)?;

    let dims = Dims {
        b: batch.batch_size,
        t: batch.seq_len,
        d: cfg.d_model,
        h: cfg.n_heads,
        hd: cfg.head_dim(),
    };
    let (n, d, v, ff) = (dims.b * dims.t, dims.d, cfg.vocab_size, cfg.d_ff);
    let mut grads = params.zeros_like();

    matmul_at_b(
        &mut grads.output_weight.data,
        &cache.z,
        &dlogits,
        n,
        d,
        v,
        false,
    );
    let mut dz = vec![F::zero(); n * d];
    matmul_a_bt(
        &mut dz,
        &dlogits,
        &params.output_weight.data,
        n,
        v,
        d,
        false,
    );
    let mut dx = layer_norm_backward(
        &dz,
        &cache.lnf,
        &params.final_ln_gain.data,
        &mut grads.final_ln_gain.data,
        &mut grads.final_ln_bias.data,
        d,
    );

    for ((layer, lc), lg) in params
        .layers
        .iter()
        .zip(&cache.layers)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        // feed-forward branch
        let mut df = dx.clone();
        if let Some(mask) = &lc.drop_ffn {
            for (g, m) in df.iter_mut().zip(mask) {
                *g = *g * *m;
            }
        }
        matmul_at_b(&mut lg.proj_weight.data, &lc.g, &df, n, ff, d, false);
        accumulate_bias_grad(&mut lg.proj_bias.data, &df);
        let mut dh = vec![F::zero(); n * ff];
        matmul_a_bt(&mut dh, &df, &layer.proj_weight.data, n, d, ff, false);
        for (g, &h) in dh.iter_mut().zip(&lc.h) {
            *g = *g * gelu_grad(h);
        }
        matmul_at_b(&mut lg.fc_weight.data, &lc.c, &dh, n, d, ff, false);
        accumulate_bias_grad(&mut lg.fc_bias.data, &dh);
        let mut dc = vec![F::zero(); n * d];
        matmul_a_bt(&mut dc, &dh, &layer.fc_weight.data, n, ff, d, false);
        let dln2 = layer_norm_backward(
            &dc,
            &lc.ln2,
            &layer.ln2_gain.data,
            &mut lg.ln2_gain.data,
            &mut lg.ln2_bias.data,
            d,
        );
        for (a, b) in dx.iter_mut().zip(&dln2) {
            *a = *a + *b;
        }

        // attention branch
        let mut dout = dx.clone();
        if let Some(mask) = &lc.drop_attn {
            for (g, m) in dout.iter_mut().zip(mask) {
                *g = *g * *m;
            }
        }
        matmul_at_b(&mut lg.attn_out_weight.data, &lc.att, &dout, n, d, d, false);
        accumulate_bias_grad(&mut lg.attn_out_bias.data, &dout);
        let mut datt = vec![F::zero(); n * d];
        matmul_a_bt(
            &mut datt,
            &dout,
            &layer.attn_out_weight.data,
            n,
            d,
            d,
            false,
        );
        let dqkv = attention_backward(&datt, &lc.qkv, &lc.probs, &dims);
        matmul_at_b(&mut lg.qkv_weight.data, &lc.a, &dqkv, n, d, 3 * d, false);
        accumulate_bias_grad(&mut lg.qkv_bias.data, &dqkv);
        let mut da = vec![F::zero(); n * d];
        matmul_a_bt(&mut da, &dqkv, &layer.qkv_weight.data, n, 3 * d, d, false);
        let dln1 = layer_norm_backward(
            &da,
            &lc.ln1,
            &layer.ln1_gain.data,
            &mut lg.ln1_gain.data,
            &mut lg.ln1_bias.data,
            d,
        );
        for (a, b) in dx.iter_mut().zip(&dln1) {
            *a = *a + *b;
        }
    }

    for (i, &tok) in batch.tokens.iter().enumerate() {
        let pos = i % batch.seq_len;
        let g = &dx[i * d..(i + 1) * d];
        let te = &mut grads.token_embedding.data[tok as usize * d..][..d];
        for (a, &b) in te.iter_mut().zip(g) {
            *a = *a + b;
        }
        let pe = &mut grads.position_embedding.data[pos * d..][..d];
        for (a, &b) in pe.iter_mut().zip(g) {
            *a = *a + b;
        }
    }
    Ok((loss, grads))
}

/// Log-probability of each token `ids[t+1]` given `ids[..=t]`.
pub fn sequence_log_probs<F: Real>(params: &LmParams<F>, ids: &[u32]) -> Result<Vec<f64>> {
    Ok(next_token_log_distributions(params, ids)?
        .iter()
        .zip(&ids[1..])
        .map(|(row, &tok)| row[tok as usize])
        .collect())
}

/// Full next-token log-distribution after each prefix `ids[..=t]`, for
/// `t` in `0..ids.len() - 1`.
pub fn next_token_log_distributions<F: Real>(
    params: &LmParams<F>,
    ids: &[u32],
) -> Result<Vec<Vec<f64>>> {
    let batch = TokenBatch::from_sequence(ids)?;
    let logits = forward(params, &batch)?;
    Ok((0..batch.seq_len)
        .map(|t| log_softmax(logits.row(0, t)))
        .collect())
}

/// Numerically stable log-softmax, evaluated in `f64`.
pub fn log_softmax<F: Real>(row: &[F]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + row
            .iter()
            .map(|v| (v.as_f64() - max).exp())
            .sum::<f64>()
            .ln();
    row.iter().map(|v| v.as_f64() - lse).collect()
}
