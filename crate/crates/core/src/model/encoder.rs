//! Post-norm Transformer encoder with a cached forward pass and exact backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{gelu, gelu_grad, lit, softmax_in_place, Mat, Real};
use super::{EncoderLayer, LayerNorm, Parameters};
use crate::error::{Error, Result};
use crate::tokenizer::EncodedInput;

pub const LN_EPS: f64 = 1e-5;

/// Dropout is active only in `Train` mode; the seed fixes every mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

impl Mode {
    /// Derives an independent mode for a sub-computation (row, task, ...).
    pub fn fork(self, tag: u64) -> Mode {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train { seed } => Mode::Train { seed: splitmix(seed ^ splitmix(tag)) },
        }
    }
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

struct Dropout {
    rng: Option<(ChaCha8Rng, f64)>,
}

impl Dropout {
    fn new(mode: Mode, p: f64) -> Self {
        match mode {
            Mode::Train { seed } if p > 0.0 => Dropout { rng: Some((ChaCha8Rng::seed_from_u64(seed), p)) },
            _ => Dropout { rng: None },
        }
    }

    /// Applies inverted dropout in place and returns the per-element scale.
    fn apply<T: Real>(&mut self, x: &mut Mat<T>) -> Option<Vec<T>> {
        let (rng, p) = self.rng.as_mut()?;
        let keep = lit::<T>(1.0 / (1.0 - *p));
        let mask: Vec<T> = (0..x.len()).map(|_| if rng.gen::<f64>() < *p { T::zero() } else { keep }).collect();
        for (v, &m) in x.data.iter_mut().zip(&mask) {
            *v *= m;
        }
        Some(mask)
    }
}

fn apply_mask<T: Real>(d: &Mat<T>, mask: &Option<Vec<T>>) -> Mat<T> {
    match mask {
        None => d.clone(),
        Some(m) => Mat::from_vec(d.rows, d.cols, d.data.iter().zip(m).map(|(&a, &b)| a * b).collect()),
    }
}

pub struct LnCache<T> {
    xhat: Mat<T>,
    rstd: Vec<T>,
}

pub fn layer_norm<T: Real>(x: &Mat<T>, ln: &LayerNorm<T>) -> (Mat<T>, LnCache<T>) {
    let n = lit::<T>(x.cols as f64);
    let eps = lit::<T>(LN_EPS);
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for c in 0..x.cols {
            let h = (row[c] - mean) * rs;
            xhat.data[r * x.cols + c] = h;
            y.data[r * x.cols + c] = h * ln.gamma.data[c] + ln.beta.data[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<T: Real>(dy: &Mat<T>, cache: &LnCache<T>, ln: &LayerNorm<T>, grad: &mut LayerNorm<T>) -> Mat<T> {
    let cols = dy.cols;
    let n = lit::<T>(cols as f64);
    let mut dx = Mat::zeros(dy.rows, cols);
    let mut dxhat = vec![T::zero(); cols];
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for c in 0..cols {
            grad.gamma.data[c] += dyr[c] * xh[c];
            grad.beta.data[c] += dyr[c];
            dxhat[c] = dyr[c] * ln.gamma.data[c];
        }
        let mean_d = dxhat.iter().copied().sum::<T>() / n;
        let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        let out = dx.row_mut(r);
        for c in 0..cols {
            out[c] = cache.rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

/// `token_emb[id] + pos_emb[position] + seg_emb[segment]` per row.
pub fn embed<T: Real>(input: &EncodedInput, params: &Parameters<T>) -> Result<Mat<T>> {
    let h = params.config.hidden;
    let n = input.token_ids.len();
    if input.segment_ids.len() != n || input.position_ids.len() != n || input.attention_mask.len() != n {
        return Err(Error::invalid("encoded input fields have different lengths"));
    }
    let mut out = Mat::zeros(n, h);
    for i in 0..n {
        let (t, p, s) = (input.token_ids[i], input.position_ids[i], input.segment_ids[i] as u32);
        for (id, table) in [(t, &params.token_emb), (p, &params.pos_emb), (s, &params.seg_emb)] {
            if id as usize >= table.rows {
                return Err(Error::IdOutOfRange { id, size: table.rows });
            }
            for (o, &v) in out.row_mut(i).iter_mut().zip(table.row(id as usize)) {
                *o += v;
            }
        }
    }
    Ok(out)
}

struct LayerCache<T> {
    x_in: Mat<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    probs: Vec<Mat<T>>,
    ctx: Mat<T>,
    drop_attn: Option<Vec<T>>,
    ln_attn: LnCache<T>,
    x_mid: Mat<T>,
    ffn_pre: Mat<T>,
    ffn_act: Mat<T>,
    drop_ffn: Option<Vec<T>>,
    ln_ffn: LnCache<T>,
}

/// Everything needed to backpropagate one sequence.
pub struct EncoderTrace<T> {
    token_ids: Vec<u32>,
    position_ids: Vec<u32>,
    segment_ids: Vec<u8>,
    drop_emb: Option<Vec<T>>,
    ln_emb: LnCache<T>,
    layers: Vec<LayerCache<T>>,
    pub output: Mat<T>,
}

fn attention<T: Real>(q: &Mat<T>, k: &Mat<T>, v: &Mat<T>, mask: &[bool], heads: usize) -> (Mat<T>, Vec<Mat<T>>) {
    let (l, h) = q.shape();
    let d = h / heads;
    let scale = T::one() / lit::<T>(d as f64).sqrt();
    let mut ctx = Mat::zeros(l, h);
    let mut probs = Vec::with_capacity(heads);
    let any_valid = mask.iter().any(|&m| m);
    for hd in 0..heads {
        let off = hd * d;
        let mut p = Mat::zeros(l, l);
        for i in 0..l {
            if !any_valid {
                continue;
            }
            let qi = &q.row(i)[off..off + d];
            let row = p.row_mut(i);
            for j in 0..l {
                row[j] = if mask[j] {
                    super::tensor::dot(qi, &k.row(j)[off..off + d]) * scale
                } else {
                    T::neg_infinity()
                };
            }
            softmax_in_place(row);
            let out = &mut ctx.row_mut(i)[off..off + d];
            for j in 0..l {
                let a = row[j];
                if a == T::zero() {
                    continue;
                }
                for (o, &vv) in out.iter_mut().zip(&v.row(j)[off..off + d]) {
                    *o += a * vv;
                }
            }
        }
        probs.push(p);
    }
    (ctx, probs)
}

fn layer_forward<T: Real>(
    x: Mat<T>,
    layer: &EncoderLayer<T>,
    mask: &[bool],
    heads: usize,
    drop: &mut Dropout,
) -> (Mat<T>, LayerCache<T>) {
    let q = layer.query.forward(&x);
    let k = layer.key.forward(&x);
    let v = layer.value.forward(&x);
    let (ctx, probs) = attention(&q, &k, &v, mask, heads);
    let mut a = layer.output.forward(&ctx);
    let drop_attn = drop.apply(&mut a);
    a.add_assign(&x);
    let (x_mid, ln_attn) = layer_norm(&a, &layer.attn_norm);
    let ffn_pre = layer.ffn_in.forward(&x_mid);
    let ffn_act = Mat::from_vec(ffn_pre.rows, ffn_pre.cols, ffn_pre.data.iter().map(|&z| gelu(z)).collect());
    let mut f = layer.ffn_out.forward(&ffn_act);
    let drop_ffn = drop.apply(&mut f);
    f.add_assign(&x_mid);
    let (out, ln_ffn) = layer_norm(&f, &layer.ffn_norm);
    let cache = LayerCache { x_in: x, q, k, v, probs, ctx, drop_attn, ln_attn, x_mid, ffn_pre, ffn_act, drop_ffn, ln_ffn };
    (out, cache)
}

fn layer_backward<T: Real>(
    d_out: &Mat<T>,
    layer: &EncoderLayer<T>,
    c: &LayerCache<T>,
    heads: usize,
    grad: &mut EncoderLayer<T>,
) -> Mat<T> {
    let d_res2 = layer_norm_backward(d_out, &c.ln_ffn, &layer.ffn_norm, &mut grad.ffn_norm);
    let d_f = apply_mask(&d_res2, &c.drop_ffn);
    let mut d_act = layer.ffn_out.backward(&c.ffn_act, &d_f, &mut grad.ffn_out);
    for (g, &z) in d_act.data.iter_mut().zip(&c.ffn_pre.data) {
        *g *= gelu_grad(z);
    }
    let mut d_mid = layer.ffn_in.backward(&c.x_mid, &d_act, &mut grad.ffn_in);
    d_mid.add_assign(&d_res2);

    let d_res1 = layer_norm_backward(&d_mid, &c.ln_attn, &layer.attn_norm, &mut grad.attn_norm);
    let d_a = apply_mask(&d_res1, &c.drop_attn);
    let d_ctx = layer.output.backward(&c.ctx, &d_a, &mut grad.output);

    let (l, h) = c.q.shape();
    let d = h / heads;
    let scale = T::one() / lit::<T>(d as f64).sqrt();
    let mut dq = Mat::zeros(l, h);
    let mut dk = Mat::zeros(l, h);
    let mut dv = Mat::zeros(l, h);
    let mut dp = vec![T::zero(); l];
    for hd in 0..heads {
        let off = hd * d;
        let p = &c.probs[hd];
        for i in 0..l {
            let dci = &d_ctx.row(i)[off..off + d];
            let pi = p.row(i);
            for j in 0..l {
                dp[j] = super::tensor::dot(dci, &c.v.row(j)[off..off + d]);
                if pi[j] != T::zero() {
                    for (g, &x) in dv.row_mut(j)[off..off + d].iter_mut().zip(dci) {
                        *g += pi[j] * x;
                    }
                }
            }
            let s: T = pi.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
            for j in 0..l {
                if pi[j] == T::zero() {
                    continue;
                }
                let ds = pi[j] * (dp[j] - s) * scale;
                for t in 0..d {
                    dq.data[i * h + off + t] += ds * c.k.data[j * h + off + t];
                    dk.data[j * h + off + t] += ds * c.q.data[i * h + off + t];
                }
            }
        }
    }
    let mut dx = d_res1;
    dx.add_assign(&layer.query.backward(&c.x_in, &dq, &mut grad.query));
    dx.add_assign(&layer.key.backward(&c.x_in, &dk, &mut grad.key));
    dx.add_assign(&layer.value.backward(&c.x_in, &dv, &mut grad.value));
    dx
}

/// Runs the encoder on an already-embedded matrix and keeps every intermediate.
pub fn encode_traced<T: Real>(input: &EncodedInput, params: &Parameters<T>, mode: Mode) -> Result<EncoderTrace<T>> {
    if input.token_ids.is_empty() {
        return Err(Error::invalid("empty encoder input"));
    }
    if input.token_ids.len() > params.config.max_positions {
        return Err(Error::invalid(format!(
            "input length {} exceeds max positions {}",
            input.token_ids.len(),
            params.config.max_positions
        )));
    }
    let embedded = embed(input, params)?;
    let mut drop = Dropout::new(mode, params.config.dropout);
    let (mut x, ln_emb) = layer_norm(&embedded, &params.emb_norm);
    let drop_emb = drop.apply(&mut x);
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, cache) = layer_forward(x, layer, &input.attention_mask, params.config.heads, &mut drop);
        layers.push(cache);
        x = next;
    }
    Ok(EncoderTrace {
        token_ids: input.token_ids.clone(),
        position_ids: input.position_ids.clone(),
        segment_ids: input.segment_ids.clone(),
        drop_emb,
        ln_emb,
        layers,
        output: x,
    })
}

/// Encoder stack over an embedded matrix: embedding norm, then the layers.
pub fn encode<T: Real>(embedded: &Mat<T>, attention_mask: &[bool], params: &Parameters<T>) -> Result<Mat<T>> {
    if attention_mask.len() != embedded.rows {
        return Err(Error::invalid("attention mask length differs from input length"));
    }
    let mut drop = Dropout::new(Mode::Eval, 0.0);
    let (mut x, _) = layer_norm(embedded, &params.emb_norm);
    for layer in &params.layers {
        x = layer_forward(x, layer, attention_mask, params.config.heads, &mut drop).0;
    }
    Ok(x)
}

/// Inference-mode hidden states for one input.
pub fn encode_input<T: Real>(input: &EncodedInput, params: &Parameters<T>) -> Result<Mat<T>> {
    Ok(encode_traced(input, params, Mode::Eval)?.output)
}

/// Accumulates gradients of all encoder tensors given `dL/d output`.
pub fn encode_backward<T: Real>(
    params: &Parameters<T>,
    trace: &EncoderTrace<T>,
    d_output: &Mat<T>,
    grads: &mut Parameters<T>,
) {
    let mut d = d_output.clone();
    for (i, layer) in params.layers.iter().enumerate().rev() {
        d = layer_backward(&d, layer, &trace.layers[i], params.config.heads, &mut grads.layers[i]);
    }
    let d = apply_mask(&d, &trace.drop_emb);
    let d_emb = layer_norm_backward(&d, &trace.ln_emb, &params.emb_norm, &mut grads.emb_norm);
    for r in 0..d_emb.rows {
        let row = d_emb.row(r);
        for (table, id) in [
            (&mut grads.token_emb, trace.token_ids[r] as usize),
            (&mut grads.pos_emb, trace.position_ids[r] as usize),
            (&mut grads.seg_emb, trace.segment_ids[r] as usize),
        ] {
            for (g, &x) in table.row_mut(id).iter_mut().zip(row) {
                *g += x;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;
    use crate::tokenizer::{encode_parts, Segment};

    fn input(ids: &[u32]) -> EncodedInput {
        encode_parts(&[(Segment::Wasm, ids.to_vec())], 64).unwrap()
    }

    #[test]
    fn single_token_is_finite() {
        let p: Parameters<f64> = Parameters::init(EncoderConfig::tiny(50), 3).unwrap();
        let x = EncodedInput {
            token_ids: vec![2],
            segment_ids: vec![0],
            position_ids: vec![0],
            attention_mask: vec![true],
        };
        let h = encode_input(&x, &p).unwrap();
        assert_eq!(h.shape(), (1, 8));
        assert!(h.is_finite());
    }

    #[test]
    fn embed_rejects_out_of_range() {
        let p: Parameters<f64> = Parameters::init(EncoderConfig::tiny(10), 3).unwrap();
        assert!(matches!(embed(&input(&[11]), &p), Err(Error::IdOutOfRange { id: 11, .. })));
    }

    #[test]
    fn pad_content_is_ignored() {
        let p: Parameters<f64> = Parameters::init(EncoderConfig::tiny(50), 3).unwrap();
        let a = input(&[10, 11, 12]).padded(8);
        let mut b = a.clone();
        b.token_ids[6] = 40;
        b.token_ids[7] = 41;
        let (ha, hb) = (encode_input(&a, &p).unwrap(), encode_input(&b, &p).unwrap());
        for r in 0..5 {
            for (x, y) in ha.row(r).iter().zip(hb.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_is_seeded() {
        let mut cfg = EncoderConfig::tiny(50);
        cfg.dropout = 0.3;
        let p: Parameters<f32> = Parameters::init(cfg, 3).unwrap();
        let x = input(&[10, 11, 12, 13]);
        let run = |s| encode_traced(&x, &p, Mode::Train { seed: s }).unwrap().output;
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
        assert_ne!(run(5), encode_input(&x, &p).unwrap());
    }
}
