//! Two-layer recurrent decoder with additive attention over encoder outputs.

use std::cmp::Ordering;

use super::tensor::{log_sum_exp, sigmoid, softmax_in_place, Mat, Real};
use super::{DecoderParams, Parameters};
use crate::error::{Error, Result};

fn vec_mat<T: Real>(x: &[T], w: &Mat<T>) -> Vec<T> {
    debug_assert_eq!(x.len(), w.rows);
    let mut out = vec![T::zero(); w.cols];
    for (k, &a) in x.iter().enumerate() {
        if a == T::zero() {
            continue;
        }
        for (o, &b) in out.iter_mut().zip(w.row(k)) {
            *o += a * b;
        }
    }
    out
}

/// `d · wᵀ`
fn vec_mat_t<T: Real>(d: &[T], w: &Mat<T>) -> Vec<T> {
    (0..w.rows).map(|r| super::tensor::dot(d, w.row(r))).collect()
}

/// `acc += x ⊗ d`
fn outer_acc<T: Real>(x: &[T], d: &[T], acc: &mut Mat<T>) {
    for (r, &a) in x.iter().enumerate() {
        if a == T::zero() {
            continue;
        }
        for (o, &b) in acc.row_mut(r).iter_mut().zip(d) {
            *o += a * b;
        }
    }
}

fn add_to<T: Real>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

fn decoder_of<T: Real>(params: &Parameters<T>) -> Result<&DecoderParams<T>> {
    params.decoder.as_ref().ok_or_else(|| Error::MissingTensor("decoder.embed".into()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState<T> {
    pub h: Vec<Vec<T>>,
    pub c: Vec<Vec<T>>,
}

/// Encoder outputs plus their precomputed attention keys.
pub struct DecoderContext<T> {
    pub memory: Mat<T>,
    keys: Mat<T>,
}

impl<T: Real> DecoderContext<T> {
    pub fn new(memory: Mat<T>, params: &Parameters<T>) -> Result<Self> {
        let dec = decoder_of(params)?;
        if memory.rows == 0 {
            return Err(Error::invalid("decoder needs at least one encoder output"));
        }
        let keys = memory.matmul(&dec.attn_key);
        Ok(DecoderContext { memory, keys })
    }

    /// Both layers start from `tanh(cls · W + b)`; cell states start at zero.
    pub fn initial_state(&self, params: &Parameters<T>) -> Result<DecoderState<T>> {
        let dec = decoder_of(params)?;
        let mut s = vec_mat(self.memory.row(0), &dec.init.weight);
        add_to(&mut s, &dec.init.bias.data);
        let h: Vec<T> = s.iter().map(|x| x.tanh()).collect();
        let hid = dec.config.hidden;
        Ok(DecoderState { h: vec![h; dec.config.layers], c: vec![vec![T::zero(); hid]; dec.config.layers] })
    }
}

struct CellCache<T> {
    x: Vec<T>,
    h_prev: Vec<T>,
    c_prev: Vec<T>,
    gates: Vec<T>,
    tanh_c: Vec<T>,
}

struct StepCache<T> {
    token: usize,
    cells: Vec<CellCache<T>>,
    u: Mat<T>,
    alpha: Vec<T>,
    concat: Vec<T>,
    probs: Vec<T>,
}

fn lstm_cell<T: Real>(x: &[T], h: &[T], c: &[T], w: &super::LstmLayer<T>) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let hid = h.len();
    let mut z = vec_mat(x, &w.wx);
    add_to(&mut z, &vec_mat(h, &w.wh));
    add_to(&mut z, &w.bias.data);
    for (k, v) in z.iter_mut().enumerate() {
        *v = if (2 * hid..3 * hid).contains(&k) { v.tanh() } else { sigmoid(*v) };
    }
    let mut c_new = vec![T::zero(); hid];
    let mut tanh_c = vec![T::zero(); hid];
    let mut h_new = vec![T::zero(); hid];
    for j in 0..hid {
        let (i, f, g, o) = (z[j], z[hid + j], z[2 * hid + j], z[3 * hid + j]);
        c_new[j] = f * c[j] + i * g;
        tanh_c[j] = c_new[j].tanh();
        h_new[j] = o * tanh_c[j];
    }
    (h_new, c_new, z, tanh_c)
}

fn step_forward<T: Real>(
    dec: &DecoderParams<T>,
    ctx: &DecoderContext<T>,
    prev: u32,
    state: &DecoderState<T>,
) -> Result<(Vec<T>, DecoderState<T>, StepCache<T>)> {
    let v = prev as usize;
    if v >= dec.embed.rows {
        return Err(Error::IdOutOfRange { id: prev, size: dec.embed.rows });
    }
    let mut x = dec.embed.row(v).to_vec();
    let mut cells = Vec::with_capacity(dec.lstm.len());
    let mut next = DecoderState { h: Vec::new(), c: Vec::new() };
    for (l, w) in dec.lstm.iter().enumerate() {
        let (h, c, gates, tanh_c) = lstm_cell(&x, &state.h[l], &state.c[l], w);
        cells.push(CellCache { x, h_prev: state.h[l].clone(), c_prev: state.c[l].clone(), gates, tanh_c });
        x = h.clone();
        next.h.push(h);
        next.c.push(c);
    }
    let top = x;
    let query = vec_mat(&top, &dec.attn_query);
    let (rows, a) = ctx.keys.shape();
    let mut u = Mat::zeros(rows, a);
    let mut scores = vec![T::zero(); rows];
    for j in 0..rows {
        let ur = u.row_mut(j);
        for k in 0..a {
            ur[k] = (ctx.keys.at(j, k) + query[k]).tanh();
        }
        scores[j] = super::tensor::dot(ur, &dec.attn_score.data);
    }
    let mut alpha = scores;
    softmax_in_place(&mut alpha);
    let mut concat = top;
    let mut context = vec![T::zero(); ctx.memory.cols];
    for j in 0..rows {
        for (o, &m) in context.iter_mut().zip(ctx.memory.row(j)) {
            *o += alpha[j] * m;
        }
    }
    concat.extend(context);
    let mut logits = vec_mat(&concat, &dec.out.weight);
    add_to(&mut logits, &dec.out.bias.data);
    let mut probs = logits;
    softmax_in_place(&mut probs);
    let cache = StepCache { token: v, cells, u, alpha, concat, probs: probs.clone() };
    Ok((probs, next, cache))
}

/// One decoding step: distribution over the output vocabulary and the new state.
pub fn decode_step<T: Real>(
    prev: u32,
    state: &DecoderState<T>,
    ctx: &DecoderContext<T>,
    params: &Parameters<T>,
) -> Result<(Vec<T>, DecoderState<T>)> {
    let (p, s, _) = step_forward(decoder_of(params)?, ctx, prev, state)?;
    Ok((p, s))
}

/// Teacher-forced negative log-likelihood of `targets` (which should end with
/// the end token). Adds decoder gradients to `grads` when given and returns
/// the loss together with `dL/dmemory`.
pub fn sequence_loss<T: Real>(
    memory: &Mat<T>,
    start: u32,
    targets: &[u32],
    params: &Parameters<T>,
    grads: Option<&mut Parameters<T>>,
) -> Result<(T, Mat<T>)> {
    let dec = decoder_of(params)?;
    if targets.is_empty() {
        return Err(Error::invalid("empty target sequence"));
    }
    let ctx = DecoderContext::new(memory.clone(), params)?;
    let init = ctx.initial_state(params)?;
    let mut state = init.clone();
    let mut caches = Vec::with_capacity(targets.len());
    let mut loss = T::zero();
    let mut prev = start;
    for &t in targets {
        let (probs, next, cache) = step_forward(dec, &ctx, prev, &state)?;
        let p = *probs.get(t as usize).ok_or(Error::IdOutOfRange { id: t, size: probs.len() })?;
        loss -= p.max(T::min_positive_value()).ln();
        caches.push(cache);
        state = next;
        prev = t;
    }
    let Some(grads) = grads else {
        return Ok((loss, Mat::zeros(memory.rows, memory.cols)));
    };
    let g = grads.decoder.as_mut().ok_or_else(|| Error::MissingTensor("decoder.embed".into()))?;
    let hid = dec.config.hidden;
    let layers = dec.lstm.len();
    let mut d_memory = Mat::zeros(memory.rows, memory.cols);
    let mut d_keys = Mat::zeros(ctx.keys.rows, ctx.keys.cols);
    let mut dh_next = vec![vec![T::zero(); hid]; layers];
    let mut dc_next = vec![vec![T::zero(); hid]; layers];
    for (step, cache) in caches.iter().enumerate().rev() {
        let mut d_logits = cache.probs.clone();
        d_logits[targets[step] as usize] -= T::one();
        outer_acc(&cache.concat, &d_logits, &mut g.out.weight);
        add_to(&mut g.out.bias.data, &d_logits);
        let d_concat = vec_mat_t(&d_logits, &dec.out.weight);
        let (d_top_out, d_context) = d_concat.split_at(hid);

        let rows = ctx.memory.rows;
        let mut d_alpha = vec![T::zero(); rows];
        for j in 0..rows {
            d_alpha[j] = super::tensor::dot(d_context, ctx.memory.row(j));
            for (o, &x) in d_memory.row_mut(j).iter_mut().zip(d_context) {
                *o += cache.alpha[j] * x;
            }
        }
        let s: T = cache.alpha.iter().zip(&d_alpha).map(|(&a, &b)| a * b).sum();
        let mut d_query = vec![T::zero(); dec.config.attention];
        for j in 0..rows {
            let de = cache.alpha[j] * (d_alpha[j] - s);
            let ur = cache.u.row(j);
            for k in 0..ur.len() {
                g.attn_score.data[k] += de * ur[k];
                let dpre = de * dec.attn_score.data[k] * (T::one() - ur[k] * ur[k]);
                d_keys.data[j * ur.len() + k] += dpre;
                d_query[k] += dpre;
            }
        }
        let top_h = &cache.concat[..hid];
        outer_acc(top_h, &d_query, &mut g.attn_query);
        let mut d_h_above: Vec<T> = vec_mat_t(&d_query, &dec.attn_query);
        add_to(&mut d_h_above, d_top_out);

        for l in (0..layers).rev() {
            let cc = &cache.cells[l];
            let w = &dec.lstm[l];
            let mut dh = d_h_above.clone();
            add_to(&mut dh, &dh_next[l]);
            let gt = &cc.gates;
            let mut dz = vec![T::zero(); 4 * hid];
            let mut dc_prev = vec![T::zero(); hid];
            for j in 0..hid {
                let (i, f, gg, o) = (gt[j], gt[hid + j], gt[2 * hid + j], gt[3 * hid + j]);
                let tc = cc.tanh_c[j];
                let dc = dc_next[l][j] + dh[j] * o * (T::one() - tc * tc);
                let (di, df, dg, d_o) = (dc * gg, dc * cc.c_prev[j], dc * i, dh[j] * tc);
                dz[j] = di * i * (T::one() - i);
                dz[hid + j] = df * f * (T::one() - f);
                dz[2 * hid + j] = dg * (T::one() - gg * gg);
                dz[3 * hid + j] = d_o * o * (T::one() - o);
                dc_prev[j] = dc * f;
            }
            let gl = &mut g.lstm[l];
            outer_acc(&cc.x, &dz, &mut gl.wx);
            outer_acc(&cc.h_prev, &dz, &mut gl.wh);
            add_to(&mut gl.bias.data, &dz);
            dh_next[l] = vec_mat_t(&dz, &w.wh);
            dc_next[l] = dc_prev;
            let dx = vec_mat_t(&dz, &w.wx);
            if l == 0 {
                add_to(g.embed.row_mut(cache.token), &dx);
            } else {
                d_h_above = dx;
            }
        }
    }
    // Keys were computed as memory · attn_key.
    memory.t_matmul_acc(&d_keys, &mut g.attn_key);
    d_memory.add_assign(&d_keys.matmul_t(&dec.attn_key));
    // Initial hidden state feeds every layer from the same projection.
    let mut ds = vec![T::zero(); hid];
    for l in 0..layers {
        for j in 0..hid {
            let h0 = init.h[l][j];
            ds[j] += dh_next[l][j] * (T::one() - h0 * h0);
        }
    }
    outer_acc(memory.row(0), &ds, &mut g.init.weight);
    add_to(&mut g.init.bias.data, &ds);
    add_to(d_memory.row_mut(0), &vec_mat_t(&ds, &dec.init.weight));
    Ok((loss, d_memory))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis<T> {
    pub tokens: Vec<u32>,
    pub log_prob: T,
    /// `log_prob / len(tokens)`, the ranking key.
    pub score: T,
}

fn rank<T: Real>(a: &Hypothesis<T>, b: &Hypothesis<T>) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Length-normalized beam search. Returns up to `beam_width` hypotheses,
/// best first. Hypotheses stop at `end` (kept in the sequence) or `max_steps`.
pub fn beam_search<T: Real>(
    ctx: &DecoderContext<T>,
    start: u32,
    end: Option<u32>,
    beam_width: usize,
    max_steps: usize,
    params: &Parameters<T>,
) -> Result<Vec<Hypothesis<T>>> {
    if beam_width == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    let dec = decoder_of(params)?;
    struct Beam<T> {
        hyp: Hypothesis<T>,
        state: DecoderState<T>,
        done: bool,
    }
    let mut beams = vec![Beam {
        hyp: Hypothesis { tokens: Vec::new(), log_prob: T::zero(), score: T::zero() },
        state: ctx.initial_state(params)?,
        done: false,
    }];
    for _ in 0..max_steps {
        if beams.iter().all(|b| b.done) {
            break;
        }
        let mut candidates: Vec<(Hypothesis<T>, usize, bool)> = Vec::new();
        let mut states = Vec::with_capacity(beams.len());
        for (bi, beam) in beams.iter().enumerate() {
            if beam.done {
                candidates.push((beam.hyp.clone(), bi, true));
                states.push(None);
                continue;
            }
            let prev = beam.hyp.tokens.last().copied().unwrap_or(start);
            let (probs, next, _) = step_forward(dec, ctx, prev, &beam.state)?;
            states.push(Some(next));
            let logits: Vec<T> = probs.iter().map(|p| p.max(T::min_positive_value()).ln()).collect();
            let norm = log_sum_exp(&logits);
            for (tok, &lp) in logits.iter().enumerate() {
                let mut tokens = beam.hyp.tokens.clone();
                tokens.push(tok as u32);
                let log_prob = beam.hyp.log_prob + lp - norm;
                let score = log_prob / super::tensor::lit(tokens.len() as f64);
                candidates.push((Hypothesis { tokens, log_prob, score }, bi, end == Some(tok as u32)));
            }
        }
        candidates.sort_by(|a, b| rank(&a.0, &b.0));
        candidates.truncate(beam_width);
        beams = candidates
            .into_iter()
            .map(|(hyp, bi, done)| {
                let state = match &states[bi] {
                    Some(s) if !beams[bi].done => s.clone(),
                    _ => beams[bi].state.clone(),
                };
                Beam { hyp, state, done }
            })
            .collect();
    }
    let mut out: Vec<Hypothesis<T>> = beams.into_iter().map(|b| b.hyp).collect();
    out.sort_by(rank);
    Ok(out)
}

/// Picks the most likely token at each step.
pub fn greedy_decode<T: Real>(
    ctx: &DecoderContext<T>,
    start: u32,
    end: Option<u32>,
    max_steps: usize,
    params: &Parameters<T>,
) -> Result<Vec<u32>> {
    let dec = decoder_of(params)?;
    let mut state = ctx.initial_state(params)?;
    let mut prev = start;
    let mut out = Vec::new();
    for _ in 0..max_steps {
        let (probs, next, _) = step_forward(dec, ctx, prev, &state)?;
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        out.push(best as u32);
        state = next;
        prev = best as u32;
        if end == Some(prev) {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecoderConfig, EncoderConfig};

    fn model(seed: u64, vocab: usize) -> Parameters<f64> {
        Parameters::init(EncoderConfig::tiny(20), seed)
            .unwrap()
            .with_decoder(DecoderConfig::new(6, vocab), seed + 1)
            .unwrap()
    }

    #[test]
    fn identical_rows_attend_uniformly() {
        let p = model(1, 5);
        let mem = Mat::from_vec(4, 8, (0..4).flat_map(|_| (0..8).map(|k| k as f64 * 0.1)).collect());
        let ctx = DecoderContext::new(mem, &p).unwrap();
        let s = ctx.initial_state(&p).unwrap();
        let (_, _, cache) = step_forward(p.decoder.as_ref().unwrap(), &ctx, 0, &s).unwrap();
        assert!(cache.alpha.iter().all(|&a| (a - 0.25).abs() < 1e-12));
        let (p1, s1) = decode_step(2, &s, &ctx, &p).unwrap();
        let (p2, s2) = decode_step(2, &s, &ctx, &p).unwrap();
        assert_eq!((p1.clone(), s1), (p2, s2));
        assert!((p1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..10 {
            let p = model(seed, 7);
            let mem = Mat::from_vec(3, 8, (0..24).map(|k| ((k * 7 + seed as usize) % 11) as f64 * 0.2 - 1.0).collect());
            let ctx = DecoderContext::new(mem, &p).unwrap();
            let g = greedy_decode(&ctx, 0, Some(1), 6, &p).unwrap();
            let b = beam_search(&ctx, 0, Some(1), 1, 6, &p).unwrap();
            assert_eq!(b[0].tokens, g);
        }
    }

    #[test]
    fn scores_are_sorted() {
        let p = model(4, 6);
        let mem = Mat::from_vec(2, 8, (0..16).map(|k| k as f64 * 0.05).collect());
        let ctx = DecoderContext::new(mem, &p).unwrap();
        let b = beam_search(&ctx, 0, Some(2), 5, 4, &p).unwrap();
        assert_eq!(b.len(), 5);
        assert!(b.windows(2).all(|w| w[0].score >= w[1].score));
    }
}
