//! Straight-line reference implementations compared against the library kernels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasmrev_core::model::decoder::{decode_step, DecoderContext};
use wasmrev_core::model::encoder::{embed, encode_input, LN_EPS};
use wasmrev_core::model::{LayerNorm, Linear, Mat};
use wasmrev_core::tokenizer::{encode_parts, EncodedInput};
use wasmrev_core::{DecoderConfig, EncoderConfig, Parameters, Segment};

type M = Vec<Vec<f64>>;

fn rows(m: &Mat<f64>) -> M {
    (0..m.rows).map(|r| m.row(r).to_vec()).collect()
}

fn linear(x: &M, l: &Linear<f64>) -> M {
    let w = rows(&l.weight);
    x.iter()
        .map(|xr| {
            (0..w[0].len())
                .map(|j| l.bias.data[j] + (0..xr.len()).map(|i| xr[i] * w[i][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn norm(x: &M, ln: &LayerNorm<f64>) -> M {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) / (var + LN_EPS).sqrt() * ln.gamma.data[c] + ln.beta.data[c])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn reference_embed(input: &EncodedInput, p: &Parameters<f64>) -> M {
    (0..input.len())
        .map(|i| {
            let t = p.token_emb.row(input.token_ids[i] as usize);
            let q = p.pos_emb.row(input.position_ids[i] as usize);
            let s = p.seg_emb.row(input.segment_ids[i] as usize);
            (0..t.len()).map(|c| t[c] + q[c] + s[c]).collect()
        })
        .collect()
}

fn reference_encoder(input: &EncodedInput, p: &Parameters<f64>) -> M {
    let heads = p.config.heads;
    let d = p.config.hidden / heads;
    let mut x = norm(&reference_embed(input, p), &p.emb_norm);
    for layer in &p.layers {
        let (q, k, v) = (linear(&x, &layer.query), linear(&x, &layer.key), linear(&x, &layer.value));
        let n = x.len();
        let mut ctx = vec![vec![0.0; p.config.hidden]; n];
        for h in 0..heads {
            let cols = h * d..(h + 1) * d;
            for i in 0..n {
                let scores: Vec<Option<f64>> = (0..n)
                    .map(|j| {
                        input.attention_mask[j]
                            .then(|| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
                    })
                    .collect();
                let max = scores.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let z: f64 = scores.iter().flatten().map(|s| (s - max).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    if let Some(s) = s {
                        let a = (s - max).exp() / z;
                        for c in cols.clone() {
                            ctx[i][c] += a * v[j][c];
                        }
                    }
                }
            }
        }
        let mid = norm(&add(&linear(&ctx, &layer.output), &x), &layer.attn_norm);
        let inner: M = linear(&mid, &layer.ffn_in).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
        x = norm(&add(&linear(&inner, &layer.ffn_out), &mid), &layer.ffn_norm);
    }
    x
}

fn random_input(rng: &mut ChaCha8Rng, vocab: usize, pad_to: usize) -> EncodedInput {
    let mut ids = |n: usize| (0..n).map(|_| rng.gen_range(7..vocab as u32)).collect::<Vec<_>>();
    let input = encode_parts(&[(Segment::Nl, ids(3)), (Segment::Pl, ids(4)), (Segment::Wasm, ids(5))], 64).unwrap();
    input.padded(pad_to)
}

fn max_diff(a: &M, b: &Mat<f64>) -> f64 {
    a.iter().enumerate().flat_map(|(r, row)| row.iter().enumerate().map(move |(c, v)| (v - b.at(r, c)).abs())).fold(0.0, f64::max)
}

#[test]
fn embedding_matches_table_sum() {
    let p = Parameters::<f64>::init(EncoderConfig::tiny(40), 1).unwrap();
    let input = random_input(&mut ChaCha8Rng::seed_from_u64(1), 40, 20);
    let got = embed(&input, &p).unwrap();
    assert!(max_diff(&reference_embed(&input, &p), &got) < 1e-12);
}

#[test]
fn encoder_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..5 {
        let mut config = EncoderConfig::tiny(40);
        config.layers = 1 + seed as usize % 3;
        let p = Parameters::<f64>::init(config, seed).unwrap();
        let input = random_input(&mut rng, 40, 18 + seed as usize);
        let got = encode_input(&input, &p).unwrap();
        let want = reference_encoder(&input, &p);
        assert!(max_diff(&want, &got) < 1e-10, "seed {seed}");
    }
}

#[test]
fn padding_content_does_not_leak() {
    let p = Parameters::<f64>::init(EncoderConfig::tiny(40), 3).unwrap();
    let input = random_input(&mut ChaCha8Rng::seed_from_u64(3), 40, 24);
    let mut other = input.clone();
    for i in 0..other.len() {
        if !other.attention_mask[i] {
            other.token_ids[i] = 39;
            other.segment_ids[i] = 2;
        }
    }
    let a = encode_input(&input, &p).unwrap();
    let b = encode_input(&other, &p).unwrap();
    for i in (0..input.len()).filter(|&i| input.attention_mask[i]) {
        assert_eq!(a.row(i), b.row(i));
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn vec_mat(x: &[f64], w: &Mat<f64>) -> Vec<f64> {
    (0..w.cols).map(|j| (0..x.len()).map(|i| x[i] * w.at(i, j)).sum()).collect()
}

#[test]
fn decoder_step_matches_reference() {
    let p = Parameters::<f64>::init(EncoderConfig::tiny(30), 4)
        .unwrap()
        .with_decoder(DecoderConfig::new(5, 11), 5)
        .unwrap();
    let dec = p.decoder.as_ref().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let memory = Mat::from_vec(4, 8, (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let ctx = DecoderContext::new(memory.clone(), &p).unwrap();
    let state = ctx.initial_state(&p).unwrap();

    // Initial state: tanh of the projected first memory row, zero cells.
    let init: Vec<f64> = vec_mat(memory.row(0), &dec.init.weight).iter().zip(&dec.init.bias.data).map(|(a, b)| (a + b).tanh()).collect();
    for h in &state.h {
        assert!(h.iter().zip(&init).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    let (probs, next) = decode_step(7, &state, &ctx, &p).unwrap();

    let hid = 5;
    let mut x = dec.embed.row(7).to_vec();
    for (l, w) in dec.lstm.iter().enumerate() {
        let z: Vec<f64> = vec_mat(&x, &w.wx)
            .iter()
            .zip(vec_mat(&state.h[l], &w.wh))
            .zip(&w.bias.data)
            .map(|((a, b), c)| a + b + c)
            .collect();
        let (i, f, g, o) = (&z[..hid], &z[hid..2 * hid], &z[2 * hid..3 * hid], &z[3 * hid..]);
        let c: Vec<f64> = (0..hid).map(|j| sigmoid(f[j]) * state.c[l][j] + sigmoid(i[j]) * g[j].tanh()).collect();
        let h: Vec<f64> = (0..hid).map(|j| sigmoid(o[j]) * c[j].tanh()).collect();
        assert!(c.iter().zip(&next.c[l]).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(h.iter().zip(&next.h[l]).all(|(a, b)| (a - b).abs() < 1e-12));
        x = h;
    }
    let q = vec_mat(&x, &dec.attn_query);
    let keys: Vec<Vec<f64>> = (0..4).map(|r| vec_mat(memory.row(r), &dec.attn_key)).collect();
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| k.iter().zip(&q).map(|(a, b)| (a + b).tanh()).zip(&dec.attn_score.data).map(|(u, s)| u * s).sum())
        .collect();
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    let alpha: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
    let mut concat = x.clone();
    concat.extend((0..8).map(|c| (0..4).map(|r| alpha[r] * memory.at(r, c)).sum::<f64>()));
    let logits: Vec<f64> = vec_mat(&concat, &dec.out.weight).iter().zip(&dec.out.bias.data).map(|(a, b)| a + b).collect();
    let zl: f64 = logits.iter().map(|l| l.exp()).sum();
    for (got, l) in probs.iter().zip(&logits) {
        assert!((got - l.exp() / zl).abs() < 1e-12);
    }
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
