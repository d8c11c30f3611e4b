//! Transformer encoder, task heads, attention decoder and losses, with
//! hand-written backward passes for every parameter.

pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod gradcheck;
pub mod heads;
pub mod loss;
pub mod objectives;
pub mod tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use tensor::{Mat, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub segments: usize,
    pub dropout: f64,
    pub ffn_multiplier: usize,
}

impl EncoderConfig {
    /// 8 layers, 128 hidden, 8 heads, 512 positions, dropout 0.1.
    pub fn full(vocab_size: usize) -> Self {
        EncoderConfig {
            layers: 8,
            hidden: 128,
            heads: 8,
            max_positions: 512,
            vocab_size,
            segments: 3,
            dropout: 0.1,
            ffn_multiplier: 4,
        }
    }

    /// Smallest useful configuration, for gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        EncoderConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            max_positions: 64,
            vocab_size,
            segments: 3,
            dropout: 0.0,
            ffn_multiplier: 2,
        }
    }

    pub fn ffn_dim(&self) -> usize {
        self.hidden * self.ffn_multiplier
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!("hidden {} not divisible by heads {}", self.hidden, self.heads)));
        }
        if self.layers == 0 || self.vocab_size == 0 || self.max_positions == 0 || self.segments == 0 {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Two stacked recurrent layers with additive attention over encoder outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub embed: usize,
    pub attention: usize,
    pub vocab_size: usize,
}

impl DecoderConfig {
    pub fn new(hidden: usize, vocab_size: usize) -> Self {
        DecoderConfig { layers: 2, hidden, embed: hidden, attention: hidden, vocab_size }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers != 2 {
            return Err(Error::invalid("decoder uses exactly 2 recurrent layers"));
        }
        if self.vocab_size == 0 || self.hidden == 0 || self.embed == 0 || self.attention == 0 {
            return Err(Error::invalid("decoder dimensions must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `in × out`
    pub weight: Mat<T>,
    /// `1 × out`
    pub bias: Mat<T>,
}

impl<T: Real> Linear<T> {
    fn zeros(input: usize, output: usize) -> Self {
        Linear { weight: Mat::zeros(input, output), bias: Mat::zeros(1, output) }
    }

    pub fn forward(&self, x: &Mat<T>) -> Mat<T> {
        let mut y = x.matmul(&self.weight);
        y.add_row_broadcast(&self.bias.data);
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, x: &Mat<T>, dy: &Mat<T>, grad: &mut Linear<T>) -> Mat<T> {
        x.t_matmul_acc(dy, &mut grad.weight);
        dy.col_sum_acc(&mut grad.bias.data);
        dy.matmul_t(&self.weight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Mat<T>,
    pub beta: Mat<T>,
}

impl<T: Real> LayerNorm<T> {
    fn identity(dim: usize) -> Self {
        LayerNorm { gamma: Mat::from_vec(1, dim, vec![T::one(); dim]), beta: Mat::zeros(1, dim) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub attn_norm: LayerNorm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub ffn_norm: LayerNorm<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer<T> {
    /// `in × 4h`, gate order input, forget, cell, output.
    pub wx: Mat<T>,
    /// `h × 4h`
    pub wh: Mat<T>,
    pub bias: Mat<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T> {
    pub config: DecoderConfig,
    pub embed: Mat<T>,
    pub lstm: Vec<LstmLayer<T>>,
    /// Projects the pooled `[CLS]` vector to the initial recurrent state.
    pub init: Linear<T>,
    pub attn_query: Mat<T>,
    pub attn_key: Mat<T>,
    pub attn_score: Mat<T>,
    /// `[recurrent output; context] → vocabulary`
    pub out: Linear<T>,
}

/// All trainable tensors. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T> {
    pub config: EncoderConfig,
    pub token_emb: Mat<T>,
    pub pos_emb: Mat<T>,
    pub seg_emb: Mat<T>,
    pub emb_norm: LayerNorm<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub mlm: Linear<T>,
    pub rii: Linear<T>,
    pub classifier: Option<Linear<T>>,
    pub decoder: Option<DecoderParams<T>>,
}

fn xavier<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| tensor::lit(rng.gen_range(-limit..limit))).collect())
}

fn xavier_linear<T: Real>(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Linear<T> {
    Linear { weight: xavier(rng, input, output), bias: Mat::zeros(1, output) }
}

impl<T: Real> DecoderParams<T> {
    pub fn init(config: DecoderConfig, encoder_hidden: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let lstm = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { config.embed } else { h };
                let mut bias = Mat::zeros(1, 4 * h);
                // Forget-gate bias starts at 1.
                bias.data[h..2 * h].iter_mut().for_each(|b| *b = T::one());
                LstmLayer { wx: xavier(&mut rng, input, 4 * h), wh: xavier(&mut rng, h, 4 * h), bias }
            })
            .collect();
        Ok(DecoderParams {
            embed: xavier(&mut rng, config.vocab_size, config.embed),
            lstm,
            init: xavier_linear(&mut rng, encoder_hidden, h),
            attn_query: xavier(&mut rng, h, config.attention),
            attn_key: xavier(&mut rng, encoder_hidden, config.attention),
            attn_score: xavier(&mut rng, 1, config.attention),
            out: xavier_linear(&mut rng, h + encoder_hidden, config.vocab_size),
            config,
        })
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, m| m.fill_zero());
        z
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        f(format!("{prefix}.embed"), &self.embed);
        for (i, l) in self.lstm.iter().enumerate() {
            f(format!("{prefix}.lstm{i}.wx"), &l.wx);
            f(format!("{prefix}.lstm{i}.wh"), &l.wh);
            f(format!("{prefix}.lstm{i}.bias"), &l.bias);
        }
        f(format!("{prefix}.init.weight"), &self.init.weight);
        f(format!("{prefix}.init.bias"), &self.init.bias);
        f(format!("{prefix}.attn.query"), &self.attn_query);
        f(format!("{prefix}.attn.key"), &self.attn_key);
        f(format!("{prefix}.attn.score"), &self.attn_score);
        f(format!("{prefix}.out.weight"), &self.out.weight);
        f(format!("{prefix}.out.bias"), &self.out.bias);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
        let prefix = "decoder";
        f(format!("{prefix}.embed"), &mut self.embed);
        for (i, l) in self.lstm.iter_mut().enumerate() {
            f(format!("{prefix}.lstm{i}.wx"), &mut l.wx);
            f(format!("{prefix}.lstm{i}.wh"), &mut l.wh);
            f(format!("{prefix}.lstm{i}.bias"), &mut l.bias);
        }
        f(format!("{prefix}.init.weight"), &mut self.init.weight);
        f(format!("{prefix}.init.bias"), &mut self.init.bias);
        f(format!("{prefix}.attn.query"), &mut self.attn_query);
        f(format!("{prefix}.attn.key"), &mut self.attn_key);
        f(format!("{prefix}.attn.score"), &mut self.attn_score);
        f(format!("{prefix}.out.weight"), &mut self.out.weight);
        f(format!("{prefix}.out.bias"), &mut self.out.bias);
    }
}

/// Tensor names that belong to the pre-trained encoder (embeddings and layers).
pub fn is_encoder_tensor(name: &str) -> bool {
    name.starts_with("embeddings.") || name.starts_with("encoder.")
}

/// Tensors subject to the squared-norm penalty and to decoupled weight decay:
/// everything except embedding tables and layer-norm parameters.
pub fn is_decay_eligible(name: &str) -> bool {
    !(name.starts_with("embeddings.") || name.contains("norm.") || name == "decoder.embed")
}

impl<T: Real> Parameters<T> {
    /// Xavier-uniform weights, zero biases, unit layer-norm scales.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let f = config.ffn_dim();
        let layers = (0..config.layers)
            .map(|_| EncoderLayer {
                query: xavier_linear(&mut rng, h, h),
                key: xavier_linear(&mut rng, h, h),
                value: xavier_linear(&mut rng, h, h),
                output: xavier_linear(&mut rng, h, h),
                attn_norm: LayerNorm::identity(h),
                ffn_in: xavier_linear(&mut rng, h, f),
                ffn_out: xavier_linear(&mut rng, f, h),
                ffn_norm: LayerNorm::identity(h),
            })
            .collect();
        Ok(Parameters {
            token_emb: xavier(&mut rng, config.vocab_size, h),
            pos_emb: xavier(&mut rng, config.max_positions, h),
            seg_emb: xavier(&mut rng, config.segments, h),
            emb_norm: LayerNorm::identity(h),
            layers,
            mlm: xavier_linear(&mut rng, h, config.vocab_size),
            rii: xavier_linear(&mut rng, h, 2),
            classifier: None,
            decoder: None,
            config,
        })
    }

    pub fn with_classifier(mut self, n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::invalid("classifier needs at least 2 classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.classifier = Some(xavier_linear(&mut rng, self.config.hidden, n_classes));
        Ok(self)
    }

    pub fn with_decoder(mut self, config: DecoderConfig, seed: u64) -> Result<Self> {
        self.decoder = Some(DecoderParams::init(config, self.config.hidden, seed)?);
        Ok(self)
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Mat<T>| Mat::zeros(m.rows, m.cols);
        let zl = |l: &Linear<T>| Linear::zeros(l.weight.rows, l.weight.cols);
        let zn = |n: &LayerNorm<T>| LayerNorm { gamma: z(&n.gamma), beta: z(&n.beta) };
        Parameters {
            config: self.config.clone(),
            token_emb: z(&self.token_emb),
            pos_emb: z(&self.pos_emb),
            seg_emb: z(&self.seg_emb),
            emb_norm: zn(&self.emb_norm),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayer {
                    query: zl(&l.query),
                    key: zl(&l.key),
                    value: zl(&l.value),
                    output: zl(&l.output),
                    attn_norm: zn(&l.attn_norm),
                    ffn_in: zl(&l.ffn_in),
                    ffn_out: zl(&l.ffn_out),
                    ffn_norm: zn(&l.ffn_norm),
                })
                .collect(),
            mlm: zl(&self.mlm),
            rii: zl(&self.rii),
            classifier: self.classifier.as_ref().map(zl),
            decoder: self.decoder.as_ref().map(DecoderParams::zeros_like),
        }
    }

    /// Visits every tensor with its stable name, in checkpoint order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        f("embeddings.token".into(), &self.token_emb);
        f("embeddings.position".into(), &self.pos_emb);
        f("embeddings.segment".into(), &self.seg_emb);
        f("embeddings.norm.gamma".into(), &self.emb_norm.gamma);
        f("embeddings.norm.beta".into(), &self.emb_norm.beta);
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("encoder.layer{i}");
            for (n, lin) in [("query", &l.query), ("key", &l.key), ("value", &l.value), ("output", &l.output)] {
                f(format!("{p}.attn.{n}.weight"), &lin.weight);
                f(format!("{p}.attn.{n}.bias"), &lin.bias);
            }
            f(format!("{p}.attn_norm.gamma"), &l.attn_norm.gamma);
            f(format!("{p}.attn_norm.beta"), &l.attn_norm.beta);
            f(format!("{p}.ffn.in.weight"), &l.ffn_in.weight);
            f(format!("{p}.ffn.in.bias"), &l.ffn_in.bias);
            f(format!("{p}.ffn.out.weight"), &l.ffn_out.weight);
            f(format!("{p}.ffn.out.bias"), &l.ffn_out.bias);
            f(format!("{p}.ffn_norm.gamma"), &l.ffn_norm.gamma);
            f(format!("{p}.ffn_norm.beta"), &l.ffn_norm.beta);
        }
        f("heads.mlm.weight".into(), &self.mlm.weight);
        f("heads.mlm.bias".into(), &self.mlm.bias);
        f("heads.rii.weight".into(), &self.rii.weight);
        f("heads.rii.bias".into(), &self.rii.bias);
        if let Some(c) = &self.classifier {
            f("heads.classifier.weight".into(), &c.weight);
            f("heads.classifier.bias".into(), &c.bias);
        }
        if let Some(d) = &self.decoder {
            d.visit("decoder", f);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
        f("embeddings.token".into(), &mut self.token_emb);
        f("embeddings.position".into(), &mut self.pos_emb);
        f("embeddings.segment".into(), &mut self.seg_emb);
        f("embeddings.norm.gamma".into(), &mut self.emb_norm.gamma);
        f("embeddings.norm.beta".into(), &mut self.emb_norm.beta);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("encoder.layer{i}");
            for (n, lin) in [("query", &mut l.query), ("key", &mut l.key), ("value", &mut l.value), ("output", &mut l.output)] {
                f(format!("{p}.attn.{n}.weight"), &mut lin.weight);
                f(format!("{p}.attn.{n}.bias"), &mut lin.bias);
            }
            f(format!("{p}.attn_norm.gamma"), &mut l.attn_norm.gamma);
            f(format!("{p}.attn_norm.beta"), &mut l.attn_norm.beta);
            f(format!("{p}.ffn.in.weight"), &mut l.ffn_in.weight);
            f(format!("{p}.ffn.in.bias"), &mut l.ffn_in.bias);
            f(format!("{p}.ffn.out.weight"), &mut l.ffn_out.weight);
            f(format!("{p}.ffn.out.bias"), &mut l.ffn_out.bias);
            f(format!("{p}.ffn_norm.gamma"), &mut l.ffn_norm.gamma);
            f(format!("{p}.ffn_norm.beta"), &mut l.ffn_norm.beta);
        }
        f("heads.mlm.weight".into(), &mut self.mlm.weight);
        f("heads.mlm.bias".into(), &mut self.mlm.bias);
        f("heads.rii.weight".into(), &mut self.rii.weight);
        f("heads.rii.bias".into(), &mut self.rii.bias);
        if let Some(c) = &mut self.classifier {
            f("heads.classifier.weight".into(), &mut c.weight);
            f("heads.classifier.bias".into(), &mut c.bias);
        }
        if let Some(d) = &mut self.decoder {
            d.visit_mut(f);
        }
    }

    pub fn named(&self) -> Vec<(String, &Mat<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, m| out.push((n, m)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Mat<T>)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |n, m| out.push((n, m)));
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.named().into_iter().map(|(n, _)| n).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Mat<T>> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    /// Applies `f(name, self_tensor, other_tensor)` over matching tensors.
    pub fn zip_mut(&mut self, other: &Parameters<T>, f: &mut dyn FnMut(&str, &mut Mat<T>, &Mat<T>)) {
        let others = other.named();
        let mut i = 0;
        self.visit_mut(&mut |name, m| {
            let (oname, o) = &others[i];
            debug_assert_eq!(&name, oname);
            f(&name, m, o);
            i += 1;
        });
    }

    pub fn add_assign(&mut self, other: &Parameters<T>) {
        self.zip_mut(other, &mut |_, a, b| a.add_assign(b));
    }

    pub fn scale(&mut self, s: T) {
        self.visit_mut(&mut |_, m| m.data.iter_mut().for_each(|x| *x *= s));
    }

    /// `Σ w²` over penalty-eligible tensors.
    pub fn penalty_sum_sq(&self) -> T {
        self.named().iter().filter(|(n, _)| is_decay_eligible(n)).map(|(_, m)| m.sum_sq()).sum()
    }

    /// Adds the gradient of `λ·Σ w²` (that is `2λw`) for eligible tensors.
    pub fn add_penalty_grad(&self, lambda: T, grads: &mut Parameters<T>) {
        let two = lambda + lambda;
        grads.zip_mut(self, &mut |name, g, w| {
            if is_decay_eligible(name) {
                for (gi, &wi) in g.data.iter_mut().zip(&w.data) {
                    *gi += two * wi;
                }
            }
        });
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, m) in self.named() {
            if !m.is_finite() {
                return Err(Error::NonFiniteGradient(name));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        let mut out: Parameters<U> = Parameters {
            config: self.config.clone(),
            token_emb: Mat::default(),
            pos_emb: Mat::default(),
            seg_emb: Mat::default(),
            emb_norm: LayerNorm { gamma: Mat::default(), beta: Mat::default() },
            layers: self
                .layers
                .iter()
                .map(|_| EncoderLayer {
                    query: Linear::zeros(0, 0),
                    key: Linear::zeros(0, 0),
                    value: Linear::zeros(0, 0),
                    output: Linear::zeros(0, 0),
                    attn_norm: LayerNorm::identity(0),
                    ffn_in: Linear::zeros(0, 0),
                    ffn_out: Linear::zeros(0, 0),
                    ffn_norm: LayerNorm::identity(0),
                })
                .collect(),
            mlm: Linear::zeros(0, 0),
            rii: Linear::zeros(0, 0),
            classifier: self.classifier.as_ref().map(|_| Linear::zeros(0, 0)),
            decoder: self.decoder.as_ref().map(|d| DecoderParams {
                config: d.config.clone(),
                embed: Mat::default(),
                lstm: d.lstm.iter().map(|_| LstmLayer { wx: Mat::default(), wh: Mat::default(), bias: Mat::default() }).collect(),
                init: Linear::zeros(0, 0),
                attn_query: Mat::default(),
                attn_key: Mat::default(),
                attn_score: Mat::default(),
                out: Linear::zeros(0, 0),
            }),
        };
        let src = self.named();
        let mut i = 0;
        out.visit_mut(&mut |_, m| {
            *m = src[i].1.cast();
            i += 1;
        });
        out
    }

    /// Copies every tensor whose name passes `filter` from `other`, checking shapes.
    pub fn load_from(&mut self, other: &Parameters<T>, filter: &dyn Fn(&str) -> bool) -> Result<usize> {
        let src = other.named();
        let mut copied = 0;
        let mut err = None;
        self.visit_mut(&mut |name, m| {
            if err.is_some() || !filter(&name) {
                return;
            }
            match src.iter().find(|(n, _)| *n == name) {
                Some((_, s)) if s.shape() == m.shape() => {
                    m.data.copy_from_slice(&s.data);
                    copied += 1;
                }
                Some((_, s)) => {
                    err = Some(Error::ShapeMismatch { name: name.clone(), expected: m.shape(), found: s.shape() });
                }
                None => err = Some(Error::MissingTensor(name.clone())),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(copied),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_stable() {
        let p: Parameters<f64> = Parameters::init(EncoderConfig::tiny(20), 0)
            .unwrap()
            .with_classifier(3, 1)
            .unwrap()
            .with_decoder(DecoderConfig::new(6, 9), 2)
            .unwrap();
        let names = p.names();
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert_eq!(names[0], "embeddings.token");
        assert!(names.contains(&"decoder.lstm1.wh".to_string()));
        assert_eq!(p.zeros_like().names(), names);
        assert_eq!(p.cast::<f32>().cast::<f64>().names(), names);
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::tiny(10);
        c.heads = 3;
        assert!(c.validate().is_err());
        assert!(EncoderConfig::full(100).validate().is_ok());
    }

    #[test]
    fn penalty_eligibility() {
        assert!(!is_decay_eligible("embeddings.token"));
        assert!(!is_decay_eligible("encoder.layer0.attn_norm.gamma"));
        assert!(is_decay_eligible("encoder.layer0.attn.query.weight"));
        assert!(is_decay_eligible("heads.mlm.bias"));
    }

    #[test]
    fn load_reports_shape_mismatch() {
        let mut a: Parameters<f32> = Parameters::init(EncoderConfig::tiny(20), 0).unwrap();
        let b: Parameters<f32> = Parameters::init(EncoderConfig::tiny(21), 0).unwrap();
        match a.load_from(&b, &is_encoder_tensor) {
            Err(Error::ShapeMismatch { name, .. }) => assert_eq!(name, "embeddings.token"),
            other => panic!("{other:?}"),
        }
    }
}
