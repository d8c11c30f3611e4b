//! Shared fixtures for the benchmarks.

use wasmrev_core::corpus::{corpus_vocabulary, gen_synthetic_corpus};
use wasmrev_core::model::Mat;
use wasmrev_core::pretrain::EncodedSample;
use wasmrev_core::tokenizer::EncodedInput;
use wasmrev_core::{DecoderConfig, EncoderConfig, Parameters};

pub struct Fixture {
    pub params: Parameters<f32>,
    pub samples: Vec<EncodedSample>,
    pub vocab_size: usize,
}

/// Deterministic pseudo-random matrix; cheap enough to rebuild per benchmark.
pub fn filled(rows: usize, cols: usize, seed: u64) -> Mat<f32> {
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let data = (0..rows * cols)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 40) as f32 / (1u64 << 24) as f32 - 0.5
        })
        .collect();
    Mat::from_vec(rows, cols, data)
}

/// A small encoder with a decoder attached, plus a batch of encoded samples.
pub fn fixture(layers: usize, hidden: usize, heads: usize) -> Fixture {
    let vocab = corpus_vocabulary(&gen_synthetic_corpus(128, 1), 2000, 4000, 1).expect("vocabulary");
    let config = EncoderConfig {
        layers,
        hidden,
        heads,
        max_positions: 512,
        vocab_size: vocab.len(),
        segments: 3,
        dropout: 0.1,
        ffn_multiplier: 4,
    };
    let params = Parameters::init(config, 7)
        .and_then(|p| p.with_decoder(DecoderConfig::new(hidden, 32), 8))
        .expect("parameters");
    let samples = gen_synthetic_corpus(16, 2).iter().map(|s| EncodedSample::new(s, &vocab)).collect();
    Fixture { params, samples, vocab_size: vocab.len() }
}

impl Fixture {
    pub fn input(&self, i: usize) -> EncodedInput {
        self.samples[i % self.samples.len()].triplet(512).expect("triplet")
    }
}
