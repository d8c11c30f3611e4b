//! Pseudo-labelled batches for the three pre-training objectives: masked
//! multi-modal modelling, semantic similarity pairs, and reordering detection.

use std::collections::HashMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{MultiModalSample, OptLevel};
use crate::error::{Error, Result};
use crate::model::checkpoint::Container;
use crate::tokenizer::{encode_parts, EncodedInput, Segment, Vocabulary, MASK, NUM_SPECIALS};

pub const MASK_RATE: f64 = 0.15;
pub const MASK_TOKEN_SHARE: f64 = 0.8;
pub const RANDOM_TOKEN_SHARE: f64 = 0.1;
pub const SWAP_RATE: f64 = 0.2;

/// A sample with every modality already mapped to vocabulary ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub source_key: u64,
    pub opt_level: OptLevel,
    pub nl: Vec<u32>,
    pub pl: Vec<u32>,
    /// Ids per instruction, so instruction boundaries survive.
    pub wasm: Vec<Vec<u32>>,
}

impl EncodedSample {
    pub fn new(sample: &MultiModalSample, vocab: &Vocabulary) -> Self {
        EncodedSample {
            source_key: sample.source_key(),
            opt_level: sample.opt_level,
            nl: vocab.encode_nl(&sample.doc_tokens),
            pl: vocab.encode_tokens(&sample.source_tokens),
            wasm: sample.wasm.iter().map(|i| vocab.encode_tokens(&i.tokens())).collect(),
        }
    }

    pub fn wasm_ids(&self) -> Vec<u32> {
        self.wasm.concat()
    }

    /// `[CLS] NL [SEP] PL [SEP] Wasm [SEP]`
    pub fn triplet(&self, max_len: usize) -> Result<EncodedInput> {
        encode_parts(
            &[(Segment::Nl, self.nl.clone()), (Segment::Pl, self.pl.clone()), (Segment::Wasm, self.wasm_ids())],
            max_len,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corruption {
    pub input: EncodedInput,
    pub targets: Vec<u32>,
    pub positions: Vec<usize>,
    pub actions: Vec<MaskAction>,
}

/// Selects each maskable token with probability 0.15; selected tokens become
/// `[MASK]` (80%), a random non-special id (10%) or stay unchanged (10%).
pub fn corrupt_m3lm(input: &EncodedInput, vocab_size: usize, rng: &mut impl Rng) -> Result<Corruption> {
    let maskable = input.maskable_positions();
    if maskable.is_empty() {
        return Err(Error::invalid("input has no maskable tokens"));
    }
    if vocab_size <= NUM_SPECIALS {
        return Err(Error::invalid("vocabulary has no non-special tokens"));
    }
    let mut out = Corruption { input: input.clone(), targets: vec![], positions: vec![], actions: vec![] };
    for p in maskable {
        if rng.gen::<f64>() >= MASK_RATE {
            continue;
        }
        let r = rng.gen::<f64>();
        let action = if r < MASK_TOKEN_SHARE {
            out.input.token_ids[p] = MASK;
            MaskAction::Mask
        } else if r < MASK_TOKEN_SHARE + RANDOM_TOKEN_SHARE {
            out.input.token_ids[p] = rng.gen_range(NUM_SPECIALS as u32..vocab_size as u32);
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        out.targets.push(input.token_ids[p]);
        out.positions.push(p);
        out.actions.push(action);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct M3lmBatch {
    pub inputs: Vec<EncodedInput>,
    pub targets: Vec<Vec<u32>>,
    pub positions: Vec<Vec<usize>>,
}

impl M3lmBatch {
    pub fn num_targets(&self) -> usize {
        self.targets.iter().map(Vec::len).sum()
    }
}

pub fn build_m3lm_batch(
    samples: &[&EncodedSample],
    vocab_size: usize,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<M3lmBatch> {
    let mut batch = M3lmBatch::default();
    for s in samples {
        let c = corrupt_m3lm(&s.triplet(max_len)?, vocab_size, rng)?;
        batch.inputs.push(c.input);
        batch.targets.push(c.targets);
        batch.positions.push(c.positions);
    }
    Ok(batch)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairKind {
    NlVsWasm,
    PlVsWasm,
    NlPlVsNlWasm,
    NlPlVsPlWasm,
    TripletVsReordered,
    CrossOptimization,
}

impl PairKind {
    pub const ALL: [PairKind; 6] = [
        PairKind::NlVsWasm,
        PairKind::PlVsWasm,
        PairKind::NlPlVsNlWasm,
        PairKind::NlPlVsPlWasm,
        PairKind::TripletVsReordered,
        PairKind::CrossOptimization,
    ];

    pub fn index(self) -> usize {
        PairKind::ALL.iter().position(|&k| k == self).expect("listed")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SsiBatch {
    pub anchors: Vec<EncodedInput>,
    pub positives: Vec<EncodedInput>,
    pub kinds: Vec<PairKind>,
    pub source_ids: Vec<u64>,
}

/// Indexes samples by source function so cross-optimization positives can be found.
pub struct SiblingIndex {
    by_source: HashMap<u64, Vec<usize>>,
}

impl SiblingIndex {
    pub fn new(pool: &[EncodedSample]) -> Self {
        let mut by_source: HashMap<u64, Vec<usize>> = HashMap::new();
        for (i, s) in pool.iter().enumerate() {
            by_source.entry(s.source_key).or_default().push(i);
        }
        SiblingIndex { by_source }
    }

    /// Other samples of the same source compiled at a different level.
    pub fn siblings(&self, pool: &[EncodedSample], i: usize) -> Vec<usize> {
        let s = &pool[i];
        self.by_source[&s.source_key]
            .iter()
            .copied()
            .filter(|&j| j != i && pool[j].opt_level != s.opt_level)
            .collect()
    }
}

fn views(s: &EncodedSample, other: Option<&EncodedSample>, kind: PairKind, max_len: usize) -> Result<(EncodedInput, EncodedInput)> {
    let nl = || (Segment::Nl, s.nl.clone());
    let pl = || (Segment::Pl, s.pl.clone());
    let wasm = || (Segment::Wasm, s.wasm_ids());
    let enc = |parts: &[(Segment, Vec<u32>)]| encode_parts(parts, max_len);
    Ok(match kind {
        PairKind::NlVsWasm => (enc(&[nl()])?, enc(&[wasm()])?),
        PairKind::PlVsWasm => (enc(&[pl()])?, enc(&[wasm()])?),
        PairKind::NlPlVsNlWasm => (enc(&[nl(), pl()])?, enc(&[nl(), wasm()])?),
        PairKind::NlPlVsPlWasm => (enc(&[nl(), pl()])?, enc(&[pl(), wasm()])?),
        PairKind::TripletVsReordered => (enc(&[nl(), pl(), wasm()])?, enc(&[nl(), wasm(), pl()])?),
        PairKind::CrossOptimization => {
            let o = other.ok_or_else(|| Error::invalid("cross-optimization pair needs a sibling"))?;
            (enc(&[wasm()])?, enc(&[(Segment::Wasm, o.wasm_ids())])?)
        }
    })
}

/// Builds one positive pair per row with a uniformly drawn kind. Rows whose
/// source has no other compiled variant fall back to a kind drawn from the
/// first five.
pub fn build_ssi_batch(
    rows: &[usize],
    pool: &[EncodedSample],
    siblings: &SiblingIndex,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<SsiBatch> {
    if rows.len() < 2 {
        return Err(Error::invalid("similarity batch needs at least 2 rows"));
    }
    let first = pool[rows[0]].source_key;
    if rows.iter().all(|&r| pool[r].source_key == first) {
        return Err(Error::invalid("similarity batch rows all come from one source function"));
    }
    let mut batch = SsiBatch::default();
    for &r in rows {
        let s = &pool[r];
        let mut kind = *PairKind::ALL.choose(rng).expect("non-empty");
        let mut other = None;
        if kind == PairKind::CrossOptimization {
            let sibs = siblings.siblings(pool, r);
            match sibs.choose(rng) {
                Some(&j) => other = Some(&pool[j]),
                None => kind = *PairKind::ALL[..5].choose(rng).expect("non-empty"),
            }
        }
        let (a, p) = views(s, other, kind, max_len)?;
        batch.anchors.push(a);
        batch.positives.push(p);
        batch.kinds.push(kind);
        batch.source_ids.push(s.source_key);
    }
    Ok(batch)
}

/// Swaps instruction `first` with `first + 1`; `tokens` covers both after the swap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwapSpan {
    pub first: usize,
    pub tokens: Range<usize>,
}

/// Scans instruction boundaries left to right; each boundary is swapped with
/// probability `rate` and the next boundary is then skipped, so swapped pairs
/// never overlap. Pairs of identical instructions are left alone since swapping
/// them changes nothing.
pub fn swap_rii<I: Clone + PartialEq>(
    instrs: &[I],
    rng: &mut impl Rng,
    rate: f64,
    token_len: impl Fn(&I) -> usize,
) -> (Vec<I>, bool, Vec<SwapSpan>) {
    let mut out = instrs.to_vec();
    let mut spans = Vec::new();
    if instrs.len() < 2 {
        return (out, false, spans);
    }
    let mut i = 0;
    while i + 1 < out.len() {
        if rng.gen::<f64>() < rate && out[i] != out[i + 1] {
            out.swap(i, i + 1);
            spans.push(SwapSpan { first: i, tokens: 0..0 });
            i += 2;
        } else {
            i += 1;
        }
    }
    fill_token_ranges(&out, &mut spans, token_len);
    (out, !spans.is_empty(), spans)
}

fn fill_token_ranges<I>(instrs: &[I], spans: &mut [SwapSpan], token_len: impl Fn(&I) -> usize) {
    let mut starts = Vec::with_capacity(instrs.len() + 1);
    let mut acc = 0;
    for ins in instrs {
        starts.push(acc);
        acc += token_len(ins);
    }
    starts.push(acc);
    for s in spans {
        s.tokens = starts[s.first]..starts[s.first + 2];
    }
}

/// Re-applies the spans, restoring the original order.
pub fn unswap<I: Clone>(instrs: &[I], spans: &[SwapSpan]) -> Vec<I> {
    let mut out = instrs.to_vec();
    for s in spans.iter().rev() {
        out.swap(s.first, s.first + 1);
    }
    out
}

/// Boundaries where a swap would change the sequence.
fn swappable<I: PartialEq>(instrs: &[I]) -> Vec<usize> {
    (0..instrs.len().saturating_sub(1)).filter(|&i| instrs[i] != instrs[i + 1]).collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RiiBatch {
    pub inputs: Vec<EncodedInput>,
    pub labels: Vec<bool>,
    pub swapped_spans: Vec<Vec<SwapSpan>>,
}

/// Half the rows (rounded down) are reordered, the rest are left intact.
/// Rows meant to be reordered retry the random scan a few times and fall back
/// to a single forced swap.
pub fn build_rii_batch(samples: &[&EncodedSample], max_len: usize, rng: &mut impl Rng) -> Result<RiiBatch> {
    let n = samples.len();
    let mut labels: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
    labels.shuffle(rng);
    // Unswappable samples cannot carry label 1; trade labels where possible.
    for i in 0..n {
        if labels[i] && swappable(&samples[i].wasm).is_empty() {
            if let Some(j) = (0..n).find(|&j| !labels[j] && !swappable(&samples[j].wasm).is_empty()) {
                labels.swap(i, j);
            } else {
                labels[i] = false;
            }
        }
    }
    let mut batch = RiiBatch::default();
    for (s, &label) in samples.iter().zip(&labels) {
        let (instrs, spans) = if label {
            let mut attempt = None;
            for _ in 0..8 {
                let (out, changed, spans) = swap_rii(&s.wasm, rng, SWAP_RATE, Vec::len);
                if changed {
                    attempt = Some((out, spans));
                    break;
                }
            }
            attempt.unwrap_or_else(|| {
                let at = *swappable(&s.wasm).choose(rng).expect("checked swappable");
                let mut out = s.wasm.clone();
                out.swap(at, at + 1);
                let mut spans = vec![SwapSpan { first: at, tokens: 0..0 }];
                fill_token_ranges(&out, &mut spans, Vec::len);
                (out, spans)
            })
        } else {
            (s.wasm.clone(), Vec::new())
        };
        let input = encode_parts(
            &[(Segment::Nl, s.nl.clone()), (Segment::Pl, s.pl.clone()), (Segment::Wasm, instrs.concat())],
            max_len,
        )?;
        batch.inputs.push(input);
        batch.labels.push(label);
        batch.swapped_spans.push(spans);
    }
    Ok(batch)
}

fn push_input(c: &mut Container, prefix: &str, x: &EncodedInput) {
    let n = x.len();
    c.push_i32(format!("{prefix}.tokens"), 1, n, x.token_ids.iter().map(|&v| v as i32).collect());
    c.push_i32(format!("{prefix}.segments"), 1, n, x.segment_ids.iter().map(|&v| v as i32).collect());
    c.push_i32(format!("{prefix}.positions"), 1, n, x.position_ids.iter().map(|&v| v as i32).collect());
    c.push_i32(format!("{prefix}.mask"), 1, n, x.attention_mask.iter().map(|&v| v as i32).collect());
}

fn read_input(c: &Container, prefix: &str) -> Result<EncodedInput> {
    let get = |k: &str| c.i32_data(&format!("{prefix}.{k}"));
    Ok(EncodedInput {
        token_ids: get("tokens")?.iter().map(|&v| v as u32).collect(),
        segment_ids: get("segments")?.iter().map(|&v| v as u8).collect(),
        position_ids: get("positions")?.iter().map(|&v| v as u32).collect(),
        attention_mask: get("mask")?.iter().map(|&v| v != 0).collect(),
    })
}

impl M3lmBatch {
    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.set("batch", "m3lm");
        c.set("rows", self.inputs.len());
        for (i, x) in self.inputs.iter().enumerate() {
            push_input(&mut c, &format!("row{i}"), x);
            let t = &self.targets[i];
            c.push_i32(format!("row{i}.targets"), 1, t.len(), t.iter().map(|&v| v as i32).collect());
            let p = &self.positions[i];
            c.push_i32(format!("row{i}.mask_positions"), 1, p.len(), p.iter().map(|&v| v as i32).collect());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let mut b = M3lmBatch::default();
        for i in 0..c.parse::<usize>("rows")? {
            b.inputs.push(read_input(c, &format!("row{i}"))?);
            b.targets.push(c.i32_data(&format!("row{i}.targets"))?.iter().map(|&v| v as u32).collect());
            b.positions.push(c.i32_data(&format!("row{i}.mask_positions"))?.iter().map(|&v| v as usize).collect());
        }
        Ok(b)
    }
}

impl SsiBatch {
    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.set("batch", "ssi");
        c.set("rows", self.anchors.len());
        for i in 0..self.anchors.len() {
            push_input(&mut c, &format!("anchor{i}"), &self.anchors[i]);
            push_input(&mut c, &format!("positive{i}"), &self.positives[i]);
            let src = self.source_ids[i];
            c.push_i32(
                format!("row{i}.meta"),
                1,
                3,
                vec![self.kinds[i].index() as i32, src as u32 as i32, (src >> 32) as u32 as i32],
            );
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let mut b = SsiBatch::default();
        for i in 0..c.parse::<usize>("rows")? {
            b.anchors.push(read_input(c, &format!("anchor{i}"))?);
            b.positives.push(read_input(c, &format!("positive{i}"))?);
            let meta = c.i32_data(&format!("row{i}.meta"))?;
            let kind = *PairKind::ALL.get(meta[0] as usize).ok_or_else(|| Error::Container("bad pair kind".into()))?;
            b.kinds.push(kind);
            b.source_ids.push((meta[1] as u32 as u64) | ((meta[2] as u32 as u64) << 32));
        }
        Ok(b)
    }
}

impl RiiBatch {
    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.set("batch", "rii");
        c.set("rows", self.inputs.len());
        for (i, x) in self.inputs.iter().enumerate() {
            push_input(&mut c, &format!("row{i}"), x);
            c.push_i32(format!("row{i}.label"), 1, 1, vec![self.labels[i] as i32]);
            let spans: Vec<i32> = self.swapped_spans[i]
                .iter()
                .flat_map(|s| [s.first as i32, s.tokens.start as i32, s.tokens.end as i32])
                .collect();
            c.push_i32(format!("row{i}.spans"), spans.len() / 3, 3, spans);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let mut b = RiiBatch::default();
        for i in 0..c.parse::<usize>("rows")? {
            b.inputs.push(read_input(c, &format!("row{i}"))?);
            b.labels.push(c.i32_data(&format!("row{i}.label"))?[0] != 0);
            let spans = c.i32_data(&format!("row{i}.spans"))?;
            b.swapped_spans.push(
                spans
                    .chunks_exact(3)
                    .map(|s| SwapSpan { first: s[0] as usize, tokens: s[1] as usize..s[2] as usize })
                    .collect(),
            );
        }
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::corpus::gen_synthetic_corpus;
    use crate::wat::Instruction;

    fn vocab_for(samples: &[MultiModalSample]) -> Vocabulary {
        let mut frags: Vec<Vec<String>> = Vec::new();
        for s in samples {
            frags.push(s.doc_tokens.clone());
            frags.push(s.source_tokens.clone());
            frags.push(s.wasm_tokens());
        }
        Vocabulary::from_fragments(&frags)
    }

    fn pool() -> (Vec<EncodedSample>, Vocabulary) {
        let corpus = gen_synthetic_corpus(16, 4);
        let v = vocab_for(&corpus);
        (corpus.iter().map(|s| EncodedSample::new(s, &v)).collect(), v)
    }

    #[test]
    fn corruption_restores() {
        let (pool, v) = pool();
        let x = pool[0].triplet(512).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = corrupt_m3lm(&x, v.len(), &mut rng).unwrap();
        let mut restored = c.input.clone();
        for (&p, &t) in c.positions.iter().zip(&c.targets) {
            restored.token_ids[p] = t;
        }
        assert_eq!(restored, x);
        let again = corrupt_m3lm(&x, v.len(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(again, c);
        let specials_only = encode_parts(&[(Segment::Nl, vec![])], 8);
        assert!(specials_only.is_err());
    }

    #[test]
    fn fig5_swap() {
        let instrs = vec![Instruction::new("local.tee", &["1"]), Instruction::new("i32.load8_u", &[])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, label, spans) = swap_rii(&instrs, &mut rng, 1.0, Instruction::token_len);
        assert_eq!(out, vec![Instruction::new("i32.load8_u", &[]), Instruction::new("local.tee", &["1"])]);
        assert!(label);
        assert_eq!(spans, vec![SwapSpan { first: 0, tokens: 0..3 }]);
        assert_eq!(unswap(&out, &spans), instrs);
        let (same, label, _) = swap_rii(&instrs, &mut rng, 0.0, Instruction::token_len);
        assert_eq!(same, instrs);
        assert!(!label);
        let single = &instrs[..1];
        assert!(!swap_rii(single, &mut rng, 1.0, Instruction::token_len).1);
    }

    #[test]
    fn ssi_kinds_and_errors() {
        let (pool, _) = pool();
        let sib = SiblingIndex::new(&pool);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<usize> = (0..pool.len()).collect();
        let b = build_ssi_batch(&rows, &pool, &sib, 512, &mut rng).unwrap();
        for (i, k) in b.kinds.iter().enumerate() {
            match k {
                PairKind::NlVsWasm => {
                    assert!(b.anchors[i].segment_ids[1..].iter().all(|&s| s == 0));
                    assert!(b.positives[i].segment_ids[1..].iter().all(|&s| s == 2));
                }
                PairKind::TripletVsReordered => {
                    let mut segs = b.positives[i].segment_ids.clone();
                    segs.dedup();
                    assert_eq!(segs, vec![0, 2, 1]);
                }
                _ => {}
            }
        }
        // Rows 0 and 1 are two compilations of one function.
        assert!(build_ssi_batch(&[0, 1], &pool, &sib, 512, &mut rng).is_err());
        assert!(build_ssi_batch(&[0], &pool, &sib, 512, &mut rng).is_err());
    }

    #[test]
    fn rii_batch_is_balanced() {
        let (pool, _) = pool();
        let refs: Vec<&EncodedSample> = pool.iter().collect();
        let b = build_rii_batch(&refs, 512, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let ones = b.labels.iter().filter(|&&l| l).count();
        assert_eq!(ones, 8);
        for (l, s) in b.labels.iter().zip(&b.swapped_spans) {
            assert_eq!(*l, !s.is_empty());
        }
    }

    #[test]
    fn batches_round_trip_through_container() {
        let (pool, v) = pool();
        let refs: Vec<&EncodedSample> = pool.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = build_m3lm_batch(&refs, v.len(), 512, &mut rng).unwrap();
        let bytes = m.to_container().to_bytes();
        assert_eq!(M3lmBatch::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap(), m);
        let rows: Vec<usize> = (0..pool.len()).collect();
        let s = build_ssi_batch(&rows, &pool, &SiblingIndex::new(&pool), 512, &mut rng).unwrap();
        assert_eq!(SsiBatch::from_container(&s.to_container()).unwrap(), s);
        let r = build_rii_batch(&refs, 512, &mut rng).unwrap();
        assert_eq!(RiiBatch::from_container(&r.to_container()).unwrap(), r);
    }
}
