//! Downstream task data, inference and metrics.

pub mod predict;
pub mod report;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_jsonl, write_jsonl};
use crate::error::{Error, Result};
use crate::wat::{self, Instruction};

pub const DEFAULT_FPI_CLASSES: usize = 12;

fn wasm_lines(wasm: &[Instruction]) -> Vec<String> {
    wat::normalize_instructions(wasm).iter().map(ToString::to_string).collect()
}

fn lines_to_tokens(lines: &[String]) -> Vec<String> {
    let instrs: Vec<Instruction> = lines.iter().filter_map(|l| Instruction::parse_line(l)).collect();
    wat::flatten(&instrs)
}

/// Function purpose identification: Wasm body and class id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FpiExample {
    pub id: String,
    pub project_id: String,
    /// One normalized instruction per entry.
    pub wasm: Vec<String>,
    pub label: usize,
}

impl FpiExample {
    pub fn new(id: &str, project_id: &str, wasm: &[Instruction], label: usize) -> Self {
        FpiExample { id: id.into(), project_id: project_id.into(), wasm: wasm_lines(wasm), label }
    }

    pub fn wasm_tokens(&self) -> Vec<String> {
        lines_to_tokens(&self.wasm)
    }
}

/// Type recovery: one slot (`[RET]` or `[P<i>]`) of a function and its type sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrExample {
    pub id: String,
    pub project_id: String,
    pub wasm: Vec<String>,
    pub slot: String,
    pub types: Vec<String>,
}

impl TrExample {
    pub fn new(id: &str, project_id: &str, wasm: &[Instruction], slot: &str, types: Vec<String>) -> Self {
        TrExample { id: id.into(), project_id: project_id.into(), wasm: wasm_lines(wasm), slot: slot.into(), types }
    }

    pub fn wasm_tokens(&self) -> Vec<String> {
        lines_to_tokens(&self.wasm)
    }
}

/// Summarization: Wasm body and its reference description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WsExample {
    pub id: String,
    pub project_id: String,
    pub wasm: Vec<String>,
    pub summary: String,
}

impl WsExample {
    pub fn new(id: &str, project_id: &str, wasm: &[Instruction], summary: &str) -> Self {
        WsExample { id: id.into(), project_id: project_id.into(), wasm: wasm_lines(wasm), summary: summary.into() }
    }

    pub fn wasm_tokens(&self) -> Vec<String> {
        lines_to_tokens(&self.wasm)
    }
}

pub fn write_examples<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_jsonl(path, items)
}

pub fn read_examples<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_jsonl(path, |x: T| Ok(x))
}

/// One-vs-rest counts for a single class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl ConfusionCounts {
    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    /// Fraction of correct labels.
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Per-class one-vs-rest metrics and their unweighted (macro) and pooled
/// (micro) averages. Classes are `0..n_classes`, defaulting to the largest label seen.
pub fn classification_metrics(pred: &[usize], truth: &[usize], n_classes: Option<usize>) -> Result<ClassificationMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::invalid("prediction and truth lists differ in length"));
    }
    if pred.is_empty() {
        return Err(Error::invalid("no labels to score"));
    }
    let seen = pred.iter().chain(truth).max().copied().unwrap_or(0) + 1;
    let n = n_classes.unwrap_or(seen).max(seen);
    let mut per_class = Vec::with_capacity(n);
    let mut pooled = ConfusionCounts::default();
    for c in 0..n {
        let mut k = ConfusionCounts::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == c, t == c) {
                (true, true) => k.tp += 1,
                (true, false) => k.fp += 1,
                (false, true) => k.fn_ += 1,
                (false, false) => k.tn += 1,
            }
        }
        pooled.tp += k.tp;
        pooled.fp += k.fp;
        pooled.fn_ += k.fn_;
        per_class.push(ClassMetrics {
            class: c,
            counts: k,
            accuracy: k.accuracy(),
            precision: k.precision(),
            recall: k.recall(),
            f1: k.f1(),
        });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n as f64;
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / pred.len() as f64,
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        micro_precision: pooled.precision(),
        micro_recall: pooled.recall(),
        micro_f1: pooled.f1(),
        per_class,
    })
}

/// Length of the common prefix of two type sequences.
pub fn type_prefix_score<S: PartialEq>(pred: &[S], truth: &[S]) -> usize {
    pred.iter().zip(truth).take_while(|(a, b)| a == b).count()
}

/// Whether `truth` appears verbatim among the first `k` predictions.
pub fn topk_exact_match<S: PartialEq>(ranked: &[Vec<S>], truth: &[S], k: usize) -> bool {
    ranked.iter().take(k).any(|p| p.as_slice() == truth)
}

fn ngram_counts<S: std::hash::Hash + Eq>(tokens: &[S], n: usize) -> HashMap<&[S], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and candidate n-gram totals for n = 1..4.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuStats {
    pub fn new<S: std::hash::Hash + Eq>(candidate: &[S], reference: &[S]) -> Self {
        let mut s = BleuStats { candidate_len: candidate.len(), reference_len: reference.len(), ..Default::default() };
        for n in 1..=4 {
            let c = ngram_counts(candidate, n);
            let r = ngram_counts(reference, n);
            s.matches[n - 1] = c.iter().map(|(g, &k)| k.min(*r.get(g).unwrap_or(&0))).sum();
            s.totals[n - 1] = candidate.len().saturating_sub(n - 1);
        }
        s
    }

    pub fn add(&mut self, o: &BleuStats) {
        for i in 0..4 {
            self.matches[i] += o.matches[i];
            self.totals[i] += o.totals[i];
        }
        self.candidate_len += o.candidate_len;
        self.reference_len += o.reference_len;
    }

    /// Geometric mean of the four precisions times the brevity penalty.
    /// Higher-order precisions with no matches use add-one smoothing.
    pub fn score(&self) -> f64 {
        if self.candidate_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for i in 0..4 {
            let p = if i > 0 && self.matches[i] == 0 {
                1.0 / (self.totals[i] as f64 + 1.0)
            } else {
                self.matches[i] as f64 / self.totals[i] as f64
            };
            log_sum += p.ln();
        }
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        bp * (log_sum / 4.0).exp()
    }
}

/// Sentence-level BLEU-4.
pub fn bleu4<S: std::hash::Hash + Eq>(candidate: &[S], reference: &[S]) -> f64 {
    BleuStats::new(candidate, reference).score()
}

/// Corpus-level BLEU-4: counts are pooled before combining.
pub fn corpus_bleu4<S: std::hash::Hash + Eq>(pairs: &[(Vec<S>, Vec<S>)]) -> f64 {
    let mut total = BleuStats::default();
    for (c, r) in pairs {
        total.add(&BleuStats::new(c, r));
    }
    total.score()
}
