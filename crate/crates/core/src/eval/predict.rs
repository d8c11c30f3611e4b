//! Fine-tuned task models: persistence, inference and test-set evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    bleu4, classification_metrics, corpus_bleu4, topk_exact_match, type_prefix_score, FpiExample, TrExample, WsExample,
};
use crate::error::{Error, Result};
use crate::model::checkpoint::{params_from_container, params_to_container, Container};
use crate::model::decoder::{beam_search, DecoderContext};
use crate::model::encoder::encode_input;
use crate::model::heads::{classify_head, cls_pool};
use crate::model::objectives::argmax;
use crate::model::Parameters;
use crate::tokenizer::{decode, encode_parts, nl_words, EncodedInput, Segment, Vocabulary, CLS, SEP, UNK};
use crate::training::{TaskSet, TaskTargets};

pub const TR_MAX_STEPS: usize = 8;
pub const WS_MAX_STEPS: usize = 32;
pub const DEFAULT_BEAM: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Fpi,
    Tr,
    Ws,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Fpi => "fpi",
            TaskKind::Tr => "tr",
            TaskKind::Ws => "ws",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fpi" => Ok(TaskKind::Fpi),
            "tr" => Ok(TaskKind::Tr),
            "ws" => Ok(TaskKind::Ws),
            other => Err(Error::invalid(format!("unknown task {other:?} (expected fpi, tr or ws)"))),
        }
    }
}

/// Parameters plus the task-specific label inventory.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskModel {
    pub kind: TaskKind,
    pub params: Parameters<f32>,
    /// FPI class names, index = class id.
    pub labels: Vec<String>,
    /// TR output vocabulary: specials, slot tokens, then type tokens.
    pub type_vocab: Option<Vocabulary>,
}

impl TaskModel {
    pub fn to_container(&self) -> Container {
        let mut c = params_to_container(&self.params);
        c.set("task", self.kind);
        if !self.labels.is_empty() {
            c.set("task.labels", self.labels.join(","));
        }
        if let Some(v) = &self.type_vocab {
            c.set("task.type_vocab", v.tokens().join(" "));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let kind: TaskKind = c.get("task")?.parse()?;
        let labels = c.meta.get("task.labels").map(|s| s.split(',').map(str::to_string).collect()).unwrap_or_default();
        let type_vocab = c.meta.get("task.type_vocab").map(|s| {
            let toks: Vec<String> = s.split(' ').map(str::to_string).collect();
            Vocabulary::from_fragments(&[toks])
        });
        Ok(TaskModel { kind, params: params_from_container(c)?, labels, type_vocab })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        TaskModel::from_container(&Container::load(path)?)
    }

    fn types(&self) -> Result<&Vocabulary> {
        self.type_vocab.as_ref().ok_or_else(|| Error::Container("type vocabulary missing from checkpoint".into()))
    }
}

/// Wasm-only encoder input: `[CLS] wasm [SEP]` with segment 2.
pub fn wasm_input(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> Result<EncodedInput> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty wasm input"));
    }
    encode_parts(&[(Segment::Wasm, vocab.encode_tokens(tokens))], max_len)
}

/// Output vocabulary for type recovery.
pub fn build_type_vocab(examples: &[TrExample]) -> Vocabulary {
    let mut frags: Vec<Vec<String>> = examples.iter().map(|e| vec![e.slot.clone()]).collect();
    frags.extend(examples.iter().map(|e| e.types.clone()));
    Vocabulary::from_fragments(&frags)
}

pub fn type_target(types: &[String], type_vocab: &Vocabulary) -> Vec<u32> {
    let mut ids: Vec<u32> = types.iter().map(|t| type_vocab.id_or_unk(t)).collect();
    ids.push(SEP);
    ids
}

pub fn slot_start(slot: &str, type_vocab: &Vocabulary) -> u32 {
    type_vocab.id_of(slot).unwrap_or(UNK)
}

pub fn summary_target(summary: &str, vocab: &Vocabulary) -> Vec<u32> {
    let mut ids = vocab.encode_nl(&nl_words(summary));
    ids.truncate(WS_MAX_STEPS - 1);
    ids.push(SEP);
    ids
}

pub fn fpi_task_set(examples: &[FpiExample], vocab: &Vocabulary, n_classes: usize, max_len: usize) -> Result<TaskSet> {
    Ok(TaskSet {
        inputs: examples.iter().map(|e| wasm_input(&e.wasm_tokens(), vocab, max_len)).collect::<Result<_>>()?,
        targets: TaskTargets::Classes { labels: examples.iter().map(|e| e.label).collect(), n_classes },
    })
}

pub fn tr_task_set(examples: &[TrExample], vocab: &Vocabulary, type_vocab: &Vocabulary, max_len: usize) -> Result<TaskSet> {
    Ok(TaskSet {
        inputs: examples.iter().map(|e| wasm_input(&e.wasm_tokens(), vocab, max_len)).collect::<Result<_>>()?,
        targets: TaskTargets::Sequences {
            targets: examples.iter().map(|e| type_target(&e.types, type_vocab)).collect(),
            starts: examples.iter().map(|e| slot_start(&e.slot, type_vocab)).collect(),
        },
    })
}

pub fn ws_task_set(examples: &[WsExample], vocab: &Vocabulary, max_len: usize) -> Result<TaskSet> {
    Ok(TaskSet {
        inputs: examples.iter().map(|e| wasm_input(&e.wasm_tokens(), vocab, max_len)).collect::<Result<_>>()?,
        targets: TaskTargets::Sequences {
            targets: examples.iter().map(|e| summary_target(&e.summary, vocab)).collect(),
            starts: vec![CLS; examples.len()],
        },
    })
}

/// Most likely class and the full distribution.
pub fn fpi_predict(tokens: &[String], model: &TaskModel, vocab: &Vocabulary, max_len: usize) -> Result<(usize, Vec<f32>)> {
    let hidden = encode_input(&wasm_input(tokens, vocab, max_len)?, &model.params)?;
    let n = model.params.classifier.as_ref().map_or(0, |c| c.weight.cols);
    let dist = classify_head(&cls_pool(&hidden), &model.params, n)?;
    Ok((argmax(&dist), dist))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedTypes {
    pub types: Vec<String>,
    pub score: f32,
}

fn strip_end(tokens: &[u32]) -> &[u32] {
    match tokens.last() {
        Some(&SEP) => &tokens[..tokens.len() - 1],
        _ => tokens,
    }
}

/// Beam-decoded type sequences for one slot, best first.
pub fn tr_predict(
    tokens: &[String],
    slot: &str,
    model: &TaskModel,
    vocab: &Vocabulary,
    beam: usize,
    max_len: usize,
) -> Result<Vec<RankedTypes>> {
    let types = model.types()?;
    let hidden = encode_input(&wasm_input(tokens, vocab, max_len)?, &model.params)?;
    let ctx = DecoderContext::new(hidden, &model.params)?;
    let hyps = beam_search(&ctx, slot_start(slot, types), Some(SEP), beam, TR_MAX_STEPS, &model.params)?;
    hyps.iter()
        .map(|h| {
            let names = strip_end(&h.tokens).iter().map(|&t| types.token_of(t).map(str::to_string)).collect::<Result<_>>()?;
            Ok(RankedTypes { types: names, score: h.score })
        })
        .collect()
}

/// Beam-decoded summary, merged into words.
pub fn ws_predict(tokens: &[String], model: &TaskModel, vocab: &Vocabulary, beam: usize, max_len: usize) -> Result<Vec<String>> {
    let hidden = encode_input(&wasm_input(tokens, vocab, max_len)?, &model.params)?;
    let ctx = DecoderContext::new(hidden, &model.params)?;
    let hyps = beam_search(&ctx, CLS, Some(SEP), beam, WS_MAX_STEPS, &model.params)?;
    decode(strip_end(&hyps[0].tokens), vocab)
}

/// One evaluated example. Field order is part of the report format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task: TaskKind,
    pub id: String,
    pub prediction: Vec<String>,
    pub truth: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub task: TaskKind,
    pub count: usize,
    pub metrics: BTreeMap<String, Value>,
}

fn label_name(model: &TaskModel, id: usize) -> String {
    model.labels.get(id).cloned().unwrap_or_else(|| id.to_string())
}

pub fn evaluate_fpi(
    model: &TaskModel,
    vocab: &Vocabulary,
    examples: &[FpiExample],
    max_len: usize,
) -> Result<(Vec<EvalRecord>, EvalSummary)> {
    let mut records = Vec::new();
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for e in examples {
        let (p, dist) = fpi_predict(&e.wasm_tokens(), model, vocab, max_len)?;
        pred.push(p);
        truth.push(e.label);
        let mut m = BTreeMap::new();
        m.insert("confidence".into(), dist[p] as f64);
        m.insert("correct".into(), (p == e.label) as u8 as f64);
        records.push(EvalRecord {
            task: TaskKind::Fpi,
            id: e.id.clone(),
            prediction: vec![label_name(model, p)],
            truth: vec![label_name(model, e.label)],
            metrics: m,
        });
    }
    let n = model.params.classifier.as_ref().map(|c| c.weight.cols);
    let cm = classification_metrics(&pred, &truth, n)?;
    let metrics = BTreeMap::from([
        ("accuracy".to_string(), json!(cm.accuracy)),
        ("macro_precision".to_string(), json!(cm.macro_precision)),
        ("macro_recall".to_string(), json!(cm.macro_recall)),
        ("macro_f1".to_string(), json!(cm.macro_f1)),
        ("micro_precision".to_string(), json!(cm.micro_precision)),
        ("micro_recall".to_string(), json!(cm.micro_recall)),
        ("micro_f1".to_string(), json!(cm.micro_f1)),
    ]);
    Ok((records, EvalSummary { task: TaskKind::Fpi, count: examples.len(), metrics }))
}

pub fn evaluate_tr(
    model: &TaskModel,
    vocab: &Vocabulary,
    examples: &[TrExample],
    beam: usize,
    max_len: usize,
) -> Result<(Vec<EvalRecord>, EvalSummary)> {
    let mut records = Vec::new();
    let (mut top1, mut top5, mut tps) = (0usize, 0usize, 0usize);
    for e in examples {
        let ranked = tr_predict(&e.wasm_tokens(), &e.slot, model, vocab, beam, max_len)?;
        let seqs: Vec<Vec<String>> = ranked.iter().map(|r| r.types.clone()).collect();
        let hit1 = topk_exact_match(&seqs, &e.types, 1);
        let hit5 = topk_exact_match(&seqs, &e.types, 5);
        let score = seqs.first().map_or(0, |s| type_prefix_score(s, &e.types));
        top1 += hit1 as usize;
        top5 += hit5 as usize;
        tps += score;
        let m = BTreeMap::from([
            ("top1".to_string(), hit1 as u8 as f64),
            ("top5".to_string(), hit5 as u8 as f64),
            ("tps".to_string(), score as f64),
        ]);
        records.push(EvalRecord {
            task: TaskKind::Tr,
            id: e.id.clone(),
            prediction: seqs.iter().map(|s| s.join(" ")).collect(),
            truth: e.types.clone(),
            metrics: m,
        });
    }
    let n = examples.len().max(1) as f64;
    let metrics = BTreeMap::from([
        ("top1_accuracy".to_string(), json!(top1 as f64 / n)),
        ("top5_accuracy".to_string(), json!(top5 as f64 / n)),
        ("mean_tps".to_string(), json!(tps as f64 / n)),
        ("beam_width".to_string(), json!(beam)),
    ]);
    Ok((records, EvalSummary { task: TaskKind::Tr, count: examples.len(), metrics }))
}

pub fn evaluate_ws(
    model: &TaskModel,
    vocab: &Vocabulary,
    examples: &[WsExample],
    beam: usize,
    max_len: usize,
) -> Result<(Vec<EvalRecord>, EvalSummary)> {
    let mut records = Vec::new();
    let mut pairs = Vec::new();
    for e in examples {
        let pred = ws_predict(&e.wasm_tokens(), model, vocab, beam, max_len)?;
        let truth = nl_words(&e.summary);
        let m = BTreeMap::from([("bleu4".to_string(), bleu4(&pred, &truth))]);
        records.push(EvalRecord { task: TaskKind::Ws, id: e.id.clone(), prediction: pred.clone(), truth: truth.clone(), metrics: m });
        pairs.push((pred, truth));
    }
    let metrics = BTreeMap::from([
        ("corpus_bleu4".to_string(), json!(corpus_bleu4(&pairs))),
        ("bertscore_f1".to_string(), json!("unavailable")),
    ]);
    Ok((records, EvalSummary { task: TaskKind::Ws, count: examples.len(), metrics }))
}
