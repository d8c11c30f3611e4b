//! Per-function reverse-engineering report combining the three task models.

use std::fmt::Write as _;

use serde::Serialize;

use super::predict::{fpi_predict, tr_predict, ws_predict, TaskModel};
use crate::corpus::slot_token;
use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;
use crate::wat::{self, WatFunction};

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "lowercase", tag = "status", content = "result")]
pub enum Section<T> {
    Ok(T),
    Skipped,
    Error(String),
}

impl<T> Section<T> {
    pub fn is_ok(&self) -> bool {
        matches!(self, Section::Ok(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FpiResult {
    pub label: String,
    pub confidence: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlotTypes {
    pub slot: String,
    pub top1: Vec<String>,
    pub top5: Vec<Vec<String>>,
}

/// Field order is part of the machine-readable format.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportEntry {
    pub function: String,
    pub fpi: Section<FpiResult>,
    pub types: Section<Vec<SlotTypes>>,
    pub summary: Section<String>,
}

impl ReportEntry {
    pub fn any_ok(&self) -> bool {
        self.fpi.is_ok() || self.types.is_ok() || self.summary.is_ok()
    }
}

pub struct ReportModels<'a> {
    pub fpi: Option<&'a TaskModel>,
    pub tr: Option<&'a TaskModel>,
    pub ws: Option<&'a TaskModel>,
    pub vocab: &'a Vocabulary,
    pub beam: usize,
    pub max_len: usize,
}

fn run<T>(model: Option<&TaskModel>, f: impl FnOnce(&TaskModel) -> Result<T>) -> Section<T> {
    match model {
        None => Section::Skipped,
        Some(m) => match f(m) {
            Ok(v) => Section::Ok(v),
            Err(e) => Section::Error(e.to_string()),
        },
    }
}

/// Type slots of a function: the return value (if any), then each parameter.
pub fn function_slots(f: &WatFunction) -> Vec<String> {
    let mut out = Vec::new();
    if f.has_result() {
        out.push(slot_token(None));
    }
    out.extend((0..f.param_count()).map(|i| slot_token(Some(i))));
    out
}

pub fn report_function(f: &WatFunction, models: &ReportModels<'_>) -> ReportEntry {
    let tokens = wat::normalize_tokens(&wat::segment_instructions(f));
    let fpi = run(models.fpi, |m| {
        let (label, dist) = fpi_predict(&tokens, m, models.vocab, models.max_len)?;
        let name = m.labels.get(label).cloned().unwrap_or_else(|| label.to_string());
        Ok(FpiResult { label: name, confidence: dist[label] })
    });
    let types = run(models.tr, |m| {
        function_slots(f)
            .into_iter()
            .map(|slot| {
                let ranked = tr_predict(&tokens, &slot, m, models.vocab, models.beam, models.max_len)?;
                Ok(SlotTypes {
                    top1: ranked.first().map(|r| r.types.clone()).unwrap_or_default(),
                    top5: ranked.iter().take(5).map(|r| r.types.clone()).collect(),
                    slot,
                })
            })
            .collect::<Result<Vec<_>>>()
    });
    let summary = run(models.ws, |m| Ok(ws_predict(&tokens, m, models.vocab, models.beam, models.max_len)?.join(" ")));
    ReportEntry { function: f.name_or_index.clone(), fpi, types, summary }
}

/// One entry per function. An unparsable module yields a single error entry.
pub fn build_report(wat_text: &str, models: &ReportModels<'_>) -> Result<Vec<ReportEntry>> {
    if models.fpi.is_none() && models.tr.is_none() && models.ws.is_none() {
        return Err(Error::invalid("at least one task checkpoint is required"));
    }
    match wat::extract_functions(wat_text) {
        Ok(funcs) => Ok(funcs.iter().map(|f| report_function(f, models)).collect()),
        Err(e) => {
            let msg = e.to_string();
            fn err<T>(present: bool, msg: &str) -> Section<T> {
                if present {
                    Section::Error(msg.to_string())
                } else {
                    Section::Skipped
                }
            }
            Ok(vec![ReportEntry {
                function: "<module>".into(),
                fpi: err(models.fpi.is_some(), &msg),
                types: err(models.tr.is_some(), &msg),
                summary: err(models.ws.is_some(), &msg),
            }])
        }
    }
}

fn section_text<T>(s: &Section<T>, ok: impl FnOnce(&T) -> String) -> String {
    match s {
        Section::Ok(v) => ok(v),
        Section::Skipped => "skipped".into(),
        Section::Error(e) => format!("error: {e}"),
    }
}

/// Human-readable rendering.
pub fn render_text(entries: &[ReportEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let _ = writeln!(out, "function {}", e.function);
        let _ = writeln!(out, "  purpose: {}", section_text(&e.fpi, |r| format!("{} ({:.3})", r.label, r.confidence)));
        match &e.types {
            Section::Ok(slots) if !slots.is_empty() => {
                let _ = writeln!(out, "  types:");
                for s in slots {
                    let alts: Vec<String> = s.top5.iter().map(|t| t.join(" ")).collect();
                    let _ = writeln!(out, "    {}: {}  [top-5: {}]", s.slot, s.top1.join(" "), alts.join(" | "));
                }
            }
            Section::Ok(_) => {
                let _ = writeln!(out, "  types: (no parameters or result)");
            }
            other => {
                let _ = writeln!(out, "  types: {}", section_text(other, |_| String::new()));
            }
        }
        let _ = writeln!(out, "  summary: {}", section_text(&e.summary, |s| s.clone()));
    }
    out
}
