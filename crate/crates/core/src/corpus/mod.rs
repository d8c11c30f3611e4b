//! Corpus construction: ingestion, documentation cleanup, near-duplicate
//! removal, compilation to Wasm text, filtering and project-level splitting.

mod synthetic;
mod toolchain;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{build_token_vocab, nl_words, pl_tokens, train_nl_subwords, Vocabulary};
use crate::wat::{self, Instruction};

pub use synthetic::{
    gen_synthetic_corpus, gen_synthetic_functions, slot_token, synthetic_task_data, CType, Family, SyntheticFunction,
    SyntheticTasks,
};
pub use toolchain::{compile_adapter, ToolchainConfig, ENV_CC, ENV_WASM2TEXT};

pub const MIN_DOC_TOKENS: usize = 3;
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.8;
pub const SHINGLE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OptLevel {
    O0,
    O1,
    O2,
    O3,
    Os,
    Oz,
}

impl OptLevel {
    pub const ALL: [OptLevel; 6] = [OptLevel::O0, OptLevel::O1, OptLevel::O2, OptLevel::O3, OptLevel::Os, OptLevel::Oz];

    pub fn flag(self) -> &'static str {
        match self {
            OptLevel::O0 => "-O0",
            OptLevel::O1 => "-O1",
            OptLevel::O2 => "-O2",
            OptLevel::O3 => "-O3",
            OptLevel::Os => "-Os",
            OptLevel::Oz => "-Oz",
        }
    }
}

impl fmt::Display for OptLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.flag()[1..])
    }
}

impl FromStr for OptLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OptLevel::ALL
            .into_iter()
            .find(|o| o.to_string() == s.trim_start_matches('-'))
            .ok_or_else(|| Error::invalid(format!("unknown optimization level {s:?}")))
    }
}

/// A documented function before compilation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawFunctionRecord {
    pub project_id: String,
    pub function_name: String,
    pub doc_text: String,
    pub source_text: String,
}

impl RawFunctionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.project_id.is_empty() {
            return Err(Error::invalid(format!("{}: empty project id", self.function_name)));
        }
        if self.doc_text.trim().is_empty() || self.source_text.trim().is_empty() {
            return Err(Error::invalid(format!("{}: empty documentation or source", self.function_name)));
        }
        Ok(())
    }
}

/// One (documentation, source, Wasm) triplet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiModalSample {
    pub project_id: String,
    pub doc: String,
    pub source: String,
    pub doc_tokens: Vec<String>,
    pub source_tokens: Vec<String>,
    /// Normalized instructions; boundaries are kept for instruction-level tasks.
    pub wasm: Vec<Instruction>,
    pub opt_level: OptLevel,
}

impl MultiModalSample {
    pub fn new(project_id: impl Into<String>, doc: impl Into<String>, source: impl Into<String>, wasm: &[Instruction], opt_level: OptLevel) -> Self {
        let doc = doc.into();
        let source = source.into();
        MultiModalSample {
            project_id: project_id.into(),
            doc_tokens: nl_words(&doc),
            source_tokens: pl_tokens(&source),
            doc,
            source,
            wasm: wat::normalize_instructions(wasm),
            opt_level,
        }
    }

    pub fn wasm_tokens(&self) -> Vec<String> {
        wat::flatten(&self.wasm)
    }

    /// Identity of the originating source function; shared by all opt-level variants.
    pub fn source_key(&self) -> u64 {
        let mut h = fnv1a(self.project_id.as_bytes());
        h ^= 0xff;
        h = h.wrapping_mul(0x100000001b3);
        fnv1a_continue(h, self.source.as_bytes())
    }

    pub fn to_record(&self) -> CorpusRecord {
        CorpusRecord {
            project_id: self.project_id.clone(),
            doc: self.doc.clone(),
            source: self.source.clone(),
            wasm: self.wasm.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n"),
            opt_level: self.opt_level,
        }
    }

    pub fn from_record(r: CorpusRecord) -> Result<Self> {
        let wasm: Vec<Instruction> = r.wasm.lines().filter_map(Instruction::parse_line).collect();
        let s = MultiModalSample::new(r.project_id, r.doc, r.source, &wasm, r.opt_level);
        if s.project_id.is_empty() {
            return Err(Error::invalid("empty project id"));
        }
        if s.wasm.is_empty() {
            return Err(Error::invalid("empty wasm"));
        }
        Ok(s)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    fnv1a_continue(0xcbf29ce484222325, bytes)
}

fn fnv1a_continue(mut h: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// On-disk corpus line. Field order is part of the file format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub project_id: String,
    pub doc: String,
    pub source: String,
    /// One normalized instruction per line.
    pub wasm: String,
    pub opt_level: OptLevel,
}

pub fn write_corpus(path: &Path, samples: &[MultiModalSample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut f, &s.to_record())?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<MultiModalSample>> {
    read_jsonl(path, |rec: CorpusRecord| MultiModalSample::from_record(rec))
}

/// Reads one JSON record per non-blank line, reporting the 1-based line of the first bad record.
pub fn read_jsonl<R, T>(path: &Path, mut convert: impl FnMut(R) -> Result<T>) -> Result<Vec<T>>
where
    R: for<'de> Deserialize<'de>,
{
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let corrupt = |message: String| Error::CorruptRecord { path: path.to_path_buf(), line: i + 1, message };
        let rec: R = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        out.push(convert(rec).map_err(|e| corrupt(e.to_string()))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut f, it)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Keeps the first blank-line-delimited paragraph, with line endings normalized to LF.
pub fn truncate_doc(doc: &str) -> String {
    let normalized = doc.replace("\r\n", "\n").replace('\r', "\n");
    let mut para: Vec<&str> = Vec::new();
    for line in normalized.lines() {
        if line.trim().is_empty() {
            if para.is_empty() {
                continue;
            }
            break;
        }
        para.push(line.trim_end());
    }
    para.join("\n").trim().to_string()
}

pub fn filter_short_docs(samples: Vec<MultiModalSample>) -> Vec<MultiModalSample> {
    samples.into_iter().filter(|s| s.doc_tokens.len() >= MIN_DOC_TOKENS).collect()
}

fn shingles(tokens: &[String]) -> HashSet<u64> {
    if tokens.len() < SHINGLE {
        return std::iter::once(fnv1a(tokens.join("\u{1}").as_bytes())).collect();
    }
    tokens.windows(SHINGLE).map(|w| fnv1a(w.join("\u{1}").as_bytes())).collect()
}

pub fn jaccard(a: &HashSet<u64>, b: &HashSet<u64>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// Token 5-gram Jaccard similarity of two sources after lexing (whitespace-insensitive).
pub fn source_similarity(a: &str, b: &str) -> f64 {
    jaccard(&shingles(&pl_tokens(a)), &shingles(&pl_tokens(b)))
}

/// Drops every record whose source is at least `threshold`-similar to an earlier kept one.
pub fn near_dedup(records: Vec<RawFunctionRecord>, threshold: f64) -> Vec<RawFunctionRecord> {
    let mut kept: Vec<RawFunctionRecord> = Vec::new();
    let mut kept_shingles: Vec<HashSet<u64>> = Vec::new();
    let mut postings: HashMap<u64, Vec<usize>> = HashMap::new();
    for rec in records {
        let sh = shingles(&pl_tokens(&rec.source_text));
        let candidates: BTreeSet<usize> = sh.iter().filter_map(|h| postings.get(h)).flatten().copied().collect();
        if candidates.iter().any(|&k| jaccard(&sh, &kept_shingles[k]) >= threshold) {
            log::debug!("dropping near-duplicate {}", rec.function_name);
            continue;
        }
        let idx = kept.len();
        for h in &sh {
            postings.entry(*h).or_default().push(idx);
        }
        kept_shingles.push(sh);
        kept.push(rec);
    }
    kept
}

/// Sample ids (indices into the corpus) per split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: BTreeSet<usize>,
    pub validation: BTreeSet<usize>,
    pub test: BTreeSet<usize>,
}

impl CorpusSplit {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Assigns whole projects to train/validation/test. Ratios are honored at
/// project granularity; every split gets at least one project.
pub fn split_by_project(samples: &[MultiModalSample], ratios: (f64, f64, f64), seed: u64) -> Result<CorpusSplit> {
    let ids: Vec<&str> = samples.iter().map(|s| s.project_id.as_str()).collect();
    split_ids_by_project(&ids, ratios, seed)
}

/// Same as [`split_by_project`] over bare project ids (one per item).
pub fn split_ids_by_project(project_ids: &[&str], ratios: (f64, f64, f64), seed: u64) -> Result<CorpusSplit> {
    let (r_train, r_val, r_test) = ratios;
    if [r_train, r_val, r_test].iter().any(|r| !(0.0..=1.0).contains(r)) || (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let projects: BTreeSet<&str> = project_ids.iter().copied().collect();
    let n = projects.len();
    if n < 3 {
        return Err(Error::invalid(format!("need at least 3 projects to split, found {n}")));
    }
    let mut order: Vec<&str> = projects.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * r_val).round() as usize).max(1);
    let n_test = ((n as f64 * r_test).round() as usize).max(1);
    if n_val + n_test >= n {
        return Err(Error::invalid(format!("{n} projects cannot honor ratios {ratios:?}")));
    }
    let mut assignment: BTreeMap<&str, u8> = BTreeMap::new();
    for (i, p) in order.iter().enumerate() {
        let which = if i < n_val {
            1
        } else if i < n_val + n_test {
            2
        } else {
            0
        };
        assignment.insert(p, which);
    }
    let mut split = CorpusSplit::default();
    for (i, p) in project_ids.iter().enumerate() {
        match assignment[p] {
            0 => split.train.insert(i),
            1 => split.validation.insert(i),
            _ => split.test.insert(i),
        };
    }
    Ok(split)
}

/// Shared vocabulary over a corpus: NL subwords from the documentation, then
/// source and Wasm tokens. Both caps count the special tokens.
pub fn corpus_vocabulary(samples: &[MultiModalSample], nl_cap: usize, token_cap: usize, min_freq: usize) -> Result<Vocabulary> {
    let docs: Vec<Vec<String>> = samples.iter().map(|s| s.doc_tokens.clone()).collect();
    let nl = train_nl_subwords(&docs, nl_cap)?;
    let mut streams: Vec<Vec<String>> = samples.iter().map(|s| s.source_tokens.clone()).collect();
    streams.extend(samples.iter().map(|s| s.wasm_tokens()));
    let toks = build_token_vocab(&streams, token_cap, min_freq)?;
    Ok(Vocabulary::from_fragments(&[nl, toks]))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BuildStats {
    pub input_records: usize,
    pub dedup_removed: usize,
    pub compile_failures: usize,
    pub short_doc_removed: usize,
    pub samples: usize,
    pub per_opt_level: BTreeMap<String, usize>,
}

/// Full source-mode pipeline: truncate docs, dedup, compile at each level,
/// filter. Failed compilations are logged and skipped.
pub fn build_from_sources(
    records: Vec<RawFunctionRecord>,
    opt_levels: &[OptLevel],
    toolchain: &ToolchainConfig,
) -> Result<(Vec<MultiModalSample>, BuildStats)> {
    toolchain.check()?;
    let mut stats = BuildStats { input_records: records.len(), ..Default::default() };
    let cleaned: Vec<RawFunctionRecord> = records
        .into_iter()
        .filter(|r| r.validate().is_ok())
        .map(|r| RawFunctionRecord { doc_text: truncate_doc(&r.doc_text), ..r })
        .filter(|r| !r.doc_text.is_empty())
        .collect();
    let before = cleaned.len();
    let deduped = near_dedup(cleaned, DEFAULT_DEDUP_THRESHOLD);
    stats.dedup_removed = before - deduped.len();

    let mut samples = Vec::new();
    for rec in &deduped {
        for &level in opt_levels {
            match compile_adapter(rec, level, toolchain) {
                Ok(text) => {
                    let funcs = wat::extract_functions(&text)?;
                    let instrs: Vec<Instruction> = funcs.iter().flat_map(wat::segment_instructions).collect();
                    if instrs.is_empty() {
                        stats.compile_failures += 1;
                        continue;
                    }
                    samples.push(MultiModalSample::new(&rec.project_id, &rec.doc_text, &rec.source_text, &instrs, level));
                }
                Err(Error::ToolchainMissing(m)) => return Err(Error::ToolchainMissing(m)),
                Err(e) => {
                    log::warn!("skipping {} at {level}: {e}", rec.function_name);
                    stats.compile_failures += 1;
                }
            }
        }
    }
    let before = samples.len();
    let samples = filter_short_docs(samples);
    stats.short_doc_removed = before - samples.len();
    stats.samples = samples.len();
    for s in &samples {
        *stats.per_opt_level.entry(s.opt_level.to_string()).or_default() += 1;
    }
    Ok((samples, stats))
}
