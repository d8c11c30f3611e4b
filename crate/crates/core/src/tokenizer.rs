//! Vocabularies and multi-modal input assembly.
//!
//! Documentation text is split into WordPiece-style subwords; source code and
//! Wasm are tokenized at token level. All three share one id namespace. The
//! model input is `[CLS] nl [SEP] pl [SEP] wasm [SEP]` with a segment id per
//! modality.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const STR: u32 = 5;
pub const ADDR: u32 = 6;

pub const SPECIAL_TOKENS: [&str; 7] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[STR]", "[ADDR]"];
pub const NUM_SPECIALS: usize = SPECIAL_TOKENS.len();

pub const MAX_LEN: usize = 512;
pub const CONTINUATION: &str = "##";
const MAX_PIECE_CHARS: usize = 24;

pub fn is_special(id: u32) -> bool {
    (id as usize) < NUM_SPECIALS
}

/// Bijective token/id map with the special tokens at ids 0..7.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_fragments(&[])
    }
}

impl Vocabulary {
    /// Specials first, then each fragment in order, skipping repeats.
    pub fn from_fragments(fragments: &[Vec<String>]) -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        for frag in fragments {
            for tok in frag {
                if !index.contains_key(tok) {
                    index.insert(tok.clone(), tokens.len() as u32);
                    tokens.push(tok.clone());
                }
            }
        }
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id_of(token).unwrap_or(UNK)
    }

    pub fn token_of(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::IdOutOfRange { id, size: self.tokens.len() })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Greedy longest-match-first subword split. Words with no full cover map to `[UNK]`.
    pub fn wordpiece(&self, word: &str) -> Vec<u32> {
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() {
            return Vec::new();
        }
        if chars.len() > 100 {
            return vec![UNK];
        }
        let mut out = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let sub: String = chars[start..end].iter().collect();
                let piece = if start == 0 { sub } else { format!("{CONTINUATION}{sub}") };
                if let Some(id) = self.id_of(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    out.push(id);
                    start = end;
                }
                None => return vec![UNK],
            }
        }
        out
    }

    pub fn encode_nl(&self, words: &[String]) -> Vec<u32> {
        words.iter().flat_map(|w| self.wordpiece(w)).collect()
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id_or_unk(t)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::invalid(format!("vocabulary file {} must start with the special tokens", path.display())));
            }
        }
        let frag = tokens[NUM_SPECIALS..].to_vec();
        let vocab = Vocabulary::from_fragments(&[frag]);
        if vocab.len() != tokens.len() {
            return Err(Error::invalid(format!("duplicate tokens in {}", path.display())));
        }
        Ok(vocab)
    }
}

/// Lowercased words; punctuation characters become their own words.
pub fn nl_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

const PL_OPERATORS: &[&str] = &[
    "<<=", ">>=", "...", "->", "++", "--", "<<", ">>", "<=", ">=", "==", "!=", "&&", "||", "+=", "-=", "*=", "/=", "%=",
    "&=", "|=", "^=", "::",
];

/// C-family lexer: identifiers, numbers, string/char literals, operators.
pub fn pl_tokens(source: &str) -> Vec<String> {
    let chars: Vec<char> = source.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
        } else if c == '/' && chars.get(i + 1) == Some(&'*') {
            i += 2;
            while i + 1 < chars.len() && !(chars[i] == '*' && chars[i + 1] == '/') {
                i += 1;
            }
            i = (i + 2).min(chars.len());
        } else if c.is_alphanumeric() || c == '_' {
            let start = i;
            let numeric = c.is_ascii_digit();
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || (numeric && chars[i] == '.')) {
                i += 1;
            }
            out.push(chars[start..i].iter().collect());
        } else if c == '"' || c == '\'' {
            let start = i;
            i += 1;
            while i < chars.len() && chars[i] != c {
                if chars[i] == '\\' {
                    i += 1;
                }
                i += 1;
            }
            i = (i + 1).min(chars.len());
            out.push(chars[start..i].iter().collect());
        } else {
            let rest: String = chars[i..(i + 3).min(chars.len())].iter().collect();
            let op = PL_OPERATORS.iter().find(|op| rest.starts_with(**op));
            match op {
                Some(op) => {
                    out.push(op.to_string());
                    i += op.chars().count();
                }
                None => {
                    out.push(c.to_string());
                    i += 1;
                }
            }
        }
    }
    out
}

/// Frequency-driven subword inventory. Single-character pieces come first so
/// every word over the seen alphabet decomposes; the remaining budget goes to
/// the most frequent multi-character pieces (longer first on ties).
///
/// `vocab_cap` bounds the size of a vocabulary built from this fragment alone.
pub fn train_nl_subwords(docs: &[Vec<String>], vocab_cap: usize) -> Result<Vec<String>> {
    if vocab_cap <= NUM_SPECIALS {
        return Err(Error::invalid("vocabulary cap must exceed the number of special tokens"));
    }
    let mut words: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in docs {
        for w in doc {
            *words.entry(w.as_str()).or_default() += 1;
        }
    }
    if words.is_empty() {
        return Err(Error::invalid("cannot train subwords on an empty corpus"));
    }
    let mut scores: HashMap<String, usize> = HashMap::new();
    for (word, &count) in &words {
        let chars: Vec<char> = word.chars().collect();
        for s in 0..chars.len() {
            for e in (s + 1)..=chars.len().min(s + MAX_PIECE_CHARS) {
                let sub: String = chars[s..e].iter().collect();
                let piece = if s == 0 { sub } else { format!("{CONTINUATION}{sub}") };
                *scores.entry(piece).or_default() += count;
            }
        }
    }
    let piece_len = |p: &str| p.strip_prefix(CONTINUATION).unwrap_or(p).chars().count();
    let mut ranked: Vec<(String, usize)> = scores.into_iter().collect();
    ranked.sort_by(|(a, sa), (b, sb)| {
        let (la, lb) = (piece_len(a), piece_len(b));
        (la > 1)
            .cmp(&(lb > 1))
            .then(sb.cmp(sa))
            .then(lb.cmp(&la))
            .then(a.cmp(b))
    });
    let budget = vocab_cap - NUM_SPECIALS;
    Ok(ranked
        .into_iter()
        .map(|(p, _)| p)
        .filter(|p| !SPECIAL_TOKENS.contains(&p.as_str()))
        .take(budget)
        .collect())
}

/// Token-level inventory: frequency ≥ `min_freq`, most frequent first,
/// lexicographic on ties. Special tokens are never counted; they already own ids.
pub fn build_token_vocab(streams: &[Vec<String>], vocab_cap: usize, min_freq: usize) -> Result<Vec<String>> {
    if min_freq == 0 {
        return Err(Error::invalid("min_freq must be at least 1"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for stream in streams {
        for t in stream {
            if !SPECIAL_TOKENS.contains(&t.as_str()) {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    ranked.sort_by(|(a, ca), (b, cb)| cb.cmp(ca).then(a.cmp(b)));
    Ok(ranked
        .into_iter()
        .take(vocab_cap.saturating_sub(NUM_SPECIALS))
        .map(|(t, _)| t.to_string())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Segment {
    Nl = 0,
    Pl = 1,
    Wasm = 2,
}

impl Segment {
    pub fn id(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct EncodedInput {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub position_ids: Vec<u32>,
    pub attention_mask: Vec<bool>,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Content positions: not `[CLS]`, `[SEP]`, `[PAD]`, and attended.
    pub fn maskable_positions(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| {
                let id = self.token_ids[i];
                self.attention_mask[i] && id != CLS && id != SEP && id != PAD
            })
            .collect()
    }

    /// Pads to `len` with `[PAD]`, masked out of attention.
    pub fn padded(&self, len: usize) -> EncodedInput {
        let mut out = self.clone();
        let seg = *out.segment_ids.last().unwrap_or(&0);
        while out.token_ids.len() < len {
            out.position_ids.push(out.token_ids.len() as u32);
            out.token_ids.push(PAD);
            out.segment_ids.push(seg);
            out.attention_mask.push(false);
        }
        out
    }
}

/// Integer proportional allocation of `budget` over `lens`, at least one slot
/// per modality; leftovers go to the largest fractional remainders.
fn proportional_allocation(lens: &[usize], budget: usize) -> Vec<usize> {
    let total: usize = lens.iter().sum();
    if total <= budget {
        return lens.to_vec();
    }
    let mut alloc: Vec<usize> = lens.iter().map(|&l| (budget * l / total).max(1).min(l)).collect();
    let mut remainders: Vec<(usize, usize)> = lens.iter().enumerate().map(|(i, &l)| (i, (budget * l) % total)).collect();
    remainders.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut used: usize = alloc.iter().sum();
    while used > budget {
        // Minimums overshot the budget; shrink the largest allocation.
        let (i, _) = alloc.iter().enumerate().max_by_key(|(i, a)| (**a, usize::MAX - i)).expect("non-empty");
        alloc[i] -= 1;
        used -= 1;
    }
    for (i, _) in remainders.iter().cycle().take(lens.len() * 2) {
        if used == budget {
            break;
        }
        if alloc[*i] < lens[*i] {
            alloc[*i] += 1;
            used += 1;
        }
    }
    alloc
}

/// Assembles `[CLS] part1 [SEP] part2 [SEP] ...` from pre-tokenized id parts in
/// the given order. Empty parts contribute nothing, including their `[SEP]`.
pub fn encode_parts(parts: &[(Segment, Vec<u32>)], max_len: usize) -> Result<EncodedInput> {
    let present: Vec<&(Segment, Vec<u32>)> = parts.iter().filter(|(_, ids)| !ids.is_empty()).collect();
    if present.is_empty() {
        return Err(Error::invalid("all modalities are empty"));
    }
    let overhead = 1 + present.len();
    if max_len < overhead + present.len() {
        return Err(Error::invalid(format!("max_len {max_len} too small for {} modalities", present.len())));
    }
    let lens: Vec<usize> = present.iter().map(|(_, ids)| ids.len()).collect();
    let alloc = proportional_allocation(&lens, max_len - overhead);
    let mut out = EncodedInput::default();
    out.token_ids.push(CLS);
    out.segment_ids.push(0);
    for ((seg, ids), keep) in present.iter().zip(alloc) {
        for &id in &ids[..keep] {
            out.token_ids.push(id);
            out.segment_ids.push(seg.id());
        }
        out.token_ids.push(SEP);
        out.segment_ids.push(seg.id());
    }
    out.position_ids = (0..out.token_ids.len() as u32).collect();
    out.attention_mask = vec![true; out.token_ids.len()];
    Ok(out)
}

/// Encodes an (NL words, PL tokens, Wasm tokens) triplet in canonical order.
pub fn encode_multimodal(
    nl: &[String],
    pl: &[String],
    wasm: &[String],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<EncodedInput> {
    encode_parts(
        &[
            (Segment::Nl, vocab.encode_nl(nl)),
            (Segment::Pl, vocab.encode_tokens(pl)),
            (Segment::Wasm, vocab.encode_tokens(wasm)),
        ],
        max_len,
    )
}

/// Ids to tokens with `##` continuation pieces merged into the preceding token.
pub fn decode(ids: &[u32], vocab: &Vocabulary) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::new();
    for &id in ids {
        let tok = vocab.token_of(id)?;
        match tok.strip_prefix(CONTINUATION) {
            Some(rest) if !rest.is_empty() && !out.is_empty() => out.last_mut().expect("non-empty").push_str(rest),
            _ => out.push(tok.to_string()),
        }
    }
    Ok(out)
}

/// Splits an encoded input back into its per-segment streams (specials removed).
pub fn decode_segments(input: &EncodedInput, vocab: &Vocabulary) -> Result<[Vec<String>; 3]> {
    let mut ids: [Vec<u32>; 3] = Default::default();
    for (i, &id) in input.token_ids.iter().enumerate() {
        if id == CLS || id == SEP || id == PAD {
            continue;
        }
        let seg = input.segment_ids[i] as usize;
        if seg > 2 {
            return Err(Error::invalid(format!("segment id {seg} out of range")));
        }
        ids[seg].push(id);
    }
    Ok([decode(&ids[0], vocab)?, decode(&ids[1], vocab)?, decode(&ids[2], vocab)?])
}
