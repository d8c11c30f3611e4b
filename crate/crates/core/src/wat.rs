//! WebAssembly text-format handling: function extraction, instruction
//! segmentation and token normalization.
//!
//! Folded s-expression bodies are unfolded into linear form (operands first,
//! then the operator), which matches stack evaluation order.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Replacement token for quoted string literals.
pub const STR_TOKEN: &str = "[STR]";
/// Replacement token for integer constants above [`LARGE_CONST_THRESHOLD`].
pub const ADDR_TOKEN: &str = "[ADDR]";
/// Integer constants with absolute value above this are treated as addresses.
pub const LARGE_CONST_THRESHOLD: u128 = 0xffff;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WatFunction {
    pub name_or_index: String,
    pub signature_text: String,
    pub body_lines: Vec<String>,
}

impl WatFunction {
    /// Number of `param` entries declared in the signature.
    pub fn param_count(&self) -> usize {
        count_clause_items(&self.signature_text, "param")
    }

    pub fn has_result(&self) -> bool {
        count_clause_items(&self.signature_text, "result") > 0
    }
}

fn count_clause_items(signature: &str, keyword: &str) -> usize {
    let Ok(atoms) = lex(signature) else { return 0 };
    let Ok(forms) = build_forms(&atoms) else { return 0 };
    forms
        .iter()
        .filter_map(|f| match f {
            Sexpr::List(items) => Some(items),
            Sexpr::Atom(..) => None,
        })
        .filter(|items| matches!(items.first(), Some(Sexpr::Atom(a)) if a == keyword))
        .map(|items| {
            let rest = &items[1..];
            // `(param $x i32)` names exactly one parameter.
            if matches!(rest.first(), Some(Sexpr::Atom(a)) if a.starts_with('$')) {
                1
            } else {
                rest.len()
            }
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub opcode: String,
    pub operands: Vec<String>,
}

impl Instruction {
    pub fn new(opcode: impl Into<String>, operands: &[&str]) -> Self {
        Instruction {
            opcode: opcode.into(),
            operands: operands.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn token_len(&self) -> usize {
        1 + self.operands.len()
    }

    pub fn tokens(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.token_len());
        out.push(self.opcode.clone());
        out.extend(self.operands.iter().cloned());
        out
    }

    /// Parses a single line of space-separated tokens, as written by `Display`.
    pub fn parse_line(line: &str) -> Option<Instruction> {
        let mut parts = line.split_whitespace();
        let opcode = parts.next()?.to_string();
        Some(Instruction {
            opcode,
            operands: parts.map(str::to_string).collect(),
        })
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.opcode)?;
        for op in &self.operands {
            write!(f, " {op}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Open(usize),
    Close(usize),
    Atom(String, usize),
}

fn lex(text: &str) -> Result<Vec<Tok>> {
    let bytes: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let mut line = 1;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            '\n' => {
                line += 1;
                i += 1;
            }
            c if c.is_whitespace() => i += 1,
            ';' if bytes.get(i + 1) == Some(&';') => {
                while i < bytes.len() && bytes[i] != '\n' {
                    i += 1;
                }
            }
            '(' if bytes.get(i + 1) == Some(&';') => {
                let start_line = line;
                let mut depth = 1;
                i += 2;
                while depth > 0 {
                    match (bytes.get(i), bytes.get(i + 1)) {
                        (None, _) => {
                            return Err(Error::Parse {
                                line: start_line,
                                message: "unterminated block comment".into(),
                            })
                        }
                        (Some('('), Some(';')) => {
                            depth += 1;
                            i += 2;
                        }
                        (Some(';'), Some(')')) => {
                            depth -= 1;
                            i += 2;
                        }
                        (Some('\n'), _) => {
                            line += 1;
                            i += 1;
                        }
                        _ => i += 1,
                    }
                }
            }
            '(' => {
                out.push(Tok::Open(line));
                i += 1;
            }
            ')' => {
                out.push(Tok::Close(line));
                i += 1;
            }
            '"' => {
                let start_line = line;
                let mut s = String::from('"');
                i += 1;
                loop {
                    match bytes.get(i) {
                        None => {
                            return Err(Error::Parse {
                                line: start_line,
                                message: "unterminated string literal".into(),
                            })
                        }
                        Some('\\') => {
                            s.push('\\');
                            if let Some(&n) = bytes.get(i + 1) {
                                s.push(n);
                            }
                            i += 2;
                        }
                        Some('"') => {
                            s.push('"');
                            i += 1;
                            break;
                        }
                        Some(&ch) => {
                            if ch == '\n' {
                                line += 1;
                            }
                            s.push(ch);
                            i += 1;
                        }
                    }
                }
                out.push(Tok::Atom(s, start_line));
            }
            _ => {
                let mut s = String::new();
                while i < bytes.len() {
                    let ch = bytes[i];
                    if ch.is_whitespace() || ch == '(' || ch == ')' || ch == '"' {
                        break;
                    }
                    if ch == ';' && bytes.get(i + 1) == Some(&';') {
                        break;
                    }
                    s.push(ch);
                    i += 1;
                }
                out.push(Tok::Atom(s, line));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
enum Sexpr {
    Atom(String),
    List(Vec<Sexpr>),
}

impl Sexpr {
    fn head(&self) -> Option<&str> {
        match self {
            Sexpr::List(items) => match items.first() {
                Some(Sexpr::Atom(a)) => Some(a),
                _ => None,
            },
            Sexpr::Atom(..) => None,
        }
    }

    fn render(&self) -> String {
        match self {
            Sexpr::Atom(a) => a.clone(),
            Sexpr::List(items) => {
                let inner: Vec<String> = items.iter().map(Sexpr::render).collect();
                format!("({})", inner.join(" "))
            }
        }
    }
}

fn build_forms(toks: &[Tok]) -> Result<Vec<Sexpr>> {
    let mut stack: Vec<(Vec<Sexpr>, usize)> = vec![(Vec::new(), 0)];
    for t in toks {
        match t {
            Tok::Open(line) => stack.push((Vec::new(), *line)),
            Tok::Close(line) => {
                if stack.len() == 1 {
                    return Err(Error::Parse {
                        line: *line,
                        message: "unexpected ')'".into(),
                    });
                }
                let (items, _) = stack.pop().expect("non-empty stack");
                stack
                    .last_mut()
                    .expect("root frame")
                    .0
                    .push(Sexpr::List(items));
            }
            Tok::Atom(a, _) => stack.last_mut().expect("root frame").0.push(Sexpr::Atom(a.clone())),
        }
    }
    if stack.len() > 1 {
        let (_, line) = stack.pop().expect("unclosed frame");
        return Err(Error::Parse {
            line,
            message: "unbalanced '(': missing ')'".into(),
        });
    }
    Ok(stack.pop().expect("root frame").0)
}

fn is_opcode_atom(atom: &str) -> bool {
    let Some(first) = atom.chars().next() else { return false };
    first.is_ascii_lowercase()
        && !atom.contains('=')
        && !atom.starts_with("nan")
        && !atom.starts_with("inf")
}

const SIGNATURE_HEADS: &[&str] = &["param", "result"];
const SKIPPED_HEADS: &[&str] = &["export", "import", "type", "local"];
const BLOCK_OPS: &[&str] = &["block", "loop", "if"];

/// Renders a block-type annotation such as `(result i32)` as one whitespace-free token.
fn annotation_token(items: &[Sexpr]) -> String {
    items
        .iter()
        .map(|s| match s {
            Sexpr::Atom(a) => a.clone(),
            list => list.render().replace(' ', ":"),
        })
        .collect::<Vec<_>>()
        .join(":")
}

fn is_annotation(s: &Sexpr) -> bool {
    matches!(s.head(), Some("result") | Some("param") | Some("type"))
}

/// Linearizes a sequence of body items (atoms in linear form and/or folded lists).
fn linearize(items: &[Sexpr], out: &mut Vec<Vec<String>>) {
    let mut i = 0;
    while i < items.len() {
        match &items[i] {
            Sexpr::Atom(a) if is_opcode_atom(a) => {
                let mut instr = vec![a.clone()];
                i += 1;
                while i < items.len() {
                    match &items[i] {
                        Sexpr::Atom(b) if !is_opcode_atom(b) => {
                            instr.push(b.clone());
                            i += 1;
                        }
                        list @ Sexpr::List(inner) if is_annotation(list) => {
                            instr.push(annotation_token(inner));
                            i += 1;
                        }
                        _ => break,
                    }
                }
                out.push(instr);
            }
            Sexpr::Atom(a) => {
                // Stray immediate without an opcode; keep it as its own line.
                out.push(vec![a.clone()]);
                i += 1;
            }
            Sexpr::List(inner) => {
                unfold(inner, out);
                i += 1;
            }
        }
    }
}

/// Post-order flattening of a folded instruction.
fn unfold(items: &[Sexpr], out: &mut Vec<Vec<String>>) {
    let Some(Sexpr::Atom(op)) = items.first() else {
        linearize(items, out);
        return;
    };
    let rest = &items[1..];
    if BLOCK_OPS.contains(&op.as_str()) {
        let mut header = vec![op.clone()];
        let mut j = 0;
        while j < rest.len() {
            match &rest[j] {
                Sexpr::Atom(a) if a.starts_with('$') => header.push(a.clone()),
                list @ Sexpr::List(inner) if is_annotation(list) => header.push(annotation_token(inner)),
                _ => break,
            }
            j += 1;
        }
        let body = &rest[j..];
        if op == "if" {
            let mut cond = Vec::new();
            let mut then_branch: Option<&[Sexpr]> = None;
            let mut else_branch: Option<&[Sexpr]> = None;
            for item in body {
                match item.head() {
                    Some("then") => {
                        if let Sexpr::List(inner) = item {
                            then_branch = Some(&inner[1..]);
                        }
                    }
                    Some("else") => {
                        if let Sexpr::List(inner) = item {
                            else_branch = Some(&inner[1..]);
                        }
                    }
                    _ => cond.push(item.clone()),
                }
            }
            linearize(&cond, out);
            out.push(header);
            if let Some(t) = then_branch {
                linearize(t, out);
            }
            if let Some(e) = else_branch {
                out.push(vec!["else".into()]);
                linearize(e, out);
            }
            out.push(vec!["end".into()]);
        } else {
            out.push(header);
            linearize(body, out);
            out.push(vec!["end".into()]);
        }
        return;
    }
    let mut instr = vec![op.clone()];
    let mut operands_exprs = Vec::new();
    for item in rest {
        match item {
            Sexpr::Atom(a) => instr.push(a.clone()),
            list @ Sexpr::List(inner) if is_annotation(list) => instr.push(annotation_token(inner)),
            list => operands_exprs.push(list.clone()),
        }
    }
    linearize(&operands_exprs, out);
    out.push(instr);
}

fn collect_funcs(forms: &[Sexpr], out: &mut Vec<WatFunction>) {
    for form in forms {
        let Sexpr::List(items) = form else { continue };
        match form.head() {
            Some("func") => out.push(function_from_items(&items[1..], out.len())),
            Some("module") => collect_funcs(&items[1..], out),
            _ => {}
        }
    }
}

fn function_from_items(items: &[Sexpr], index: usize) -> WatFunction {
    let mut rest = items;
    let name_or_index = match rest.first() {
        Some(Sexpr::Atom(a)) if a.starts_with('$') => {
            rest = &rest[1..];
            a.clone()
        }
        _ => index.to_string(),
    };
    let mut signature = Vec::new();
    let mut body = Vec::new();
    // Header forms only count before the first body instruction.
    let mut in_header = true;
    for item in rest {
        match item.head() {
            Some(h) if in_header && SIGNATURE_HEADS.contains(&h) => signature.push(item.render()),
            Some(h) if in_header && SKIPPED_HEADS.contains(&h) => {}
            _ => {
                in_header = false;
                body.push(item.clone());
            }
        }
    }
    let mut lines = Vec::new();
    linearize(&body, &mut lines);
    WatFunction {
        name_or_index,
        signature_text: signature.join(" "),
        body_lines: lines.into_iter().map(|l| l.join(" ")).collect(),
    }
}

/// Extracts every `(func ...)` form in document order, unfolding folded bodies.
pub fn extract_functions(wat: &str) -> Result<Vec<WatFunction>> {
    let toks = lex(wat)?;
    let forms = build_forms(&toks)?;
    let mut out = Vec::new();
    collect_funcs(&forms, &mut out);
    Ok(out)
}

/// Splits a linear body into instructions: one opcode plus its immediates per line.
pub fn segment_instructions(f: &WatFunction) -> Vec<Instruction> {
    f.body_lines
        .iter()
        .filter_map(|line| {
            let toks = lex(line).ok()?;
            let mut atoms = toks.into_iter().filter_map(|t| match t {
                Tok::Atom(a, _) => Some(a),
                _ => None,
            });
            let opcode = atoms.next()?;
            Some(Instruction {
                opcode,
                operands: atoms.collect(),
            })
        })
        .collect()
}

fn parse_int_literal(text: &str) -> Option<u128> {
    let cleaned: String = text.chars().filter(|c| *c != '_').collect();
    let unsigned = cleaned.strip_prefix(['-', '+']).unwrap_or(&cleaned);
    if let Some(hex) = unsigned.strip_prefix("0x") {
        u128::from_str_radix(hex, 16).ok()
    } else {
        unsigned.parse::<u128>().ok()
    }
}

fn normalize_large(literal: &str) -> Option<&'static str> {
    match parse_int_literal(literal) {
        Some(v) if v > LARGE_CONST_THRESHOLD => Some(ADDR_TOKEN),
        _ => None,
    }
}

fn normalize_operand(opcode: &str, operand: &str) -> String {
    if operand.starts_with('"') {
        return STR_TOKEN.to_string();
    }
    if opcode == "i32.const" || opcode == "i64.const" {
        if let Some(tok) = normalize_large(operand) {
            return tok.to_string();
        }
    }
    if let Some(value) = operand.strip_prefix("offset=") {
        if let Some(tok) = normalize_large(value) {
            return format!("offset={tok}");
        }
    }
    operand.to_string()
}

/// Applies the `[STR]` / `[ADDR]` rules to each instruction, keeping boundaries.
pub fn normalize_instructions(instrs: &[Instruction]) -> Vec<Instruction> {
    instrs
        .iter()
        .map(|ins| Instruction {
            opcode: ins.opcode.clone(),
            operands: ins
                .operands
                .iter()
                .map(|op| normalize_operand(&ins.opcode, op))
                .collect(),
        })
        .collect()
}

/// Flattened, normalized token stream.
pub fn normalize_tokens(instrs: &[Instruction]) -> Vec<String> {
    flatten(&normalize_instructions(instrs))
}

pub fn flatten(instrs: &[Instruction]) -> Vec<String> {
    let mut out = Vec::with_capacity(instrs.iter().map(Instruction::token_len).sum());
    for ins in instrs {
        out.push(ins.opcode.clone());
        out.extend(ins.operands.iter().cloned());
    }
    out
}

/// Renders functions back into a linear-form module.
pub fn render_module(functions: &[WatFunction]) -> String {
    let mut s = String::from("(module\n");
    for f in functions {
        s.push_str("  (func");
        if f.name_or_index.starts_with('$') {
            s.push(' ');
            s.push_str(&f.name_or_index);
        }
        if !f.signature_text.is_empty() {
            s.push(' ');
            s.push_str(&f.signature_text);
        }
        s.push('\n');
        for line in &f.body_lines {
            s.push_str("    ");
            s.push_str(&render_line(line));
            s.push('\n');
        }
        s.push_str("  )\n");
    }
    s.push_str(")\n");
    s
}

/// Annotation tokens are written back as s-expressions so the output re-parses.
fn render_line(line: &str) -> String {
    line.split_whitespace()
        .map(|tok| {
            let head = tok.split(':').next().unwrap_or("");
            if tok.contains(':') && ["result", "param", "type"].contains(&head) {
                format!("({})", tok.replace(':', " "))
            } else {
                tok.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_functions_in_order() {
        let wat = r#"(module
  (func $a (param i32) (result i32) local.get 0)
  (func $b nop))"#;
        let fs = extract_functions(wat).unwrap();
        assert_eq!(fs.len(), 2);
        assert_eq!(fs[0].name_or_index, "$a");
        assert_eq!(fs[0].signature_text, "(param i32) (result i32)");
        assert_eq!(fs[1].body_lines, vec!["nop"]);
    }

    #[test]
    fn empty_module() {
        assert!(extract_functions("(module)").unwrap().is_empty());
    }

    #[test]
    fn unnamed_functions_get_indices() {
        let fs = extract_functions("(module (func nop) (func nop))").unwrap();
        assert_eq!(fs[0].name_or_index, "0");
        assert_eq!(fs[1].name_or_index, "1");
    }

    #[test]
    fn folded_add_is_post_order() {
        let fs = extract_functions("(module (func (result i32) (i32.add (i32.const 1) (i32.const 2))))").unwrap();
        // Hand-unfolded: operands are pushed before the operator consumes them.
        assert_eq!(fs[0].body_lines, vec!["i32.const 1", "i32.const 2", "i32.add"]);
    }

    #[test]
    fn folded_if_with_branches() {
        let wat = "(module (func (param i32) (result i32)
            (if (result i32) (local.get 0)
              (then (i32.const 1))
              (else (i32.const 2)))))";
        let fs = extract_functions(wat).unwrap();
        assert_eq!(
            fs[0].body_lines,
            vec!["local.get 0", "if result:i32", "i32.const 1", "else", "i32.const 2", "end"]
        );
    }

    #[test]
    fn unbalanced_reports_line() {
        let err = extract_functions("(module\n  (func\n    nop\n)").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        let err = extract_functions("(module)\n)").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn locals_and_exports_are_not_body() {
        let wat = r#"(module (func $f (export "f") (param $x i32) (local i32) local.get $x drop))"#;
        let fs = extract_functions(wat).unwrap();
        assert_eq!(fs[0].body_lines, vec!["local.get $x", "drop"]);
        assert_eq!(fs[0].param_count(), 1);
        assert!(!fs[0].has_result());
    }

    #[test]
    fn segmentation_examples() {
        let f = WatFunction {
            name_or_index: "0".into(),
            signature_text: String::new(),
            body_lines: vec!["local.get 0".into(), "i32.add".into(), "i32.load8_u offset=4".into()],
        };
        let ins = segment_instructions(&f);
        assert_eq!(ins[0], Instruction::new("local.get", &["0"]));
        assert_eq!(ins[1], Instruction::new("i32.add", &[]));
        assert_eq!(ins[2], Instruction::new("i32.load8_u", &["offset=4"]));
    }

    #[test]
    fn memory_immediates_stay_with_opcode_in_linear_text() {
        let fs = extract_functions("(module (func local.get 0 i32.load offset=8 align=4 drop))").unwrap();
        let ins = segment_instructions(&fs[0]);
        assert_eq!(ins[1], Instruction::new("i32.load", &["offset=8", "align=4"]));
    }

    #[test]
    fn normalization_boundaries() {
        let n = |v: &str| normalize_tokens(&[Instruction::new("i32.const", &[v])]);
        assert_eq!(n("70000"), vec!["i32.const", "[ADDR]"]);
        assert_eq!(n("3"), vec!["i32.const", "3"]);
        assert_eq!(n("65535"), vec!["i32.const", "65535"]);
        assert_eq!(n("65536"), vec!["i32.const", "[ADDR]"]);
        assert_eq!(n("-65536"), vec!["i32.const", "[ADDR]"]);
        assert_eq!(n("-65535"), vec!["i32.const", "-65535"]);
        assert_eq!(n("0x10000"), vec!["i32.const", "[ADDR]"]);
        assert_eq!(n("0xffff"), vec!["i32.const", "0xffff"]);
    }

    #[test]
    fn strings_floats_and_indices() {
        let ins = vec![
            Instruction::new("call", &["\"hello world\""]),
            Instruction::new("f32.const", &["100000.5"]),
            Instruction::new("local.get", &["70000"]),
            Instruction::new("i32.store", &["offset=70000"]),
        ];
        assert_eq!(
            normalize_tokens(&ins),
            vec!["call", "[STR]", "f32.const", "100000.5", "local.get", "70000", "i32.store", "offset=[ADDR]"]
        );
    }

    #[test]
    fn render_round_trip() {
        let wat = "(module (func $f (param i32) (result i32) (block (result i32) (i32.add (local.get 0) (i32.const 70000)))))";
        let fs = extract_functions(wat).unwrap();
        let again = extract_functions(&render_module(&fs)).unwrap();
        assert_eq!(segment_instructions(&fs[0]), segment_instructions(&again[0]));
        assert_eq!(fs[0].signature_text, again[0].signature_text);
    }
}
