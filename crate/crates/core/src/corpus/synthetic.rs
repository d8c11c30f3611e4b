//! Template-generated corpus for toolchain-free runs.
//!
//! Each function comes from one of eight template families. Documentation,
//! C source and Wasm are generated from the same parameters so the three views
//! agree (constants appear in all three, pointer parameters are loaded through
//! memory, float functions use `f32`/`f64` opcodes). The `O0` variant spills
//! parameters to a stack frame the way unoptimized clang output does; other
//! levels share the compact body.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{FpiExample, TrExample, WsExample};
use crate::wat::Instruction;

use super::{MultiModalSample, OptLevel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    Arithmetic,
    Affine,
    StringLength,
    ArraySum,
    CompareSelect,
    FloatMath,
    MemoryFill,
    GlobalState,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::Arithmetic,
        Family::Affine,
        Family::StringLength,
        Family::ArraySum,
        Family::CompareSelect,
        Family::FloatMath,
        Family::MemoryFill,
        Family::GlobalState,
    ];

    pub fn label(self) -> usize {
        Family::ALL.iter().position(|f| *f == self).expect("listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Arithmetic => "arithmetic",
            Family::Affine => "affine",
            Family::StringLength => "string_length",
            Family::ArraySum => "array_sum",
            Family::CompareSelect => "compare_select",
            Family::FloatMath => "float_math",
            Family::MemoryFill => "memory_fill",
            Family::GlobalState => "global_state",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CType {
    Int,
    Unsigned,
    Char,
    Float,
    Double,
    CharPtr,
    ConstCharPtr,
    ConstIntPtr,
    Void,
}

impl CType {
    pub fn c_name(self) -> &'static str {
        match self {
            CType::Int => "int",
            CType::Unsigned => "unsigned",
            CType::Char => "char",
            CType::Float => "float",
            CType::Double => "double",
            CType::CharPtr => "char *",
            CType::ConstCharPtr => "const char *",
            CType::ConstIntPtr => "const int *",
            CType::Void => "void",
        }
    }

    /// Token sequence in the type language used for type recovery.
    pub fn type_tokens(self) -> Vec<String> {
        let t: &[&str] = match self {
            CType::Int => &["primitive", "int"],
            CType::Unsigned => &["primitive", "unsigned", "int"],
            CType::Char => &["primitive", "char"],
            CType::Float => &["primitive", "float"],
            CType::Double => &["primitive", "double"],
            CType::CharPtr => &["pointer", "primitive", "char"],
            CType::ConstCharPtr => &["pointer", "const", "primitive", "char"],
            CType::ConstIntPtr => &["pointer", "const", "primitive", "int"],
            CType::Void => &["void"],
        };
        t.iter().map(|s| s.to_string()).collect()
    }

    fn wasm_prefix(self) -> &'static str {
        match self {
            CType::Float => "f32",
            CType::Double => "f64",
            _ => "i32",
        }
    }
}

/// Slot marker tokens that start a type-recovery decode.
pub fn slot_token(param: Option<usize>) -> String {
    match param {
        None => "[RET]".to_string(),
        Some(i) => format!("[P{i}]"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFunction {
    pub family: Family,
    pub project_id: String,
    pub name: String,
    pub doc: String,
    pub source: String,
    pub params: Vec<CType>,
    pub ret: CType,
    body: Vec<Instruction>,
}

fn ins(op: &str, operands: &[&str]) -> Instruction {
    Instruction::new(op, operands)
}

fn parse_body(text: &str) -> Vec<Instruction> {
    text.lines().filter_map(Instruction::parse_line).collect()
}

impl SyntheticFunction {
    pub fn wasm_at(&self, level: OptLevel) -> Vec<Instruction> {
        if level != OptLevel::O0 || self.params.is_empty() {
            return self.body.clone();
        }
        // Unoptimized form: spill parameters into a 16-byte frame, reload on use.
        let locals = self
            .body
            .iter()
            .filter(|i| i.opcode.starts_with("local."))
            .filter_map(|i| i.operands.first()?.parse::<usize>().ok())
            .max()
            .map_or(0, |m| m + 1)
            .max(self.params.len());
        let fp = locals.to_string();
        let slot = |i: usize| format!("offset={}", 12 - 4 * i);
        let mut out = vec![
            ins("global.get", &["0"]),
            ins("i32.const", &["16"]),
            ins("i32.sub", &[]),
            ins("local.set", &[&fp]),
        ];
        for (i, ty) in self.params.iter().enumerate() {
            out.push(ins("local.get", &[&fp]));
            out.push(ins("local.get", &[&i.to_string()]));
            out.push(ins(&format!("{}.store", ty.wasm_prefix()), &[&slot(i)]));
        }
        for instr in &self.body {
            let param = (instr.opcode == "local.get")
                .then(|| instr.operands.first()?.parse::<usize>().ok())
                .flatten()
                .filter(|&p| p < self.params.len());
            match param {
                Some(p) => {
                    out.push(ins("local.get", &[&fp]));
                    out.push(ins(&format!("{}.load", self.params[p].wasm_prefix()), &[&slot(p)]));
                }
                None => out.push(instr.clone()),
            }
        }
        out
    }

    pub fn sample(&self, level: OptLevel) -> MultiModalSample {
        MultiModalSample::new(&self.project_id, &self.doc, &self.source, &self.wasm_at(level), level)
    }

    /// `(slot marker, type tokens)` for the return value and every parameter.
    pub fn type_slots(&self) -> Vec<(String, Vec<String>)> {
        let mut out = vec![(slot_token(None), self.ret.type_tokens())];
        for (i, p) in self.params.iter().enumerate() {
            out.push((slot_token(Some(i)), p.type_tokens()));
        }
        out
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    items.choose(rng).expect("non-empty choice list")
}

fn generate_one(family: Family, project_id: String, rng: &mut ChaCha8Rng) -> SyntheticFunction {
    let suffix = *pick(rng, &["", "_fn", "_impl", "_v2", "_fast"]);
    match family {
        Family::Arithmetic => {
            let ops = [
                ("+", "i32.add", "sum", "add"),
                ("-", "i32.sub", "difference", "sub"),
                ("*", "i32.mul", "product", "mul"),
                ("&", "i32.and", "bitwise and", "and"),
                ("|", "i32.or", "bitwise or", "or"),
                ("^", "i32.xor", "exclusive or", "xor"),
            ];
            let (sym, opcode, word, stem) = *pick(rng, &ops);
            let (a, b) = *pick(rng, &[("a", "b"), ("x", "y"), ("lhs", "rhs"), ("left", "right")]);
            let name = format!("{stem}_{}{suffix}", pick(rng, &["ints", "values", "pair"]));
            let doc = match rng.gen_range(0..3) {
                0 => format!("Returns the {word} of two integers."),
                1 => format!("Computes the {word} of {a} and {b}."),
                _ => format!("Yields the {word} of the two integer arguments."),
            };
            SyntheticFunction {
                family,
                project_id,
                source: format!("int {name}(int {a}, int {b}) {{\n  return {a} {sym} {b};\n}}\n"),
                name,
                doc,
                params: vec![CType::Int, CType::Int],
                ret: CType::Int,
                body: vec![ins("local.get", &["0"]), ins("local.get", &["1"]), ins(opcode, &[])],
            }
        }
        Family::Affine => {
            let k = rng.gen_range(2..10);
            let c = rng.gen_range(1..21);
            let x = *pick(rng, &["x", "value", "n"]);
            let name = format!("{}{suffix}", pick(rng, &["scale_add", "affine", "linear_map"]));
            let doc = match rng.gen_range(0..3) {
                0 => format!("Multiplies {x} by {k} and adds {c}."),
                1 => format!("Scales the input by {k} then adds {c}."),
                _ => format!("Returns {k} times the value plus {c}."),
            };
            SyntheticFunction {
                family,
                project_id,
                source: format!("int {name}(int {x}) {{\n  return {x} * {k} + {c};\n}}\n"),
                name,
                doc,
                params: vec![CType::Int],
                ret: CType::Int,
                body: vec![
                    ins("local.get", &["0"]),
                    ins("i32.const", &[&k.to_string()]),
                    ins("i32.mul", &[]),
                    ins("i32.const", &[&c.to_string()]),
                    ins("i32.add", &[]),
                ],
            }
        }
        Family::StringLength => {
            let s = *pick(rng, &["s", "str", "text"]);
            let name = format!("{}{suffix}", pick(rng, &["str_len", "string_length", "count_chars"]));
            let doc = match rng.gen_range(0..3) {
                0 => "Counts the characters in a null terminated string.".to_string(),
                1 => format!("Returns the length of the string {s}."),
                _ => "Computes how many bytes precede the terminating zero.".to_string(),
            };
            SyntheticFunction {
                family,
                project_id,
                source: format!(
                    "unsigned {name}(const char *{s}) {{\n  unsigned n = 0;\n  while ({s}[n]) n++;\n  return n;\n}}\n"
                ),
                name,
                doc,
                params: vec![CType::ConstCharPtr],
                ret: CType::Unsigned,
                body: parse_body(
                    "i32.const 0\nlocal.set 1\nblock\nloop\nlocal.get 0\nlocal.get 1\ni32.add\ni32.load8_u\ni32.eqz\n\
                     br_if 1\nlocal.get 1\ni32.const 1\ni32.add\nlocal.set 1\nbr 0\nend\nend\nlocal.get 1",
                ),
            }
        }
        Family::ArraySum => {
            let (arr, n) = *pick(rng, &[("arr", "n"), ("values", "count"), ("data", "len")]);
            let name = format!("{}{suffix}", pick(rng, &["sum_array", "array_total", "accumulate"]));
            let doc = match rng.gen_range(0..3) {
                0 => format!("Sums the first {n} elements of an integer array."),
                1 => format!("Adds up all values in {arr}."),
                _ => "Returns the total of an array of integers.".to_string(),
            };
            SyntheticFunction {
                family,
                project_id,
                source: format!(
                    "int {name}(const int *{arr}, int {n}) {{\n  int total = 0;\n  for (int i = 0; i < {n}; i++) total += {arr}[i];\n  return total;\n}}\n"
                ),
                name,
                doc,
                params: vec![CType::ConstIntPtr, CType::Int],
                ret: CType::Int,
                body: parse_body(
                    "i32.const 0\nlocal.set 2\ni32.const 0\nlocal.set 3\nblock\nloop\nlocal.get 3\nlocal.get 1\n\
                     i32.ge_s\nbr_if 1\nlocal.get 2\nlocal.get 0\nlocal.get 3\ni32.const 2\ni32.shl\ni32.add\n\
                     i32.load\ni32.add\nlocal.set 2\nlocal.get 3\ni32.const 1\ni32.add\nlocal.set 3\nbr 0\nend\nend\n\
                     local.get 2",
                ),
            }
        }
        Family::CompareSelect => {
            let is_max = rng.gen_bool(0.5);
            let (a, b) = *pick(rng, &[("a", "b"), ("x", "y"), ("first", "second")]);
            let (word, extreme, cmp, opcode, stem) = if is_max {
                ("larger", "maximum", ">", "i32.gt_s", "max")
            } else {
                ("smaller", "minimum", "<", "i32.lt_s", "min")
            };
            let name = format!("{stem}_{}{suffix}", pick(rng, &["int", "of", "value"]));
            let doc = match rng.gen_range(0..2) {
                0 => format!("Returns the {word} of two integers."),
                _ => format!("Picks the {extreme} of {a} and {b}."),
            };
            SyntheticFunction {
                family,
                project_id,
                source: format!("int {name}(int {a}, int {b}) {{\n  return {a} {cmp} {b} ? {a} : {b};\n}}\n"),
                name,
                doc,
                params: vec![CType::Int, CType::Int],
                ret: CType::Int,
                body: vec![
                    ins("local.get", &["0"]),
                    ins("local.get", &["1"]),
                    ins("local.get", &["0"]),
                    ins("local.get", &["1"]),
                    ins(opcode, &[]),
                    ins("select", &[]),
                ],
            }
        }
        Family::FloatMath => {
            let ty = *pick(rng, &[CType::Float, CType::Double]);
            let k = rng.gen_range(1..10);
            let prefix = ty.wasm_prefix();
            let c = ty.c_name();
            let name = format!("{}{suffix}", pick(rng, &["fma_const", "mul_add", "scale_offset"]));
            let literal = if ty == CType::Float { format!("{k}.0f") } else { format!("{k}.0") };
            let doc = match rng.gen_range(0..2) {
                0 => format!("Multiplies two {c} values and adds {k}."),
                _ => format!("Returns the product of the arguments plus {k}."),
            };
            SyntheticFunction {
                family,
                project_id,
                source: format!("{c} {name}({c} x, {c} y) {{\n  return x * y + {literal};\n}}\n"),
                name,
                doc,
                params: vec![ty, ty],
                ret: ty,
                body: vec![
                    ins("local.get", &["0"]),
                    ins("local.get", &["1"]),
                    ins(&format!("{prefix}.mul"), &[]),
                    ins(&format!("{prefix}.const"), &[&k.to_string()]),
                    ins(&format!("{prefix}.add"), &[]),
                ],
            }
        }
        Family::MemoryFill => {
            let (buf, n, v) = *pick(rng, &[("buf", "n", "v"), ("dst", "len", "byte"), ("p", "count", "c")]);
            let name = format!("{}{suffix}", pick(rng, &["fill_bytes", "mem_set", "set_buffer"]));
            let doc = match rng.gen_range(0..2) {
                0 => format!("Fills a buffer with {n} copies of a byte."),
                _ => format!("Sets every byte of {buf} to {v}."),
            };
            SyntheticFunction {
                family,
                project_id,
                source: format!(
                    "void {name}(char *{buf}, int {n}, char {v}) {{\n  for (int i = 0; i < {n}; i++) {buf}[i] = {v};\n}}\n"
                ),
                name,
                doc,
                params: vec![CType::CharPtr, CType::Int, CType::Char],
                ret: CType::Void,
                body: parse_body(
                    "i32.const 0\nlocal.set 3\nblock\nloop\nlocal.get 3\nlocal.get 1\ni32.ge_s\nbr_if 1\n\
                     local.get 0\nlocal.get 3\ni32.add\nlocal.get 2\ni32.store8\nlocal.get 3\ni32.const 1\n\
                     i32.add\nlocal.set 3\nbr 0\nend\nend",
                ),
            }
        }
        Family::GlobalState => {
            let k = rng.gen_range(1..6);
            let addr = 65536 + 16 * rng.gen_range(1..64);
            let var = *pick(rng, &["counter", "total", "ticks"]);
            let name = format!("{}{suffix}", pick(rng, &["bump", "next_id", "advance"]));
            let doc = match rng.gen_range(0..2) {
                0 => format!("Increments the global {var} by {k} and returns it."),
                _ => format!("Advances the shared {var} by {k}."),
            };
            let offset = format!("offset={addr}");
            SyntheticFunction {
                family,
                project_id,
                source: format!("static int {var};\nint {name}(void) {{\n  {var} += {k};\n  return {var};\n}}\n"),
                name,
                doc,
                params: vec![],
                ret: CType::Int,
                body: vec![
                    ins("i32.const", &["0"]),
                    ins("i32.const", &["0"]),
                    ins("i32.load", &[&offset]),
                    ins("i32.const", &[&k.to_string()]),
                    ins("i32.add", &[]),
                    ins("local.tee", &["0"]),
                    ins("i32.store", &[&offset]),
                    ins("local.get", &["0"]),
                ],
            }
        }
    }
}

/// `n` functions, four per project, families drawn uniformly.
pub fn gen_synthetic_functions(n: usize, seed: u64) -> Vec<SyntheticFunction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let family = *pick(&mut rng, &Family::ALL);
            generate_one(family, format!("proj{:03}", i / 4), &mut rng)
        })
        .collect()
}

/// `n` samples: each function contributes an `O0` sample and one optimized sample.
pub fn gen_synthetic_corpus(n: usize, seed: u64) -> Vec<MultiModalSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    gen_synthetic_functions(n.div_ceil(2), seed)
        .iter()
        .flat_map(|f| {
            let optimized = *pick(&mut rng, &OptLevel::ALL[1..]);
            [f.sample(OptLevel::O0), f.sample(optimized)]
        })
        .take(n)
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct SyntheticTasks {
    pub fpi: Vec<FpiExample>,
    pub tr: Vec<TrExample>,
    pub ws: Vec<WsExample>,
    pub fpi_labels: Vec<String>,
}

/// Fine-tuning examples for `n` synthetic functions, each at one random opt level.
pub fn synthetic_task_data(n: usize, seed: u64) -> SyntheticTasks {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a5c);
    let mut out = SyntheticTasks {
        fpi_labels: Family::ALL.iter().map(|f| f.name().to_string()).collect(),
        ..Default::default()
    };
    for (i, f) in gen_synthetic_functions(n, seed).iter().enumerate() {
        let level = *pick(&mut rng, &OptLevel::ALL);
        let sample = f.sample(level);
        let id = format!("{}/{}#{i}", f.project_id, f.name);
        out.fpi.push(FpiExample::new(&id, &f.project_id, &sample.wasm, f.family.label()));
        for (slot, types) in f.type_slots() {
            out.tr.push(TrExample::new(&format!("{id}:{slot}"), &f.project_id, &sample.wasm, &slot, types));
        }
        out.ws.push(WsExample::new(&id, &f.project_id, &sample.wasm, &f.doc));
    }
    out
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(gen_synthetic_corpus(1, 0), gen_synthetic_corpus(1, 0));
        assert_ne!(gen_synthetic_corpus(8, 0), gen_synthetic_corpus(8, 1));
    }

    #[test]
    fn sixty_four_valid_samples() {
        let c = gen_synthetic_corpus(64, 3);
        assert_eq!(c.len(), 64);
        for s in &c {
            assert!(s.doc_tokens.len() >= 3, "{}", s.doc);
            assert!(!s.wasm.is_empty());
            assert!(!s.project_id.is_empty());
        }
        let families: BTreeSet<Family> = gen_synthetic_functions(32, 3).iter().map(|f| f.family).collect();
        assert!(families.len() >= 4);
    }

    #[test]
    fn variants_share_source() {
        let c = gen_synthetic_corpus(2, 9);
        assert_eq!(c[0].source_key(), c[1].source_key());
        assert_eq!(c[0].opt_level, OptLevel::O0);
        assert_ne!(c[1].opt_level, OptLevel::O0);
    }

    #[test]
    fn unoptimized_spills_parameters() {
        let f = generate_one(Family::Affine, "p".into(), &mut ChaCha8Rng::seed_from_u64(0));
        let o0 = f.wasm_at(OptLevel::O0);
        let o2 = f.wasm_at(OptLevel::O2);
        assert_eq!(o0[0], ins("global.get", &["0"]));
        assert!(o0.len() > o2.len());
        assert!(o0.contains(&ins("i32.load", &["offset=12"])));
        assert!(!o0.contains(&ins("local.get", &["0"])) || o0.iter().filter(|i| **i == ins("local.get", &["0"])).count() == 1);
    }

    #[test]
    fn global_state_uses_address_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = generate_one(Family::GlobalState, "p".into(), &mut rng);
        let s = f.sample(OptLevel::O2);
        assert!(s.wasm_tokens().contains(&"offset=[ADDR]".to_string()));
    }

    #[test]
    fn task_data_lines_up() {
        let t = synthetic_task_data(10, 4);
        assert_eq!(t.fpi.len(), 10);
        assert_eq!(t.ws.len(), 10);
        assert!(t.tr.len() >= 10);
        assert!(t.fpi.iter().all(|e| e.label < 8));
        assert_eq!(t.fpi_labels.len(), 8);
    }
}
