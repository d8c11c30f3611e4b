use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn wasmrev() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_wasmrev"));
    c.env_remove("WASMREV_CC").env_remove("WASMREV_WASM2TEXT").env("RUST_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    wasmrev().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .flatten()
        .filter(|e| e.path().is_file())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect()
}

const TINY: [&str; 8] = ["--layers", "1", "--hidden", "16", "--heads", "2", "--max-len", "128"];

/// Synthetic corpus and vocabulary in `dir/data`.
fn data(dir: &Path, n: &str) -> PathBuf {
    let d = dir.join("data");
    ok(&["build-corpus", "--synthetic", n, "--out-dir", p(&d)]);
    ok(&["build-vocab", "--corpus", p(&d.join("corpus.jsonl")), "--out-dir", p(&d)]);
    d
}

#[test]
fn build_corpus_is_deterministic() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let out_a = ok(&["--seed", "3", "build-corpus", "--synthetic", "40", "--out-dir", p(a.path())]);
    let out_b = ok(&["build-corpus", "--synthetic", "40", "--seed", "3", "--out-dir", p(b.path())]);
    assert_eq!(out_a, out_b);
    assert!(out_a.contains("samples=40"));
    let fa = files(a.path());
    assert_eq!(fa, files(b.path()));
    for name in ["corpus.jsonl", "stats.json", "split.json", "fpi.train.jsonl", "tr.test.jsonl", "ws.valid.jsonl", "fpi_labels.txt"] {
        assert!(fa.contains_key(name), "missing {name}");
    }
    let c = TempDir::new().unwrap();
    ok(&["--seed", "4", "build-corpus", "--synthetic", "40", "--out-dir", p(c.path())]);
    assert_ne!(fa["corpus.jsonl"], files(c.path())["corpus.jsonl"]);
}

#[test]
fn pretrain_defaults_and_epoch_files() {
    let dir = TempDir::new().unwrap();
    let d = data(dir.path(), "4");
    let corpus = d.join("corpus.jsonl");
    let vocab = d.join("vocab.txt");
    let out = dir.path().join("pre");
    let stdout = ok(&["pretrain", "--corpus", p(&corpus), "--vocab", p(&vocab), "--out-dir", p(&out)]);
    assert!(stdout.starts_with("layers=8 hidden=128 heads=8 lr=0.0005 batch=32 epochs=5\n"), "{stdout}");
    let names = files(&out);
    for e in 1..=5 {
        assert!(names.contains_key(&format!("checkpoint-epoch{e}.bin")));
        assert!(names.contains_key(&format!("optimizer-epoch{e}.bin")));
    }
    assert!(names.contains_key("pretrained.bin") && names.contains_key("curve.csv"));
    let curve = String::from_utf8(names["curve.csv"].clone()).unwrap();
    assert_eq!(curve.lines().next(), Some("step,l_m3lm,l_ssi,l_rii,total,lr"));
    assert_eq!(curve.lines().count(), 6);

    let one = dir.path().join("one");
    let mut args = vec!["pretrain", "--corpus", p(&corpus), "--vocab", p(&vocab), "--out-dir", p(&one), "--epochs", "1"];
    args.extend(TINY);
    ok(&args);
    let names = files(&one);
    assert!(names.contains_key("checkpoint-epoch1.bin"));
    assert!(!names.contains_key("checkpoint-epoch2.bin"));
}

#[test]
fn config_file_applies_and_flags_override() {
    let dir = TempDir::new().unwrap();
    let d = data(dir.path(), "8");
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, "# toy run\nlayers = 1\nhidden = 16\nheads = 2\nmax_len = 128\nepochs = 3\nbatch_size = 4\nround_robin = true\n").unwrap();
    let out = dir.path().join("pre");
    let stdout = ok(&[
        "--config",
        p(&cfg),
        "pretrain",
        "--corpus",
        p(&d.join("corpus.jsonl")),
        "--vocab",
        p(&d.join("vocab.txt")),
        "--epochs",
        "1",
        "--out-dir",
        p(&out),
    ]);
    assert!(stdout.starts_with("layers=1 hidden=16 heads=2 lr=0.0005 batch=4 epochs=1\n"), "{stdout}");

    fs::write(&cfg, "layers 1\n").unwrap();
    let bad = run(&["--config", p(&cfg), "build-vocab", "--corpus", p(&d.join("corpus.jsonl"))]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["pretrain"]).status.code(), Some(2));
    assert_eq!(run(&["finetune", "xyz", "--train", "a", "--valid", "b", "--vocab", "c", "--from-scratch"]).status.code(), Some(2));
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(run(&["build-vocab", "--corpus", p(&missing), "--out-dir", p(dir.path())]).status.code(), Some(2));

    let d = data(dir.path(), "8");
    let module = dir.path().join("m.wat");
    fs::write(&module, "(module (func $f (result i32) i32.const 1))").unwrap();
    let no_model = run(&["report", "--input", p(&module), "--vocab", p(&d.join("vocab.txt"))]);
    assert_eq!(no_model.status.code(), Some(2));

    let sources = dir.path().join("src.jsonl");
    fs::write(&sources, r#"{"project_id":"p","function_name":"f","doc_text":"adds two numbers together","source_text":"int f(int a,int b){return a+b;}"}"#).unwrap();
    let no_cc = run(&["build-corpus", "--from-sources", p(&sources), "--out-dir", p(dir.path())]);
    assert_eq!(no_cc.status.code(), Some(2), "{}", String::from_utf8_lossy(&no_cc.stderr));

    // A checkpoint of the wrong kind is a runtime failure.
    let not_a_model = dir.path().join("junk.bin");
    fs::write(&not_a_model, b"junk").unwrap();
    let junk = run(&["report", "--input", p(&module), "--vocab", p(&d.join("vocab.txt")), "--fpi", p(&not_a_model)]);
    assert_eq!(junk.status.code(), Some(1));
}

#[test]
fn corrupt_corpus_line_is_reported() {
    let dir = TempDir::new().unwrap();
    let d = data(dir.path(), "4");
    let text = fs::read_to_string(d.join("corpus.jsonl")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.insert(2, "{\"project_id\": 7");
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, lines.join("\n")).unwrap();
    let out = run(&["build-vocab", "--corpus", p(&bad), "--out-dir", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.jsonl:3:"), "{err}");
}

fn snapshot(paths: &[&Path]) -> Vec<Vec<u8>> {
    paths.iter().map(|p| fs::read(p).unwrap()).collect()
}

#[test]
fn train_evaluate_and_report() {
    let dir = TempDir::new().unwrap();
    let d = data(dir.path(), "24");
    let (corpus, vocab, split) = (d.join("corpus.jsonl"), d.join("vocab.txt"), d.join("split.json"));
    let pre = dir.path().join("pre");
    let inputs = [corpus.as_path(), vocab.as_path(), split.as_path()];
    let before = snapshot(&inputs);
    let mut args = vec!["pretrain", "--corpus", p(&corpus), "--vocab", p(&vocab), "--split", p(&split), "--epochs", "1", "--out-dir", p(&pre)];
    args.extend(TINY);
    ok(&args);
    // Resuming from the last epoch file has nothing left to do but must succeed.
    let mut resume = args.clone();
    resume.extend(["--resume", "1"]);
    ok(&resume);
    assert_eq!(snapshot(&inputs), before);

    let ft = dir.path().join("ft");
    let init = pre.join("pretrained.bin");
    let labels = d.join("fpi_labels.txt");
    for task in ["fpi", "tr", "ws"] {
        let (train, valid, test) = (
            d.join(format!("{task}.train.jsonl")),
            d.join(format!("{task}.valid.jsonl")),
            d.join(format!("{task}.test.jsonl")),
        );
        let data_files = [train.as_path(), valid.as_path(), init.as_path()];
        let before = snapshot(&data_files);
        let mut args = vec!["finetune", task, "--train", p(&train), "--valid", p(&valid), "--vocab", p(&vocab), "--init", p(&init)];
        args.extend(["--labels", p(&labels), "--epochs", "1", "--lr", "0.001", "--out-dir", p(&ft)]);
        args.extend(TINY);
        let stdout = ok(&args);
        assert!(stdout.contains(&format!("task={task}")) && stdout.contains("init=pretrained"), "{stdout}");
        assert_eq!(snapshot(&data_files), before);
        let model = ft.join(format!("{task}.bin"));
        let summary = ok(&["eval", task, "--model", p(&model), "--data", p(&test), "--vocab", p(&vocab), "--max-len", "128", "--out-dir", p(&ft)]);
        let parsed: serde_json::Value = serde_json::from_str(&summary).unwrap();
        assert!(parsed.is_object());
        assert!(ft.join(format!("{task}-eval.jsonl")).exists());
    }

    let module = dir.path().join("m.wat");
    fs::write(
        &module,
        "(module\n  (func $add (param i32 i32) (result i32)\n    local.get 0\n    local.get 1\n    i32.add)\n  (func $zero (result i32)\n    i32.const 70000))\n",
    )
    .unwrap();
    let rep = dir.path().join("rep");
    let m = |t: &str| ft.join(format!("{t}.bin"));
    let (fpi, tr, ws) = (m("fpi"), m("tr"), m("ws"));
    let args = ["report", "--input", p(&module), "--vocab", p(&vocab), "--fpi", p(&fpi), "--tr", p(&tr), "--ws", p(&ws), "--max-len", "128", "--out-dir", p(&rep)];
    let text = ok(&args);
    assert!(text.contains("$add") && text.contains("$zero"), "{text}");
    let jsonl = fs::read_to_string(rep.join("report.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 2);
    for line in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("function").is_some(), "{line}");
    }
    assert_eq!(fs::read_to_string(rep.join("report.txt")).unwrap(), text);
    // Same inputs, same bytes.
    let first = files(&rep);
    ok(&args);
    assert_eq!(files(&rep), first);

    // Only one model: the other sections are skipped, not failed.
    let only = ok(&["report", "--input", p(&module), "--vocab", p(&vocab), "--fpi", p(&fpi), "--max-len", "128", "--out-dir", p(&rep)]);
    assert!(only.contains("skipped"), "{only}");

    let infer = ok(&["infer", "fpi", "--model", p(&fpi), "--vocab", p(&vocab), "--input", p(&module), "--max-len", "128"]);
    assert_eq!(infer.lines().count(), 2);

    let garbage = dir.path().join("garbage.wasm");
    fs::write(&garbage, b"\0asm\x01\0\0\0\xff\xff").unwrap();
    let out = run(&["report", "--input", p(&garbage), "--vocab", p(&vocab), "--fpi", p(&fpi), "--out-dir", p(&rep)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("<module>"));
}

fn wasm_clang() -> Option<PathBuf> {
    let probe = TempDir::new().ok()?;
    let src = probe.path().join("t.c");
    fs::write(&src, "int f(int x){return x+1;}").ok()?;
    let out = Command::new("clang")
        .args(["--target=wasm32", "-nostdlib", "-Wl,--no-entry", "-Wl,--export-all", "-O1", "-o"])
        .arg(probe.path().join("t.wasm"))
        .arg(&src)
        .output()
        .ok()?;
    out.status.success().then(|| PathBuf::from("clang"))
}

#[test]
fn source_mode_with_clang() {
    let Some(cc) = wasm_clang() else {
        eprintln!("clang with a wasm32 target not available; skipping");
        return;
    };
    let dir = TempDir::new().unwrap();
    let sources = dir.path().join("src.jsonl");
    let records = [
        ("p1", "add", "Adds two integers and returns the sum.", "int add(int a, int b) { return a + b; }"),
        ("p2", "neg", "Negates the given integer value.", "int neg(int a) { return -a; }"),
        ("p2", "broken", "This one does not compile at all.", "int broken( { return; }"),
    ];
    let lines: Vec<String> = records
        .iter()
        .map(|(pid, f, doc, src)| {
            serde_json::json!({"project_id": pid, "function_name": f, "doc_text": doc, "source_text": src}).to_string()
        })
        .collect();
    fs::write(&sources, lines.join("\n")).unwrap();
    let w2t = env!("CARGO_BIN_EXE_wasmrev-wasm2text");
    let out = ok(&["build-corpus", "--from-sources", p(&sources), "--cc", p(&cc), "--wasm2text", w2t, "--opt-levels", "O0,O2", "--out-dir", p(dir.path())]);
    assert!(out.contains("compile_failures=2"), "{out}");
    assert!(out.contains("samples=4"), "{out}");
    let corpus = fs::read_to_string(dir.path().join("corpus.jsonl")).unwrap();
    assert_eq!(corpus.lines().count(), 4);
    assert!(corpus.contains("i32.add"));
}
