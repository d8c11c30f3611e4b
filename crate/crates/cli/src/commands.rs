use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use wasmrev_core::corpus::{
    build_from_sources, corpus_vocabulary, gen_synthetic_corpus, read_corpus, read_jsonl, split_by_project,
    split_ids_by_project, synthetic_task_data, write_corpus, write_jsonl, BuildStats, CorpusSplit, OptLevel,
    ToolchainConfig,
};
use wasmrev_core::eval::predict::{
    build_type_vocab, evaluate_fpi, evaluate_tr, evaluate_ws, fpi_task_set, tr_task_set, ws_task_set, EvalRecord,
    EvalSummary,
};
use wasmrev_core::eval::report::{build_report, render_text, ReportEntry, ReportModels, Section};
use wasmrev_core::eval::{read_examples, write_examples, FpiExample, TrExample, WsExample};
use wasmrev_core::model::checkpoint::{load_checkpoint, save_checkpoint};
use wasmrev_core::model::is_encoder_tensor;
use wasmrev_core::pretrain::EncodedSample;
use wasmrev_core::training::{
    epoch_checkpoint, epoch_optimizer, finetune_loop, pretrain_loop, read_curve, write_curve, AdamState, PretrainIo,
    TaskSet,
};
use wasmrev_core::{DecoderConfig, EncoderConfig, Parameters, RawFunctionRecord, TaskKind, TaskModel, TrainConfig, Vocabulary};

use crate::{
    BuildCorpusArgs, BuildVocabArgs, Cli, Command, EvalArgs, FinetuneArgs, InferArgs, ModelArgs, OptimArgs,
    PretrainArgs, ReportArgs, Task, UsageError,
};

const SPLIT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn ensure_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn out_path(cli: &Cli, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    Ok(cli.out_dir.join(name))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::BuildCorpus(a) => build_corpus(cli, a),
        Command::BuildVocab(a) => build_vocab(cli, a),
        Command::Pretrain(a) => pretrain(cli, a),
        Command::Finetune(a) => finetune(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Infer(a) => infer(cli, a),
        Command::Report(a) => report(cli, a),
    }
}

fn print_stats(stats: &BuildStats) {
    println!("input_records={}", stats.input_records);
    println!("dedup_removed={}", stats.dedup_removed);
    println!("compile_failures={}", stats.compile_failures);
    println!("short_doc_removed={}", stats.short_doc_removed);
    println!("samples={}", stats.samples);
    for (level, n) in &stats.per_opt_level {
        println!("samples[{level}]={n}");
    }
}

fn write_task_split<T: Serialize>(cli: &Cli, name: &str, items: &[T], projects: &[&str]) -> Result<()> {
    let split = split_ids_by_project(projects, SPLIT_RATIOS, cli.seed)?;
    for (part, ids) in [("train", &split.train), ("valid", &split.validation), ("test", &split.test)] {
        let rows: Vec<&T> = ids.iter().map(|&i| &items[i]).collect();
        write_examples(&out_path(cli, &format!("{name}.{part}.jsonl"))?, &rows)?;
    }
    Ok(())
}

fn build_corpus(cli: &Cli, a: &BuildCorpusArgs) -> Result<u8> {
    let (samples, stats) = if let Some(n) = a.synthetic {
        if n == 0 {
            return Err(usage("--synthetic needs at least one sample"));
        }
        let samples = gen_synthetic_corpus(n, cli.seed);
        let mut stats = BuildStats { input_records: samples.len(), samples: samples.len(), ..Default::default() };
        for s in &samples {
            *stats.per_opt_level.entry(s.opt_level.to_string()).or_default() += 1;
        }
        (samples, stats)
    } else {
        let src = a.from_sources.as_ref().expect("clap requires one mode");
        ensure_exists(src, "source records")?;
        let levels = a
            .opt_levels
            .iter()
            .map(|s| s.parse::<OptLevel>())
            .collect::<wasmrev_core::Result<Vec<_>>>()
            .map_err(|e| usage(e.to_string()))?;
        let toolchain = ToolchainConfig::resolve(a.cc.clone(), a.wasm2text.clone())?;
        toolchain.check()?;
        let records = read_jsonl(src, |r: RawFunctionRecord| Ok(r))?;
        build_from_sources(records, &levels, &toolchain)?
    };
    write_corpus(&out_path(cli, "corpus.jsonl")?, &samples)?;
    write_json(&out_path(cli, "stats.json")?, &stats)?;
    match split_by_project(&samples, SPLIT_RATIOS, cli.seed) {
        Ok(split) => {
            split.save(&out_path(cli, "split.json")?)?;
            println!(
                "split train={} validation={} test={}",
                split.train.len(),
                split.validation.len(),
                split.test.len()
            );
        }
        Err(e) => println!("split skipped: {e}"),
    }
    if let Some(n) = a.synthetic {
        let tasks = synthetic_task_data(a.task_functions.unwrap_or(n), cli.seed);
        let fpi_projects: Vec<&str> = tasks.fpi.iter().map(|e| e.project_id.as_str()).collect();
        let tr_projects: Vec<&str> = tasks.tr.iter().map(|e| e.project_id.as_str()).collect();
        let ws_projects: Vec<&str> = tasks.ws.iter().map(|e| e.project_id.as_str()).collect();
        // All three task sets share the same projects, so they split or fail together.
        match split_ids_by_project(&fpi_projects, SPLIT_RATIOS, cli.seed) {
            Ok(_) => {
                write_task_split(cli, "fpi", &tasks.fpi, &fpi_projects)?;
                write_task_split(cli, "tr", &tasks.tr, &tr_projects)?;
                write_task_split(cli, "ws", &tasks.ws, &ws_projects)?;
            }
            Err(e) => println!("task split skipped: {e}"),
        }
        fs::write(out_path(cli, "fpi_labels.txt")?, tasks.fpi_labels.join("\n") + "\n")?;
    }
    print_stats(&stats);
    Ok(0)
}

fn build_vocab(cli: &Cli, a: &BuildVocabArgs) -> Result<u8> {
    ensure_exists(&a.corpus, "corpus")?;
    let samples = read_corpus(&a.corpus)?;
    let vocab = corpus_vocabulary(&samples, a.nl_cap, a.token_cap, a.min_freq).map_err(|e| usage(e.to_string()))?;
    vocab.save(&out_path(cli, "vocab.txt")?)?;
    println!("vocab_size={}", vocab.len());
    Ok(0)
}

fn encoder_config(m: &ModelArgs, vocab_size: usize) -> Result<EncoderConfig> {
    let cfg = EncoderConfig {
        layers: m.layers,
        hidden: m.hidden,
        heads: m.heads,
        max_positions: m.max_len,
        vocab_size,
        ..EncoderConfig::full(vocab_size)
    };
    let cfg = EncoderConfig { dropout: m.dropout, ffn_multiplier: m.ffn_multiplier, ..cfg };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn train_config(cli: &Cli, o: &OptimArgs, max_len: usize) -> TrainConfig {
    TrainConfig {
        batch_size: o.batch_size,
        beta1: o.beta1,
        beta2: o.beta2,
        adam_eps: o.adam_eps,
        weight_decay: o.weight_decay,
        seed: cli.seed,
        max_len,
        ..TrainConfig::default()
    }
}

fn checked(cfg: TrainConfig) -> Result<TrainConfig> {
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn pretrain(cli: &Cli, a: &PretrainArgs) -> Result<u8> {
    ensure_exists(&a.corpus, "corpus")?;
    ensure_exists(&a.vocab, "vocabulary")?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let enc = encoder_config(&a.model, vocab.len())?;
    let cfg = checked(TrainConfig {
        pretrain_epochs: a.epochs,
        lr_pretrain: a.lr,
        lambda: a.lambda,
        round_robin: a.round_robin,
        ..train_config(cli, &a.optim, a.model.max_len)
    })?;
    println!(
        "layers={} hidden={} heads={} lr={} batch={} epochs={}",
        enc.layers, enc.hidden, enc.heads, cfg.lr_pretrain, cfg.batch_size, cfg.pretrain_epochs
    );

    let samples = read_corpus(&a.corpus)?;
    let rows: Vec<usize> = match &a.split {
        Some(p) => CorpusSplit::load(p)?.train.into_iter().collect(),
        None => (0..samples.len()).collect(),
    };
    let pool: Vec<EncodedSample> = rows.iter().map(|&i| EncodedSample::new(&samples[i], &vocab)).collect();
    println!("samples={}", pool.len());

    let out_dir = cli.out_dir.clone();
    fs::create_dir_all(&out_dir)?;
    let curve_path = out_dir.join("curve.csv");
    let (params, resume, mut curve) = match a.resume {
        Some(epoch) => {
            let (params, _) = load_checkpoint(&epoch_checkpoint(&out_dir, epoch))
                .with_context(|| format!("resuming from epoch {epoch}"))?;
            if params.config != enc {
                return Err(usage("resumed checkpoint does not match the requested model shape"));
            }
            let opt = AdamState::load(&epoch_optimizer(&out_dir, epoch), &params)?;
            let earlier = if curve_path.exists() { read_curve(&curve_path)? } else { Vec::new() };
            let kept = earlier.into_iter().filter(|r| r.step < opt.step).collect();
            (params, Some(opt), kept)
        }
        None => (Parameters::init(enc, cli.seed)?, None, Vec::new()),
    };
    let outcome = pretrain_loop(params, &pool, &cfg, PretrainIo { out_dir: Some(&out_dir), resume, stop_at: None })?;
    curve.extend(outcome.curve.iter().copied());
    write_curve(&curve_path, &curve)?;
    save_checkpoint(&outcome.params, &[("epochs", cfg.pretrain_epochs.to_string())], &out_dir.join("pretrained.bin"))?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        println!("steps={} first_total={:.6} last_total={:.6}", curve.len(), first.total, last.total);
    }
    Ok(0)
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    ensure_exists(path, "vocabulary")?;
    Ok(Vocabulary::load(path)?)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?.lines().map(str::to_string).filter(|l| !l.is_empty()).collect())
}

fn finetune(cli: &Cli, a: &FinetuneArgs) -> Result<u8> {
    ensure_exists(&a.train, "training set")?;
    ensure_exists(&a.valid, "validation set")?;
    let vocab = load_vocab(&a.vocab)?;
    let kind = TaskKind::from(a.task);
    let cfg = checked(TrainConfig {
        finetune_epochs: a.epochs,
        lr_finetune: a.lr,
        patience: a.patience,
        freeze_encoder: a.freeze_encoder,
        ..train_config(cli, &a.optim, a.model.max_len)
    })?;

    let pretrained = match &a.init {
        Some(p) if !a.from_scratch => {
            ensure_exists(p, "checkpoint")?;
            Some(load_checkpoint(p)?.0)
        }
        _ => None,
    };
    let enc = match &pretrained {
        Some(p) => p.config.clone(),
        None => encoder_config(&a.model, vocab.len())?,
    };
    if enc.vocab_size != vocab.len() {
        return Err(usage(format!("checkpoint vocabulary size {} differs from {}", enc.vocab_size, vocab.len())));
    }
    println!(
        "task={kind} layers={} hidden={} heads={} lr={} batch={} epochs={} init={}",
        enc.layers,
        enc.hidden,
        enc.heads,
        cfg.lr_finetune,
        cfg.batch_size,
        cfg.finetune_epochs,
        if pretrained.is_some() { "pretrained" } else { "scratch" }
    );

    let mut params = Parameters::init(enc.clone(), cli.seed)?;
    let decoder_hidden = a.decoder_hidden.unwrap_or(enc.hidden);
    let max_len = cfg.max_len;
    let mut labels = Vec::new();
    let mut type_vocab = None;
    let (train, valid): (TaskSet, TaskSet) = match kind {
        TaskKind::Fpi => {
            let tr: Vec<FpiExample> = read_examples(&a.train)?;
            let va: Vec<FpiExample> = read_examples(&a.valid)?;
            labels = match &a.labels {
                Some(p) => read_lines(p)?,
                None => Vec::new(),
            };
            let seen = tr.iter().chain(&va).map(|e| e.label + 1).max().unwrap_or(0);
            let n_classes = labels.len().max(seen).max(2);
            params = params.with_classifier(n_classes, cli.seed)?;
            (fpi_task_set(&tr, &vocab, n_classes, max_len)?, fpi_task_set(&va, &vocab, n_classes, max_len)?)
        }
        TaskKind::Tr => {
            let tr: Vec<TrExample> = read_examples(&a.train)?;
            let va: Vec<TrExample> = read_examples(&a.valid)?;
            let types = match &a.type_vocab {
                Some(p) => Vocabulary::load(p)?,
                None => build_type_vocab(&tr),
            };
            params = params.with_decoder(DecoderConfig::new(decoder_hidden, types.len()), cli.seed)?;
            let sets = (tr_task_set(&tr, &vocab, &types, max_len)?, tr_task_set(&va, &vocab, &types, max_len)?);
            type_vocab = Some(types);
            sets
        }
        TaskKind::Ws => {
            let tr: Vec<WsExample> = read_examples(&a.train)?;
            let va: Vec<WsExample> = read_examples(&a.valid)?;
            params = params.with_decoder(DecoderConfig::new(decoder_hidden, vocab.len()), cli.seed)?;
            (ws_task_set(&tr, &vocab, max_len)?, ws_task_set(&va, &vocab, max_len)?)
        }
    };
    if let Some(pre) = &pretrained {
        params.load_from(pre, &is_encoder_tensor)?;
    }
    println!("train={} valid={}", train.len(), valid.len());

    let outcome = finetune_loop(params, &train, &valid, &cfg)?;
    for r in &outcome.history {
        println!("epoch={} train_loss={:.6} valid_metric={:.6}", r.epoch, r.train_loss, r.metric);
    }
    println!("best_epoch={} best_valid_metric={:.6}", outcome.best_epoch, outcome.best_metric);
    write_jsonl_file(&out_path(cli, &format!("{kind}-history.jsonl"))?, &outcome.history)?;
    let model = TaskModel { kind, params: outcome.best, labels, type_vocab };
    model.save(&out_path(cli, &format!("{kind}.bin"))?)?;
    Ok(0)
}

fn write_jsonl_file<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_jsonl(path, items).with_context(|| format!("writing {}", path.display()))
}

fn load_task_model(path: &Path, expected: TaskKind) -> Result<TaskModel> {
    ensure_exists(path, "checkpoint")?;
    let m = TaskModel::load(path)?;
    if m.kind != expected {
        return Err(usage(format!("{} holds a {} model, expected {expected}", path.display(), m.kind)));
    }
    Ok(m)
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<u8> {
    ensure_exists(&a.data, "dataset")?;
    let vocab = load_vocab(&a.vocab)?;
    let kind = TaskKind::from(a.task);
    let model = load_task_model(&a.model, kind)?;
    let (records, summary): (Vec<EvalRecord>, EvalSummary) = match a.task {
        Task::Fpi => evaluate_fpi(&model, &vocab, &read_examples(&a.data)?, a.max_len)?,
        Task::Tr => evaluate_tr(&model, &vocab, &read_examples(&a.data)?, a.beam, a.max_len)?,
        Task::Ws => evaluate_ws(&model, &vocab, &read_examples(&a.data)?, a.beam, a.max_len)?,
    };
    write_jsonl_file(&out_path(cli, &format!("{kind}-eval.jsonl"))?, &records)?;
    write_json(&out_path(cli, &format!("{kind}-summary.json"))?, &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(0)
}

/// Module text, converting binary modules first. A module that cannot be read
/// as either becomes an error message for the report.
fn read_module(path: &Path) -> Result<std::result::Result<String, String>> {
    ensure_exists(path, "input module")?;
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"\0asm") {
        return Ok(wasmprinter::print_bytes(&bytes).map_err(|e| format!("invalid wasm binary: {e}")));
    }
    Ok(String::from_utf8(bytes).map_err(|e| format!("input is neither wasm text nor binary: {e}")))
}

fn module_entries(path: &Path, models: &ReportModels<'_>) -> Result<Vec<ReportEntry>> {
    match read_module(path)? {
        Ok(text) => Ok(build_report(&text, models)?),
        Err(msg) => {
            fn section<T>(present: bool, msg: &str) -> Section<T> {
                if present {
                    Section::Error(msg.to_string())
                } else {
                    Section::Skipped
                }
            }
            Ok(vec![ReportEntry {
                function: "<module>".into(),
                fpi: section(models.fpi.is_some(), &msg),
                types: section(models.tr.is_some(), &msg),
                summary: section(models.ws.is_some(), &msg),
            }])
        }
    }
}

#[derive(Serialize)]
struct InferLine<'a, T: Serialize> {
    function: &'a str,
    #[serde(flatten)]
    result: &'a Section<T>,
}

fn infer(_cli: &Cli, a: &InferArgs) -> Result<u8> {
    let vocab = load_vocab(&a.vocab)?;
    let model = load_task_model(&a.model, a.task.into())?;
    let pick = |k: Task| (a.task == k).then_some(&model);
    let models =
        ReportModels { fpi: pick(Task::Fpi), tr: pick(Task::Tr), ws: pick(Task::Ws), vocab: &vocab, beam: a.beam, max_len: a.max_len };
    let entries = module_entries(&a.input, &models)?;
    let mut any_ok = false;
    for e in &entries {
        any_ok |= e.any_ok();
        let line = match a.task {
            Task::Fpi => serde_json::to_string(&InferLine { function: &e.function, result: &e.fpi })?,
            Task::Tr => serde_json::to_string(&InferLine { function: &e.function, result: &e.types })?,
            Task::Ws => serde_json::to_string(&InferLine { function: &e.function, result: &e.summary })?,
        };
        println!("{line}");
    }
    Ok(if any_ok || entries.is_empty() { 0 } else { 1 })
}

fn report(cli: &Cli, a: &ReportArgs) -> Result<u8> {
    if a.fpi.is_none() && a.tr.is_none() && a.ws.is_none() {
        return Err(usage("report needs at least one of --fpi, --tr, --ws"));
    }
    let vocab = load_vocab(&a.vocab)?;
    let load = |p: &Option<PathBuf>, k: TaskKind| p.as_deref().map(|p| load_task_model(p, k)).transpose();
    let (fpi, tr, ws) = (load(&a.fpi, TaskKind::Fpi)?, load(&a.tr, TaskKind::Tr)?, load(&a.ws, TaskKind::Ws)?);
    let models =
        ReportModels { fpi: fpi.as_ref(), tr: tr.as_ref(), ws: ws.as_ref(), vocab: &vocab, beam: a.beam, max_len: a.max_len };
    let entries = module_entries(&a.input, &models)?;
    let text = render_text(&entries);
    fs::write(out_path(cli, "report.txt")?, &text)?;
    write_jsonl_file(&out_path(cli, "report.jsonl")?, &entries)?;
    print!("{text}");
    let all_failed = !entries.is_empty() && entries.iter().all(|e| !e.any_ok());
    if all_failed {
        eprintln!("error: no function could be analysed");
        return Ok(1);
    }
    Ok(0)
}
