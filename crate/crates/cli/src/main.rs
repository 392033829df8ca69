//! `slu` — one entry point for the whole pipeline: synthesize or prepare
//! data, train, evaluate, predict, grid-search, and compare two models.
//!
//! Every command prints an effective-config header that reproduces the run,
//! and writes a machine-readable JSON artifact next to each human-readable
//! report. Exit codes: 0 success, 1 runtime failure, 2 usage or invalid
//! configuration.

mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use slu_core::corpus::{
    count_split, encode_corpus, load_split, Dialogue, PreparedCorpus,
};
use slu_core::eval::{
    mcnemar_records, read_records, report, write_records, ActAveraging, MetricsReport, TurnRecord,
};
use slu_core::model::Variant;
use slu_core::synth::synthesize;
use slu_core::train::{
    grid_search, load_model, predict_records, resume, train, trial_name, GridSpec, TrainConfig,
    TrainError, Trained,
};

use settings::{config_key_help, effective_lines, parse_set, read_config_file, resolve, usage};

/// How a command failed, mapped onto the exit code.
pub enum Failure {
    /// Bad flags, bad config values, contradictory options — exit 2.
    Usage(String),
    /// Missing files, corrupt data, training faults — exit 1.
    Runtime(anyhow::Error),
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<slu_core::corpus::CorpusError> for Failure {
    fn from(e: slu_core::corpus::CorpusError) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<slu_core::eval::EvalError> for Failure {
    fn from(e: slu_core::eval::EvalError) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

#[derive(Parser)]
#[command(
    name = "slu",
    version,
    about = "Dialogue frame parsing: data, training, evaluation, and comparison",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the seeded synthetic dialogue corpus
    Synth(SynthArgs),
    /// Load raw splits, validate counts, build vocabularies, cache the corpus
    Prepare(PrepareArgs),
    /// Train one model configuration
    #[command(after_long_help = config_key_help())]
    Train(TrainArgs),
    /// Score a checkpoint (or an existing prediction dump) on a split
    Eval(EvalArgs),
    /// Run a checkpoint over dialogues and write the prediction dump
    Predict(PredictArgs),
    /// Train every grid combination and rank by validation frame accuracy
    #[command(after_long_help = config_key_help())]
    Gridsearch(GridArgs),
    /// McNemar's paired test between two prediction dumps
    Compare(CompareArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory to write `<domain>/{train,dev,test}.json` into
    #[arg(long, default_value = "data", env = "SLU_DATA_DIR")]
    out: PathBuf,
    /// Seed for every random choice in the corpus
    #[arg(long, default_value_t = 13, env = "SLU_SEED")]
    seed: u64,
}

#[derive(Args)]
struct PrepareArgs {
    /// Directory holding `<domain>/{train,dev,test}.json`
    #[arg(long, default_value = "data", env = "SLU_DATA_DIR")]
    data_dir: PathBuf,
    /// Comma-separated domain list
    #[arg(long, default_value = "sim-m,sim-r")]
    domains: String,
    /// Output directory for the corpus cache, vocab, and summary
    #[arg(long, default_value = "prepared", env = "SLU_PREPARED")]
    out: PathBuf,
    /// Skip the published-size check on training splits
    #[arg(long)]
    allow_any_counts: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `prepare`
    #[arg(long, default_value = "prepared", env = "SLU_PREPARED")]
    prepared: PathBuf,
    /// Config file of `key = value` lines (see below)
    #[arg(long, env = "SLU_CONFIG")]
    config: Option<PathBuf>,
    /// Override one config key (repeatable; later wins)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Model variant (config key `variant`)
    #[arg(long)]
    variant: Option<String>,
    /// Token embedding width (config key `token_dim`)
    #[arg(long)]
    token_dim: Option<usize>,
    /// Optimizer updates (config key `steps`)
    #[arg(long, env = "SLU_STEPS")]
    steps: Option<usize>,
    /// Use the full-length step budget (150000)
    #[arg(long)]
    full_steps: bool,
    #[arg(long, env = "SLU_SEED")]
    seed: Option<u64>,
    /// Learning rate (config key `learning_rate`)
    #[arg(long)]
    lr: Option<f64>,
    /// Peak value-dropout probability (config key `max_value_dropout`)
    #[arg(long)]
    max_dropout: Option<f64>,
    /// Act decision threshold (config key `act_threshold`)
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    batch_dialogues: Option<usize>,
    /// Process a batch's dialogues on worker threads
    #[arg(long, env = "SLU_PARALLEL")]
    parallel: bool,
    /// Checkpoint directory (default: ckpt/<trial-name>)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from this checkpoint (a `best/` or `last/` directory)
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory to score (mutually exclusive with --dump)
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value = "prepared", env = "SLU_PREPARED")]
    prepared: PathBuf,
    /// Which split to score: train | dev | test
    #[arg(long, default_value = "test")]
    split: String,
    /// Score an existing prediction dump instead of a checkpoint
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Act F1 averaging: micro | macro
    #[arg(long, default_value = "micro")]
    averaging: String,
    /// Where to write the JSON report (default: next to the input)
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, env = "SLU_PARALLEL")]
    parallel: bool,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint directory (its `meta.json` names the model)
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "prepared", env = "SLU_PREPARED")]
    prepared: PathBuf,
    /// Predict over a prepared split: train | dev | test
    #[arg(long)]
    split: Option<String>,
    /// Predict over a raw dialogue JSON file instead of a split
    #[arg(long)]
    input: Option<PathBuf>,
    /// Domain label for --input dialogues
    #[arg(long, requires = "input")]
    domain: Option<String>,
    /// Prediction dump path (JSON lines)
    #[arg(long, default_value = "predictions.jsonl")]
    out: PathBuf,
    #[arg(long, env = "SLU_PARALLEL")]
    parallel: bool,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, default_value = "prepared", env = "SLU_PREPARED")]
    prepared: PathBuf,
    /// Variant every trial uses
    #[arg(long, default_value = "act_only")]
    variant: String,
    /// Steps per trial (reduced-budget screening)
    #[arg(long, default_value_t = 2000, env = "SLU_STEPS")]
    steps: usize,
    #[arg(long, default_value_t = 13, env = "SLU_SEED")]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    eval_every: usize,
    #[arg(long, default_value_t = 10)]
    batch_dialogues: usize,
    /// Comma-separated token embedding widths
    #[arg(long, default_value = "64,128,256")]
    token_dims: String,
    /// Comma-separated learning rates
    #[arg(long, default_value = "0.0001,0.001,0.01")]
    lrs: String,
    /// Comma-separated peak value-dropout probabilities
    #[arg(long, default_value = "0.2,0.35,0.5")]
    dropouts: String,
    /// Comma-separated act thresholds
    #[arg(long, default_value = "0.3,0.4,0.5")]
    thresholds: String,
    /// Root directory for per-trial checkpoints and the ranking
    #[arg(long, default_value = "grid")]
    out: PathBuf,
    #[arg(long, env = "SLU_PARALLEL")]
    parallel: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// First model's prediction dump
    #[arg(long)]
    preds_a: PathBuf,
    /// Second model's prediction dump
    #[arg(long)]
    preds_b: PathBuf,
    /// Where to write the JSON verdict
    #[arg(long, default_value = "compare.json")]
    json: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Prepare(a) => cmd_prepare(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Gridsearch(a) => cmd_grid(a),
        Cmd::Compare(a) => cmd_compare(a),
    }
}

// ─── Shared plumbing ─────────────────────────────────────────────────────────

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| anyhow::anyhow!("cannot create {}: {e}", parent.display()))?;
        }
    }
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| anyhow::anyhow!("cannot serialize {}: {e}", path.display()))?;
    std::fs::write(path, text)
        .map_err(|e| anyhow::anyhow!("cannot write {}: {e}", path.display()))?;
    Ok(())
}

fn load_prepared(dir: &Path) -> Result<PreparedCorpus, Failure> {
    let path = dir.join("corpus.json");
    PreparedCorpus::load(&path).map_err(|e| {
        Failure::Runtime(anyhow::anyhow!(
            "{e}; run `slu prepare --out {}` first",
            dir.display()
        ))
    })
}

fn parse_averaging(s: &str) -> Result<ActAveraging, Failure> {
    match s {
        "micro" => Ok(ActAveraging::Micro),
        "macro" => Ok(ActAveraging::Macro),
        other => Err(usage(format!("--averaging must be micro or macro, got {other:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>, Failure>
where
    T::Err: std::fmt::Display,
{
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            return Err(usage(format!("{flag}: empty element in {s:?}")));
        }
        out.push(
            part.parse::<T>()
                .map_err(|e| usage(format!("{flag}: invalid element {part:?} ({e})")))?,
        );
    }
    Ok(out)
}

fn print_report(title: &str, report: &MetricsReport) {
    println!("{title}");
    print!("{}", report.table());
}

// ─── Commands ────────────────────────────────────────────────────────────────

fn cmd_synth(a: SynthArgs) -> Result<(), Failure> {
    print!(
        "{}",
        effective_lines(
            "synth",
            &[("out", a.out.display().to_string()), ("seed", a.seed.to_string())],
            None,
            None,
        )
    );
    let stats = synthesize(&a.out, a.seed)?;
    for (domain, split, c) in &stats.counts {
        println!("{domain} {split}: {} dialogues, {} turns", c.dialogues, c.turns);
    }
    println!(
        "movie names in eval splits also seen in training: {:.1}%",
        stats.movie_name_overlap * 100.0
    );
    println!("wrote corpus under {}", a.out.display());
    Ok(())
}

fn cmd_prepare(a: PrepareArgs) -> Result<(), Failure> {
    let domains: Vec<String> = a
        .domains
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    if domains.is_empty() {
        return Err(usage("--domains must name at least one domain"));
    }
    print!(
        "{}",
        effective_lines(
            "prepare",
            &[
                ("data_dir", a.data_dir.display().to_string()),
                ("domains", domains.join(",")),
                ("out", a.out.display().to_string()),
                ("allow_any_counts", a.allow_any_counts.to_string()),
            ],
            None,
            None,
        )
    );

    let corpus = PreparedCorpus::prepare(&a.data_dir, &domains, a.allow_any_counts)?;
    for domain in &domains {
        for (name, split) in
            [("train", &corpus.train), ("dev", &corpus.dev), ("test", &corpus.test)]
        {
            let subset: Vec<Dialogue> =
                split.iter().filter(|d| &d.domain == domain).cloned().collect();
            let c = count_split(&subset);
            println!("{domain} {name}: {} dialogues, {} turns", c.dialogues, c.turns);
        }
    }
    let v = &corpus.vocab;
    println!(
        "vocab: {} tokens, {} slots, {} system acts, {} user acts, {} intents",
        v.tokens.len(),
        v.slots.len(),
        v.system_acts.len(),
        v.user_acts.len(),
        v.intents.len()
    );
    println!("vocab digest: {}", v.digest());

    std::fs::create_dir_all(&a.out)
        .map_err(|e| anyhow::anyhow!("cannot create {}: {e}", a.out.display()))?;
    let cache_path = a.out.join("corpus.json");
    let cache_hit =
        matches!(PreparedCorpus::load(&cache_path), Ok(existing) if existing == corpus);
    if cache_hit {
        println!("cache hit: prepared corpus unchanged at {}", cache_path.display());
    } else {
        corpus.save(&cache_path)?;
        println!("wrote {}", cache_path.display());
    }

    let vocab_path = a.out.join("vocab.json");
    if !cache_hit || !vocab_path.exists() {
        write_json(
            &vocab_path,
            &serde_json::json!({
                "digest": v.digest(),
                "tokens": v.tokens.names(),
                "slots": v.slots.names(),
                "system_acts": v.system_acts.names(),
                "user_acts": v.user_acts.names(),
                "intents": v.intents.names(),
            }),
        )?;
    }
    let summary_path = a.out.join("summary.json");
    if !cache_hit || !summary_path.exists() {
        let mut splits = serde_json::Map::new();
        for domain in &domains {
            let mut per_split = serde_json::Map::new();
            for (name, split) in
                [("train", &corpus.train), ("dev", &corpus.dev), ("test", &corpus.test)]
            {
                let subset: Vec<Dialogue> =
                    split.iter().filter(|d| &d.domain == domain).cloned().collect();
                let c = count_split(&subset);
                per_split.insert(
                    name.to_string(),
                    serde_json::json!({"dialogues": c.dialogues, "turns": c.turns}),
                );
            }
            splits.insert(domain.clone(), per_split.into());
        }
        write_json(
            &summary_path,
            &serde_json::json!({
                "domains": domains,
                "splits": splits,
                "vocab": {
                    "tokens": v.tokens.len(),
                    "slots": v.slots.len(),
                    "system_acts": v.system_acts.len(),
                    "user_acts": v.user_acts.len(),
                    "intents": v.intents.len(),
                    "digest": v.digest(),
                },
            }),
        )?;
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(path) = &a.config {
        pairs.extend(read_config_file(path)?);
    }
    for s in &a.set {
        pairs.push(parse_set(s)?);
    }
    if a.full_steps {
        pairs.push(("steps".into(), slu_core::train::FULL_STEPS.to_string()));
    }
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    };
    push("variant", a.variant.clone());
    push("token_dim", a.token_dim.map(|v| v.to_string()));
    push("steps", a.steps.map(|v| v.to_string()));
    push("seed", a.seed.map(|v| v.to_string()));
    push("learning_rate", a.lr.map(|v| v.to_string()));
    push("max_value_dropout", a.max_dropout.map(|v| v.to_string()));
    push("act_threshold", a.threshold.map(|v| v.to_string()));
    push("eval_every", a.eval_every.map(|v| v.to_string()));
    push("batch_dialogues", a.batch_dialogues.map(|v| v.to_string()));
    if a.parallel {
        pairs.push(("parallel".into(), "true".into()));
    }
    let (mut model_cfg, train_cfg) = resolve(&pairs)?;
    if let Some(from) = &a.resume {
        // The checkpoint dictates the model; reflect it in the header.
        let meta_path = from.join("meta.json");
        let text = std::fs::read_to_string(&meta_path)
            .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", meta_path.display()))?;
        let meta: slu_core::train::CheckpointMeta = serde_json::from_str(&text)
            .map_err(|e| anyhow::anyhow!("cannot parse {}: {e}", meta_path.display()))?;
        model_cfg = meta.model;
    }

    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("ckpt").join(trial_name(&model_cfg)));
    let mut extras = vec![
        ("prepared", a.prepared.display().to_string()),
        ("out", out.display().to_string()),
    ];
    if let Some(r) = &a.resume {
        extras.push(("resume", r.display().to_string()));
    }
    print!("{}", effective_lines("train", &extras, Some(&model_cfg), Some(&train_cfg)));

    let corpus = load_prepared(&a.prepared)?;
    let vocab = corpus.vocab.clone();
    let train_set = encode_corpus(&corpus.train, &vocab)?;
    let dev_set = encode_corpus(&corpus.dev, &vocab)?;
    println!(
        "training on {} dialogues, validating on {}",
        train_set.len(),
        dev_set.len()
    );

    let outcome: Result<Trained, TrainError> = match &a.resume {
        Some(from) => resume(from, &train_cfg, &train_set, &dev_set, &vocab, Some(&out)),
        None => train(&model_cfg, &train_cfg, &train_set, &dev_set, &vocab, Some(&out)),
    };
    let trained = outcome.map_err(|e| {
        eprintln!("note: partial outputs may remain under {}", out.display());
        Failure::from(e)
    })?;

    let report_path = out.join("report.json");
    write_json(&report_path, &trained.report)?;
    if let Some(last) = trained.report.history.last() {
        println!(
            "finished step {}: dev frame accuracy {:.4}",
            last.step, last.dev_frame_accuracy
        );
    }
    println!(
        "best: step {} with dev frame accuracy {:.4}",
        trained.report.best_step, trained.report.best_dev_frame_accuracy
    );
    println!("checkpoints: {} and {}", out.join("best").display(), out.join("last").display());
    println!("wrote {}", report_path.display());
    Ok(())
}

fn eval_json_default(a: &EvalArgs) -> PathBuf {
    match (&a.ckpt, &a.dump) {
        (Some(ckpt), _) => ckpt.join(format!("eval-{}.json", a.split)),
        (None, Some(dump)) => {
            let mut p = dump.clone();
            p.set_extension("metrics.json");
            p
        }
        _ => PathBuf::from("eval.json"),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let averaging = parse_averaging(&a.averaging)?;
    let json_path = a.json.clone().unwrap_or_else(|| eval_json_default(&a));
    let records: Vec<TurnRecord> = match (&a.ckpt, &a.dump) {
        (Some(_), Some(_)) => {
            return Err(usage("--ckpt and --dump are mutually exclusive"))
        }
        (None, None) => return Err(usage("one of --ckpt or --dump is required")),
        (None, Some(dump)) => {
            print!(
                "{}",
                effective_lines(
                    "eval",
                    &[
                        ("dump", dump.display().to_string()),
                        ("averaging", a.averaging.clone()),
                        ("json", json_path.display().to_string()),
                    ],
                    None,
                    None,
                )
            );
            read_records(dump)?
        }
        (Some(ckpt), None) => {
            print!(
                "{}",
                effective_lines(
                    "eval",
                    &[
                        ("ckpt", ckpt.display().to_string()),
                        ("prepared", a.prepared.display().to_string()),
                        ("split", a.split.clone()),
                        ("averaging", a.averaging.clone()),
                        ("json", json_path.display().to_string()),
                        ("parallel", a.parallel.to_string()),
                    ],
                    None,
                    None,
                )
            );
            let corpus = load_prepared(&a.prepared)?;
            let dialogues = corpus
                .split(&a.split)
                .ok_or_else(|| usage(format!("unknown split {:?} (train|dev|test)", a.split)))?;
            let (model, params, _meta) = load_model(ckpt, &corpus.vocab)?;
            let encoded = encode_corpus(dialogues, &corpus.vocab)?;
            predict_records(&model, &params, &encoded, &corpus.vocab, a.parallel)?
        }
    };
    let rep = report(&records, averaging)?;
    print_report("evaluation report", &rep);
    write_json(&json_path, &rep)?;
    println!("wrote {}", json_path.display());
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<(), Failure> {
    let mut extras = vec![
        ("ckpt", a.ckpt.display().to_string()),
        ("prepared", a.prepared.display().to_string()),
        ("out", a.out.display().to_string()),
        ("parallel", a.parallel.to_string()),
    ];
    let corpus = load_prepared(&a.prepared)?;
    let dialogues: Vec<Dialogue> = match (&a.split, &a.input) {
        (Some(_), Some(_)) => {
            return Err(usage("--split and --input are mutually exclusive"))
        }
        (None, None) => return Err(usage("one of --split or --input is required")),
        (Some(split), None) => {
            extras.push(("split", split.clone()));
            print!("{}", effective_lines("predict", &extras, None, None));
            corpus
                .split(split)
                .ok_or_else(|| usage(format!("unknown split {split:?} (train|dev|test)")))?
                .to_vec()
        }
        (None, Some(input)) => {
            let domain = a
                .domain
                .clone()
                .ok_or_else(|| usage("--input requires --domain"))?;
            extras.push(("input", input.display().to_string()));
            extras.push(("domain", domain.clone()));
            print!("{}", effective_lines("predict", &extras, None, None));
            load_split(input, &domain)?
        }
    };
    let (model, params, _meta) = load_model(&a.ckpt, &corpus.vocab)?;
    let encoded = encode_corpus(&dialogues, &corpus.vocab)?;
    let records = predict_records(&model, &params, &encoded, &corpus.vocab, a.parallel)?;
    let frame_acc = if records.is_empty() {
        0.0
    } else {
        slu_core::eval::frame_accuracy(&records)
    };
    write_records(&a.out, &records)?;
    println!(
        "wrote {} records for {} dialogues to {}",
        records.len(),
        dialogues.len(),
        a.out.display()
    );
    println!("frame accuracy against gold: {frame_acc:.4}");
    Ok(())
}

fn cmd_grid(a: GridArgs) -> Result<(), Failure> {
    let variant: Variant = a
        .variant
        .parse()
        .map_err(|e: slu_core::model::ModelError| usage(e.to_string()))?;
    let spec = GridSpec {
        token_dims: parse_list("--token-dims", &a.token_dims)?,
        learning_rates: parse_list("--lrs", &a.lrs)?,
        max_dropouts: parse_list("--dropouts", &a.dropouts)?,
        thresholds: parse_list("--thresholds", &a.thresholds)?,
    };
    let train_cfg = TrainConfig {
        steps: a.steps,
        batch_dialogues: a.batch_dialogues,
        seed: a.seed,
        eval_every: a.eval_every,
        parallel: a.parallel,
    };
    train_cfg.validate().map_err(Failure::from)?;
    print!(
        "{}",
        effective_lines(
            "gridsearch",
            &[
                ("prepared", a.prepared.display().to_string()),
                ("variant", variant.to_string()),
                ("token_dims", a.token_dims.clone()),
                ("lrs", a.lrs.clone()),
                ("dropouts", a.dropouts.clone()),
                ("thresholds", a.thresholds.clone()),
                ("steps", a.steps.to_string()),
                ("seed", a.seed.to_string()),
                ("eval_every", a.eval_every.to_string()),
                ("batch_dialogues", a.batch_dialogues.to_string()),
                ("parallel", a.parallel.to_string()),
                ("out", a.out.display().to_string()),
            ],
            None,
            None,
        )
    );

    let corpus = load_prepared(&a.prepared)?;
    let vocab = corpus.vocab.clone();
    let train_set = encode_corpus(&corpus.train, &vocab)?;
    let dev_set = encode_corpus(&corpus.dev, &vocab)?;
    println!("{} trials over {} training dialogues", spec.configs(variant).len(), train_set.len());
    let ranked =
        grid_search(variant, &spec, &train_cfg, &train_set, &dev_set, &vocab, Some(&a.out))?;
    println!("{:<4} {:<40} {:>10} {:>10}", "rank", "trial", "dev frame", "best step");
    for (i, r) in ranked.iter().enumerate() {
        println!(
            "{:<4} {:<40} {:>10.4} {:>10}",
            i + 1,
            r.name,
            r.best_dev_frame_accuracy,
            r.best_step
        );
    }
    println!("wrote {}", a.out.join("ranking.json").display());
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<(), Failure> {
    print!(
        "{}",
        effective_lines(
            "compare",
            &[
                ("preds_a", a.preds_a.display().to_string()),
                ("preds_b", a.preds_b.display().to_string()),
                ("json", a.json.display().to_string()),
            ],
            None,
            None,
        )
    );
    let recs_a = read_records(&a.preds_a)?;
    let recs_b = read_records(&a.preds_b)?;
    let outcome = mcnemar_records(&recs_a, &recs_b)?;
    println!("turns only the first model framed correctly (b): {}", outcome.b);
    println!("turns only the second model framed correctly (c): {}", outcome.c);
    match outcome.statistic {
        Some(s) => println!("continuity-corrected chi-square: {s:.4}"),
        None => println!("exact binomial regime (b + c < 25); no chi-square statistic"),
    }
    println!("p-value: {:.6}{}", outcome.p_value, if outcome.exact { " (exact)" } else { "" });
    println!(
        "significant at p < 0.05: {}",
        if outcome.significant { "yes" } else { "no" }
    );
    write_json(&a.json, &outcome)?;
    println!("wrote {}", a.json.display());
    Ok(())
}
