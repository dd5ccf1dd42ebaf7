use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use lightdot::bench::{bench_latency, BenchConfig, Method};
use lightdot::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use lightdot::config::{ModelConfig, CLS_ID, UNK_ID};
use lightdot::encoder::{encode_image, encode_text, ModelParams, TokenSequence};
use lightdot::error::{LdError, Result};
use lightdot::eval::{build_full_pool, evaluate};
use lightdot::index::{build_index, EmbeddingIndex, Modality};
use lightdot::rerank::{
    init_cross_params, retrieve_rerank, train_cross_scorer, CrossAttentionScorer, CrossScorer,
    CrossTrainConfig, OracleScorer, Query, QueryPayload,
};
use lightdot::synth::{generate_corpus, read_corpus, write_corpus, Corpus, GenConfig};
use lightdot::train::{finetune, pretrain, LogRecord, Task, TrainConfig};

#[derive(Parser)]
#[command(name = "lightdot", about = "Dense cross-modal retrieval toolkit", version)]
struct Cli {
    /// Output style for stdout records and report files.
    #[arg(long, global = true, value_enum, default_value_t = Format::Plain)]
    format: Format,
    /// Overwrite existing output artifacts.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Plain,
    JsonLines,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus.
    Gen(GenArgs),
    /// Multi-task pretraining from random initialization.
    Pretrain(PretrainArgs),
    /// Contrastive finetuning with validation-based snapshot selection.
    Finetune(FinetuneArgs),
    /// Train the cross-attention reranking scorer.
    TrainScorer(TrainScorerArgs),
    /// Encode one side of a corpus into a searchable index.
    Index(IndexArgs),
    /// Search an index, optionally through the reranking pipeline.
    Query(QueryArgs),
    /// Recall evaluation over a candidate pool.
    Eval(EvalArgs),
    /// Per-query latency benchmark across pool sizes and methods.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 512)]
    pairs: usize,
    #[arg(long, default_value_t = 16)]
    concepts: usize,
    #[arg(long, default_value_t = 16)]
    classes: usize,
    #[arg(long, default_value_t = 128)]
    vocab: usize,
    #[arg(long, default_value_t = 32)]
    val_size: usize,
    #[arg(long, default_value_t = 32)]
    test_size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCommon {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 96)]
    batch: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: TrainCommon,
    /// Comma-separated subset of cmr,vmlm,smrm,mlm,mrm.
    #[arg(long, default_value = "cmr,vmlm,smrm,mlm,mrm")]
    tasks: String,
    #[arg(long, default_value_t = 500)]
    steps: u64,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: TrainCommon,
    /// Starting checkpoint; omit to finetune from random initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    steps: u64,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    eval_every: u64,
}

#[derive(Args)]
struct TrainScorerArgs {
    #[command(flatten)]
    common: TrainCommon,
    #[arg(long, default_value_t = 200)]
    steps: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModalityArg {
    Image,
    Text,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    modality: ModalityArg,
    /// Corpus split to index; "all" covers every split.
    #[arg(long, default_value = "all")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Whitespace-separated words mapped through the corpus vocabulary.
    #[arg(long, conflicts_with = "image_id")]
    text: Option<String>,
    /// Query with the regions of this corpus pair instead of text.
    #[arg(long)]
    image_id: Option<u64>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Rerank the dense candidates with a stage-2 scorer.
    #[arg(long)]
    rerank: bool,
    /// "oracle" or the path to a trained scorer checkpoint.
    #[arg(long, default_value = "oracle")]
    scorer: String,
    /// Rerank depth.
    #[arg(long, default_value_t = 50)]
    m: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pool from the union of all splits instead of the test split only.
    #[arg(long)]
    full_pool: bool,
    #[arg(long)]
    rerank: bool,
    #[arg(long, default_value = "oracle")]
    scorer: String,
    #[arg(long, default_value_t = 50)]
    m: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated pool sizes.
    #[arg(long, default_value = "1000,4000,16000")]
    pools: String,
    /// Comma-separated subset of dense,dense-rerank,cross-attention.
    #[arg(long, default_value = "dense,dense-rerank,cross-attention")]
    methods: String,
    #[arg(long, default_value = "oracle")]
    scorer: String,
    #[arg(long, default_value_t = 8)]
    queries: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 480)]
    budget_secs: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Sidecar next to each index file carrying the encoder identity.
#[derive(Serialize, Deserialize)]
struct IndexMeta {
    config_hash: u32,
    modality: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a, cli.force),
        Command::Pretrain(a) => cmd_pretrain(a, cli.force, cli.format),
        Command::Finetune(a) => cmd_finetune(a, cli.force, cli.format),
        Command::TrainScorer(a) => cmd_train_scorer(a, cli.force, cli.format),
        Command::Index(a) => cmd_index(a, cli.force),
        Command::Query(a) => cmd_query(a, cli.format),
        Command::Eval(a) => cmd_eval(a, cli.force, cli.format),
        Command::Bench(a) => cmd_bench(a, cli.force, cli.format),
    }
}

fn ensure_writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(LdError::WouldOverwrite(path.display().to_string()));
    }
    Ok(())
}

/// Echo the resolved run configuration next to the artifact.
fn write_run_config(out: &Path, resolved: serde_json::Value) -> Result<()> {
    let path = out.with_extension("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&resolved).unwrap())
        .map_err(|e| LdError::Io {
            path: path.display().to_string(),
            source: e,
        })
}

fn emit_logs(logs: &[LogRecord], format: Format) {
    for r in logs {
        match format {
            Format::Plain => println!("{r}"),
            Format::JsonLines => println!(
                "{}",
                serde_json::json!({
                    "step": r.step,
                    "task": r.task.to_string(),
                    "loss": r.loss,
                    "lr": r.lr,
                })
            ),
        }
    }
}

fn parse_tasks(s: &str) -> Result<Vec<Task>> {
    let tasks: Vec<Task> = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    let mut seen = BTreeSet::new();
    for t in &tasks {
        if !seen.insert(t.to_string()) {
            return Err(LdError::InvalidArgument(format!("task '{t}' listed twice")));
        }
    }
    Ok(tasks)
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    read_corpus(path)
}

fn model_config_for(corpus: &Corpus) -> ModelConfig {
    ModelConfig {
        vocab: corpus.config.vocab,
        classes: corpus.config.classes,
        feature_dim: corpus.config.feature_dim,
        ..ModelConfig::toy()
    }
}

fn cmd_gen(a: GenArgs, force: bool) -> Result<()> {
    if a.out.exists() && std::fs::read_dir(&a.out).map(|mut d| d.next().is_some()).unwrap_or(false)
        && !force
    {
        return Err(LdError::WouldOverwrite(a.out.display().to_string()));
    }
    let config = GenConfig {
        pairs: a.pairs,
        concepts: a.concepts,
        classes: a.classes,
        vocab: a.vocab,
        val_size: a.val_size,
        test_size: a.test_size,
        seed: a.seed,
        ..Default::default()
    };
    let corpus = generate_corpus(&config)?;
    write_corpus(&corpus, &a.out)?;
    println!(
        "wrote corpus: {} pairs, {} concepts -> {}",
        a.pairs,
        a.concepts,
        a.out.display()
    );
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs, force: bool, format: Format) -> Result<()> {
    ensure_writable(&a.common.out, force)?;
    let corpus = load_corpus(&a.common.corpus)?;
    let tasks = parse_tasks(&a.tasks)?;
    let config = TrainConfig {
        tasks: tasks.clone(),
        steps: a.steps,
        batch_size: a.common.batch,
        peak_lr: a.lr,
        seed: a.common.seed,
        ..Default::default()
    };
    let mut params = ModelParams::init(model_config_for(&corpus), a.common.seed);
    let logs = pretrain(&mut params, &corpus, &config)?;
    emit_logs(&logs, format);
    let meta = CheckpointMeta { step: a.steps, val_ar: -1.0 };
    save_checkpoint(&params, &meta, &a.common.out)?;
    write_run_config(
        &a.common.out,
        serde_json::json!({
            "command": "pretrain",
            "corpus": a.common.corpus.display().to_string(),
            "tasks": tasks.iter().map(|t| t.to_string()).collect::<Vec<_>>(),
            "steps": a.steps,
            "batch": a.common.batch,
            "lr": a.lr,
            "seed": a.common.seed,
            "config_hash": params.config.hash(),
        }),
    )?;
    println!("wrote checkpoint {}", a.common.out.display());
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs, force: bool, format: Format) -> Result<()> {
    ensure_writable(&a.common.out, force)?;
    let corpus = load_corpus(&a.common.corpus)?;
    let mut params = match &a.init {
        Some(path) => load_checkpoint(path)?.0,
        None => ModelParams::init(model_config_for(&corpus), a.common.seed),
    };
    let config = TrainConfig {
        tasks: vec![Task::Cmr],
        steps: a.steps,
        batch_size: a.common.batch,
        peak_lr: a.lr,
        eval_every: a.eval_every,
        seed: a.common.seed,
        ..Default::default()
    };
    let outcome = finetune(&mut params, &corpus, &config)?;
    emit_logs(&outcome.logs, format);
    let meta = CheckpointMeta {
        step: outcome.best_step,
        val_ar: outcome.best_val_ar,
    };
    save_checkpoint(&params, &meta, &a.common.out)?;
    write_run_config(
        &a.common.out,
        serde_json::json!({
            "command": "finetune",
            "corpus": a.common.corpus.display().to_string(),
            "init": a.init.as_ref().map(|p| p.display().to_string()),
            "steps": a.steps,
            "batch": a.common.batch,
            "lr": a.lr,
            "eval_every": a.eval_every,
            "seed": a.common.seed,
            "best_step": outcome.best_step,
            "best_val_ar": outcome.best_val_ar,
            "config_hash": params.config.hash(),
        }),
    )?;
    println!(
        "wrote checkpoint {} (best step {}, val AR {:.4})",
        a.common.out.display(),
        outcome.best_step,
        outcome.best_val_ar
    );
    Ok(())
}

fn cmd_train_scorer(a: TrainScorerArgs, force: bool, format: Format) -> Result<()> {
    ensure_writable(&a.common.out, force)?;
    let corpus = load_corpus(&a.common.corpus)?;
    let mut params = init_cross_params(model_config_for(&corpus), a.common.seed);
    let config = CrossTrainConfig {
        steps: a.steps,
        batch_size: a.common.batch.min(16),
        lr: a.lr,
        seed: a.common.seed,
    };
    let losses = train_cross_scorer(&mut params, &corpus, &config)?;
    for (i, loss) in losses.iter().enumerate() {
        match format {
            Format::Plain => println!("step {} loss {loss:.6}", i + 1),
            Format::JsonLines => {
                println!("{}", serde_json::json!({"step": i + 1, "loss": loss}))
            }
        }
    }
    let meta = CheckpointMeta { step: a.steps, val_ar: -1.0 };
    save_checkpoint(&params, &meta, &a.common.out)?;
    write_run_config(
        &a.common.out,
        serde_json::json!({
            "command": "train-scorer",
            "corpus": a.common.corpus.display().to_string(),
            "steps": a.steps,
            "lr": a.lr,
            "seed": a.common.seed,
            "config_hash": params.config.hash(),
        }),
    )?;
    println!("wrote scorer checkpoint {}", a.common.out.display());
    Ok(())
}

fn split_ids(corpus: &Corpus, split: &str) -> Result<Vec<u64>> {
    match split {
        "train" => Ok(corpus.splits.train.clone()),
        "val" => Ok(corpus.splits.val.clone()),
        "test" => Ok(corpus.splits.test.clone()),
        "all" => Ok(build_full_pool(corpus)),
        other => Err(LdError::InvalidArgument(format!(
            "unknown split '{other}' (expected train, val, test or all)"
        ))),
    }
}

fn cmd_index(a: IndexArgs, force: bool) -> Result<()> {
    ensure_writable(&a.out, force)?;
    let corpus = load_corpus(&a.corpus)?;
    let (params, _) = load_checkpoint(&a.checkpoint)?;
    let ids = split_ids(&corpus, &a.split)?;
    let modality = match a.modality {
        ModalityArg::Image => Modality::Image,
        ModalityArg::Text => Modality::Text,
    };
    let index = build_index(&params, &corpus, &ids, modality)?;
    index.save(&a.out)?;
    let meta = IndexMeta {
        config_hash: params.config.hash(),
        modality: match a.modality {
            ModalityArg::Image => "image".into(),
            ModalityArg::Text => "text".into(),
        },
    };
    let meta_path = a.out.with_extension("meta.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap()).map_err(|e| {
        LdError::Io {
            path: meta_path.display().to_string(),
            source: e,
        }
    })?;
    write_run_config(
        &a.out,
        serde_json::json!({
            "command": "index",
            "corpus": a.corpus.display().to_string(),
            "checkpoint": a.checkpoint.display().to_string(),
            "modality": meta.modality,
            "split": a.split,
            "items": index.len(),
            "config_hash": meta.config_hash,
        }),
    )?;
    println!("indexed {} items -> {}", index.len(), a.out.display());
    Ok(())
}

fn check_index_hash(index_path: &Path, params: &ModelParams) -> Result<()> {
    let meta_path = index_path.with_extension("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| LdError::Io {
        path: meta_path.display().to_string(),
        source: e,
    })?;
    let meta: IndexMeta = serde_json::from_str(&text).map_err(|e| LdError::Format {
        path: meta_path.display().to_string(),
        msg: e.to_string(),
    })?;
    if meta.config_hash != params.config.hash() {
        return Err(LdError::ConfigMismatch {
            expected: params.config.hash(),
            found: meta.config_hash,
        });
    }
    Ok(())
}

fn make_scorer<'a>(spec: &str, corpus: &'a Corpus) -> Result<Box<dyn CrossScorer + 'a>> {
    if spec == "oracle" {
        Ok(Box::new(OracleScorer::for_corpus(corpus)))
    } else {
        let (params, _) = load_checkpoint(Path::new(spec))?;
        Ok(Box::new(CrossAttentionScorer { params, corpus }))
    }
}

fn cmd_query(a: QueryArgs, format: Format) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let (params, _) = load_checkpoint(&a.checkpoint)?;
    check_index_hash(&a.index, &params)?;
    let index = EmbeddingIndex::load(&a.index)?;

    let tokens_storage;
    let (vec, query) = match (&a.text, a.image_id) {
        (Some(text), None) => {
            let mut ids = vec![CLS_ID];
            for w in text.split_whitespace() {
                ids.push(corpus.token_id(w).unwrap_or(UNK_ID));
            }
            tokens_storage = TokenSequence::new(ids);
            let enc = encode_text(&params, &tokens_storage)?;
            (
                enc.global.data().to_vec(),
                Query {
                    id: u64::MAX,
                    payload: QueryPayload::Text(&tokens_storage),
                },
            )
        }
        (None, Some(id)) => {
            let ex = corpus.example(id)?;
            let enc = encode_image(&params, &ex.regions)?;
            (
                enc.global.data().to_vec(),
                Query {
                    id,
                    payload: QueryPayload::Image(&ex.regions),
                },
            )
        }
        _ => {
            return Err(LdError::InvalidArgument(
                "provide exactly one of --text or --image-id".into(),
            ))
        }
    };

    let k = a.k.min(index.len());
    let result = if a.rerank {
        let scorer = make_scorer(&a.scorer, &corpus)?;
        let m = a.m.min(index.len()).max(k);
        retrieve_rerank(&index, &vec, &query, scorer.as_ref(), m, k)?
    } else {
        index.top_k(&vec, k)?
    };

    for (rank, (id, score)) in result.entries.iter().enumerate() {
        match format {
            Format::Plain => println!("{} {} {:.6}", rank + 1, id, score),
            Format::JsonLines => println!(
                "{}",
                serde_json::json!({"rank": rank + 1, "id": id, "score": score})
            ),
        }
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, force: bool, format: Format) -> Result<()> {
    ensure_writable(&a.out, force)?;
    let corpus = load_corpus(&a.corpus)?;
    let (params, _) = load_checkpoint(&a.checkpoint)?;
    let pool = if a.full_pool {
        build_full_pool(&corpus)
    } else {
        corpus.splits.test.clone()
    };
    let scorer = if a.rerank {
        Some(make_scorer(&a.scorer, &corpus)?)
    } else {
        None
    };
    let rerank = scorer.as_ref().map(|s| (s.as_ref(), a.m));
    let report = evaluate(&params, &corpus, &pool, &corpus.splits.test, rerank)?;
    let body = match format {
        Format::Plain => report.to_plain(),
        Format::JsonLines => format!("{}\n", report.to_json()),
    };
    std::fs::write(&a.out, &body).map_err(|e| LdError::Io {
        path: a.out.display().to_string(),
        source: e,
    })?;
    write_run_config(
        &a.out,
        serde_json::json!({
            "command": "eval",
            "corpus": a.corpus.display().to_string(),
            "checkpoint": a.checkpoint.display().to_string(),
            "full_pool": a.full_pool,
            "rerank": a.rerank,
            "m": a.m,
            "config_hash": params.config.hash(),
        }),
    )?;
    print!("{body}");
    Ok(())
}

fn cmd_bench(a: BenchArgs, force: bool, format: Format) -> Result<()> {
    ensure_writable(&a.out, force)?;
    let corpus = load_corpus(&a.corpus)?;
    let (params, _) = load_checkpoint(&a.checkpoint)?;
    let pool_sizes: Vec<usize> = a
        .pools
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| LdError::InvalidArgument(format!("bad pool size '{s}': {e}")))
        })
        .collect::<Result<_>>()?;
    let methods: Vec<Method> = a
        .methods
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    let scorer = make_scorer(&a.scorer, &corpus)?;
    let config = BenchConfig {
        pool_sizes,
        methods,
        query_count: a.queries,
        repetitions: a.reps,
        time_budget: Duration::from_secs(a.budget_secs),
        ..Default::default()
    };
    let report = bench_latency(&params, scorer.as_ref(), &corpus, &config)?;
    let body = match format {
        Format::Plain => format!("{}\n{}", report.to_plain(), report.to_table()),
        Format::JsonLines => format!("{}\n", report.to_json()),
    };
    std::fs::write(&a.out, &body).map_err(|e| LdError::Io {
        path: a.out.display().to_string(),
        source: e,
    })?;
    write_run_config(
        &a.out,
        serde_json::json!({
            "command": "bench",
            "corpus": a.corpus.display().to_string(),
            "checkpoint": a.checkpoint.display().to_string(),
            "pools": a.pools,
            "methods": a.methods,
            "queries": a.queries,
            "reps": a.reps,
            "budget_secs": a.budget_secs,
            "config_hash": params.config.hash(),
        }),
    )?;
    print!("{body}");
    Ok(())
}
