use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ragmt::config::FileConfig;
use ragmt::corpus::{
    check_disjoint, dedup_and_clean, load_pairs, parse_pairs, subset, Corpus, CorpusFormat, CorpusRole,
};
use ragmt::generation::RunLog;
use ragmt::harness::{table1_markdown, write_artifacts, Engine, KnowledgeBase};
use ragmt::retrieval::{EmbeddingCache, VectorIndex};

/// Retrieval-augmented Japanese→Chinese translation with BLEU evaluation.
#[derive(Debug, Parser)]
#[command(name = "ragmt", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file; paths in it are relative to the file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set pipeline.retriever.k=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    kb: Option<PathBuf>,
    #[arg(long, global = true)]
    test: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of examples retrieved per query.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Analysis and generation backends.
    #[arg(long, value_enum, global = true)]
    backend: Option<BackendKind>,
    #[arg(long, value_enum, global = true)]
    encoder: Option<EncoderKind>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendKind {
    /// Scripted analysis and the copy generator; no network.
    Stub,
    /// OpenAI-compatible chat completions.
    Remote,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EncoderKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Role {
    Kb,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EvalFormat {
    Text,
    Jsonl,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load a corpus, drop duplicates and empty pairs, and report.
    Ingest {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "kb")]
        role: Role,
        /// jsonl or tsv; inferred from the extension by default.
        #[arg(long)]
        format: Option<CorpusFormat>,
    },
    /// Check that no test sentence appears in the knowledge base.
    Check,
    /// Embed the knowledge base and write an index snapshot to --out.
    Index {
        #[arg(long)]
        size: Option<usize>,
    },
    /// Classify NMCC type and predict error risks for each sentence in a file.
    Analyze { input: PathBuf },
    /// Top-k knowledge-base examples for a query sentence.
    Retrieve {
        query: String,
        #[arg(long)]
        size: Option<usize>,
        /// Read this index snapshot instead of embedding the knowledge base.
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Translate one sentence through the full pipeline.
    Translate {
        sl: String,
        /// Knowledge-base size; 0 disables retrieval.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        bare_baseline: bool,
    },
    /// Sentence BLEU for hypothesis/reference files.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// text: one sentence per line; jsonl: objects matched by `id`.
        #[arg(long, value_enum)]
        format: Option<EvalFormat>,
    },
    /// Run every configured knowledge-base size and write the reports.
    Sweep {
        /// Comma-separated sizes; must include 0.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        bare_baseline: bool,
    },
    /// Start the workbench HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        size: Option<usize>,
    },
}

enum Failure {
    Usage(String),
    Operational(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Operational(e)
    }
}

type CliResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

struct Setup {
    file: FileConfig,
}

impl Setup {
    fn load(common: &Common, extra: &[String]) -> Result<Self, Failure> {
        let mut overrides = common.overrides.clone();
        if let Some(seed) = common.seed {
            overrides.push(format!("pipeline.seed={seed}"));
        }
        if let Some(k) = common.k {
            overrides.push(format!("pipeline.retriever.k={k}"));
        }
        match common.backend {
            Some(BackendKind::Stub) => {
                overrides.push(r#"pipeline.analysis={kind="scripted"}"#.into());
                overrides.push(r#"pipeline.generation={kind="copy"}"#.into());
            }
            Some(BackendKind::Remote) => {
                overrides.push(r#"pipeline.analysis={kind="remote"}"#.into());
                overrides.push(r#"pipeline.generation={kind="remote"}"#.into());
            }
            None => {}
        }
        match common.encoder {
            Some(EncoderKind::Mock) => overrides.push(r#"pipeline.encoder={kind="mock"}"#.into()),
            Some(EncoderKind::Remote) => overrides.push(r#"pipeline.encoder={kind="remote"}"#.into()),
            None => {}
        }
        overrides.extend_from_slice(extra);
        let mut file =
            FileConfig::load(common.config.as_deref(), &overrides).map_err(|e| Failure::Operational(anyhow!(e)))?;
        if let Some(p) = &common.kb {
            file.paths.kb = Some(p.clone());
        }
        if let Some(p) = &common.test {
            file.paths.test = Some(p.clone());
        }
        if let Some(p) = &common.out {
            file.paths.out = Some(p.clone());
        }
        Ok(Setup { file })
    }

    fn config_hash(&self) -> String {
        self.file.pipeline.hash()
    }

    fn corpus(&self, path: &Option<PathBuf>, flag: &str, role: CorpusRole) -> Result<Corpus, Failure> {
        let path = path.as_ref().ok_or_else(|| {
            usage(format!(
                "no {flag} corpus given (use --{flag} or paths.{flag} in the config)"
            ))
        })?;
        let corpus = load_pairs(path, CorpusFormat::from_path(path), role)
            .with_context(|| format!("loading {}", path.display()))?;
        Ok(corpus)
    }

    fn kb(&self) -> Result<Corpus, Failure> {
        self.corpus(&self.file.paths.kb, "kb", CorpusRole::KnowledgeBase)
    }

    fn test(&self) -> Result<Corpus, Failure> {
        self.corpus(&self.file.paths.test, "test", CorpusRole::TestSet)
    }

    fn engine(&self) -> anyhow::Result<Engine> {
        let cache = match &self.file.paths.embedding_cache {
            Some(p) => EmbeddingCache::open(p).with_context(|| format!("opening {}", p.display()))?,
            None => EmbeddingCache::in_memory(),
        };
        Ok(Engine::from_config(self.file.pipeline.clone(), Arc::new(cache))?)
    }

    fn sized_kb(&self, size: Option<usize>) -> Result<Corpus, Failure> {
        let kb = self.kb()?;
        match size {
            Some(n) => Ok(subset(&kb, n, self.file.pipeline.seed).map_err(anyhow::Error::from)?),
            None => Ok(kb),
        }
    }

    fn out_path(&self, what: &str) -> Result<PathBuf, Failure> {
        self.file
            .paths
            .out
            .clone()
            .ok_or_else(|| usage(format!("{what} needs --out")))
    }
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, value)?;
    writeln!(stdout)?;
    Ok(())
}

fn print_jsonl<T: Serialize>(out: &mut dyn Write, value: &T) -> anyhow::Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn output_sink(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent)?;
            }
            Box::new(std::io::BufWriter::new(
                std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
            ))
        }
        None => Box::new(std::io::stdout().lock()),
    })
}

fn ingest(ctx: &Setup, input: &Path, role: Role, format: Option<CorpusFormat>) -> CliResult {
    let role = match role {
        Role::Kb => CorpusRole::KnowledgeBase,
        Role::Test => CorpusRole::TestSet,
    };
    let format = format.unwrap_or_else(|| CorpusFormat::from_path(input));
    let corpus = load_pairs(input, format, role).with_context(|| format!("loading {}", input.display()))?;
    let loaded = corpus.len();
    let (clean, removed) = dedup_and_clean(corpus);
    for id in clean.missing_nmcc() {
        log::warn!("{id}: has_nmcc is false");
    }
    if let Some(out) = &ctx.file.paths.out {
        let mut sink = output_sink(Some(out))?;
        clean.write_jsonl(&mut sink).context("writing cleaned corpus")?;
        sink.flush().context("writing cleaned corpus")?;
    }
    print_json(&serde_json::json!({
        "input": input.display().to_string(),
        "loaded": loaded,
        "kept": clean.len(),
        "removed": removed,
        "missing_nmcc": clean.missing_nmcc(),
        "digest": clean.digest(),
        "config_hash": ctx.config_hash(),
    }))?;
    Ok(())
}

fn check(ctx: &Setup) -> CliResult {
    let report = check_disjoint(&ctx.test()?, &ctx.kb()?);
    if report.is_clean() {
        println!("clean: no test sentence occurs in the knowledge base");
        Ok(())
    } else {
        println!("{report}");
        Err(Failure::Operational(anyhow!("test set and knowledge base overlap")))
    }
}

fn index(ctx: &Setup, size: Option<usize>) -> CliResult {
    let out = ctx.out_path("index")?;
    let kb = ctx.sized_kb(size)?;
    let index = ctx.engine()?.build_index(&kb).map_err(anyhow::Error::from)?;
    let mut sink = output_sink(Some(&out))?;
    index.write_snapshot(&mut sink).context("writing snapshot")?;
    sink.flush().context("writing snapshot")?;
    print_json(&serde_json::json!({
        "snapshot": out.display().to_string(),
        "entries": index.len(),
        "dim": index.dim,
        "encoder_id": index.encoder_id,
        "kb_digest": kb.digest(),
        "config_hash": ctx.config_hash(),
    }))?;
    Ok(())
}

/// JSONL corpora keep their ids; plain text gets `line{n}`.
fn sentences(input: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let raw = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    if input.extension().is_some_and(|e| e == "jsonl") {
        let corpus = parse_pairs(&raw, CorpusFormat::Jsonl, CorpusRole::TestSet)?;
        return Ok(corpus.pairs.into_iter().map(|p| (p.id, p.source_ja)).collect());
    }
    Ok(raw
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (format!("line{}", i + 1), l.trim().to_string()))
        .collect())
}

fn analyze(ctx: &Setup, input: &Path) -> CliResult {
    let engine = ctx.engine()?;
    let hash = ctx.config_hash();
    let mut sink = output_sink(ctx.file.paths.out.as_deref())?;
    for (id, sl) in sentences(input)? {
        let analysis = engine.analyze(&sl).with_context(|| format!("analysing {id}"))?;
        print_jsonl(
            &mut sink,
            &serde_json::json!({"id": id, "sl": sl, "analysis": analysis, "config_hash": hash}),
        )?;
    }
    sink.flush().context("writing output")?;
    Ok(())
}

fn retrieve(ctx: &Setup, query: &str, size: Option<usize>, snapshot: Option<&Path>) -> CliResult {
    let engine = ctx.engine()?;
    let kb = ctx.sized_kb(size)?;
    let index = match snapshot.or(ctx.file.paths.index.as_deref()) {
        Some(p) => {
            let file = std::fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            let index = VectorIndex::read_snapshot(std::io::BufReader::new(file)).map_err(anyhow::Error::from)?;
            index.check_linkage(&kb).map_err(anyhow::Error::from)?;
            index
        }
        None => engine.build_index(&kb).map_err(anyhow::Error::from)?,
    };
    let hits = engine.retrieve(&index, query).map_err(anyhow::Error::from)?;
    let lookup = kb.id_lookup();
    let rows: Vec<_> = hits
        .iter()
        .map(|h| {
            let pair = lookup.get(h.pair_id.as_str());
            serde_json::json!({
                "rank": h.rank,
                "pair_id": h.pair_id,
                "distance": h.distance,
                "similarity": h.similarity,
                "jp": pair.map(|p| p.source_ja.as_str()),
                "zh": pair.map(|p| p.target_zh.as_str()),
            })
        })
        .collect();
    print_json(&serde_json::json!({"query": query, "hits": rows, "config_hash": ctx.config_hash()}))?;
    Ok(())
}

fn translate(ctx: &Setup, sl: &str, size: Option<usize>) -> CliResult {
    let engine = ctx.engine()?;
    let knowledge: Option<KnowledgeBase> = match size {
        Some(0) => None,
        _ if ctx.file.paths.kb.is_none() && size.is_none() => None,
        _ => {
            let kb = ctx.sized_kb(size)?;
            Some(engine.knowledge_base(kb).map_err(anyhow::Error::from)?)
        }
    };
    let run = engine.run_sentence("cli", sl, knowledge.as_ref(), None)?;
    print_json(&serde_json::json!({
        "output_zh": run.record.output_zh,
        "analysis": run.analysis,
        "hits": run.hits,
        "prompt": run.record.prompt.rendered,
        "backend": run.record.backend,
        "config_hash": ctx.config_hash(),
    }))?;
    Ok(())
}

fn jsonl_texts(path: &Path, keys: &[&str]) -> anyhow::Result<Vec<(String, String)>> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value =
            serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let id = match &v["id"] {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Null => bail!("{}:{}: missing `id`", path.display(), i + 1),
            other => other.to_string(),
        };
        let text = keys
            .iter()
            .find_map(|k| v[*k].as_str())
            .ok_or_else(|| anyhow!("{}:{}: none of {keys:?} present", path.display(), i + 1))?;
        rows.push((id, text.to_string()));
    }
    Ok(rows)
}

fn evaluate(ctx: &Setup, hyp: &Path, reference: &Path, format: Option<EvalFormat>) -> CliResult {
    let format = format.unwrap_or(if hyp.extension().is_some_and(|e| e == "jsonl") {
        EvalFormat::Jsonl
    } else {
        EvalFormat::Text
    });
    let pairs: Vec<(String, String, String)> = match format {
        EvalFormat::Text => {
            let read = |p: &Path| -> anyhow::Result<Vec<String>> {
                Ok(std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?
                    .lines()
                    .map(str::to_string)
                    .collect())
            };
            let (h, r) = (read(hyp)?, read(reference)?);
            if h.len() != r.len() {
                return Err(anyhow!(
                    "{} has {} lines but {} has {}",
                    hyp.display(),
                    h.len(),
                    reference.display(),
                    r.len()
                )
                .into());
            }
            h.into_iter()
                .zip(r)
                .enumerate()
                .map(|(i, (h, r))| (format!("line{}", i + 1), h, r))
                .collect()
        }
        EvalFormat::Jsonl => {
            let h = jsonl_texts(hyp, &["output_zh", "hyp", "text"])?;
            let r: HashMap<String, String> = jsonl_texts(reference, &["target_zh", "ref", "text"])?
                .into_iter()
                .collect();
            h.into_iter()
                .map(|(id, text)| {
                    let reference = r.get(&id).cloned().ok_or_else(|| anyhow!("no reference for id {id}"))?;
                    Ok((id, text, reference))
                })
                .collect::<anyhow::Result<_>>()?
        }
    };
    let eps = ctx.file.pipeline.smoothing_epsilon;
    let hash = ctx.config_hash();
    let mut scores = Vec::with_capacity(pairs.len());
    let mut rows = Vec::with_capacity(pairs.len());
    for (id, h, r) in &pairs {
        let s = ragmt::bleu::score_text(h, r, eps).with_context(|| format!("scoring {id}"))?;
        println!("{id}\t{:.2}", s.score);
        scores.push(s.score);
        rows.push(
            serde_json::json!({"kind": "sentence", "id": id, "score": s.score, "precisions": s.precisions,
            "bp": s.bp, "hyp_len": s.hyp_len, "ref_len": s.ref_len, "epsilon": eps, "config_hash": hash}),
        );
    }
    let mean = ragmt::bleu::macro_average(&scores).map_err(anyhow::Error::from)?;
    println!("mean\t{mean:.2}");
    if let Some(out) = &ctx.file.paths.out {
        let mut sink = output_sink(Some(out))?;
        for row in &rows {
            print_jsonl(&mut sink, row)?;
        }
        print_jsonl(
            &mut sink,
            &serde_json::json!({"kind": "summary", "count": scores.len(), "mean": mean, "epsilon": eps, "config_hash": hash}),
        )?;
        sink.flush().context("writing output")?;
    }
    Ok(())
}

fn sweep(ctx: &Setup) -> CliResult {
    let out = ctx.file.paths.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let (test, kb) = (ctx.test()?, ctx.kb()?);
    let engine = ctx.engine()?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let log = RunLog::open(&out.join("runs.jsonl")).map_err(anyhow::Error::from)?;
    let report = engine.sweep(&test, &kb, Some(&log))?;
    write_artifacts(&report, &out)?;
    print!("{}", table1_markdown(&report.rows, &report.config_hash));
    println!("artifacts: {}", out.display());
    if !report.valid {
        let failed: usize = report.conditions.iter().map(|c| c.failures.len()).sum();
        return Err(anyhow!("report flagged invalid: {failed} sentence runs failed (see report.json)").into());
    }
    Ok(())
}

fn serve(ctx: &Setup, bind: Option<String>, size: Option<usize>) -> CliResult {
    let engine = ctx.engine()?;
    let size = size.or(ctx.file.service.kb_size);
    let knowledge = match &ctx.file.paths.kb {
        Some(_) => Some(
            engine
                .knowledge_base(ctx.sized_kb(size)?)
                .map_err(anyhow::Error::from)?,
        ),
        None => {
            log::warn!("no knowledge base configured; retrieval is unavailable");
            None
        }
    };
    let store = ragmt_service::SessionStore::open(&ctx.file.service.sessions_dir)?;
    let workbench = Arc::new(ragmt_service::Workbench::new(store, engine, knowledge));
    let bind = bind.unwrap_or_else(|| ctx.file.service.bind.clone());
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    runtime
        .block_on(ragmt_service::serve(
            workbench,
            &bind,
            ctx.file.service.static_dir.clone(),
        ))
        .with_context(|| format!("serving on {bind}"))?;
    Ok(())
}

impl From<ragmt::harness::HarnessError> for Failure {
    fn from(e: ragmt::harness::HarnessError) -> Self {
        Failure::Operational(e.into())
    }
}

impl From<ragmt_service::ServiceError> for Failure {
    fn from(e: ragmt_service::ServiceError) -> Self {
        Failure::Operational(e.into())
    }
}

fn run(cli: Cli) -> CliResult {
    let extra: Vec<String> = match &cli.command {
        Command::Sweep { sizes, bare_baseline } => {
            let mut v = Vec::new();
            if let Some(sizes) = sizes {
                let list: Vec<String> = sizes.iter().map(usize::to_string).collect();
                v.push(format!("pipeline.sizes=[{}]", list.join(",")));
            }
            if *bare_baseline {
                v.push("pipeline.bare_baseline=true".into());
            }
            v
        }
        Command::Translate {
            bare_baseline: true, ..
        } => vec!["pipeline.bare_baseline=true".into()],
        _ => Vec::new(),
    };
    let ctx = Setup::load(&cli.common, &extra)?;
    match cli.command {
        Command::Ingest { input, role, format } => ingest(&ctx, &input, role, format),
        Command::Check => check(&ctx),
        Command::Index { size } => index(&ctx, size),
        Command::Analyze { input } => analyze(&ctx, &input),
        Command::Retrieve { query, size, index } => retrieve(&ctx, &query, size, index.as_deref()),
        Command::Translate { sl, size, .. } => translate(&ctx, &sl, size),
        Command::Evaluate { hyp, reference, format } => evaluate(&ctx, &hyp, &reference, format),
        Command::Sweep { .. } => sweep(&ctx),
        Command::Serve { bind, size } => serve(&ctx, bind, size),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Operational(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
