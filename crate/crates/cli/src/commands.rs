use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use serde_json::Value;
use tod_core::backends::{
    CompletionBackend, HttpBackend, HttpBackendConfig, RecordingBackend, ReplayBackend, WireStyle,
};
use tod_core::config::PipelineConfig;
use tod_core::context_store::{build_store, ContextStore, Embedder, HashingEmbedder, HttpEmbedder};
use tod_core::dialogue::Dialogue;
use tod_core::eval::{evaluate, EvalOptions, EvalReport};
use tod_core::ingest::{load_any, load_multiwoz, load_sgd, save_corpus, snippets, LoadedCorpus};
use tod_core::pipeline::{from_jsonl, predictions, to_jsonl, DialogueRun, Pipeline, Prediction};
use tod_core::prompts::TemplateSet;
use tod_service::{corpus_goals, AppState, BusyPolicy, ServiceConfig, DEFAULT_INSTRUCTIONS};

use crate::args::*;
use crate::manifest::{file_hash, json_hash, text_hash, Manifest};
use crate::{CliError, CliResult};

fn write(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(CliError::input)?;
    }
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::input)
}

/// Resolves the pipeline configuration: defaults, then the config file,
/// then flags.
pub fn resolve_config(args: &PipelineArgs) -> CliResult<PipelineConfig> {
    let mut config = PipelineConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(CliError::input)?;
        let table: toml::Table = toml::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))
            .map_err(CliError::input)?;
        let overrides = serde_json::to_value(table).map_err(|e| CliError::input(anyhow!(e)))?;
        config = config
            .with_overrides(&overrides)
            .with_context(|| path.display().to_string())
            .map_err(CliError::input)?;
    }
    let mut flags = serde_json::Map::new();
    let mut set = |k: &str, v: Value| {
        flags.insert(k.to_string(), v);
    };
    if args.few_shot {
        set("few_shot", Value::Bool(true));
    }
    if args.oracle_state {
        set("oracle_state", Value::Bool(true));
    }
    if args.oracle_domain {
        set("oracle_domain", Value::Bool(true));
    }
    if let Some(n) = args.pool_size {
        set("pool_size_per_domain", n.into());
    }
    if let Some(k) = args.k {
        set("retrieval_k", k.into());
    }
    if let Some(s) = args.seed {
        set("seed", s.into());
    }
    if let Some(t) = args.fuzzy_threshold {
        set("fuzzy_threshold", t.into());
    }
    if let Some(t) = args.temperature {
        set("temperature", t.into());
    }
    config
        .with_overrides(&Value::Object(flags))
        .context("flags")
        .map_err(CliError::input)
}

fn load(path: &Path) -> CliResult<LoadedCorpus> {
    let loaded = load_any(path)
        .with_context(|| format!("loading corpus {}", path.display()))
        .map_err(CliError::input)?;
    for w in &loaded.warnings {
        log::warn!("{w}");
    }
    Ok(loaded)
}

fn embedder(args: &EmbedderArgs) -> CliResult<Arc<dyn Embedder>> {
    Ok(match args.embedder {
        EmbedderKind::Hashing => Arc::new(HashingEmbedder::new(args.embed_dim)),
        EmbedderKind::Http => {
            let url = args
                .embed_url
                .as_deref()
                .ok_or_else(|| CliError::input(anyhow!("--embedder http needs --embed-url")))?;
            Arc::new(
                HttpEmbedder::new(url, &args.embed_model, args.embed_dim, args.embed_api_key_env.as_deref())
                    .map_err(|e| CliError::backend(anyhow!(e)))?,
            )
        }
    })
}

fn backend(args: &BackendArgs) -> CliResult<Arc<dyn CompletionBackend>> {
    let cassette = || {
        args.cassette
            .as_deref()
            .ok_or_else(|| CliError::input(anyhow!("--backend {:?} needs --cassette", args.backend)))
    };
    let http = || -> CliResult<HttpBackend> {
        let style = match args.wire {
            Wire::Completion => WireStyle::Completion,
            Wire::Chat => WireStyle::Chat,
        };
        let default_path = match style {
            WireStyle::Completion => "/v1/completions",
            WireStyle::Chat => "/v1/chat/completions",
        };
        let config = HttpBackendConfig {
            base_url: args
                .endpoint
                .clone()
                .ok_or_else(|| CliError::input(anyhow!("remote backends need --endpoint")))?,
            path: args.endpoint_path.clone().unwrap_or_else(|| default_path.into()),
            style,
            model: args.model.clone(),
            api_key_env: args.api_key_env.clone(),
            max_concurrency: args.max_concurrency.max(1),
            ..Default::default()
        };
        HttpBackend::new(config).map_err(|e| CliError::backend(anyhow!(e)))
    };
    Ok(match args.backend {
        BackendKind::Replay => Arc::new(
            ReplayBackend::load(cassette()?, !args.lenient_replay)
                .context("loading cassette")
                .map_err(CliError::input)?,
        ),
        BackendKind::Http => Arc::new(http()?),
        BackendKind::Record => Arc::new(
            RecordingBackend::new(http()?, cassette()?).map_err(|e| CliError::input(anyhow!(e)))?,
        ),
    })
}

fn templates(dir: Option<&Path>, corpus: &str) -> CliResult<TemplateSet> {
    match dir {
        Some(d) => TemplateSet::load_dir(d)
            .with_context(|| format!("templates in {}", d.display()))
            .map_err(CliError::input),
        None => TemplateSet::builtin(corpus)
            .with_context(|| format!("no built-in templates for `{corpus}`; pass --templates"))
            .map_err(CliError::input),
    }
}

struct Prepared {
    pipeline: Pipeline,
    loaded: LoadedCorpus,
}

struct Sources<'a> {
    corpus: &'a Path,
    pool_split: &'a str,
    store: Option<&'a Path>,
    templates: Option<&'a Path>,
    backend: &'a BackendArgs,
    embedder: &'a EmbedderArgs,
}

fn prepare(src: Sources<'_>, config: PipelineConfig, manifest: &mut Manifest) -> CliResult<Prepared> {
    let Sources {
        corpus,
        pool_split,
        store,
        templates: template_dir,
        backend: backend_args,
        embedder: embedder_args,
    } = src;
    let loaded = load(corpus)?;
    manifest.input("corpus", corpus, json_hash(&loaded.corpus));
    let templates = templates(template_dir, &loaded.corpus.name)?;
    manifest.input("templates", template_dir.unwrap_or(Path::new("builtin")), templates.content_hash().to_string());
    if let Some(c) = &backend_args.cassette {
        if c.exists() {
            manifest.input("cassette", c, file_hash(c).map_err(CliError::input)?);
        }
    }
    let store = if config.few_shot {
        let embedder = embedder(embedder_args)?;
        let store = match store {
            Some(path) => {
                let s = ContextStore::load_jsonl(path, embedder).map_err(|e| CliError::input(anyhow!(e)))?;
                manifest.input("store", path, file_hash(path).map_err(CliError::input)?);
                s
            }
            None => {
                let snips = snippets(&loaded.corpus, pool_split, config.context_window_utterances);
                let s = build_store(&snips, config.pool_size_per_domain, embedder, config.seed)
                    .map_err(|e| CliError::backend(anyhow!(e)))?;
                manifest.input("store", Path::new("built"), store_hash(&s));
                s
            }
        };
        Some(Arc::new(store))
    } else {
        None
    };
    let pipeline = Pipeline {
        config,
        templates: Arc::new(templates),
        schemas: Arc::new(loaded.corpus.schemas.clone()),
        backend: backend(backend_args)?,
        store,
        database: loaded.database.clone().map(Arc::new),
    };
    Ok(Prepared { pipeline, loaded })
}

fn store_hash(store: &ContextStore) -> String {
    let lines: Vec<_> = store.examples().collect();
    text_hash(&to_jsonl(&lines))
}

fn parallelism(args: &CorpusRunArgs) -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match (args.parallelism, args.backend.backend) {
        (Some(n), _) => n.max(1),
        (None, BackendKind::Replay) => cores,
        (None, _) => cores.min(args.backend.max_concurrency.max(1)),
    }
}

fn select<'a>(loaded: &'a LoadedCorpus, args: &'a CorpusRunArgs) -> CliResult<Vec<&'a Dialogue>> {
    let mut dialogues: Vec<&Dialogue> = loaded.corpus.split(&args.split).collect();
    if !args.dialogues.is_empty() {
        for id in &args.dialogues {
            if !dialogues.iter().any(|d| &d.id == id) {
                return Err(CliError::input(anyhow!("dialogue `{id}` is not in split `{}`", args.split)));
            }
        }
        dialogues.retain(|d| args.dialogues.contains(&d.id));
    }
    if let Some(n) = args.limit {
        dialogues.truncate(n);
    }
    if dialogues.is_empty() {
        return Err(CliError::input(anyhow!("split `{}` has no dialogues", args.split)));
    }
    Ok(dialogues)
}

pub fn ingest(args: &IngestArgs, manifest: &mut Manifest) -> CliResult<()> {
    let loaded = match args.dataset {
        Dataset::Multiwoz => load_multiwoz(&args.path),
        Dataset::Sgd => load_sgd(&args.path),
    }
    .with_context(|| format!("ingesting {}", args.path.display()))
    .map_err(CliError::input)?;
    for w in &loaded.warnings {
        log::warn!("{w}");
    }
    save_corpus(&args.out, &loaded.corpus, loaded.database.as_ref())
        .context("writing corpus cache")
        .map_err(CliError::input)?;
    let c = &loaded.corpus;
    manifest.input("dataset", &args.path, json_hash(c));
    manifest.output(&args.out);
    manifest.extra("dialogues", c.dialogues.len().into());
    manifest.extra("domains", c.domain_names().into());
    manifest.extra("warnings", loaded.warnings.len().into());
    println!(
        "{}: {} dialogues, {} domains ({}), {} warnings -> {}",
        c.name,
        c.dialogues.len(),
        c.schemas.len(),
        c.domain_names().join(", "),
        loaded.warnings.len(),
        args.out.display()
    );
    manifest.write(&args.out.join("manifest.json"))
}

pub fn build_store_cmd(args: &BuildStoreArgs, manifest: &mut Manifest) -> CliResult<()> {
    let config = resolve_config(&args.pipeline)?;
    let loaded = load(&args.corpus)?;
    manifest.input("corpus", &args.corpus, json_hash(&loaded.corpus));
    manifest.config(&config);
    let snips = snippets(&loaded.corpus, &args.split, config.context_window_utterances);
    let embedder = embedder(&args.embedder)?;
    let store = build_store(&snips, config.pool_size_per_domain, embedder, config.seed)
        .map_err(|e| CliError::backend(anyhow!(e)))?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::input(anyhow!(e)))?;
    }
    store.save_jsonl(&args.out).map_err(|e| CliError::input(anyhow!(e)))?;
    manifest.output(&args.out);
    manifest.extra("examples", store.len().into());
    manifest.extra("embedder", store.embedder().id().into());
    let per_domain: BTreeMap<String, usize> = store.domains().map(|d| (d.to_string(), store.bucket(d).len())).collect();
    println!("{} examples over {} domains -> {}", store.len(), per_domain.len(), args.out.display());
    manifest.extra("per_domain", serde_json::to_value(per_domain).unwrap_or_default());
    manifest.write(&sibling(&args.out, "manifest.json"))
}

/// `store.jsonl` -> `store.manifest.json`
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

struct RunOutput {
    runs: Vec<DialogueRun>,
    predictions: Vec<Prediction>,
    prepared: Prepared,
}

fn run_into(args: &CorpusRunArgs, config: PipelineConfig, out: &Path, manifest: &mut Manifest) -> CliResult<RunOutput> {
    manifest.config(&config);
    let src = Sources {
        corpus: &args.corpus,
        pool_split: &args.pool_split,
        store: args.store.as_deref(),
        templates: args.templates.as_deref(),
        backend: &args.backend,
        embedder: &args.embedder,
    };
    let prepared = prepare(src, config, manifest)?;
    let dialogues = select(&prepared.loaded, args)?;
    let workers = parallelism(args);
    log::info!("{} dialogues on {workers} workers", dialogues.len());
    let runs = prepared.pipeline.run_corpus(&dialogues, workers);
    let preds = predictions(&runs, &dialogues);

    let predictions_path = out.join("predictions.jsonl");
    let transcripts_path = out.join("transcripts.jsonl");
    write(&predictions_path, &to_jsonl(&preds))?;
    write(&transcripts_path, &to_jsonl(&runs))?;
    manifest.output(&predictions_path);
    manifest.output(&transcripts_path);
    let run_manifest = prepared.pipeline.manifest(&prepared.loaded.corpus.name, &args.split, &runs);
    manifest.extra("run", serde_json::to_value(&run_manifest).unwrap_or_default());
    manifest.write(&out.join("manifest.json"))?;

    if let Some(f) = run_manifest.failures.first() {
        for f in &run_manifest.failures {
            eprintln!("{}: {}", f.dialogue_id, f.error);
        }
        let msg = anyhow!("{} of {} dialogues failed; first: {}: {}", run_manifest.failures.len(), runs.len(), f.dialogue_id, f.error);
        return Err(if run_manifest.failures.iter().any(|f| f.backend_failure) {
            CliError::backend(msg)
        } else {
            CliError::input(msg)
        });
    }
    Ok(RunOutput {
        runs,
        predictions: preds,
        prepared,
    })
}

pub fn run(args: &RunArgs, manifest: &mut Manifest) -> CliResult<()> {
    let config = resolve_config(&args.run.pipeline)?;
    let out = run_into(&args.run, config, &args.out, manifest)?;
    let m = out.prepared.pipeline.manifest(&out.prepared.loaded.corpus.name, &args.run.split, &out.runs);
    println!(
        "{}: {} dialogues, {} turns, {} calls -> {}",
        m.variant,
        m.dialogues,
        m.turns,
        m.calls,
        args.out.display()
    );
    Ok(())
}

pub fn sweep(args: &SweepArgs, manifest: &mut Manifest) -> CliResult<()> {
    let base = resolve_config(&args.run.pipeline)?;
    if !base.few_shot {
        return Err(CliError::input(anyhow!("a pool-size sweep needs --few-shot")));
    }
    let mut points = Vec::new();
    let mut table = format!("{:>9} {:>8} {:>8} {:>8} {:>8}\n", "pool", "BLEU", "JGA", "Slot-F1", "Success");
    for &size in &args.pool_sizes {
        let mut config = base.clone();
        // not revalidated: a pool smaller than k just yields fewer examples
        config.pool_size_per_domain = size;
        let dir = args.out.join(format!("pool-{size}"));
        let mut point_manifest = Manifest::new(manifest.command(), manifest.args().to_vec());
        let out = run_into(&args.run, config, &dir, &mut point_manifest)?;
        let report = evaluate(
            &out.predictions,
            &out.prepared.loaded.corpus,
            out.prepared.loaded.database.as_ref(),
            EvalOptions {
                fuzzy_threshold: base.fuzzy_threshold,
                lenient_jga: false,
            },
        )
        .map_err(|e| CliError::input(anyhow!(e)))?;
        write(&dir.join("report.json"), &pretty(&report))?;
        table.push_str(&format!(
            "{:>9} {:>8.2} {:>8.4} {:>8.4} {:>8}\n",
            size,
            report.bleu,
            report.jga,
            report.slot_f1,
            report.success.map_or("n/a".into(), |s| format!("{s:.4}"))
        ));
        manifest.output(&dir);
        points.push(serde_json::json!({ "pool_size": size, "report": report }));
    }
    let path = args.out.join("sweep.json");
    write(&path, &pretty(&points))?;
    manifest.config(&base);
    manifest.output(&path);
    print!("{table}");
    manifest.write(&args.out.join("manifest.json"))
}

fn pretty<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

/// Metrics that differ between two reports by more than `tolerance`.
pub fn report_mismatches(got: &EvalReport, want: &EvalReport, tolerance: f64) -> Vec<String> {
    let mut out = Vec::new();
    let mut cmp = |name: &str, a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) if (a - b).abs() <= tolerance => {}
        (None, None) => {}
        _ => out.push(format!("{name}: got {a:?}, expected {b:?}")),
    };
    cmp("bleu", Some(got.bleu), Some(want.bleu));
    cmp("jga", Some(got.jga), Some(want.jga));
    cmp("slot_precision", Some(got.slot_precision), Some(want.slot_precision));
    cmp("slot_recall", Some(got.slot_recall), Some(want.slot_recall));
    cmp("slot_f1", Some(got.slot_f1), Some(want.slot_f1));
    cmp("domain_accuracy", Some(got.domain_accuracy), Some(want.domain_accuracy));
    cmp("success", got.success, want.success);
    cmp("turns", Some(got.turns as f64), Some(want.turns as f64));
    cmp("dialogues", Some(got.dialogues as f64), Some(want.dialogues as f64));
    for (d, w) in &want.per_domain {
        let g = got.per_domain.get(d);
        cmp(&format!("{d}.jga"), g.map(|g| g.jga), Some(w.jga));
        cmp(&format!("{d}.slot_f1"), g.map(|g| g.slot_f1), Some(w.slot_f1));
    }
    out
}

pub fn evaluate_cmd(args: &EvaluateArgs, manifest: &mut Manifest) -> CliResult<()> {
    let text = fs::read_to_string(&args.predictions)
        .with_context(|| format!("reading {}", args.predictions.display()))
        .map_err(CliError::input)?;
    let preds: Vec<Prediction> = from_jsonl(&text)
        .with_context(|| format!("parsing {}", args.predictions.display()))
        .map_err(CliError::input)?;
    let loaded = load(&args.corpus)?;
    manifest.input("predictions", &args.predictions, text_hash(&text));
    manifest.input("corpus", &args.corpus, json_hash(&loaded.corpus));
    let report = evaluate(
        &preds,
        &loaded.corpus,
        loaded.database.as_ref(),
        EvalOptions {
            fuzzy_threshold: args.fuzzy_threshold,
            lenient_jga: args.lenient_jga,
        },
    )
    .map_err(|e| CliError::input(anyhow!(e)))?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    print!("{}", report.render(&args.label, args.per_domain));
    if let Some(out) = &args.out {
        write(out, &pretty(&report))?;
        manifest.output(out);
        manifest.write(&sibling(out, "manifest.json"))?;
    }
    if let Some(expect) = &args.expect {
        let want: EvalReport = serde_json::from_str(
            &fs::read_to_string(expect)
                .with_context(|| format!("reading {}", expect.display()))
                .map_err(CliError::input)?,
        )
        .with_context(|| format!("parsing {}", expect.display()))
        .map_err(CliError::input)?;
        let diffs = report_mismatches(&report, &want, args.tolerance);
        if !diffs.is_empty() {
            return Err(CliError::mismatch(anyhow!(
                "report differs from {}:\n  {}",
                expect.display(),
                diffs.join("\n  ")
            )));
        }
    }
    Ok(())
}

pub fn serve(args: &ServeArgs, manifest: &mut Manifest) -> CliResult<()> {
    let config = resolve_config(&args.pipeline)?;
    manifest.config(&config);
    let seed = config.seed;
    let src = Sources {
        corpus: &args.corpus,
        pool_split: &args.pool_split,
        store: args.store.as_deref(),
        templates: args.templates.as_deref(),
        backend: &args.backend,
        embedder: &args.embedder,
    };
    let prepared = prepare(src, config, manifest)?;
    let instructions = match &args.instructions {
        Some(p) => fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))
            .map_err(CliError::input)?,
        None => DEFAULT_INSTRUCTIONS.to_string(),
    };
    let service_config = ServiceConfig {
        seed,
        busy: match args.busy {
            Busy::Reject => BusyPolicy::Reject,
            Busy::Queue => BusyPolicy::Queue,
        },
        data_file: args.data_file.clone(),
        static_dir: args.static_dir.clone(),
        cors_origins: args.cors_origin.clone(),
        instructions,
    };
    let goals = corpus_goals(&prepared.loaded.corpus);
    let state = AppState::new(prepared.pipeline, goals, service_config)
        .context("opening the session store")
        .map_err(CliError::input)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::input(anyhow!(e)))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.addr)
            .await
            .with_context(|| format!("binding {}", args.addr))
            .map_err(CliError::input)?;
        let addr = listener.local_addr().map_err(|e| CliError::input(anyhow!(e)))?;
        println!("listening on http://{addr}");
        tod_service::serve(listener, Arc::new(state))
            .await
            .map_err(|e| CliError::input(anyhow!(e)))
    })
}
