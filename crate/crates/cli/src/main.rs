//! `persona`: command-line front end for the persona pipeline.
//!
//! Every subcommand reads the files given with `--input` (in the order
//! listed in its help), writes to `--output`, and honors `--seed` and
//! `--config`. Failures print one JSON object to stderr and exit with 1
//! (runtime), 2 (usage or configuration) or 3 (file format or shape).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use persona_core::artifact::ModelArtifact;
use persona_core::config::Config;
use persona_core::events::{
    group_by_buyer_shop, ingest, read_events, split_sessions, write_events, BuyerShopAggregate, Catalog, SessionLog,
};
use persona_core::features::{read_feature_matrix, write_feature_matrix, FeatureRow, NormalizerState, FEATURE_MAGIC};
use persona_core::linalg::Matrix;
use persona_core::metrics::cluster_rows_tsv;
use persona_core::pipeline;
use persona_core::population::{read_assignments, write_assignments, Assignment};
use persona_core::synth::write_truth;
use persona_core::trainer::sample_dataset;
use persona_core::traces::{emit_traces, write_traces, BuyerPersona, Stage};
use persona_core::Error;

#[derive(Parser)]
#[command(name = "persona", version, about = "Buyer persona discovery from clickstreams")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Input files, in the order the subcommand expects.
    #[arg(long = "input", global = true, value_name = "PATH")]
    inputs: Vec<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    output: Option<PathBuf>,
    /// Worker threads for row-parallel steps.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic population. Output: a directory with events.ndjson, catalog.bin, truth.tsv.
    Gen,
    /// Inputs: events, catalog. Output: aggregates (JSON lines).
    Ingest,
    /// Inputs: aggregates [, model]. Output: feature matrix.
    Featurize,
    /// Inputs: aggregates. Output: model artifact, plus `<output>.log.jsonl` and `<output>.labels.tsv`.
    Train,
    /// Inputs: model, aggregates. Output: MiniBatch k-means assignments.
    Baseline,
    /// Inputs: model, features or aggregates. Output: assignments.
    Assign,
    /// Inputs: model, aggregates, assignments. Output: token profiles (JSON).
    Profiles,
    /// Inputs: model, aggregates, assignments. Output: distribution report (JSON).
    Distribution,
    /// Inputs: model, aggregates, assignments. Output: cluster report (JSON) and per-cluster TSV beside it.
    EvalClusters {
        /// Method label stored in the report.
        #[arg(long, default_value = "vqvae")]
        method: String,
    },
    /// Inputs: model, aggregates, assignments. Output: alignment report (JSON).
    EvalAlignment,
    /// Inputs: model, aggregates, assignments. Output: separation report (JSON).
    EvalSeparation,
    /// Inputs: events, aggregates, assignments, model. Output: trace records (JSON lines).
    Traces {
        /// 1 for intent-neutral goals, 2 for intent-explicit goals.
        #[arg(long, default_value_t = 2)]
        stage: u8,
    },
}

/// A failure that maps to a specific exit status.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return ("usage", 2);
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Format(_) => ("format", 3),
                Error::Shape(_) => ("shape", 3),
                Error::Schema(_) | Error::Ordering { .. } | Error::Json(_) => ("schema", 3),
                Error::Config(_) => ("config", 2),
                Error::Precondition(_) => ("precondition", 1),
                Error::State(_) => ("state", 1),
                Error::NonFinite(_) => ("non_finite", 1),
                Error::Undefined(_) => ("undefined", 1),
                Error::Io(_) => ("io", 1),
            };
        }
    }
    ("runtime", 1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.verbose { tracing::Level::DEBUG } else { tracing::Level::WARN };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            let report = serde_json::json!({ "error": kind, "exit": code, "message": format!("{e:#}") });
            eprintln!("{report}");
            ExitCode::from(code)
        }
    }
}

struct Ctx<'a> {
    cfg: Config,
    inputs: &'a [PathBuf],
    output: Option<&'a Path>,
}

impl Ctx<'_> {
    fn input(&self, i: usize, what: &str) -> anyhow::Result<&Path> {
        self.inputs
            .get(i)
            .map(PathBuf::as_path)
            .ok_or_else(|| usage(format!("missing --input #{} ({what})", i + 1)))
    }

    fn output(&self) -> anyhow::Result<&Path> {
        self.output.ok_or_else(|| usage("missing --output"))
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(p) => Config::from_toml(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => Config::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| anyhow!(e))?;
    }
    let ctx = Ctx {
        cfg,
        inputs: &c.inputs,
        output: c.output.as_deref(),
    };
    match &cli.command {
        Command::Gen => gen(&ctx),
        Command::Ingest => ingest_cmd(&ctx),
        Command::Featurize => featurize(&ctx),
        Command::Train => train(&ctx),
        Command::Baseline => baseline(&ctx),
        Command::Assign => assign(&ctx),
        Command::Profiles => with_population(&ctx, |art, rows, tokens, _| {
            write_json(ctx.output()?, &pipeline::profiles_for(art, rows, tokens)?)
        }),
        Command::Distribution => with_population(&ctx, |art, rows, tokens, _| {
            write_json(ctx.output()?, &pipeline::eval_distribution(art, rows, tokens)?)
        }),
        Command::EvalClusters { method } => with_population(&ctx, |art, rows, tokens, cfg| {
            let report = pipeline::eval_clusters(art, rows, tokens, method, cfg)?;
            let out = ctx.output()?;
            write_json(out, &report)?;
            write_text(&out.with_extension("tsv"), &cluster_rows_tsv(&report))
        }),
        Command::EvalAlignment => with_population(&ctx, |art, rows, tokens, cfg| {
            let profiles = pipeline::profiles_for(art, rows, tokens)?;
            write_json(ctx.output()?, &pipeline::eval_alignment(&profiles, rows, tokens, cfg)?)
        }),
        Command::EvalSeparation => with_population(&ctx, |art, rows, tokens, cfg| {
            let profiles = pipeline::profiles_for(art, rows, tokens)?;
            write_json(ctx.output()?, &pipeline::eval_separation(&profiles, rows, tokens, cfg)?)
        }),
        Command::Traces { stage } => traces(&ctx, *stage),
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_aggregates(path: &Path) -> anyhow::Result<Vec<BuyerShopAggregate>> {
    let mut text = String::new();
    open(path)?.read_to_string(&mut text)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| anyhow!(Error::Schema(format!("{}:{}: {e}", path.display(), i + 1))))
        })
        .collect()
}

fn write_aggregates(path: &Path, rows: &[BuyerShopAggregate]) -> anyhow::Result<()> {
    let mut w = create(path)?;
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_artifact(path: &Path) -> anyhow::Result<ModelArtifact> {
    ModelArtifact::read(open(path)?).with_context(|| format!("loading {}", path.display()))
}

fn gen(ctx: &Ctx) -> anyhow::Result<()> {
    let dir = ctx.output()?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let pop = pipeline::generate_population(&ctx.cfg)?;
    let mut w = create(&dir.join("events.ndjson"))?;
    write_events(&mut w, &pop.events)?;
    w.flush()?;
    let mut w = create(&dir.join("catalog.bin"))?;
    pop.catalog.write(&mut w)?;
    w.flush()?;
    let mut w = create(&dir.join("truth.tsv"))?;
    write_truth(&mut w, &pop.truth)?;
    w.flush()?;
    tracing::info!(events = pop.events.len(), buyers = pop.truth.len(), "population written");
    Ok(())
}

fn ingest_cmd(ctx: &Ctx) -> anyhow::Result<()> {
    let events = read_events(open(ctx.input(0, "events")?)?)?;
    let catalog = Catalog::read(open(ctx.input(1, "catalog")?)?)?;
    let rows = ingest(events, &catalog)?;
    write_aggregates(ctx.output()?, &rows)
}

fn featurize(ctx: &Ctx) -> anyhow::Result<()> {
    let rows = read_aggregates(ctx.input(0, "aggregates")?)?;
    let norm = match ctx.inputs.get(1) {
        Some(model) => read_artifact(model)?.normalizer,
        None => {
            let split = sample_dataset(&rows, &ctx.cfg.train, persona_core::rng::derive_seed(ctx.cfg.seed, "pipeline/sample"))?;
            let train: Vec<&BuyerShopAggregate> = split.train.iter().map(|&i| &rows[i]).collect();
            NormalizerState::fit(&train, &ctx.cfg.features)?
        }
    };
    let features = rows
        .par_iter()
        .map(|a| {
            Ok(FeatureRow {
                buyer_id: a.buyer_id.clone(),
                shop_id: a.shop_id.clone(),
                stratum: a.stratum,
                values: norm.assemble(a)?.values,
            })
        })
        .collect::<persona_core::Result<Vec<_>>>()?;
    let mut w = create(ctx.output()?)?;
    write_feature_matrix(&mut w, norm.layout().len(), &features)?;
    w.flush()?;
    Ok(())
}

fn train(ctx: &Ctx) -> anyhow::Result<()> {
    let rows = read_aggregates(ctx.input(0, "aggregates")?)?;
    let run = pipeline::train_model(&rows, &ctx.cfg)?;
    if let Some(msg) = &run.diverged {
        tracing::warn!(%msg, "training stopped early; the artifact holds the last finite state");
    }
    let out = ctx.output()?;
    let mut w = create(out)?;
    run.artifact.write(&mut w)?;
    w.flush()?;

    let mut log = create(&sibling(out, "log.jsonl"))?;
    for rec in &run.log {
        serde_json::to_writer(&mut log, rec)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;

    let mut tsv = String::from("buyer_id\tshop_id\tengagement\texploration\tpurchase\ts_pur\n");
    for a in run.train_rows(&rows) {
        let l = run.artifact.labels.labels(a);
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            a.buyer_id, a.shop_id, l.bins[0], l.bins[1], l.bins[2], l.s_pur
        ));
    }
    write_text(&sibling(out, "labels.tsv"), &tsv)
}

/// `<path>.<suffix>`, keeping the full original file name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn baseline(ctx: &Ctx) -> anyhow::Result<()> {
    let art = read_artifact(ctx.input(0, "model")?)?;
    let rows = read_aggregates(ctx.input(1, "aggregates")?)?;
    let refs = pipeline::modeled(&rows.iter().collect::<Vec<_>>());
    let tokens = pipeline::baseline_assign(&art, &refs, &ctx.cfg)?;
    write_assignment_file(ctx.output()?, &refs, &tokens)
}

fn write_assignment_file(path: &Path, rows: &[&BuyerShopAggregate], tokens: &[usize]) -> anyhow::Result<()> {
    let list: Vec<Assignment> = rows
        .iter()
        .zip(tokens)
        .map(|(a, &token)| Assignment {
            buyer_id: a.buyer_id.clone(),
            shop_id: a.shop_id.clone(),
            token,
        })
        .collect();
    let mut w = create(path)?;
    write_assignments(&mut w, &list)?;
    w.flush()?;
    Ok(())
}

fn is_feature_file(path: &Path) -> anyhow::Result<bool> {
    let mut head = [0u8; 7];
    let n = open(path)?.read(&mut head)?;
    Ok(n == 7 && &head == FEATURE_MAGIC)
}

fn assign(ctx: &Ctx) -> anyhow::Result<()> {
    let art = read_artifact(ctx.input(0, "model")?)?;
    let data = ctx.input(1, "features or aggregates")?;
    let (keys, x): (Vec<(String, String)>, Matrix) = if is_feature_file(data)? {
        let (width, rows) = read_feature_matrix(open(data)?)?;
        if width != art.model.input_dim() {
            return Err(anyhow!(Error::Shape(format!(
                "feature length {width} does not match the model input {}",
                art.model.input_dim()
            ))));
        }
        let keys = rows.iter().map(|r| (r.buyer_id.clone(), r.shop_id.clone())).collect();
        let values: Vec<f64> = rows.iter().flat_map(|r| r.values.iter().map(|v| f64::from(*v))).collect();
        (keys, Matrix::from_vec(rows.len(), width, values)?)
    } else {
        let rows = read_aggregates(data)?;
        let refs: Vec<&BuyerShopAggregate> = rows.iter().collect();
        let keys = rows.iter().map(|r| (r.buyer_id.clone(), r.shop_id.clone())).collect();
        (keys, pipeline::feature_matrix(&art.normalizer, &refs)?)
    };
    let chunks: Vec<usize> = (0..x.rows).step_by(4096).collect();
    let parts = chunks
        .par_iter()
        .map(|&start| {
            let idx: Vec<usize> = (start..(start + 4096).min(x.rows)).collect();
            pipeline::assign_features(&art, &x.select_rows(&idx))
        })
        .collect::<persona_core::Result<Vec<_>>>()?;
    let tokens: Vec<usize> = parts.into_iter().flatten().collect();
    let list: Vec<Assignment> = keys
        .into_iter()
        .zip(tokens)
        .map(|((buyer_id, shop_id), token)| Assignment { buyer_id, shop_id, token })
        .collect();
    let mut w = create(ctx.output()?)?;
    write_assignments(&mut w, &list)?;
    w.flush()?;
    Ok(())
}

/// Loads model, aggregates and assignments and joins rows to tokens.
fn with_population(
    ctx: &Ctx,
    f: impl FnOnce(&ModelArtifact, &[&BuyerShopAggregate], &[usize], &Config) -> anyhow::Result<()>,
) -> anyhow::Result<()> {
    let art = read_artifact(ctx.input(0, "model")?)?;
    let rows = read_aggregates(ctx.input(1, "aggregates")?)?;
    let assigned = read_assignments(open(ctx.input(2, "assignments")?)?)?;
    let index: BTreeMap<(&str, &str), &BuyerShopAggregate> =
        rows.iter().map(|a| ((a.buyer_id.as_str(), a.shop_id.as_str()), a)).collect();
    let mut joined = Vec::with_capacity(assigned.len());
    let mut tokens = Vec::with_capacity(assigned.len());
    for a in &assigned {
        let row = index
            .get(&(a.buyer_id.as_str(), a.shop_id.as_str()))
            .ok_or_else(|| anyhow!(Error::Precondition(format!("no aggregate for {} in {}", a.buyer_id, a.shop_id))))?;
        joined.push(*row);
        tokens.push(a.token);
    }
    f(&art, &joined, &tokens, &ctx.cfg)
}

fn traces(ctx: &Ctx, stage: u8) -> anyhow::Result<()> {
    let stage = Stage::parse(stage).map_err(|e| usage(e.to_string()))?;
    let events = read_events(open(ctx.input(0, "events")?)?)?;
    let rows = read_aggregates(ctx.input(1, "aggregates")?)?;
    let assigned = read_assignments(open(ctx.input(2, "assignments")?)?)?;
    let k = match ctx.inputs.get(3) {
        Some(p) => read_artifact(p)?.model.codebook.entries.rows,
        None => ctx.cfg.codebook.size,
    };
    let strata: BTreeMap<(String, String), _> =
        rows.iter().map(|a| ((a.buyer_id.clone(), a.shop_id.clone()), a.stratum)).collect();
    let mut personas = BTreeMap::new();
    for a in assigned {
        let key = (a.buyer_id, a.shop_id);
        let stratum = *strata
            .get(&key)
            .ok_or_else(|| anyhow!(Error::Precondition(format!("no aggregate for {} in {}", key.0, key.1))))?;
        personas.insert(key, BuyerPersona { token: a.token, stratum });
    }
    let groups: Vec<Vec<SessionLog>> = group_by_buyer_shop(events)
        .into_iter()
        .filter(|g| personas.contains_key(&(g[0].buyer_id.clone(), g[0].shop_id.clone())))
        .map(|g| split_sessions(&g))
        .collect::<persona_core::Result<_>>()?;
    let sessions: Vec<SessionLog> = groups.into_iter().flatten().collect();
    let records = emit_traces(&sessions, &personas, k, stage)?;
    if records.is_empty() {
        bail!("no trace records were produced");
    }
    let mut w = create(ctx.output()?)?;
    write_traces(&mut w, &records)?;
    w.flush()?;
    Ok(())
}
