use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use masstool::checkpoint::Checkpoint;
use masstool::data::{generate, tooldet_filter, SimilarityBand, SyntheticConfig};
use masstool::*;

#[derive(Parser)]
#[command(name = "masstool", version, about = "Dual-step tool retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus and its embeddings and write the train/test split.
    Prepare {
        #[arg(long)]
        config: PathBuf,
        /// Directory for train.ids and test.ids (default: next to the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a generated corpus, hash embeddings and a matching config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
    /// Train a model and write its checkpoint and per-epoch history.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Gate retrieval on the detection decision.
        #[arg(long)]
        gated: bool,
        /// JSON-lines report path (default: <checkpoint>.metrics.jsonl).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Detect and rank tools for every row of an embedding file.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query_embedding: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Decision threshold (default: the checkpoint's).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Keep candidates whose best reference cosine lies in the band.
    TooldetFilter {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        lower: f64,
        #[arg(long, default_value_t = 0.6)]
        upper: f64,
    },
    /// Finite-difference check of every learnable tensor, all variants.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn load_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    let need = |p: &Option<PathBuf>, key: &str| p.clone().with_context(|| format!("config does not set `{key}`"));
    let tools = need(&cfg.tools, "tools")?;
    let queries = need(&cfg.queries, "queries")?;
    let qe = need(&cfg.query_embeddings, "query_embeddings")?;
    let te = need(&cfg.tool_embeddings, "tool_embeddings")?;
    let corpus = Corpus::load(&tools, &queries).with_context(|| format!("reading corpus {}", tools.display()))?;
    let q_emb = EmbeddingMatrix::read(&qe).with_context(|| format!("reading {}", qe.display()))?;
    let t_emb = EmbeddingMatrix::read(&te).with_context(|| format!("reading {}", te.display()))?;
    Ok(Dataset::new(corpus, q_emb, t_emb)?)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_ids(path: &Path, ids: &[&QueryRecord]) -> Result<()> {
    let text: String = ids.iter().map(|q| format!("{}\n", q.query_id)).collect();
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn prepare(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = load_dataset(&cfg)?;
    let split = SplitQueries::new(&ds.corpus, cfg.seed)?;
    let out = out.unwrap_or_else(|| config.parent().map(Path::to_path_buf).unwrap_or_default());
    fs::create_dir_all(&out)?;
    write_ids(&out.join("train.ids"), &split.train)?;
    write_ids(&out.join("test.ids"), &split.test)?;
    println!(
        "{} tools, {} queries ({} retrieval), dim {}",
        ds.corpus.tools().len(),
        ds.corpus.queries().len(),
        ds.corpus.retrieval_queries().count(),
        ds.dim()
    );
    println!("train {} / test {} written to {}", split.train.len(), split.test.len(), out.display());
    Ok(())
}

fn synth(out: &Path, seed: u64) -> Result<()> {
    let ds = generate(&SyntheticConfig { seed, ..Default::default() })?;
    fs::create_dir_all(out)?;
    ds.corpus.write_jsonl(out.join("tools.jsonl"), out.join("queries.jsonl"))?;
    ds.query_emb.write(out.join("queries.emb"))?;
    ds.tool_emb.write(out.join("tools.emb"))?;
    let cfg = TrainConfig {
        tools: Some("tools.jsonl".into()),
        queries: Some("queries.jsonl".into()),
        query_embeddings: Some("queries.emb".into()),
        tool_embeddings: Some("tools.emb".into()),
        checkpoint: "masstool.ckpt".into(),
        epochs: 100,
        lr: 0.05,
        batch_size: 16,
        slate_size: 16,
        neighbors: 25,
        epsilon: 0.5,
        ..Default::default()
    };
    fs::write(out.join("masstool.conf"), cfg.to_text())?;
    println!("wrote {} tools and {} queries to {}", ds.corpus.tools().len(), ds.corpus.queries().len(), out.display());
    Ok(())
}

fn train_cmd(config: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = load_dataset(&cfg)?;
    let (model, history): (Model, _) = train(&ds, &cfg)?;
    save_checkpoint(&model, &cfg.checkpoint)?;
    let hist_path = sibling(&cfg.checkpoint, ".history.jsonl");
    fs::write(&hist_path, history.to_jsonl())?;
    if let Some(last) = history.epochs.last() {
        println!("epoch {} loss {:.6}", last.epoch, last.loss);
    }
    println!("{} steps; checkpoint {}", history.steps, cfg.checkpoint.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model, Dataset)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let ds = load_dataset(&ckpt.config)?;
    let model = ckpt.into_model(&ds, None)?;
    Ok((model, ds))
}

fn eval_cmd(checkpoint: &Path, gated: bool, report: Option<PathBuf>) -> Result<()> {
    let (model, ds) = load_model(checkpoint)?;
    let split = SplitQueries::new(&ds.corpus, model.config().seed)?;
    let opts = EvalOptions { gated, ..Default::default() };
    let metrics = evaluate(&model, &ds, &split.test_retrieval(), &split.test, &opts)?;
    let path = report.unwrap_or_else(|| sibling(checkpoint, ".metrics.jsonl"));
    fs::write(&path, metrics.to_jsonl())?;
    print!("{}", metrics.to_table());
    println!("report {}", path.display());
    Ok(())
}

fn retrieve_cmd(checkpoint: &Path, queries: &Path, k: usize, threshold: Option<f64>) -> Result<()> {
    let (model, _) = load_model(checkpoint)?;
    let threshold = threshold.unwrap_or(model.config().decision_threshold);
    if !(0.0..=1.0).contains(&threshold) {
        bail!("threshold must lie in [0, 1], got {threshold}");
    }
    let emb = EmbeddingMatrix::read(queries).with_context(|| format!("reading {}", queries.display()))?;
    for (i, id) in emb.ids().iter().enumerate() {
        let x: Vec<f64> = emb.row(i).iter().map(|&v| v as f64).collect();
        let res = model.retrieve(Some(id), &x, k, threshold)?;
        if res.invoked {
            let tools: Vec<String> = res.ranked.iter().map(|(t, s)| format!("{t}:{s:.4}")).collect();
            println!("{id}\tp={:.4}\t{}", res.detection_prob, tools.join(" "));
        } else {
            println!("{id}\tp={:.4}\tno tool invocation", res.detection_prob);
        }
    }
    Ok(())
}

fn tooldet_cmd(candidates: &Path, reference: &Path, lower: f64, upper: f64) -> Result<()> {
    if lower > upper {
        bail!("lower bound {lower} exceeds upper bound {upper}");
    }
    let c = EmbeddingMatrix::read(candidates).with_context(|| format!("reading {}", candidates.display()))?;
    let r = EmbeddingMatrix::read(reference).with_context(|| format!("reading {}", reference.display()))?;
    for id in tooldet_filter(&c, &r, SimilarityBand { lower, upper })? {
        println!("{id}");
    }
    Ok(())
}

fn gradcheck_cmd(tolerance: f64) -> Result<bool> {
    let mut ok = true;
    for kind in TransferKind::ALL {
        for trainable in [false, true] {
            let report = full_model_gradcheck(kind, trainable)?;
            let worst = report.max_error();
            let pass = worst <= tolerance;
            ok &= pass;
            println!(
                "{:<4} {kind:<13} trainable_embeddings={trainable:<5} tensors {:>2} max rel err {worst:.2e}",
                if pass { "ok" } else { "FAIL" },
                report.per_tensor.len()
            );
        }
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Prepare { config, out } => prepare(&config, out)?,
        Command::Synth { out, seed } => synth(&out, seed)?,
        Command::Train { config } => train_cmd(&config)?,
        Command::Eval { checkpoint, gated, report } => eval_cmd(&checkpoint, gated, report)?,
        Command::Retrieve { checkpoint, query_embedding, k, threshold } => {
            retrieve_cmd(&checkpoint, &query_embedding, k, threshold)?
        }
        Command::TooldetFilter { candidates, reference, lower, upper } => {
            tooldet_cmd(&candidates, &reference, lower, upper)?
        }
        Command::Gradcheck { tolerance } => return gradcheck_cmd(tolerance),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
