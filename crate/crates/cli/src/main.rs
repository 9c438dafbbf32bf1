use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use convsearch::client::{ClientConfig, JudgeTally, LlmClient, UreqTransport};
use convsearch::corpus::{load_corpus, save_corpus, Index, Retriever};
use convsearch::dialogue::{dataset_stats, generate_synthetic, save_dataset};
use convsearch::train::eval::{evaluate, EvalReport};
use convsearch::train::report::build_report;
use convsearch::train::{run_training, Checkpoint, RunConfig, Workspace};

#[derive(Parser)]
#[command(name = "convsearch", version, about = "Conversational search RL at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset, corpus and qrels.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the BM25 index over a corpus and print its statistics.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        /// Optional query to run against the index.
        #[arg(long)]
        query: Option<String>,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train with PPO; writes checkpoints and per-step diagnostics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Greedy evaluation of a checkpoint; writes an EvalReport.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        label: Option<String>,
        /// Recorded in the report for alpha-sweep tables.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Comparison tables over evaluation reports.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        text: Option<PathBuf>,
    },
    /// Ask an external model to judge predicted answers of an EvalReport.
    Judge {
        #[arg(long)]
        report: PathBuf,
        /// Run config naming the dataset the report was produced on.
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON client settings (endpoint, model, token_env, retries).
        #[arg(long)]
        client: Option<PathBuf>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.data.synthetic.seed = s;
    }
    let data = generate_synthetic(&cfg.data.synthetic)?;
    fs::create_dir_all(out)?;
    save_dataset(out.join("dataset.jsonl"), &data.conversations)?;
    save_corpus(out.join("corpus.jsonl"), &data.corpus)?;
    data.qrels.save(out.join("qrels.tsv"))?;
    let stats = dataset_stats(&data.conversations);
    write_json(&out.join("stats.json"), &stats)?;
    println!(
        "{} conversations, {} turns, {} passages -> {}",
        stats.conversations,
        stats.turns,
        data.corpus.len(),
        out.display()
    );
    Ok(())
}

fn index(corpus: &Path, query: Option<&str>, k: usize, out: Option<&Path>) -> Result<()> {
    let index = Index::build(load_corpus(corpus)?)?;
    let mut summary = serde_json::json!({
        "passages": index.doc_count(),
        "terms": index.term_count(),
        "avg_len": index.avg_len(),
        "k1": index.params().k1,
        "b": index.params().b,
    });
    if let Some(q) = query {
        summary["query"] = serde_json::to_value(index.search(q, k))?;
    }
    match out {
        Some(p) => write_json(p, &summary)?,
        None => println!("{summary:#}"),
    }
    Ok(())
}

fn train(
    config: Option<&Path>,
    out: Option<PathBuf>,
    alpha: Option<f64>,
    steps: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(a) = alpha {
        cfg.reward.alpha = a;
    }
    if let Some(s) = steps {
        cfg.train.total_steps = s;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if out.is_some() {
        cfg.train.output_dir = out;
    }
    let Some(dir) = cfg.train.output_dir.clone() else {
        bail!("train needs an output directory (--out or train.output_dir)");
    };
    cfg.validate()?;
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let ws = Workspace::load(&cfg.data)?;
    let outcome = run_training(&cfg, &ws)?;
    let last = outcome.diagnostics.last();
    println!(
        "trained {} steps; final mean reward {:.4}; selected checkpoint step {}{}",
        cfg.train.total_steps,
        last.map_or(0.0, |d| d.mean_total_reward),
        outcome.selected.step,
        if outcome.collapsed { " (reward collapse)" } else { "" }
    );
    Ok(())
}

fn eval(config: Option<&Path>, checkpoint: &Path, out: &Path, label: Option<String>, alpha: Option<f64>) -> Result<()> {
    if !checkpoint.exists() {
        bail!("checkpoint {} does not exist", checkpoint.display());
    }
    let cfg = load_config(config)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let ws = Workspace::load(&cfg.data)?;
    let mut report = evaluate(&ckpt, &ws, &ws.conversations, &cfg.env)?;
    if let Some(l) = label {
        report.label = l;
    }
    report.alpha = alpha;
    write_json(out, &report)?;
    let a = &report.aggregates;
    println!(
        "{} turns: answer F1 {:.4}, intent F1 {:.4}, mean searches {:.2}",
        a.turns, a.mean_answer_f1, a.mean_intent_f1, a.mean_searches
    );
    Ok(())
}

fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn report(paths: &[PathBuf], json: Option<&Path>, text: Option<&Path>) -> Result<()> {
    let reports = paths.iter().map(|p| read_report(p)).collect::<Result<Vec<_>>>()?;
    let rep = build_report(&reports);
    if let Some(p) = json {
        write_json(p, &rep)?;
    }
    let table = rep.to_text();
    match text {
        Some(p) => fs::write(p, &table)?,
        None => print!("{table}"),
    }
    Ok(())
}

fn judge(
    report_path: &Path,
    config: Option<&Path>,
    client_config: Option<&Path>,
    endpoint: Option<String>,
    model: Option<String>,
    out: &Path,
    limit: Option<usize>,
) -> Result<()> {
    let mut cfg = match client_config {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str::<ClientConfig>(&text).with_context(|| format!("client config {}", p.display()))?
        }
        None => ClientConfig::default(),
    };
    if let Some(e) = endpoint {
        cfg.endpoint = e;
    }
    if let Some(m) = model {
        cfg.model = m;
    }
    let report = read_report(report_path)?;
    let ws = Workspace::load(&load_config(config)?.data)?;
    let mut client = LlmClient::new(UreqTransport, cfg);
    let mut tally = JudgeTally::default();
    fs::create_dir_all(out)?;
    let mut verdicts = fs::File::create(out.join("verdicts.jsonl"))?;
    for rec in report.per_turn.iter().take(limit.unwrap_or(usize::MAX)) {
        let Some(conv) = ws.conversations.iter().find(|c| c.id == rec.conversation_id) else {
            log::warn!("conversation {} not in dataset; skipped", rec.conversation_id);
            continue;
        };
        let turn = &conv.turns[rec.turn_index];
        let predicted = rec.predicted_answer.as_deref().unwrap_or("");
        let v = client.judge(&turn.question, &turn.answer, predicted)?;
        tally.add(v);
        let line = serde_json::json!({
            "conversation_id": rec.conversation_id,
            "turn_index": rec.turn_index,
            "verdict": v,
        });
        writeln!(verdicts, "{line}")?;
    }
    let mut audit = fs::File::create(out.join("audit.jsonl"))?;
    for entry in client.audit() {
        writeln!(audit, "{}", serde_json::to_string(entry)?)?;
    }
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "tally": tally,
            "accuracy": tally.accuracy(),
        }),
    )?;
    println!(
        "judged {} turns; accuracy {} ({} invalid verdicts excluded)",
        tally.correct + tally.incorrect + tally.invalid,
        tally.accuracy().map_or_else(|| "n/a".into(), |a| format!("{a:.4}")),
        tally.invalid
    );
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out, seed } => gen_data(config.as_deref(), &out, seed),
        Command::Index { corpus, query, k, out } => index(&corpus, query.as_deref(), k, out.as_deref()),
        Command::Train {
            config,
            out,
            alpha,
            steps,
            seed,
        } => train(config.as_deref(), out, alpha, steps, seed),
        Command::Eval {
            config,
            checkpoint,
            out,
            label,
            alpha,
        } => eval(config.as_deref(), &checkpoint, &out, label, alpha),
        Command::Report { reports, json, text } => report(&reports, json.as_deref(), text.as_deref()),
        Command::Judge {
            report: r,
            config,
            client,
            endpoint,
            model,
            out,
            limit,
        } => judge(&r, config.as_deref(), client.as_deref(), endpoint, model, &out, limit),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
