//! `clinembed` — one static binary driving the whole pipeline: synthetic
//! data generation, self-supervised pretraining (CBOW / MLM), downstream
//! fine-tuning, embedding probes, and multi-run replication suites.
//!
//! Every command that takes `--seed` is end-to-end reproducible: rerunning
//! with the same inputs rewrites byte-identical output files. Exit codes:
//! 0 success, 1 runtime or numeric failure, 2 usage or config error.

mod config;
mod replicate;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use clinembed::checkpoint::Checkpoint;
use clinembed::data::{self, Dataset, GeneratorSpec, Manifest};
use clinembed::downstream::{self, Task, Variant};
use clinembed::metrics::{aggregate_runs, format_percent};
use clinembed::pretrain::{self, Objective};
use clinembed::probe;
use clinembed::tokenizer::{FeatureSchema, Tokenizer};
use clinembed::tsne;
use clinembed::{Error, Result};

use config::{DownstreamOverrides, PretrainOverrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "clinembed",
    version,
    about = "Self-supervised clinical feature embeddings: generate data, pretrain, fine-tune, probe, replicate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clinical dataset (CSV + manifest).
    GenData(GenDataArgs),
    /// Pretrain a feature tokenizer with the CBOW or MLM objective.
    Pretrain(PretrainArgs),
    /// Fine-tune a downstream model, optionally from a pretrained checkpoint.
    Finetune(FinetuneArgs),
    /// Probe a trained tokenizer: embedding scatter map + correlation report.
    Probe(ProbeArgs),
    /// Run a full experiment matrix (core / labels / ablation suite).
    Replicate(replicate::ReplicateArgs),
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Replicate(args) => replicate::cmd_replicate(args),
    }
}

// ── Shared plumbing ────────────────────────────────────────────────────

/// Flag-supplied paths must exist before any work starts; a wrong path is
/// a usage error (exit 2), not a runtime failure.
fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

/// Load a dataset CSV against the clinical schema and run the standard
/// preprocessing: fit stats on train, impute, normalize.
fn load_preprocessed(path: &Path) -> Result<Dataset> {
    require_file(path, "data file")?;
    let mut dataset = data::load_csv(path, &FeatureSchema::default_clinical())?;
    dataset.fit_stats()?;
    dataset.impute()?;
    dataset.normalize()?;
    Ok(dataset)
}

fn parse_objective(s: &str) -> Result<Objective> {
    match s {
        "cbow" => Ok(Objective::Cbow),
        "mlm" => Ok(Objective::Mlm),
        _ => Err(Error::Config(format!(
            "unknown objective '{s}' (expected cbow|mlm)"
        ))),
    }
}

fn parse_variant(s: &str) -> Result<Variant> {
    match s {
        "transformer" => Ok(Variant::Transformer),
        "ftt" => Ok(Variant::Ftt),
        "cbow" => Ok(Variant::Cbow),
        "mlm" => Ok(Variant::Mlm),
        _ => Err(Error::Config(format!(
            "unknown model '{s}' (expected transformer|ftt|cbow|mlm)"
        ))),
    }
}

fn parse_task(s: &str) -> Result<Task> {
    match s {
        "per_step" | "per-step" => Ok(Task::PerStep),
        "stay_level" | "stay-level" => Ok(Task::StayLevel),
        _ => Err(Error::Config(format!(
            "unknown task '{s}' (expected per_step|stay_level)"
        ))),
    }
}

fn variant_label(v: Variant) -> &'static str {
    match v {
        Variant::Transformer => "transformer",
        Variant::Ftt => "ftt",
        Variant::Cbow => "cbow",
        Variant::Mlm => "mlm",
    }
}

fn task_label(t: Task) -> &'static str {
    match t {
        Task::PerStep => "per_step",
        Task::StayLevel => "stay_level",
    }
}

fn write_pretty_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

// ── gen-data ───────────────────────────────────────────────────────────

#[derive(clap::Args)]
struct GenDataArgs {
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
    /// Generator spec JSON; defaults to the built-in clinical spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Override the spec's number of stays.
    #[arg(long)]
    stays: Option<usize>,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => {
            require_file(path, "generator spec")?;
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<GeneratorSpec>(&text)
                .map_err(|e| Error::Config(format!("generator spec {}: {e}", path.display())))?
        }
        None => GeneratorSpec::default_with(2000, 0),
    };
    if let Some(n) = args.stays {
        spec.n_stays = n;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }

    let dataset = data::generate_synthetic(&spec)?;
    let manifest = Manifest::describe(&dataset);
    ensure_dir(&args.out)?;
    data::write_csv(&dataset, &args.out.join("data.csv"))?;
    write_pretty_json(&args.out.join("manifest.json"), &manifest)?;
    write_pretty_json(&args.out.join("spec.json"), &spec)?;

    println!(
        "wrote {} stays / {} steps to {} (step prevalence {:.4}, stay prevalence {:.4})",
        manifest.n_stays,
        manifest.n_steps,
        args.out.join("data.csv").display(),
        manifest.step_prevalence,
        manifest.stay_prevalence,
    );
    Ok(())
}

// ── pretrain ───────────────────────────────────────────────────────────

#[derive(clap::Args)]
struct PretrainArgs {
    /// Dataset CSV (as written by gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Pretraining objective: cbow or mlm.
    #[arg(long)]
    objective: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for checkpoint.json and loss.csv.
    #[arg(long)]
    out: PathBuf,
    /// Run config JSON; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// CBOW only: include the previous step's context in each sum.
    #[arg(long)]
    use_previous: bool,
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let objective = parse_objective(&args.objective)?;
    let run_config = RunConfig::load_optional(args.config.as_deref())?;
    let flags = PretrainOverrides {
        batch_size: args.batch_size,
        lr: args.lr,
        dim: args.dim,
        depth: args.depth,
        heads: args.heads,
        max_epochs: args.max_epochs,
        patience: args.patience,
        use_previous: args.use_previous.then_some(true),
    };
    let mut section = match objective {
        Objective::Cbow => run_config.pretrain_cbow,
        Objective::Mlm => run_config.pretrain_mlm,
    };
    section.merge(&flags);
    let mut config = run_config.pretrain_config(objective);
    section.apply(&mut config);

    let dataset = load_preprocessed(&args.data)?;
    let (checkpoint, history) = pretrain::pretrain(&dataset, &config, args.seed)?;
    ensure_dir(&args.out)?;
    checkpoint.save(&args.out.join("checkpoint.json"))?;
    history.write_csv(&args.out.join("loss.csv"))?;

    println!(
        "pretrained {} for {} epochs (seed {}); best val loss {:.6}",
        args.objective, checkpoint.epochs_run, args.seed, checkpoint.best_val_loss,
    );
    Ok(())
}

// ── finetune ───────────────────────────────────────────────────────────

#[derive(clap::Args)]
struct FinetuneArgs {
    /// Dataset CSV (as written by gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Downstream model: transformer, ftt, cbow, or mlm.
    #[arg(long)]
    model: String,
    /// Prediction task: per_step or stay_level.
    #[arg(long)]
    task: String,
    /// Fraction of training labels kept (0, 1].
    #[arg(long)]
    label_fraction: Option<f64>,
    /// Pretrained checkpoint; required for cbow and mlm models.
    #[arg(long)]
    from: Option<PathBuf>,
    /// May repeat; more than one seed adds a mean±std aggregate row.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output directory for per-seed checkpoints and metrics.csv.
    #[arg(long)]
    out: PathBuf,
    /// Run config JSON; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Keep imported tokenizer weights fixed during fine-tuning.
    #[arg(long)]
    freeze_tokenizer: bool,
}

/// One metrics row; `seed` is text so the aggregate row fits the column.
struct MetricsRow {
    model: String,
    task: String,
    label_fraction: f64,
    seed: String,
    auprc: String,
    auroc: String,
}

fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("model,task,label_fraction,seed,auprc,auroc\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.model, r.task, r.label_fraction, r.seed, r.auprc, r.auroc
        );
    }
    out
}

/// Append the mean±std row over the per-seed values of one cell.
fn push_aggregate(rows: &mut Vec<MetricsRow>, auprcs: &[f64], aurocs: &[f64]) -> Result<()> {
    let (pm, ps) = aggregate_runs(auprcs)?;
    let (rm, rs) = aggregate_runs(aurocs)?;
    let template = rows.last().expect("aggregate follows per-seed rows");
    let agg = MetricsRow {
        model: template.model.clone(),
        task: template.task.clone(),
        label_fraction: template.label_fraction,
        seed: "mean±std".into(),
        auprc: format_percent(pm, ps),
        auroc: format_percent(rm, rs),
    };
    rows.push(agg);
    Ok(())
}

fn cmd_finetune(args: FinetuneArgs) -> Result<()> {
    let model = parse_variant(&args.model)?;
    let task = parse_task(&args.task)?;
    let run_config = RunConfig::load_optional(args.config.as_deref())?;
    let flags = DownstreamOverrides {
        batch_size: args.batch_size,
        lr: args.lr,
        dim: args.dim,
        depth: args.depth,
        heads: args.heads,
        label_fraction: args.label_fraction,
        freeze_tokenizer: args.freeze_tokenizer.then_some(true),
        max_epochs: args.max_epochs,
        patience: args.patience,
    };
    let mut section = run_config.downstream;
    section.merge(&flags);
    let mut config = downstream::DownstreamConfig::default_for(model, task);
    section.apply(&mut config);

    let pretrained = match &args.from {
        Some(path) => {
            require_file(path, "pretrained checkpoint")?;
            Some(Checkpoint::load(path)?)
        }
        None => None,
    };
    let dataset = load_preprocessed(&args.data)?;
    let seeds = if args.seeds.is_empty() { vec![0] } else { args.seeds.clone() };

    ensure_dir(&args.out)?;
    let mut rows = Vec::new();
    let mut auprcs = Vec::new();
    let mut aurocs = Vec::new();
    for &seed in &seeds {
        let (checkpoint, report) =
            downstream::finetune(&dataset, &config, pretrained.as_ref(), seed)?;
        checkpoint.save(&args.out.join(format!("checkpoint_seed{seed}.json")))?;
        println!(
            "{} {} seed {}: test AUPRC {:.4}, AUROC {:.4} (best epoch {})",
            args.model, task_label(task), seed, report.test_auprc, report.test_auroc,
            report.best_epoch,
        );
        rows.push(MetricsRow {
            model: variant_label(model).into(),
            task: task_label(task).into(),
            label_fraction: config.label_fraction,
            seed: seed.to_string(),
            auprc: report.test_auprc.to_string(),
            auroc: report.test_auroc.to_string(),
        });
        auprcs.push(report.test_auprc);
        aurocs.push(report.test_auroc);
    }
    if seeds.len() > 1 {
        push_aggregate(&mut rows, &auprcs, &aurocs)?;
    }
    std::fs::write(args.out.join("metrics.csv"), metrics_csv(&rows))?;
    Ok(())
}

// ── probe ──────────────────────────────────────────────────────────────

#[derive(clap::Args)]
struct ProbeArgs {
    /// Checkpoint whose feature tokenizer to probe (any kind that carries one).
    #[arg(long)]
    from: PathBuf,
    /// Output directory for probe.csv, probe.svg, and report.txt.
    #[arg(long)]
    out: PathBuf,
    /// JSON list of planted feature-name pairs, e.g. [["Temp","RR"]].
    #[arg(long)]
    planted: Option<PathBuf>,
    /// Seed for the t-SNE layout.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run config JSON (t-SNE section applies here).
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Pairs the default generator correlates through shared latent factors.
fn default_planted() -> Vec<(String, String)> {
    [
        ("Temp", "RR"),
        ("RR", "HR"),
        ("Temp", "HR"),
        ("SBP", "DBP"),
        ("SBP", "MBP"),
        ("DBP", "MBP"),
    ]
    .into_iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect()
}

fn cmd_probe(args: ProbeArgs) -> Result<()> {
    require_file(&args.from, "checkpoint")?;
    let checkpoint = Checkpoint::load(&args.from)?;
    checkpoint.validate()?;
    let store = checkpoint.to_store()?;
    let schema = checkpoint.schema.clone();
    if !store.contains(Tokenizer::mask_name()) {
        return Err(Error::Config(
            "checkpoint carries no feature tokenizer to probe".into(),
        ));
    }

    let planted = match &args.planted {
        Some(path) => {
            require_file(path, "planted pairs file")?;
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<Vec<(String, String)>>(&text)
                .map_err(|e| Error::Config(format!("planted pairs {}: {e}", path.display())))?
        }
        None => default_planted(),
    };

    let run_config = RunConfig::load_optional(args.config.as_deref())?;
    let points = probe::probe_all(&store, &schema)?;
    let report = probe::correlation_report(&store, &schema, &planted)?;
    let vectors: Vec<Vec<f64>> = points.iter().map(|p| p.vector.clone()).collect();
    let map = tsne::tsne(&vectors, &run_config.tsne_config(args.seed))?;

    ensure_dir(&args.out)?;
    probe::emit_scatter(
        &points,
        &map.coords,
        &args.out.join("probe.csv"),
        &args.out.join("probe.svg"),
    )?;
    let mut text = report.to_text();
    let _ = writeln!(
        text,
        "t-SNE final KL {:.6} over {} iterations{}",
        map.kl_history.last().expect("history never empty"),
        map.kl_history.len() - 1,
        if map.jittered { " (duplicates jittered)" } else { "" },
    );
    std::fs::write(args.out.join("report.txt"), text)?;

    println!(
        "wrote probe.csv, probe.svg, report.txt to {} ({} embedding points)",
        args.out.display(),
        points.len(),
    );
    Ok(())
}
