//! Experiment matrix runner behind `clinembed replicate`.
//!
//! Three suites: `core` fine-tunes every model on both tasks, `labels`
//! sweeps the labeled fraction on the per-step task, `ablation` compares
//! CBOW pretraining with and without the previous-step context. Each cell
//! is seed-isolated, so cells run on a small worker pool; the pool size is
//! capped by the `CLINEMBED_THREADS` env var. Results land in `runs.csv`
//! plus a fixed-width summary table, and reruns are byte-identical.

use std::collections::{HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::Mutex;

use clinembed::checkpoint::Checkpoint;
use clinembed::data::Dataset;
use clinembed::downstream::{self, Task, Variant};
use clinembed::metrics::{aggregate_runs, format_percent};
use clinembed::pretrain::{self, Objective, PretrainConfig};
use clinembed::{Error, Result};

use crate::config::RunConfig;
use crate::{ensure_dir, load_preprocessed, metrics_csv, task_label, variant_label, MetricsRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Suite {
    Core,
    Labels,
    Ablation,
}

fn parse_suite(s: &str) -> Result<Suite> {
    match s {
        "core" => Ok(Suite::Core),
        "labels" => Ok(Suite::Labels),
        "ablation" => Ok(Suite::Ablation),
        _ => Err(Error::Config(format!(
            "unknown suite '{s}' (expected core|labels|ablation)"
        ))),
    }
}

#[derive(clap::Args)]
pub struct ReplicateArgs {
    /// Which matrix to run: core, labels, or ablation.
    #[arg(long)]
    suite: String,
    /// Dataset CSV (as written by gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for runs.csv, the summary table, and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Run config JSON applied to every cell.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of seeds; cells use seeds 0..n.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
}

// ── Worker pool ────────────────────────────────────────────────────────

/// Worker count: CLINEMBED_THREADS if set (must be ≥ 1), else the
/// machine's parallelism, never more than there are jobs.
fn thread_cap(jobs: usize) -> Result<usize> {
    let hardware = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cap = match std::env::var("CLINEMBED_THREADS") {
        Ok(raw) => raw.parse::<usize>().ok().filter(|n| *n >= 1).ok_or_else(|| {
            Error::Config(format!(
                "CLINEMBED_THREADS must be a positive integer, got '{raw}'"
            ))
        })?,
        Err(_) => hardware,
    };
    Ok(cap.min(jobs.max(1)))
}

/// Run independent jobs on `workers` threads, returning results in job
/// order so downstream output never depends on scheduling.
fn run_parallel<J, R, F>(jobs: &[J], workers: usize, run: F) -> Result<Vec<R>>
where
    J: Sync,
    R: Send,
    F: Fn(&J) -> Result<R> + Sync,
{
    if workers <= 1 {
        return jobs.iter().map(&run).collect();
    }
    let queue: Mutex<VecDeque<(usize, &J)>> = Mutex::new(jobs.iter().enumerate().collect());
    let done: Mutex<Vec<(usize, Result<R>)>> = Mutex::new(Vec::with_capacity(jobs.len()));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let next = queue.lock().expect("job queue").pop_front();
                let Some((index, job)) = next else { break };
                let result = run(job);
                done.lock().expect("result sink").push((index, result));
            });
        }
    });
    let mut results = done.into_inner().expect("no holders left");
    results.sort_by_key(|(index, _)| *index);
    results.into_iter().map(|(_, r)| r).collect()
}

// ── Job descriptions ───────────────────────────────────────────────────

/// One pretraining run; `key` names the checkpoint family ("cbow", "mlm",
/// "cbow_prev") that fine-tune cells reference.
struct PretrainJob {
    key: &'static str,
    config: PretrainConfig,
    seed: u64,
}

/// One fine-tuning cell of the suite matrix.
struct FinetuneCell {
    model: Variant,
    /// Row label in tables; differs from the variant name only in the
    /// ablation suite ("cbow" vs "cbow_prev").
    model_label: &'static str,
    task: Task,
    fraction: f64,
    seed: u64,
    /// Checkpoint family this cell fine-tunes from, if any.
    from: Option<&'static str>,
}

fn pretrain_jobs(suite: Suite, run_config: &RunConfig, seeds: u64) -> Vec<PretrainJob> {
    let mut jobs = Vec::new();
    match suite {
        Suite::Core | Suite::Labels => {
            for (key, objective) in [("cbow", Objective::Cbow), ("mlm", Objective::Mlm)] {
                for seed in 0..seeds {
                    jobs.push(PretrainJob {
                        key,
                        config: run_config.pretrain_config(objective),
                        seed,
                    });
                }
            }
        }
        Suite::Ablation => {
            let base = run_config.pretrain_config(Objective::Cbow);
            for (key, use_previous) in [("cbow", false), ("cbow_prev", true)] {
                for seed in 0..seeds {
                    let mut config = base.clone();
                    config.use_previous = use_previous;
                    jobs.push(PretrainJob { key, config, seed });
                }
            }
        }
    }
    jobs
}

const CORE_MODELS: [Variant; 4] = [Variant::Transformer, Variant::Ftt, Variant::Cbow, Variant::Mlm];
const LABEL_FRACTIONS: [f64; 4] = [1.0, 0.5, 0.1, 0.01];

fn checkpoint_key(model: Variant) -> Option<&'static str> {
    match model {
        Variant::Cbow => Some("cbow"),
        Variant::Mlm => Some("mlm"),
        Variant::Transformer | Variant::Ftt => None,
    }
}

/// Cells in table order: rows major, then columns, seeds innermost, so
/// results chunk into seed groups for aggregation.
fn finetune_cells(suite: Suite, seeds: u64) -> Vec<FinetuneCell> {
    let mut cells = Vec::new();
    match suite {
        Suite::Core => {
            for model in CORE_MODELS {
                for task in [Task::PerStep, Task::StayLevel] {
                    for seed in 0..seeds {
                        cells.push(FinetuneCell {
                            model,
                            model_label: variant_label(model),
                            task,
                            fraction: 1.0,
                            seed,
                            from: checkpoint_key(model),
                        });
                    }
                }
            }
        }
        Suite::Labels => {
            for model in CORE_MODELS {
                for fraction in LABEL_FRACTIONS {
                    for seed in 0..seeds {
                        cells.push(FinetuneCell {
                            model,
                            model_label: variant_label(model),
                            task: Task::PerStep,
                            fraction,
                            seed,
                            from: checkpoint_key(model),
                        });
                    }
                }
            }
        }
        Suite::Ablation => {
            for (model_label, from) in [("cbow", "cbow"), ("cbow_prev", "cbow_prev")] {
                for task in [Task::PerStep, Task::StayLevel] {
                    for seed in 0..seeds {
                        cells.push(FinetuneCell {
                            model: Variant::Cbow,
                            model_label,
                            task,
                            fraction: 1.0,
                            seed,
                            from: Some(from),
                        });
                    }
                }
            }
        }
    }
    cells
}

// ── Table rendering ────────────────────────────────────────────────────

/// Left-aligned fixed-width text table; widths count chars so `±` cells
/// line up.
fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let columns = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let mut out = String::new();
    for (line_no, row) in std::iter::once(header).chain(rows.iter().map(|r| &r[..])).enumerate() {
        for (i, cell) in row.iter().enumerate() {
            out.push_str(cell);
            if i + 1 < columns {
                let pad = widths[i] - cell.chars().count() + 2;
                out.extend(std::iter::repeat(' ').take(pad));
            }
        }
        out.push('\n');
        if line_no == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (columns - 1);
            out.extend(std::iter::repeat('-').take(total));
            out.push('\n');
        }
    }
    out
}

/// Aggregate cells keyed by (model label, task label, fraction mills).
type AggKey = (&'static str, &'static str, u64);

fn agg_key(cell: &FinetuneCell) -> AggKey {
    (
        cell.model_label,
        task_label(cell.task),
        (cell.fraction * 1000.0).round() as u64,
    )
}

fn suite_table(suite: Suite, aggregates: &HashMap<AggKey, (String, String)>) -> String {
    let cell = |key: &AggKey| -> String {
        aggregates.get(key).map(|(p, _)| p.clone()).unwrap_or_default()
    };
    match suite {
        Suite::Core => {
            let header: Vec<String> = [
                "model",
                "per_step AUPRC",
                "per_step AUROC",
                "stay_level AUPRC",
                "stay_level AUROC",
            ]
            .map(String::from)
            .to_vec();
            let rows: Vec<Vec<String>> = CORE_MODELS
                .iter()
                .map(|m| {
                    let label = variant_label(*m);
                    let ps = &aggregates[&(label, "per_step", 1000)];
                    let st = &aggregates[&(label, "stay_level", 1000)];
                    vec![label.into(), ps.0.clone(), ps.1.clone(), st.0.clone(), st.1.clone()]
                })
                .collect();
            render_table(&header, &rows)
        }
        Suite::Labels => {
            let mut header = vec!["model".to_string()];
            header.extend(LABEL_FRACTIONS.iter().map(|f| format!("{}%", f * 100.0)));
            let rows: Vec<Vec<String>> = CORE_MODELS
                .iter()
                .map(|m| {
                    let label = variant_label(*m);
                    let mut row = vec![label.to_string()];
                    for f in LABEL_FRACTIONS {
                        row.push(cell(&(label, "per_step", (f * 1000.0).round() as u64)));
                    }
                    row
                })
                .collect();
            render_table(&header, &rows)
        }
        Suite::Ablation => {
            let header: Vec<String> = ["use_previous", "per_step AUPRC", "stay_level AUPRC"]
                .map(String::from)
                .to_vec();
            let rows: Vec<Vec<String>> = [("cbow", "false"), ("cbow_prev", "true")]
                .iter()
                .map(|(label, shown)| {
                    vec![
                        shown.to_string(),
                        cell(&(label, "per_step", 1000)),
                        cell(&(label, "stay_level", 1000)),
                    ]
                })
                .collect();
            render_table(&header, &rows)
        }
    }
}

// ── Suite driver ───────────────────────────────────────────────────────

pub fn cmd_replicate(args: ReplicateArgs) -> Result<()> {
    let suite = parse_suite(&args.suite)?;
    if args.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let run_config = RunConfig::load_optional(args.config.as_deref())?;
    let dataset = load_preprocessed(&args.data)?;
    ensure_dir(&args.out)?;

    // Phase 1: pretraining checkpoints shared by the fine-tune cells.
    let jobs = pretrain_jobs(suite, &run_config, args.seeds);
    let workers = thread_cap(jobs.len())?;
    println!("pretraining {} checkpoints on {} workers", jobs.len(), workers);
    let trained = run_parallel(&jobs, workers, |job| {
        pretrain::pretrain(&dataset, &job.config, job.seed)
    })?;
    let mut checkpoints: HashMap<(&'static str, u64), Checkpoint> = HashMap::new();
    for (job, (checkpoint, history)) in jobs.iter().zip(trained) {
        let dir = args.out.join(format!("pretrain_{}_seed{}", job.key, job.seed));
        ensure_dir(&dir)?;
        checkpoint.save(&dir.join("checkpoint.json"))?;
        history.write_csv(&dir.join("loss.csv"))?;
        println!(
            "  {} seed {}: {} epochs, best val loss {:.6}",
            job.key, job.seed, checkpoint.epochs_run, checkpoint.best_val_loss,
        );
        checkpoints.insert((job.key, job.seed), checkpoint);
    }

    // Phase 2: the fine-tune matrix.
    let cells = finetune_cells(suite, args.seeds);
    let workers = thread_cap(cells.len())?;
    println!("fine-tuning {} cells on {} workers", cells.len(), workers);
    let reports = run_parallel(&cells, workers, |cell| {
        let mut config = run_config.downstream_config(cell.model, cell.task);
        config.label_fraction = cell.fraction;
        let from = cell.from.map(|key| &checkpoints[&(key, cell.seed)]);
        let (_, report) = downstream::finetune(&dataset, &config, from, cell.seed)?;
        Ok((report.test_auprc, report.test_auroc))
    })?;

    // Per-seed rows plus one aggregate row per seed group.
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut aggregates: HashMap<AggKey, (String, String)> = HashMap::new();
    let group = args.seeds as usize;
    for (cells, scores) in cells.chunks(group).zip(reports.chunks(group)) {
        for (cell, (auprc, auroc)) in cells.iter().zip(scores) {
            rows.push(MetricsRow {
                model: cell.model_label.into(),
                task: task_label(cell.task).into(),
                label_fraction: cell.fraction,
                seed: cell.seed.to_string(),
                auprc: auprc.to_string(),
                auroc: auroc.to_string(),
            });
        }
        let (pm, ps) = aggregate_runs(&scores.iter().map(|s| s.0).collect::<Vec<_>>())?;
        let (rm, rs) = aggregate_runs(&scores.iter().map(|s| s.1).collect::<Vec<_>>())?;
        let cell = &cells[0];
        rows.push(MetricsRow {
            model: cell.model_label.into(),
            task: task_label(cell.task).into(),
            label_fraction: cell.fraction,
            seed: "mean±std".into(),
            auprc: format_percent(pm, ps),
            auroc: format_percent(rm, rs),
        });
        aggregates.insert(agg_key(cell), (format_percent(pm, ps), format_percent(rm, rs)));
    }

    std::fs::write(args.out.join("runs.csv"), metrics_csv(&rows))?;
    let table = suite_table(suite, &aggregates);
    std::fs::write(args.out.join(format!("table_{}.txt", args.suite)), &table)?;
    println!("\n{table}");
    Ok(())
}

// Dataset is moved into worker closures by reference only; assert the
// send/sync bounds the pool relies on.
const _: fn() = || {
    fn assert_sync<T: Sync>() {}
    assert_sync::<Dataset>();
    assert_sync::<Checkpoint>();
};
