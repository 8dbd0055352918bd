//! Release acceptance gates: ten numbered criteria covering gradients,
//! corruption statistics, metric oracles, pretraining efficacy, downstream
//! direction, probe recovery, clustering, t-SNE correctness, CLI
//! determinism, and the label-fraction harness.
//!
//! One test per criterion; each prints `criterion N (<name>): PASS` on
//! success (run with `--nocapture` to see the lines; cargo's own per-test
//! output mirrors pass/fail either way). Training fixtures are shared
//! across criteria through `OnceLock` so each model is trained once.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clinembed::checkpoint::Checkpoint;
use clinembed::checks;
use clinembed::data::{self, Dataset, GeneratorSpec};
use clinembed::downstream::{self, DownstreamConfig, DownstreamModel, Task, Variant};
use clinembed::metrics::{self, oracle, ScoredLabels};
use clinembed::params::{Binding, ParamStore};
use clinembed::pretrain::{
    self, CbowModel, CbowSample, CorruptKind, MlmModel, MlmSample, PretrainConfig, TargetPick,
};
use clinembed::probe;
use clinembed::tensor::{NodeId, Tape};
use clinembed::tokenizer::{FeatureSchema, FeatureSpec};
use clinembed::tsne::{self, TsneConfig};

// ── Shared fixtures ────────────────────────────────────────────────────

/// Default synthetic dataset (2,000 stays), fully preprocessed.
fn acc_dataset() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| preprocessed(&GeneratorSpec::default_with(2000, 0)))
}

fn preprocessed(spec: &GeneratorSpec) -> Dataset {
    let mut dataset = data::generate_synthetic(spec).expect("generator spec is valid");
    dataset.fit_stats().unwrap();
    dataset.impute().unwrap();
    dataset.normalize().unwrap();
    dataset
}

type PretrainRuns = (Vec<(Checkpoint, pretrain::LossHistory)>, Duration);

/// CBOW pretraining on the default dataset, library defaults, three seeds.
/// Three epochs are enough to clear the efficacy bar by a wide margin.
fn cbow_runs() -> &'static PretrainRuns {
    static RUNS: OnceLock<PretrainRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let mut config = PretrainConfig::cbow_default();
        config.max_epochs = 3;
        train_seeds(&config)
    })
}

/// MLM pretraining on the default dataset. Smaller width and a larger
/// learning rate than the library defaults keep three seeds inside the
/// ten-minute budget on one core; the objective itself is unchanged.
fn mlm_runs() -> &'static PretrainRuns {
    static RUNS: OnceLock<PretrainRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let mut config = PretrainConfig::mlm_default();
        config.dim = 32;
        config.lr = 1e-3;
        config.batch_size = 256;
        config.max_epochs = 4;
        train_seeds(&config)
    })
}

fn train_seeds(config: &PretrainConfig) -> PretrainRuns {
    let start = Instant::now();
    let runs = (0..3)
        .map(|seed| pretrain::pretrain(acc_dataset(), config, seed).expect("pretraining runs"))
        .collect();
    (runs, start.elapsed())
}

/// Best-epoch total validation loss improvement over the epoch-0 forward
/// pass, as a fraction of the epoch-0 loss.
fn val_improvement(history: &pretrain::LossHistory) -> f64 {
    let total = |r: &pretrain::EpochRow| r.val_num + r.val_cat;
    let before = total(&history.rows[0]);
    let best = history.rows[1..]
        .iter()
        .map(&total)
        .fold(f64::INFINITY, f64::min);
    (before - best) / before
}

// ── Criterion 1: gradient suite ────────────────────────────────────────

fn toy_schema() -> FeatureSchema {
    FeatureSchema::new(vec![
        FeatureSpec::numerical("HR"),
        FeatureSpec::numerical("RR"),
        FeatureSpec::categorical("CRR", 2),
        FeatureSpec::categorical("GCSEO", 3),
    ])
    .unwrap()
}

/// Random step over the toy schema: numericals in (−1.2, 1.2), codes valid.
fn toy_step(rng: &mut ChaCha8Rng) -> Vec<f64> {
    vec![
        rng.gen_range(-1.2..1.2),
        rng.gen_range(-1.2..1.2),
        rng.gen_range(0..2) as f64,
        rng.gen_range(0..3) as f64,
    ]
}

type ForwardCtx = Option<(Tape, Binding, NodeId)>;

/// Central finite differences over every parameter entry in the store
/// against one analytic backward pass. Returns the worst relative error.
fn store_fd_worst<F>(store: &mut ParamStore, forward: F) -> f64
where
    F: Fn(&ParamStore) -> (f64, ForwardCtx),
{
    let (_, ctx) = forward(store);
    let (tape, binding, loss) = ctx.expect("first call returns the tape");
    let grads = tape.backward(loss).unwrap();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for name in &names {
        let original = store.get(name).unwrap().clone();
        let gid = binding.id(store, name);
        let analytic = grads.get(gid);
        for i in 0..original.numel() {
            let mut plus = original.clone();
            plus.data_mut()[i] += h;
            store.set(name, plus).unwrap();
            let (fp, _) = forward(store);
            let mut minus = original.clone();
            minus.data_mut()[i] -= h;
            store.set(name, minus).unwrap();
            let (fm, _) = forward(store);
            store.set(name, original.clone()).unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.map(|g| g.data()[i]).unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

fn cbow_loss_fd(seed: u64) -> f64 {
    let schema = toy_schema();
    let mut store = ParamStore::new();
    let use_previous = seed % 2 == 1;
    let model = CbowModel::init(&mut store, &schema, 6, use_previous, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1);
    let x1 = toy_step(&mut rng);
    let x2 = toy_step(&mut rng);
    let p1 = toy_step(&mut rng);
    let p2 = toy_step(&mut rng);
    store_fd_worst(&mut store, |store| {
        let samples = [
            CbowSample { x: &x1, prev: &p1, pick: TargetPick { j: 0, k: 2 } },
            CbowSample { x: &x2, prev: &p2, pick: TargetPick { j: 1, k: 3 } },
        ];
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let (l_num, l_cat) = model.batch_loss(&mut tape, store, &binding, &samples).unwrap();
        let total = tape.add(l_num, l_cat).unwrap();
        (tape.value(total).item().unwrap(), Some((tape, binding, total)))
    })
}

fn mlm_loss_fd(seed: u64) -> f64 {
    let schema = toy_schema();
    let mut store = ParamStore::new();
    let model = MlmModel::init(&mut store, &schema, 6, 1, 1, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x313);
    let x1 = toy_step(&mut rng);
    let x2 = toy_step(&mut rng);
    let random_vec: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect();
    // rotate corruption branches so every backward path gets seeds
    let (c1, c2) = match seed % 3 {
        0 => (CorruptKind::Mask, CorruptKind::Keep),
        1 => (CorruptKind::Random(random_vec.clone()), CorruptKind::Mask),
        _ => (CorruptKind::Keep, CorruptKind::Random(random_vec.clone())),
    };
    // odd seeds repeat the numerical pick so the tied readout sees the
    // same direction twice in one batch
    let j2 = if seed % 2 == 1 { 0 } else { 1 };
    store_fd_worst(&mut store, |store| {
        let samples = [
            MlmSample {
                x: &x1,
                pick: TargetPick { j: 0, k: 3 },
                corrupt_j: c1.clone(),
                corrupt_k: c2.clone(),
            },
            MlmSample {
                x: &x2,
                pick: TargetPick { j: j2, k: 2 },
                corrupt_j: c2.clone(),
                corrupt_k: c1.clone(),
            },
        ];
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let (l_num, l_cat) = model.batch_loss(&mut tape, store, &binding, &samples).unwrap();
        let total = tape.add(l_num, l_cat).unwrap();
        (tape.value(total).item().unwrap(), Some((tape, binding, total)))
    })
}

fn downstream_loss_fd(seed: u64) -> f64 {
    let schema = toy_schema();
    let mut config = DownstreamConfig::default_for(Variant::Ftt, Task::PerStep);
    config.dim = 6;
    let mut store = ParamStore::new();
    let model = DownstreamModel::build(&mut store, &schema, &config, None, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD5);
    let stay1: Vec<Vec<f64>> = (0..2).map(|_| toy_step(&mut rng)).collect();
    let stay2: Vec<Vec<f64>> = (0..3).map(|_| toy_step(&mut rng)).collect();
    let targets: Vec<usize> = (0..5).map(|_| rng.gen_range(0..2)).collect();
    store_fd_worst(&mut store, |store| {
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let (logits, _) = model
            .forward_steps(&mut tape, store, &binding, &[&stay1, &stay2])
            .unwrap();
        let mut losses = Vec::with_capacity(targets.len());
        for (row, &y) in targets.iter().enumerate() {
            let r = tape.slice(logits, 0, row, 1).unwrap();
            let flat = tape.reshape(r, vec![2]).unwrap();
            losses.push(tape.cross_entropy(flat, y).unwrap());
        }
        let all = tape.concat(&losses, 0).unwrap();
        let loss = tape.mean_axis(all, 0).unwrap();
        (tape.value(loss).item().unwrap(), Some((tape, binding, loss)))
    })
}

#[test]
fn c01_gradient_suite() {
    let start = Instant::now();
    let worst_ops = checks::op_gradient_sweep(20).unwrap();
    assert!(worst_ops < 1e-4, "op sweep worst rel err {worst_ops}");

    let mut worst_model = 0.0f64;
    for seed in 0..20 {
        worst_model = worst_model.max(cbow_loss_fd(seed));
        worst_model = worst_model.max(mlm_loss_fd(seed));
        worst_model = worst_model.max(downstream_loss_fd(seed));
    }
    assert!(worst_model < 1e-4, "model loss worst rel err {worst_model}");

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}, budget 2 min");
    println!(
        "criterion 1 (gradient suite): PASS — ops worst {worst_ops:.2e}, model losses worst {worst_model:.2e}, {elapsed:.1?}"
    );
}

// ── Criterion 2: MLM corruption statistics ─────────────────────────────

#[test]
fn c02_mlm_corruption_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draws = 10_000usize;
    let (mut mask, mut random, mut keep) = (0usize, 0usize, 0usize);
    for _ in 0..draws {
        match pretrain::draw_corrupt(&mut rng, 16) {
            CorruptKind::Mask => mask += 1,
            CorruptKind::Random(_) => random += 1,
            CorruptKind::Keep => keep += 1,
        }
    }
    let f = |n: usize| n as f64 / draws as f64;
    assert!((f(mask) - 0.8).abs() <= 0.02, "mask rate {}", f(mask));
    assert!((f(random) - 0.1).abs() <= 0.02, "random rate {}", f(random));
    assert!((f(keep) - 0.1).abs() <= 0.02, "keep rate {}", f(keep));
    println!(
        "criterion 2 (MLM corruption statistics): PASS — mask {:.3}, random {:.3}, keep {:.3} over {draws} draws",
        f(mask),
        f(random),
        f(keep),
    );
}

// ── Criterion 3: metric oracles ────────────────────────────────────────

#[test]
fn c03_metric_oracles() {
    // Exhaustive label patterns over tie-rich score vectors up to n = 12.
    let mut cases = 0usize;
    for n in 2..=12usize {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + n as u64);
        for _round in 0..3 {
            // snap to a coarse grid so ties appear often
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64 / 6.0).collect();
            for mask in 1..(1u32 << n) - 1 {
                let labels: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                let sl = ScoredLabels::new(scores.clone(), labels).unwrap();
                let fast = (metrics::auroc(&sl), metrics::auprc(&sl));
                let slow = (oracle::auroc_pairs(&sl), oracle::auprc_curve(&sl));
                assert!(
                    (fast.0 - slow.0).abs() <= 1e-12 && (fast.1 - slow.1).abs() <= 1e-12,
                    "n={n} mask={mask:b}: fast {fast:?} vs oracle {slow:?}"
                );
                cases += 1;
            }
        }
    }

    // Worked example with exact hand-computed values.
    let sl = ScoredLabels::new(vec![0.9, 0.8, 0.3, 0.2], vec![true, false, true, false]).unwrap();
    let roc = metrics::auroc(&sl);
    let prc = metrics::auprc(&sl);
    assert_eq!(roc, 0.75, "worked-example AUROC");
    assert!((prc - 5.0 / 6.0).abs() < 1e-15, "worked-example AUPRC {prc}");
    println!(
        "criterion 3 (metric oracles): PASS — {cases} exhaustive cases, worked example 0.75 / {prc:.4}"
    );
}

// ── Criterion 4: pretraining efficacy ──────────────────────────────────

#[test]
fn c04_pretraining_efficacy() {
    let mut summary = Vec::new();
    for (label, runs) in [("cbow", cbow_runs()), ("mlm", mlm_runs())] {
        let (seeds, took) = runs;
        for (seed, (_, history)) in seeds.iter().enumerate() {
            let gain = val_improvement(history);
            assert!(
                gain >= 0.30,
                "{label} seed {seed}: best-epoch val loss improves only {:.1}% over epoch 0",
                100.0 * gain
            );
        }
        assert!(
            *took < Duration::from_secs(600),
            "{label}: 3 seeds took {took:?}, budget 10 min"
        );
        let worst = seeds
            .iter()
            .map(|(_, h)| val_improvement(h))
            .fold(f64::INFINITY, f64::min);
        summary.push(format!("{label} worst gain {:.1}% in {took:.0?}", 100.0 * worst));
    }
    println!(
        "criterion 4 (pretraining efficacy): PASS — {}",
        summary.join(", ")
    );
}

// ── Criterion 5: downstream direction ──────────────────────────────────

/// Mean test AUPRC per variant over three seeds on a 300-stay per-step
/// task, with matching small pretraining runs for the cbow/mlm variants.
fn downstream_means() -> &'static (HashMap<&'static str, f64>, Duration) {
    static MEANS: OnceLock<(HashMap<&'static str, f64>, Duration)> = OnceLock::new();
    MEANS.get_or_init(|| {
        let start = Instant::now();
        let dataset = preprocessed(&GeneratorSpec::default_with(300, 1));

        let mut cbow_config = PretrainConfig::cbow_default();
        cbow_config.dim = 32;
        cbow_config.batch_size = 128;
        cbow_config.max_epochs = 4;
        let mut mlm_config = PretrainConfig::mlm_default();
        mlm_config.dim = 32;
        mlm_config.lr = 1e-3;
        mlm_config.batch_size = 128;
        mlm_config.max_epochs = 3;

        let variants = [
            (Variant::Transformer, "transformer"),
            (Variant::Ftt, "ftt"),
            (Variant::Cbow, "cbow"),
            (Variant::Mlm, "mlm"),
        ];
        let mut sums: HashMap<&'static str, f64> = HashMap::new();
        for seed in 0..3 {
            let (cbow_ckpt, _) = pretrain::pretrain(&dataset, &cbow_config, seed).unwrap();
            let (mlm_ckpt, _) = pretrain::pretrain(&dataset, &mlm_config, seed).unwrap();
            for (variant, label) in variants {
                let mut config = DownstreamConfig::default_for(variant, Task::PerStep);
                config.dim = 32;
                config.lr = 1e-3;
                config.max_epochs = 6;
                let from = match variant {
                    Variant::Cbow => Some(&cbow_ckpt),
                    Variant::Mlm => Some(&mlm_ckpt),
                    _ => None,
                };
                let (_, report) = downstream::finetune(&dataset, &config, from, seed).unwrap();
                *sums.entry(label).or_insert(0.0) += report.test_auprc / 3.0;
            }
        }
        (sums, start.elapsed())
    })
}

#[test]
fn c05_downstream_direction() {
    let (means, took) = downstream_means();
    let baseline = means["transformer"];
    for label in ["ftt", "cbow", "mlm"] {
        assert!(
            means[label] >= baseline + 0.01,
            "{label} mean AUPRC {:.4} does not exceed transformer {:.4} by 0.01",
            means[label],
            baseline
        );
    }
    assert!(*took < Duration::from_secs(1800), "took {took:?}, budget 30 min");
    println!(
        "criterion 5 (downstream direction): PASS — transformer {:.4}, ftt {:.4}, cbow {:.4}, mlm {:.4} in {took:.0?}",
        baseline, means["ftt"], means["cbow"], means["mlm"],
    );
}

// ── Criteria 6 & 7: probe recovery and mid-level clustering ────────────

fn planted_pairs() -> Vec<(String, String)> {
    [("Temp", "RR"), ("RR", "HR"), ("SBP", "DBP")]
        .into_iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
}

fn report_for(checkpoint: &Checkpoint) -> probe::CorrelationReport {
    let store = checkpoint.to_store().unwrap();
    probe::correlation_report(&store, &checkpoint.schema, &planted_pairs()).unwrap()
}

#[test]
fn c06_probe_recovery() {
    let (runs, _) = mlm_runs();
    let mut passing = 0usize;
    let mut notes = Vec::new();
    for (checkpoint, _) in runs {
        let report = report_for(checkpoint);
        let quartile = report.pairs.len() / 4;
        let ranks_ok = report.planted_ranks.iter().all(|(_, _, r)| *r <= quartile);
        let osfio = report
            .pairs
            .iter()
            .find(|p| (p.a == "FIO" && p.b == "OS") || (p.a == "OS" && p.b == "FIO"))
            .expect("OS/FIO pair present")
            .cosine;
        if ranks_ok && osfio < 0.0 {
            passing += 1;
        }
        notes.push(format!(
            "ranks {:?} osfio {osfio:+.3}",
            report.planted_ranks.iter().map(|(_, _, r)| *r).collect::<Vec<_>>()
        ));
    }
    assert!(passing >= 2, "only {passing}/3 seeds pass: {notes:?}");
    println!(
        "criterion 6 (probe recovery): PASS — {passing}/3 seeds ({})",
        notes.join("; ")
    );
}

#[test]
fn c07_mid_level_clustering() {
    let mut summary = Vec::new();
    for (label, runs) in [("cbow", cbow_runs()), ("mlm", mlm_runs())] {
        let passing = runs
            .0
            .iter()
            .filter(|(checkpoint, _)| {
                let report = report_for(checkpoint);
                report.mid_mean_distance < report.all_mean_distance
            })
            .count();
        assert!(passing >= 2, "{label}: only {passing}/3 seeds cluster mid levels");
        summary.push(format!("{label} {passing}/3"));
    }
    println!(
        "criterion 7 (mid-level clustering): PASS — {}",
        summary.join(", ")
    );
}

// ── Criterion 8: t-SNE correctness ─────────────────────────────────────

fn silhouette(coords: &[[f64; 2]], split: usize) -> f64 {
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let n = coords.len();
    let mut total = 0.0;
    for i in 0..n {
        let own: Vec<usize> = (0..n).filter(|&j| j != i && (j < split) == (i < split)).collect();
        let other: Vec<usize> = (0..n).filter(|&j| (j < split) != (i < split)).collect();
        let a = own.iter().map(|&j| dist(&coords[i], &coords[j])).sum::<f64>() / own.len() as f64;
        let b =
            other.iter().map(|&j| dist(&coords[i], &coords[j])).sum::<f64>() / other.len() as f64;
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

#[test]
fn c08_tsne_correctness() {
    // Per-point entropy hits ln(perplexity) after bisection.
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let points: Vec<Vec<f64>> = (0..60)
        .map(|_| (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let (_, _, entropies) = tsne::conditional_affinities(&points, 15.0).unwrap();
    let target = (15.0f64).ln();
    let worst = entropies
        .iter()
        .map(|h| (h - target).abs())
        .fold(0.0f64, f64::max);
    assert!(worst < 1e-4, "worst entropy gap {worst}");

    // KL never ends above where it started, ten seeds out of ten. Enough
    // points that the target perplexity sits well below n − 1.
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let cloud: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let result = tsne::tsne(&cloud, &TsneConfig::with_seed(seed)).unwrap();
        let first = result.kl_history[0];
        let last = *result.kl_history.last().unwrap();
        assert!(last < first, "seed {seed}: KL {first} -> {last}");
    }

    // Two well-separated clusters stay separated in the map.
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut cloud = Vec::new();
    for c in 0..2 {
        let center = if c == 0 { -3.0 } else { 3.0 };
        for _ in 0..10 {
            cloud.push((0..4).map(|_| center + rng.gen_range(-0.05..0.05)).collect::<Vec<f64>>());
        }
    }
    let mut config = TsneConfig::with_seed(8);
    config.perplexity = 5.0;
    let result = tsne::tsne(&cloud, &config).unwrap();
    let score = silhouette(&result.coords, 10);
    assert!(score > 0.5, "silhouette {score}");
    println!(
        "criterion 8 (t-SNE correctness): PASS — entropy gap {worst:.1e}, KL down 10/10, silhouette {score:.3}"
    );
}

// ── Criterion 9: CLI determinism ───────────────────────────────────────

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_clinembed")
}

fn run_cli(args: &[&str]) {
    let out = Command::new(bin()).args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "clinembed {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_dirs_equal(a: &Path, b: &Path, files: &[&str]) {
    for f in files {
        let left = std::fs::read(a.join(f)).unwrap_or_else(|_| panic!("missing {f} in {a:?}"));
        let right = std::fs::read(b.join(f)).unwrap_or_else(|_| panic!("missing {f} in {b:?}"));
        assert!(left == right, "{f} differs between reruns");
    }
}

#[test]
fn c09_cli_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let path = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();

    // gen-data
    run_cli(&["gen-data", "--out", &path("d1"), "--stays", "100", "--seed", "11"]);
    run_cli(&["gen-data", "--out", &path("d2"), "--stays", "100", "--seed", "11"]);
    assert_dirs_equal(
        &tmp.path().join("d1"),
        &tmp.path().join("d2"),
        &["data.csv", "manifest.json", "spec.json"],
    );

    // pretrain
    let data = path("d1/data.csv");
    for out in ["p1", "p2"] {
        run_cli(&[
            "pretrain", "--data", &data, "--objective", "cbow", "--seed", "5", "--out",
            &path(out), "--dim", "8", "--batch-size", "64", "--max-epochs", "2",
        ]);
    }
    assert_dirs_equal(
        &tmp.path().join("p1"),
        &tmp.path().join("p2"),
        &["checkpoint.json", "loss.csv"],
    );

    // finetune (from the pretrained checkpoint, exercising import too)
    let ckpt = path("p1/checkpoint.json");
    for out in ["f1", "f2"] {
        run_cli(&[
            "finetune", "--data", &data, "--model", "cbow", "--task", "per_step", "--from",
            &ckpt, "--seed", "3", "--out", &path(out), "--max-epochs", "1", "--lr", "1e-3",
        ]);
    }
    assert_dirs_equal(
        &tmp.path().join("f1"),
        &tmp.path().join("f2"),
        &["checkpoint_seed3.json", "metrics.csv"],
    );

    // probe (CSV, SVG, and report)
    for out in ["r1", "r2"] {
        run_cli(&["probe", "--from", &ckpt, "--out", &path(out), "--seed", "2"]);
    }
    assert_dirs_equal(
        &tmp.path().join("r1"),
        &tmp.path().join("r2"),
        &["probe.csv", "probe.svg", "report.txt"],
    );
    println!("criterion 9 (CLI determinism): PASS — gen-data, pretrain, finetune, probe byte-identical on rerun");
}

// ── Criterion 10: label-fraction harness ───────────────────────────────

#[test]
fn c10_label_fraction_harness() {
    let tmp = tempfile::tempdir().unwrap();
    let path = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    run_cli(&["gen-data", "--out", &path("data"), "--stays", "300", "--seed", "4"]);
    std::fs::write(
        tmp.path().join("rc.json"),
        concat!(
            "{\"pretrain_cbow\": {\"dim\": 8, \"batch_size\": 128, \"max_epochs\": 2},\n",
            " \"pretrain_mlm\": {\"dim\": 8, \"batch_size\": 128, \"lr\": 1e-3, \"max_epochs\": 1},\n",
            " \"downstream\": {\"dim\": 8, \"lr\": 1e-3, \"max_epochs\": 2}}\n",
        ),
    )
    .unwrap();

    let out = Command::new(bin())
        .args([
            "replicate", "--suite", "labels", "--data", &path("data/data.csv"), "--out",
            &path("rep"), "--config", &path("rc.json"), "--seeds", "3",
        ])
        .env("CLINEMBED_THREADS", "2")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "replicate failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // 4 models × 4 fractions × 3 seeds, plus one aggregate row per cell.
    let runs = std::fs::read_to_string(tmp.path().join("rep/runs.csv")).unwrap();
    let rows: Vec<&str> = runs.lines().collect();
    assert_eq!(rows.len(), 1 + 48 + 16, "runs.csv row count");

    // Table layout: model rows against fraction columns, mean±std cells.
    let table = std::fs::read_to_string(tmp.path().join("rep/table_labels.txt")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    let header: Vec<&str> = lines[0].split_whitespace().collect();
    assert_eq!(header, ["model", "100%", "50%", "10%", "1%"]);
    let models: Vec<&str> = lines[2..6].iter().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(models, ["transformer", "ftt", "cbow", "mlm"]);
    for line in &lines[2..6] {
        let cells: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cells.len(), 5, "row '{line}'");
        for cell in &cells[1..] {
            metrics::parse_percent(cell).unwrap_or_else(|_| panic!("cell '{cell}' not mean±std"));
        }
    }
    println!("criterion 10 (label-fraction harness): PASS — 48 runs, 16 aggregate rows, 4×4 table");
}
