//! Downstream fine-tuning: per-step feature embeddings are max-pooled into
//! time-step vectors, a causal time-axis transformer produces contextual
//! step embeddings, and a shared linear head predicts either every step
//! (decompensation-style) or the last counted step (48-hour mortality).
//!
//! Four front ends share that spine: a raw linear projection of the
//! feature vector (`transformer`), a feature tokenizer trained from
//! scratch (`ftt`), a tokenizer initialized from a CBOW checkpoint
//! (`cbow`), and a tokenizer plus pretrained feature-axis encoder
//! initialized from an MLM checkpoint (`mlm`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::data::{derive_seed, split_of, Dataset, Split, STAY_WINDOW};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::metrics::{auprc, auroc, ScoredLabels};
use crate::optim::AdamHyper;
use crate::params::{uniform_init, Binding, ParamStore};
use crate::tensor::{NodeId, Tape, Tensor};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Transformer,
    Ftt,
    Cbow,
    Mlm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    PerStep,
    StayLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamConfig {
    pub model: Variant,
    pub task: Task,
    pub pooling: Pooling,
    pub batch_size: usize,
    pub lr: f64,
    /// Embedding width for front ends trained from scratch; a pretrained
    /// checkpoint's width takes precedence.
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub label_fraction: f64,
    pub freeze_tokenizer: bool,
    pub max_epochs: usize,
    pub patience: usize,
}

impl DownstreamConfig {
    pub fn default_for(model: Variant, task: Task) -> Self {
        DownstreamConfig {
            model,
            task,
            pooling: Pooling::Max,
            batch_size: 16,
            lr: 1e-4,
            dim: 128,
            depth: 1,
            heads: 1,
            label_fraction: 1.0,
            freeze_tokenizer: false,
            max_epochs: 100,
            patience: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "label_fraction {} outside (0, 1]",
                self.label_fraction
            )));
        }
        if self.freeze_tokenizer && self.model == Variant::Transformer {
            return Err(Error::Config(
                "the raw transformer has no tokenizer to freeze".into(),
            ));
        }
        Ok(())
    }
}

/// Coordinate-wise max over a step's feature embeddings.
pub fn pool_step(tape: &mut Tape, embeddings: &[NodeId], m: usize) -> Result<NodeId> {
    if embeddings.is_empty() {
        return Err(Error::Contract("pooling over zero features".into()));
    }
    let stacked = tape.stack_rows(embeddings, m)?;
    tape.max_axis0(stacked)
}

pub const DS_PROJ_W: &str = "ds.proj.w";
pub const DS_PROJ_B: &str = "ds.proj.b";
pub const DS_HEAD_W: &str = "ds.head.w";
pub const DS_HEAD_B: &str = "ds.head.b";
pub const TIME_ENC_PREFIX: &str = "tenc.";
const FEAT_ENC_PREFIX: &str = "fenc.";

/// Model handles over a parameter store; the store itself carries the
/// weights.
pub struct DownstreamModel {
    pub schema: crate::tokenizer::FeatureSchema,
    pub variant: Variant,
    pub m: usize,
    pub tok: Option<Tokenizer>,
    pub fenc: Option<Encoder>,
    pub tenc: Encoder,
}

impl DownstreamModel {
    /// Initialize all parameters, importing pretrained tokenizer (and, for
    /// `mlm`, feature-axis encoder) weights from a checkpoint.
    pub fn build(
        store: &mut ParamStore,
        schema: &crate::tokenizer::FeatureSchema,
        config: &DownstreamConfig,
        pretrained: Option<&Checkpoint>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        let d = schema.d();

        let mut tok = None;
        let mut fenc = None;
        let m;
        match (config.model, pretrained) {
            (Variant::Transformer, None) => {
                m = config.dim;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xD5_01));
                store.add(
                    DS_PROJ_W,
                    uniform_init(vec![d, m], 1.0 / (d as f64).sqrt(), &mut rng),
                )?;
                store.add(DS_PROJ_B, Tensor::zeros(vec![m]))?;
            }
            (Variant::Transformer, Some(_)) => {
                return Err(Error::Config(
                    "the raw transformer takes no pretrained checkpoint".into(),
                ));
            }
            (Variant::Ftt, None) => {
                let t = Tokenizer::init(store, schema, config.dim, derive_seed(seed, 0xD5_02))?;
                m = t.m;
                tok = Some(t);
            }
            (Variant::Ftt | Variant::Cbow, Some(ckpt)) => {
                import_checkpoint(store, schema, ckpt, ModelKind::Tokenizer, &["tok."])?;
                let t = Tokenizer::from_store(store)?;
                m = t.m;
                tok = Some(t);
            }
            (Variant::Cbow, None) => {
                return Err(Error::Config(
                    "the cbow variant needs a pretrained tokenizer checkpoint".into(),
                ));
            }
            (Variant::Mlm, Some(ckpt)) => {
                import_checkpoint(store, schema, ckpt, ModelKind::Mlm, &["tok.", FEAT_ENC_PREFIX])?;
                let mlm = crate::pretrain::MlmModel::from_store(store, schema)?;
                m = mlm.tok.m;
                tok = Some(mlm.tok);
                fenc = Some(mlm.enc);
            }
            (Variant::Mlm, None) => {
                return Err(Error::Config(
                    "the mlm variant needs a pretrained checkpoint".into(),
                ));
            }
        }

        let tenc_config = EncoderConfig::new(config.depth, config.heads, m, STAY_WINDOW);
        let tenc = Encoder::init(store, TIME_ENC_PREFIX, tenc_config, true, derive_seed(seed, 0xD5_03))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xD5_04));
        store.add(
            DS_HEAD_W,
            uniform_init(vec![m, 2], 1.0 / (m as f64).sqrt(), &mut rng),
        )?;
        store.add(DS_HEAD_B, Tensor::zeros(vec![2]))?;

        if config.freeze_tokenizer {
            store.freeze_prefix("tok.");
        }
        Ok(DownstreamModel {
            schema: schema.clone(),
            variant: config.model,
            m,
            tok,
            fenc,
            tenc,
        })
    }

    /// Step logits for a batch of stays, stacked as a `[sum(T_b), 2]`
    /// matrix alongside the per-stay lengths.
    pub fn forward_steps(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        binding: &Binding,
        stays: &[&[Vec<f64>]],
    ) -> Result<(NodeId, Vec<usize>)> {
        let seg_lens: Vec<usize> = stays.iter().map(|s| s.len()).collect();
        if seg_lens.iter().any(|&t| t == 0) {
            return Err(Error::Data("empty stay in forward batch".into()));
        }
        let d = self.schema.d();
        let total: usize = seg_lens.iter().sum();

        let g = match self.variant {
            Variant::Transformer => {
                let mut flat = Vec::with_capacity(total * d);
                for stay in stays {
                    for row in *stay {
                        flat.extend_from_slice(row);
                    }
                }
                let x = tape.constant(Tensor::from_vec(vec![total, d], flat)?);
                let w = binding.id(store, DS_PROJ_W);
                let b = binding.id(store, DS_PROJ_B);
                let proj = tape.matmul(x, w)?;
                tape.add_row(proj, b)?
            }
            Variant::Ftt | Variant::Cbow => {
                let tok = self.tok.as_ref().expect("tokenizer front end");
                let mut pooled = Vec::with_capacity(total);
                for stay in stays {
                    for row in *stay {
                        let e = tok.tokenize(tape, store, binding, &self.schema, row)?;
                        pooled.push(pool_step(tape, &e, self.m)?);
                    }
                }
                tape.stack_rows(&pooled, self.m)?
            }
            Variant::Mlm => {
                let tok = self.tok.as_ref().expect("tokenizer front end");
                let fenc = self.fenc.as_ref().expect("feature-axis encoder");
                let mut all = Vec::with_capacity(total * d);
                for stay in stays {
                    for row in *stay {
                        all.extend(tok.tokenize(tape, store, binding, &self.schema, row)?);
                    }
                }
                let stacked = tape.stack_rows(&all, self.m)?;
                let f = fenc.encode_segments(tape, store, binding, stacked, &vec![d; total], false)?;
                let mut pooled = Vec::with_capacity(total);
                for t in 0..total {
                    let block = tape.slice(f, 0, t * d, d)?;
                    pooled.push(tape.max_axis0(block)?);
                }
                tape.stack_rows(&pooled, self.m)?
            }
        };

        let with_pos = self
            .tenc
            .add_positions_segments(tape, store, binding, g, &seg_lens)?;
        let h = self
            .tenc
            .encode_segments(tape, store, binding, with_pos, &seg_lens, true)?;
        let w = binding.id(store, DS_HEAD_W);
        let b = binding.id(store, DS_HEAD_B);
        let raw = tape.matmul(h, w)?;
        let logits = tape.add_row(raw, b)?;
        Ok((logits, seg_lens))
    }

    /// Logits for a single stay: `[T, 2]` for per-step prediction, `[2]`
    /// (the last counted step's row) for stay-level prediction.
    pub fn forward_stay(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        binding: &Binding,
        stay: &[Vec<f64>],
        task: Task,
    ) -> Result<NodeId> {
        let (logits, seg_lens) = self.forward_steps(tape, store, binding, &[stay])?;
        match task {
            Task::PerStep => Ok(logits),
            Task::StayLevel => {
                let row = tape.slice(logits, 0, last_counted(seg_lens[0]), 1)?;
                tape.reshape(row, vec![2])
            }
        }
    }
}

/// Index of the "last time step counted": the final step inside the
/// 48-hour window.
pub fn last_counted(t_len: usize) -> usize {
    t_len.min(STAY_WINDOW) - 1
}

/// Copy checkpoint parameters under `prefixes` into `store` after kind and
/// schema checks.
fn import_checkpoint(
    store: &mut ParamStore,
    schema: &crate::tokenizer::FeatureSchema,
    ckpt: &Checkpoint,
    want: ModelKind,
    prefixes: &[&str],
) -> Result<()> {
    ckpt.validate()?;
    ckpt.validate_against(schema)?;
    if ckpt.model_kind != want {
        return Err(Error::Schema(format!(
            "checkpoint holds a {:?} model, wanted {:?}",
            ckpt.model_kind, want
        )));
    }
    let loaded = ckpt.to_store()?;
    for name in loaded.names().map(str::to_string).collect::<Vec<_>>() {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            store.add(&name, loaded.get(&name)?.clone())?;
        }
    }
    Ok(())
}

/// Keep `floor(fraction * n)` stays, chosen by a seeded shuffle;
/// `fraction = 1` keeps everything untouched.
pub fn subsample_labels(indices: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(indices.to_vec());
    }
    let keep = (fraction * indices.len() as f64).floor() as usize;
    if keep == 0 {
        return Err(Error::Data(format!(
            "label fraction {fraction} leaves no stays out of {}",
            indices.len()
        )));
    }
    let mut order = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5AB5));
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut chosen: Vec<usize> = order.into_iter().take(keep).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// `(row within the stacked logits, class)` targets for one batch.
fn batch_targets(
    dataset: &Dataset,
    stay_indices: &[usize],
    seg_lens: &[usize],
    task: Task,
) -> Result<Vec<(usize, usize)>> {
    let mut targets = Vec::new();
    let mut offset = 0;
    for (&si, &len) in stay_indices.iter().zip(seg_lens) {
        let stay = &dataset.stays[si];
        match task {
            Task::PerStep => {
                let labels = stay.per_step_labels.as_ref().ok_or_else(|| {
                    Error::Data(format!("stay {} lacks per-step labels", stay.stay_id))
                })?;
                for (t, &y) in labels.iter().enumerate() {
                    targets.push((offset + t, y as usize));
                }
            }
            Task::StayLevel => {
                let y = stay.stay_label.ok_or_else(|| {
                    Error::Data(format!("stay {} lacks a stay label", stay.stay_id))
                })?;
                targets.push((offset + last_counted(len), y as usize));
            }
        }
        offset += len;
    }
    Ok(targets)
}

/// Class-weighted mean cross-entropy over target rows of stacked logits.
fn weighted_ce(
    tape: &mut Tape,
    logits: NodeId,
    targets: &[(usize, usize)],
    class_w: [f64; 2],
) -> Result<NodeId> {
    let mut losses = Vec::with_capacity(targets.len());
    let mut weight_sum = 0.0;
    for &(row, class) in targets {
        let r = tape.slice(logits, 0, row, 1)?;
        let flat = tape.reshape(r, vec![2])?;
        let ce = tape.cross_entropy(flat, class)?;
        losses.push(tape.scale(ce, class_w[class])?);
        weight_sum += class_w[class];
    }
    let all = tape.concat(&losses, 0)?;
    let sum = tape.sum_axis(all, 0)?;
    tape.scale(sum, 1.0 / weight_sum)
}

/// Probability of the positive class from a 2-logit row.
fn positive_prob(l0: f64, l1: f64) -> f64 {
    1.0 / (1.0 + (l0 - l1).exp())
}

/// Scores and labels over whole stays, batched, forward only.
fn score_stays(
    dataset: &Dataset,
    model: &DownstreamModel,
    store: &ParamStore,
    stay_indices: &[usize],
    task: Task,
    batch_size: usize,
) -> Result<ScoredLabels> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for chunk in stay_indices.chunks(batch_size) {
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let stays: Vec<&[Vec<f64>]> = chunk
            .iter()
            .map(|&si| dataset.stays[si].values.as_slice())
            .collect();
        let (logits, seg_lens) = model.forward_steps(&mut tape, store, &binding, &stays)?;
        let values = tape.value(logits).data().to_vec();
        let targets = batch_targets(dataset, chunk, &seg_lens, task)?;
        for (row, class) in targets {
            scores.push(positive_prob(values[2 * row], values[2 * row + 1]));
            labels.push(class == 1);
        }
    }
    ScoredLabels::new(scores, labels)
}

fn split_indices(dataset: &Dataset, split: Split) -> Vec<usize> {
    dataset
        .stays
        .iter()
        .enumerate()
        .filter(|(_, s)| split_of(s.stay_id) == split)
        .map(|(i, _)| i)
        .collect()
}

/// Inverse-prevalence class weights from the training targets.
fn class_weights(dataset: &Dataset, train: &[usize], task: Task) -> Result<[f64; 2]> {
    let mut counts = [0usize; 2];
    for &si in train {
        let stay = &dataset.stays[si];
        match task {
            Task::PerStep => {
                let labels = stay.per_step_labels.as_ref().ok_or_else(|| {
                    Error::Data(format!("stay {} lacks per-step labels", stay.stay_id))
                })?;
                for &y in labels {
                    counts[y as usize] += 1;
                }
            }
            Task::StayLevel => {
                let y = stay.stay_label.ok_or_else(|| {
                    Error::Data(format!("stay {} lacks a stay label", stay.stay_id))
                })?;
                counts[y as usize] += 1;
            }
        }
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::Data(format!(
            "training labels are single-class (counts {counts:?})"
        )));
    }
    let n = (counts[0] + counts[1]) as f64;
    Ok([n / (2.0 * counts[0] as f64), n / (2.0 * counts[1] as f64)])
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub best_epoch: usize,
    /// Validation AUPRC per epoch; entry 0 is the untrained model.
    pub val_auprc: Vec<f64>,
    pub test_auprc: f64,
    pub test_auroc: f64,
}

/// Fine-tune on the train split with early stopping on validation AUPRC,
/// then score the held-out test split with the best weights.
pub fn finetune(
    dataset: &Dataset,
    config: &DownstreamConfig,
    pretrained: Option<&Checkpoint>,
    seed: u64,
) -> Result<(Checkpoint, FinetuneReport)> {
    config.validate()?;
    dataset.require_preprocessed()?;
    let train_all = split_indices(dataset, Split::Train);
    let val = split_indices(dataset, Split::Val);
    let test = split_indices(dataset, Split::Test);
    if train_all.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::Data("a dataset split is empty".into()));
    }
    let train = subsample_labels(&train_all, config.label_fraction, seed)?;
    let class_w = class_weights(dataset, &train, config.task)?;

    let mut store = ParamStore::new();
    let model = DownstreamModel::build(&mut store, &dataset.schema, config, pretrained, seed)?;
    let hyper = AdamHyper::with_lr(config.lr);
    hyper.validate()?;

    let initial = score_stays(dataset, &model, &store, &val, config.task, config.batch_size)?;
    let mut val_history = vec![auprc(&initial)];
    let mut best_auprc = val_history[0];
    let mut best_snapshot = store.snapshot();
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;
    let mut global_step = 0usize;

    for epoch in 1..=config.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64));
        let mut order = train.clone();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            global_step += 1;
            let mut tape = Tape::new();
            let binding = store.bind(&mut tape);
            let stays: Vec<&[Vec<f64>]> = chunk
                .iter()
                .map(|&si| dataset.stays[si].values.as_slice())
                .collect();
            let step = (|| -> Result<()> {
                let (logits, seg_lens) = model.forward_steps(&mut tape, &store, &binding, &stays)?;
                let targets = batch_targets(dataset, chunk, &seg_lens, config.task)?;
                let loss = weighted_ce(&mut tape, logits, &targets, class_w)?;
                let grads = tape.backward(loss)?;
                store.apply_grads(&binding, &grads, &hyper)?;
                Ok(())
            })();
            step.map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("{msg} (diverged at update step {global_step})"))
                }
                other => other,
            })?;
        }

        let scored = score_stays(dataset, &model, &store, &val, config.task, config.batch_size)?;
        let va = auprc(&scored);
        val_history.push(va);
        if va > best_auprc {
            best_auprc = va;
            best_snapshot = store.snapshot();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    store.restore(&best_snapshot)?;
    let scored = score_stays(dataset, &model, &store, &test, config.task, config.batch_size)?;
    let report = FinetuneReport {
        best_epoch,
        val_auprc: val_history,
        test_auprc: auprc(&scored),
        test_auroc: auroc(&scored),
    };
    let ckpt = Checkpoint::from_store(
        ModelKind::Downstream,
        &dataset.schema,
        serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?,
        seed,
        best_epoch,
        best_auprc,
        &store,
    );
    Ok((ckpt, report))
}
