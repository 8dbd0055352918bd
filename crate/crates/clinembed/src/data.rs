//! Clinical time-series data: synthetic generation, preprocessing
//! (missingness filter, imputation, normalization), splits, and CSV I/O.
//!
//! The generator plants a correlation structure that mirrors known clinical
//! couplings — vitals that move together ({Temp, RR, HR}, the blood
//! pressures), oxygen saturation opposing inspired-oxygen fraction, and
//! consciousness scores that discretize one latent factor — so that what a
//! trained model should rediscover is known ahead of time.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{check_code, FeatureKind, FeatureSchema};

/// One ICU stay: a `T × d` grid of feature values with a missingness mask
/// and optional labels. Missing cells hold NaN until imputation.
#[derive(Debug, Clone, PartialEq)]
pub struct StayRecord {
    pub stay_id: u64,
    /// T rows of d values; masked entries are NaN.
    pub values: Vec<Vec<f64>>,
    pub missing: Vec<Vec<bool>>,
    pub per_step_labels: Option<Vec<bool>>,
    pub stay_label: Option<bool>,
}

impl StayRecord {
    pub fn steps(&self) -> usize {
        self.values.len()
    }
}

/// A set of stays under one schema. `normalized` guards against running
/// standardization twice.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub stays: Vec<StayRecord>,
    pub normalized: bool,
}

/// Split membership derived from the stay id alone, so a stay can never
/// straddle splits and row order is irrelevant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

const SPLIT_SALT: u64 = 0x6b9d_3c41_a752_e801;

/// FNV-1a over the salted stay id.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn split_of(stay_id: u64) -> Split {
    let mut buf = [0u8; 16];
    buf[..8].copy_from_slice(&stay_id.to_le_bytes());
    buf[8..].copy_from_slice(&SPLIT_SALT.to_le_bytes());
    match fnv1a(&buf) % 100 {
        0..=69 => Split::Train,
        70..=84 => Split::Val,
        _ => Split::Test,
    }
}

/// splitmix64-style mixing for deriving independent RNG streams.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Dataset {
    pub fn new(schema: FeatureSchema, stays: Vec<StayRecord>) -> Result<Self> {
        let ds = Dataset {
            schema,
            stays,
            normalized: false,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let d = self.schema.d();
        for stay in &self.stays {
            if stay.steps() == 0 {
                return Err(Error::Data(format!("stay {} has no steps", stay.stay_id)));
            }
            if stay.missing.len() != stay.steps() {
                return Err(Error::Data(format!("stay {} mask/value mismatch", stay.stay_id)));
            }
            for (row, mask) in stay.values.iter().zip(&stay.missing) {
                if row.len() != d || mask.len() != d {
                    return Err(Error::Data(format!(
                        "stay {} row width != {d}",
                        stay.stay_id
                    )));
                }
                for (j, (v, m)) in row.iter().zip(mask).enumerate() {
                    if *m != v.is_nan() {
                        return Err(Error::Data(format!(
                            "stay {} feature {j}: mask disagrees with NaN sentinel",
                            stay.stay_id
                        )));
                    }
                    let f = self.schema.feature(j);
                    if !m && f.kind == FeatureKind::Categorical {
                        check_code(*v, f)?;
                    }
                }
            }
            if let Some(labels) = &stay.per_step_labels {
                if labels.len() != stay.steps() {
                    return Err(Error::Data(format!(
                        "stay {} has {} labels for {} steps",
                        stay.stay_id,
                        labels.len(),
                        stay.steps()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        self.stays.iter().map(|s| s.steps()).sum()
    }

    pub fn stay_indices(&self, split: Split) -> Vec<usize> {
        self.stays
            .iter()
            .enumerate()
            .filter(|(_, s)| split_of(s.stay_id) == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Fit per-feature statistics (mean/std/mode) from the training split
    /// and store them in the schema. Standard deviation is the population
    /// form; mode ties resolve to the lowest code.
    pub fn fit_stats(&mut self) -> Result<()> {
        let train = self.stay_indices(Split::Train);
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let d = self.schema.d();
        for j in 0..d {
            let kind = self.schema.feature(j).kind;
            match kind {
                FeatureKind::Numerical => {
                    let mut sum = 0.0;
                    let mut count = 0usize;
                    for &i in &train {
                        for row in &self.stays[i].values {
                            if !row[j].is_nan() {
                                sum += row[j];
                                count += 1;
                            }
                        }
                    }
                    if count == 0 {
                        return Err(Error::Schema(format!(
                            "feature '{}' has no observed training values",
                            self.schema.feature(j).name
                        )));
                    }
                    let mean = sum / count as f64;
                    let mut ss = 0.0;
                    for &i in &train {
                        for row in &self.stays[i].values {
                            if !row[j].is_nan() {
                                ss += (row[j] - mean) * (row[j] - mean);
                            }
                        }
                    }
                    let std = (ss / count as f64).sqrt();
                    let f = &mut self.schema.features[j];
                    f.mean = Some(mean);
                    f.std = Some(std);
                }
                FeatureKind::Categorical => {
                    let card = self.schema.feature(j).cardinality.unwrap();
                    let mut counts = vec![0usize; card];
                    for &i in &train {
                        for row in &self.stays[i].values {
                            if !row[j].is_nan() {
                                counts[row[j] as usize] += 1;
                            }
                        }
                    }
                    if counts.iter().all(|c| *c == 0) {
                        return Err(Error::Schema(format!(
                            "feature '{}' has no observed training values",
                            self.schema.feature(j).name
                        )));
                    }
                    let mode = counts
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                        .map(|(c, _)| c)
                        .unwrap();
                    self.schema.features[j].mode = Some(mode);
                }
            }
        }
        Ok(())
    }

    fn require_stats(&self) -> Result<()> {
        for f in &self.schema.features {
            let ok = match f.kind {
                FeatureKind::Numerical => f.mean.is_some() && f.std.is_some(),
                FeatureKind::Categorical => f.mode.is_some(),
            };
            if !ok {
                return Err(Error::Schema(format!(
                    "feature '{}' has no fitted statistics; run fit_stats first",
                    f.name
                )));
            }
        }
        Ok(())
    }

    /// Fill every masked cell with the training mean (numerical) or mode
    /// (categorical). The mask itself is retained.
    pub fn impute(&mut self) -> Result<()> {
        self.require_stats()?;
        let fills: Vec<f64> = self
            .schema
            .features
            .iter()
            .map(|f| match f.kind {
                FeatureKind::Numerical => f.mean.unwrap(),
                FeatureKind::Categorical => f.mode.unwrap() as f64,
            })
            .collect();
        for stay in &mut self.stays {
            for (row, mask) in stay.values.iter_mut().zip(&stay.missing) {
                for (j, v) in row.iter_mut().enumerate() {
                    if mask[j] {
                        *v = fills[j];
                    }
                }
            }
        }
        Ok(())
    }

    /// Standardize numerical columns with training statistics; categorical
    /// codes pass through. Refuses to run twice.
    pub fn normalize(&mut self) -> Result<()> {
        if self.normalized {
            return Err(Error::Contract("dataset is already normalized".into()));
        }
        self.require_stats()?;
        for j in self.schema.numerical_indices() {
            let f = self.schema.feature(j);
            let (mean, std) = (f.mean.unwrap(), f.std.unwrap());
            if std == 0.0 {
                return Err(Error::Schema(format!(
                    "feature '{}' has zero training std",
                    f.name
                )));
            }
            for stay in &mut self.stays {
                for row in &mut stay.values {
                    if !row[j].is_nan() {
                        row[j] = (row[j] - mean) / std;
                    }
                }
            }
        }
        self.normalized = true;
        Ok(())
    }

    /// Training entry points call this: values must be imputed and
    /// normalized before any model sees them.
    pub fn require_preprocessed(&self) -> Result<()> {
        if !self.normalized {
            return Err(Error::Contract(
                "training needs an imputed, normalized dataset".into(),
            ));
        }
        for stay in &self.stays {
            for row in &stay.values {
                if row.iter().any(|v| v.is_nan()) {
                    return Err(Error::Contract(format!(
                        "stay {} still has unimputed cells",
                        stay.stay_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Missingness threshold scaled from 15-of-18 to a `d`-feature schema.
pub fn default_max_missing(d: usize) -> usize {
    15 * d / 18
}

/// The self-supervised sample pool: `(stay index, step index)` for every
/// step with at most `max_missing` missing features. Fine-tuning keeps all
/// steps; only this pool shrinks.
pub fn filter_steps(dataset: &Dataset, max_missing: usize) -> Vec<(usize, usize)> {
    let mut pool = Vec::new();
    for (i, stay) in dataset.stays.iter().enumerate() {
        for (t, mask) in stay.missing.iter().enumerate() {
            if mask.iter().filter(|m| **m).count() <= max_missing {
                pool.push((i, t));
            }
        }
    }
    pool
}

/// Pearson correlation over paired samples.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

// ── Synthetic generator ────────────────────────────────────────────────

/// Loading of one numerical feature on one latent factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Loading {
    pub feature: String,
    pub factor: usize,
    pub weight: f64,
}

/// Per-step event model: logit = Σ num_weights·z + Σ cat_weights[code] + b0,
/// with b0 tuned to hit the prevalence target. Categorical weight vectors
/// are indexed by code and deliberately non-monotone, so code identity
/// carries information that the raw code number does not expose linearly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRule {
    pub num_weights: Vec<(String, f64)>,
    pub cat_weights: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n_stays: usize,
    pub t_min: usize,
    pub t_max: usize,
    /// AR(1) coefficient for the latent factors.
    pub rho: f64,
    /// Independent noise added to each numerical feature, in z-units.
    pub noise: f64,
    /// Noise on the latent copies that categorical features discretize.
    pub cat_noise: f64,
    pub prevalence: f64,
    pub missing_rate: f64,
    pub loadings: Vec<Loading>,
    pub label_rule: LabelRule,
    pub seed: u64,
}

impl GeneratorSpec {
    /// Default planted structure over the 13-feature clinical schema:
    /// factor 0 drives {Temp, RR, HR}, factor 1 the pressures
    /// {SBP, DBP, MBP} and capillary refill, factor 2 pushes FIO up and OS
    /// down, factor 3 is consciousness (GCS bins).
    pub fn default_with(n_stays: usize, seed: u64) -> Self {
        let loadings = [
            ("Temp", 0, 1.0),
            ("RR", 0, 1.0),
            ("HR", 0, 1.0),
            ("SBP", 1, 1.0),
            ("DBP", 1, 1.0),
            ("MBP", 1, 1.0),
            ("OS", 2, -1.0),
            ("FIO", 2, 1.0),
        ]
        .into_iter()
        .map(|(feature, factor, weight)| Loading {
            feature: feature.to_string(),
            factor,
            weight,
        })
        .collect();
        let num_weights = [
            ("HR", 0.5),
            ("RR", 0.45),
            ("Temp", 0.35),
            ("OS", -0.55),
            ("FIO", 0.55),
            ("SBP", -0.45),
            ("MBP", -0.35),
            ("DBP", -0.25),
        ]
        .into_iter()
        .map(|(n, w)| (n.to_string(), w))
        .collect();
        let cat_weights = vec![
            ("CRR".to_string(), vec![-0.1, 0.7]),
            ("GCSEO".to_string(), vec![0.8, -0.5, 0.4, -0.6]),
            ("GCSMR".to_string(), vec![0.7, -0.5, 0.5, -0.4, 0.4, -0.7]),
            ("GCSVR".to_string(), vec![0.6, -0.5, 0.5, -0.5, 0.4]),
            ("GCST".to_string(), vec![0.0; 13]),
        ];
        GeneratorSpec {
            n_stays,
            t_min: 16,
            t_max: 48,
            rho: 0.8,
            noise: 0.65,
            cat_noise: 0.3,
            prevalence: 0.1,
            missing_rate: 0.3,
            loadings,
            label_rule: LabelRule {
                num_weights,
                cat_weights,
            },
            seed,
        }
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        if self.n_stays == 0 {
            return Err(Error::Config("n_stays must be positive".into()));
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            return Err(Error::Config(format!(
                "bad step range {}..={}",
                self.t_min, self.t_max
            )));
        }
        if !(self.prevalence > 0.0 && self.prevalence < 0.5) {
            return Err(Error::Config(format!(
                "prevalence {} outside (0, 0.5)",
                self.prevalence
            )));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config(format!(
                "missing rate {} outside [0, 1)",
                self.missing_rate
            )));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} outside [0, 1)", self.rho)));
        }
        for l in &self.loadings {
            match schema.by_name(&l.feature) {
                Some((_, f)) if f.kind == FeatureKind::Numerical => {}
                _ => {
                    return Err(Error::Config(format!(
                        "loading on unknown numerical feature '{}'",
                        l.feature
                    )))
                }
            }
            if l.factor >= N_FACTORS {
                return Err(Error::Config(format!(
                    "factor index {} out of range",
                    l.factor
                )));
            }
        }
        for (name, w) in &self.label_rule.num_weights {
            match schema.by_name(name) {
                Some((_, f)) if f.kind == FeatureKind::Numerical => {}
                _ => {
                    return Err(Error::Config(format!(
                        "label weight on unknown numerical feature '{name}'"
                    )))
                }
            }
            if !w.is_finite() {
                return Err(Error::Config(format!("non-finite weight on '{name}'")));
            }
        }
        for (name, ws) in &self.label_rule.cat_weights {
            match schema.by_name(name) {
                Some((_, f)) if f.kind == FeatureKind::Categorical => {
                    if ws.len() != f.cardinality.unwrap() {
                        return Err(Error::Config(format!(
                            "'{name}' has {} codes but {} label weights",
                            f.cardinality.unwrap(),
                            ws.len()
                        )));
                    }
                }
                _ => {
                    return Err(Error::Config(format!(
                        "label weights on unknown categorical feature '{name}'"
                    )))
                }
            }
        }
        Ok(())
    }
}

const N_FACTORS: usize = 4;
/// Label window: a stay is positive if any event occurs in its first 48
/// steps (hours).
pub const STAY_WINDOW: usize = 48;

/// Physical location/scale per numerical feature, applied after the latent
/// z-space values are formed. These only dress the data; labels and planted
/// correlations live in z-space.
fn physical_stats(name: &str) -> (f64, f64) {
    match name {
        "DBP" => (62.0, 12.0),
        "FIO" => (0.40, 0.18),
        "HR" => (86.0, 16.0),
        "MBP" => (78.0, 13.0),
        "OS" => (96.5, 2.8),
        "RR" => (19.0, 5.5),
        "SBP" => (121.0, 18.0),
        "Temp" => (36.9, 0.8),
        _ => (0.0, 1.0),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Discretize a latent value by ascending thresholds.
fn bin(z: f64, thresholds: &[f64]) -> usize {
    thresholds.iter().filter(|t| z >= **t).count()
}

/// Generate a labeled synthetic dataset over the default clinical schema.
pub fn generate_synthetic(spec: &GeneratorSpec) -> Result<Dataset> {
    let schema = FeatureSchema::default_clinical();
    spec.validate(&schema)?;
    let d = schema.d();

    // resolve loading / weight names once
    let mut num_loadings: Vec<Vec<(usize, f64)>> = vec![Vec::new(); d];
    for l in &spec.loadings {
        let (j, _) = schema.by_name(&l.feature).unwrap();
        num_loadings[j].push((l.factor, l.weight));
    }
    let mut num_w = vec![0.0; d];
    for (name, w) in &spec.label_rule.num_weights {
        num_w[schema.by_name(name).unwrap().0] = *w;
    }
    let mut cat_w: Vec<Option<&[f64]>> = vec![None; d];
    for (name, ws) in &spec.label_rule.cat_weights {
        cat_w[schema.by_name(name).unwrap().0] = Some(ws);
    }
    let idx = |name: &str| schema.by_name(name).unwrap().0;
    let (i_crr, i_gcst) = (idx("CRR"), idx("GCST"));
    let (i_eo, i_mr, i_vr) = (idx("GCSEO"), idx("GCSMR"), idx("GCSVR"));

    let mut stays = Vec::with_capacity(spec.n_stays);
    let mut base_logits: Vec<Vec<f64>> = Vec::with_capacity(spec.n_stays);
    for s in 0..spec.n_stays {
        let stay_id = s as u64 + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, stay_id));
        let t_len = rng.gen_range(spec.t_min..=spec.t_max);

        // AR(1) latent factors, stationary unit variance
        let mut factors = vec![[0.0f64; N_FACTORS]; t_len];
        for f in 0..N_FACTORS {
            let mut cur: f64 = rng.sample(rand_distr::StandardNormal);
            factors[0][f] = cur;
            let innov = (1.0 - spec.rho * spec.rho).sqrt();
            for t in 1..t_len {
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                cur = spec.rho * cur + innov * e;
                factors[t][f] = cur;
            }
        }

        let mut z = vec![vec![0.0f64; d]; t_len];
        let mut values = vec![vec![0.0f64; d]; t_len];
        for t in 0..t_len {
            for j in schema.numerical_indices() {
                let mut v = 0.0;
                for &(f, w) in &num_loadings[j] {
                    v += w * factors[t][f];
                }
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                v += spec.noise * e;
                z[t][j] = v;
                let (mu, sd) = physical_stats(&schema.feature(j).name);
                values[t][j] = mu + sd * v;
            }
            // capillary refill: delayed when the pressure factor is low
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            let crr = ((factors[t][1] + spec.cat_noise * e) < -0.8) as usize;
            // GCS sub-scores discretize the consciousness factor; the total
            // is the sum of sub-score codes
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            let eo = bin(factors[t][3] + spec.cat_noise * e, &[-1.5, -0.5, 0.5]);
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            let mr = bin(
                factors[t][3] + spec.cat_noise * e,
                &[-2.0, -1.25, -0.5, 0.25, 1.0],
            );
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            let vr = bin(
                factors[t][3] + spec.cat_noise * e,
                &[-1.75, -0.875, 0.0, 0.875],
            );
            values[t][i_crr] = crr as f64;
            values[t][i_eo] = eo as f64;
            values[t][i_mr] = mr as f64;
            values[t][i_vr] = vr as f64;
            values[t][i_gcst] = (eo + mr + vr) as f64;
        }

        // event logits from the true (pre-missingness) state
        let mut logits = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut logit = 0.0;
            for j in schema.numerical_indices() {
                logit += num_w[j] * z[t][j];
            }
            for j in schema.categorical_indices() {
                if let Some(ws) = cat_w[j] {
                    logit += ws[values[t][j] as usize];
                }
            }
            logits.push(logit);
        }
        base_logits.push(logits);

        // uniform missingness over cells
        let mut miss_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed ^ 0x4d49, stay_id));
        let mut missing = vec![vec![false; d]; t_len];
        for t in 0..t_len {
            for j in 0..d {
                if miss_rng.gen::<f64>() < spec.missing_rate {
                    missing[t][j] = true;
                    values[t][j] = f64::NAN;
                }
            }
        }

        stays.push(StayRecord {
            stay_id,
            values,
            missing,
            per_step_labels: None,
            stay_label: None,
        });
    }

    // bisect the intercept so mean event probability hits the target
    let mean_prob = |b0: f64| {
        let mut sum = 0.0;
        let mut n = 0usize;
        for logits in &base_logits {
            for l in logits {
                sum += sigmoid(l + b0);
                n += 1;
            }
        }
        sum / n as f64
    };
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    if mean_prob(lo) > spec.prevalence || mean_prob(hi) < spec.prevalence {
        return Err(Error::Config(format!(
            "prevalence {} unreachable with given label rule",
            spec.prevalence
        )));
    }
    let mut b0 = 0.0;
    for _ in 0..100 {
        b0 = 0.5 * (lo + hi);
        if mean_prob(b0) < spec.prevalence {
            lo = b0;
        } else {
            hi = b0;
        }
    }
    if (mean_prob(b0) - spec.prevalence).abs() > 1e-3 {
        return Err(Error::Config(format!(
            "prevalence {} unreachable after bisection",
            spec.prevalence
        )));
    }

    for (stay, logits) in stays.iter_mut().zip(&base_logits) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed ^ 0x4c41, stay.stay_id));
        let labels: Vec<bool> = logits.iter().map(|l| rng.gen_bool(sigmoid(l + b0))).collect();
        let window = labels.len().min(STAY_WINDOW);
        stay.stay_label = Some(labels[..window].iter().any(|l| *l));
        stay.per_step_labels = Some(labels);
    }

    Dataset::new(schema, stays)
}

// ── CSV I/O ────────────────────────────────────────────────────────────

fn fmt_cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Write one row per (stay, step): id, step index, features in schema
/// order, then per-step and stay labels. Missing cells are empty; floats
/// print in shortest round-trip form.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let names: Vec<&str> = dataset.schema.features.iter().map(|f| f.name.as_str()).collect();
    writeln!(out, "stay_id,step_index,{},step_label,stay_label", names.join(","))?;
    for stay in &dataset.stays {
        for (t, row) in stay.values.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| fmt_cell(*v)).collect();
            let step_label = stay
                .per_step_labels
                .as_ref()
                .map(|l| (l[t] as u8).to_string())
                .unwrap_or_default();
            let stay_label = stay
                .stay_label
                .map(|l| (l as u8).to_string())
                .unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{}",
                stay.stay_id,
                t,
                cells.join(","),
                step_label,
                stay_label
            )?;
        }
    }
    Ok(())
}

/// Load a CSV written by [`write_csv`] (or hand-made in the same layout).
/// Rows may arrive in any order; stays come back sorted by id with steps
/// `0..T` contiguous.
pub fn load_csv(path: &Path, schema: &FeatureSchema) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Data("empty CSV".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let expect: Vec<String> = std::iter::once("stay_id".to_string())
        .chain(std::iter::once("step_index".to_string()))
        .chain(schema.features.iter().map(|f| f.name.clone()))
        .chain(["step_label".to_string(), "stay_label".to_string()])
        .collect();
    if cols.len() != expect.len() {
        return Err(Error::Schema(format!(
            "CSV has {} columns, schema expects {}",
            cols.len(),
            expect.len()
        )));
    }
    for (got, want) in cols.iter().zip(&expect) {
        if got != want {
            return Err(Error::Schema(format!(
                "unknown column '{got}' (expected '{want}')"
            )));
        }
    }

    let d = schema.d();
    type RawRow = (Vec<f64>, Vec<bool>, Option<bool>, Option<bool>);
    let mut by_stay: BTreeMap<u64, BTreeMap<usize, RawRow>> = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != expect.len() {
            return Err(Error::Data(format!("line {}: wrong cell count", lineno + 2)));
        }
        let stay_id: u64 = cells[0]
            .parse()
            .map_err(|_| Error::Data(format!("line {}: bad stay_id", lineno + 2)))?;
        let step: usize = cells[1]
            .parse()
            .map_err(|_| Error::Data(format!("line {}: bad step_index", lineno + 2)))?;
        let mut row = Vec::with_capacity(d);
        let mut mask = Vec::with_capacity(d);
        for (j, cell) in cells[2..2 + d].iter().enumerate() {
            if cell.is_empty() {
                row.push(f64::NAN);
                mask.push(true);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Data(format!("line {}: bad value '{cell}'", lineno + 2))
                })?;
                let f = schema.feature(j);
                if f.kind == FeatureKind::Categorical {
                    check_code(v, f)?;
                }
                row.push(v);
                mask.push(false);
            }
        }
        let parse_label = |cell: &str, what: &str| -> Result<Option<bool>> {
            match cell {
                "" => Ok(None),
                "0" => Ok(Some(false)),
                "1" => Ok(Some(true)),
                other => Err(Error::Data(format!(
                    "line {}: bad {what} '{other}'",
                    lineno + 2
                ))),
            }
        };
        let step_label = parse_label(cells[2 + d], "step_label")?;
        let stay_label = parse_label(cells[3 + d], "stay_label")?;
        let prev = by_stay
            .entry(stay_id)
            .or_default()
            .insert(step, (row, mask, step_label, stay_label));
        if prev.is_some() {
            return Err(Error::Data(format!(
                "stay {stay_id}: duplicate step {step}"
            )));
        }
    }

    let mut stays = Vec::with_capacity(by_stay.len());
    for (stay_id, steps) in by_stay {
        let t_len = steps.len();
        if *steps.keys().next_back().unwrap() != t_len - 1 {
            return Err(Error::Data(format!(
                "stay {stay_id}: step indices not contiguous from 0"
            )));
        }
        let mut values = Vec::with_capacity(t_len);
        let mut missing = Vec::with_capacity(t_len);
        let mut step_labels = Vec::with_capacity(t_len);
        let mut stay_label = None;
        let mut labelled = 0usize;
        for (_, (row, mask, sl, gl)) in steps {
            values.push(row);
            missing.push(mask);
            if let Some(l) = sl {
                step_labels.push(l);
                labelled += 1;
            }
            if let Some(g) = gl {
                if *stay_label.get_or_insert(g) != g {
                    return Err(Error::Data(format!(
                        "stay {stay_id}: inconsistent stay_label"
                    )));
                }
            }
        }
        if labelled != 0 && labelled != t_len {
            return Err(Error::Data(format!(
                "stay {stay_id}: step labels must cover all steps or none"
            )));
        }
        stays.push(StayRecord {
            stay_id,
            values,
            missing,
            per_step_labels: (labelled == t_len).then_some(step_labels),
            stay_label,
        });
    }
    if stays.is_empty() {
        return Err(Error::Data("CSV contains no rows".into()));
    }
    Dataset::new(schema.clone(), stays)
}

/// Dataset summary written next to generated CSVs.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub n_stays: usize,
    pub n_steps: usize,
    pub step_prevalence: f64,
    pub stay_prevalence: f64,
    pub split_counts: [usize; 3],
    pub schema_hash: String,
}

impl Manifest {
    pub fn describe(dataset: &Dataset) -> Self {
        let n_steps = dataset.n_steps();
        let mut pos_steps = 0usize;
        let mut pos_stays = 0usize;
        for stay in &dataset.stays {
            if let Some(labels) = &stay.per_step_labels {
                pos_steps += labels.iter().filter(|l| **l).count();
            }
            if stay.stay_label == Some(true) {
                pos_stays += 1;
            }
        }
        Manifest {
            n_stays: dataset.stays.len(),
            n_steps,
            step_prevalence: pos_steps as f64 / n_steps as f64,
            stay_prevalence: pos_stays as f64 / dataset.stays.len() as f64,
            split_counts: [
                dataset.stay_indices(Split::Train).len(),
                dataset.stay_indices(Split::Val).len(),
                dataset.stay_indices(Split::Test).len(),
            ],
            schema_hash: dataset.schema.structural_hash(),
        }
    }
}
