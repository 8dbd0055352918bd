//! Feature schema and per-feature tokenizer.
//!
//! The tokenizer maps one time step's `d` raw clinical features to `d`
//! embedding vectors of dimension `m`: numerical features through a
//! per-feature affine map `x * w + b`, categorical features through a
//! per-feature lookup table `W[code] + b`. A shared `[MASK]` vector backs
//! masked-feature pretraining.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{uniform_init, Binding, ParamStore};
use crate::tensor::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numerical,
    Categorical,
}

/// One clinical feature: identity, kind, and normalization statistics.
/// Statistics are filled from the training split during preparation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<usize>,
}

impl FeatureSpec {
    pub fn numerical(name: &str) -> Self {
        FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::Numerical,
            cardinality: None,
            mean: None,
            std: None,
            mode: None,
        }
    }

    pub fn categorical(name: &str, cardinality: usize) -> Self {
        FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::Categorical,
            cardinality: Some(cardinality),
            mean: None,
            std: None,
            mode: None,
        }
    }
}

/// Ordered list of features; the order defines column layout everywhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self> {
        let schema = FeatureSchema { features };
        schema.validate()?;
        Ok(schema)
    }

    /// The 13 named features of the default clinical set: 8 numerical
    /// vitals and 5 categorical assessments.
    pub fn default_clinical() -> Self {
        let features = vec![
            FeatureSpec::numerical("DBP"),
            FeatureSpec::numerical("FIO"),
            FeatureSpec::numerical("HR"),
            FeatureSpec::numerical("MBP"),
            FeatureSpec::numerical("OS"),
            FeatureSpec::numerical("RR"),
            FeatureSpec::numerical("SBP"),
            FeatureSpec::numerical("Temp"),
            FeatureSpec::categorical("CRR", 2),
            FeatureSpec::categorical("GCST", 13),
            FeatureSpec::categorical("GCSEO", 4),
            FeatureSpec::categorical("GCSMR", 6),
            FeatureSpec::categorical("GCSVR", 5),
        ];
        FeatureSchema { features }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d() < 2 {
            return Err(Error::Schema(format!(
                "schema needs at least 2 features, got {}",
                self.d()
            )));
        }
        if self.numerical_indices().is_empty() || self.categorical_indices().is_empty() {
            return Err(Error::Schema(
                "schema needs at least one numerical and one categorical feature".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for f in &self.features {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature name '{}'", f.name)));
            }
            match f.kind {
                FeatureKind::Numerical => {
                    if f.cardinality.is_some() {
                        return Err(Error::Schema(format!(
                            "numerical feature '{}' must not declare cardinality",
                            f.name
                        )));
                    }
                    if let Some(std) = f.std {
                        if std <= 0.0 {
                            return Err(Error::Schema(format!(
                                "feature '{}' has non-positive std {std}",
                                f.name
                            )));
                        }
                    }
                }
                FeatureKind::Categorical => match f.cardinality {
                    Some(c) if c >= 2 => {}
                    other => {
                        return Err(Error::Schema(format!(
                            "categorical feature '{}' needs cardinality >= 2, got {:?}",
                            f.name, other
                        )))
                    }
                },
            }
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.features.len()
    }

    pub fn numerical_indices(&self) -> Vec<usize> {
        self.features
            .iter()
            .enumerate()
            .filter(|(_, f)| f.kind == FeatureKind::Numerical)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn categorical_indices(&self) -> Vec<usize> {
        self.features
            .iter()
            .enumerate()
            .filter(|(_, f)| f.kind == FeatureKind::Categorical)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn feature(&self, i: usize) -> &FeatureSpec {
        &self.features[i]
    }

    pub fn by_name(&self, name: &str) -> Option<(usize, &FeatureSpec)> {
        self.features
            .iter()
            .enumerate()
            .find(|(_, f)| f.name == name)
    }

    /// Total categorical cardinality and per-feature logit offsets, in
    /// categorical-index order.
    pub fn cat_layout(&self) -> (usize, Vec<(usize, usize)>) {
        let mut offsets = Vec::new();
        let mut total = 0;
        for &k in &self.categorical_indices() {
            let card = self.features[k].cardinality.unwrap();
            offsets.push((k, total));
            total += card;
        }
        (total, offsets)
    }

    /// Hash of the structural part (names, kinds, cardinalities); invariant
    /// to statistics, so checkpoints validate against structure.
    pub fn structural_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for f in &self.features {
            hasher.update(f.name.as_bytes());
            hasher.update(match f.kind {
                FeatureKind::Numerical => b"|num|".as_slice(),
                FeatureKind::Categorical => b"|cat|".as_slice(),
            });
            if let Some(c) = f.cardinality {
                hasher.update(c.to_le_bytes());
            }
            hasher.update(b";");
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parameter names and embedding width for a tokenizer living inside a
/// [`ParamStore`]. All tokenizer parameters share the `tok.` prefix.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub m: usize,
}

pub const TOKENIZER_PREFIX: &str = "tok.";

impl Tokenizer {
    pub fn weight_name(spec: &FeatureSpec) -> String {
        match spec.kind {
            FeatureKind::Numerical => format!("tok.num.{}.w", spec.name),
            FeatureKind::Categorical => format!("tok.cat.{}.w", spec.name),
        }
    }

    pub fn bias_name(spec: &FeatureSpec) -> String {
        match spec.kind {
            FeatureKind::Numerical => format!("tok.num.{}.b", spec.name),
            FeatureKind::Categorical => format!("tok.cat.{}.b", spec.name),
        }
    }

    pub fn mask_name() -> &'static str {
        "tok.mask"
    }

    /// Create tokenizer parameters in `store`, i.i.d. uniform on
    /// `(-1/sqrt(m), +1/sqrt(m))`, deterministically per seed.
    pub fn init(store: &mut ParamStore, schema: &FeatureSchema, m: usize, seed: u64) -> Result<Self> {
        if m < 2 {
            return Err(Error::Config(format!("embedding dim m={m} must be >= 2")));
        }
        schema.validate()?;
        let bound = 1.0 / (m as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for f in &schema.features {
            match f.kind {
                FeatureKind::Numerical => {
                    store.add(&Self::weight_name(f), uniform_init(vec![m], bound, &mut rng))?;
                    store.add(&Self::bias_name(f), uniform_init(vec![m], bound, &mut rng))?;
                }
                FeatureKind::Categorical => {
                    let card = f.cardinality.unwrap();
                    store.add(
                        &Self::weight_name(f),
                        uniform_init(vec![card, m], bound, &mut rng),
                    )?;
                    store.add(&Self::bias_name(f), uniform_init(vec![m], bound, &mut rng))?;
                }
            }
        }
        store.add(Self::mask_name(), uniform_init(vec![m], bound, &mut rng))?;
        Ok(Tokenizer { m })
    }

    /// Width of an existing tokenizer inside a store.
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let mask = store.get(Self::mask_name())?;
        Ok(Tokenizer {
            m: mask.shape()[0],
        })
    }

    /// Embed one time step: returns `d` nodes of shape `[m]` in schema order.
    ///
    /// Numerical feature i: `x[i] * w_i + b_i`. Categorical feature k with
    /// code c: `W_k[c] + b_k`.
    pub fn tokenize(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        binding: &Binding,
        schema: &FeatureSchema,
        x: &[f64],
    ) -> Result<Vec<NodeId>> {
        if x.len() != schema.d() {
            return Err(Error::Schema(format!(
                "feature vector has {} entries, schema has {}",
                x.len(),
                schema.d()
            )));
        }
        let mut out = Vec::with_capacity(schema.d());
        for (i, f) in schema.features.iter().enumerate() {
            let w = binding.id(store, &Self::weight_name(f));
            let b = binding.id(store, &Self::bias_name(f));
            let e = match f.kind {
                FeatureKind::Numerical => {
                    let scaled = tape.scale(w, x[i])?;
                    tape.add(scaled, b)?
                }
                FeatureKind::Categorical => {
                    let code = check_code(x[i], f)?;
                    let row = tape.gather(w, code)?;
                    tape.add(row, b)?
                }
            };
            out.push(e);
        }
        Ok(out)
    }
}

/// Validate a categorical cell value as an in-range integer code.
pub fn check_code(v: f64, spec: &FeatureSpec) -> Result<usize> {
    let card = spec.cardinality.unwrap_or(0);
    if v.fract() != 0.0 || v < 0.0 || (v as usize) >= card {
        return Err(Error::Schema(format!(
            "feature '{}': code {v} out of range 0..{card}",
            spec.name
        )));
    }
    Ok(v as usize)
}
