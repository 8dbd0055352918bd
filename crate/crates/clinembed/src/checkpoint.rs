//! Versioned JSON checkpoints carrying named parameter arrays between
//! pipeline stages.
//!
//! Numbers serialize as shortest round-trip decimal text, so a
//! save → load → save cycle is byte-identical and checkpoints diff cleanly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::tokenizer::FeatureSchema;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// A feature tokenizer (FTT or CBOW product).
    Tokenizer,
    /// Tokenizer plus feature-axis encoder.
    Mlm,
    /// Full fine-tuned predictor.
    Downstream,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub model_kind: ModelKind,
    pub schema_hash: String,
    pub schema: FeatureSchema,
    /// Producer's config, kept as raw JSON for provenance.
    pub config: serde_json::Value,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_val_loss: f64,
    pub params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn from_store(
        model_kind: ModelKind,
        schema: &FeatureSchema,
        config: serde_json::Value,
        seed: u64,
        epochs_run: usize,
        best_val_loss: f64,
        store: &ParamStore,
    ) -> Self {
        let params = store
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Checkpoint {
            schema_version: CHECKPOINT_VERSION,
            model_kind,
            schema_hash: schema.structural_hash(),
            schema: schema.clone(),
            config,
            seed,
            epochs_run,
            best_val_loss,
            params,
        }
    }

    /// Rebuild a parameter store; entry order in the file is the store's
    /// insertion order, so round-trips preserve iteration order too.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for e in &self.params {
            store.add(&e.name, Tensor::from_vec(e.shape.clone(), e.data.clone())?)?;
        }
        Ok(store)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} not supported (expected {CHECKPOINT_VERSION})",
                self.schema_version
            )));
        }
        if self.schema_hash != self.schema.structural_hash() {
            return Err(Error::Schema(
                "checkpoint schema_hash does not match its embedded schema".into(),
            ));
        }
        for e in &self.params {
            if e.shape.iter().product::<usize>() != e.data.len() {
                return Err(Error::Shape(format!(
                    "param '{}': shape {:?} vs {} values",
                    e.name,
                    e.shape,
                    e.data.len()
                )));
            }
            if e.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("param '{}' is non-finite", e.name)));
            }
        }
        Ok(())
    }

    /// Check this checkpoint applies to `active`: structural hashes must
    /// match (statistics may differ).
    pub fn validate_against(&self, active: &FeatureSchema) -> Result<()> {
        if self.schema_hash != active.structural_hash() {
            return Err(Error::Schema(format!(
                "checkpoint schema hash {} does not match active schema {}",
                self.schema_hash,
                active.structural_hash()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("checkpoint serialization: {e}")))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("checkpoint parse: {e}")))?;
        ckpt.validate()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::uniform_init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add("a.w", uniform_init(vec![3, 4], 0.5, &mut rng)).unwrap();
        store.add("a.b", uniform_init(vec![4], 0.5, &mut rng)).unwrap();
        store
    }

    fn sample_checkpoint() -> Checkpoint {
        let schema = FeatureSchema::default_clinical();
        Checkpoint::from_store(
            ModelKind::Tokenizer,
            &schema,
            serde_json::json!({"dim": 4}),
            7,
            12,
            0.25,
            &sample_store(),
        )
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        let ckpt = sample_checkpoint();
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn store_round_trip_preserves_order_and_bits() {
        let store = sample_store();
        let ckpt = sample_checkpoint();
        let back = ckpt.to_store().unwrap();
        let names_a: Vec<&str> = store.names().collect();
        let names_b: Vec<&str> = back.names().collect();
        assert_eq!(names_a, names_b);
        for (name, t) in store.iter() {
            let u = back.get(name).unwrap();
            for (a, b) in t.data().iter().zip(u.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn version_and_hash_mismatches_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let mut ckpt = sample_checkpoint();
        ckpt.schema_version = 99;
        ckpt.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Config(_))));

        let mut ckpt = sample_checkpoint();
        ckpt.schema_hash = "feedfeedfeedfeed".into();
        ckpt.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Schema(_))));

        let ckpt = sample_checkpoint();
        let other = FeatureSchema::new(vec![
            crate::tokenizer::FeatureSpec::numerical("X"),
            crate::tokenizer::FeatureSpec::categorical("Y", 2),
        ])
        .unwrap();
        assert!(matches!(
            ckpt.validate_against(&other),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn unknown_fields_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        let ckpt = sample_checkpoint();
        ckpt.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let patched = text.replacen(
            "\"schema_version\"",
            "\"surprise\": 1,\n  \"schema_version\"",
            1,
        );
        std::fs::write(&path, patched).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Data(_))));
    }
}
