//! Experiment configuration: JSON with unknown keys rejected, plus dotted
//! `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::analysis::{AssociationConfig, ProbeConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::mats::FinetuneConfig;
use crate::pretrain::PretrainConfig;
use crate::rng::Seeds;
use crate::synth::PhantomSpec;
use crate::volume::PatchGrid;

/// Dataset size and the train/test split used by the supervised stages.
/// Phantoms `[0, train)` train, the next `test` evaluate; association uses
/// every phantom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub phantom: PhantomSpec,
    pub count: usize,
    pub train: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            phantom: PhantomSpec::default(),
            count: 200,
            train: 128,
            test: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub probe: ProbeConfig,
    pub association: AssociationConfig,
    pub seeds: Seeds,
    pub output: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            probe: ProbeConfig::default(),
            association: AssociationConfig::default(),
            seeds: Seeds::default(),
            output: "out".into(),
        }
    }
}

fn at(path: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Config { .. } => e,
        other => Error::Config {
            path: path.into(),
            msg: match other {
                Error::InvalidArgument { msg, .. } => msg,
                e => e.to_string(),
            },
        },
    }
}

fn bad(path: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        msg: msg.into(),
    }
}

impl ExperimentConfig {
    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.data.phantom.shape, self.data.phantom.patch)
    }

    /// Checks every section; errors carry the offending key path.
    pub fn validate(&self) -> Result<()> {
        self.data.phantom.validate().map_err(at("data.phantom"))?;
        let d = &self.data;
        if d.train < 2 {
            return Err(bad("data.train", "need at least 2 training phantoms"));
        }
        if d.test == 0 {
            return Err(bad("data.test", "need at least 1 test phantom"));
        }
        if d.train + d.test > d.count {
            return Err(bad(
                "data.count",
                format!("train + test = {} exceeds count {}", d.train + d.test, d.count),
            ));
        }
        let grid = self.grid().map_err(at("data.phantom"))?;
        self.encoder.validate().map_err(at("encoder"))?;
        self.pretrain.validate().map_err(at("pretrain"))?;
        self.finetune.validate(grid.tokens()).map_err(at("finetune"))?;
        let p = &self.probe;
        if !(p.l2 >= 0.0) {
            return Err(bad("probe.l2", "must be non-negative"));
        }
        if !(p.lr > 0.0) {
            return Err(bad("probe.lr", "must be positive"));
        }
        let a = &self.association;
        if a.repetitions == 0 {
            return Err(bad("association.repetitions", "must be at least 1"));
        }
        if a.folds < 2 {
            return Err(bad("association.folds", "must be at least 2"));
        }
        if a.components == 0 {
            return Err(bad("association.components", "must be at least 1"));
        }
        if !(a.q > 0.0 && a.q < 1.0) {
            return Err(bad("association.q", "must lie in (0, 1)"));
        }
        if !(a.age_alpha > 0.0 && a.age_alpha < 1.0) {
            return Err(bad("association.age_alpha", "must lie in (0, 1)"));
        }
        if self.output.is_empty() {
            return Err(bad("output", "must not be empty"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Hash of the sections that determine a pretrained model: data,
    /// encoder, pretraining and seeds.
    pub fn model_hash(&self) -> String {
        let key = serde_json::json!({
            "data": self.data,
            "encoder": self.encoder,
            "pretrain": self.pretrain,
            "seeds": self.seeds,
        });
        hex::encode(Sha256::digest(serde_json::to_vec(&key).expect("config serializes")))
    }

    /// Parses JSON text; unknown keys and type errors name their path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            msg: e.inner().to_string(),
        })
    }

    fn from_value(v: Value) -> Result<Self> {
        serde_path_to_error::deserialize(v).map_err(|e| Error::Config {
            path: e.path().to_string(),
            msg: e.into_inner().to_string(),
        })
    }

    /// Defaults, then the file at `path` if given, then each `key=value`
    /// override in order; the result is validated.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_json(&text)?
            }
            None => Self::default(),
        };
        let cfg = base.with_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies dotted `key=value` overrides. Values parse as JSON when they
    /// can and are taken as strings otherwise.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }
}

fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| bad(assignment, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(bad(assignment, "empty key"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let path = parts[..=i].join(".");
        node = match node {
            Value::Object(map) => map.get_mut(*part).ok_or_else(|| bad(&path, "unknown key"))?,
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| bad(&path, "expected an array index"))?;
                items.get_mut(idx).ok_or_else(|| bad(&path, "array index out of range"))?
            }
            _ => return Err(bad(&path, "cannot descend into a scalar")),
        };
    }
    *node = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.grid().unwrap().tokens(), 150);
    }

    #[test]
    fn unknown_key_names_path() {
        let err = ExperimentConfig::from_json(r#"{"pretrain": {"mask_ratoi": 0.5}}"#).unwrap_err();
        match err {
            Error::Config { path, msg } => {
                assert_eq!(path, "pretrain.mask_ratoi");
                assert!(msg.contains("mask_ratoi"), "{msg}");
            }
            e => panic!("{e}"),
        }
        let err = ExperimentConfig::from_json(r#"{"encoder": {"dim": "wide"}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "encoder.dim"), "{err}");
    }

    #[test]
    fn overrides() {
        let c = ExperimentConfig::default()
            .with_overrides(&[
                "pretrain.mode=2".into(),
                "finetune.k=5".into(),
                "output=runs/a".into(),
                "data.phantom.shape.1=30".into(),
                "pretrain.base_lr=0.001".into(),
            ])
            .unwrap();
        assert_eq!(c.pretrain.mode, 2);
        assert_eq!(c.finetune.k, 5);
        assert_eq!(c.output, "runs/a");
        assert_eq!(c.data.phantom.shape, [30, 30, 30]);
        assert_eq!(c.pretrain.base_lr, Some(0.001));
        let err = ExperimentConfig::default()
            .with_overrides(&["pretrain.nope=1".into()])
            .unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "pretrain.nope"));
        assert!(ExperimentConfig::default().with_overrides(&["pretrain".into()]).is_err());
    }

    #[test]
    fn validation_paths() {
        let c = ExperimentConfig::default()
            .with_overrides(&["data.train=190".into()])
            .unwrap();
        assert!(matches!(c.validate(), Err(Error::Config { ref path, .. }) if path == "data.count"));
        let c = ExperimentConfig::default()
            .with_overrides(&[
                "pretrain.weights.sd=0".into(),
                "pretrain.weights.pixel=0".into(),
                "pretrain.weights.age=0".into(),
                "pretrain.weights.adv=0".into(),
            ])
            .unwrap();
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("nothing to optimize"), "{err}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let b = a.with_overrides(&["finetune.k=4".into()]).unwrap();
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
