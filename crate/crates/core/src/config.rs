//! Run configuration: a JSON document with every block defaulted, plus
//! dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::model::{apply_variant, ModelConfig, TrainConfig, Variant};
use crate::nn::AdamConfig;
use crate::sim::{NoiseModel, PhantomKind, DEFAULT_ELECTRONIC_VARIANCE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Every phantom is scanned at each of these doses.
    pub doses: Vec<f64>,
    /// Scan each phantom once at a dose drawn from `doses` instead.
    pub mixed: bool,
    pub electronic_variance: f64,
    pub seed: u64,
    pub phantom: PhantomKind,
    pub count: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            doses: vec![1e4],
            mixed: false,
            electronic_variance: DEFAULT_ELECTRONIC_VARIANCE,
            seed: 0,
            phantom: PhantomKind::RandomEllipses,
            count: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBlock {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub precision: Precision,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainBlock {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            lr: 1e-4,
            precision: Precision::F32,
            seed: 0,
            checkpoint_every: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub geometry: FanBeamGeometry,
    pub noise: NoiseConfig,
    pub model: ModelConfig,
    pub variant: Option<Variant>,
    pub train: TrainBlock,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            geometry: FanBeamGeometry::desk(),
            noise: NoiseConfig::default(),
            model: ModelConfig::desk(),
            variant: None,
            train: TrainBlock::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Applies `key=value` where `key` is a dotted path such as
    /// `train.lr` or `geometry.n_views`. The value is parsed as JSON and
    /// falls back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::param("--set", format!("expected key=value, got `{assignment}`")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut node = &mut doc;
        for part in key.split('.') {
            node = match node {
                Value::Object(map) => map.get_mut(part),
                Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                _ => None,
            }
            .ok_or_else(|| Error::Unknown {
                kind: "config key",
                name: key.to_string(),
            })?;
        }
        *node = value;
        *self = serde_json::from_value(doc)?;
        Ok(())
    }

    /// Model configuration with the variant applied.
    pub fn resolved_model(&self) -> ModelConfig {
        match self.variant {
            Some(v) => apply_variant(&self.model, v),
            None => self.model.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            adam: AdamConfig {
                lr: self.train.lr,
                ..AdamConfig::default()
            },
            seed: self.train.seed,
            checkpoint_every: self.train.checkpoint_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.noise.doses.is_empty() {
            return Err(Error::param("noise.doses", "must not be empty"));
        }
        for &d in &self.noise.doses {
            NoiseModel::new(d, self.noise.electronic_variance, self.noise.seed)?;
        }
        if self.noise.count == 0 {
            return Err(Error::param("noise.count", "must be at least 1"));
        }
        self.resolved_model().validate()?;
        self.train_config().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = RunConfig::from_json(r#"{"train": {"epochs": 2}}"#).unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.model, ModelConfig::desk());
    }

    #[test]
    fn unknown_keys_fail() {
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"epoch": 3}}"#).is_err());
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.set("train.lr=0.001").unwrap();
        c.set("noise.doses=[1e5,5e3]").unwrap();
        c.set("noise.phantom=shepp-logan").unwrap();
        c.set("variant=learnable-hp").unwrap();
        c.set("paths.output=out/dir").unwrap();
        c.set("geometry.image_size.0=32").unwrap();
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.noise.doses, vec![1e5, 5e3]);
        assert_eq!(c.noise.phantom, PhantomKind::SheppLogan);
        assert_eq!(c.variant, Some(Variant::LearnableHp));
        assert_eq!(c.paths.output.as_deref(), Some(Path::new("out/dir")));
        assert_eq!(c.geometry.image_size, (32, 64));
        assert!(c.set("train.nope=1").is_err());
        assert!(c.set("train.epochs=many").is_err());
        assert!(c.set("no_equals").is_err());
    }

    #[test]
    fn validation_catches_bad_ranges() {
        let mut c = RunConfig::default();
        c.set("noise.doses=[-1]").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set("train.batch_size=0").unwrap();
        assert!(c.validate().is_err());
    }
}
