//! Experiment configuration.
//!
//! Config files use `key = value` lines grouped under `[section]` headers (a
//! TOML subset). Every key is optional; see `docs/config.md` for the full
//! list. Stage seeds are derived from the top-level `seed` mixed with each
//! section's own `seed`, so changing the top-level seed reseeds every stage.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::MANIFEST;
use crate::rng;
use crate::shifts::ShiftSpec;
use crate::signal::PreprocessConfig;
use crate::synth::{Domain, SyntheticSpec};
use crate::topology::IntegrityConfig;
use crate::training::{Task, TrainConfig};
use crate::uncertainty::McdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Log band powers with a trained linear head.
    Psde,
    /// Randomly initialized, never-trained convolutional encoder with a
    /// trained head.
    NeuralFrozen,
    /// Convolutional encoder and head trained end to end.
    NeuralFull,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 3] = [EncoderKind::Psde, EncoderKind::NeuralFrozen, EncoderKind::NeuralFull];

    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Psde => "psde",
            EncoderKind::NeuralFrozen => "neural_frozen",
            EncoderKind::NeuralFull => "neural_full",
        }
    }

    /// Identifier of the embedding space. End-to-end training gives one
    /// encoder per task.
    pub fn embedding_id(self, task: Task) -> String {
        match self {
            EncoderKind::NeuralFull => format!("neural_full-{task}"),
            other => other.as_str().to_string(),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EncoderKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            Error::Parse(format!(
                "unknown encoder '{s}' (expected psde, neural_frozen or neural_full)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// A dataset directory of `SPB1` files with a manifest.
    Files {
        path: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

/// Recording-level split fractions; the test set takes the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub encoders: Vec<EncoderKind>,
    pub tasks: Vec<Task>,
    pub shifts: Vec<ShiftSpec>,
    /// Write graph edge and vertex lists for every integrity condition.
    pub export_graphs: bool,
    pub data: DataSource,
    /// Out-of-sample data, evaluated without shifts.
    pub domain_b: Option<DataSource>,
    pub split: SplitConfig,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub mcd: McdConfig,
    pub integrity: IntegrityConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            encoders: EncoderKind::ALL.to_vec(),
            tasks: vec![Task::Grade, Task::Age],
            shifts: ShiftSpec::full_grid(0),
            export_graphs: true,
            data: DataSource::default(),
            domain_b: None,
            split: SplitConfig::default(),
            preprocess: PreprocessConfig::default(),
            train: TrainConfig::default(),
            mcd: McdConfig::default(),
            integrity: IntegrityConfig::default(),
        }
    }
}

const STAGE_DATA: u64 = 1;
const STAGE_DATA_B: u64 = 2;
const STAGE_SPLIT: u64 = 3;
const STAGE_TRAIN: u64 = 4;
const STAGE_MCD: u64 = 5;
const STAGE_INTEGRITY: u64 = 6;

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate_values()?;
        Ok(cfg)
    }

    /// Parses `path`; relative data paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::format(path, msg),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for source in std::iter::once(&mut cfg.data).chain(cfg.domain_b.as_mut()) {
            if let DataSource::Files { path } = source {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Normalized text form; parsing it gives back an equal config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    fn validate_values(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.encoders.is_empty() || self.tasks.is_empty() {
            return bad("at least one encoder and one task are required".into());
        }
        for s in &self.shifts {
            s.validate()?;
        }
        let s = &self.split;
        if !(s.train > 0.0 && s.val > 0.0 && s.train + s.val < 1.0) {
            return bad(format!(
                "split fractions train {} / val {} leave no test set",
                s.train, s.val
            ));
        }
        self.mcd.validate()?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        if let Some(DataSource::Synthetic(spec)) = &self.domain_b {
            spec.validate()?;
        }
        Ok(())
    }

    /// Checks values and that referenced dataset directories exist.
    pub fn validate(&self) -> Result<()> {
        self.validate_values()?;
        for source in std::iter::once(&self.data).chain(self.domain_b.as_ref()) {
            if let DataSource::Files { path } = source {
                if !path.join(MANIFEST).is_file() {
                    return Err(Error::format(path, "no manifest.csv in dataset directory"));
                }
            }
        }
        Ok(())
    }

    fn stage_seed(&self, stage: u64, own: u64) -> u64 {
        rng::stream_seed(self.seed, &[stage, own])
    }

    /// The in-sample synthetic spec with its effective seed.
    pub fn synthetic(&self) -> Option<SyntheticSpec> {
        match &self.data {
            DataSource::Synthetic(spec) => Some(SyntheticSpec {
                seed: self.stage_seed(STAGE_DATA, spec.seed),
                ..spec.clone()
            }),
            DataSource::Files { .. } => None,
        }
    }

    pub fn synthetic_b(&self) -> Option<SyntheticSpec> {
        match &self.domain_b {
            Some(DataSource::Synthetic(spec)) => Some(SyntheticSpec {
                seed: self.stage_seed(STAGE_DATA_B, spec.seed),
                domain: Domain::B,
                ..spec.clone()
            }),
            _ => None,
        }
    }

    pub fn split_seed(&self) -> u64 {
        self.stage_seed(STAGE_SPLIT, self.split.seed)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed(STAGE_TRAIN, self.train.seed),
            ..self.train.clone()
        }
    }

    pub fn mcd_config(&self) -> McdConfig {
        McdConfig {
            seed: self.stage_seed(STAGE_MCD, self.mcd.seed),
            ..self.mcd.clone()
        }
    }

    pub fn integrity_config(&self) -> IntegrityConfig {
        IntegrityConfig {
            seed: self.stage_seed(STAGE_INTEGRITY, self.integrity.seed),
            ..self.integrity.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.shifts.len(), 13);
        assert_eq!(cfg.shifts[0], ShiftSpec::NoShift);
    }

    #[test]
    fn sections_and_overrides() {
        let text = r#"
seed = 9
encoders = ["psde", "neural_full"]
tasks = ["grade"]
shifts = ["NONE", "QP(12)", "BN(sigma=0.1,seed=3)"]

[data]
kind = "synthetic"
n_recordings = 20
grade_effect = 0.5

[domain_b]
kind = "synthetic"
n_recordings = 8

[train]
max_epochs = 40
optimizer = "sgd_cyclic"

[integrity]
method = "exact2d"
mode = "per-recording"
"#;
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.encoders, vec![EncoderKind::Psde, EncoderKind::NeuralFull]);
        assert_eq!(cfg.shifts[2], ShiftSpec::BroadbandNoise { sigma: 0.1, seed: 3 });
        let spec = cfg.synthetic().unwrap();
        assert_eq!((spec.n_recordings, spec.grade_effect), (20, 0.5));
        assert_eq!(cfg.synthetic_b().unwrap().domain, Domain::B);
        assert_eq!(cfg.train.max_epochs, 40);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.integrity.mode, crate::topology::IntegrityMode::PerRecording);
    }

    #[test]
    fn normalized_form_round_trips() {
        let text = "seed = 3\nshifts = [\"BP(1,25)\", \"IN(sigma=0.01,seed=0)\"]\n[mcd]\nrepeats = 7\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
        let full = ExperimentConfig {
            domain_b: Some(DataSource::Files {
                path: "elsewhere".into(),
            }),
            out: Some("runs/x".into()),
            ..ExperimentConfig::default()
        };
        assert_eq!(ExperimentConfig::parse(&full.to_toml().unwrap()).unwrap(), full);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::parse("unknown_key = 1").is_err());
        assert!(ExperimentConfig::parse("shifts = [\"QP(7)\"]").is_err());
        assert!(ExperimentConfig::parse("encoders = []").is_err());
        assert!(ExperimentConfig::parse("[split]\ntrain = 0.9\nval = 0.2").is_err());
        assert!(ExperimentConfig::parse("seed = \"x\"").is_err());
        assert!(ExperimentConfig::parse("[data]\nkind = \"synthetic\"\nbogus = 1").is_err());
        assert!(ExperimentConfig::parse("[train]\nmax_epoch = 1").is_err());
        let missing = "[data]\nkind = \"files\"\npath = \"/nonexistent/dir\"";
        assert!(ExperimentConfig::parse(missing).unwrap().validate().is_err());
    }

    #[test]
    fn stage_seeds_follow_the_top_level_seed() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            seed: 1,
            ..ExperimentConfig::default()
        };
        assert_ne!(a.train_config().seed, b.train_config().seed);
        assert_ne!(a.mcd_config().seed, a.train_config().seed);
        assert_eq!(a.train_config().seed, ExperimentConfig::default().train_config().seed);
    }
}
