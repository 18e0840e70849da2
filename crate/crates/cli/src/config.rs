//! Experiment configuration: one JSON file plus `--section.key value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use wakejam::attack::AttackConfig;
use wakejam::corpus::CorpusConfig;
use wakejam::detector::{ArchConfig, TrainConfig};
use wakejam::features::FrontendConfig;
use wakejam::gradcheck::GradcheckConfig;
use wakejam::metrics::DecisionConfig;
use wakejam::room::RoomDistribution;

use crate::CliError;

/// Overrides the configured report directory.
pub const REPORT_DIR_ENV: &str = "WAKEJAM_REPORT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub model: PathBuf,
    /// Attack artifact (synth parameters); the rendered WAV sits next to it.
    pub attack: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            model: "model.json".into(),
            attack: "attack.json".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub arch: ArchConfig,
    pub optimizer: TrainConfig,
    /// Weight initialization seed.
    pub init_seed: u64,
    /// Share of training clips held back for early stopping.
    pub validation_fraction: f64,
    /// Threshold grid size for the DET curve.
    pub det_points: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            optimizer: TrainConfig::default(),
            init_seed: 1,
            validation_fraction: 0.1,
            det_points: 41,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub decision: DecisionConfig,
    /// Rooms used when evaluating with `--rooms`; drawn apart from the attack's rooms.
    pub heldout_rooms: RoomDistribution,
    pub baseline_seed: u64,
    /// Baseline loudness when no attack artifact exists to match.
    pub baseline_rms: Option<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            decision: DecisionConfig::default(),
            heldout_rooms: RoomDistribution {
                seed: 1_000_003,
                ..RoomDistribution::default()
            },
            baseline_seed: 7,
            baseline_rms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub paths: Paths,
    pub frontend: FrontendConfig,
    pub corpus: CorpusConfig,
    pub training: TrainingSection,
    pub eval: EvalSection,
    pub attack: AttackConfig,
    /// Distribution for the `rir` command.
    pub rir: RoomDistribution,
    pub gradcheck: GradcheckConfig,
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Sets `path` (dot separated) in `tree`. Unknown keys are left for strict
/// deserialization to reject.
fn set_path(tree: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("override {path}: {} is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Object(Default::default()));
    }
    Err(CliError::Usage(format!("empty override key {path:?}")))
}

/// Parses an override value as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl ExperimentConfig {
    /// Defaults, then the optional file, then `overrides` as `(key, value)`
    /// pairs, then the report-dir environment variable.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut tree = serde_json::to_value(Self::default()).expect("config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let user: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {} is not JSON: {e}", path.display())))?;
            merge(&mut tree, &user);
        }
        for (k, v) in overrides {
            set_path(&mut tree, k, parse_value(v))?;
        }
        let mut cfg: Self =
            serde_json::from_value(tree).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
        if let Ok(dir) = std::env::var(REPORT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.paths.report_dir = dir.into();
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.frontend.validate()?;
        self.corpus.validate()?;
        self.training.arch.validate()?;
        self.training.optimizer.validate()?;
        self.eval.decision.validate()?;
        self.eval.heldout_rooms.validate()?;
        self.attack.validate()?;
        self.rir.validate()?;
        let t = &self.training;
        if !(0.0..1.0).contains(&t.validation_fraction) {
            return Err(CliError::Usage("training.validation_fraction must be in [0, 1)".into()));
        }
        if t.det_points == 0 {
            return Err(CliError::Usage("training.det_points must be at least 1".into()));
        }
        if self.eval.baseline_rms.is_some_and(|r| !(r > 0.0)) {
            return Err(CliError::Usage("eval.baseline_rms must be positive".into()));
        }
        Ok(())
    }

    /// Path of the rendered attack WAV.
    pub fn attack_wav(&self) -> PathBuf {
        self.paths.attack.with_extension("wav")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = ExperimentConfig::load(None, &[]).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let cfg = ExperimentConfig::load(
            None,
            &[
                ("attack.steps".into(), "3".into()),
                ("paths.corpus".into(), "/tmp/x".into()),
                ("eval.baseline_rms".into(), "0.1".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.attack.steps, 3);
        assert_eq!(cfg.paths.corpus, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.eval.baseline_rms, Some(0.1));

        let err = ExperimentConfig::load(None, &[("attack.stepz".into(), "3".into())]).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
        let err = ExperimentConfig::load(None, &[("attack.steps".into(), "0".into())]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn file_keys_are_strict() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"attack": {"alpha": 0.2}}"#).unwrap();
        let cfg = ExperimentConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(cfg.attack.alpha, 0.2);
        assert_eq!(cfg.attack.steps, AttackConfig::default().steps);
        std::fs::write(&path, r#"{"atack": {}}"#).unwrap();
        assert!(ExperimentConfig::load(Some(&path), &[]).is_err());
    }
}
