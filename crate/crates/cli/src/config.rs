//! Declarative experiment configuration (TOML) with dotted-key overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use relab_core::attacks::AttackConfig;
use relab_core::metrics::Shrinkage;
use relab_core::nn::{ArchKind, ArchSpec, DecoderConfig, TrainConfig, DEFAULT_LATENT_DIM};
use relab_core::{ErasePolicy, Error as CoreError, FillStrategy, Geometry};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub identities: usize,
    pub samples_per_identity: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Private samples per identity held out for natural accuracy.
    pub test_per_identity: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            identities: 32,
            samples_per_identity: 20,
            width: 32,
            height: 32,
            channels: 3,
            test_per_identity: 4,
        }
    }
}

impl DatasetConfig {
    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.width, self.height, self.channels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub arch: ArchKind,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderSection {
    pub latent_dim: usize,
    #[serde(flatten)]
    pub fit: DecoderConfig,
}

impl Default for DecoderSection {
    fn default() -> Self {
        DecoderSection {
            latent_dim: DEFAULT_LATENT_DIM,
            fit: DecoderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSection {
    #[serde(flatten)]
    pub attack: AttackConfig,
    /// Independent reconstructions per label.
    pub draws: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub knn: bool,
    pub ffd: bool,
    pub featspace: bool,
    /// Relate the run to an undefended baseline with the same seed.
    pub delta: bool,
    pub shrinkage: Shrinkage,
    /// Identities listed individually in `projection.csv`.
    pub featspace_identities: usize,
    /// Occlusion producing the RE-private group.
    pub featspace_policy: ErasePolicy,
}

/// Random erasure of 10 to 50 percent of each image, filled with uniform noise.
///
/// Mean-valued fills cost this synthetic data far more natural accuracy at
/// large areas than noise does.
pub fn default_policy() -> ErasePolicy {
    ErasePolicy::random_erase(0.1, 0.5).with_fill(FillStrategy::uniform())
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            knn: true,
            ffd: true,
            featspace: true,
            delta: true,
            shrinkage: Shrinkage::Auto,
            featspace_identities: 3,
            featspace_policy: default_policy(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Every sample erases exactly the swept fraction.
    Point,
    /// Fractions drawn from `[a_lo, value]`.
    Range,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub values: Vec<f64>,
    pub mode: SweepMode,
    /// Largest tolerated drop of median natural accuracy, in points.
    pub max_acc_drop: f64,
    /// Smallest required drop of median attack accuracy, in points.
    pub min_attack_drop: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            values: vec![0.0, 0.2, 0.5],
            mode: SweepMode::Point,
            max_acc_drop: 15.0,
            min_attack_drop: 30.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub levels: Vec<f64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig { levels: vec![0.0, 0.4] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub repeats: usize,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub target: ClassifierConfig,
    pub eval: ClassifierConfig,
    pub decoder: DecoderSection,
    pub policy: ErasePolicy,
    pub attack: AttackSection,
    pub metrics: MetricsConfig,
    pub sweep: SweepConfig,
    pub compare: CompareConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        ExperimentConfig {
            seed: 1,
            repeats: 3,
            out: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            target: ClassifierConfig {
                arch: ArchKind::ClassifierSmall,
                train: train.clone(),
            },
            eval: ClassifierConfig {
                arch: ArchKind::ClassifierEval,
                train,
            },
            decoder: DecoderSection::default(),
            policy: default_policy(),
            attack: AttackSection {
                attack: AttackConfig {
                    restarts: 2,
                    steps: 200,
                    adaptive_policy: default_policy(),
                    ..AttackConfig::default()
                },
                draws: 4,
            },
            metrics: MetricsConfig::default(),
            sweep: SweepConfig::default(),
            compare: CompareConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    CoreError::Config(msg.into()).into()
}

fn classifier_arch(kind: ArchKind, g: Geometry, classes: usize) -> Result<ArchSpec> {
    Ok(match kind {
        ArchKind::ClassifierSmall => ArchSpec::classifier_small(g, classes),
        ArchKind::ClassifierEval => ArchSpec::classifier_eval(g, classes),
        other => return Err(config_err(format!("{other:?} is not a classifier architecture"))),
    })
}

impl ExperimentConfig {
    /// Reads a TOML file; missing sections take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        Self::from_value(value)
    }

    fn from_value(overlay: toml::Value) -> Result<Self> {
        let mut base = toml::Value::try_from(ExperimentConfig::default()).expect("defaults serialize");
        merge(&mut base, overlay);
        base.try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key.path=value` overrides; values parse as TOML, falling
    /// back to a bare string.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(self).expect("config serializes");
        for set in sets {
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| config_err(format!("override `{set}` is not key=value")))?;
            let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut slot = &mut value;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = slot
                    .as_table_mut()
                    .ok_or_else(|| config_err(format!("`{key}`: `{part}` is not inside a table")))?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), parsed.clone());
                    break;
                }
                slot = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()));
            }
        }
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            bail!(config_err("repeats must be at least 1"));
        }
        let d = &self.dataset;
        if d.test_per_identity == 0 || d.test_per_identity >= d.samples_per_identity {
            bail!(config_err(format!(
                "test_per_identity must be in 1..{}",
                d.samples_per_identity
            )));
        }
        self.policy.validate()?;
        self.metrics.featspace_policy.validate()?;
        self.target.train.validate()?;
        self.eval.train.validate()?;
        self.decoder.fit.train.validate()?;
        self.attack.attack.validate()?;
        if self.attack.draws == 0 {
            bail!(config_err("attack.draws must be at least 1"));
        }
        self.target_arch()?;
        self.eval_arch()?;
        self.decoder_arch()?;
        for &v in &self.sweep.values {
            if !(0.0..=1.0).contains(&v) {
                bail!(config_err(format!("sweep value {v} outside [0, 1]")));
            }
        }
        for &v in &self.compare.levels {
            if !(0.0..=1.0).contains(&v) {
                bail!(config_err(format!("concealment level {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn target_arch(&self) -> Result<ArchSpec> {
        classifier_arch(self.target.arch, self.dataset.geometry(), self.dataset.identities)
    }

    pub fn eval_arch(&self) -> Result<ArchSpec> {
        classifier_arch(self.eval.arch, self.dataset.geometry(), self.dataset.identities)
    }

    pub fn decoder_arch(&self) -> Result<ArchSpec> {
        Ok(ArchSpec::decoder(self.dataset.geometry(), self.decoder.latent_dim)?)
    }

    /// Seed of repeat `r`.
    pub fn repeat_seed(&self, r: usize) -> u64 {
        self.seed + r as u64
    }
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() && !replaces_whole(&k) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Tables that are replaced rather than merged, so an override of the
/// optimizer or policy never mixes fields of two variants.
fn replaces_whole(key: &str) -> bool {
    matches!(key, "optimizer")
}
