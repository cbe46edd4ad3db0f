//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tipool::{NetworkTopology, RotationRange, Transform, TransformSet};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// One network over all transformed copies, features max-pooled.
    #[default]
    Ti,
    /// Plain network trained on a random transform of each sample.
    Augment,
    /// Whole network per instance, class scores max-pooled.
    Mil,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetUnit {
    #[default]
    Epochs,
    Presentations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Table1,
    Mini,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologyConfig {
    Preset {
        preset: Preset,
        #[serde(default = "ten")]
        n_classes: usize,
    },
    Explicit(NetworkTopology),
}

fn ten() -> usize {
    10
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig::Preset { preset: Preset::Desk, n_classes: 10 }
    }
}

impl TopologyConfig {
    pub fn build(&self, dropout: bool) -> NetworkTopology {
        let topo = match self {
            TopologyConfig::Preset { preset, n_classes } => match preset {
                Preset::Desk => NetworkTopology::desk(*n_classes),
                Preset::Table1 => NetworkTopology::table1(*n_classes),
                Preset::Mini => NetworkTopology::mini(*n_classes),
            },
            TopologyConfig::Explicit(t) => t.clone(),
        };
        if dropout {
            topo
        } else {
            topo.without_dropout()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TransformConfig {
    Rotations {
        rotations: usize,
        #[serde(default = "full")]
        range: RotationRange,
    },
    Explicit {
        explicit: Vec<Transform>,
    },
}

fn full() -> RotationRange {
    RotationRange::Full
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig::Rotations { rotations: 8, range: RotationRange::Full }
    }
}

impl TransformConfig {
    pub fn build(&self) -> Result<TransformSet> {
        Ok(match self {
            TransformConfig::Rotations { rotations, range } => TransformSet::rotations(*rotations, *range)?,
            TransformConfig::Explicit { explicit } => TransformSet::new(explicit.clone())?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Adadelta {
        #[serde(default = "rho")]
        rho: f64,
        #[serde(default = "eps")]
        eps: f64,
    },
    Sgd {
        lr: f64,
    },
}

fn rho() -> f64 {
    0.95
}

fn eps() -> f64 {
    1e-6
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adadelta { rho: rho(), eps: eps() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    #[default]
    Idx,
    Amat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rotation {
    #[default]
    None,
    Full,
    Half,
}

impl Rotation {
    pub fn range(self) -> Option<RotationRange> {
        match self {
            Rotation::None => None,
            Rotation::Full => Some(RotationRange::Full),
            Rotation::Half => Some(RotationRange::Half),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub offset: usize,
    pub count: usize,
}

/// Where the images come from and how the train/test subsets are carved
/// out of them. Relative paths resolve against the `--data` directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub format: DataFormat,
    pub images: PathBuf,
    /// Label file for IDX data; amat rows carry their own labels.
    #[serde(default)]
    pub labels: Option<PathBuf>,
    /// Separate test files; when absent the test split is cut from `images`.
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    #[serde(default)]
    pub rotate: Rotation,
    #[serde(default)]
    pub rotate_seed: u64,
    /// Zero-pad 28x28 digits to 32x32.
    #[serde(default)]
    pub pad: bool,
    #[serde(default)]
    pub balance: bool,
    pub train: Split,
    pub test: Split,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            format: DataFormat::Idx,
            images: "data/mnist/digits-images-idx3-ubyte.gz".into(),
            labels: Some("data/mnist/digits-labels-idx1-ubyte.gz".into()),
            test_images: None,
            test_labels: None,
            rotate: Rotation::Full,
            rotate_seed: 1234,
            pad: true,
            balance: false,
            train: Split { offset: 0, count: 2000 },
            test: Split { offset: 2000, count: 5000 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub topology: TopologyConfig,
    #[serde(default)]
    pub transforms: TransformConfig,
    #[serde(default)]
    pub regime: Regime,
    #[serde(default = "batch_size")]
    pub batch_size: usize,
    #[serde(default = "epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub budget_unit: BudgetUnit,
    /// Explicit presentation budget; derived from `epochs` when absent.
    #[serde(default)]
    pub presentations: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub dropout: bool,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub data: DataConfig,
    /// Evaluate the test split every this many epochs (0: final epoch only).
    #[serde(default = "one")]
    pub eval_every: usize,
    #[serde(default = "out_dir")]
    pub out_dir: PathBuf,
    /// Zero the wall-clock column so repeated runs are byte-identical.
    #[serde(default)]
    pub deterministic: bool,
}

fn batch_size() -> usize {
    128
}

fn epochs() -> usize {
    20
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

fn out_dir() -> PathBuf {
    "runs/default".into()
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            topology: TopologyConfig::default(),
            transforms: TransformConfig::default(),
            regime: Regime::Ti,
            batch_size: batch_size(),
            epochs: epochs(),
            budget_unit: BudgetUnit::Epochs,
            presentations: None,
            seed: 0,
            dropout: true,
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
            eval_every: 1,
            out_dir: out_dir(),
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be positive".into()));
        }
        let phi = self.transforms.build()?;
        if self.regime == Regime::Mil && phi.len() < 2 {
            return Err(HarnessError::Config("mil regime needs at least two transforms".into()));
        }
        if self.budget_unit == BudgetUnit::Epochs && self.epochs == 0 {
            return Err(HarnessError::Config("epochs must be positive".into()));
        }
        if self.data.format == DataFormat::Idx && self.data.labels.is_none() {
            return Err(HarnessError::Config("idx data needs a labels file".into()));
        }
        self.topology.build(self.dropout).validate()?;
        Ok(())
    }

    /// Transforms the network pools over; the augment regime trains a plain
    /// single-branch network.
    pub fn network_transforms(&self) -> Result<TransformSet> {
        Ok(match self.regime {
            Regime::Augment => TransformSet::identity(),
            Regime::Ti | Regime::Mil => self.transforms.build()?,
        })
    }

    /// Images presented to the trunk per training sample.
    pub fn presentations_per_sample(&self) -> Result<u64> {
        Ok(self.network_transforms()?.len() as u64)
    }

    /// Total training budget in presentations for a training set of `m`
    /// samples.
    pub fn budget(&self, m: usize) -> Result<u64> {
        match (self.budget_unit, self.presentations) {
            (BudgetUnit::Presentations, Some(p)) => Ok(p),
            (BudgetUnit::Presentations, None) => Err(HarnessError::Config(
                "budget_unit = \"presentations\" needs a presentations value".into(),
            )),
            (BudgetUnit::Epochs, _) => Ok(self.epochs as u64 * m as u64 * self.presentations_per_sample()?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = TrainConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(TrainConfig::from_toml("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn budget_accounting() {
        let mut cfg = TrainConfig { epochs: 3, ..Default::default() };
        assert_eq!(cfg.budget(100).unwrap(), 3 * 100 * 8);
        cfg.regime = Regime::Augment;
        assert_eq!(cfg.budget(100).unwrap(), 300);
        cfg.budget_unit = BudgetUnit::Presentations;
        assert!(cfg.budget(100).is_err());
        cfg.presentations = Some(77);
        assert_eq!(cfg.budget(100).unwrap(), 77);
    }

    #[test]
    fn explicit_sections_parse() {
        let cfg = TrainConfig::from_toml(
            r#"
            regime = "mil"
            batch_size = 32
            [topology]
            preset = "mini"
            n_classes = 3
            [transforms]
            explicit = [{ kind = "identity" }, { kind = "rot90", k = 1 }]
            [optimizer]
            kind = "sgd"
            lr = 0.1
            "#,
        )
        .unwrap();
        assert_eq!(cfg.topology.build(true).n_classes, 3);
        assert_eq!(cfg.transforms.build().unwrap().len(), 2);
        assert_eq!(cfg.optimizer, OptimizerConfig::Sgd { lr: 0.1 });
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in [
            "batch_size = 0",
            "regime = \"mil\"\n[transforms]\nrotations = 1",
            "unknown_key = 1",
            "regime = \"sideways\"",
        ] {
            assert!(matches!(TrainConfig::from_toml(text), Err(HarnessError::Config(_))), "{text}");
        }
    }
}
