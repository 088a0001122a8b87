//! Run configuration: a sectioned TOML document with `[data]`, `[network]`,
//! `[train]`, `[distill]` and `[compress]`. Every key has a default and
//! unknown keys are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::compress::{SelectionPolicy, Strategy};
use crate::data::{load_cifar10, Dataset};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Cifar10,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding the CIFAR-10 binary archives.
    pub dir: PathBuf,
    /// Use only the first `n` training / test images.
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    /// Synthetic dataset sizes and seed.
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Cifar10,
            dir: PathBuf::from("data/cifar-10-batches-bin"),
            train_subset: None,
            test_subset: None,
            synthetic_train: 512,
            synthetic_test: 256,
            synthetic_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// `vgg-small`, `resnet18` or `toy`.
    pub preset: String,
    pub width_divisor: usize,
    /// Shortcut branches per block (`K`).
    pub shortcuts: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            preset: "vgg-small".into(),
            width_divisor: 1,
            shortcuts: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressConfig {
    pub strategy: Strategy,
    pub epsilon: f64,
    /// Seed for random selection.
    pub seed: u64,
    /// Absolute interaction threshold; unset means 1% of each branch's
    /// largest |T|.
    pub keep_threshold: Option<f32>,
}

impl Default for CompressConfig {
    fn default() -> Self {
        CompressConfig {
            strategy: Strategy::Global,
            epsilon: 0.1,
            seed: 0,
            keep_threshold: None,
        }
    }
}

impl CompressConfig {
    pub fn policy(&self) -> SelectionPolicy {
        SelectionPolicy {
            strategy: self.strategy,
            epsilon: self.epsilon,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub compress: CompressConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.distill.validate()?;
        self.compress.policy().validate()?;
        if let Some(t) = self.compress.keep_threshold {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::config(format!("keep_threshold must be finite and ≥ 0, got {t}")));
            }
        }
        self.network_spec()?.validate()?;
        Ok(())
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        Ok(NetworkSpec::preset(&self.network.preset, self.network.width_divisor)?
            .with_shortcuts(self.network.shortcuts))
    }

    /// Training and test splits according to `[data]`, sized for the
    /// configured network.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        self.datasets_for(&self.network_spec()?)
    }

    /// Training and test splits checked against `spec`'s input shape.
    pub fn datasets_for(&self, spec: &NetworkSpec) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        let (train, test) = match d.source {
            DataSource::Cifar10 => {
                let c = load_cifar10(&d.dir)?;
                (c.train, c.test)
            }
            DataSource::Synthetic => {
                let i = &spec.input;
                let classes = spec.head.classes;
                // one draw so both splits share the class templates
                let n = d.synthetic_train + d.synthetic_test;
                Dataset::synthetic(n, i.channels, i.height, i.width, classes, d.synthetic_seed).split(d.synthetic_train)
            }
        };
        let i = &spec.input;
        if (train.channels, train.height, train.width) != (i.channels, i.height, i.width) {
            return Err(Error::config(format!(
                "dataset images are {}×{}×{} but network {:?} expects {}×{}×{}",
                train.channels, train.height, train.width, spec.name, i.channels, i.height, i.width
            )));
        }
        let cut = |ds: Dataset, n: Option<usize>| match n {
            Some(n) => ds.take(n),
            None => ds,
        };
        Ok((cut(train, d.train_subset), cut(test, d.test_subset)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::OptimizerKind;

    const SAMPLE: &str = r#"
[data]
source = "synthetic"
synthetic_train = 64

[network]
preset = "toy"
shortcuts = 2

[train]
epochs = 3
lr = 0.005
schedule = [[1, 0.5], [2, 0.1]]
optimizer = "sgd-momentum"

[distill]
alpha = 0.2

[compress]
strategy = "blockwise"
epsilon = 0.25
"#;

    #[test]
    fn parses_sections_and_defaults() {
        let c = RunConfig::parse(SAMPLE).unwrap();
        assert_eq!(c.data.source, DataSource::Synthetic);
        assert_eq!(c.data.synthetic_test, 256);
        assert_eq!(c.train.optimizer, OptimizerKind::SgdMomentum);
        assert_eq!(c.train.schedule, vec![(1, 0.5), (2, 0.1)]);
        assert_eq!(c.compress.strategy, Strategy::Blockwise);
        assert_eq!(c.network_spec().unwrap().num_shortcuts(), 4);
        assert_eq!(c.distill.pairs, Vec::<(usize, usize)>::new());
    }

    #[test]
    fn serialize_parse_is_fixed_point() {
        for text in [SAMPLE, ""] {
            let a = RunConfig::parse(text).unwrap();
            let once = a.to_toml();
            let b = RunConfig::parse(&once).unwrap();
            assert_eq!(a, b);
            assert_eq!(once, b.to_toml());
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::parse("[train]\nepochz = 3\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::parse("[extra]\na = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("[compress]\nepsilon = 1.5\n").is_err());
        assert!(RunConfig::parse("[network]\npreset = \"lenet\"\n").is_err());
        // encodable for costing even though it cannot be trained
        assert!(RunConfig::parse("[network]\npreset = \"resnet18\"\n").is_ok());
    }

    #[test]
    fn synthetic_datasets_match_network_input() {
        let c = RunConfig::parse(SAMPLE).unwrap();
        let (train, test) = c.datasets().unwrap();
        assert_eq!(train.len(), 64);
        assert_eq!(test.len(), 256);
        assert_eq!((train.height, train.width), (8, 8));
    }
}
