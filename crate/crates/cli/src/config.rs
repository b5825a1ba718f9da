//! The run configuration: one TOML file, with command-line flags applied on
//! top before anything runs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use stcl::finetune::FinetuneConfig;
use stcl::ingest::{BundleConfig, LogFormat};
use stcl::pretrain::PretrainConfig;

pub const OUTPUT_ROOT_ENV: &str = "STCL_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides both the pre-training and the fine-tuning seed when set.
    pub seed: Option<u64>,
    /// Root for run directories when `STCL_OUTPUT_ROOT` is unset.
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub checkins: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    pub format: LogFormat,
    /// Processed bundle directory, written by `ingest` and read by the rest.
    pub bundle_dir: Option<PathBuf>,
    pub bundle: BundleConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            checkins: None,
            edges: None,
            format: LogFormat::Gowalla,
            bundle_dir: None,
            bundle: BundleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub clusters: Vec<usize>,
    pub queue: Vec<usize>,
    pub margin: Vec<f64>,
    pub projection: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            clusters: vec![16, 64, 256, 512, 2048],
            queue: vec![0, 128, 512, 2048, 8096],
            margin: vec![0.0, 0.03, 0.09, 0.18, 0.3],
            projection: vec![32, 128, 512, 2048],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParameter {
    Clusters,
    Queue,
    Margin,
    Projection,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            Self::Clusters => "clusters",
            Self::Queue => "queue",
            Self::Margin => "margin",
            Self::Projection => "projection",
        }
    }
}

impl SweepConfig {
    pub fn values(&self, p: SweepParameter) -> Vec<f64> {
        let ints = |v: &[usize]| v.iter().map(|&x| x as f64).collect();
        match p {
            SweepParameter::Clusters => ints(&self.clusters),
            SweepParameter::Queue => ints(&self.queue),
            SweepParameter::Margin => self.margin.clone(),
            SweepParameter::Projection => ints(&self.projection),
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        for (name, v) in [
            ("clusters", &self.clusters),
            ("queue", &self.queue),
            ("projection", &self.projection),
        ] {
            if v.is_empty() {
                bail!("sweep list {name} is empty");
            }
            if name != "queue" && v.contains(&0) {
                bail!("sweep list {name} contains 0");
            }
        }
        if self.margin.is_empty() || self.margin.iter().any(|m| !(0.0..std::f64::consts::PI).contains(m)) {
            bail!("sweep margins must be a non-empty list in [0, pi)");
        }
        Ok(())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            output_dir: None,
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Pushes the top-level seed into the stage configurations and checks
    /// everything.
    pub fn resolve(mut self) -> anyhow::Result<Self> {
        if let Some(seed) = self.seed {
            self.pretrain.seed = seed;
            self.finetune.seed = seed;
        }
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.sweep.validate()?;
        Ok(self)
    }

    /// Writes the configuration and checks that reading it back gives the
    /// same values, so the copy really reproduces the run.
    pub fn freeze(&self, path: &Path) -> anyhow::Result<()> {
        let text = toml::to_string_pretty(self)?;
        let back: RunConfig = toml::from_str(&text)?;
        if &back != self {
            bail!("configuration does not survive a TOML round trip; refusing to write {}", path.display());
        }
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn output_root(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os(OUTPUT_ROOT_ENV).filter(|p| !p.is_empty()) {
            return PathBuf::from(p);
        }
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("stcl-output"))
    }

    pub fn bundle_dir(&self, flag: Option<&Path>) -> anyhow::Result<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.data.bundle_dir.clone())
            .context("no bundle directory: pass --bundle or set data.bundle_dir")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_sit_at_the_sweep_optima() {
        let c = RunConfig::default();
        assert_eq!(c.pretrain.model.num_prototypes, 512);
        assert_eq!(c.pretrain.queue_capacity, 2048);
        assert_eq!(c.pretrain.weights.margin, 0.09);
        assert_eq!(c.pretrain.model.projection_dim, 512);
        assert!(c.sweep.clusters.contains(&512));
        assert!(c.sweep.queue.contains(&2048));
        assert!(c.sweep.margin.contains(&0.09));
        assert!(c.sweep.projection.contains(&512));
    }

    #[test]
    fn default_survives_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&toml::to_string_pretty(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c: RunConfig = toml::from_str("seed = 4\n[pretrain]\nepochs = 3\n[pretrain.weights]\nmargin = 0.18\n").unwrap();
        let c = c.resolve().unwrap();
        assert_eq!(c.pretrain.epochs, 3);
        assert_eq!(c.pretrain.weights.margin, 0.18);
        assert_eq!((c.pretrain.seed, c.finetune.seed), (4, 4));
        assert_eq!(c.pretrain.batch_size, 128);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("epochs = 3\n").is_err());
    }
}
