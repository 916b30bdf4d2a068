//! Run configuration: a TOML file with `scenario`, `arch`, `train` and
//! `eval` sections, plus command-line overrides.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use precoding_gnn::gnn::{Activation, Arch, ArchSpec, Pooling};
use precoding_gnn::metrics::Oracle;
use precoding_gnn::scenario::{ScenarioConfig, UserCountDistribution};
use precoding_gnn::train::{LossKind, LrDecay, PowerModel, TrainConfig};
use precoding_gnn::wmmse::WmmseOptions;
use serde::{Deserialize, Serialize};

use crate::error::{usage, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ArchName {
    Vanilla,
    Model,
    ModelMulticell,
    Tgnn,
    Mrt,
    Zfbf,
    Rzf,
    BnnStructured,
}

impl ArchName {
    pub fn learned(self) -> Option<Arch> {
        match self {
            ArchName::Vanilla => Some(Arch::Vanilla),
            ArchName::Model => Some(Arch::Model),
            ArchName::ModelMulticell => Some(Arch::ModelMulticell),
            _ => None,
        }
    }

    pub fn from_arch(arch: Arch) -> Self {
        match arch {
            Arch::Vanilla => ArchName::Vanilla,
            Arch::Model => ArchName::Model,
            Arch::ModelMulticell => ArchName::ModelMulticell,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ArchName::Vanilla => "vanilla",
            ArchName::Model => "model",
            ArchName::ModelMulticell => "model-multicell",
            ArchName::Tgnn => "tgnn",
            ArchName::Mrt => "mrt",
            ArchName::Zfbf => "zfbf",
            ArchName::Rzf => "rzf",
            ArchName::BnnStructured => "bnn-structured",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LossName {
    Se,
    Ee,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OracleName {
    Wmmse,
    None,
}

impl From<OracleName> for Oracle {
    fn from(o: OracleName) -> Self {
        match o {
            OracleName::Wmmse => Oracle::Wmmse,
            OracleName::None => Oracle::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    #[serde(default = "one")]
    pub cells: usize,
    pub antennas: usize,
    pub users: usize,
    pub samples: usize,
    #[serde(default = "unit")]
    pub p_max: f64,
    #[serde(default = "unit")]
    pub sigma2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Per-sample user counts for training; `users` applies when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_distribution: Option<UserCountDistribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ArchName>,
    /// Full width list `[2, .., 2]`; defaults depend on the architecture and loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub term_c: bool,
    #[serde(default = "default_tgnn_iterations")]
    pub tgnn_iterations: usize,
}

impl Default for ArchSection {
    fn default() -> Self {
        Self {
            kind: None,
            widths: None,
            pooling: Pooling::default(),
            activation: Activation::default(),
            term_c: false,
            tgnn_iterations: default_tgnn_iterations(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossName>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    /// Learning-rate step, e.g. `{ epoch = 150, factor = 0.1 }`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_decay: Option<LrDecay>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_r_min")]
    pub r_min: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "unit")]
    pub lambda_init: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Dataset file; channels are drawn from `scenario` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            loss: None,
            epochs: default_epochs(),
            learning_rate: None,
            lr_decay: None,
            batch_size: default_batch(),
            r_min: default_r_min(),
            beta: default_beta(),
            lambda_init: 1.0,
            seed: 0,
            precision: Precision::default(),
            dataset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_oracle")]
    pub oracle: OracleName,
    /// Test-set size and seed when no dataset file is given.
    #[serde(default = "default_test_samples")]
    pub samples: usize,
    #[serde(default = "default_test_seed")]
    pub seed: u64,
    /// Oracle cache directory; `<out>/oracle-cache` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_snr_grid")]
    pub snr_grid: Vec<f64>,
    #[serde(default = "default_users_grid")]
    pub users_grid: Vec<usize>,
    #[serde(default = "default_samples_grid")]
    pub samples_grid: Vec<usize>,
    /// Independently trained policies averaged per sweep point.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub wmmse: WmmseOptions,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            dataset: None,
            checkpoint: None,
            oracle: default_oracle(),
            samples: default_test_samples(),
            seed: default_test_seed(),
            cache_dir: None,
            snr_grid: default_snr_grid(),
            users_grid: default_users_grid(),
            samples_grid: default_samples_grid(),
            seeds: default_seeds(),
            wmmse: WmmseOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub arch: ArchSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn one() -> usize {
    1
}
fn unit() -> f64 {
    1.0
}
fn default_tgnn_iterations() -> usize {
    40
}
fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    100
}
fn default_r_min() -> f64 {
    2.0
}
fn default_beta() -> f64 {
    0.1
}
fn default_oracle() -> OracleName {
    OracleName::Wmmse
}
fn default_test_samples() -> usize {
    100
}
fn default_test_seed() -> u64 {
    1_000_003
}
fn default_snr_grid() -> Vec<f64> {
    vec![0.0, 10.0, 20.0]
}
fn default_users_grid() -> Vec<usize> {
    (2..=30).step_by(2).collect()
}
fn default_samples_grid() -> Vec<usize> {
    vec![10, 100, 1000, 10000]
}
fn default_seeds() -> usize {
    5
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub arch: Option<ArchName>,
    pub loss: Option<LossName>,
    pub oracle: Option<OracleName>,
}

impl Config {
    /// Parses `path`. A run manifest is accepted too; its `config` snapshot
    /// is used. Relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.train.dataset, &mut cfg.eval.dataset, &mut cfg.eval.checkpoint, &mut cfg.eval.cache_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let value: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        if value.contains_key("command") {
            let snapshot = value.get("config").cloned().ok_or("manifest lacks a [config] snapshot")?;
            return snapshot.try_into().map_err(|e: toml::de::Error| e.to_string());
        }
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Applies `o`; `--seed` targets the seed the command consumes.
    pub fn apply(&mut self, o: &Overrides, command: &str) {
        if let Some(seed) = o.seed {
            match command {
                "gen" => self.scenario.seed = seed,
                "eval" => self.eval.seed = seed,
                _ => self.train.seed = seed,
            }
        }
        if let Some(a) = o.arch {
            self.arch.kind = Some(a);
        }
        if let Some(l) = o.loss {
            self.train.loss = Some(l);
        }
        if let Some(x) = o.oracle {
            self.eval.oracle = x;
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.scenario_config().validate()?;
        if let Some(d) = &self.scenario.user_distribution {
            d.validate()?;
            if self.scenario.cells != 1 {
                return Err(usage("scenario.user_distribution needs cells = 1"));
            }
        }
        if self.train.batch_size == 0 {
            return Err(usage("train.batch_size must be >= 1"));
        }
        if self.eval.seeds == 0 {
            return Err(usage("eval.seeds must be >= 1"));
        }
        self.eval.wmmse.validate()?;
        Ok(())
    }

    pub fn scenario_config(&self) -> ScenarioConfig {
        let s = &self.scenario;
        ScenarioConfig {
            cells: s.cells,
            antennas_per_bs: s.antennas,
            users_per_cell: s.users,
            p_max: s.p_max,
            sigma2: s.sigma2,
            snr_db: s.snr_db,
            seed: s.seed,
        }
    }

    pub fn loss(&self) -> LossName {
        self.train.loss.unwrap_or(LossName::Se)
    }

    /// Architecture with default widths when none are given.
    pub fn arch_spec(&self, arch: Arch) -> CliResult<ArchSpec> {
        let base = match (arch, self.loss()) {
            (Arch::Vanilla, _) => ArchSpec::vanilla_default(),
            (Arch::Model, LossName::Se) => ArchSpec::model_se_default(),
            (Arch::Model, LossName::Ee) => ArchSpec::model_ee_default(),
            (Arch::ModelMulticell, _) => ArchSpec::multicell_default(),
        };
        let widths = self.arch.widths.clone().unwrap_or(base.widths);
        let spec = ArchSpec::new(arch, widths)
            .with_pooling(self.arch.pooling)
            .with_activation(self.arch.activation)
            .with_term_c(self.arch.term_c);
        spec.validate()?;
        Ok(spec)
    }

    /// Defaults: learning rate 0.01 for sum-rate, 0.001 for EE.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let base = match self.loss() {
            LossName::Se => TrainConfig::se(),
            LossName::Ee => TrainConfig::ee(t.r_min),
        };
        TrainConfig {
            learning_rate: t.learning_rate.unwrap_or(base.learning_rate),
            batch_size: t.batch_size,
            epochs: t.epochs,
            r_min: t.r_min,
            beta: t.beta,
            lambda_init: t.lambda_init,
            power: PowerModel::default(),
            seed: t.seed,
            loss: match self.loss() {
                LossName::Se => LossKind::NegativeSumRate,
                LossName::Ee => LossKind::EeLagrangian,
            },
            checkpoint: None,
            lr_decay: t.lr_decay,
        }
    }
}
