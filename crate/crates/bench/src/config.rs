//! Benchmark configuration, read from TOML. Every field has a default, so an
//! empty file is a valid configuration for the three synthetic datasets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use faithcf::data::{SplitFractions, SyntheticKind};
use faithcf::generators::{GeneratorKind, GeneratorParams};
use faithcf::models::{AdamConfig, JemConfig, TrainConfig, VaeConfig};
use faithcf::sampler::{SgldConfig, SgldInit};
use serde::{Deserialize, Serialize};

use crate::error::config_error;

pub const PAPER_SCALE_RUNS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub n_runs: usize,
    pub n_factuals: usize,
    /// Miscoverage level for conformal calibration.
    pub alpha: f64,
    /// Draw the reference samples afresh for every counterfactual instead of
    /// once per (model, target, run).
    pub strict_sampling: bool,
    pub datasets: Vec<DatasetConfig>,
    pub models: Vec<ModelConfig>,
    pub generators: Vec<GeneratorKind>,
    /// Per-generator overrides on top of each generator's defaults, keyed by
    /// generator name.
    pub generator_params: BTreeMap<String, toml::Table>,
    pub sampling: SamplingConfig,
    pub vae: VaeSettings,
    pub grid: GridConfig,
    pub plot: PlotConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let tuned: toml::Table = toml::toml! {
            lambda1 = 0.05
            lambda2 = 0.5
            lambda3 = 0.5
        };
        Self {
            seed: 42,
            out: PathBuf::from("out"),
            jobs: 0,
            n_runs: 5,
            n_factuals: 100,
            alpha: 0.1,
            strict_sampling: false,
            datasets: SyntheticKind::ALL.iter().map(|k| DatasetConfig::synthetic(*k)).collect(),
            models: vec![ModelConfig::new("mlp", ModelKind::Mlp), ModelConfig::new("jem", ModelKind::Jem)],
            generators: GeneratorKind::ALL.to_vec(),
            generator_params: ["eccco", "eccco_plus", "eccco_l1"]
                .into_iter()
                .map(|g| (g.to_string(), tuned.clone()))
                .collect(),
            sampling: SamplingConfig::default(),
            vae: VaeSettings::default(),
            grid: GridConfig::default(),
            plot: PlotConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    /// Synthetic generator; when neither this nor `csv` is set the name is
    /// read as a synthetic kind.
    #[serde(default)]
    pub synthetic: Option<SyntheticKind>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub noise: Option<f64>,
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub label_column: Option<String>,
    #[serde(default)]
    pub balance: bool,
    /// Train, calibration and test fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_n() -> usize {
    1000
}

fn default_split() -> [f64; 3] {
    let f = SplitFractions::default();
    [f.train, f.calibration, f.test]
}

impl DatasetConfig {
    pub fn synthetic(kind: SyntheticKind) -> Self {
        Self {
            name: kind.name().to_string(),
            synthetic: Some(kind),
            n: default_n(),
            noise: None,
            csv: None,
            label_column: None,
            balance: false,
            split: default_split(),
        }
    }

    pub fn fractions(&self) -> SplitFractions {
        SplitFractions::new(self.split[0], self.split[1], self.split[2])
    }

    pub fn source(&self) -> Result<DataSource> {
        match (&self.synthetic, &self.csv) {
            (Some(_), Some(_)) => Err(config_error(format!(
                "dataset `{}` sets both `synthetic` and `csv`",
                self.name
            ))),
            (Some(kind), None) => Ok(DataSource::Synthetic(*kind)),
            (None, Some(path)) => {
                let label = self.label_column.clone().ok_or_else(|| {
                    config_error(format!("csv dataset `{}` needs `label_column`", self.name))
                })?;
                Ok(DataSource::Csv { path: path.clone(), label_column: label })
            }
            (None, None) => self.name.parse().map(DataSource::Synthetic).map_err(|_| {
                config_error(format!(
                    "dataset `{}` is not a synthetic kind; set `synthetic` or `csv`",
                    self.name
                ))
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticKind),
    Csv { path: PathBuf, label_column: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Ensemble,
    Jem,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub input_noise: f64,
    /// Ensemble size; only read for `ensemble`.
    pub members: usize,
    pub jem: JemSettings,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new("mlp", ModelKind::Mlp)
    }
}

impl ModelConfig {
    pub fn new(name: &str, kind: ModelKind) -> Self {
        let t = TrainConfig::default();
        Self {
            name: name.to_string(),
            kind,
            hidden: vec![32, 32],
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            input_noise: t.input_noise,
            members: 5,
            jem: JemSettings::default(),
        }
    }

    pub fn layer_sizes(&self, d: usize, k: usize) -> Vec<usize> {
        std::iter::once(d).chain(self.hidden.iter().copied()).chain(std::iter::once(k)).collect()
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig { lr: self.lr, ..AdamConfig::default() },
            seed,
            input_noise: self.input_noise,
        }
    }
}

/// Contrastive-training settings for `jem` models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JemSettings {
    pub lambda_reg: f64,
    pub sgld_steps: usize,
    pub step_size: f64,
    pub noise_std: f64,
    pub gen_batch_fraction: f64,
    pub buffer_capacity: usize,
    pub reinit_prob: f64,
    pub clamp_margin: f64,
}

impl Default for JemSettings {
    fn default() -> Self {
        let j = JemConfig::default();
        Self {
            lambda_reg: j.lambda_reg,
            sgld_steps: j.sgld.steps,
            step_size: j.sgld.step_size,
            noise_std: j.sgld.noise_std,
            gen_batch_fraction: j.gen_batch_fraction,
            buffer_capacity: j.buffer_capacity,
            reinit_prob: j.reinit_prob,
            clamp_margin: j.clamp_margin.unwrap_or(1.0),
        }
    }
}

impl JemSettings {
    pub fn to_config(&self) -> JemConfig {
        JemConfig {
            sgld: SgldConfig {
                step_size: self.step_size,
                noise_std: self.noise_std,
                steps: self.sgld_steps,
                init: SgldInit::Buffer,
                clamp: None,
            },
            lambda_reg: self.lambda_reg,
            gen_batch_fraction: self.gen_batch_fraction,
            buffer_capacity: self.buffer_capacity,
            reinit_prob: self.reinit_prob,
            clamp_margin: Some(self.clamp_margin),
        }
    }
}

/// Conditional sampling used for the unfaithfulness reference set, the
/// ECCCo-L1 penalty and `cfx sample`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub n_batch: usize,
    pub n_keep: usize,
    pub steps: usize,
    pub step_size: f64,
    pub noise_std: f64,
    /// Chains are clamped to the training range widened by this much.
    pub clamp_margin: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        let s = SgldConfig::inference();
        Self {
            n_batch: 50,
            n_keep: 25,
            steps: s.steps,
            step_size: s.step_size,
            noise_std: s.noise_std,
            clamp_margin: 1.0,
        }
    }
}

impl SamplingConfig {
    pub fn sgld(&self, bounds: &[(f64, f64)]) -> SgldConfig {
        SgldConfig {
            step_size: self.step_size,
            noise_std: self.noise_std,
            steps: self.steps,
            init: SgldInit::Random,
            clamp: None,
        }
        .with_clamp_around(bounds, self.clamp_margin)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeSettings {
    pub hidden: usize,
    /// `None` picks 2 for two features and `min(D, 8)` otherwise.
    pub latent_dim: Option<usize>,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for VaeSettings {
    fn default() -> Self {
        let v = VaeConfig::for_dim(2);
        Self {
            hidden: v.hidden,
            latent_dim: None,
            beta: v.beta,
            epochs: v.epochs,
            batch_size: v.batch_size,
            lr: v.adam.lr,
        }
    }
}

impl VaeSettings {
    pub fn to_config(&self, d: usize, seed: u64) -> VaeConfig {
        let base = VaeConfig::for_dim(d);
        VaeConfig {
            hidden: self.hidden,
            latent_dim: self.latent_dim.unwrap_or(base.latent_dim),
            beta: self.beta,
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig { lr: self.lr, ..AdamConfig::default() },
            seed,
        }
    }
}

/// Grid over the penalty weights and step size. An empty axis keeps the
/// generator's configured value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Defaults to the first configured dataset.
    pub dataset: Option<String>,
    /// Defaults to the first configured model.
    pub model: Option<String>,
    pub generators: Vec<GeneratorKind>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub lambda3: Vec<f64>,
    pub eta: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            model: None,
            generators: vec![GeneratorKind::Eccco],
            lambda1: vec![0.05, 0.1],
            lambda2: vec![0.1, 0.5],
            lambda3: vec![0.1, 0.5],
            eta: vec![0.05],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    /// Restrict plotting to one dataset; all by default.
    pub dataset: Option<String>,
    /// Restrict plotting to one model; all by default.
    pub model: Option<String>,
    /// Defaults to the benchmark generators.
    pub generators: Vec<GeneratorKind>,
    /// Position of the factual within the test split; by default the first
    /// factual the benchmark would draw in run 0.
    pub factual: Option<usize>,
    pub target: Option<usize>,
    /// Shading cells per axis.
    pub resolution: usize,
    /// Arrows per axis.
    pub arrows: usize,
    /// Plot datasets with more than two features in the plane of their
    /// first two principal components.
    pub project_pca: bool,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            model: None,
            generators: Vec::new(),
            factual: None,
            target: None,
            resolution: 60,
            arrows: 15,
            project_pca: false,
        }
    }
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 || self.n_factuals == 0 {
            return Err(config_error("n_runs and n_factuals must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(config_error(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.datasets.is_empty() || self.models.is_empty() || self.generators.is_empty() {
            return Err(config_error("datasets, models and generators must be non-empty"));
        }
        unique("dataset", self.datasets.iter().map(|d| d.name.as_str()))?;
        unique("model", self.models.iter().map(|m| m.name.as_str()))?;
        for d in &self.datasets {
            d.source()?;
            valid_name(&d.name)?;
            if d.split.iter().any(|f| *f < 0.0) || d.split.iter().sum::<f64>() > 1.0 + 1e-9 {
                return Err(config_error(format!("dataset `{}`: bad split {:?}", d.name, d.split)));
            }
        }
        for m in &self.models {
            valid_name(&m.name)?;
            if m.epochs == 0 || m.batch_size == 0 || m.hidden.contains(&0) {
                return Err(config_error(format!("model `{}`: epochs, batch size and layer widths must be positive", m.name)));
            }
            if m.kind == ModelKind::Ensemble && m.members == 0 {
                return Err(config_error(format!("model `{}`: ensemble needs members", m.name)));
            }
        }
        for name in self.generator_params.keys() {
            name.parse::<GeneratorKind>()?;
        }
        for g in GeneratorKind::ALL {
            self.params_for(g)?.validate()?;
        }
        let s = &self.sampling;
        if s.n_keep == 0 || s.n_keep > s.n_batch {
            return Err(config_error("sampling.n_keep must lie in 1..=n_batch"));
        }
        self.sampling.sgld(&[]).validate()?;
        if let Some(d) = &self.grid.dataset {
            self.dataset(d)?;
        }
        if let Some(m) = &self.grid.model {
            self.model(m)?;
        }
        if self.plot.resolution < 2 || self.plot.arrows < 2 {
            return Err(config_error("plot.resolution and plot.arrows must be at least 2"));
        }
        Ok(())
    }

    pub fn dataset(&self, name: &str) -> Result<&DatasetConfig> {
        self.datasets
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| config_error(format!("unknown dataset `{name}`")))
    }

    pub fn model(&self, name: &str) -> Result<&ModelConfig> {
        self.models
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| config_error(format!("unknown model `{name}`")))
    }

    /// The generator's defaults with this config's overrides applied.
    pub fn params_for(&self, kind: GeneratorKind) -> Result<GeneratorParams> {
        let base = kind.default_params();
        let Some(over) = self.generator_params.get(kind.name()) else {
            return Ok(base);
        };
        let known = toml::Table::try_from(GeneratorParams { pca_dims: Some(0), ..base.clone() })?;
        let mut table = toml::Table::try_from(base)?;
        for (k, v) in over {
            if !known.contains_key(k) {
                return Err(config_error(format!("unknown parameter `{k}` for generator `{}`", kind.name())));
            }
            table.insert(k.clone(), v.clone());
        }
        let params: GeneratorParams = table
            .try_into()
            .map_err(|e| config_error(format!("generator `{}`: {e}", kind.name())))?;
        Ok(params)
    }
}

fn unique<'a>(what: &str, names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(config_error(format!("duplicate {what} name `{n}`")));
        }
    }
    Ok(())
}

/// Names end up in file names.
fn valid_name(name: &str) -> Result<()> {
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(config_error(format!("name `{name}` must be non-empty [A-Za-z0-9_]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_the_defaults() {
        assert_eq!(BenchConfig::from_toml("").unwrap(), BenchConfig::default());
    }

    #[test]
    fn shipped_config_is_the_default() {
        let text = include_str!("../configs/synthetic.toml");
        assert_eq!(BenchConfig::from_toml(text).unwrap(), BenchConfig::default());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = BenchConfig::default();
        assert_eq!(BenchConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn overrides_merge_onto_generator_defaults() {
        let cfg = BenchConfig::from_toml(
            r#"
            [generator_params.wachter]
            eta = 0.2
            [generator_params.eccco]
            lambda2 = 1.0
            convergence = { mode = "threshold_prob", gamma = 0.75 }
            "#,
        )
        .unwrap();
        let w = cfg.params_for(GeneratorKind::Wachter).unwrap();
        assert_eq!(w.eta, 0.2);
        assert_eq!(w.lambda2, 0.0);
        let e = cfg.params_for(GeneratorKind::Eccco).unwrap();
        assert_eq!(e.lambda2, 1.0);
        assert_eq!(e.lambda1, GeneratorParams::default().lambda1);
        assert_eq!(e.convergence, faithcf::generators::Convergence::ThresholdProb { gamma: 0.75 });
        // Replacing the table drops the tuned weights.
        assert_eq!(e.lambda3, GeneratorParams::default().lambda3);
    }

    #[test]
    fn bad_configs_are_rejected() {
        for text in [
            "n_runs = 0",
            "alpha = 1.5",
            "bogus = 1",
            "[generator_params.eccco]\nlambda9 = 1.0",
            "[generator_params.nope]\nlambda1 = 1.0",
            "[[datasets]]\nname = \"iris\"",
            "[[datasets]]\nname = \"x\"\ncsv = \"x.csv\"",
            "[[models]]\nname = \"a b\"",
            "[grid]\ndataset = \"nope\"",
            "[generator_params.eccco]\neta = -1.0",
        ] {
            assert!(BenchConfig::from_toml(text).is_err(), "{text}");
        }
    }
}
