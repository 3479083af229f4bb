//! Datasets, trained models and VAEs on disk under the output directory.
//!
//! Files record the settings they were produced with; a file whose settings
//! differ from the current configuration is rebuilt rather than reused.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use faithcf::conformal::ConformalCalibrator;
use faithcf::data::{load_csv, split, CsvOptions, Dataset};
use faithcf::generators::{GeneratorKind, Pca};
use faithcf::models::{
    train_jem, train_network, train_vae, Classifier, DeepEnsemble, Jem, LossCurve, Mlp, Model, ModelFile, Network, Vae,
    VaeConfig,
};
use faithcf::rng::{derive_seed, tag};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{BenchConfig, DataSource, DatasetConfig, ModelConfig, ModelKind};
use crate::error::config_error;

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    fn dir(&self, sub: &str) -> Result<PathBuf> {
        let d = self.root.join(sub);
        std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }

    pub fn models(&self) -> Result<PathBuf> {
        self.dir("models")
    }

    pub fn results(&self) -> Result<PathBuf> {
        self.dir("results")
    }

    pub fn plots(&self) -> Result<PathBuf> {
        self.dir("plots")
    }

    pub fn data(&self) -> Result<PathBuf> {
        self.dir("data")
    }

    pub fn model_file(&self, dataset: &str, model: &str) -> Result<PathBuf> {
        Ok(self.models()?.join(format!("{dataset}-{model}.json")))
    }

    pub fn vae_file(&self, dataset: &str) -> Result<PathBuf> {
        Ok(self.models()?.join(format!("{dataset}-vae.json")))
    }
}

pub fn dataset_seed(cfg: &BenchConfig, name: &str) -> u64 {
    derive_seed(cfg.seed, &[tag("dataset"), tag(name)])
}

/// Generate or load, split and standardize a dataset.
pub fn build_dataset(cfg: &BenchConfig, d: &DatasetConfig) -> Result<Dataset> {
    let seed = dataset_seed(cfg, &d.name);
    let mut ds = match d.source()? {
        DataSource::Synthetic(kind) => {
            let raw = kind.generate(d.n, seed, d.noise.unwrap_or(kind.default_noise()))?;
            let mut ds = split(&raw, d.fractions(), derive_seed(seed, &[tag("split")]))?;
            ds.standardize();
            ds
        }
        DataSource::Csv { path, label_column } => {
            let opts = CsvOptions {
                balance: d.balance,
                seed,
                fractions: Some(d.fractions()),
                ..CsvOptions::new(&label_column)
            };
            load_csv(&path, &opts)?
        }
    };
    ds.name = d.name.clone();
    Ok(ds)
}

/// Every configured dataset, in configuration order; also written to
/// `data/<name>.json`.
pub fn build_datasets(cfg: &BenchConfig, layout: &Layout) -> Result<Vec<Dataset>> {
    cfg.datasets
        .iter()
        .map(|d| {
            let ds = build_dataset(cfg, d).with_context(|| format!("dataset `{}`", d.name))?;
            ds.save_json(&layout.data()?.join(format!("{}.json", d.name)))?;
            Ok(ds)
        })
        .collect()
}

/// What a model file must have been trained with to be reused.
fn training_record(cfg: &BenchConfig, d: &DatasetConfig, m: &ModelConfig) -> serde_json::Value {
    serde_json::json!({ "seed": cfg.seed, "dataset": d, "model": m })
}

pub fn model_seed(cfg: &BenchConfig, dataset: &str, model: &str) -> u64 {
    derive_seed(cfg.seed, &[tag("model"), tag(dataset), tag(model)])
}

pub struct Trained {
    pub file: ModelFile,
    pub curves: Vec<LossCurve>,
}

pub fn train_model(cfg: &BenchConfig, d: &DatasetConfig, m: &ModelConfig, ds: &Dataset) -> Result<Trained> {
    let seed = model_seed(cfg, &d.name, &m.name);
    let sizes = m.layer_sizes(ds.n_features(), ds.n_classes());
    let tc = m.train_config(seed);
    let (model, curves) = match m.kind {
        ModelKind::Mlp => {
            let mut net = Network::Mlp(Mlp::new(&sizes, seed)?);
            let curves = train_network(&mut net, ds, &tc)?;
            let Network::Mlp(mlp) = net else { unreachable!() };
            (Model::Mlp(mlp), curves)
        }
        ModelKind::Ensemble => {
            let mut net = Network::Ensemble(DeepEnsemble::new(&sizes, m.members, seed)?);
            let curves = train_network(&mut net, ds, &tc)?;
            let Network::Ensemble(e) = net else { unreachable!() };
            (Model::Ensemble(e), curves)
        }
        ModelKind::Jem => {
            let config = m.jem.to_config();
            let mut net = Network::Mlp(Mlp::new(&sizes, seed)?);
            let out = train_jem(&mut net, ds, &tc, &config)?;
            (Model::Jem(Jem { net, config }), out.curves)
        }
    };
    let (xt, yt) = ds.test();
    let acc = model.accuracy(&xt, &yt)?;
    Ok(Trained {
        file: ModelFile {
            model,
            seed,
            dataset: d.name.clone(),
            training: training_record(cfg, d, m),
            test_accuracy: Some(acc),
            calibrator: None,
        },
        curves,
    })
}

/// Reuse the model file when it was trained with the current settings.
pub fn load_current(cfg: &BenchConfig, d: &DatasetConfig, m: &ModelConfig, layout: &Layout) -> Result<Option<ModelFile>> {
    let path = layout.model_file(&d.name, &m.name)?;
    if !path.exists() {
        return Ok(None);
    }
    let file = ModelFile::load(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok((file.training == training_record(cfg, d, m)).then_some(file))
}

pub fn calibrate(cfg: &BenchConfig, file: &mut ModelFile, ds: &Dataset) -> Result<()> {
    let (xc, yc) = ds.calibration();
    file.calibrator = Some(ConformalCalibrator::calibrate(&file.model, &xc, &yc, cfg.alpha)?);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeFile {
    pub dataset: String,
    pub config: VaeConfig,
    pub vae: Vae,
    pub curve: LossCurve,
}

pub fn vae_config(cfg: &BenchConfig, d: &DatasetConfig, ds: &Dataset) -> VaeConfig {
    cfg.vae.to_config(ds.n_features(), derive_seed(cfg.seed, &[tag("vae"), tag(&d.name)]))
}

pub fn train_vae_for(cfg: &BenchConfig, d: &DatasetConfig, ds: &Dataset) -> Result<VaeFile> {
    let config = vae_config(cfg, d, ds);
    let mut vae = Vae::new(ds.n_features(), config.hidden, config.latent_dim, config.seed)?;
    let curve = train_vae(&mut vae, ds, &config)?;
    Ok(VaeFile { dataset: d.name.clone(), config, vae, curve })
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(file, value)?;
    Ok(())
}

pub fn load_vae_current(cfg: &BenchConfig, d: &DatasetConfig, ds: &Dataset, layout: &Layout) -> Result<Option<VaeFile>> {
    let path = layout.vae_file(&d.name)?;
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path)?;
    let file: VaeFile = serde_json::from_str(&text).with_context(|| format!("reading {}", path.display()))?;
    Ok((file.config == vae_config(cfg, d, ds)).then_some(file))
}

/// A calibrated model ready for counterfactual search.
pub struct ReadyModel {
    pub name: String,
    pub model: Model,
    pub calibrator: ConformalCalibrator,
}

/// One dataset with its models and search-space artifacts.
pub struct Workspace {
    pub config: DatasetConfig,
    pub data: Dataset,
    pub vae: Vae,
    pub pca: Pca,
    pub models: Vec<ReadyModel>,
}

/// Load what is current on disk and train or calibrate the rest, in
/// parallel over cells. `models` restricts the model list.
pub fn prepare(cfg: &BenchConfig, layout: &Layout, datasets: &[&DatasetConfig], models: &[&ModelConfig]) -> Result<Vec<Workspace>> {
    use rayon::prelude::*;
    let data: Vec<Dataset> = datasets
        .iter()
        .map(|d| build_dataset(cfg, d).with_context(|| format!("dataset `{}`", d.name)))
        .collect::<Result<_>>()?;
    let cells: Vec<(usize, usize)> = (0..datasets.len()).flat_map(|i| (0..models.len()).map(move |j| (i, j))).collect();
    let files: Vec<ModelFile> = cells
        .par_iter()
        .map(|&(i, j)| -> Result<ModelFile> {
            let (d, m, ds) = (datasets[i], models[j], &data[i]);
            let path = layout.model_file(&d.name, &m.name)?;
            let mut file = match load_current(cfg, d, m, layout)? {
                Some(f) => f,
                None => {
                    info!("training {} on {}", m.name, d.name);
                    let t = train_model(cfg, d, m, ds).with_context(|| format!("training {} on {}", m.name, d.name))?;
                    t.file
                }
            };
            let stale = file.calibrator.as_ref().is_none_or(|c| c.alpha != cfg.alpha);
            if stale {
                calibrate(cfg, &mut file, ds)?;
                file.save(&path)?;
            }
            Ok(file)
        })
        .collect::<Result<_>>()?;
    let vaes: Vec<VaeFile> = datasets
        .par_iter()
        .zip(&data)
        .map(|(d, ds)| -> Result<VaeFile> {
            if let Some(v) = load_vae_current(cfg, d, ds, layout)? {
                return Ok(v);
            }
            info!("training vae on {}", d.name);
            let v = train_vae_for(cfg, d, ds).with_context(|| format!("training vae on {}", d.name))?;
            save_json(&v, &layout.vae_file(&d.name)?)?;
            Ok(v)
        })
        .collect::<Result<_>>()?;
    let pca_dims = cfg.params_for(GeneratorKind::EcccoPlus)?.pca_dims;
    let mut files = files.into_iter();
    let mut out = Vec::new();
    for ((d, ds), v) in datasets.iter().zip(data).zip(vaes) {
        let n_z = pca_dims.unwrap_or(ds.n_features());
        if n_z == 0 || n_z > ds.n_features() {
            return Err(config_error(format!("pca_dims {n_z} out of range for `{}`", d.name)));
        }
        let pca = Pca::fit(&ds.train().0, n_z)?;
        let models = models
            .iter()
            .map(|m| {
                let f = files.next().expect("one file per cell");
                ReadyModel {
                    name: m.name.clone(),
                    calibrator: f.calibrator.expect("calibrated above"),
                    model: f.model,
                }
            })
            .collect();
        out.push(Workspace { config: (*d).clone(), data: ds, vae: v.vae, pca, models });
    }
    Ok(out)
}
