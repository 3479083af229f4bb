use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use faithcf::evaluation::{aggregate, write_rows_csv, BenchmarkReport, BenchmarkRow, Metric};
use faithcf::generators::GeneratorKind;
use faithcf::models::Classifier;
use faithcf::rng::{derive_seed, rng_from, tag};
use faithcf::sampler::{generate_conditional, ClassifierEnergy, EnergyModel};
use faithcf::Tensor;
use log::info;
use rand::Rng as _;
use rayon::prelude::*;

use crate::artifacts::{self, prepare, Layout, Workspace};
use crate::bench::{all_cases, run_cells, sample_cases, sgld_for, Variant};
use crate::config::{BenchConfig, DatasetConfig, ModelConfig};

fn all_refs(cfg: &BenchConfig) -> (Vec<&DatasetConfig>, Vec<&ModelConfig>) {
    (cfg.datasets.iter().collect(), cfg.models.iter().collect())
}

fn csv_writer(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(std::io::BufWriter::new(f))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyRow {
    pub dataset: String,
    pub model: String,
    pub kind: String,
    pub test_accuracy: f64,
}

/// Train every (dataset, model) cell and the per-dataset VAEs. Writes the
/// model files, loss curves and `results/accuracy.csv`.
pub fn train(cfg: &BenchConfig) -> Result<Vec<AccuracyRow>> {
    let layout = Layout::new(&cfg.out);
    let datasets = artifacts::build_datasets(cfg, &layout)?;
    let curves_dir = layout.results()?.join("curves");
    std::fs::create_dir_all(&curves_dir)?;
    let cells: Vec<(usize, usize)> =
        (0..cfg.datasets.len()).flat_map(|i| (0..cfg.models.len()).map(move |j| (i, j))).collect();
    let trained: Vec<artifacts::Trained> = cells
        .par_iter()
        .map(|&(i, j)| {
            let (d, m) = (&cfg.datasets[i], &cfg.models[j]);
            info!("training {} on {}", m.name, d.name);
            artifacts::train_model(cfg, d, m, &datasets[i]).with_context(|| format!("training {} on {}", m.name, d.name))
        })
        .collect::<Result<_>>()?;
    let vaes: Vec<artifacts::VaeFile> = cfg
        .datasets
        .par_iter()
        .zip(&datasets)
        .map(|(d, ds)| artifacts::train_vae_for(cfg, d, ds).with_context(|| format!("training vae on {}", d.name)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (&(i, j), t) in cells.iter().zip(&trained) {
        let (d, m) = (&cfg.datasets[i], &cfg.models[j]);
        t.file.save(&layout.model_file(&d.name, &m.name)?)?;
        for (k, c) in t.curves.iter().enumerate() {
            let name = if t.curves.len() == 1 {
                format!("{}-{}.csv", d.name, m.name)
            } else {
                format!("{}-{}-member{k}.csv", d.name, m.name)
            };
            c.write_csv(&curves_dir.join(name))?;
        }
        rows.push(AccuracyRow {
            dataset: d.name.clone(),
            model: m.name.clone(),
            kind: t.file.model.kind().to_string(),
            test_accuracy: t.file.test_accuracy.unwrap_or(f64::NAN),
        });
    }
    for (d, v) in cfg.datasets.iter().zip(&vaes) {
        artifacts::save_json(v, &layout.vae_file(&d.name)?)?;
        v.curve.write_csv(&curves_dir.join(format!("{}-vae.csv", d.name)))?;
    }
    let mut out = csv_writer(&layout.results()?.join("accuracy.csv"))?;
    writeln!(out, "dataset,model,kind,test_accuracy")?;
    for r in &rows {
        writeln!(out, "{},{},{},{}", r.dataset, r.model, r.kind, r.test_accuracy)?;
        info!("{} {} test accuracy {:.4}", r.dataset, r.model, r.test_accuracy);
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoverageRow {
    pub dataset: String,
    pub model: String,
    pub q_hat: f64,
    pub test_coverage: f64,
    pub mean_set_size: f64,
}

/// Calibrate every model (training any that are missing or stale) and write
/// `results/coverage.csv`.
pub fn calibrate(cfg: &BenchConfig) -> Result<Vec<CoverageRow>> {
    let layout = Layout::new(&cfg.out);
    let (ds_refs, m_refs) = all_refs(cfg);
    let workspaces = prepare(cfg, &layout, &ds_refs, &m_refs)?;
    let mut rows = Vec::new();
    for ws in &workspaces {
        let (xt, yt) = ws.data.test();
        for rm in &ws.models {
            let cal = &rm.calibrator;
            let sizes: Vec<usize> = (0..xt.rows())
                .map(|i| cal.prediction_set(&rm.model, xt.row(i)).map(|s| s.len()))
                .collect::<faithcf::Result<_>>()?;
            rows.push(CoverageRow {
                dataset: ws.data.name.clone(),
                model: rm.name.clone(),
                q_hat: cal.q_hat,
                test_coverage: cal.coverage(&rm.model, &xt, &yt)?,
                mean_set_size: sizes.iter().sum::<usize>() as f64 / sizes.len().max(1) as f64,
            });
        }
    }
    let mut out = csv_writer(&layout.results()?.join("coverage.csv"))?;
    writeln!(out, "dataset,model,alpha,q_hat,test_coverage,mean_set_size")?;
    for r in &rows {
        writeln!(out, "{},{},{},{},{},{}", r.dataset, r.model, cfg.alpha, r.q_hat, r.test_coverage, r.mean_set_size)?;
        info!("{} {} coverage {:.3} mean set size {:.3}", r.dataset, r.model, r.test_coverage, r.mean_set_size);
    }
    Ok(rows)
}

pub struct BenchmarkOutcome {
    pub rows: Vec<BenchmarkRow>,
    pub report: BenchmarkReport,
}

/// Run the benchmark and write `results/rows.csv`, `results/aggregate.csv`
/// and `results/aggregate.md`.
pub fn benchmark(cfg: &BenchConfig) -> Result<BenchmarkOutcome> {
    let layout = Layout::new(&cfg.out);
    let (ds_refs, m_refs) = all_refs(cfg);
    let workspaces = prepare(cfg, &layout, &ds_refs, &m_refs)?;
    let variants: Vec<Variant> = cfg.generators.iter().map(|&g| Variant::configured(cfg, g)).collect::<Result<_>>()?;
    let cases = all_cases(cfg, &workspaces)?;
    let t = Instant::now();
    info!("running {} cases x {} generators", cases.len(), variants.len());
    let rows = run_cells(cfg, &workspaces, &cases, &variants)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    info!("{} cells in {:.1}s, {failed} failed", rows.len(), t.elapsed().as_secs_f64());
    let results = layout.results()?;
    write_rows_csv(&rows, &results.join("rows.csv"))?;
    let report = aggregate(&rows);
    report.write_csv(&results.join("aggregate.csv"))?;
    std::fs::write(results.join("aggregate.md"), report.to_markdown())?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok(BenchmarkOutcome { rows, report })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub point: usize,
    pub generator: GeneratorKind,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub eta: f64,
    pub n_rows: usize,
    pub n_failed: usize,
    /// Means over the successful cells, in [`Metric::ALL`] order; `None`
    /// when every cell failed.
    pub means: Option<[f64; 6]>,
}

impl GridRow {
    pub fn mean_of(&self, m: Metric) -> Option<f64> {
        let k = Metric::ALL.iter().position(|&x| x == m)?;
        self.means.map(|v| v[k])
    }
}

pub const GRID_MIN_VALIDITY: f64 = 0.9;

pub struct GridOutcome {
    pub rows: Vec<GridRow>,
    /// Per generator, the point with the lowest unfaithfulness among those
    /// with validity ≥ 0.9; `None` when no point qualifies.
    pub best: Vec<(GeneratorKind, Option<GridRow>)>,
}

/// A single run at every grid point. Writes `results/grid.csv`,
/// `results/grid_best.csv` and `results/grid_best.md`.
pub fn gridsearch(cfg: &BenchConfig) -> Result<GridOutcome> {
    let layout = Layout::new(&cfg.out);
    let d = match &cfg.grid.dataset {
        Some(n) => cfg.dataset(n)?,
        None => &cfg.datasets[0],
    };
    let m = match &cfg.grid.model {
        Some(n) => cfg.model(n)?,
        None => &cfg.models[0],
    };
    let generators = if cfg.grid.generators.is_empty() { vec![GeneratorKind::Eccco] } else { cfg.grid.generators.clone() };
    let workspaces = prepare(cfg, &layout, &[d], &[m])?;
    let cases = sample_cases(cfg, &workspaces[0], 0, 0, 0)?;
    let axis = |v: &Vec<f64>| if v.is_empty() { vec![None] } else { v.iter().map(|x| Some(*x)).collect() };
    let g = &cfg.grid;
    let mut points = Vec::new();
    for l1 in axis(&g.lambda1) {
        for l2 in axis(&g.lambda2) {
            for l3 in axis(&g.lambda3) {
                for eta in axis(&g.eta) {
                    points.push((l1, l2, l3, eta));
                }
            }
        }
    }
    let mut variants = Vec::new();
    for (p, &(l1, l2, l3, eta)) in points.iter().enumerate() {
        for &kind in &generators {
            let mut params = cfg.params_for(kind)?;
            params.lambda1 = l1.unwrap_or(params.lambda1);
            params.lambda2 = l2.unwrap_or(params.lambda2);
            params.lambda3 = l3.unwrap_or(params.lambda3);
            params.eta = eta.unwrap_or(params.eta);
            params.validate()?;
            variants.push(Variant { label: format!("{}#{p}", kind.name()), kind, params });
        }
    }
    info!("grid of {} points x {} generators on {} / {}", points.len(), generators.len(), d.name, m.name);
    let cells = run_cells(cfg, &workspaces, &cases, &variants)?;
    let mut rows = Vec::new();
    for (vi, v) in variants.iter().enumerate() {
        let mine: Vec<&BenchmarkRow> = cells.iter().skip(vi).step_by(variants.len()).collect();
        let ok: Vec<[f64; 6]> = mine.iter().filter_map(|r| r.metrics.as_ref().map(|m| m.values())).collect();
        let means = (!ok.is_empty()).then(|| {
            let mut s = [0.0; 6];
            for r in &ok {
                for k in 0..6 {
                    s[k] += r[k] / ok.len() as f64;
                }
            }
            s
        });
        rows.push(GridRow {
            point: vi / generators.len(),
            generator: v.kind,
            lambda1: v.params.lambda1,
            lambda2: v.params.lambda2,
            lambda3: v.params.lambda3,
            eta: v.params.eta,
            n_rows: mine.len(),
            n_failed: mine.len() - ok.len(),
            means,
        });
    }
    let best: Vec<(GeneratorKind, Option<GridRow>)> = generators
        .iter()
        .map(|&kind| {
            let pick = rows
                .iter()
                .filter(|r| r.generator == kind)
                .filter(|r| r.mean_of(Metric::Validity).is_some_and(|v| v >= GRID_MIN_VALIDITY))
                .min_by(|a, b| {
                    let (ua, ub) = (a.mean_of(Metric::Unfaithfulness).unwrap(), b.mean_of(Metric::Unfaithfulness).unwrap());
                    ua.total_cmp(&ub).then(a.point.cmp(&b.point))
                })
                .cloned();
            if pick.is_none() {
                log::warn!("no grid point for {} reaches validity {GRID_MIN_VALIDITY}", kind.name());
            }
            (kind, pick)
        })
        .collect();
    let results = layout.results()?;
    write_grid_csv(&rows, &results.join("grid.csv"))?;
    let best_rows: Vec<GridRow> = best.iter().filter_map(|(_, r)| r.clone()).collect();
    write_grid_csv(&best_rows, &results.join("grid_best.csv"))?;
    std::fs::write(results.join("grid_best.md"), grid_markdown(&best, &d.name, &m.name))?;
    Ok(GridOutcome { rows, best })
}

fn write_grid_csv(rows: &[GridRow], path: &Path) -> Result<()> {
    let mut out = csv_writer(path)?;
    let metrics: Vec<&str> = Metric::ALL.iter().map(|m| m.name()).collect();
    writeln!(out, "point,generator,lambda1,lambda2,lambda3,eta,n_rows,n_failed,{}", metrics.join(","))?;
    for r in rows {
        let vals: Vec<String> = match r.means {
            Some(v) => v.iter().map(|x| x.to_string()).collect(),
            None => vec![String::new(); 6],
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.point,
            r.generator.name(),
            r.lambda1,
            r.lambda2,
            r.lambda3,
            r.eta,
            r.n_rows,
            r.n_failed,
            vals.join(",")
        )?;
    }
    Ok(())
}

fn grid_markdown(best: &[(GeneratorKind, Option<GridRow>)], dataset: &str, model: &str) -> String {
    let mut s = format!(
        "Best grid point per generator on {dataset} / {model} (lowest unfaithfulness with validity >= {GRID_MIN_VALIDITY})\n\n"
    );
    s.push_str("| Generator | λ1 | λ2 | λ3 | η | unfaithfulness | validity |\n|---|---:|---:|---:|---:|---:|---:|\n");
    for (kind, r) in best {
        match r {
            Some(r) => s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {:.4} | {:.2} |\n",
                kind.label(),
                r.lambda1,
                r.lambda2,
                r.lambda3,
                r.eta,
                r.mean_of(Metric::Unfaithfulness).unwrap(),
                r.mean_of(Metric::Validity).unwrap()
            )),
            None => s.push_str(&format!("| {} | – | – | – | – | – | – |\n", kind.label())),
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSummary {
    pub dataset: String,
    pub model: String,
    pub class: usize,
    /// Share of kept samples the model assigns to the conditioning class.
    pub in_class: f64,
    pub mean_energy: f64,
    /// Mean energy of uniform draws from the training box.
    pub uniform_energy: f64,
}

/// Conditional SGLD samples for every model and class, written to
/// `results/samples/`.
pub fn sample(cfg: &BenchConfig) -> Result<Vec<SampleSummary>> {
    let layout = Layout::new(&cfg.out);
    let (ds_refs, m_refs) = all_refs(cfg);
    let workspaces = prepare(cfg, &layout, &ds_refs, &m_refs)?;
    let dir = layout.results()?.join("samples");
    std::fs::create_dir_all(&dir)?;
    let jobs: Vec<(&Workspace, usize, usize)> = workspaces
        .iter()
        .flat_map(|ws| (0..ws.models.len()).flat_map(move |mi| (0..ws.data.n_classes()).map(move |k| (ws, mi, k))))
        .collect();
    let drawn: Vec<(SampleSummary, faithcf::sampler::ConditionalSamples)> = jobs
        .par_iter()
        .map(|&(ws, mi, k)| -> Result<_> {
            let rm = &ws.models[mi];
            let energy = ClassifierEnergy(&rm.model);
            let seed = derive_seed(cfg.seed, &[tag("sample"), tag(&ws.data.name), tag(&rm.name), k as u64]);
            let out = generate_conditional(&energy, k, cfg.sampling.n_batch, cfg.sampling.n_keep, &sgld_for(cfg, ws), seed)?;
            let pred = rm.model.predict_label(&out.samples)?;
            let bounds = ws.data.train_bounds();
            let mut rng = rng_from(seed, &[tag("uniform")]);
            let n = 100;
            let uniform: Vec<f64> =
                (0..n).flat_map(|_| bounds.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect::<Vec<_>>()).collect();
            let uniform = Tensor::matrix(n, bounds.len(), uniform)?;
            let ue = energy.energies(&uniform, &vec![k; n])?;
            let summary = SampleSummary {
                dataset: ws.data.name.clone(),
                model: rm.name.clone(),
                class: k,
                in_class: pred.iter().filter(|&&p| p == k).count() as f64 / pred.len() as f64,
                mean_energy: out.energies.iter().sum::<f64>() / out.energies.len() as f64,
                uniform_energy: ue.iter().sum::<f64>() / n as f64,
            };
            Ok((summary, out))
        })
        .collect::<Result<_>>()?;
    let mut summary = csv_writer(&dir.join("summary.csv"))?;
    writeln!(summary, "dataset,model,class,in_class,mean_energy,uniform_energy")?;
    let mut out = Vec::new();
    for (s, samples) in drawn {
        let mut f = csv_writer(&dir.join(format!("{}-{}-class{}.csv", s.dataset, s.model, s.class)))?;
        let d = samples.samples.cols();
        let header: Vec<String> = (0..d).map(|j| format!("x{j}")).chain(std::iter::once("energy".to_string())).collect();
        writeln!(f, "{}", header.join(","))?;
        for i in 0..samples.samples.rows() {
            let cells: Vec<String> = samples.samples.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(f, "{},{}", cells.join(","), samples.energies[i])?;
        }
        writeln!(summary, "{},{},{},{},{},{}", s.dataset, s.model, s.class, s.in_class, s.mean_energy, s.uniform_energy)?;
        info!(
            "{} {} class {}: {:.0}% in class, energy {:.3} vs uniform {:.3}",
            s.dataset,
            s.model,
            s.class,
            100.0 * s.in_class,
            s.mean_energy,
            s.uniform_energy
        );
        out.push(s);
    }
    Ok(out)
}
