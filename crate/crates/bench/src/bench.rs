//! Benchmark execution: factual sampling, reference samples, one search per
//! (factual, generator) cell, and evaluation.

use std::collections::BTreeMap;

use anyhow::{anyhow, Result};
use faithcf::generators::{
    run_eccco, run_eccco_plus, run_gradient, run_revise, run_schut, run_wachter, CounterfactualProblem,
    CounterfactualResult, GeneratorKind, GeneratorParams,
};
use faithcf::evaluation::{evaluate, BenchmarkRow, EvalContext};
use faithcf::models::Classifier;
use faithcf::rng::{derive_seed, rng_from, tag};
use faithcf::sampler::{generate_conditional, ClassifierEnergy, SgldConfig};
use faithcf::Tensor;
use rand::Rng as _;
use rayon::prelude::*;

use crate::artifacts::Workspace;
use crate::config::BenchConfig;

/// One counterfactual problem drawn for a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub workspace: usize,
    pub model: usize,
    pub run: usize,
    /// Position among the factuals of this run.
    pub index: usize,
    /// Row of the factual in the dataset.
    pub row: usize,
    pub target: usize,
}

/// A generator with the parameters it runs under; `label` names it in the
/// output rows.
#[derive(Clone, Debug)]
pub struct Variant {
    pub label: String,
    pub kind: GeneratorKind,
    pub params: GeneratorParams,
}

impl Variant {
    pub fn configured(cfg: &BenchConfig, kind: GeneratorKind) -> Result<Self> {
        Ok(Self { label: kind.name().to_string(), kind, params: cfg.params_for(kind)? })
    }
}

/// Factuals are uniform over the test split, targets uniform over the other
/// classes; draws the model already assigns to the target are redrawn.
pub fn sample_cases(cfg: &BenchConfig, ws: &Workspace, wi: usize, mi: usize, run: usize) -> Result<Vec<Case>> {
    let ds = &ws.data;
    let model = &ws.models[mi].model;
    let test = &ds.splits.test;
    let k = ds.n_classes();
    if test.is_empty() {
        return Err(anyhow!("dataset `{}` has an empty test split", ds.name));
    }
    let (x, _) = ds.rows(test);
    let pred = model.predict_label(&x)?;
    let mut rng = rng_from(
        cfg.seed,
        &[tag("factuals"), tag(&ds.name), tag(&ws.models[mi].name), run as u64],
    );
    let mut cases = Vec::with_capacity(cfg.n_factuals);
    let budget = 1000 * cfg.n_factuals;
    for _ in 0..budget {
        if cases.len() == cfg.n_factuals {
            break;
        }
        let pos = rng.random_range(0..test.len());
        let y = ds.labels[test[pos]];
        let draw = rng.random_range(0..k - 1);
        let target = if draw < y { draw } else { draw + 1 };
        if pred[pos] == target {
            continue;
        }
        cases.push(Case { workspace: wi, model: mi, run, index: cases.len(), row: test[pos], target });
    }
    if cases.len() < cfg.n_factuals {
        return Err(anyhow!(
            "could not draw {} factuals for {} on {}: the model predicts the drawn target almost everywhere",
            cfg.n_factuals,
            ws.models[mi].name,
            ds.name
        ));
    }
    Ok(cases)
}

/// Which reference set a case uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Purpose {
    /// X̂ for the unfaithfulness metric.
    Metric,
    /// Reference set of the ECCCo-L1 penalty.
    Penalty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SampleKey {
    pub purpose: Purpose,
    pub workspace: usize,
    pub model: usize,
    pub run: usize,
    pub target: usize,
    /// Case index under strict sampling, otherwise `None`.
    pub index: Option<usize>,
}

impl SampleKey {
    pub fn for_case(case: &Case, purpose: Purpose, strict: bool) -> Self {
        Self {
            purpose,
            workspace: case.workspace,
            model: case.model,
            run: case.run,
            target: case.target,
            index: strict.then_some(case.index),
        }
    }

    fn seed(&self, cfg: &BenchConfig, workspaces: &[Workspace]) -> u64 {
        let ws = &workspaces[self.workspace];
        let purpose = match self.purpose {
            Purpose::Metric => tag("xhat"),
            Purpose::Penalty => tag("l1"),
        };
        let mut path = vec![
            purpose,
            tag(&ws.data.name),
            tag(&ws.models[self.model].name),
            self.run as u64,
            self.target as u64,
        ];
        path.extend(self.index.map(|i| i as u64));
        derive_seed(cfg.seed, &path)
    }
}

pub fn sgld_for(cfg: &BenchConfig, ws: &Workspace) -> SgldConfig {
    cfg.sampling.sgld(&ws.data.train_bounds())
}

/// Draw every reference set the cases need, in parallel.
pub fn draw_samples(
    cfg: &BenchConfig,
    workspaces: &[Workspace],
    keys: Vec<SampleKey>,
) -> Result<BTreeMap<SampleKey, Tensor>> {
    let drawn: Vec<(SampleKey, Tensor)> = keys
        .into_par_iter()
        .map(|key| -> Result<(SampleKey, Tensor)> {
            let ws = &workspaces[key.workspace];
            let model = &ws.models[key.model].model;
            let (n_batch, n_keep) = match key.purpose {
                Purpose::Metric => (cfg.sampling.n_batch, cfg.sampling.n_keep),
                Purpose::Penalty => {
                    let p = cfg.params_for(GeneratorKind::EcccoL1)?;
                    (p.l1_n_batch, p.l1_n_keep)
                }
            };
            let out = generate_conditional(
                &ClassifierEnergy(model),
                key.target,
                n_batch,
                n_keep,
                &sgld_for(cfg, ws),
                key.seed(cfg, workspaces),
            )?;
            Ok((key, out.samples))
        })
        .collect::<Result<_>>()?;
    Ok(drawn.into_iter().collect())
}

/// Run one generator on one case.
pub fn search(
    ws: &Workspace,
    case: &Case,
    variant: &Variant,
    penalty_samples: Option<&Tensor>,
) -> Result<CounterfactualResult> {
    let rm = &ws.models[case.model];
    let x = ws.data.x.row(case.row);
    let problem = CounterfactualProblem::new(x, case.target, &rm.model, &variant.params).with_calibrator(&rm.calibrator);
    Ok(match variant.kind {
        GeneratorKind::Wachter => run_wachter(&problem)?,
        GeneratorKind::Schut => run_schut(&problem)?,
        GeneratorKind::Revise => run_revise(&problem, &ws.vae)?,
        GeneratorKind::Eccco => run_eccco(&problem)?,
        GeneratorKind::EcccoPlus => run_eccco_plus(&problem, &ws.pca)?,
        GeneratorKind::EcccoL1 => {
            let samples = penalty_samples.ok_or_else(|| anyhow!("missing ECCCo-L1 reference samples"))?;
            run_gradient(&problem.with_samples(samples))?
        }
    })
}

/// Search and evaluate one cell; failures become error rows.
fn cell(
    ws: &Workspace,
    case: &Case,
    variant: &Variant,
    samples: &BTreeMap<SampleKey, Tensor>,
    target_rows: &Tensor,
    strict: bool,
) -> BenchmarkRow {
    let rm = &ws.models[case.model];
    let mut row = BenchmarkRow {
        dataset: ws.data.name.clone(),
        model: rm.name.clone(),
        generator: variant.label.clone(),
        run: case.run,
        factual: case.row,
        target: case.target,
        metrics: None,
        error: None,
    };
    let outcome = (|| -> Result<_> {
        let penalty = samples.get(&SampleKey::for_case(case, Purpose::Penalty, strict));
        let xhat = samples
            .get(&SampleKey::for_case(case, Purpose::Metric, strict))
            .ok_or_else(|| anyhow!("missing reference samples"))?;
        let res = search(ws, case, variant, penalty)?;
        let ctx = EvalContext { model: &rm.model, calibrator: &rm.calibrator, target_rows, samples: xhat };
        let m = evaluate(&ctx, &res.x, ws.data.x.row(case.row), case.target)?;
        if (m.validity == 1.0) != res.valid {
            return Err(anyhow!("validity mismatch between search ({}) and evaluation ({})", res.valid, m.validity));
        }
        Ok(m)
    })();
    match outcome {
        Ok(m) => row.metrics = Some(m),
        Err(e) => {
            log::warn!("{} {} {} run {} factual {}: {e:#}", row.dataset, row.model, row.generator, case.run, case.row);
            row.error = Some(format!("{e:#}"));
        }
    }
    row
}

/// Every case crossed with every variant, in case-major order. The output
/// does not depend on the number of worker threads.
pub fn run_cells(cfg: &BenchConfig, workspaces: &[Workspace], cases: &[Case], variants: &[Variant]) -> Result<Vec<BenchmarkRow>> {
    let strict = cfg.strict_sampling;
    let mut keys: Vec<SampleKey> = cases.iter().map(|c| SampleKey::for_case(c, Purpose::Metric, strict)).collect();
    if variants.iter().any(|v| v.kind == GeneratorKind::EcccoL1) {
        keys.extend(cases.iter().map(|c| SampleKey::for_case(c, Purpose::Penalty, strict)));
    }
    keys.sort();
    keys.dedup();
    let samples = draw_samples(cfg, workspaces, keys)?;
    let mut target_rows: BTreeMap<(usize, usize), Tensor> = BTreeMap::new();
    for c in cases {
        target_rows
            .entry((c.workspace, c.target))
            .or_insert_with(|| workspaces[c.workspace].data.train_rows_of_class(c.target));
    }
    let cells: Vec<(&Case, &Variant)> = cases.iter().flat_map(|c| variants.iter().map(move |v| (c, v))).collect();
    Ok(cells
        .into_par_iter()
        .map(|(c, v)| cell(&workspaces[c.workspace], c, v, &samples, &target_rows[&(c.workspace, c.target)], strict))
        .collect())
}

/// Cases for every workspace, model and run.
pub fn all_cases(cfg: &BenchConfig, workspaces: &[Workspace]) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for (wi, ws) in workspaces.iter().enumerate() {
        for mi in 0..ws.models.len() {
            for run in 0..cfg.n_runs {
                cases.extend(sample_cases(cfg, ws, wi, mi, run)?);
            }
        }
    }
    Ok(cases)
}
