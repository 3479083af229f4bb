use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Metric, MetricRow};
use crate::error::{Error, Result};

/// One (generator, factual) cell of a benchmark. Exactly one of `metrics`
/// and `error` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub dataset: String,
    pub model: String,
    pub generator: String,
    pub run: usize,
    /// Row index of the factual in the dataset.
    pub factual: usize,
    pub target: usize,
    pub metrics: Option<MetricRow>,
    pub error: Option<String>,
}

const ROW_HEADER: [&str; 13] = [
    "dataset",
    "model",
    "generator",
    "run",
    "factual",
    "target",
    "unfaithfulness",
    "implausibility",
    "cost",
    "redundancy",
    "uncertainty",
    "validity",
    "error",
];

fn csv_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn write_rows_csv(rows: &[BenchmarkRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(ROW_HEADER).map_err(|e| csv_error(path, e))?;
    for r in rows {
        let mut rec = vec![
            r.dataset.clone(),
            r.model.clone(),
            r.generator.clone(),
            r.run.to_string(),
            r.factual.to_string(),
            r.target.to_string(),
        ];
        match &r.metrics {
            Some(m) => rec.extend(m.values().iter().map(|v| v.to_string())),
            None => rec.extend(std::iter::repeat_n(String::new(), 6)),
        }
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<BenchmarkRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let num = |i: usize| -> Result<usize> { field(i).parse().map_err(|e| csv_error(path, e)) };
        let metrics = if field(6).is_empty() {
            None
        } else {
            let mut v = [0.0; 6];
            for (k, slot) in v.iter_mut().enumerate() {
                *slot = field(6 + k).parse().map_err(|e| csv_error(path, e))?;
            }
            Some(MetricRow::from_values(v))
        };
        let error = Some(field(12).to_string()).filter(|s| !s.is_empty());
        rows.push(BenchmarkRow {
            dataset: field(0).to_string(),
            model: field(1).to_string(),
            generator: field(2).to_string(),
            run: num(3)?,
            factual: num(4)?,
            target: num(5)?,
            metrics,
            error,
        });
    }
    Ok(rows)
}

/// Mean and sample standard deviation across runs of the per-run means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: [f64; 6],
    pub std: [f64; 6],
    /// Runs that contributed at least one row.
    pub n_runs: usize,
    pub n_rows: usize,
}

impl MetricStats {
    fn from_runs(per_run: &BTreeMap<usize, Vec<[f64; 6]>>) -> Option<Self> {
        let means: Vec<[f64; 6]> = per_run
            .values()
            .filter(|rows| !rows.is_empty())
            .map(|rows| {
                let mut m = [0.0; 6];
                for r in rows {
                    for k in 0..6 {
                        m[k] += r[k];
                    }
                }
                m.map(|s| s / rows.len() as f64)
            })
            .collect();
        if means.is_empty() {
            return None;
        }
        let n = means.len() as f64;
        let mut mean = [0.0; 6];
        let mut std = [0.0; 6];
        for k in 0..6 {
            mean[k] = means.iter().map(|m| m[k]).sum::<f64>() / n;
            if means.len() > 1 {
                std[k] = (means.iter().map(|m| (m[k] - mean[k]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            }
        }
        Some(Self {
            mean,
            std,
            n_runs: means.len(),
            n_rows: per_run.values().map(Vec::len).sum(),
        })
    }

    pub fn mean_of(&self, m: Metric) -> f64 {
        self.mean[m as usize]
    }

    pub fn std_of(&self, m: Metric) -> f64 {
        self.std[m as usize]
    }
}

/// Distance from the baseline in baseline standard deviations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flag {
    #[default]
    None,
    /// More than one standard deviation away.
    One,
    /// More than two.
    Two,
}

impl Flag {
    fn between(value: f64, base_mean: f64, base_std: f64) -> Self {
        if !(base_std > 0.0) {
            return Flag::None;
        }
        let gap = (value - base_mean).abs();
        if gap > 2.0 * base_std {
            Flag::Two
        } else if gap > base_std {
            Flag::One
        } else {
            Flag::None
        }
    }

    pub fn stars(self) -> &'static str {
        match self {
            Flag::None => "",
            Flag::One => "*",
            Flag::Two => "**",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAggregate {
    pub dataset: String,
    pub model: String,
    pub generator: String,
    pub all: Option<MetricStats>,
    /// Statistics over valid counterfactuals only; `None` when there are none.
    pub valid_only: Option<MetricStats>,
    pub flags_all: [Flag; 6],
    pub flags_valid: [Flag; 6],
    pub n_failed: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub groups: Vec<GroupAggregate>,
    pub warnings: Vec<String>,
}

pub const BASELINE: &str = "wachter";

/// Group rows by (dataset, model, generator) and summarize each group over
/// runs, once over all counterfactuals and once over valid ones. Values more
/// than one or two baseline standard deviations from the Wachter group of
/// the same dataset and model are flagged.
pub fn aggregate(rows: &[BenchmarkRow]) -> BenchmarkReport {
    type Key = (String, String, String);
    let mut all: BTreeMap<Key, BTreeMap<usize, Vec<[f64; 6]>>> = BTreeMap::new();
    let mut valid: BTreeMap<Key, BTreeMap<usize, Vec<[f64; 6]>>> = BTreeMap::new();
    let mut failed: BTreeMap<Key, usize> = BTreeMap::new();
    for r in rows {
        let key = (r.dataset.clone(), r.model.clone(), r.generator.clone());
        let runs_all = all.entry(key.clone()).or_default();
        let runs_valid = valid.entry(key.clone()).or_default();
        runs_all.entry(r.run).or_default();
        runs_valid.entry(r.run).or_default();
        match &r.metrics {
            Some(m) => {
                runs_all.get_mut(&r.run).expect("inserted").push(m.values());
                if m.validity == 1.0 {
                    runs_valid.get_mut(&r.run).expect("inserted").push(m.values());
                }
            }
            None => *failed.entry(key).or_default() += 1,
        }
    }

    let mut report = BenchmarkReport::default();
    for (key, runs) in &all {
        report.groups.push(GroupAggregate {
            dataset: key.0.clone(),
            model: key.1.clone(),
            generator: key.2.clone(),
            all: MetricStats::from_runs(runs),
            valid_only: MetricStats::from_runs(&valid[key]),
            flags_all: [Flag::None; 6],
            flags_valid: [Flag::None; 6],
            n_failed: failed.get(key).copied().unwrap_or(0),
        });
    }

    let baselines: BTreeMap<(String, String), (Option<MetricStats>, Option<MetricStats>)> = report
        .groups
        .iter()
        .filter(|g| g.generator == BASELINE)
        .map(|g| ((g.dataset.clone(), g.model.clone()), (g.all.clone(), g.valid_only.clone())))
        .collect();
    let mut missing = Vec::new();
    for g in &mut report.groups {
        let Some((base_all, base_valid)) = baselines.get(&(g.dataset.clone(), g.model.clone())) else {
            let cell = format!("{}/{}", g.dataset, g.model);
            if !missing.contains(&cell) {
                missing.push(cell);
            }
            continue;
        };
        if g.generator == BASELINE {
            continue;
        }
        let flags = |stats: &Option<MetricStats>, base: &Option<MetricStats>| {
            let mut out = [Flag::None; 6];
            if let (Some(s), Some(b)) = (stats, base) {
                for k in 0..6 {
                    out[k] = Flag::between(s.mean[k], b.mean[k], b.std[k]);
                }
            }
            out
        };
        g.flags_all = flags(&g.all, base_all);
        g.flags_valid = flags(&g.valid_only, base_valid);
    }
    for cell in missing {
        report
            .warnings
            .push(format!("no {BASELINE} group for {cell}; flags omitted"));
    }
    report
}

fn fmt_cell(stats: &Option<MetricStats>, k: usize, flag: Flag) -> String {
    match stats {
        Some(s) => format!("{:.2} ± {:.2}{}", s.mean[k], s.std[k], flag.stars()),
        None => "n/a".to_string(),
    }
}

impl BenchmarkReport {
    pub fn group(&self, dataset: &str, model: &str, generator: &str) -> Option<&GroupAggregate> {
        self.groups
            .iter()
            .find(|g| g.dataset == dataset && g.model == model && g.generator == generator)
    }

    /// One line per group and subset (`all` / `valid`).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header = vec![
            "dataset".to_string(),
            "model".into(),
            "generator".into(),
            "subset".into(),
            "n_runs".into(),
            "n_rows".into(),
            "n_failed".into(),
        ];
        for m in Metric::ALL {
            header.push(format!("{}_mean", m.name()));
            header.push(format!("{}_std", m.name()));
            header.push(format!("{}_flag", m.name()));
        }
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for g in &self.groups {
            for (subset, stats, flags) in [("all", &g.all, &g.flags_all), ("valid", &g.valid_only, &g.flags_valid)] {
                let mut rec = vec![g.dataset.clone(), g.model.clone(), g.generator.clone(), subset.to_string()];
                match stats {
                    Some(s) => {
                        rec.push(s.n_runs.to_string());
                        rec.push(s.n_rows.to_string());
                    }
                    None => rec.extend(["0".to_string(), "0".to_string()]),
                }
                rec.push(g.n_failed.to_string());
                for k in 0..6 {
                    match stats {
                        Some(s) => {
                            rec.push(s.mean[k].to_string());
                            rec.push(s.std[k].to_string());
                        }
                        None => rec.extend([String::new(), String::new()]),
                    }
                    rec.push(flags[k].stars().to_string());
                }
                w.write_record(&rec).map_err(|e| csv_error(path, e))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Markdown tables: one for all counterfactuals, one for valid ones.
    /// Rows are (dataset, model, generator); columns are the six metrics as
    /// `mean ± std`, starred relative to the Wachter baseline.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        for (title, valid) in [("All counterfactuals", false), ("Valid counterfactuals only", true)] {
            out.push_str(&format!("## {title}\n\n"));
            out.push_str("| Dataset | Model | Generator |");
            for m in Metric::ALL {
                let arrow = if m.higher_is_better() { "↑" } else { "↓" };
                out.push_str(&format!(" {} {arrow} |", m.name()));
            }
            out.push_str("\n|---|---|---|");
            out.push_str(&"---:|".repeat(6));
            out.push('\n');
            for g in &self.groups {
                let (stats, flags) = if valid {
                    (&g.valid_only, &g.flags_valid)
                } else {
                    (&g.all, &g.flags_all)
                };
                out.push_str(&format!("| {} | {} | {} |", g.dataset, g.model, g.generator));
                for (k, flag) in flags.iter().enumerate() {
                    out.push_str(&format!(" {} |", fmt_cell(stats, k, *flag)));
                }
                out.push('\n');
            }
            out.push('\n');
        }
        if !self.warnings.is_empty() {
            out.push_str("Warnings:\n\n");
            for w in &self.warnings {
                out.push_str(&format!("- {w}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(generator: &str, run: usize, unfaith: f64, valid: f64) -> BenchmarkRow {
        BenchmarkRow {
            dataset: "d".into(),
            model: "m".into(),
            generator: generator.into(),
            run,
            factual: 0,
            target: 1,
            metrics: Some(MetricRow {
                unfaithfulness: unfaith,
                validity: valid,
                ..MetricRow::default()
            }),
            error: None,
        }
    }

    #[test]
    fn single_run_has_zero_std() {
        let rep = aggregate(&[row("wachter", 0, 1.0, 1.0), row("wachter", 0, 3.0, 1.0)]);
        let s = rep.groups[0].all.as_ref().unwrap();
        assert_eq!(s.mean_of(Metric::Unfaithfulness), 2.0);
        assert_eq!(s.std_of(Metric::Unfaithfulness), 0.0);
    }

    #[test]
    fn two_runs_sample_std() {
        let rep = aggregate(&[row("wachter", 0, 1.0, 1.0), row("wachter", 1, 3.0, 1.0)]);
        let s = rep.groups[0].all.as_ref().unwrap();
        assert_eq!(s.mean_of(Metric::Unfaithfulness), 2.0);
        assert!((s.std_of(Metric::Unfaithfulness) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn all_invalid_gives_empty_valid_group() {
        let rep = aggregate(&[row("eccco", 0, 1.0, 0.0)]);
        assert!(rep.groups[0].valid_only.is_none());
        assert!(rep.to_markdown().contains("n/a"));
        assert_eq!(rep.warnings.len(), 1);
    }

    #[test]
    fn flags_against_baseline() {
        let rows = vec![
            row("wachter", 0, 1.0, 1.0),
            row("wachter", 1, 3.0, 1.0),
            row("eccco", 0, 2.0 + 2.0 * 2f64.sqrt() + 0.1, 1.0),
            row("eccco", 1, 2.0 + 2.0 * 2f64.sqrt() + 0.1, 1.0),
            row("schut", 0, 2.0 + 1.5 * 2f64.sqrt(), 1.0),
        ];
        let rep = aggregate(&rows);
        assert_eq!(rep.group("d", "m", "eccco").unwrap().flags_all[0], Flag::Two);
        assert_eq!(rep.group("d", "m", "schut").unwrap().flags_all[0], Flag::One);
        assert!(rep.warnings.is_empty());
    }

    #[test]
    fn rows_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.csv");
        let mut failed = row("revise", 2, 0.0, 0.0);
        failed.metrics = None;
        failed.error = Some("boom, with comma".into());
        let rows = vec![row("wachter", 0, 1.25, 1.0), failed];
        write_rows_csv(&rows, &path).unwrap();
        assert_eq!(read_rows_csv(&path).unwrap(), rows);
    }
}
