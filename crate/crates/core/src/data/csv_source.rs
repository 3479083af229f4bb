use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;

use super::{split, Dataset, SplitFractions};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{rng_from, tag};

#[derive(Clone, Debug)]
pub struct CsvOptions {
    pub label_column: String,
    pub standardize: bool,
    /// Undersample every class to the minority count.
    pub balance: bool,
    pub seed: u64,
    /// When set, the rows are split and standardization statistics come from
    /// the training split only; otherwise they come from all rows.
    pub fractions: Option<SplitFractions>,
}

impl CsvOptions {
    pub fn new(label_column: &str) -> Self {
        Self {
            label_column: label_column.to_string(),
            standardize: true,
            balance: false,
            seed: 0,
            fractions: Some(SplitFractions::default()),
        }
    }
}

/// Load a headed, comma-separated file with numeric features and one
/// categorical label column. Class indices follow the sorted label strings.
pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<Dataset> {
    let csv_err = |message: String| Error::Csv {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{}: {e}", path.display()),
            )),
            _ => csv_err(e.to_string()),
        })?;
    let headers = reader.headers().map_err(|e| csv_err(e.to_string()))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == opts.label_column)
        .ok_or_else(|| csv_err(format!("no column named `{}`", opts.label_column)))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();

    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(e.to_string()))?;
        let mut values = Vec::with_capacity(feature_names.len());
        for (i, cell) in record.iter().enumerate() {
            if i == label_idx {
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| Error::NonNumeric {
                column: headers.get(i).unwrap_or_default().to_string(),
                row: row + 1,
                value: cell.to_string(),
            })?;
            values.push(v);
        }
        features.push(values);
        raw_labels.push(record.get(label_idx).unwrap_or_default().trim().to_string());
    }

    let levels: BTreeMap<&str, usize> = {
        let mut names: Vec<&str> = raw_labels.iter().map(String::as_str).collect();
        names.sort_unstable();
        names.dedup();
        names.into_iter().enumerate().map(|(i, n)| (n, i)).collect()
    };
    if levels.len() < 2 {
        return Err(Error::SingleClass(opts.label_column.clone()));
    }
    let class_names: Vec<String> = levels.keys().map(|s| s.to_string()).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|l| levels[l.as_str()]).collect();

    let mut keep: Vec<usize> = (0..labels.len()).collect();
    if opts.balance {
        let mut rng = rng_from(opts.seed, &[tag("balance")]);
        let k = class_names.len();
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let minority = by_class.iter().map(Vec::len).min().unwrap_or(0);
        keep = by_class
            .into_iter()
            .flat_map(|mut rows| {
                rows.shuffle(&mut rng);
                rows.truncate(minority);
                rows
            })
            .collect();
        keep.sort_unstable();
    }

    let rows: Vec<Vec<f64>> = keep.iter().map(|&i| features[i].clone()).collect();
    let x = Tensor::from_rows(&rows).map_err(|_| csv_err("ragged rows".into()))?;
    let x = if rows.is_empty() {
        Tensor::zeros(&[0, feature_names.len()])
    } else {
        x
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut ds = Dataset::new(&name, x, keep.iter().map(|&i| labels[i]).collect(), class_names.len())?;
    ds.feature_names = feature_names;
    ds.class_names = class_names;

    if let Some(fractions) = opts.fractions {
        ds = split(&ds, fractions, opts.seed)?;
    }
    if opts.standardize {
        ds.standardize();
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let path = dir.path().join("data.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    fn opts(balance: bool) -> CsvOptions {
        CsvOptions {
            label_column: "y".into(),
            standardize: false,
            balance,
            seed: 1,
            fractions: None,
        }
    }

    #[test]
    fn balancing_keeps_minority_count_per_class() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "f1,y,f2\n1.0,a,2.0\n3.0,a,4.0\n5.0,b,6.0\n");
        let ds = load_csv(&path, &opts(true)).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels.iter().filter(|&&l| l == 0).count(), 1);
        assert_eq!(ds.feature_names, vec!["f1", "f2"]);
        assert_eq!(ds.class_names, vec!["a", "b"]);
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = load_csv(&dir.path().join("nope.csv"), &opts(false));
        assert!(matches!(missing, Err(Error::Io(_))));

        let path = write(&dir, "f1,y\n1.0,a\nabc,b\n");
        assert!(matches!(load_csv(&path, &opts(false)), Err(Error::NonNumeric { row: 2, .. })));

        let path = write(&dir, "f1,y\n1.0,a\n2.0,a\n");
        assert!(matches!(load_csv(&path, &opts(false)), Err(Error::SingleClass(_))));
    }

    #[test]
    fn standardizes_on_training_split_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("f1,f2,y\n");
        for i in 0..40 {
            body.push_str(&format!("{},{},{}\n", i, 7, if i % 2 == 0 { "p" } else { "q" }));
        }
        let path = write(&dir, &body);
        let ds = load_csv(
            &path,
            &CsvOptions {
                standardize: true,
                fractions: Some(SplitFractions::new(0.5, 0.25, 0.25)),
                ..opts(false)
            },
        )
        .unwrap();
        let st = ds.standardization.as_ref().unwrap();
        assert_eq!(st.std[1], 1.0);
        let train_mean: f64 = ds.splits.train.iter().map(|&i| ds.x.get(i, 0)).sum::<f64>() / 20.0;
        assert!(train_mean.abs() < 1e-12);
    }
}
