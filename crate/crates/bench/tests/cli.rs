use std::collections::BTreeSet;
use std::path::Path;

use faithcf::autodiff::{central_difference, relative_error};
use faithcf::data::SyntheticKind;
use faithcf::evaluation::Metric;
use faithcf::generators::{eccco_loss, CounterfactualProblem, GeneratorKind};
use faithcf::Tensor;
use faithcf_bench::artifacts::{prepare, Layout};
use faithcf_bench::bench::Variant;
use faithcf_bench::cli::main_with_args;
use faithcf_bench::commands::{benchmark, gridsearch, train};
use faithcf_bench::config::{BenchConfig, DatasetConfig, GridConfig, ModelConfig, ModelKind};
use faithcf_bench::plot::{build_scene, descent_direction, plot, plot_case, render_svg, Projection, SceneInput};

fn small(out: &Path, generators: Vec<GeneratorKind>) -> BenchConfig {
    BenchConfig {
        out: out.to_path_buf(),
        n_runs: 1,
        n_factuals: 5,
        datasets: vec![DatasetConfig::synthetic(SyntheticKind::LinearlySeparable)],
        models: vec![ModelConfig::new("mlp", ModelKind::Mlp)],
        generators,
        ..BenchConfig::default()
    }
}

fn write_config(dir: &Path, cfg: &BenchConfig) -> String {
    let path = dir.join("bench.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn run_cli(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("cfx").chain(args.iter().copied()))
}

/// A four-feature CSV dataset with two classes.
fn csv_dataset(dir: &Path) -> DatasetConfig {
    let path = dir.join("four.csv");
    let mut s = String::from("a,b,c,d,label\n");
    for i in 0..200 {
        let t = i as f64 / 200.0;
        let y = if i % 2 == 0 { "no" } else { "yes" };
        let shift = if i % 2 == 0 { -1.0 } else { 1.0 };
        s.push_str(&format!("{},{},{},{},{y}\n", shift + (7.0 * t).sin(), shift + (5.0 * t).cos(), t, 1.0 - t));
    }
    std::fs::write(&path, s).unwrap();
    DatasetConfig {
        name: "four".into(),
        synthetic: None,
        csv: Some(path),
        label_column: Some("label".into()),
        ..DatasetConfig::synthetic(SyntheticKind::LinearlySeparable)
    }
}

#[test]
fn exit_codes_separate_config_and_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_cli(&["--no-such-flag", "config"]), 1);
    assert_eq!(run_cli(&["--help"]), 0);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "n_runz = 3\n").unwrap();
    assert_eq!(run_cli(&["--config", bad.to_str().unwrap(), "config"]), 1);

    let cfg = small(dir.path(), vec![GeneratorKind::Wachter]);
    let good = write_config(dir.path(), &cfg);
    assert_eq!(run_cli(&["--config", &good, "config"]), 0);

    // An output directory that cannot be created fails at run time.
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, "").unwrap();
    let out = blocker.join("out");
    assert_eq!(run_cli(&["--config", &good, "--out", out.to_str().unwrap(), "train"]), 2);
}

#[test]
fn plots_need_two_features_unless_projected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), vec![GeneratorKind::Wachter]);
    cfg.datasets = vec![csv_dataset(dir.path())];
    cfg.plot.resolution = 10;
    cfg.plot.arrows = 4;
    let path = write_config(dir.path(), &cfg);
    assert_eq!(run_cli(&["--config", &path, "plot"]), 1);
    assert_eq!(run_cli(&["--config", &path, "plot", "--project-pca"]), 0);
    assert!(cfg.out.join("plots/four-mlp-wachter.svg").exists());
}

#[test]
fn plots_are_deterministic() {
    let render = |dir: &Path| {
        let mut cfg = small(dir, vec![GeneratorKind::Wachter, GeneratorKind::Eccco, GeneratorKind::Revise]);
        cfg.plot.resolution = 20;
        cfg.plot.arrows = 6;
        let files = plot(&cfg).unwrap();
        assert_eq!(files.len(), 3);
        files.iter().map(|f| std::fs::read(f).unwrap()).collect::<Vec<_>>()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = render(a.path());
    assert_eq!(first, render(b.path()));
    let svg = String::from_utf8(first[1].clone()).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn arrows_follow_the_negative_loss_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), vec![GeneratorKind::Eccco]);
    let layout = Layout::new(&cfg.out);
    let ws = prepare(&cfg, &layout, &[&cfg.datasets[0]], &[&cfg.models[0]]).unwrap();
    let case = plot_case(&cfg, &ws[0], 0, 0).unwrap();
    let variant = Variant::configured(&cfg, GeneratorKind::Eccco).unwrap();
    let rm = &ws[0].models[0];
    let problem = CounterfactualProblem::new(ws[0].data.x.row(case.row), case.target, &rm.model, &variant.params)
        .with_calibrator(&rm.calibrator);
    for x in [[0.0, 0.0], [1.0, -1.0], [-1.5, 0.5], [2.0, 2.0], [-0.3, 1.7]] {
        let arrow = descent_direction(&ws[0], &case, &variant, None, &x).unwrap();
        let numeric = central_difference(|p| eccco_loss(p, &problem).unwrap().components.total, &x, 1e-5);
        let neg: Vec<f64> = numeric.iter().map(|g| -g).collect();
        assert!(relative_error(&arrow, &neg, 1e-6) < 1e-4, "{arrow:?} vs {neg:?}");
    }
}

#[test]
fn failed_search_gives_a_factual_only_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), vec![GeneratorKind::Wachter]);
    let layout = Layout::new(&cfg.out);
    let ws = prepare(&cfg, &layout, &[&cfg.datasets[0]], &[&cfg.models[0]]).unwrap();
    let case = plot_case(&cfg, &ws[0], 0, 0).unwrap();
    let variant = Variant::configured(&cfg, GeneratorKind::Wachter).unwrap();
    let projection = Projection::for_workspace(&ws[0], false).unwrap();
    let xhat = Tensor::row_vector(vec![0.0, 0.0]);
    let scene = build_scene(&SceneInput {
        ws: &ws[0],
        case: &case,
        variant: &variant,
        result: None,
        xhat: &xhat,
        penalty: None,
        projection: &projection,
        resolution: 8,
        arrows: 3,
    })
    .unwrap();
    assert!(scene.path.is_empty());
    assert!(scene.counterfactual.is_none());
    let x = ws[0].data.x.row(case.row);
    assert_eq!(scene.factual, [x[0], x[1]]);
    assert!(!render_svg(&scene).contains("<polyline"));
}

#[test]
fn grid_covers_every_point_and_generator() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), vec![]);
    cfg.n_factuals = 4;
    cfg.grid = GridConfig {
        generators: vec![GeneratorKind::Eccco, GeneratorKind::Wachter],
        lambda1: vec![0.05, 0.1],
        lambda2: vec![0.1],
        lambda3: vec![0.1, 0.5],
        eta: vec![0.05],
        ..GridConfig::default()
    };
    let out = gridsearch(&cfg).unwrap();
    assert_eq!(out.rows.len(), 4 * 2);
    assert!(out.rows.iter().all(|r| r.n_rows == 4));
    let csv = std::fs::read_to_string(cfg.out.join("results/grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
    assert_eq!(out.best.len(), 2);
}

#[test]
fn one_point_grid_returns_that_point() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), vec![]);
    cfg.grid = GridConfig {
        lambda1: vec![0.07],
        lambda2: vec![0.3],
        lambda3: vec![0.2],
        eta: vec![0.04],
        ..GridConfig::default()
    };
    let out = gridsearch(&cfg).unwrap();
    let best = out.best[0].1.as_ref().expect("the single point is valid");
    assert_eq!((best.lambda1, best.lambda2, best.lambda3, best.eta), (0.07, 0.3, 0.2, 0.04));
}

#[test]
fn best_grid_point_is_no_less_faithful_than_the_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), vec![GeneratorKind::Eccco]);
    cfg.n_factuals = 10;
    let grid = gridsearch(&cfg).unwrap();
    let best = grid.best[0].1.as_ref().unwrap().mean_of(Metric::Unfaithfulness).unwrap();
    let bench = benchmark(&cfg).unwrap();
    let default = bench.report.group("linearly_separable", "mlp", "eccco").unwrap().all.as_ref().unwrap();
    assert!(best <= default.mean_of(Metric::Unfaithfulness) + 1e-12);
}

#[test]
fn benchmark_emits_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), vec![GeneratorKind::Wachter]);
    let once = benchmark(&cfg).unwrap();
    assert_eq!(once.report.groups.len(), 1);
    assert_eq!(once.rows.len(), 5);

    cfg.n_runs = 2;
    let twice = benchmark(&cfg).unwrap();
    assert_eq!(twice.rows.len(), 10);
    let runs: BTreeSet<usize> = twice.rows.iter().map(|r| r.run).collect();
    assert_eq!(runs, BTreeSet::from([0, 1]));

    cfg.generators = vec![GeneratorKind::Wachter, GeneratorKind::Eccco, GeneratorKind::Schut];
    let three = benchmark(&cfg).unwrap();
    assert_eq!(three.rows.len(), 2 * 5 * 3);
    assert_eq!(three.report.groups.len(), 3);
    let csv = std::fs::read_to_string(cfg.out.join("results/rows.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 30);
}

#[test]
fn retraining_reproduces_model_files() {
    let files = |dir: &Path| {
        let cfg = BenchConfig {
            out: dir.to_path_buf(),
            datasets: vec![DatasetConfig::synthetic(SyntheticKind::LinearlySeparable)],
            ..BenchConfig::default()
        };
        let acc = train(&cfg).unwrap();
        assert_eq!(acc.len(), cfg.models.len());
        for m in &cfg.models {
            let row = acc.iter().find(|r| r.model == m.name).unwrap();
            if m.kind == ModelKind::Mlp {
                assert!(row.test_accuracy >= 0.97, "{}", row.test_accuracy);
            }
        }
        let summary = std::fs::read_to_string(dir.join("results/accuracy.csv")).unwrap();
        assert_eq!(summary.lines().count(), 1 + cfg.models.len());
        let mut out = Vec::new();
        for m in &cfg.models {
            out.push(std::fs::read(dir.join(format!("models/linearly_separable-{}.json", m.name))).unwrap());
        }
        out
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(files(a.path()), files(b.path()));
}
