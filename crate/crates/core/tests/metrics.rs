use faithcf::conformal::ConformalCalibrator;
use faithcf::evaluation::{
    aggregate, cost, evaluate, implausibility, redundancy, unfaithfulness, validity, BenchmarkRow, EvalContext, Flag,
    Metric, MetricRow, REDUNDANCY_TOL,
};
use faithcf::models::{Classifier, Mlp};
use faithcf::rng::rng_from;
use faithcf::Tensor;
use rand::Rng as _;

fn brute_mean_distance(x: &[f64], reference: &Tensor) -> f64 {
    let mut total = 0.0;
    for i in 0..reference.rows() {
        let mut sq = 0.0;
        for j in 0..reference.cols() {
            let d = x[j] - reference.get(i, j);
            sq += d * d;
        }
        total += sq.sqrt();
    }
    total / reference.rows() as f64
}

#[test]
fn distance_metrics_match_double_loops() {
    for trial in 0..200 {
        let mut rng = rng_from(21, &[trial]);
        let d = rng.random_range(1..8);
        let n = rng.random_range(1..60);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-4.0..4.0)).collect();
        let r = Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
        let want = brute_mean_distance(&x, &r);
        assert!((implausibility(&x, &r).unwrap() - want).abs() < 1e-12);
        assert!((unfaithfulness(&x, &r).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn crafted_cost_redundancy_validity() {
    // (x′, x, cost, redundancy)
    let cases: [(&[f64], &[f64], f64, f64); 10] = [
        (&[0.0], &[0.0], 0.0, 1.0),
        (&[1.0], &[0.0], 1.0, 0.0),
        (&[1.0, 2.0], &[1.0, 2.0], 0.0, 1.0),
        (&[1.0, 2.5], &[1.0, 2.0], 0.5, 0.5),
        (&[-1.0, -1.0], &[1.0, 1.0], 4.0, 0.0),
        (&[0.0, 0.0, 3.0], &[0.0, 0.0, 0.0], 3.0, 2.0 / 3.0),
        (&[1e-7, 0.0], &[0.0, 0.0], 1e-7, 1.0),
        (&[1e-5, 0.0], &[0.0, 0.0], 1e-5, 0.5),
        (&[2.0, -3.0, 4.0, 0.0], &[1.0, -1.0, 1.0, 0.0], 6.0, 0.25),
        (&[0.5, 0.5, 0.5, 0.5], &[0.5, 0.5, 0.5, -0.5], 1.0, 0.75),
    ];
    for (i, (xp, x, c, r)) in cases.iter().enumerate() {
        assert!((cost(xp, x) - c).abs() < 1e-12, "case {i} cost");
        assert!((redundancy(xp, x, REDUNDANCY_TOL) - r).abs() < 1e-12, "case {i} redundancy");
    }
    // Logits (0, x₀): class 1 iff x₀ > 0.
    let mut m = Mlp::zeros(&[1, 2]).unwrap();
    m.layers[0].weight = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
    let checks = [(0.5, 1, 1.0), (0.5, 0, 0.0), (-0.5, 0, 1.0), (-0.5, 1, 0.0), (3.0, 1, 1.0)];
    for (x, target, want) in checks {
        assert_eq!(validity(&m, &[x], target).unwrap(), want);
    }
}

#[test]
fn evaluate_combines_the_six_metrics() {
    let m = Mlp::new(&[2, 4, 2], 0).unwrap();
    let cal = ConformalCalibrator::from_scores((0..20).map(|i| i as f64 / 20.0).collect(), 0.1).unwrap();
    let targets = Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, 0.0]]).unwrap();
    let samples = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
    let ctx = EvalContext { model: &m, calibrator: &cal, target_rows: &targets, samples: &samples };
    let (xp, x) = ([1.0, 1.0], [1.0, 0.0]);
    let row = evaluate(&ctx, &xp, &x, 1).unwrap();
    assert!((row.implausibility - (0.0 + 2.0f64.sqrt()) / 2.0).abs() < 1e-12);
    assert_eq!(row.unfaithfulness, 1.0);
    assert_eq!(row.cost, 1.0);
    assert_eq!(row.redundancy, 0.5);
    assert_eq!(row.uncertainty, cal.set_size_penalty(&m, &xp).unwrap());
    let pred = m.predict_label(&Tensor::row_vector(xp.to_vec())).unwrap()[0];
    assert_eq!(row.validity, if pred == 1 { 1.0 } else { 0.0 });
}

fn row(generator: &str, run: usize, v: f64, valid: bool) -> BenchmarkRow {
    BenchmarkRow {
        dataset: "d".into(),
        model: "m".into(),
        generator: generator.into(),
        run,
        factual: 0,
        target: 1,
        metrics: Some(MetricRow {
            unfaithfulness: v,
            implausibility: v,
            cost: v,
            redundancy: 0.0,
            uncertainty: 0.0,
            validity: if valid { 1.0 } else { 0.0 },
        }),
        error: None,
    }
}

#[test]
fn aggregation_arithmetic_and_flags() {
    let rows = vec![
        row("wachter", 0, 1.0, true),
        row("wachter", 1, 3.0, true),
        row("eccco", 0, 10.0, true),
        row("eccco", 0, 12.0, false),
        row("eccco", 1, 10.0, true),
    ];
    let report = aggregate(&rows);
    let w = report.group("d", "m", "wachter").unwrap().all.as_ref().unwrap();
    assert_eq!(w.mean_of(Metric::Cost), 2.0);
    assert!((w.std_of(Metric::Cost) - 2.0f64.sqrt()).abs() < 1e-12);
    let e = report.group("d", "m", "eccco").unwrap();
    let all = e.all.as_ref().unwrap();
    assert_eq!(all.mean_of(Metric::Cost), 10.5);
    assert_eq!(e.valid_only.as_ref().unwrap().mean_of(Metric::Cost), 10.0);
    // 10.5 is more than two baseline stds (≈1.41) above 2.
    assert_eq!(e.flags_all[Metric::ALL.iter().position(|&m| m == Metric::Cost).unwrap()], Flag::Two);
    assert!(report.warnings.is_empty());
    assert!(aggregate(&rows[2..]).warnings.iter().any(|w| w.contains("wachter")));
}
