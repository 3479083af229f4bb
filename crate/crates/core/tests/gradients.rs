//! Reverse-mode gradients against central finite differences.

use faithcf::autodiff::{central_difference, relative_error};
use faithcf::conformal::{ConformalCalibrator, Threshold};
use faithcf::generators::{eccco_loss, CounterfactualProblem, GeneratorParams, Pca, SearchSpace, YLoss};
use faithcf::models::{Classifier, DeepEnsemble, Mlp, Vae};
use faithcf::rng::{rng_from, Rng};
use faithcf::{Tape, Tensor, Var};
use rand::Rng as _;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const TRIALS: u64 = 100;

fn uniform(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Small MLP with random shape; returns it with its input and output widths.
fn random_mlp(rng: &mut Rng, seed: u64) -> (Mlp, usize, usize) {
    let d = rng.random_range(1..5);
    let h = rng.random_range(2..8);
    let k = rng.random_range(2..5);
    (Mlp::new(&[d, h, h, k], seed).unwrap(), d, k)
}

fn assert_close(analytic: &[f64], numeric: &[f64], what: &str, trial: u64) {
    let err = relative_error(analytic, numeric, 1e-6);
    assert!(
        err < TOL,
        "{what} trial {trial}: rel err {err:e}\nanalytic {analytic:?}\nnumeric  {numeric:?}"
    );
}

/// Scalar function of an `[r, c]` input built on a tape, checked at `x`.
fn check_fn(r: usize, x: &[f64], what: &str, trial: u64, f: impl for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>) {
    let c = x.len() / r;
    let value = |p: &[f64]| {
        let tape = Tape::new();
        let v = tape.constant(Tensor::matrix(r, c, p.to_vec()).unwrap());
        f(&tape, v).item()
    };
    let tape = Tape::new();
    let v = tape.var(Tensor::matrix(r, c, x.to_vec()).unwrap());
    let out = f(&tape, v);
    let g = tape.grad_wrt_input(out, v).unwrap();
    assert_close(g.data(), &central_difference(value, x, H), what, trial);
}

fn check_unary(x: &[f64], what: &str, trial: u64, f: impl for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>) {
    check_fn(1, x, what, trial, f)
}

#[test]
fn elementwise_primitives() {
    for trial in 0..TRIALS {
        let mut rng = rng_from(1, &[trial]);
        let n = rng.random_range(1..6);
        // Keep clear of the kinks of relu and abs and the pole of ln.
        let x: Vec<f64> = uniform(&mut rng, n, 0.1, 2.0)
            .into_iter()
            .map(|v| if rng.random_bool(0.5) { v } else { -v })
            .collect();
        let w = Tensor::row_vector(uniform(&mut rng, n, -1.0, 1.0));
        check_unary(&x, "relu", trial, |t, v| v.relu().mul(t.constant(w.clone())).unwrap().sum());
        check_unary(&x, "abs", trial, |t, v| v.abs().mul(t.constant(w.clone())).unwrap().sum());
        check_unary(&x, "sigmoid", trial, |t, v| v.sigmoid().mul(t.constant(w.clone())).unwrap().sum());
        check_unary(&x, "exp", trial, |t, v| v.exp().mul(t.constant(w.clone())).unwrap().sum());
        check_unary(&x, "square", trial, |t, v| v.square().mul(t.constant(w.clone())).unwrap().sum());
        check_unary(&x, "ln", trial, |_, v| v.square().add_scalar(0.5).ln().sum());
        check_unary(&x, "sqrt", trial, |_, v| v.square().add_scalar(0.1).sqrt().sum());
        check_unary(&x, "neg/scale/add_scalar", trial, |_, v| {
            v.neg().scale(3.0).add_scalar(1.5).square().mean()
        });
    }
}

#[test]
fn reductions_and_selection() {
    for trial in 0..TRIALS {
        let mut rng = rng_from(2, &[trial]);
        let n = rng.random_range(2..6);
        let x = uniform(&mut rng, n, -2.0, 2.0);
        let w = Tensor::row_vector(uniform(&mut rng, n, -1.0, 1.0));
        let k = rng.random_range(0..n);
        let start = rng.random_range(0..n);
        let len = rng.random_range(1..=n - start);
        check_unary(&x, "softmax", trial, |t, v| v.softmax().mul(t.constant(w.clone())).unwrap().sum());
        check_unary(&x, "logsumexp", trial, |_, v| v.logsumexp().sum());
        check_unary(&x, "pick", trial, |_, v| v.pick(&[k]).unwrap().sum().square());
        check_unary(&x, "slice", trial, |_, v| v.slice(start, len).unwrap().exp().sum());
        check_unary(&x, "sum_rows", trial, |_, v| v.sum_rows().square().sum());
    }
}

#[test]
fn matmul_add_sub_mul_with_broadcast() {
    for trial in 0..TRIALS {
        let mut rng = rng_from(3, &[trial]);
        let (r, c, m) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        let a = uniform(&mut rng, r * c, -1.5, 1.5);
        let b = Tensor::matrix(c, m, uniform(&mut rng, c * m, -1.5, 1.5)).unwrap();
        let bias = Tensor::row_vector(uniform(&mut rng, m, -1.0, 1.0));
        let other = Tensor::matrix(r, m, uniform(&mut rng, r * m, -1.0, 1.0)).unwrap();
        check_fn(r, &a, "matmul chain", trial, |tape, av| {
            av.matmul(tape.constant(b.clone()))
                .unwrap()
                .add(tape.constant(bias.clone()))
                .unwrap()
                .mul(tape.constant(other.clone()))
                .unwrap()
                .sub(tape.constant(Tensor::scalar(0.3)))
                .unwrap()
                .square()
                .sum()
        });
    }
}

#[test]
fn mlp_logits_wrt_input() {
    for trial in 0..TRIALS {
        let mut rng = rng_from(4, &[trial]);
        let (mlp, d, k) = random_mlp(&mut rng, trial);
        let x = uniform(&mut rng, d, -2.0, 2.0);
        let c = rng.random_range(0..k);
        let value = |p: &[f64]| mlp.logits(&Tensor::row_vector(p.to_vec())).unwrap().get(0, c);
        let tape = Tape::new();
        let xv = tape.var(Tensor::row_vector(x.clone()));
        let out = mlp.logits_on(&tape, xv).unwrap().pick(&[c]).unwrap().sum();
        let g = tape.grad_wrt_input(out, xv).unwrap();
        assert_close(g.data(), &central_difference(value, &x, H), "mlp logit", trial);
    }
}

#[test]
fn mlp_loss_wrt_parameters() {
    for trial in 0..TRIALS {
        let mut rng = rng_from(5, &[trial]);
        let (mlp, d, k) = random_mlp(&mut rng, trial);
        let n = rng.random_range(1..5);
        let x = Tensor::matrix(n, d, uniform(&mut rng, n * d, -2.0, 2.0)).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let layer = rng.random_range(0..mlp.layers.len());

        let loss_with = |w: &[f64]| {
            let mut m = mlp.clone();
            let shape = m.layers[layer].weight.shape().to_vec();
            m.layers[layer].weight = Tensor::new(shape, w.to_vec()).unwrap();
            let tape = Tape::new();
            let logits = m.forward_tape(&tape, tape.constant(x.clone())).unwrap();
            faithcf::models::cross_entropy(logits, &labels).unwrap().item()
        };
        let tape = Tape::new();
        let params = mlp.bind(&tape, true);
        let logits = mlp.forward_bound(&params, tape.constant(x.clone())).unwrap();
        let loss = faithcf::models::cross_entropy(logits, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.wrt(params[layer].0);
        let numeric = central_difference(loss_with, mlp.layers[layer].weight.data(), H);
        assert_close(analytic.data(), &numeric, "cross-entropy wrt weights", trial);
    }
}

#[test]
fn energy_matches_negative_logit_gradient() {
    for trial in 0..TRIALS {
        let mut rng = rng_from(6, &[trial]);
        let (mlp, d, k) = random_mlp(&mut rng, trial);
        let ens = DeepEnsemble {
            members: vec![mlp.clone(), Mlp::new(&[d, 4, k], trial + 1000).unwrap()],
        };
        let x = uniform(&mut rng, d, -2.0, 2.0);
        let y = rng.random_range(0..k);
        for (name, model) in [("mlp", &mlp as &dyn Classifier), ("ensemble", &ens as &dyn Classifier)] {
            let numeric = central_difference(|p| model.energy(p, y).unwrap(), &x, H);
            let tape = Tape::new();
            let xv = tape.var(Tensor::row_vector(x.clone()));
            let e = model.logits_on(&tape, xv).unwrap().pick(&[y]).unwrap().neg().sum();
            let g = tape.grad_wrt_input(e, xv).unwrap();
            assert_close(g.data(), &numeric, name, trial);
        }
    }
}

fn random_calibrator(rng: &mut Rng, threshold: Threshold) -> ConformalCalibrator {
    let n = 50;
    let scores = uniform(rng, n, 0.0, 1.0);
    ConformalCalibrator::from_scores(scores, rng.random_range(0.05..0.3))
        .unwrap()
        .with_threshold(threshold)
}

#[test]
fn smooth_membership_and_set_size() {
    for trial in 0..TRIALS {
        let mut rng = rng_from(7, &[trial]);
        let (mlp, d, k) = random_mlp(&mut rng, trial);
        let threshold = if trial % 2 == 0 { Threshold::Alpha } else { Threshold::Quantile };
        let cal = random_calibrator(&mut rng, threshold).with_kappa(rng.random_range(0.0..1.0));
        let x = uniform(&mut rng, d, -2.0, 2.0);
        let y = rng.random_range(0..k);

        let numeric = central_difference(|p| cal.smooth_membership(&mlp, p, y).unwrap(), &x, H);
        let tape = Tape::new();
        let xv = tape.var(Tensor::row_vector(x.clone()));
        let m = cal.memberships_on(mlp.logits_on(&tape, xv).unwrap()).pick(&[y]).unwrap().sum();
        let g = tape.grad_wrt_input(m, xv).unwrap();
        assert_close(g.data(), &numeric, "membership", trial);

        let numeric = central_difference(|p| cal.set_size_penalty(&mlp, p).unwrap(), &x, H);
        let (omega, analytic) = cal.set_size_grad(&mlp, &x).unwrap();
        assert!((omega - cal.set_size_penalty(&mlp, &x).unwrap()).abs() < 1e-12);
        assert_close(&analytic, &numeric, "set size", trial);
    }
}

/// A problem whose model does not already predict some other class at `x`.
fn pick_target(model: &dyn Classifier, x: &[f64], k: usize, rng: &mut Rng) -> usize {
    let pred = model.predict_label(&Tensor::row_vector(x.to_vec())).unwrap()[0];
    let mut t = rng.random_range(0..k - 1);
    if t >= pred {
        t += 1;
    }
    t
}

#[test]
fn eccco_loss_components_in_every_space() {
    for trial in 0..TRIALS {
        let mut rng = rng_from(8, &[trial]);
        let (mlp, d, k) = random_mlp(&mut rng, trial);
        let cal = random_calibrator(&mut rng, Threshold::Alpha);
        let factual = uniform(&mut rng, d, -2.0, 2.0);
        let target = pick_target(&mlp, &factual, k, &mut rng);
        let n = 20;
        let data = Tensor::matrix(n, d, uniform(&mut rng, n * d, -2.0, 2.0)).unwrap();
        let pca = Pca::fit(&data, rng.random_range(1..=d)).unwrap();
        let vae = Vae::new(d, 4, rng.random_range(1..=d), trial).unwrap();
        let samples = Tensor::matrix(5, d, uniform(&mut rng, 5 * d, -2.0, 2.0)).unwrap();
        let params = GeneratorParams {
            lambda1: rng.random_range(0.01..1.0),
            lambda2: rng.random_range(0.01..1.0),
            lambda3: rng.random_range(0.01..1.0),
            squared_energy: trial % 3 != 0,
            yloss: if trial % 4 == 1 { YLoss::SetClassification } else { YLoss::CrossEntropy },
            ..GeneratorParams::default()
        };
        let spaces = [SearchSpace::Feature, SearchSpace::Pca(&pca), SearchSpace::Vae(&vae)];
        for space in spaces {
            let mut problem = CounterfactualProblem::new(&factual, target, &mlp, &params)
                .with_calibrator(&cal)
                .with_space(space);
            if trial % 5 == 2 {
                problem = problem.with_samples(&samples);
            }
            let z = space.encode(&factual).unwrap();
            let z: Vec<f64> = z.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
            let eval = eccco_loss(&z, &problem).unwrap();
            let numeric = central_difference(|p| eccco_loss(p, &problem).unwrap().components.total, &z, H);
            assert_close(&eval.grad, &numeric, space.name(), trial);
        }
    }
}
