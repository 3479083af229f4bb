use faithcf::models::Mlp;
use faithcf::sampler::{
    generate_conditional, sgld_chain, sgld_run, ClassifierEnergy, EnergyModel, GaussianEnergy, SgldConfig,
};
use faithcf::rng::rng_from;
use faithcf::Tensor;

fn oracle_config(noise_std: f64, steps: usize) -> SgldConfig {
    SgldConfig {
        step_size: 0.1,
        noise_std,
        steps,
        ..SgldConfig::inference()
    }
}

#[test]
fn gaussian_stationary_moments() {
    let m = vec![1.0, -2.0, 0.5];
    let energy = GaussianEnergy::new(m.clone());
    let cfg = oracle_config(0.1, 5000);
    // x ← (1 − φ/2)x + (φ/2)m + σr is AR(1) with variance σ² / (1 − a²).
    let a: f64 = 1.0 - cfg.step_size / 2.0;
    let var = cfg.noise_std.powi(2) / (1.0 - a * a);
    for seed in 0..5 {
        let traj = sgld_chain(&energy, 0, &[5.0, 5.0, 5.0], &cfg, seed).unwrap();
        let tail = &traj.states[traj.states.len() - 1000..];
        for d in 0..3 {
            let mean = tail.iter().map(|s| s[d]).sum::<f64>() / 1000.0;
            let v = tail.iter().map(|s| (s[d] - mean).powi(2)).sum::<f64>() / 999.0;
            assert!((mean - m[d]).abs() < 0.1, "seed {seed} dim {d}: mean {mean}");
            assert!((v - var).abs() < 0.1, "seed {seed} dim {d}: var {v} vs {var}");
        }
    }
}

#[test]
fn noiseless_chain_is_geometric() {
    let m = [0.3, -0.7];
    let energy = GaussianEnergy::new(m.to_vec());
    let cfg = oracle_config(0.0, 200);
    let x0 = [4.0, 2.0];
    let traj = sgld_chain(&energy, 0, &x0, &cfg, 0).unwrap();
    for (j, s) in traj.states.iter().enumerate() {
        let f = 0.95_f64.powi(j as i32);
        for d in 0..2 {
            assert!((s[d] - (m[d] + f * (x0[d] - m[d]))).abs() < 1e-10);
        }
    }
    for (s, e) in traj.states.iter().zip(&traj.energies) {
        let want = 0.5 * s.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        assert!((e - want).abs() < 1e-12);
    }
}

#[test]
fn vanishing_step_is_a_random_walk() {
    let energy = GaussianEnergy::new(vec![0.0; 2]);
    let cfg = SgldConfig {
        step_size: 1e-12,
        noise_std: 1.0,
        steps: 20_000,
        ..SgldConfig::inference()
    };
    let traj = sgld_chain(&energy, 0, &[0.0, 0.0], &cfg, 11).unwrap();
    for d in 0..2 {
        let inc: Vec<f64> = traj.states.windows(2).map(|w| w[1][d] - w[0][d]).collect();
        let n = inc.len() as f64;
        let mean = inc.iter().sum::<f64>() / n;
        let var = inc.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 1.0).abs() < 0.05, "dim {d}: increment variance {var}");
        assert!(mean.abs() < 0.05);
    }
}

#[test]
fn chains_are_reproducible_and_independent_of_batching() {
    let mlp = Mlp::new(&[2, 8, 3], 4).unwrap();
    let energy = ClassifierEnergy(&mlp);
    let cfg = SgldConfig {
        steps: 30,
        noise_std: 0.05,
        ..SgldConfig::inference()
    };
    let x0 = Tensor::from_rows(&[vec![0.1, 0.2], vec![-1.0, 0.5], vec![2.0, -0.3]]).unwrap();
    let targets = [0, 1, 2];
    let mut rngs: Vec<_> = (0..3).map(|c| rng_from(9, &[c])).collect();
    let batched = sgld_run(&energy, &targets, &x0, &cfg, &mut rngs).unwrap();
    for i in 0..3 {
        let mut one = [rng_from(9, &[i as u64])];
        let single = sgld_run(&energy, &targets[i..=i], &x0.select_rows(&[i]), &cfg, &mut one).unwrap();
        assert_eq!(single.row(0), batched.row(i));
    }
    let again = generate_conditional(&energy, 1, 8, 3, &cfg, 5).unwrap();
    assert_eq!(again, generate_conditional(&energy, 1, 8, 3, &cfg, 5).unwrap());
}

#[test]
fn conditional_samples_respect_the_clamp_and_sort() {
    let mlp = Mlp::new(&[2, 8, 2], 1).unwrap();
    let energy = ClassifierEnergy(&mlp);
    let cfg = SgldConfig::inference().with_clamp_around(&[(-1.0, 1.0), (-2.0, 2.0)], 0.5);
    let out = generate_conditional(&energy, 0, 20, 5, &cfg, 3).unwrap();
    for i in 0..5 {
        let r = out.samples.row(i);
        assert!((-1.5..=1.5).contains(&r[0]) && (-2.5..=2.5).contains(&r[1]));
    }
    assert!(out.energies.windows(2).all(|w| w[0] <= w[1]));
    let recomputed = energy.energies(&out.samples, &[0; 5]).unwrap();
    assert_eq!(recomputed, out.energies);
    let mut sorted = out.all_energies.clone();
    sorted.sort_by(f64::total_cmp);
    assert_eq!(&sorted[..5], out.energies.as_slice());
}
