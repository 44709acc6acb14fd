//! Sampling oracles: closed-form statistics against independent Monte Carlo estimates.

#![allow(clippy::needless_range_loop)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use wiener_bayes::dbs::{fourier_cross_cov, fourier_mean, FourierBasis};
use wiener_bayes::estimators::ParameterPrior;
use wiener_bayes::experiment::ExperimentConfig;
use wiener_bayes::lifted::{propagate_state_stats, InputTrajectory, LinearDynamics, NoiseKind, NoiseModel};
use wiener_bayes::sim::{
    monte_carlo_benchmark, sample_prior_theta, simulate_trajectory, Method, PriorSpec, ReplicateStructure, SimSeed,
    StandardNoise, StreamLabel,
};
use wiener_bayes::WienerModel;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn new() -> Self {
        Self { n: 0.0, sum: 0.0, sum_sq: 0.0 }
    }
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        self.sum += x;
        self.sum_sq += x * x;
    }
    fn mean(&self) -> f64 {
        self.sum / self.n
    }
    fn se(&self) -> f64 {
        let var = (self.sum_sq - self.sum * self.sum / self.n) / (self.n - 1.0);
        (var / self.n).sqrt()
    }
    fn z(&self, target: f64) -> f64 {
        (self.mean() - target).abs() / self.se()
    }
}

/// A time-varying planar system with correlated, time-varying noise.
fn system(horizon: usize) -> (LinearDynamics, NoiseModel, InputTrajectory) {
    let a: Vec<DMatrix<f64>> = (0..horizon)
        .map(|t| DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.05 * t as f64, 0.95]))
        .collect();
    let b: Vec<DMatrix<f64>> = (0..horizon).map(|t| DMatrix::from_row_slice(2, 1, &[0.1, 0.05 * (t % 2) as f64])).collect();
    let dynamics = LinearDynamics::time_varying(a, b).unwrap();
    let noise = NoiseModel::new(
        DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.02]),
        (0..horizon).map(|t| DMatrix::from_row_slice(2, 2, &[0.01 + 0.002 * t as f64, 0.003, 0.003, 0.006])).collect(),
        vec![0.01; horizon + 1],
        NoiseKind::Gaussian,
    )
    .unwrap();
    let mut v = vec![0.5, -0.3];
    v.extend((0..horizon).map(|t| (t as f64).sin()));
    (dynamics, noise, InputTrajectory::unconstrained(DVector::from_vec(v)))
}

/// Draws a state path by direct recursion with Cholesky factors.
fn draw_path(rng: &mut ChaCha8Rng, d: &LinearDynamics, noise: &NoiseModel, u: &InputTrajectory) -> Vec<DVector<f64>> {
    let chol = |m: &DMatrix<f64>| m.clone().cholesky().unwrap().l();
    let z = |rng: &mut ChaCha8Rng| DVector::from_fn(2, |_, _| normal(rng));
    let mut x = u.stacked.rows(0, 2).into_owned() + chol(noise.sigma_x0()) * z(rng);
    let mut path = vec![x.clone()];
    for t in 0..d.horizon() {
        x = d.a(t) * &x + d.b(t) * u.stacked.rows(2 + t, 1) + chol(noise.sigma_w(t + 1)) * z(rng);
        path.push(x.clone());
    }
    path
}

#[test]
fn state_moments_match_sampled_paths() {
    let horizon = 6;
    let (d, noise, u) = system(horizon);
    let stats = propagate_state_stats(&d, &noise, &u).unwrap();
    let n = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t1 = horizon + 1;
    let mut means: Vec<Moments> = (0..2 * t1).map(|_| Moments::new()).collect();
    // products of centered coordinates against the closed-form means
    let mut cov: Vec<Moments> = (0..4 * t1 * t1).map(|_| Moments::new()).collect();
    for _ in 0..n {
        let path = draw_path(&mut rng, &d, &noise, &u);
        for t in 0..t1 {
            for i in 0..2 {
                means[2 * t + i].push(path[t][i]);
            }
        }
        for t in 0..t1 {
            for t2 in 0..t1 {
                for i in 0..2 {
                    for j in 0..2 {
                        let c = (path[t][i] - stats.means[t][i]) * (path[t2][j] - stats.means[t2][j]);
                        cov[((t * t1 + t2) * 2 + i) * 2 + j].push(c);
                    }
                }
            }
        }
    }
    let mut worst: f64 = 0.0;
    for t in 0..t1 {
        for i in 0..2 {
            worst = worst.max(means[2 * t + i].z(stats.means[t][i]));
        }
        for t2 in 0..t1 {
            let c = stats.cross(t, t2);
            for i in 0..2 {
                for j in 0..2 {
                    worst = worst.max(cov[((t * t1 + t2) * 2 + i) * 2 + j].z(c[(i, j)]));
                }
            }
        }
    }
    assert!(worst < 3.0, "largest deviation {worst:.2} SE");
}

#[test]
fn basis_statistics_match_sampled_paths() {
    let horizon = 4;
    let (d, noise, u) = system(horizon);
    let stats = propagate_state_stats(&d, &noise, &u).unwrap();
    let basis = FourierBasis::planar_benchmark();
    let n = 100_000;
    let pairs = [(0, 0, 1, 1), (1, 3, 2, 5), (4, 4, 7, 3), (2, 0, 10, 6), (3, 1, 8, 8)];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut mean: Vec<Moments> = (0..basis.len() * (horizon + 1)).map(|_| Moments::new()).collect();
    let mut cross: Vec<Moments> = pairs.iter().map(|_| Moments::new()).collect();
    let closed_mean: Vec<DVector<f64>> = (0..=horizon).map(|t| fourier_mean(&basis, &stats, t).unwrap()).collect();
    for _ in 0..n {
        let path = draw_path(&mut rng, &d, &noise, &u);
        let phis: Vec<DVector<f64>> = path.iter().map(|x| basis.eval(x)).collect();
        for t in 0..=horizon {
            for k in 0..basis.len() {
                mean[t * basis.len() + k].push(phis[t][k]);
            }
        }
        for (p, &(t, t2, m, k)) in pairs.iter().enumerate() {
            cross[p].push((phis[t][m] - closed_mean[t][m]) * (phis[t2][k] - closed_mean[t2][k]));
        }
    }
    let mut worst: f64 = 0.0;
    for t in 0..=horizon {
        for k in 1..basis.len() {
            worst = worst.max(mean[t * basis.len() + k].z(closed_mean[t][k]));
        }
    }
    for (p, &(t, t2, m, k)) in pairs.iter().enumerate() {
        worst = worst.max(cross[p].z(fourier_cross_cov(&basis, &stats, t, t2, m, k).unwrap()));
    }
    assert!(worst < 3.0, "largest deviation {worst:.2} SE");
}

#[test]
fn output_mean_matches_prior_prediction() {
    let cfg = ExperimentConfig::default();
    let model = cfg.model_for(0.01, 8).unwrap();
    let u = cfg.nominal_input(8).unwrap();
    let design = model.design(&u).unwrap();
    let predicted = design.phi_bar.transpose() * &model.prior.mu_theta;
    let spec = cfg.prior.spec();
    let n = 100_000;
    let mut acc: Vec<Moments> = (0..9).map(|_| Moments::new()).collect();
    for r in 0..n {
        let seed = SimSeed::new(13, r);
        let theta = sample_prior_theta(&spec, model.basis.len(), seed).unwrap();
        let (_, y) = simulate_trajectory(&model, &u, &theta, seed).unwrap();
        for t in 0..9 {
            acc[t].push(y.y[t]);
        }
    }
    let worst = (0..9).map(|t| acc[t].z(predicted[t])).fold(0.0, f64::max);
    assert!(worst < 3.0, "largest deviation {worst:.2} SE");
}

#[test]
fn uniform_prior_variance_matches_implied() {
    let spec = PriorSpec::Uniform { low: 2.0, high: 8.0 };
    let prior = spec.implied_prior(1).unwrap();
    assert_eq!(prior.mu_theta[0], 5.0);
    assert_eq!(prior.sigma_theta[(0, 0)], 3.0);
    let n = 1_000_000u64;
    let mut sq = Moments::new();
    for r in 0..n / 10 {
        let theta = sample_prior_theta(&spec, 10, SimSeed::new(14, r)).unwrap();
        for v in theta.iter() {
            sq.push((v - 5.0).powi(2));
        }
    }
    assert!(sq.z(3.0) < 3.0, "variance {} deviates {:.2} SE", sq.mean(), sq.z(3.0));
}

#[test]
fn streams_are_uncorrelated() {
    let n = 100_000;
    let seed = SimSeed::new(15, 3);
    let mut streams: Vec<ChaCha8Rng> = [StreamLabel::Theta, StreamLabel::Process, StreamLabel::Measurement]
        .iter()
        .map(|&l| seed.rng(l))
        .collect();
    let mut other = SimSeed::new(15, 4).rng(StreamLabel::Theta);
    let draws: Vec<Vec<f64>> = streams
        .iter_mut()
        .chain(std::iter::once(&mut other))
        .map(|rng| (0..n).map(|_| normal(rng)).collect())
        .collect();
    let se = 1.0 / (n as f64).sqrt();
    for a in 0..draws.len() {
        for b in a + 1..draws.len() {
            let corr = draws[a].iter().zip(&draws[b]).map(|(x, y)| x * y).sum::<f64>() / n as f64;
            assert!(corr.abs() < 3.0 * se, "streams {a}, {b}: correlation {corr}");
        }
    }
}

#[test]
fn bms_error_converges_to_j_star() {
    let cfg = ExperimentConfig::default();
    let model = cfg.model_for(0.01, 10).unwrap();
    let u = cfg.nominal_input(10).unwrap();
    let run = monte_carlo_benchmark(&model, &u, &[Method::Bms], &cfg.prior.spec(), 2000, 16, ReplicateStructure::Independent)
        .unwrap();
    let j = run.analytic[0].unwrap();
    assert!((run.mse(0) - j).abs() / j < 0.05, "empirical {} vs {j}", run.mse(0));
}

#[test]
fn rls_analytic_mse_matches_empirical() {
    let cfg = ExperimentConfig::default();
    let model = cfg.model_for(0.001, 20).unwrap();
    let u = cfg.nominal_input(20).unwrap();
    let methods = [Method::Dls { lambda: 0.1 }, Method::Mls { lambda: 1.0 }];
    let run = monte_carlo_benchmark(&model, &u, &methods, &cfg.prior.spec(), 4000, 17, ReplicateStructure::Independent)
        .unwrap();
    for k in 0..2 {
        let errs = run.squared_errors(k);
        let mut m = Moments::new();
        errs.iter().for_each(|e| m.push(*e));
        let j = run.analytic[k].unwrap();
        assert!(m.z(j) < 3.5, "{}: empirical {} vs analytic {j} ({:.2} SE)", methods[k].name(), m.mean(), m.z(j));
    }
}

#[test]
fn noiseless_simulation_is_exact() {
    let d = LinearDynamics::time_invariant(DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 0.1, 5).unwrap();
    let noise = NoiseModel::new(DMatrix::zeros(2, 2), vec![DMatrix::zeros(2, 2); 5], vec![1e-300; 6], NoiseKind::Gaussian).unwrap();
    let basis = FourierBasis::planar_benchmark();
    let prior = ParameterPrior::isotropic(basis.len(), 5.0, 3.0).unwrap();
    let model = WienerModel::new(d, noise, basis, prior).unwrap();
    let u = ExperimentConfig::default().nominal_input(5).unwrap();
    let theta = DVector::from_fn(11, |i, _| i as f64 - 3.0);
    let (states, y) = simulate_trajectory(&model, &u, &theta, SimSeed::new(1, 1)).unwrap();
    let stats = model.state_stats(&u).unwrap();
    for t in 0..=5 {
        assert_eq!(states[t], stats.means[t]);
        let exact = model.basis.eval(&stats.means[t]).dot(&theta);
        assert!((y.y[t] - exact).abs() <= 1e-140, "t={t}");
    }
}

#[test]
fn noise_split_preserves_common_realization() {
    let noise = StandardNoise::draw(SimSeed::new(2, 5), 2, 11, 11);
    let parts = noise.split(&[4, 4, 3]).unwrap();
    assert_eq!(parts[1].state[0], noise.state[4]);
    assert_eq!(parts[2].measurement[2], noise.measurement[10]);
    let prefix = StandardNoise::draw(SimSeed::new(2, 5), 2, 5, 5);
    assert_eq!(prefix.state[..], noise.state[..5]);
    assert!(noise.split(&[4, 4]).is_err());
}
