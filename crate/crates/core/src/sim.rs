//! Seeded simulation and the Monte Carlo harness.
//!
//! Every replicate owns three independent ChaCha streams (`theta`, `process`,
//! `measurement`) keyed by `(master_seed, replicate)`, so replicates can run in any
//! order on any number of workers. Noise is drawn as standard normals and scaled
//! by covariance square roots afterwards, which lets methods and settings share one
//! realization.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::consts::SQRT_CLIP_TOL;
use crate::error::{Error, Result};
use crate::estimators::{affine_estimator_mse, bayes_estimate, rls_regressors, EstimatorGain, MeasurementSet, ParameterPrior, RlsEstimator, RlsMode};
use crate::lifted::{InputTrajectory, NoiseKind};
use crate::linalg::psd_sqrt;
use crate::model::WienerModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamLabel {
    Theta = 0,
    Process = 1,
    Measurement = 2,
}

/// Address of one replicate's random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SimSeed {
    pub master_seed: u64,
    pub replicate: u64,
}

impl SimSeed {
    pub fn new(master_seed: u64, replicate: u64) -> Self {
        Self { master_seed, replicate }
    }

    pub fn rng(&self, label: StreamLabel) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream((self.replicate << 2) | label as u64);
        rng
    }
}

fn standard_normal_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Unscaled noise: `state[0]` drives `x_0`, `state[t]` drives `w_t`; one scalar per measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardNoise {
    pub state: Vec<DVector<f64>>,
    pub measurement: DVector<f64>,
}

impl StandardNoise {
    pub fn draw(seed: SimSeed, n_x: usize, n_state: usize, n_meas: usize) -> Self {
        let mut process = seed.rng(StreamLabel::Process);
        let mut meas = seed.rng(StreamLabel::Measurement);
        Self {
            state: (0..n_state).map(|_| standard_normal_vec(&mut process, n_x)).collect(),
            measurement: standard_normal_vec(&mut meas, n_meas),
        }
    }

    /// Consecutive pieces with `len_i` state blocks and measurements each.
    pub fn split(&self, lens: &[usize]) -> Result<Vec<Self>> {
        let total: usize = lens.iter().sum();
        if total != self.state.len() || total != self.measurement.len() {
            return Err(Error::dim("noise split length", self.state.len(), total));
        }
        let mut offset = 0;
        Ok(lens
            .iter()
            .map(|&len| {
                let piece = Self {
                    state: self.state[offset..offset + len].to_vec(),
                    measurement: self.measurement.rows(offset, len).into_owned(),
                };
                offset += len;
                piece
            })
            .collect())
    }
}

/// Realizes states and outputs of `model` under `u`, `θ` and given standard noise.
pub fn simulate_with_noise(
    model: &WienerModel,
    u: &InputTrajectory,
    theta: &DVector<f64>,
    noise: &StandardNoise,
) -> Result<(Vec<DVector<f64>>, MeasurementSet)> {
    if let NoiseKind::GenericCharacteristic(_) = model.noise.kind() {
        return Err(Error::InvalidArgument("simulation supports Gaussian noise only".into()));
    }
    let dynamics = &model.dynamics;
    let (n_x, n_u, horizon) = (dynamics.state_dim(), dynamics.input_dim(), dynamics.horizon());
    if u.len() != dynamics.stacked_len() {
        return Err(Error::dim("stacked input length", dynamics.stacked_len(), u.len()));
    }
    if theta.len() != model.basis.len() {
        return Err(Error::dim("theta length", model.basis.len(), theta.len()));
    }
    if noise.state.len() != horizon + 1 || noise.measurement.len() != horizon + 1 {
        return Err(Error::dim("noise realization length", horizon + 1, noise.state.len()));
    }
    let mut states = Vec::with_capacity(horizon + 1);
    let root0 = psd_sqrt(model.noise.sigma_x0(), SQRT_CLIP_TOL)?;
    states.push(u.stacked.rows(0, n_x).into_owned() + root0 * &noise.state[0]);
    for t in 0..horizon {
        let root = psd_sqrt(model.noise.sigma_w(t + 1), SQRT_CLIP_TOL)?;
        let input = u.stacked.rows(n_x + t * n_u, n_u);
        let next = dynamics.a(t) * &states[t] + dynamics.b(t) * input + root * &noise.state[t + 1];
        states.push(next);
    }
    let sv = model.noise.sigma_v_sq();
    let y = DVector::from_fn(horizon + 1, |t, _| {
        model.basis.eval(&states[t]).dot(theta) + sv[t].sqrt() * noise.measurement[t]
    });
    Ok((states, MeasurementSet::new(y)?))
}

/// One seeded trajectory for a supplied `θ`.
pub fn simulate_trajectory(
    model: &WienerModel,
    u: &InputTrajectory,
    theta: &DVector<f64>,
    seed: SimSeed,
) -> Result<(Vec<DVector<f64>>, MeasurementSet)> {
    let t1 = model.horizon() + 1;
    let noise = StandardNoise::draw(seed, model.dynamics.state_dim(), t1, t1);
    simulate_with_noise(model, u, theta, &noise)
}

/// Distribution of the true parameters, i.i.d. per component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorSpec {
    Uniform { low: f64, high: f64 },
    Gaussian { mean: f64, variance: f64 },
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PriorSpec::Uniform { low, high } if !(low < high) || !low.is_finite() || !high.is_finite() => {
                Err(Error::InvalidArgument(format!("uniform prior needs low < high, got [{low}, {high}]")))
            }
            PriorSpec::Gaussian { mean, variance } if !mean.is_finite() || !(variance > 0.0) || !variance.is_finite() => {
                Err(Error::InvalidArgument(format!("gaussian prior needs a positive variance, got {variance}")))
            }
            _ => Ok(()),
        }
    }

    /// Implied `(μ_θ, Σ_θ)` for `n` components.
    pub fn implied_prior(&self, n: usize) -> Result<ParameterPrior> {
        self.validate()?;
        let (mean, variance) = match *self {
            PriorSpec::Uniform { low, high } => ((low + high) / 2.0, (high - low).powi(2) / 12.0),
            PriorSpec::Gaussian { mean, variance } => (mean, variance),
        };
        ParameterPrior::isotropic(n, mean, variance)
    }
}

/// Draws `θ` with `n` components from the replicate's theta stream.
pub fn sample_prior_theta(spec: &PriorSpec, n: usize, seed: SimSeed) -> Result<DVector<f64>> {
    spec.validate()?;
    let mut rng = seed.rng(StreamLabel::Theta);
    Ok(match *spec {
        PriorSpec::Uniform { low, high } => DVector::from_fn(n, |_, _| rng.random_range(low..high)),
        PriorSpec::Gaussian { mean, variance } => {
            DVector::from_fn(n, |_, _| mean + variance.sqrt() * rng.sample::<f64, _>(StandardNormal))
        }
    })
}

/// Estimators compared by the harness.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Dls { lambda: f64 },
    Mls { lambda: f64 },
    Bms,
    /// Bayesian estimator on measurements generated with a designed input.
    Bal { input: InputTrajectory },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Dls { .. } => "DLS",
            Method::Mls { .. } => "MLS",
            Method::Bms => "BMS",
            Method::Bal { .. } => "BAL",
        }
    }
}

/// How replicate indices map onto `θ` and noise draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReplicateStructure {
    /// Every replicate has its own `θ` and noise.
    #[default]
    Independent,
    /// `side × side` replicates: every `θ` draw is paired with every noise draw.
    Crossed { side: u64 },
}

impl ReplicateStructure {
    /// Stream indices `(theta, noise)` for replicate `r`.
    pub fn streams(&self, r: u64) -> (u64, u64) {
        match *self {
            ReplicateStructure::Independent => (r, r),
            ReplicateStructure::Crossed { side } => (r / side, r % side),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub replicate: u64,
    pub theta_true: DVector<f64>,
    /// One entry per method; failures carry their message.
    pub estimates: Vec<std::result::Result<DVector<f64>, String>>,
    pub squared_errors: Vec<Option<f64>>,
}

impl ReplicateResult {
    pub fn has_failures(&self) -> bool {
        self.estimates.iter().any(|e| e.is_err())
    }
}

enum Prepared {
    Rls(RlsEstimator),
    Bayes(EstimatorGain),
}

struct PreparedMethod {
    input: usize,
    estimator: std::result::Result<Prepared, String>,
}

/// Harness output: per-replicate results and each method's analytic mean squared error.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloRun {
    pub methods: Vec<Method>,
    pub results: Vec<ReplicateResult>,
    pub analytic: Vec<Option<f64>>,
}

impl MonteCarloRun {
    /// Squared errors of method `k` over successful replicates.
    pub fn squared_errors(&self, k: usize) -> Vec<f64> {
        self.results.iter().filter_map(|r| r.squared_errors[k]).collect()
    }

    pub fn mse(&self, k: usize) -> f64 {
        mean(&self.squared_errors(k))
    }

    pub fn failed_replicates(&self) -> Vec<u64> {
        self.results.iter().filter(|r| r.has_failures()).map(|r| r.replicate).collect()
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Nearest-rank percentile, `p ∈ (0, 1]`: the `⌈p n⌉`-th smallest value.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Runs every method on common `(θ, W̄, V̄)` draws for each replicate.
pub fn monte_carlo_benchmark(
    model: &WienerModel,
    base_input: &InputTrajectory,
    methods: &[Method],
    theta_spec: &PriorSpec,
    n_reps: u64,
    master_seed: u64,
    structure: ReplicateStructure,
) -> Result<MonteCarloRun> {
    theta_spec.validate()?;
    if let ReplicateStructure::Crossed { side } = structure {
        if side == 0 || side.checked_mul(side) != Some(n_reps) {
            return Err(Error::InvalidArgument(format!("crossed structure needs reps = side², got {n_reps} with side {side}")));
        }
    }
    let mut inputs = vec![base_input.clone()];
    let mut prepared = Vec::with_capacity(methods.len());
    let mut analytic = Vec::with_capacity(methods.len());
    let base_stats = model.state_stats(base_input)?;
    let base_design = model.design(base_input)?;
    let sigma_v_sq = model.noise.sigma_v_sq();
    for method in methods {
        let (input, estimator, j) = match method {
            Method::Dls { lambda } | Method::Mls { lambda } => {
                let mode = if matches!(method, Method::Dls { .. }) { RlsMode::Dls } else { RlsMode::Mls };
                let est = rls_regressors(mode, &model.basis, &base_stats).and_then(|phi| RlsEstimator::new(phi, *lambda));
                let j = match &est {
                    Ok(rls) => Some(affine_estimator_mse(
                        &rls.gain_matrix(),
                        &DVector::zeros(model.basis.len()),
                        &base_design,
                        &model.prior,
                        sigma_v_sq,
                    )?),
                    Err(_) => None,
                };
                (0, est.map(Prepared::Rls).map_err(|e| e.to_string()), j)
            }
            Method::Bms => {
                let gain = model.gain(base_input)?;
                let j = gain.j_star;
                (0, Ok(Prepared::Bayes(gain)), Some(j))
            }
            Method::Bal { input } => {
                let gain = model.gain(input)?;
                let j = gain.j_star;
                inputs.push(input.clone());
                (inputs.len() - 1, Ok(Prepared::Bayes(gain)), Some(j))
            }
        };
        prepared.push(PreparedMethod { input, estimator });
        analytic.push(j);
    }

    let t1 = model.horizon() + 1;
    let n_x = model.dynamics.state_dim();
    let results = (0..n_reps)
        .into_par_iter()
        .map(|r| {
            let (theta_idx, noise_idx) = structure.streams(r);
            let theta = sample_prior_theta(theta_spec, model.basis.len(), SimSeed::new(master_seed, theta_idx))?;
            let noise = StandardNoise::draw(SimSeed::new(master_seed, noise_idx), n_x, t1, t1);
            let outputs: Vec<std::result::Result<MeasurementSet, String>> = inputs
                .iter()
                .map(|u| simulate_with_noise(model, u, &theta, &noise).map(|(_, y)| y).map_err(|e| e.to_string()))
                .collect();
            let estimates: Vec<_> = prepared
                .iter()
                .map(|p| {
                    let y = outputs[p.input].as_ref().map_err(Clone::clone)?;
                    let est = match p.estimator.as_ref().map_err(Clone::clone)? {
                        Prepared::Rls(rls) => rls.fit(y),
                        Prepared::Bayes(gain) => bayes_estimate(gain, y),
                    };
                    est.map_err(|e| e.to_string())
                        .and_then(|v| if v.iter().all(|x| x.is_finite()) { Ok(v) } else { Err("non-finite estimate".into()) })
                })
                .collect();
            let squared_errors = estimates
                .iter()
                .map(|e| e.as_ref().ok().map(|v| (&theta - v).norm_squared()))
                .collect();
            Ok(ReplicateResult { replicate: r, theta_true: theta, estimates, squared_errors })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MonteCarloRun { methods: methods.to_vec(), results, analytic })
}

/// Sample covariance of the columns of `samples` (one sample per column).
pub fn sample_covariance(samples: &DMatrix<f64>) -> DMatrix<f64> {
    let n = samples.ncols() as f64;
    let mu = samples.column_mean();
    let centered = samples - &mu * DVector::from_element(samples.ncols(), 1.0).transpose();
    &centered * centered.transpose() / (n - 1.0)
}
