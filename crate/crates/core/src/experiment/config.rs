//! JSON experiment configuration. Every field is optional; omitted fields take the
//! planar-robot benchmark defaults.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::active::OptimizeOptions;
use crate::dbs::FourierBasis;
use crate::error::{Error, Result};
use crate::estimators::lambda_grid;
use crate::lifted::{InputTrajectory, LinearDynamics, NoiseModel};
use crate::model::WienerModel;
use crate::sim::{PriorSpec, ReplicateStructure};

pub const SCHEMA_VERSION: u32 = 1;

/// The published JSON schema for [`ExperimentConfig`].
pub const SCHEMA: &str = include_str!("../../schema/experiment-config.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub basis: BasisConfig,
    pub prior: PriorConfig,
    pub input: InputConfig,
    pub optimizer: OptimizerConfig,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig::default(),
            basis: BasisConfig::default(),
            prior: PriorConfig::default(),
            input: InputConfig::default(),
            optimizer: OptimizerConfig::default(),
            run: RunConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Sampling time; `B` defaults to `dt · I`.
    pub dt: f64,
    /// State transition matrix (row-major); defaults to the identity.
    pub a: Option<Vec<Vec<f64>>>,
    /// Input matrix (row-major).
    pub b: Option<Vec<Vec<f64>>>,
    pub mu_x0: Vec<f64>,
    /// Horizon `T`: the trajectory has `T + 1` measurements.
    pub horizon: usize,
    pub sigma_v_sq: f64,
    /// Process noise variances; each benchmark runs once per entry.
    pub sigma_w_sq: Vec<f64>,
    /// Initial-state variance; `null` ties it to the process noise variance.
    pub sigma_x0_sq: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            a: None,
            b: None,
            mu_x0: vec![3.2, 2.8],
            horizon: 100,
            sigma_v_sq: 0.01,
            sigma_w_sq: vec![0.0, 0.001, 0.01],
            sigma_x0_sq: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    /// `f_0 … f_N`; `f_0` must be zero.
    pub frequencies: Vec<Vec<f64>>,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            frequencies: FourierBasis::planar_benchmark()
                .frequencies()
                .iter()
                .map(|f| f.iter().copied().collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorDistribution {
    Uniform,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub distribution: PriorDistribution,
    pub low: f64,
    pub high: f64,
    pub mean: f64,
    pub variance: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { distribution: PriorDistribution::Uniform, low: 2.0, high: 8.0, mean: 5.0, variance: 3.0 }
    }
}

impl PriorConfig {
    pub fn spec(&self) -> PriorSpec {
        match self.distribution {
            PriorDistribution::Uniform => PriorSpec::Uniform { low: self.low, high: self.high },
            PriorDistribution::Gaussian => PriorSpec::Gaussian { mean: self.mean, variance: self.variance },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// `u_k = amplitude · Σ_υ [cos(υ k dt), sin(υ k dt)]`.
    Sinusoid,
    /// Explicit samples `u_0 … u_{T-1}`.
    Samples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub kind: InputKind,
    pub amplitude: f64,
    /// Angular frequencies in rad per unit time.
    pub omegas: Vec<f64>,
    pub samples: Option<Vec<Vec<f64>>>,
    /// Box applied to every input coordinate (not to the initial mean).
    pub lower: f64,
    pub upper: f64,
    /// Whether input design may move the initial state mean.
    pub optimize_initial_mean: bool,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            kind: InputKind::Sinusoid,
            amplitude: 4.5,
            omegas: vec![3.0, 5.0, 10.0, 20.0, 100.0],
            samples: None,
            lower: -200.0,
            upper: 200.0,
            optimize_initial_mean: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub rel_decrease_tol: f64,
    pub stall_window: usize,
    pub max_halvings: usize,
    pub alpha0: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let o = OptimizeOptions::default();
        Self {
            max_iters: o.max_iters,
            grad_tol: o.grad_tol,
            rel_decrease_tol: o.rel_decrease_tol,
            stall_window: o.stall_window,
            max_halvings: o.max_halvings,
            alpha0: o.alpha0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaGridConfig {
    pub count: usize,
    pub min: f64,
    pub max: f64,
}

impl Default for LambdaGridConfig {
    fn default() -> Self {
        Self { count: 30, min: 1e-6, max: 1e3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicateLayout {
    Independent,
    /// `√n_reps` draws of `θ` crossed with `√n_reps` noise draws.
    Crossed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub benchmark: u8,
    pub n_reps: u64,
    pub seed: u64,
    pub lambda_grid: LambdaGridConfig,
    /// Trajectory lengths swept by benchmark 3.
    pub horizons: Vec<usize>,
    /// Numbers of independent trajectories compared by benchmark 4.
    pub taus: Vec<usize>,
    pub replicates: ReplicateLayout,
    pub output: String,
    /// Measurements for the `estimate` command.
    pub measurements: Option<Vec<f64>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            benchmark: 1,
            n_reps: 10_000,
            seed: 0,
            lambda_grid: LambdaGridConfig::default(),
            horizons: vec![0, 4, 10, 13, 16, 20, 25, 32, 40, 50, 63, 79, 100],
            taus: vec![1, 11, 101],
            replicates: ReplicateLayout::Independent,
            output: "results".into(),
            measurements: None,
        }
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(Error::config(what, "expected a non-empty rectangular matrix"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn finite(v: f64, path: &str) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::config(path, format!("must be finite, got {v}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))?;
        Self::from_json_str(&text)
    }

    /// Canonical JSON of the effective configuration.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of [`canonical_json`](Self::canonical_json) with `run.output` blanked,
    /// hex encoded. The output location does not affect results.
    pub fn sha256(&self) -> String {
        let mut identity = self.clone();
        identity.run.output.clear();
        hex::encode(Sha256::digest(identity.canonical_json().as_bytes()))
    }

    pub fn state_dim(&self) -> usize {
        self.model.mu_x0.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        let m = &self.model;
        let n_x = self.state_dim();
        if n_x == 0 {
            return Err(Error::config("model.mu_x0", "must be non-empty"));
        }
        m.mu_x0.iter().try_for_each(|v| finite(*v, "model.mu_x0"))?;
        if !(m.dt > 0.0) || !m.dt.is_finite() {
            return Err(Error::config("model.dt", "must be positive"));
        }
        if !(m.sigma_v_sq > 0.0) || !m.sigma_v_sq.is_finite() {
            return Err(Error::config("model.sigma_v_sq", "must be positive"));
        }
        if m.sigma_w_sq.is_empty() || m.sigma_w_sq.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::config("model.sigma_w_sq", "needs at least one finite nonnegative variance"));
        }
        if let Some(v) = m.sigma_x0_sq {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config("model.sigma_x0_sq", "must be nonnegative"));
            }
        }
        let a = self.a_matrix()?;
        if a.nrows() != n_x || a.ncols() != n_x {
            return Err(Error::config("model.a", format!("must be {n_x}x{n_x}")));
        }
        let b = self.b_matrix()?;
        if b.nrows() != n_x {
            return Err(Error::config("model.b", format!("must have {n_x} rows")));
        }

        let basis = self.basis().map_err(|e| Error::config("basis.frequencies", e.to_string()))?;
        if basis.state_dim() != n_x {
            return Err(Error::config("basis.frequencies", format!("vectors must have length {n_x}")));
        }
        self.prior
            .spec()
            .validate()
            .map_err(|e| Error::config("prior", e.to_string()))?;

        let i = &self.input;
        finite(i.amplitude, "input.amplitude")?;
        i.omegas.iter().try_for_each(|v| finite(*v, "input.omegas"))?;
        if !(i.lower <= i.upper) {
            return Err(Error::config("input", "lower must not exceed upper"));
        }
        if i.kind == InputKind::Samples {
            let Some(samples) = &i.samples else {
                return Err(Error::config("input.samples", "required when kind is \"samples\""));
            };
            if samples.len() < m.horizon {
                return Err(Error::config("input.samples", format!("need at least {} samples", m.horizon)));
            }
            if samples.iter().any(|s| s.len() != b.ncols()) {
                return Err(Error::config("input.samples", format!("each sample needs {} entries", b.ncols())));
            }
        }

        let o = &self.optimizer;
        if !(o.grad_tol >= 0.0) || !(o.rel_decrease_tol >= 0.0) || !(o.alpha0 > 0.0) || o.stall_window == 0 {
            return Err(Error::config("optimizer", "tolerances must be nonnegative, alpha0 positive, stall_window ≥ 1"));
        }

        let r = &self.run;
        if !(1..=4).contains(&r.benchmark) {
            return Err(Error::config("run.benchmark", "must be 1, 2, 3 or 4"));
        }
        if r.n_reps == 0 {
            return Err(Error::config("run.n_reps", "must be positive"));
        }
        lambda_grid(r.lambda_grid.count, r.lambda_grid.min, r.lambda_grid.max)
            .map_err(|e| Error::config("run.lambda_grid", e.to_string()))?;
        if r.horizons.is_empty() {
            return Err(Error::config("run.horizons", "must be non-empty"));
        }
        if let Some(&h) = r.horizons.iter().find(|&&h| r.benchmark == 3 && h > m.horizon && i.kind == InputKind::Samples) {
            return Err(Error::config("run.horizons", format!("horizon {h} exceeds the supplied input samples")));
        }
        if r.taus.is_empty() {
            return Err(Error::config("run.taus", "must be non-empty"));
        }
        if r.benchmark == 4 {
            for &tau in &r.taus {
                batch_lengths(m.horizon + 1, tau).map_err(|e| Error::config("run.taus", e.to_string()))?;
            }
        }
        if r.replicates == ReplicateLayout::Crossed {
            let side = (r.n_reps as f64).sqrt().round() as u64;
            if side * side != r.n_reps {
                return Err(Error::config("run.n_reps", "crossed replicates need a perfect square count"));
            }
        }
        if let Some(y) = &r.measurements {
            if y.is_empty() {
                return Err(Error::config("run.measurements", "must be non-empty"));
            }
            y.iter().try_for_each(|v| finite(*v, "run.measurements"))?;
        }
        Ok(())
    }

    pub fn a_matrix(&self) -> Result<DMatrix<f64>> {
        match &self.model.a {
            Some(rows) => matrix(rows, "model.a"),
            None => Ok(DMatrix::identity(self.state_dim(), self.state_dim())),
        }
    }

    pub fn b_matrix(&self) -> Result<DMatrix<f64>> {
        match &self.model.b {
            Some(rows) => matrix(rows, "model.b"),
            None => Ok(DMatrix::identity(self.state_dim(), self.state_dim()) * self.model.dt),
        }
    }

    pub fn basis(&self) -> Result<FourierBasis> {
        FourierBasis::new(self.basis.frequencies.iter().map(|f| DVector::from_vec(f.clone())).collect())
    }

    pub fn lambdas(&self) -> Result<Vec<f64>> {
        let g = &self.run.lambda_grid;
        lambda_grid(g.count, g.min, g.max)
    }

    pub fn optimize_options(&self) -> OptimizeOptions {
        let o = &self.optimizer;
        OptimizeOptions {
            max_iters: o.max_iters,
            grad_tol: o.grad_tol,
            rel_decrease_tol: o.rel_decrease_tol,
            stall_window: o.stall_window,
            max_halvings: o.max_halvings,
            alpha0: o.alpha0,
        }
    }

    pub fn replicate_structure(&self) -> ReplicateStructure {
        match self.run.replicates {
            ReplicateLayout::Independent => ReplicateStructure::Independent,
            ReplicateLayout::Crossed => ReplicateStructure::Crossed { side: (self.run.n_reps as f64).sqrt().round() as u64 },
        }
    }

    /// The model at process noise `sigma_w_sq` and horizon `horizon`.
    pub fn model_for(&self, sigma_w_sq: f64, horizon: usize) -> Result<WienerModel> {
        let n_x = self.state_dim();
        let dynamics = LinearDynamics::time_invariant(self.a_matrix()?, self.b_matrix()?, horizon)?;
        let sx0 = self.model.sigma_x0_sq.unwrap_or(sigma_w_sq);
        let noise = NoiseModel::isotropic(n_x, horizon, sx0, sigma_w_sq, self.model.sigma_v_sq)?;
        let basis = self.basis()?;
        let prior = self.prior.spec().implied_prior(basis.len())?;
        WienerModel::new(dynamics, noise, basis, prior)
    }

    /// Raw input samples `u_0 … u_{horizon-1}`.
    pub fn input_samples(&self, horizon: usize) -> Result<Vec<DVector<f64>>> {
        let n_u = self.b_matrix()?.ncols();
        let i = &self.input;
        match i.kind {
            InputKind::Sinusoid => Ok((0..horizon)
                .map(|k| {
                    let t = k as f64 * self.model.dt;
                    DVector::from_fn(n_u, |j, _| {
                        i.amplitude
                            * i.omegas
                                .iter()
                                .map(|w| if j % 2 == 0 { (w * t).cos() } else { (w * t).sin() })
                                .sum::<f64>()
                    })
                })
                .collect()),
            InputKind::Samples => {
                let samples = i.samples.as_ref().ok_or_else(|| Error::config("input.samples", "missing"))?;
                if samples.len() < horizon {
                    return Err(Error::config("input.samples", format!("need at least {horizon} samples")));
                }
                Ok(samples[..horizon].iter().map(|s| DVector::from_vec(s.clone())).collect())
            }
        }
    }

    /// Nominal stacked input `[μ_x0; u_0; …]` with bounds and design mask.
    pub fn nominal_input(&self, horizon: usize) -> Result<InputTrajectory> {
        let n_x = self.state_dim();
        let mu = DVector::from_vec(self.model.mu_x0.clone());
        let samples = self.input_samples(horizon)?;
        let mut u = InputTrajectory::from_parts(&mu, &samples)
            .with_input_box(n_x, self.input.lower, self.input.upper)?
            .with_initial_mean_optimizable(n_x, self.input.optimize_initial_mean);
        for i in n_x..u.len() {
            u.stacked[i] = u.stacked[i].clamp(self.input.lower, self.input.upper);
        }
        Ok(u)
    }
}

/// Batch lengths for `tau` trajectories sharing `total` samples: `tau − 1` batches of
/// `⌈total / tau⌉` samples followed by one batch holding the remainder.
pub fn batch_lengths(total: usize, tau: usize) -> Result<Vec<usize>> {
    if tau == 0 || tau > total {
        return Err(Error::InvalidArgument(format!("cannot split {total} samples into {tau} trajectories")));
    }
    let q = total.div_ceil(tau);
    let used = q * (tau - 1);
    if used >= total {
        return Err(Error::InvalidArgument(format!(
            "{tau} trajectories of {q} samples leave nothing for the last of {total} samples"
        )));
    }
    let mut lens = vec![q; tau - 1];
    lens.push(total - used);
    Ok(lens)
}
