//! Linear time-varying process model and exact propagation of the state
//! trajectory's first and second moments.
//!
//! The process is `x_{t+1} = A_t x_t + B_t u_t + w_{t+1}` with `x_0 ~ (μ_x0, Σ_x0)`.
//! In lifted form the whole trajectory is `X̄ = Ā (B̄ Ū + W̄)` with
//! `Ū = [μ_x0; u_0; …; u_{T-1}]` and `W̄ = [w_0; …; w_T]`, `w_0 ~ (0, Σ_x0)`.
//! Statistics are computed by forward recursions; the lifted matrices are only
//! materialized on request for cross-checks.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::consts::LIFTED_CAP;
use crate::dbs::CharacteristicGenerator;
use crate::error::{Error, Result};
use crate::linalg::repair_psd;

/// Known dynamics `A_t`, `B_t` for `t = 0 … T-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    n_x: usize,
    n_u: usize,
    horizon: usize,
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    time_invariant: bool,
}

impl LinearDynamics {
    /// Time-invariant dynamics; a single `A`, `B` pair is stored.
    pub fn time_invariant(a: DMatrix<f64>, b: DMatrix<f64>, horizon: usize) -> Result<Self> {
        let n_x = a.nrows();
        if n_x == 0 || !a.is_square() {
            return Err(Error::dim("A (square, non-empty)", format!("{n_x}x{n_x}"), shape(&a)));
        }
        if b.nrows() != n_x || b.ncols() == 0 {
            return Err(Error::dim("B", format!("{n_x}x(n_u>0)"), shape(&b)));
        }
        Ok(Self {
            n_x,
            n_u: b.ncols(),
            horizon,
            a: vec![a],
            b: vec![b],
            time_invariant: true,
        })
    }

    /// Time-varying dynamics; the horizon is the number of supplied steps.
    pub fn time_varying(a: Vec<DMatrix<f64>>, b: Vec<DMatrix<f64>>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::dim("number of B_t matrices", a.len(), b.len()));
        }
        let (Some(a0), Some(b0)) = (a.first(), b.first()) else {
            return Err(Error::InvalidArgument(
                "time-varying dynamics need at least one step; use time_invariant for T = 0".into(),
            ));
        };
        let n_x = a0.nrows();
        let n_u = b0.ncols();
        if n_x == 0 || n_u == 0 {
            return Err(Error::InvalidArgument("state and input dimensions must be positive".into()));
        }
        for (t, (at, bt)) in a.iter().zip(&b).enumerate() {
            if at.shape() != (n_x, n_x) {
                return Err(Error::dim(format!("A_{t}"), format!("{n_x}x{n_x}"), shape(at)));
            }
            if bt.shape() != (n_x, n_u) {
                return Err(Error::dim(format!("B_{t}"), format!("{n_x}x{n_u}"), shape(bt)));
            }
        }
        Ok(Self {
            n_x,
            n_u,
            horizon: a.len(),
            a,
            b,
            time_invariant: false,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.n_x
    }

    pub fn input_dim(&self) -> usize {
        self.n_u
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn is_time_invariant(&self) -> bool {
        self.time_invariant
    }

    /// Length of the stacked input `Ū`.
    pub fn stacked_len(&self) -> usize {
        self.n_x + self.horizon * self.n_u
    }

    pub fn a(&self, t: usize) -> &DMatrix<f64> {
        if self.time_invariant {
            &self.a[0]
        } else {
            &self.a[t]
        }
    }

    pub fn b(&self, t: usize) -> &DMatrix<f64> {
        if self.time_invariant {
            &self.b[0]
        } else {
            &self.b[t]
        }
    }

    /// Same dynamics over a different horizon. Time-varying models can only shrink.
    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        if self.time_invariant {
            let mut out = self.clone();
            out.horizon = horizon;
            return Ok(out);
        }
        if horizon > self.horizon {
            return Err(Error::InvalidArgument(format!(
                "cannot extend time-varying dynamics from T={} to T={horizon}",
                self.horizon
            )));
        }
        if horizon == 0 {
            return Self::time_invariant(self.a[0].clone(), self.b[0].clone(), 0);
        }
        Self::time_varying(self.a[..horizon].to_vec(), self.b[..horizon].to_vec())
    }

    /// `(entry time, column)` of stacked coordinate `i`: the time at which it first
    /// affects the mean state and the state-space direction it injects.
    fn coordinate_entry(&self, i: usize) -> Result<(usize, DVector<f64>)> {
        let len = self.stacked_len();
        if i >= len {
            return Err(Error::IndexOutOfRange { index: i, len });
        }
        if i < self.n_x {
            let mut e = DVector::zeros(self.n_x);
            e[i] = 1.0;
            Ok((0, e))
        } else {
            let k = (i - self.n_x) / self.n_u;
            let j = (i - self.n_x) % self.n_u;
            Ok((k + 1, self.b(k).column(j).into_owned()))
        }
    }
}

fn shape(m: &DMatrix<f64>) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

/// How expectations of Fourier features are evaluated.
#[derive(Clone, Default)]
pub enum NoiseKind {
    /// Closed-form Gaussian characteristic function.
    #[default]
    Gaussian,
    /// Elliptical noise with a user-supplied characteristic generator.
    GenericCharacteristic(Arc<dyn CharacteristicGenerator>),
}

impl fmt::Debug for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseKind::Gaussian => f.write_str("Gaussian"),
            NoiseKind::GenericCharacteristic(_) => f.write_str("GenericCharacteristic(..)"),
        }
    }
}

/// Initial-state, process and measurement noise second moments over a horizon `T`.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    sigma_x0: DMatrix<f64>,
    /// `sigma_w[t - 1]` is the covariance of `w_t`, `t = 1 … T`.
    sigma_w: Vec<DMatrix<f64>>,
    sigma_v_sq: Vec<f64>,
    kind: NoiseKind,
}

impl NoiseModel {
    pub fn new(
        sigma_x0: DMatrix<f64>,
        sigma_w: Vec<DMatrix<f64>>,
        sigma_v_sq: Vec<f64>,
        kind: NoiseKind,
    ) -> Result<Self> {
        if sigma_v_sq.is_empty() {
            return Err(Error::InvalidArgument("need at least one measurement noise variance".into()));
        }
        let horizon = sigma_v_sq.len() - 1;
        if sigma_w.len() != horizon {
            return Err(Error::dim("number of process noise covariances", horizon, sigma_w.len()));
        }
        let n_x = sigma_x0.nrows();
        let sigma_x0 = repair_psd(&sigma_x0, "Sigma_x0")?;
        let sigma_w = sigma_w
            .iter()
            .enumerate()
            .map(|(k, s)| {
                if s.shape() != (n_x, n_x) {
                    return Err(Error::dim(format!("Sigma_w_{}", k + 1), format!("{n_x}x{n_x}"), shape(s)));
                }
                repair_psd(s, &format!("Sigma_w_{}", k + 1))
            })
            .collect::<Result<Vec<_>>>()?;
        for (index, &value) in sigma_v_sq.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::NonPositiveVariance { index, value });
            }
        }
        Ok(Self {
            sigma_x0,
            sigma_w,
            sigma_v_sq,
            kind,
        })
    }

    /// Isotropic, time-invariant Gaussian noise.
    pub fn isotropic(
        n_x: usize,
        horizon: usize,
        sigma_x0_sq: f64,
        sigma_w_sq: f64,
        sigma_v_sq: f64,
    ) -> Result<Self> {
        let eye = DMatrix::<f64>::identity(n_x, n_x);
        Self::new(
            &eye * sigma_x0_sq,
            vec![&eye * sigma_w_sq; horizon],
            vec![sigma_v_sq; horizon + 1],
            NoiseKind::Gaussian,
        )
    }

    pub fn with_kind(mut self, kind: NoiseKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn horizon(&self) -> usize {
        self.sigma_v_sq.len() - 1
    }

    pub fn state_dim(&self) -> usize {
        self.sigma_x0.nrows()
    }

    pub fn sigma_x0(&self) -> &DMatrix<f64> {
        &self.sigma_x0
    }

    /// Covariance of `w_t` for `t = 1 … T`.
    pub fn sigma_w(&self, t: usize) -> &DMatrix<f64> {
        &self.sigma_w[t - 1]
    }

    /// Covariance of the lifted noise entry `w_t`, with `w_0` the initial-state uncertainty.
    pub fn lifted_block(&self, t: usize) -> &DMatrix<f64> {
        if t == 0 {
            &self.sigma_x0
        } else {
            &self.sigma_w[t - 1]
        }
    }

    pub fn sigma_v_sq(&self) -> &[f64] {
        &self.sigma_v_sq
    }

    pub fn kind(&self) -> &NoiseKind {
        &self.kind
    }

    /// Leading `horizon + 1` time steps.
    pub fn truncated(&self, horizon: usize) -> Result<Self> {
        if horizon > self.horizon() {
            return Err(Error::InvalidArgument(format!(
                "cannot extend noise model from T={} to T={horizon}",
                self.horizon()
            )));
        }
        Ok(Self {
            sigma_x0: self.sigma_x0.clone(),
            sigma_w: self.sigma_w[..horizon].to_vec(),
            sigma_v_sq: self.sigma_v_sq[..=horizon].to_vec(),
            kind: self.kind.clone(),
        })
    }

    /// Block-diagonal `Σ_W̄ = diag(Σ_x0, Σ_w1, …, Σ_wT)`.
    pub fn lifted_covariance(&self) -> DMatrix<f64> {
        let n_x = self.state_dim();
        let t1 = self.horizon() + 1;
        let mut out = DMatrix::zeros(n_x * t1, n_x * t1);
        for t in 0..t1 {
            out.view_mut((t * n_x, t * n_x), (n_x, n_x))
                .copy_from(self.lifted_block(t));
        }
        out
    }

    pub fn is_zero_process_noise(&self) -> bool {
        self.sigma_x0.iter().all(|v| *v == 0.0)
            && self.sigma_w.iter().all(|m| m.iter().all(|v| *v == 0.0))
    }
}

/// Stacked input `Ū = [μ_x0; u_0; …; u_{T-1}]` with box bounds and an optimization mask.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTrajectory {
    pub stacked: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub opt_mask: Vec<bool>,
}

impl InputTrajectory {
    pub fn new(
        stacked: DVector<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
        opt_mask: Vec<bool>,
    ) -> Result<Self> {
        let n = stacked.len();
        if lower.len() != n || upper.len() != n || opt_mask.len() != n {
            return Err(Error::dim(
                "input bounds/mask",
                n,
                format!("{}/{}/{}", lower.len(), upper.len(), opt_mask.len()),
            ));
        }
        for i in 0..n {
            if !(lower[i] <= stacked[i] && stacked[i] <= upper[i]) {
                return Err(Error::InvalidArgument(format!(
                    "input coordinate {i} = {} outside [{}, {}]",
                    stacked[i], lower[i], upper[i]
                )));
            }
        }
        Ok(Self {
            stacked,
            lower,
            upper,
            opt_mask,
        })
    }

    /// No bounds, every coordinate optimizable.
    pub fn unconstrained(stacked: DVector<f64>) -> Self {
        let n = stacked.len();
        Self {
            stacked,
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
            opt_mask: vec![true; n],
        }
    }

    /// Stacks `μ_x0` and `u_0 … u_{T-1}`, unconstrained.
    pub fn from_parts(mu_x0: &DVector<f64>, inputs: &[DVector<f64>]) -> Self {
        let mut v: Vec<f64> = mu_x0.iter().copied().collect();
        for u in inputs {
            v.extend(u.iter());
        }
        Self::unconstrained(DVector::from_vec(v))
    }

    pub fn len(&self) -> usize {
        self.stacked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stacked.is_empty()
    }

    /// Replaces the stacked vector, keeping bounds and mask.
    pub fn with_stacked(&self, stacked: DVector<f64>) -> Self {
        Self {
            stacked,
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            opt_mask: self.opt_mask.clone(),
        }
    }

    /// Applies the same box `[lo, hi]` to every input coordinate (not to `μ_x0`).
    pub fn with_input_box(mut self, n_x: usize, lo: f64, hi: f64) -> Result<Self> {
        for i in n_x..self.len() {
            self.lower[i] = lo;
            self.upper[i] = hi;
        }
        Self::new(self.stacked, self.lower, self.upper, self.opt_mask)
    }

    /// Freezes (or releases) the `μ_x0` block.
    pub fn with_initial_mean_optimizable(mut self, n_x: usize, optimizable: bool) -> Self {
        for m in self.opt_mask.iter_mut().take(n_x) {
            *m = optimizable;
        }
        self
    }
}

/// First and second moments of the state trajectory.
#[derive(Debug, Clone)]
pub struct StateStatistics {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    /// `cross_upper[t][k]` holds `C_{t, t+k} = Cov(x_t, x_{t+k})`.
    cross_upper: Vec<Vec<DMatrix<f64>>>,
    /// `sens[i][t] = ∂x̄_t / ∂Ū_i`.
    pub sens: Option<Vec<Vec<DVector<f64>>>>,
}

impl StateStatistics {
    pub fn horizon(&self) -> usize {
        self.means.len() - 1
    }

    pub fn state_dim(&self) -> usize {
        self.means[0].len()
    }

    /// `C_{t t'} = Cov(x_t, x_{t'})`.
    pub fn cross(&self, t: usize, t2: usize) -> DMatrix<f64> {
        if t <= t2 {
            self.cross_upper[t][t2 - t].clone()
        } else {
            self.cross_upper[t2][t - t2].transpose()
        }
    }

    /// Stored block `C_{t t'}` for `t ≤ t'`.
    pub fn cross_stored(&self, t: usize, t2: usize) -> &DMatrix<f64> {
        debug_assert!(t <= t2);
        &self.cross_upper[t][t2 - t]
    }

    /// Adds mean sensitivities for every stacked input coordinate.
    pub fn with_sensitivities(mut self, dynamics: &LinearDynamics) -> Result<Self> {
        if dynamics.horizon() != self.horizon() {
            return Err(Error::dim("dynamics horizon", self.horizon(), dynamics.horizon()));
        }
        let sens = (0..dynamics.stacked_len())
            .map(|i| input_sensitivity(dynamics, i))
            .collect::<Result<Vec<_>>>()?;
        self.sens = Some(sens);
        Ok(self)
    }
}

fn check_shapes(dynamics: &LinearDynamics, noise: &NoiseModel, u: &InputTrajectory) -> Result<()> {
    if dynamics.horizon() != noise.horizon() {
        return Err(Error::dim("noise model horizon", dynamics.horizon(), noise.horizon()));
    }
    if noise.state_dim() != dynamics.state_dim() {
        return Err(Error::dim("noise state dimension", dynamics.state_dim(), noise.state_dim()));
    }
    if u.len() != dynamics.stacked_len() {
        return Err(Error::dim("stacked input length", dynamics.stacked_len(), u.len()));
    }
    Ok(())
}

/// Propagates `x̄_t`, `P_t` and every cross-covariance block `C_{t t'}`.
pub fn propagate_state_stats(
    dynamics: &LinearDynamics,
    noise: &NoiseModel,
    u: &InputTrajectory,
) -> Result<StateStatistics> {
    check_shapes(dynamics, noise, u)?;
    let n_x = dynamics.state_dim();
    let n_u = dynamics.input_dim();
    let horizon = dynamics.horizon();

    let mut means = Vec::with_capacity(horizon + 1);
    let mut covs = Vec::with_capacity(horizon + 1);
    means.push(u.stacked.rows(0, n_x).into_owned());
    covs.push(noise.sigma_x0().clone());
    for t in 0..horizon {
        let ut = u.stacked.rows(n_x + t * n_u, n_u);
        let a = dynamics.a(t);
        means.push(a * &means[t] + dynamics.b(t) * ut);
        let p = a * &covs[t] * a.transpose() + noise.sigma_w(t + 1);
        covs.push((&p + p.transpose()) * 0.5);
    }

    let cross_upper = (0..=horizon)
        .map(|t| {
            let mut row = Vec::with_capacity(horizon + 1 - t);
            row.push(covs[t].clone());
            for t2 in t..horizon {
                let next = row[t2 - t].clone() * dynamics.a(t2).transpose();
                row.push(next);
            }
            row
        })
        .collect();

    Ok(StateStatistics {
        means,
        covs,
        cross_upper,
        sens: None,
    })
}

/// `∂x̄_t / ∂Ū_i` for `t = 0 … T` by forward recursion.
pub fn input_sensitivity(dynamics: &LinearDynamics, i: usize) -> Result<Vec<DVector<f64>>> {
    let (entry, direction) = dynamics.coordinate_entry(i)?;
    let n_x = dynamics.state_dim();
    let mut out = vec![DVector::zeros(n_x); dynamics.horizon() + 1];
    out[entry] = direction;
    for t in entry..dynamics.horizon() {
        out[t + 1] = dynamics.a(t) * &out[t];
    }
    Ok(out)
}

/// Explicit lifted matrices `Ā` (block lower-triangular) and `B̄` (block diagonal).
#[derive(Debug, Clone)]
pub struct LiftedBlocks {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
}

impl LiftedBlocks {
    /// Block row `Ā_t`.
    pub fn a_row(&self, t: usize, n_x: usize) -> DMatrix<f64> {
        self.a_bar.rows(t * n_x, n_x).into_owned()
    }
}

pub fn build_lifted_blocks(dynamics: &LinearDynamics) -> Result<LiftedBlocks> {
    build_lifted_blocks_capped(dynamics, LIFTED_CAP)
}

pub fn build_lifted_blocks_capped(dynamics: &LinearDynamics, cap: usize) -> Result<LiftedBlocks> {
    let n_x = dynamics.state_dim();
    let n_u = dynamics.input_dim();
    let horizon = dynamics.horizon();
    let size = n_x * (horizon + 1);
    if size > cap {
        return Err(Error::TooLarge { size, cap });
    }
    let mut a_bar = DMatrix::zeros(size, size);
    for k in 0..=horizon {
        let mut block = DMatrix::<f64>::identity(n_x, n_x);
        a_bar.view_mut((k * n_x, k * n_x), (n_x, n_x)).copy_from(&block);
        for t in k + 1..=horizon {
            block = dynamics.a(t - 1) * block;
            a_bar.view_mut((t * n_x, k * n_x), (n_x, n_x)).copy_from(&block);
        }
    }
    let mut b_bar = DMatrix::zeros(size, dynamics.stacked_len());
    b_bar
        .view_mut((0, 0), (n_x, n_x))
        .copy_from(&DMatrix::<f64>::identity(n_x, n_x));
    for k in 0..horizon {
        b_bar
            .view_mut(((k + 1) * n_x, n_x + k * n_u), (n_x, n_u))
            .copy_from(dynamics.b(k));
    }
    Ok(LiftedBlocks { a_bar, b_bar })
}
