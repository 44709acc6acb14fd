//! Dynamic basis statistics for Fourier output bases.
//!
//! For `φ_0 = 1` and `φ_n(x) = e^{j f_nᵀx} + e^{-j f_nᵀx} = 2 cos(f_nᵀx)`, the mean
//! and cross-time covariance of `φ(x_t)` along a Gaussian state trajectory have
//! closed forms in terms of `x̄_t`, `P_t` and `C_{t t'}`:
//!
//! ```text
//! μ_n^t        = 2 cos(a) exp(-q_m/2)
//! Σ_mn^{t t'}  = 2 Σ_{s=±1} cos(a + s b) exp(-(q_m + q_n)/2) (exp(-s c) - 1)
//! ```
//!
//! with `a = f_mᵀx̄_t`, `b = f_nᵀx̄_{t'}`, `q_m = f_mᵀP_t f_m`, `q_n = f_nᵀP_{t'} f_n`
//! and `c = f_mᵀC_{t t'} f_n`. Everything is evaluated in real arithmetic.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::consts::{LIFTED_CAP, SQRT_CLIP_TOL};
use crate::error::{Error, Result};
use crate::estimators::ParameterPrior;
use crate::lifted::{build_lifted_blocks_capped, InputTrajectory, LinearDynamics, NoiseModel, StateStatistics};
use crate::linalg::{psd_sqrt, symmetrize};

/// Characteristic generator `ρ` of an elliptical distribution: the characteristic
/// function at frequency `g` is `e^{j gᵀμ} ρ(gᵀ Σ g)`.
pub trait CharacteristicGenerator: Send + Sync {
    fn rho(&self, q: f64) -> f64;
}

/// `ρ(q) = exp(-q/2)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussianGenerator;

impl CharacteristicGenerator for GaussianGenerator {
    fn rho(&self, q: f64) -> f64 {
        (-0.5 * q).exp()
    }
}

/// Frequencies `f_0 = 0, f_1, …, f_N` of a real Fourier basis.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierBasis {
    freqs: Vec<DVector<f64>>,
    /// Row `n` is `f_nᵀ`.
    matrix: DMatrix<f64>,
}

impl FourierBasis {
    pub fn new(freqs: Vec<DVector<f64>>) -> Result<Self> {
        let Some(first) = freqs.first() else {
            return Err(Error::InvalidArgument("a Fourier basis needs at least f_0 = 0".into()));
        };
        let n_x = first.len();
        if n_x == 0 {
            return Err(Error::InvalidArgument("frequency vectors must be non-empty".into()));
        }
        if first.iter().any(|v| *v != 0.0) {
            return Err(Error::InvalidArgument("f_0 must be the zero vector".into()));
        }
        for (n, f) in freqs.iter().enumerate() {
            if f.len() != n_x {
                return Err(Error::dim(format!("frequency f_{n}"), n_x, f.len()));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("frequency f_{n} is not finite")));
            }
        }
        let matrix = DMatrix::from_fn(freqs.len(), n_x, |n, k| freqs[n][k]);
        Ok(Self { freqs, matrix })
    }

    /// The 11-term planar basis used by the benchmarks: `f_n = [n·2π/10, 0]` for
    /// `n = 1..3` and `f_n = [(n-7)·2π/10, 2π/6]` for `n = 4..10`.
    pub fn planar_benchmark() -> Self {
        let w = 2.0 * std::f64::consts::PI / 10.0;
        let v = 2.0 * std::f64::consts::PI / 6.0;
        let mut freqs = vec![DVector::zeros(2)];
        for n in 1..=3 {
            freqs.push(DVector::from_vec(vec![n as f64 * w, 0.0]));
        }
        for n in 4..=10 {
            freqs.push(DVector::from_vec(vec![(n as f64 - 7.0) * w, v]));
        }
        Self::new(freqs).expect("static basis is valid")
    }

    /// Number of basis functions `N + 1`.
    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn frequency(&self, n: usize) -> &DVector<f64> {
        &self.freqs[n]
    }

    pub fn frequencies(&self) -> &[DVector<f64>] {
        &self.freqs
    }

    /// `(N+1) × n_x` matrix with rows `f_nᵀ`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `φ(x)`.
    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let phase = &self.matrix * x;
        DVector::from_fn(self.len(), |n, _| if n == 0 { 1.0 } else { 2.0 * phase[n].cos() })
    }

    fn check_state_dim(&self, n_x: usize) -> Result<()> {
        if self.state_dim() != n_x {
            return Err(Error::dim("frequency dimension vs state dimension", n_x, self.state_dim()));
        }
        Ok(())
    }
}

/// `Φ̄` (columns `μ_φ^t`) and `M` (`M_{t t'} = tr(Σ_φ^{t t'} (Σ_θ + μ_θ μ_θᵀ))`).
#[derive(Debug, Clone, PartialEq)]
pub struct DesignStatistics {
    pub phi_bar: DMatrix<f64>,
    pub m: DMatrix<f64>,
}

impl DesignStatistics {
    pub fn horizon(&self) -> usize {
        self.phi_bar.ncols() - 1
    }

    pub fn n_basis(&self) -> usize {
        self.phi_bar.nrows()
    }

    /// Statistics for measurements `0 … t` only (leading blocks).
    pub fn truncated(&self, t: usize) -> Self {
        Self {
            phi_bar: self.phi_bar.columns(0, t + 1).into_owned(),
            m: self.m.view((0, 0), (t + 1, t + 1)).into_owned(),
        }
    }
}

/// `∂Φ̄/∂Ū_i` and `∂M/∂Ū_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignGradient {
    pub d_phi_bar: DMatrix<f64>,
    pub d_m: DMatrix<f64>,
}

/// `e^{log_env} (e^x - 1)` without overflow when `log_env + x ≤ 0`.
#[inline]
pub(crate) fn scaled_expm1(log_env: f64, x: f64) -> f64 {
    if x.abs() < 1.0 {
        log_env.exp() * x.exp_m1()
    } else {
        (log_env + x).exp() - log_env.exp()
    }
}

/// Per-(n, t) phases and Gaussian envelopes shared by every formula.
pub(crate) struct FeatureCache {
    /// `a[(n, t)] = f_nᵀ x̄_t`.
    pub cos: DMatrix<f64>,
    pub sin: DMatrix<f64>,
    /// `-½ f_nᵀ P_t f_n`.
    pub log_env: DMatrix<f64>,
}

impl FeatureCache {
    pub fn new(basis: &FourierBasis, stats: &StateStatistics) -> Result<Self> {
        basis.check_state_dim(stats.state_dim())?;
        let f = basis.matrix();
        let t1 = stats.horizon() + 1;
        let nb = basis.len();
        let mut cos = DMatrix::zeros(nb, t1);
        let mut sin = DMatrix::zeros(nb, t1);
        let mut log_env = DMatrix::zeros(nb, t1);
        for t in 0..t1 {
            let phase = f * &stats.means[t];
            let fp = f * &stats.covs[t];
            for n in 0..nb {
                cos[(n, t)] = phase[n].cos();
                sin[(n, t)] = phase[n].sin();
                log_env[(n, t)] = -0.5 * fp.row(n).dot(&f.row(n));
            }
        }
        Ok(Self { cos, sin, log_env })
    }

    fn phi_bar(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.cos.nrows(), self.cos.ncols(), |n, t| {
            if n == 0 {
                1.0
            } else {
                2.0 * self.cos[(n, t)] * self.log_env[(n, t)].exp()
            }
        })
    }
}

/// `F C_{t t'} Fᵀ`, the coupling `c_{mn} = f_mᵀ C_{t t'} f_n`.
fn coupling(basis: &FourierBasis, stats: &StateStatistics, t: usize, t2: usize) -> DMatrix<f64> {
    let f = basis.matrix();
    f * stats.cross(t, t2) * f.transpose()
}

fn check_index(t: usize, len: usize) -> Result<()> {
    if t >= len {
        return Err(Error::IndexOutOfRange { index: t, len });
    }
    Ok(())
}

/// `μ_φ^t`.
pub fn fourier_mean(basis: &FourierBasis, stats: &StateStatistics, t: usize) -> Result<DVector<f64>> {
    basis.check_state_dim(stats.state_dim())?;
    check_index(t, stats.horizon() + 1)?;
    let f = basis.matrix();
    let phase = f * &stats.means[t];
    let fp = f * &stats.covs[t];
    Ok(DVector::from_fn(basis.len(), |n, _| {
        if n == 0 {
            1.0
        } else {
            2.0 * phase[n].cos() * (-0.5 * fp.row(n).dot(&f.row(n))).exp()
        }
    }))
}

/// `Σ_{φ, mn}^{t t'} = Cov(φ_m(x_t), φ_n(x_{t'}))`.
pub fn fourier_cross_cov(
    basis: &FourierBasis,
    stats: &StateStatistics,
    t: usize,
    t2: usize,
    m: usize,
    n: usize,
) -> Result<f64> {
    basis.check_state_dim(stats.state_dim())?;
    check_index(t, stats.horizon() + 1)?;
    check_index(t2, stats.horizon() + 1)?;
    check_index(m, basis.len())?;
    check_index(n, basis.len())?;
    if m == 0 || n == 0 {
        return Ok(0.0);
    }
    let fm = basis.frequency(m);
    let fn_ = basis.frequency(n);
    let a = fm.dot(&stats.means[t]);
    let b = fn_.dot(&stats.means[t2]);
    let qm = (stats.covs[t].clone() * fm).dot(fm);
    let qn = (stats.covs[t2].clone() * fn_).dot(fn_);
    let c = (stats.cross(t, t2) * fn_).dot(fm);
    let le = -0.5 * (qm + qn);
    Ok(2.0 * ((a + b).cos() * scaled_expm1(le, -c) + (a - b).cos() * scaled_expm1(le, c)))
}

/// `Σ_θ + μ_θ μ_θᵀ`.
pub fn parameter_second_moment(prior: &ParameterPrior) -> DMatrix<f64> {
    &prior.sigma_theta + &prior.mu_theta * prior.mu_theta.transpose()
}

fn check_prior(basis: &FourierBasis, prior: &ParameterPrior) -> Result<()> {
    if prior.len() != basis.len() {
        return Err(Error::dim("prior dimension vs basis count", basis.len(), prior.len()));
    }
    Ok(())
}

/// One entry `M_{t t'}` from cached phases; only `m, n ≥ 1` contribute.
fn m_entry(cache: &FeatureCache, s: &DMatrix<f64>, c: &DMatrix<f64>, t: usize, t2: usize) -> f64 {
    let nb = s.nrows();
    let mut acc = 0.0;
    for m in 1..nb {
        let (cm, sm, lm) = (cache.cos[(m, t)], cache.sin[(m, t)], cache.log_env[(m, t)]);
        let mut row = 0.0;
        for n in 1..nb {
            let (cn, sn, ln) = (cache.cos[(n, t2)], cache.sin[(n, t2)], cache.log_env[(n, t2)]);
            let cos_sum = cm * cn - sm * sn;
            let cos_diff = cm * cn + sm * sn;
            let cmn = c[(m, n)];
            let le = lm + ln;
            let sigma = 2.0 * (cos_sum * scaled_expm1(le, -cmn) + cos_diff * scaled_expm1(le, cmn));
            row += s[(m, n)] * sigma;
        }
        acc += row;
    }
    acc
}

/// Assembles `Φ̄` and `M` in closed form for Gaussian process noise.
pub fn build_design(
    basis: &FourierBasis,
    stats: &StateStatistics,
    prior: &ParameterPrior,
) -> Result<DesignStatistics> {
    check_prior(basis, prior)?;
    let cache = FeatureCache::new(basis, stats)?;
    let s = parameter_second_moment(prior);
    let t1 = stats.horizon() + 1;

    let rows: Vec<Vec<f64>> = (0..t1)
        .into_par_iter()
        .map(|t| {
            (t..t1)
                .map(|t2| m_entry(&cache, &s, &coupling(basis, stats, t, t2), t, t2))
                .collect()
        })
        .collect();
    let mut m = DMatrix::zeros(t1, t1);
    for (t, row) in rows.into_iter().enumerate() {
        for (k, v) in row.into_iter().enumerate() {
            m[(t, t + k)] = v;
            m[(t + k, t)] = v;
        }
    }
    Ok(DesignStatistics {
        phi_bar: cache.phi_bar(),
        m: symmetrize(&m),
    })
}

/// `∂Φ̄/∂Ū_i` and `∂M/∂Ū_i`. Only the phases depend on `Ū`; covariances do not.
pub fn build_design_gradient(
    basis: &FourierBasis,
    stats: &StateStatistics,
    prior: &ParameterPrior,
    i: usize,
) -> Result<DesignGradient> {
    check_prior(basis, prior)?;
    let sens = stats.sens.as_ref().ok_or(Error::MissingSensitivities)?;
    check_index(i, sens.len())?;
    let cache = FeatureCache::new(basis, stats)?;
    let s = parameter_second_moment(prior);
    let t1 = stats.horizon() + 1;
    let nb = basis.len();
    let f = basis.matrix();

    // g[(n, t)] = f_nᵀ ∂x̄_t/∂Ū_i
    let mut g = DMatrix::zeros(nb, t1);
    for t in 0..t1 {
        g.set_column(t, &(f * &sens[i][t]));
    }

    let d_phi_bar = DMatrix::from_fn(nb, t1, |n, t| {
        if n == 0 {
            0.0
        } else {
            -2.0 * cache.sin[(n, t)] * cache.log_env[(n, t)].exp() * g[(n, t)]
        }
    });

    let mut d_m = DMatrix::zeros(t1, t1);
    for t in 0..t1 {
        for t2 in t..t1 {
            let c = coupling(basis, stats, t, t2);
            let mut acc = 0.0;
            for m in 1..nb {
                let (cm, sm, lm, gm) = (cache.cos[(m, t)], cache.sin[(m, t)], cache.log_env[(m, t)], g[(m, t)]);
                for n in 1..nb {
                    let (cn, sn, ln, gn) =
                        (cache.cos[(n, t2)], cache.sin[(n, t2)], cache.log_env[(n, t2)], g[(n, t2)]);
                    let sin_sum = sm * cn + cm * sn;
                    let sin_diff = sm * cn - cm * sn;
                    let le = lm + ln;
                    let d_sigma = -2.0
                        * (sin_sum * (gm + gn) * scaled_expm1(le, -c[(m, n)])
                            + sin_diff * (gm - gn) * scaled_expm1(le, c[(m, n)]));
                    acc += s[(m, n)] * d_sigma;
                }
            }
            d_m[(t, t2)] = acc;
            d_m[(t2, t)] = acc;
        }
    }
    Ok(DesignGradient { d_phi_bar, d_m })
}

/// Design statistics for an arbitrary elliptical noise family.
///
/// Materializes `Ā`, `B̄` and a symmetric square root `L` of `Σ_W̄`, whitens each
/// frequency as `z_{n t} = L Ā_tᵀ f_n`, and evaluates
/// `μ_n^t = 2 cos(f_nᵀ Ā_t B̄ Ū) ρ(‖z_{n t}‖²)` and
/// `Σ_mn^{t t'} = 2 Σ_s cos(a + s b) (ρ(‖z_{m t} + s z_{n t'}‖²) - ρ(‖z_{m t}‖²) ρ(‖z_{n t'}‖²))`.
pub fn build_design_generic(
    basis: &FourierBasis,
    dynamics: &LinearDynamics,
    noise: &NoiseModel,
    u: &InputTrajectory,
    prior: &ParameterPrior,
    generator: &dyn CharacteristicGenerator,
) -> Result<DesignStatistics> {
    check_prior(basis, prior)?;
    basis.check_state_dim(dynamics.state_dim())?;
    if u.len() != dynamics.stacked_len() {
        return Err(Error::dim("stacked input length", dynamics.stacked_len(), u.len()));
    }
    if noise.horizon() != dynamics.horizon() {
        return Err(Error::dim("noise model horizon", dynamics.horizon(), noise.horizon()));
    }
    let n_x = dynamics.state_dim();
    let t1 = dynamics.horizon() + 1;
    let nb = basis.len();
    let lifted = build_lifted_blocks_capped(dynamics, LIFTED_CAP)?;
    let root = psd_sqrt(&noise.lifted_covariance(), SQRT_CLIP_TOL)?;
    let drive = &lifted.b_bar * &u.stacked;

    let mut phase = DMatrix::zeros(nb, t1);
    let mut whitened: Vec<Vec<DVector<f64>>> = Vec::with_capacity(t1);
    for t in 0..t1 {
        let a_row = lifted.a_row(t, n_x);
        let mean = &a_row * &drive;
        let mut zs = Vec::with_capacity(nb);
        for n in 0..nb {
            let f = basis.frequency(n);
            phase[(n, t)] = f.dot(&mean);
            zs.push(&root * (a_row.transpose() * f));
        }
        whitened.push(zs);
    }

    let phi_bar = DMatrix::from_fn(nb, t1, |n, t| {
        if n == 0 {
            1.0
        } else {
            2.0 * phase[(n, t)].cos() * generator.rho(whitened[t][n].norm_squared())
        }
    });

    let s = parameter_second_moment(prior);
    let mut m = DMatrix::zeros(t1, t1);
    for t in 0..t1 {
        for t2 in t..t1 {
            let mut acc = 0.0;
            for mi in 1..nb {
                let zm = &whitened[t][mi];
                let rm = generator.rho(zm.norm_squared());
                for ni in 1..nb {
                    let zn = &whitened[t2][ni];
                    let rn = generator.rho(zn.norm_squared());
                    let (a, b) = (phase[(mi, t)], phase[(ni, t2)]);
                    let plus = generator.rho((zm + zn).norm_squared()) - rm * rn;
                    let minus = generator.rho((zm - zn).norm_squared()) - rm * rn;
                    acc += s[(mi, ni)] * 2.0 * ((a + b).cos() * plus + (a - b).cos() * minus);
                }
            }
            m[(t, t2)] = acc;
            m[(t2, t)] = acc;
        }
    }
    Ok(DesignStatistics {
        phi_bar,
        m: symmetrize(&m),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifted::{propagate_state_stats, NoiseKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn planar(horizon: usize, sigma_w_sq: f64) -> (LinearDynamics, NoiseModel, InputTrajectory) {
        let dynamics =
            LinearDynamics::time_invariant(DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 0.1, horizon).unwrap();
        let noise = NoiseModel::isotropic(2, horizon, sigma_w_sq, sigma_w_sq, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut v = vec![3.2, 2.8];
        v.extend((0..2 * horizon).map(|_| rng.random::<f64>() * 8.0 - 4.0));
        (dynamics, noise, InputTrajectory::unconstrained(DVector::from_vec(v)))
    }

    fn uniform_prior(nb: usize) -> ParameterPrior {
        ParameterPrior::isotropic(nb, 5.0, 3.0).unwrap()
    }

    #[test]
    fn constant_basis_mean_is_one() {
        let (d, n, u) = planar(4, 0.01);
        let stats = propagate_state_stats(&d, &n, &u).unwrap();
        let basis = FourierBasis::planar_benchmark();
        for t in 0..=4 {
            assert_eq!(fourier_mean(&basis, &stats, t).unwrap()[0], 1.0);
        }
    }

    #[test]
    fn deterministic_origin_gives_amplitude_two() {
        let horizon = 3;
        let d = LinearDynamics::time_invariant(DMatrix::identity(2, 2), DMatrix::identity(2, 2), horizon).unwrap();
        let n = NoiseModel::isotropic(2, horizon, 0.0, 0.0, 0.01).unwrap();
        let u = InputTrajectory::unconstrained(DVector::zeros(d.stacked_len()));
        let stats = propagate_state_stats(&d, &n, &u).unwrap();
        let basis = FourierBasis::planar_benchmark();
        for t in 0..=horizon {
            let mu = fourier_mean(&basis, &stats, t).unwrap();
            for k in 1..basis.len() {
                assert_eq!(mu[k], 2.0);
            }
        }
    }

    #[test]
    fn covariance_vanishes_for_constant_or_deterministic() {
        let (d, n, u) = planar(3, 0.01);
        let stats = propagate_state_stats(&d, &n, &u).unwrap();
        let basis = FourierBasis::planar_benchmark();
        for k in 0..basis.len() {
            assert_eq!(fourier_cross_cov(&basis, &stats, 1, 2, 0, k).unwrap(), 0.0);
            assert_eq!(fourier_cross_cov(&basis, &stats, 1, 2, k, 0).unwrap(), 0.0);
        }
        let (d, n, u) = planar(3, 0.0);
        let stats = propagate_state_stats(&d, &n, &u).unwrap();
        for m in 0..basis.len() {
            for k in 0..basis.len() {
                assert_eq!(fourier_cross_cov(&basis, &stats, 0, 3, m, k).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn zero_noise_design_is_basis_at_mean() {
        let (d, n, u) = planar(6, 0.0);
        let stats = propagate_state_stats(&d, &n, &u).unwrap();
        let basis = FourierBasis::planar_benchmark();
        let design = build_design(&basis, &stats, &uniform_prior(basis.len())).unwrap();
        assert!(design.m.iter().all(|v| *v == 0.0));
        for t in 0..=6 {
            let phi = basis.eval(&stats.means[t]);
            assert!((design.phi_bar.column(t) - phi).abs().max() < 1e-15);
        }
    }

    #[test]
    fn constant_only_basis_has_no_variance() {
        let (d, n, u) = planar(5, 0.01);
        let stats = propagate_state_stats(&d, &n, &u).unwrap();
        let basis = FourierBasis::new(vec![DVector::zeros(2)]).unwrap();
        let design = build_design(&basis, &stats, &uniform_prior(1)).unwrap();
        assert!(design.phi_bar.iter().all(|v| *v == 1.0));
        assert!(design.m.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn design_entries_match_pointwise_formulas() {
        let (d, n, u) = planar(5, 0.01);
        let stats = propagate_state_stats(&d, &n, &u).unwrap();
        let basis = FourierBasis::planar_benchmark();
        let prior = uniform_prior(basis.len());
        let design = build_design(&basis, &stats, &prior).unwrap();
        let s = parameter_second_moment(&prior);
        for t in 0..=5 {
            let mu = fourier_mean(&basis, &stats, t).unwrap();
            assert!((design.phi_bar.column(t) - mu).abs().max() < 1e-14);
            for t2 in 0..=5 {
                let mut want = 0.0;
                for m in 0..basis.len() {
                    for k in 0..basis.len() {
                        want += s[(m, k)] * fourier_cross_cov(&basis, &stats, t, t2, m, k).unwrap();
                    }
                }
                assert!((design.m[(t, t2)] - want).abs() < 1e-10 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn amplitude_bounds() {
        let (d, n, u) = planar(8, 0.01);
        let stats = propagate_state_stats(&d, &n, &u).unwrap();
        let basis = FourierBasis::planar_benchmark();
        for t in 0..=8 {
            let mu = fourier_mean(&basis, &stats, t).unwrap();
            assert!(mu.iter().skip(1).all(|v| v.abs() <= 2.0));
            for t2 in 0..=8 {
                for m in 0..basis.len() {
                    for k in 0..basis.len() {
                        assert!(fourier_cross_cov(&basis, &stats, t, t2, m, k).unwrap().abs() <= 8.0);
                    }
                }
            }
        }
    }

    #[test]
    fn mean_envelope_decays_for_random_walk() {
        let horizon = 30;
        let d = LinearDynamics::time_invariant(DMatrix::identity(2, 2), DMatrix::identity(2, 2), horizon).unwrap();
        let n = NoiseModel::isotropic(2, horizon, 0.01, 0.01, 0.01).unwrap();
        let u = InputTrajectory::unconstrained(DVector::zeros(d.stacked_len()));
        let stats = propagate_state_stats(&d, &n, &u).unwrap();
        let basis = FourierBasis::planar_benchmark();
        for k in 1..basis.len() {
            let mut prev = f64::INFINITY;
            for t in 0..=horizon {
                let mu = fourier_mean(&basis, &stats, t).unwrap()[k];
                let f = basis.frequency(k);
                let env = 2.0 * (-0.5 * (stats.covs[t].clone() * f).dot(f)).exp();
                assert!(mu.abs() <= env + 1e-15);
                assert!(env < prev);
                prev = env;
            }
        }
    }

    #[test]
    fn generic_route_with_gaussian_generator_matches_closed_form() {
        let basis = FourierBasis::planar_benchmark();
        let prior = uniform_prior(basis.len());
        for sigma in [0.0, 0.001, 0.01] {
            let (d, n, u) = planar(6, sigma);
            let n = n.with_kind(NoiseKind::GenericCharacteristic(std::sync::Arc::new(GaussianGenerator)));
            let stats = propagate_state_stats(&d, &n, &u).unwrap();
            let closed = build_design(&basis, &stats, &prior).unwrap();
            let generic = build_design_generic(&basis, &d, &n, &u, &prior, &GaussianGenerator).unwrap();
            assert!((&closed.phi_bar - &generic.phi_bar).abs().max() < 1e-12);
            assert!((&closed.m - &generic.m).abs().max() < 1e-10);
        }
    }

    #[test]
    fn gradient_requires_sensitivities() {
        let (d, n, u) = planar(2, 0.01);
        let stats = propagate_state_stats(&d, &n, &u).unwrap();
        let basis = FourierBasis::planar_benchmark();
        let err = build_design_gradient(&basis, &stats, &uniform_prior(basis.len()), 0).unwrap_err();
        assert!(matches!(err, Error::MissingSensitivities));
    }

    #[test]
    fn gradient_is_causal_and_row_zero_vanishes() {
        let horizon = 5;
        let (d, n, u) = planar(horizon, 0.01);
        let stats = propagate_state_stats(&d, &n, &u).unwrap().with_sensitivities(&d).unwrap();
        let basis = FourierBasis::planar_benchmark();
        let prior = uniform_prior(basis.len());
        // u_2 enters x̄_3
        let i = 2 + 2 * 2;
        let g = build_design_gradient(&basis, &stats, &prior, i).unwrap();
        for t in 0..=horizon {
            assert_eq!(g.d_phi_bar[(0, t)], 0.0);
        }
        for t in 0..=2 {
            assert!(g.d_phi_bar.column(t).iter().all(|v| *v == 0.0));
            for t2 in 0..=2 {
                assert_eq!(g.d_m[(t, t2)], 0.0);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (d, n, u) = planar(2, 0.01);
        let stats = propagate_state_stats(&d, &n, &u).unwrap();
        let basis = FourierBasis::new(vec![DVector::zeros(3), DVector::from_vec(vec![1.0, 0.0, 0.0])]).unwrap();
        assert!(matches!(fourier_mean(&basis, &stats, 0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn nonzero_first_frequency_is_rejected() {
        assert!(FourierBasis::new(vec![DVector::from_vec(vec![0.1, 0.0])]).is_err());
    }
}
