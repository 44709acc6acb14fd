//! Bayesian MMSE affine estimator and regularized least-squares baselines.

use nalgebra::{DMatrix, DVector};

use crate::dbs::{DesignStatistics, FourierBasis};
use crate::error::{Error, Result};
use crate::lifted::StateStatistics;
use crate::linalg::{min_eigenvalue, repair_psd, spd_factor, spd_inverse, symmetrize};

/// Prior mean and covariance of the basis weights `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterPrior {
    pub mu_theta: DVector<f64>,
    pub sigma_theta: DMatrix<f64>,
}

impl ParameterPrior {
    pub fn new(mu_theta: DVector<f64>, sigma_theta: DMatrix<f64>) -> Result<Self> {
        let n = mu_theta.len();
        if sigma_theta.nrows() != n || sigma_theta.ncols() != n {
            return Err(Error::dim(
                "Sigma_theta",
                format!("{n}x{n}"),
                format!("{}x{}", sigma_theta.nrows(), sigma_theta.ncols()),
            ));
        }
        if mu_theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("mu_theta has non-finite entries".into()));
        }
        let sigma_theta = repair_psd(&sigma_theta, "Sigma_theta")?;
        Ok(Self { mu_theta, sigma_theta })
    }

    /// Independent components with common mean and variance.
    pub fn isotropic(n: usize, mean: f64, variance: f64) -> Result<Self> {
        if !(variance >= 0.0) {
            return Err(Error::InvalidArgument(format!("prior variance must be nonnegative, got {variance}")));
        }
        Self::new(DVector::from_element(n, mean), DMatrix::identity(n, n) * variance)
    }

    pub fn len(&self) -> usize {
        self.mu_theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu_theta.is_empty()
    }
}

/// Measured outputs `Ȳ = [y_0, …, y_T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub y: DVector<f64>,
}

impl MeasurementSet {
    pub fn new(y: DVector<f64>) -> Result<Self> {
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("measurement y_{i} is not finite")));
        }
        Ok(Self { y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// `θ̂ = Ψ Ȳ + ψ` together with its analytic error.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorGain {
    /// `Ψ*`, `(N+1) × (T+1)`.
    pub psi: DMatrix<f64>,
    /// `ψ* = μ_θ − Ψ* Φ̄ᵀ μ_θ`.
    pub offset: DVector<f64>,
    /// `J*_B = tr(Σ_pos)`.
    pub j_star: f64,
    /// `Σ_θ − Ψ* Φ̄ᵀ Σ_θ`.
    pub sigma_pos: DMatrix<f64>,
}

/// Posterior belief after one batch of measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorBelief {
    pub mu_pos: DVector<f64>,
    pub sigma_pos: DMatrix<f64>,
}

impl PosteriorBelief {
    /// The posterior as a prior for the next batch.
    pub fn as_prior(&self) -> Result<ParameterPrior> {
        ParameterPrior::new(self.mu_pos.clone(), self.sigma_pos.clone())
    }
}

fn check_noise(sigma_v_sq: &[f64], len: usize) -> Result<()> {
    if sigma_v_sq.len() != len {
        return Err(Error::dim("measurement noise variances", len, sigma_v_sq.len()));
    }
    for (index, &value) in sigma_v_sq.iter().enumerate() {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::NonPositiveVariance { index, value });
        }
    }
    Ok(())
}

fn check_design(design: &DesignStatistics, prior: &ParameterPrior) -> Result<()> {
    if design.phi_bar.nrows() != prior.len() {
        return Err(Error::dim("prior dimension vs basis count", design.phi_bar.nrows(), prior.len()));
    }
    let t1 = design.phi_bar.ncols();
    if design.m.nrows() != t1 || design.m.ncols() != t1 {
        return Err(Error::dim(
            "M",
            format!("{t1}x{t1}"),
            format!("{}x{}", design.m.nrows(), design.m.ncols()),
        ));
    }
    Ok(())
}

/// `G = Φ̄ᵀ Σ_θ Φ̄ + M + Σ_V̄`.
pub fn innovation_covariance(
    design: &DesignStatistics,
    prior: &ParameterPrior,
    sigma_v_sq: &[f64],
) -> Result<DMatrix<f64>> {
    check_design(design, prior)?;
    check_noise(sigma_v_sq, design.phi_bar.ncols())?;
    let mut g = design.phi_bar.transpose() * &prior.sigma_theta * &design.phi_bar + &design.m;
    for (t, v) in sigma_v_sq.iter().enumerate() {
        g[(t, t)] += v;
    }
    Ok(symmetrize(&g))
}

/// Optimal affine gain, offset and analytic error.
pub fn bayes_gain(design: &DesignStatistics, prior: &ParameterPrior, sigma_v_sq: &[f64]) -> Result<EstimatorGain> {
    let g = innovation_covariance(design, prior, sigma_v_sq)?;
    let chol = spd_factor(&g, "G")?;
    // Φ̄ᵀ Σ_θ, (T+1) × (N+1)
    let cross = design.phi_bar.transpose() * &prior.sigma_theta;
    let psi = chol.solve(&cross).transpose();
    let offset = &prior.mu_theta - &psi * (design.phi_bar.transpose() * &prior.mu_theta);
    let sigma_pos = symmetrize(&(&prior.sigma_theta - &psi * &cross));
    let j_star = sigma_pos.trace();
    if !j_star.is_finite() {
        return Err(Error::NotPositiveDefinite { name: "G".into() });
    }
    Ok(EstimatorGain { psi, offset, j_star, sigma_pos })
}

/// `Ψ* Ȳ + ψ*`.
pub fn bayes_estimate(gain: &EstimatorGain, y: &MeasurementSet) -> Result<DVector<f64>> {
    if y.len() != gain.psi.ncols() {
        return Err(Error::dim("measurement length", gain.psi.ncols(), y.len()));
    }
    Ok(&gain.psi * &y.y + &gain.offset)
}

/// Posterior mean `μ_θ + Ψ*(Ȳ − Φ̄ᵀμ_θ)` and covariance `Σ_θ − Ψ*Φ̄ᵀΣ_θ`.
pub fn posterior_update(
    gain: &EstimatorGain,
    design: &DesignStatistics,
    prior: &ParameterPrior,
    y: &MeasurementSet,
) -> Result<PosteriorBelief> {
    check_design(design, prior)?;
    if y.len() != design.phi_bar.ncols() {
        return Err(Error::dim("measurement length", design.phi_bar.ncols(), y.len()));
    }
    let innovation = &y.y - design.phi_bar.transpose() * &prior.mu_theta;
    Ok(PosteriorBelief {
        mu_pos: &prior.mu_theta + &gain.psi * innovation,
        sigma_pos: gain.sigma_pos.clone(),
    })
}

/// `tr((Σ_θ⁻¹ + Φ̄ R⁻¹ Φ̄ᵀ)⁻¹)` with `R = M + Σ_V̄`; requires `Σ_θ ≻ 0`.
pub fn j_star_information_form(design: &DesignStatistics, prior: &ParameterPrior, sigma_v_sq: &[f64]) -> Result<f64> {
    check_design(design, prior)?;
    check_noise(sigma_v_sq, design.phi_bar.ncols())?;
    let mut r = design.m.clone();
    for (t, v) in sigma_v_sq.iter().enumerate() {
        r[(t, t)] += v;
    }
    let r_chol = spd_factor(&symmetrize(&r), "M + Sigma_V")?;
    let info = spd_inverse(&prior.sigma_theta, "Sigma_theta")?
        + &design.phi_bar * r_chol.solve(&design.phi_bar.transpose());
    Ok(spd_inverse(&symmetrize(&info), "posterior information")?.trace())
}

/// `J*(t)` for every prefix `0 … t` of the measurement sequence.
pub fn error_sequence(design: &DesignStatistics, prior: &ParameterPrior, sigma_v_sq: &[f64]) -> Result<Vec<f64>> {
    check_noise(sigma_v_sq, design.phi_bar.ncols())?;
    (0..design.phi_bar.ncols())
        .map(|t| bayes_gain(&design.truncated(t), prior, &sigma_v_sq[..=t]).map(|g| g.j_star))
        .collect()
}

/// `E‖θ − (K Ȳ + c)‖²` for an arbitrary affine estimator, from the first two
/// moments of `θ` and `Ȳ`.
pub fn affine_estimator_mse(
    k: &DMatrix<f64>,
    c: &DVector<f64>,
    design: &DesignStatistics,
    prior: &ParameterPrior,
    sigma_v_sq: &[f64],
) -> Result<f64> {
    check_design(design, prior)?;
    if k.nrows() != prior.len() || k.ncols() != design.phi_bar.ncols() {
        return Err(Error::dim(
            "estimator gain",
            format!("{}x{}", prior.len(), design.phi_bar.ncols()),
            format!("{}x{}", k.nrows(), k.ncols()),
        ));
    }
    if c.len() != prior.len() {
        return Err(Error::dim("estimator offset", prior.len(), c.len()));
    }
    let s = crate::dbs::parameter_second_moment(prior);
    let mut output_moment = design.phi_bar.transpose() * &s * &design.phi_bar + &design.m;
    for (t, v) in sigma_v_sq.iter().enumerate() {
        output_moment[(t, t)] += v;
    }
    let k_phi = k * design.phi_bar.transpose();
    let mse = s.trace() - 2.0 * (&k_phi * &s).trace() + (k * output_moment * k.transpose()).trace()
        - 2.0 * c.dot(&(&prior.mu_theta - &k_phi * &prior.mu_theta))
        + c.norm_squared();
    Ok(mse)
}

/// Regressor choice for the least-squares baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RlsMode {
    /// Basis evaluated at the mean state, `φ(x̄_t)`.
    Dls,
    /// Mean of the basis, `μ_φ^t`.
    Mls,
}

/// Regressor matrix `Φ̃` with column `t` per the mode.
pub fn rls_regressors(mode: RlsMode, basis: &FourierBasis, stats: &StateStatistics) -> Result<DMatrix<f64>> {
    let t1 = stats.horizon() + 1;
    let mut phi = DMatrix::zeros(basis.len(), t1);
    for t in 0..t1 {
        let col = match mode {
            RlsMode::Dls => {
                if basis.state_dim() != stats.state_dim() {
                    return Err(Error::dim("frequency dimension vs state dimension", stats.state_dim(), basis.state_dim()));
                }
                basis.eval(&stats.means[t])
            }
            RlsMode::Mls => crate::dbs::fourier_mean(basis, stats, t)?,
        };
        phi.set_column(t, &col);
    }
    Ok(phi)
}

/// Factorized `(Φ̃Φ̃ᵀ + λI)`, reusable across measurement vectors.
#[derive(Debug, Clone)]
pub struct RlsEstimator {
    regressors: DMatrix<f64>,
    lambda: f64,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

/// Reciprocal condition below which the normal equations count as singular.
const RLS_RCOND: f64 = 1e-13;

impl RlsEstimator {
    pub fn new(regressors: DMatrix<f64>, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be finite and nonnegative, got {lambda}")));
        }
        let n = regressors.nrows();
        let normal = symmetrize(&(&regressors * regressors.transpose() + DMatrix::identity(n, n) * lambda));
        let eig = normal.clone().symmetric_eigen();
        let hi = eig.eigenvalues.max();
        let lo = min_eigenvalue(&normal);
        if !(lo > RLS_RCOND * hi.max(f64::MIN_POSITIVE)) {
            return Err(Error::SingularLeastSquares { lambda });
        }
        let chol = normal.cholesky().ok_or(Error::SingularLeastSquares { lambda })?;
        Ok(Self { regressors, lambda, chol })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn regressors(&self) -> &DMatrix<f64> {
        &self.regressors
    }

    /// `(Φ̃Φ̃ᵀ + λI)⁻¹ Φ̃`, the linear map from measurements to estimates.
    pub fn gain_matrix(&self) -> DMatrix<f64> {
        self.chol.solve(&self.regressors)
    }

    pub fn fit(&self, y: &MeasurementSet) -> Result<DVector<f64>> {
        if y.len() != self.regressors.ncols() {
            return Err(Error::dim("measurement length", self.regressors.ncols(), y.len()));
        }
        Ok(self.chol.solve(&(&self.regressors * &y.y)))
    }
}

/// `(Φ̃Φ̃ᵀ + λI)⁻¹ Φ̃ Ȳ`.
pub fn rls_fit(
    mode: RlsMode,
    lambda: f64,
    basis: &FourierBasis,
    stats: &StateStatistics,
    y: &MeasurementSet,
) -> Result<DVector<f64>> {
    RlsEstimator::new(rls_regressors(mode, basis, stats)?, lambda)?.fit(y)
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn lambda_grid(n: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if n == 0 || !(lo > 0.0) || !(hi >= lo) || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!("invalid lambda grid: {n} points on [{lo}, {hi}]")));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.log10(), hi.log10());
    Ok((0..n)
        .map(|k| {
            if k == n - 1 {
                hi
            } else {
                10f64.powf(a + (b - a) * k as f64 / (n - 1) as f64)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, n: usize, ridge: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        &a * a.transpose() + DMatrix::identity(n, n) * ridge
    }

    fn random_instance(rng: &mut ChaCha8Rng, nb: usize, t1: usize) -> (DesignStatistics, ParameterPrior, Vec<f64>) {
        let mut phi_bar = DMatrix::from_fn(nb, t1, |_, _| 4.0 * rng.random::<f64>() - 2.0);
        phi_bar.row_mut(0).fill(1.0);
        let l = DMatrix::from_fn(t1, 3, |_, _| rng.random::<f64>() - 0.5);
        let m = &l * l.transpose();
        let prior = ParameterPrior::new(
            DVector::from_fn(nb, |_, _| 5.0 + rng.random::<f64>()),
            random_spd(rng, nb, 0.5),
        )
        .unwrap();
        let noise = (0..t1).map(|_| 0.01 + 0.1 * rng.random::<f64>()).collect();
        (DesignStatistics { phi_bar, m }, prior, noise)
    }

    #[test]
    fn scalar_conjugate_case() {
        let design = DesignStatistics { phi_bar: DMatrix::from_element(1, 1, 1.0), m: DMatrix::zeros(1, 1) };
        let prior = ParameterPrior::isotropic(1, 0.0, 1.0).unwrap();
        let gain = bayes_gain(&design, &prior, &[1.0]).unwrap();
        assert!((gain.psi[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(gain.offset[0], 0.0);
        assert!((gain.j_star - 0.5).abs() < 1e-15);
        let y = MeasurementSet::new(DVector::from_element(1, 2.0)).unwrap();
        assert!((bayes_estimate(&gain, &y).unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn uninformative_data_returns_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (design, prior, _) = random_instance(&mut rng, 4, 6);
        let gain = bayes_gain(&design, &prior, &[1e12; 6]).unwrap();
        assert!(gain.psi.norm() < 1e-9);
        let tr = prior.sigma_theta.trace();
        assert!((gain.j_star - tr).abs() / tr < 1e-6);
        let y = MeasurementSet::new(DVector::from_element(6, 3.0)).unwrap();
        let post = posterior_update(&gain, &design, &prior, &y).unwrap();
        assert!((&post.sigma_pos - &prior.sigma_theta).norm() / prior.sigma_theta.norm() < 1e-9);
    }

    #[test]
    fn prior_predicted_output_returns_prior_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (design, prior, noise) = random_instance(&mut rng, 5, 9);
        let gain = bayes_gain(&design, &prior, &noise).unwrap();
        let y = MeasurementSet::new(design.phi_bar.transpose() * &prior.mu_theta).unwrap();
        assert!((bayes_estimate(&gain, &y).unwrap() - &prior.mu_theta).amax() < 1e-12);
        let post = posterior_update(&gain, &design, &prior, &y).unwrap();
        assert!((post.mu_pos - &prior.mu_theta).amax() < 1e-12);
    }

    #[test]
    fn information_form_and_trace_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (design, prior, noise) = random_instance(&mut rng, 6, 21);
            let gain = bayes_gain(&design, &prior, &noise).unwrap();
            let alt = j_star_information_form(&design, &prior, &noise).unwrap();
            assert!((gain.j_star - alt).abs() / alt < 1e-8);
            assert!((gain.sigma_pos.trace() - gain.j_star).abs() <= 1e-12);
            assert!(gain.j_star >= 0.0 && gain.j_star <= prior.sigma_theta.trace());
        }
    }

    #[test]
    fn posterior_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let (design, prior, noise) = random_instance(&mut rng, 5, 12);
            let gain = bayes_gain(&design, &prior, &noise).unwrap();
            assert!(min_eigenvalue(&(&prior.sigma_theta - &gain.sigma_pos)) >= -1e-10);
        }
    }

    #[test]
    fn error_is_monotone_in_prefix_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (design, prior, noise) = random_instance(&mut rng, 4, 15);
            let seq = error_sequence(&design, &prior, &noise).unwrap();
            for w in seq.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }

    #[test]
    fn nonpositive_noise_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (design, prior, mut noise) = random_instance(&mut rng, 3, 4);
        noise[2] = 0.0;
        assert!(matches!(
            bayes_gain(&design, &prior, &noise),
            Err(Error::NonPositiveVariance { index: 2, .. })
        ));
    }

    #[test]
    fn rls_shrinks_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let phi = DMatrix::from_fn(4, 10, |_, _| rng.random::<f64>());
        let y = MeasurementSet::new(DVector::from_fn(10, |_, _| rng.random::<f64>())).unwrap();
        let est = RlsEstimator::new(phi.clone(), 1e12).unwrap();
        let theta = est.fit(&y).unwrap();
        assert!(theta.norm() < 1e-9 * (&phi * &y.y).norm());
    }

    #[test]
    fn rls_singular_without_ridge() {
        let phi = DMatrix::from_element(3, 2, 1.0);
        assert!(matches!(RlsEstimator::new(phi, 0.0), Err(Error::SingularLeastSquares { .. })));
    }

    #[test]
    fn rls_recovers_exact_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let phi = DMatrix::from_fn(4, 30, |_, _| rng.random::<f64>() - 0.5);
        let theta = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let y = MeasurementSet::new(phi.transpose() * &theta).unwrap();
        let est = RlsEstimator::new(phi, 0.0).unwrap().fit(&y).unwrap();
        assert!((est - theta).amax() < 1e-10);
    }

    #[test]
    fn affine_mse_of_bayes_gain_is_j_star() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let (design, prior, noise) = random_instance(&mut rng, 5, 14);
            let gain = bayes_gain(&design, &prior, &noise).unwrap();
            let mse = affine_estimator_mse(&gain.psi, &gain.offset, &design, &prior, &noise).unwrap();
            assert!((mse - gain.j_star).abs() < 1e-9 * gain.j_star);
            let k = &gain.psi * 1.01;
            assert!(affine_estimator_mse(&k, &gain.offset, &design, &prior, &noise).unwrap() > gain.j_star);
        }
    }

    #[test]
    fn lambda_grid_endpoints() {
        let g = lambda_grid(30, 1e-6, 1e3).unwrap();
        assert_eq!(g.len(), 30);
        assert!((g[0] - 1e-6).abs() < 1e-20);
        assert_eq!(g[29], 1e3);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert!(lambda_grid(3, 0.0, 1.0).is_err());
    }
}
