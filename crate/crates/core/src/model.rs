use crate::dbs::{build_design, build_design_generic, DesignStatistics, FourierBasis};
use crate::error::{Error, Result};
use crate::estimators::{bayes_gain, EstimatorGain, ParameterPrior};
use crate::lifted::{propagate_state_stats, InputTrajectory, LinearDynamics, NoiseKind, NoiseModel, StateStatistics};

/// A complete estimation problem: dynamics, noise, output basis and parameter prior.
#[derive(Debug, Clone)]
pub struct WienerModel {
    pub dynamics: LinearDynamics,
    pub noise: NoiseModel,
    pub basis: FourierBasis,
    pub prior: ParameterPrior,
}

impl WienerModel {
    pub fn new(dynamics: LinearDynamics, noise: NoiseModel, basis: FourierBasis, prior: ParameterPrior) -> Result<Self> {
        if noise.horizon() != dynamics.horizon() {
            return Err(Error::dim("noise model horizon", dynamics.horizon(), noise.horizon()));
        }
        if noise.state_dim() != dynamics.state_dim() {
            return Err(Error::dim("noise model state dimension", dynamics.state_dim(), noise.state_dim()));
        }
        if basis.state_dim() != dynamics.state_dim() {
            return Err(Error::dim("frequency dimension vs state dimension", dynamics.state_dim(), basis.state_dim()));
        }
        if prior.len() != basis.len() {
            return Err(Error::dim("prior dimension vs basis count", basis.len(), prior.len()));
        }
        Ok(Self { dynamics, noise, basis, prior })
    }

    pub fn horizon(&self) -> usize {
        self.dynamics.horizon()
    }

    /// The same model restricted to horizon `h ≤ T`.
    pub fn truncated(&self, h: usize) -> Result<Self> {
        if h > self.horizon() {
            return Err(Error::IndexOutOfRange { index: h, len: self.horizon() + 1 });
        }
        Ok(Self {
            dynamics: self.dynamics.with_horizon(h)?,
            noise: self.noise.truncated(h)?,
            basis: self.basis.clone(),
            prior: self.prior.clone(),
        })
    }

    pub fn state_stats(&self, u: &InputTrajectory) -> Result<StateStatistics> {
        propagate_state_stats(&self.dynamics, &self.noise, u)
    }

    pub fn design(&self, u: &InputTrajectory) -> Result<DesignStatistics> {
        match self.noise.kind() {
            NoiseKind::Gaussian => build_design(&self.basis, &self.state_stats(u)?, &self.prior),
            NoiseKind::GenericCharacteristic(rho) => {
                build_design_generic(&self.basis, &self.dynamics, &self.noise, u, &self.prior, rho.as_ref())
            }
        }
    }

    pub fn gain(&self, u: &InputTrajectory) -> Result<EstimatorGain> {
        bayes_gain(&self.design(u)?, &self.prior, self.noise.sigma_v_sq())
    }

    /// `J*_B(Ū)`.
    pub fn error(&self, u: &InputTrajectory) -> Result<f64> {
        Ok(self.gain(u)?.j_star)
    }
}
