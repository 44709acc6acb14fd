//! Estimation from several statistically independent trajectories.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::active::{adjoint_pullback, adjoint_weights, optimize_inputs, DesignObjective, OptimizeOptions, OptimizeOutcome};
use crate::dbs::{build_design, fourier_cross_cov, fourier_mean, parameter_second_moment, DesignStatistics, FourierBasis};
use crate::error::{Error, Result};
use crate::estimators::{bayes_gain, error_sequence, EstimatorGain, ParameterPrior};
use crate::lifted::{propagate_state_stats, InputTrajectory, LinearDynamics, NoiseKind, NoiseModel};
use crate::linalg::{min_eigenvalue, symmetrize};
use crate::model::WienerModel;

/// One independent trajectory.
#[derive(Debug, Clone)]
pub struct Batch {
    pub dynamics: LinearDynamics,
    pub noise: NoiseModel,
    pub input: InputTrajectory,
}

impl Batch {
    pub fn new(dynamics: LinearDynamics, noise: NoiseModel, input: InputTrajectory) -> Result<Self> {
        if noise.horizon() != dynamics.horizon() || noise.state_dim() != dynamics.state_dim() {
            return Err(Error::dim(
                "batch noise model (horizon, state dim)",
                format!("({}, {})", dynamics.horizon(), dynamics.state_dim()),
                format!("({}, {})", noise.horizon(), noise.state_dim()),
            ));
        }
        if input.len() != dynamics.stacked_len() {
            return Err(Error::dim("batch stacked input length", dynamics.stacked_len(), input.len()));
        }
        if let NoiseKind::GenericCharacteristic(_) = noise.kind() {
            return Err(Error::InvalidArgument("multi-trajectory design supports Gaussian noise only".into()));
        }
        Ok(Self { dynamics, noise, input })
    }

    pub fn horizon(&self) -> usize {
        self.dynamics.horizon()
    }
}

/// `τ` independent trajectories sharing one basis and prior.
#[derive(Debug, Clone)]
pub struct MultiTrajectoryPlan {
    batches: Vec<Batch>,
}

impl MultiTrajectoryPlan {
    pub fn new(batches: Vec<Batch>) -> Result<Self> {
        let Some(first) = batches.first() else {
            return Err(Error::InvalidArgument("a plan needs at least one batch".into()));
        };
        let n_x = first.dynamics.state_dim();
        for (i, b) in batches.iter().enumerate() {
            if b.dynamics.state_dim() != n_x {
                return Err(Error::dim(format!("state dimension of batch {i}"), n_x, b.dynamics.state_dim()));
            }
        }
        Ok(Self { batches })
    }

    pub fn batches(&self) -> &[Batch] {
        &self.batches
    }

    pub fn count(&self) -> usize {
        self.batches.len()
    }

    /// `T^τ = Σ (T_i + 1)`.
    pub fn total_len(&self) -> usize {
        self.batches.iter().map(|b| b.horizon() + 1).sum()
    }

    pub fn stacked_len(&self) -> usize {
        self.batches.iter().map(|b| b.input.len()).sum()
    }

    /// All batch inputs concatenated, with bounds and masks.
    pub fn stacked_input(&self) -> InputTrajectory {
        let cat = |f: &dyn Fn(&InputTrajectory) -> &DVector<f64>| {
            DVector::from_iterator(self.stacked_len(), self.batches.iter().flat_map(|b| f(&b.input).iter().copied()))
        };
        InputTrajectory {
            stacked: cat(&|u| &u.stacked),
            lower: cat(&|u| &u.lower),
            upper: cat(&|u| &u.upper),
            opt_mask: self.batches.iter().flat_map(|b| b.input.opt_mask.iter().copied()).collect(),
        }
    }

    /// The plan with batch inputs replaced by consecutive segments of `stacked`.
    pub fn with_stacked(&self, stacked: &DVector<f64>) -> Result<Self> {
        if stacked.len() != self.stacked_len() {
            return Err(Error::dim("stacked plan input", self.stacked_len(), stacked.len()));
        }
        let mut offset = 0;
        let batches = self
            .batches
            .iter()
            .map(|b| {
                let n = b.input.len();
                let seg = stacked.rows(offset, n).into_owned();
                offset += n;
                Batch { input: b.input.with_stacked(seg), ..b.clone() }
            })
            .collect();
        Ok(Self { batches })
    }

    pub fn sigma_v_sq(&self) -> Vec<f64> {
        self.batches.iter().flat_map(|b| b.noise.sigma_v_sq().iter().copied()).collect()
    }
}

/// Per-batch design statistics, in batch order.
pub fn batch_designs(plan: &MultiTrajectoryPlan, basis: &FourierBasis, prior: &ParameterPrior) -> Result<Vec<DesignStatistics>> {
    plan.batches
        .par_iter()
        .map(|b| build_design(basis, &propagate_state_stats(&b.dynamics, &b.noise, &b.input)?, prior))
        .collect()
}

/// Concatenates `Φ̄_i` and places `M_i` on the block diagonal.
pub fn stack_designs(designs: &[DesignStatistics]) -> DesignStatistics {
    let nb = designs[0].phi_bar.nrows();
    let total: usize = designs.iter().map(|d| d.phi_bar.ncols()).sum();
    let mut phi_bar = DMatrix::zeros(nb, total);
    let mut m = DMatrix::zeros(total, total);
    let mut offset = 0;
    for d in designs {
        let len = d.phi_bar.ncols();
        phi_bar.columns_mut(offset, len).copy_from(&d.phi_bar);
        m.view_mut((offset, offset), (len, len)).copy_from(&d.m);
        offset += len;
    }
    DesignStatistics { phi_bar, m }
}

/// Stacked design for all batches.
pub fn assemble_multi(plan: &MultiTrajectoryPlan, basis: &FourierBasis, prior: &ParameterPrior) -> Result<DesignStatistics> {
    Ok(stack_designs(&batch_designs(plan, basis, prior)?))
}

/// Estimator over the stacked measurements of every batch.
pub fn multi_gain(plan: &MultiTrajectoryPlan, basis: &FourierBasis, prior: &ParameterPrior) -> Result<EstimatorGain> {
    bayes_gain(&assemble_multi(plan, basis, prior)?, prior, &plan.sigma_v_sq())
}

/// `Σ_i μ_φ⁰(i) μ_φ⁰(i)ᵀ / (M₀₀(i) + σ²_{v,0}(i))` and its smallest eigenvalue.
pub fn information_matrix(
    plan: &MultiTrajectoryPlan,
    basis: &FourierBasis,
    prior: &ParameterPrior,
) -> Result<(DMatrix<f64>, f64)> {
    if prior.len() != basis.len() {
        return Err(Error::dim("prior dimension vs basis count", basis.len(), prior.len()));
    }
    let s = parameter_second_moment(prior);
    let nb = basis.len();
    let mut info = DMatrix::zeros(nb, nb);
    for b in &plan.batches {
        let stats = propagate_state_stats(&b.dynamics.with_horizon(0)?, &b.noise.truncated(0)?, &b.input.with_stacked(
            b.input.stacked.rows(0, b.dynamics.state_dim()).into_owned(),
        ))?;
        let mu = fourier_mean(basis, &stats, 0)?;
        let mut m00 = 0.0;
        for m in 1..nb {
            for n in 1..nb {
                m00 += s[(m, n)] * fourier_cross_cov(basis, &stats, 0, 0, m, n)?;
            }
        }
        info += &mu * mu.transpose() / (m00 + b.noise.sigma_v_sq()[0]);
    }
    let info = symmetrize(&info);
    let lambda_min = min_eigenvalue(&info);
    Ok((info, lambda_min))
}

/// `J*(t)` of a single trajectory at each of the requested horizons.
pub fn inconsistency_probe(model: &WienerModel, u: &InputTrajectory, horizons: &[usize]) -> Result<Vec<f64>> {
    let longest = horizons.iter().copied().max().unwrap_or(0);
    if longest > model.horizon() {
        return Err(Error::IndexOutOfRange { index: longest, len: model.horizon() + 1 });
    }
    let design = model.design(u)?.truncated(longest);
    let seq = error_sequence(&design, &model.prior, &model.noise.sigma_v_sq()[..=longest])?;
    Ok(horizons.iter().map(|&h| seq[h]).collect())
}

/// `J*_B` of a plan as a function of all batch inputs stacked together.
pub struct MultiTrajectoryObjective<'a> {
    pub plan: &'a MultiTrajectoryPlan,
    pub basis: &'a FourierBasis,
    pub prior: &'a ParameterPrior,
}

impl DesignObjective for MultiTrajectoryObjective<'_> {
    fn value(&self, u: &DVector<f64>) -> Result<f64> {
        Ok(multi_gain(&self.plan.with_stacked(u)?, self.basis, self.prior)?.j_star)
    }

    fn value_and_gradient(&self, u: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let plan = self.plan.with_stacked(u)?;
        let stats: Vec<_> = plan
            .batches
            .par_iter()
            .map(|b| propagate_state_stats(&b.dynamics, &b.noise, &b.input))
            .collect::<Result<_>>()?;
        let designs: Vec<_> = stats
            .par_iter()
            .map(|st| build_design(self.basis, st, self.prior))
            .collect::<Result<_>>()?;
        let stacked = stack_designs(&designs);
        let gain = bayes_gain(&stacked, self.prior, &plan.sigma_v_sq())?;
        let (w, k) = adjoint_weights(&gain, &stacked.phi_bar, &self.prior.sigma_theta);
        let s = parameter_second_moment(self.prior);

        let mut offsets = Vec::with_capacity(plan.count());
        let mut col = 0;
        for b in &plan.batches {
            offsets.push(col);
            col += b.horizon() + 1;
        }
        let parts: Vec<DVector<f64>> = plan
            .batches
            .par_iter()
            .zip(stats.par_iter())
            .zip(offsets.par_iter())
            .map(|((b, st), &off)| {
                let len = b.horizon() + 1;
                let w_i = w.view((off, off), (len, len)).into_owned();
                let k_i = k.rows(off, len).into_owned();
                adjoint_pullback(self.basis, &b.dynamics, st, &s, &w_i, &k_i)
            })
            .collect::<Result<_>>()?;
        let grad = DVector::from_iterator(plan.stacked_len(), parts.iter().flat_map(|p| p.iter().copied()));
        let mask = &self.plan.stacked_input().opt_mask;
        let grad = DVector::from_fn(grad.len(), |i, _| if mask[i] { grad[i] } else { 0.0 });
        Ok((gain.j_star, grad))
    }
}

/// Jointly optimizes every batch input of `plan`.
pub fn design_multi(
    plan: &MultiTrajectoryPlan,
    basis: &FourierBasis,
    prior: &ParameterPrior,
    opts: &OptimizeOptions,
) -> Result<(MultiTrajectoryPlan, OptimizeOutcome)> {
    let objective = MultiTrajectoryObjective { plan, basis, prior };
    let outcome = optimize_inputs(&objective, &plan.stacked_input(), opts)?;
    Ok((plan.with_stacked(&outcome.u_star.stacked)?, outcome))
}
