//! Active input design: analytic gradient of `J*_B(Ū)` and projected gradient
//! descent with an adaptive, curvature-estimating stepsize.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dbs::{build_design, build_design_gradient, parameter_second_moment, scaled_expm1, FeatureCache, FourierBasis};
use crate::error::{Error, Result};
use crate::estimators::{bayes_gain, EstimatorGain};
use crate::lifted::{InputTrajectory, LinearDynamics, NoiseKind, StateStatistics};
use crate::model::WienerModel;

/// Stopping rules for [`optimize_inputs`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeOptions {
    pub max_iters: usize,
    /// Threshold on the norm of the projected gradient step over free coordinates.
    pub grad_tol: f64,
    /// Relative decrease of `J` over `stall_window` iterations below which the run stops.
    pub rel_decrease_tol: f64,
    pub stall_window: usize,
    /// Stepsize halvings allowed when a step goes uphill.
    pub max_halvings: usize,
    pub alpha0: f64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-8,
            rel_decrease_tol: 1e-10,
            stall_window: 10,
            max_halvings: 20,
            alpha0: 1e-10,
        }
    }
}

/// Iterate of the descent loop.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub u_current: InputTrajectory,
    pub alpha: f64,
    /// `α_k / α_{k-1}`, infinite before the first adaptive step.
    pub beta: f64,
    pub iter: usize,
    pub j_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    MaxIterations,
    Stationary,
    Stalled,
    BacktrackingExhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOutcome {
    pub u_star: InputTrajectory,
    /// Accepted objective values, starting with `J(Ū⁰)`.
    pub j_history: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
}

/// A differentiable scalar objective over a stacked input vector.
pub trait DesignObjective: Sync {
    fn value(&self, u: &DVector<f64>) -> Result<f64>;
    fn value_and_gradient(&self, u: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
}

/// Componentwise clamp onto `[lower, upper]`.
pub fn project_box(u: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(u.len(), |i, _| u[i].max(lower[i]).min(upper[i]))
}

/// Next stepsize and ratio `(α_k, β_k)` from the last accepted move.
///
/// `α_k = min(√(1 + β_{k-1}) α_{k-1}, ‖ΔŪ‖ / (2‖Δ∇‖))`; a zero gradient change
/// leaves only the growth branch, and with `β_{k-1} = ∞` only the curvature branch.
pub fn adaptive_step(
    prev: &OptimizerState,
    u_prev: &DVector<f64>,
    grad_now: &DVector<f64>,
    grad_prev: &DVector<f64>,
) -> (f64, f64) {
    let growth = if prev.beta.is_infinite() {
        f64::INFINITY
    } else {
        (1.0 + prev.beta).sqrt() * prev.alpha
    };
    let dg = (grad_now - grad_prev).norm();
    let curvature = if dg > 0.0 {
        (&prev.u_current.stacked - u_prev).norm() / (2.0 * dg)
    } else {
        f64::INFINITY
    };
    let mut alpha = growth.min(curvature);
    if !alpha.is_finite() || alpha <= 0.0 {
        alpha = prev.alpha;
    }
    (alpha, alpha / prev.alpha)
}

fn masked(g: DVector<f64>, mask: &[bool]) -> DVector<f64> {
    DVector::from_fn(g.len(), |i, _| if mask[i] { g[i] } else { 0.0 })
}

fn non_finite(iteration: usize, u: &DVector<f64>) -> Error {
    Error::NonFinite { iteration, iterate: u.iter().copied().collect() }
}

/// Projected gradient descent from `u0`, keeping only non-increasing steps.
pub fn optimize_inputs(
    objective: &dyn DesignObjective,
    u0: &InputTrajectory,
    opts: &OptimizeOptions,
) -> Result<OptimizeOutcome> {
    for i in 0..u0.len() {
        if u0.stacked[i] < u0.lower[i] || u0.stacked[i] > u0.upper[i] {
            return Err(Error::InvalidArgument(format!("initial input coordinate {i} lies outside its bounds")));
        }
    }
    let (lower, upper, mask) = (&u0.lower, &u0.upper, &u0.opt_mask);
    let (j0, g0) = objective.value_and_gradient(&u0.stacked)?;
    if !j0.is_finite() || g0.iter().any(|v| !v.is_finite()) {
        return Err(non_finite(0, &u0.stacked));
    }
    let mut grad = masked(g0, mask);
    let mut state = OptimizerState {
        u_current: u0.clone(),
        alpha: opts.alpha0,
        beta: f64::INFINITY,
        iter: 0,
        j_history: vec![j0],
    };
    let projected_step = |u: &DVector<f64>, g: &DVector<f64>| (project_box(&(u - g), lower, upper) - u).norm();
    let descend = |u: &DVector<f64>, g: &DVector<f64>, alpha: f64| {
        let raw = project_box(&(u - g * alpha), lower, upper);
        DVector::from_fn(raw.len(), |i, _| if mask[i] { raw[i] } else { u[i] })
    };

    // The α₀ step only probes the local curvature; it is kept if it does not go uphill.
    if opts.max_iters > 0 && projected_step(&u0.stacked, &grad) >= opts.grad_tol {
        let probe = descend(&u0.stacked, &grad, opts.alpha0);
        if probe != u0.stacked {
            let (jp, gp) = objective.value_and_gradient(&probe)?;
            if !jp.is_finite() || gp.iter().any(|v| !v.is_finite()) {
                return Err(non_finite(1, &probe));
            }
            let gp = masked(gp, mask);
            let probed = OptimizerState { u_current: u0.with_stacked(probe), ..state.clone() };
            let (alpha, beta) = adaptive_step(&probed, &u0.stacked, &gp, &grad);
            if jp <= j0 {
                state = probed;
                state.iter = 1;
                state.j_history.push(jp);
                grad = gp;
            }
            state.alpha = alpha;
            state.beta = beta;
        }
    }

    let termination = loop {
        if projected_step(&state.u_current.stacked, &grad) < opts.grad_tol {
            break Termination::Stationary;
        }
        if state.iter >= opts.max_iters {
            break Termination::MaxIterations;
        }
        let hist = &state.j_history;
        if hist.len() > opts.stall_window {
            let old = hist[hist.len() - 1 - opts.stall_window];
            let now = hist[hist.len() - 1];
            if (old - now) <= opts.rel_decrease_tol * old.abs() {
                break Termination::Stalled;
            }
        }

        let j_now = *state.j_history.last().expect("history starts non-empty");
        let u_now = state.u_current.stacked.clone();
        let mut alpha = state.alpha;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let candidate = descend(&u_now, &grad, alpha);
            if candidate == u_now {
                break;
            }
            let j_new = objective.value(&candidate)?;
            if !j_new.is_finite() {
                return Err(non_finite(state.iter + 1, &candidate));
            }
            if j_new <= j_now {
                accepted = Some((candidate, j_new));
                break;
            }
            alpha *= 0.5;
        }
        let Some((u_new, _)) = accepted else {
            break Termination::BacktrackingExhausted;
        };
        let (j_new, g_new) = objective.value_and_gradient(&u_new)?;
        if !j_new.is_finite() || g_new.iter().any(|v| !v.is_finite()) {
            return Err(non_finite(state.iter + 1, &u_new));
        }
        let g_new = masked(g_new, mask);

        state.alpha = alpha;
        state.u_current = state.u_current.with_stacked(u_new);
        state.iter += 1;
        state.j_history.push(j_new);
        let (next_alpha, next_beta) = adaptive_step(&state, &u_now, &g_new, &grad);
        state.alpha = next_alpha;
        state.beta = next_beta;
        grad = g_new;
    };

    Ok(OptimizeOutcome {
        iterations: state.iter,
        u_star: state.u_current,
        j_history: state.j_history,
        termination,
    })
}

/// `W = ΨᵀΨ` and `K = Ψᵀ(ΨΦ̄ᵀ − I)Σ_θ`, the adjoint weights of `∂M` and `∂Φ̄`.
pub(crate) fn adjoint_weights(
    gain: &EstimatorGain,
    phi_bar: &DMatrix<f64>,
    sigma_theta: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let psi = &gain.psi;
    let w = psi.transpose() * psi;
    let n = psi.nrows();
    let k = psi.transpose() * ((psi * phi_bar.transpose() - DMatrix::<f64>::identity(n, n)) * sigma_theta);
    (w, k)
}

/// Gradient of `tr(W M) + 2 tr(K Φ̄)` with respect to one trajectory's stacked input,
/// with `W` and `K` held fixed. Phase sensitivities are pulled back through the
/// dynamics by a single backward pass.
pub(crate) fn adjoint_pullback(
    basis: &FourierBasis,
    dynamics: &LinearDynamics,
    stats: &StateStatistics,
    s: &DMatrix<f64>,
    w: &DMatrix<f64>,
    k: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let cache = FeatureCache::new(basis, stats)?;
    let t1 = stats.horizon() + 1;
    let nb = basis.len();
    let f = basis.matrix();

    // H[(n, t)] = ∂/∂(f_nᵀ x̄_t)
    let partial: Vec<DMatrix<f64>> = (0..t1)
        .into_par_iter()
        .map(|t| {
            let mut h = DMatrix::zeros(nb, t1);
            for t2 in t..t1 {
                let weight = if t == t2 { w[(t, t)] } else { 2.0 * w[(t, t2)] };
                if weight == 0.0 {
                    continue;
                }
                let c = f * stats.cross(t, t2) * f.transpose();
                for m in 1..nb {
                    let (cm, sm, lm) = (cache.cos[(m, t)], cache.sin[(m, t)], cache.log_env[(m, t)]);
                    for n in 1..nb {
                        let (cn, sn, ln) = (cache.cos[(n, t2)], cache.sin[(n, t2)], cache.log_env[(n, t2)]);
                        let sin_sum = sm * cn + cm * sn;
                        let sin_diff = sm * cn - cm * sn;
                        let le = lm + ln;
                        let plus = sin_sum * scaled_expm1(le, -c[(m, n)]);
                        let minus = sin_diff * scaled_expm1(le, c[(m, n)]);
                        let scale = -2.0 * weight * s[(m, n)];
                        h[(m, t)] += scale * (plus + minus);
                        h[(n, t2)] += scale * (plus - minus);
                    }
                }
            }
            h
        })
        .collect();
    let mut h = DMatrix::zeros(nb, t1);
    for part in partial {
        h += part;
    }
    for t in 0..t1 {
        for n in 1..nb {
            h[(n, t)] -= 4.0 * k[(t, n)] * cache.sin[(n, t)] * cache.log_env[(n, t)].exp();
        }
    }

    let horizon = dynamics.horizon();
    let n_x = dynamics.state_dim();
    let n_u = dynamics.input_dim();
    let ft = f.transpose();
    let mut grad = DVector::zeros(dynamics.stacked_len());
    let mut lambda = &ft * h.column(horizon);
    for t in (0..horizon).rev() {
        // λ currently holds λ_{t+1}
        let gu = dynamics.b(t).transpose() * &lambda;
        grad.rows_mut(n_x + t * n_u, n_u).copy_from(&gu);
        lambda = &ft * h.column(t) + dynamics.a(t).transpose() * &lambda;
    }
    grad.rows_mut(0, n_x).copy_from(&lambda);
    Ok(grad)
}

fn check_gaussian(model: &WienerModel) -> Result<()> {
    if let NoiseKind::GenericCharacteristic(_) = model.noise.kind() {
        return Err(Error::InvalidArgument(
            "analytic input gradients are available for Gaussian noise only".into(),
        ));
    }
    Ok(())
}

/// `J*_B(Ū)` and its gradient via the adjoint pass; masked coordinates are zero.
pub fn error_and_gradient(model: &WienerModel, u: &InputTrajectory) -> Result<(f64, DVector<f64>)> {
    check_gaussian(model)?;
    let stats = model.state_stats(u)?;
    let design = build_design(&model.basis, &stats, &model.prior)?;
    let gain = bayes_gain(&design, &model.prior, model.noise.sigma_v_sq())?;
    let (w, k) = adjoint_weights(&gain, &design.phi_bar, &model.prior.sigma_theta);
    let s = parameter_second_moment(&model.prior);
    let g = adjoint_pullback(&model.basis, &model.dynamics, &stats, &s, &w, &k)?;
    Ok((gain.j_star, masked(g, &u.opt_mask)))
}

/// `∂J*_B/∂Ū_i = tr(ΨᵀΨ ∂M) + 2 tr(Ψᵀ(ΨΦ̄ᵀ − I)Σ_θ ∂Φ̄)`, one design gradient per
/// coordinate. Masked coordinates are zero.
pub fn error_gradient(model: &WienerModel, u: &InputTrajectory) -> Result<DVector<f64>> {
    check_gaussian(model)?;
    let stats = model.state_stats(u)?.with_sensitivities(&model.dynamics)?;
    let design = build_design(&model.basis, &stats, &model.prior)?;
    let gain = bayes_gain(&design, &model.prior, model.noise.sigma_v_sq())?;
    let (w, k) = adjoint_weights(&gain, &design.phi_bar, &model.prior.sigma_theta);
    let entries: Vec<f64> = (0..u.len())
        .into_par_iter()
        .map(|i| {
            if !u.opt_mask[i] {
                return Ok(0.0);
            }
            let d = build_design_gradient(&model.basis, &stats, &model.prior, i)?;
            Ok(w.component_mul(&d.d_m).sum() + 2.0 * (&k * &d.d_phi_bar).trace())
        })
        .collect::<Result<_>>()?;
    Ok(DVector::from_vec(entries))
}

/// `J*_B` of a single trajectory as a function of its stacked input.
pub struct SingleTrajectoryObjective<'a> {
    pub model: &'a WienerModel,
    pub template: &'a InputTrajectory,
}

impl DesignObjective for SingleTrajectoryObjective<'_> {
    fn value(&self, u: &DVector<f64>) -> Result<f64> {
        self.model.error(&self.template.with_stacked(u.clone()))
    }

    fn value_and_gradient(&self, u: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        error_and_gradient(self.model, &self.template.with_stacked(u.clone()))
    }
}

/// Minimizes `J*_B` over the free coordinates of `u0`.
pub fn design_inputs(model: &WienerModel, u0: &InputTrajectory, opts: &OptimizeOptions) -> Result<OptimizeOutcome> {
    optimize_inputs(&SingleTrajectoryObjective { model, template: u0 }, u0, opts)
}
