//! Invariant checks on the configured model, run by the `validate` command.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::active::error_and_gradient;
use crate::error::Result;
use crate::estimators::{error_sequence, j_star_information_form};
use crate::multitraj::{information_matrix, Batch, MultiTrajectoryPlan};
use crate::sim::{sample_prior_theta, simulate_trajectory, SimSeed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name: name.into(), passed, detail }
}

/// Checks every configured process noise level at horizon `min(T, 12)`.
pub fn run_validation(cfg: &ExperimentConfig) -> Result<Vec<CheckResult>> {
    cfg.validate()?;
    let horizon = cfg.model.horizon.min(12);
    let mut out = Vec::new();
    for &sw in &cfg.model.sigma_w_sq {
        let tag = |name: &str| format!("{name} [sigma_w_sq={sw}]");
        let model = cfg.model_for(sw, horizon)?;
        let u = cfg.nominal_input(horizon)?;
        let design = model.design(&u)?;
        let gain = model.gain(&u)?;
        let sv = model.noise.sigma_v_sq();

        let seq = error_sequence(&design, &model.prior, sv)?;
        let worst = seq.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        out.push(check(&tag("error is non-increasing in t"), worst <= 1e-12, format!("max increase {worst:e}")));

        let asym = (&design.m - design.m.transpose()).amax();
        out.push(check(&tag("M is symmetric"), asym == 0.0, format!("max asymmetry {asym:e}")));

        let trace_gap = (gain.sigma_pos.trace() - gain.j_star).abs();
        out.push(check(&tag("trace of posterior covariance equals J*"), trace_gap <= 1e-12 * gain.j_star.max(1.0), format!("gap {trace_gap:e}")));

        let info = j_star_information_form(&design, &model.prior, sv)?;
        let rel = (info - gain.j_star).abs() / gain.j_star;
        out.push(check(&tag("information form agrees with direct form"), rel <= 1e-8, format!("relative gap {rel:e}")));

        let (_, grad) = error_and_gradient(&model, &u)?;
        let step = 1e-5;
        let mut fd = DVector::zeros(u.len());
        for i in (0..u.len()).filter(|&i| u.opt_mask[i]) {
            let mut plus = u.stacked.clone();
            let mut minus = u.stacked.clone();
            plus[i] += step;
            minus[i] -= step;
            fd[i] = (model.error(&u.with_stacked(plus))? - model.error(&u.with_stacked(minus))?) / (2.0 * step);
        }
        let grad_rel = (&grad - &fd).norm() / fd.norm().max(f64::MIN_POSITIVE);
        out.push(check(&tag("analytic gradient matches central differences"), grad_rel < 1e-6, format!("relative error {grad_rel:e}")));

        let seed = SimSeed::new(cfg.run.seed, 0);
        let theta = sample_prior_theta(&cfg.prior.spec(), model.basis.len(), seed)?;
        let (_, y1) = simulate_trajectory(&model, &u, &theta, seed)?;
        let (_, y2) = simulate_trajectory(&model, &u, &theta, seed)?;
        out.push(check(&tag("simulation is deterministic"), y1 == y2, "two runs with one seed".into()));

        let single = cfg.model_for(sw, 0)?;
        let b0 = cfg.nominal_input(0)?;
        let batch = Batch::new(single.dynamics.clone(), single.noise.clone(), b0)?;
        let plan = MultiTrajectoryPlan::new(vec![batch; model.basis.len()])?;
        let (_, lambda_min) = information_matrix(&plan, &model.basis, &model.prior)?;
        out.push(check(
            &tag("identical batches leave the information matrix singular"),
            lambda_min.abs() <= 1e-10,
            format!("smallest eigenvalue {lambda_min:e}"),
        ));
    }
    Ok(out)
}
