//! Benchmark drivers. Every setting of a benchmark reuses the same master seed, so
//! `θ` and the standard noise draws are shared across methods, noise levels,
//! trajectory lengths and batch layouts.

use nalgebra::DVector;
use rayon::prelude::*;

use super::config::{batch_lengths, ExperimentConfig};
use super::output::{Comparison, DesignRecord, Difference, Record, Summary, SummaryRow};
use crate::active::{design_inputs, OptimizeOutcome, Termination};
use crate::error::{Error, Result};
use crate::estimators::{bayes_estimate, posterior_update, MeasurementSet, PosteriorBelief};
use crate::lifted::{InputTrajectory, LinearDynamics, NoiseModel};
use crate::model::WienerModel;
use crate::multitraj::{design_multi, information_matrix, multi_gain, Batch, MultiTrajectoryPlan};
use crate::sim::{
    mean, monte_carlo_benchmark, percentile, sample_prior_theta, simulate_with_noise, Method, MonteCarloRun,
    SimSeed, StandardNoise,
};

/// Everything a benchmark produces.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkOutput {
    pub records: Vec<Record>,
    pub differences: Vec<Difference>,
    pub summary: Summary,
}

impl BenchmarkOutput {
    pub fn failures(&self) -> Vec<&Record> {
        self.records.iter().filter(|r| r.error.is_some()).collect()
    }
}

fn termination_name(t: Termination) -> &'static str {
    match t {
        Termination::MaxIterations => "max_iterations",
        Termination::Stationary => "stationary",
        Termination::Stalled => "stalled",
        Termination::BacktrackingExhausted => "backtracking_exhausted",
    }
}

fn design_record(sigma_w_sq: f64, horizon: usize, tau: usize, out: &OptimizeOutcome, lambda_min: Option<f64>) -> DesignRecord {
    DesignRecord {
        sigma_w_sq,
        horizon,
        tau,
        j_initial: out.j_history[0],
        j_final: *out.j_history.last().expect("history starts non-empty"),
        iterations: out.iterations,
        termination: termination_name(out.termination).into(),
        lambda_min_info: lambda_min,
    }
}

fn method_lambda(m: &Method) -> Option<f64> {
    match m {
        Method::Dls { lambda } | Method::Mls { lambda } => Some(*lambda),
        _ => None,
    }
}

fn summarize(
    sigma_w_sq: f64,
    horizon: usize,
    tau: usize,
    method: &str,
    lambda: Option<f64>,
    errors: &[Option<f64>],
    analytic: Option<f64>,
) -> SummaryRow {
    let ok: Vec<f64> = errors.iter().flatten().copied().collect();
    let stat = |v: f64| if ok.is_empty() { None } else { Some(v) };
    SummaryRow {
        sigma_w_sq,
        horizon,
        tau,
        method: method.into(),
        lambda,
        n_ok: ok.len() as u64,
        n_failed: (errors.len() - ok.len()) as u64,
        mse: stat(mean(&ok)),
        p20: stat(percentile(&ok, 0.2)),
        p50: stat(percentile(&ok, 0.5)),
        p80: stat(percentile(&ok, 0.8)),
        analytic,
    }
}

/// Appends records and a summary row for method `k` of `run`.
fn collect_method(
    run: &MonteCarloRun,
    k: usize,
    sigma_w_sq: f64,
    horizon: usize,
    records: &mut Vec<Record>,
    rows: &mut Vec<SummaryRow>,
) {
    let method = &run.methods[k];
    let lambda = method_lambda(method);
    let mut errors = Vec::with_capacity(run.results.len());
    for r in &run.results {
        errors.push(r.squared_errors[k]);
        records.push(Record {
            sigma_w_sq,
            horizon,
            tau: 1,
            method: method.name().into(),
            lambda,
            replicate: r.replicate,
            squared_error: r.squared_errors[k],
            error: r.estimates[k].as_ref().err().cloned(),
        });
    }
    rows.push(summarize(sigma_w_sq, horizon, 1, method.name(), lambda, &errors, run.analytic[k]));
}

/// Index of the candidate with the smallest empirical MSE among those without failures.
fn tuned(run: &MonteCarloRun, candidates: &[usize]) -> Option<usize> {
    candidates
        .iter()
        .copied()
        .filter(|&k| run.results.iter().all(|r| r.squared_errors[k].is_some()))
        .map(|k| (k, run.mse(k)))
        .filter(|(_, m)| m.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
}

fn compare(run: &MonteCarloRun, a: usize, b: usize, sigma_w_sq: f64, horizon: usize, diffs: &mut Vec<Difference>) -> Comparison {
    let (name_a, name_b) = (run.methods[a].name(), run.methods[b].name());
    let mut values = Vec::with_capacity(run.results.len());
    for r in &run.results {
        if let (Some(ea), Some(eb)) = (r.squared_errors[a], r.squared_errors[b]) {
            values.push(ea - eb);
            diffs.push(Difference {
                sigma_w_sq,
                horizon,
                first: name_a.into(),
                second: name_b.into(),
                replicate: r.replicate,
                difference: ea - eb,
            });
        }
    }
    let wins = values.iter().filter(|d| **d < 0.0).count();
    let analytic = match (run.analytic[a], run.analytic[b]) {
        (Some(ja), Some(jb)) => Some(ja - jb),
        _ => None,
    };
    Comparison {
        sigma_w_sq,
        horizon,
        first: name_a.into(),
        second: name_b.into(),
        n: values.len() as u64,
        first_wins_fraction: if values.is_empty() { None } else { Some(wins as f64 / values.len() as f64) },
        mean_difference: if values.is_empty() { None } else { Some(mean(&values)) },
        analytic_mean_difference: analytic,
    }
}

fn run_setting(cfg: &ExperimentConfig, model: &WienerModel, input: &InputTrajectory, methods: &[Method]) -> Result<MonteCarloRun> {
    monte_carlo_benchmark(
        model,
        input,
        methods,
        &cfg.prior.spec(),
        cfg.run.n_reps,
        cfg.run.seed,
        cfg.replicate_structure(),
    )
}

fn new_summary(cfg: &ExperimentConfig) -> Summary {
    Summary {
        library_version: env!("CARGO_PKG_VERSION").into(),
        benchmark: cfg.run.benchmark,
        seed: cfg.run.seed,
        n_reps: cfg.run.n_reps,
        config_sha256: cfg.sha256(),
        config: cfg.clone(),
        rows: Vec::new(),
        comparisons: Vec::new(),
        designs: Vec::new(),
        failed_replicates: 0,
    }
}

fn finish(mut summary: Summary, records: Vec<Record>, differences: Vec<Difference>) -> BenchmarkOutput {
    let mut failed: Vec<u64> = records.iter().filter(|r| r.error.is_some()).map(|r| r.replicate).collect();
    failed.sort_unstable();
    failed.dedup();
    summary.failed_replicates = failed.len() as u64;
    BenchmarkOutput { records, differences, summary }
}

/// Runs the benchmark selected by `cfg.run.benchmark`.
pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<BenchmarkOutput> {
    cfg.validate()?;
    match cfg.run.benchmark {
        1 => benchmark_lambda_sweep(cfg),
        2 => benchmark_pairwise(cfg),
        3 => benchmark_horizon_sweep(cfg),
        4 => benchmark_batches(cfg),
        b => Err(Error::config("run.benchmark", format!("unknown benchmark {b}"))),
    }
}

/// DLS and MLS across the λ grid next to BMS, at the configured horizon.
pub fn benchmark_lambda_sweep(cfg: &ExperimentConfig) -> Result<BenchmarkOutput> {
    let lambdas = cfg.lambdas()?;
    let horizon = cfg.model.horizon;
    let input = cfg.nominal_input(horizon)?;
    let mut methods: Vec<Method> = lambdas.iter().map(|&lambda| Method::Dls { lambda }).collect();
    methods.extend(lambdas.iter().map(|&lambda| Method::Mls { lambda }));
    methods.push(Method::Bms);

    let mut summary = new_summary(cfg);
    let mut records = Vec::new();
    for &sw in &cfg.model.sigma_w_sq {
        let model = cfg.model_for(sw, horizon)?;
        let run = run_setting(cfg, &model, &input, &methods)?;
        for k in 0..methods.len() {
            collect_method(&run, k, sw, horizon, &mut records, &mut summary.rows);
        }
    }
    Ok(finish(summary, records, Vec::new()))
}

/// Designs the input for `model` from the nominal input.
fn designed_input(cfg: &ExperimentConfig, model: &WienerModel, horizon: usize) -> Result<(InputTrajectory, OptimizeOutcome)> {
    let out = design_inputs(model, &cfg.nominal_input(horizon)?, &cfg.optimize_options())?;
    Ok((out.u_star.clone(), out))
}

/// Tuned-λ MLS, BMS and BAL on common draws, with pairwise squared-error differences.
pub fn benchmark_pairwise(cfg: &ExperimentConfig) -> Result<BenchmarkOutput> {
    let lambdas = cfg.lambdas()?;
    let horizon = cfg.model.horizon;
    let input = cfg.nominal_input(horizon)?;
    let mut summary = new_summary(cfg);
    let mut records = Vec::new();
    let mut differences = Vec::new();
    for &sw in &cfg.model.sigma_w_sq {
        let model = cfg.model_for(sw, horizon)?;
        let (u_star, out) = designed_input(cfg, &model, horizon)?;
        summary.designs.push(design_record(sw, horizon, 1, &out, None));

        let mut methods: Vec<Method> = lambdas.iter().map(|&lambda| Method::Mls { lambda }).collect();
        methods.push(Method::Bms);
        methods.push(Method::Bal { input: u_star });
        let run = run_setting(cfg, &model, &input, &methods)?;
        let (bms, bal) = (lambdas.len(), lambdas.len() + 1);
        let candidates: Vec<usize> = (0..lambdas.len()).collect();
        let mls = tuned(&run, &candidates).ok_or_else(|| {
            Error::InvalidArgument(format!("no λ in the grid gives a failure-free MLS run at σ_w² = {sw}"))
        })?;
        for k in [mls, bms, bal] {
            collect_method(&run, k, sw, horizon, &mut records, &mut summary.rows);
        }
        for (a, b) in [(mls, bms), (mls, bal), (bms, bal)] {
            summary.comparisons.push(compare(&run, a, b, sw, horizon, &mut differences));
        }
    }
    Ok(finish(summary, records, differences))
}

/// Tuned DLS and MLS, BMS and BAL for every horizon in `run.horizons`.
pub fn benchmark_horizon_sweep(cfg: &ExperimentConfig) -> Result<BenchmarkOutput> {
    let lambdas = cfg.lambdas()?;
    let n_l = lambdas.len();
    let mut summary = new_summary(cfg);
    let mut records = Vec::new();
    for &sw in &cfg.model.sigma_w_sq {
        for &horizon in &cfg.run.horizons {
            let model = cfg.model_for(sw, horizon)?;
            let input = cfg.nominal_input(horizon)?;
            let (u_star, out) = designed_input(cfg, &model, horizon)?;
            summary.designs.push(design_record(sw, horizon, 1, &out, None));

            let mut methods: Vec<Method> = lambdas.iter().map(|&lambda| Method::Dls { lambda }).collect();
            methods.extend(lambdas.iter().map(|&lambda| Method::Mls { lambda }));
            methods.push(Method::Bms);
            methods.push(Method::Bal { input: u_star });
            let run = run_setting(cfg, &model, &input, &methods)?;
            let dls: Vec<usize> = (0..n_l).collect();
            let mls: Vec<usize> = (n_l..2 * n_l).collect();
            let mut chosen: Vec<usize> = [tuned(&run, &dls), tuned(&run, &mls)].into_iter().flatten().collect();
            chosen.extend([2 * n_l, 2 * n_l + 1]);
            for k in chosen {
                collect_method(&run, k, sw, horizon, &mut records, &mut summary.rows);
            }
        }
    }
    Ok(finish(summary, records, Vec::new()))
}

/// Splits the nominal trajectory of `cfg.model.horizon + 1` samples into `tau`
/// consecutive segments. Each batch starts at the nominal mean state of its
/// segment; only the first batch keeps its initial mean fixed during design.
pub fn segment_plan(cfg: &ExperimentConfig, sigma_w_sq: f64, tau: usize) -> Result<MultiTrajectoryPlan> {
    let total = cfg.model.horizon + 1;
    let lens = batch_lengths(total, tau)?;
    let n_x = cfg.state_dim();
    let full_model = cfg.model_for(sigma_w_sq, cfg.model.horizon)?;
    let full = cfg.nominal_input(cfg.model.horizon)?;
    let stats = full_model.state_stats(&full)?;
    let samples = cfg.input_samples(cfg.model.horizon)?;
    let sx0 = cfg.model.sigma_x0_sq.unwrap_or(sigma_w_sq);
    let (a, b) = (cfg.a_matrix()?, cfg.b_matrix()?);

    let mut start = 0;
    let mut batches = Vec::with_capacity(tau);
    for (i, &len) in lens.iter().enumerate() {
        let h = len - 1;
        let inputs: Vec<DVector<f64>> = samples[start..start + h]
            .iter()
            .map(|u| u.map(|v| v.clamp(cfg.input.lower, cfg.input.upper)))
            .collect();
        let input = InputTrajectory::from_parts(&stats.means[start], &inputs)
            .with_input_box(n_x, cfg.input.lower, cfg.input.upper)?
            .with_initial_mean_optimizable(n_x, i != 0);
        let dynamics = LinearDynamics::time_invariant(a.clone(), b.clone(), h)?;
        let noise = NoiseModel::isotropic(n_x, h, sx0, sigma_w_sq, cfg.model.sigma_v_sq)?;
        batches.push(Batch::new(dynamics, noise, input)?);
        start += len;
    }
    MultiTrajectoryPlan::new(batches)
}

struct PlanEvaluator {
    gain: crate::estimators::EstimatorGain,
    models: Vec<WienerModel>,
    plan: MultiTrajectoryPlan,
}

impl PlanEvaluator {
    fn new(cfg: &ExperimentConfig, plan: MultiTrajectoryPlan) -> Result<Self> {
        let basis = cfg.basis()?;
        let prior = cfg.prior.spec().implied_prior(basis.len())?;
        let gain = multi_gain(&plan, &basis, &prior)?;
        let models = plan
            .batches()
            .iter()
            .map(|b| WienerModel::new(b.dynamics.clone(), b.noise.clone(), basis.clone(), prior.clone()))
            .collect::<Result<_>>()?;
        Ok(Self { gain, models, plan })
    }

    fn estimate(&self, theta: &DVector<f64>, pieces: &[StandardNoise]) -> Result<DVector<f64>> {
        let mut y = Vec::with_capacity(self.plan.total_len());
        for ((model, batch), noise) in self.models.iter().zip(self.plan.batches()).zip(pieces) {
            let (_, ys) = simulate_with_noise(model, &batch.input, theta, noise)?;
            y.extend(ys.y.iter().copied());
        }
        bayes_estimate(&self.gain, &MeasurementSet::new(DVector::from_vec(y))?)
    }
}

/// BMS on the nominal segments and BAL on designed segments, per `τ`, with one
/// noise realization of `horizon + 1` samples split across the batches.
pub fn benchmark_batches(cfg: &ExperimentConfig) -> Result<BenchmarkOutput> {
    let basis = cfg.basis()?;
    let prior = cfg.prior.spec().implied_prior(basis.len())?;
    let spec = cfg.prior.spec();
    let total = cfg.model.horizon + 1;
    let n_x = cfg.state_dim();
    let structure = cfg.replicate_structure();
    let mut summary = new_summary(cfg);
    let mut records = Vec::new();
    for &sw in &cfg.model.sigma_w_sq {
        for &tau in &cfg.run.taus {
            let lens = batch_lengths(total, tau)?;
            let nominal = segment_plan(cfg, sw, tau)?;
            let (designed, out) = design_multi(&nominal, &basis, &prior, &cfg.optimize_options())?;
            let (_, lambda_min) = information_matrix(&designed, &basis, &prior)?;
            summary.designs.push(design_record(sw, cfg.model.horizon, tau, &out, Some(lambda_min)));

            let evaluators = [("BMS", PlanEvaluator::new(cfg, nominal)?), ("BAL", PlanEvaluator::new(cfg, designed)?)];
            let per_rep: Vec<[std::result::Result<f64, String>; 2]> = (0..cfg.run.n_reps)
                .into_par_iter()
                .map(|r| {
                    let (theta_idx, noise_idx) = structure.streams(r);
                    let theta = sample_prior_theta(&spec, basis.len(), SimSeed::new(cfg.run.seed, theta_idx))?;
                    let pieces = StandardNoise::draw(SimSeed::new(cfg.run.seed, noise_idx), n_x, total, total).split(&lens)?;
                    Ok(evaluators.each_ref().map(|(_, ev)| {
                        ev.estimate(&theta, &pieces)
                            .map_err(|e| e.to_string())
                            .and_then(|v| if v.iter().all(|x| x.is_finite()) { Ok(v) } else { Err("non-finite estimate".into()) })
                            .map(|v| (&theta - v).norm_squared())
                    }))
                })
                .collect::<Result<_>>()?;
            for (k, (name, ev)) in evaluators.iter().enumerate() {
                let errors: Vec<Option<f64>> = per_rep.iter().map(|e| e[k].as_ref().ok().copied()).collect();
                for (r, e) in per_rep.iter().enumerate() {
                    records.push(Record {
                        sigma_w_sq: sw,
                        horizon: cfg.model.horizon,
                        tau,
                        method: (*name).into(),
                        lambda: None,
                        replicate: r as u64,
                        squared_error: e[k].as_ref().ok().copied(),
                        error: e[k].as_ref().err().cloned(),
                    });
                }
                summary
                    .rows
                    .push(summarize(sw, cfg.model.horizon, tau, name, None, &errors, Some(ev.gain.j_star)));
            }
        }
    }
    Ok(finish(summary, records, Vec::new()))
}

/// One-shot Bayesian estimate from `run.measurements` under the nominal input and
/// the first configured process noise variance.
pub fn run_estimate(cfg: &ExperimentConfig) -> Result<PosteriorBelief> {
    cfg.validate()?;
    let y = cfg
        .run
        .measurements
        .as_ref()
        .ok_or_else(|| Error::config("run.measurements", "required by the estimate command"))?;
    if y.len() != cfg.model.horizon + 1 {
        return Err(Error::config(
            "run.measurements",
            format!("expected {} measurements for horizon {}, got {}", cfg.model.horizon + 1, cfg.model.horizon, y.len()),
        ));
    }
    let model = cfg.model_for(cfg.model.sigma_w_sq[0], cfg.model.horizon)?;
    let input = cfg.nominal_input(cfg.model.horizon)?;
    let design = model.design(&input)?;
    let gain = model.gain(&input)?;
    posterior_update(&gain, &design, &model.prior, &MeasurementSet::new(DVector::from_vec(y.clone()))?)
}

/// Input design at the configured horizon for the first configured process noise variance.
pub fn run_design(cfg: &ExperimentConfig) -> Result<OptimizeOutcome> {
    cfg.validate()?;
    let model = cfg.model_for(cfg.model.sigma_w_sq[0], cfg.model.horizon)?;
    Ok(designed_input(cfg, &model, cfg.model.horizon)?.1)
}
