//! Property-based invariants over random models, inputs and configurations.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use wiener_bayes::active::project_box;
use wiener_bayes::dbs::FourierBasis;
use wiener_bayes::estimators::{affine_estimator_mse, error_sequence, lambda_grid, ParameterPrior};
use wiener_bayes::experiment::output::{parse_summary_json, summary_json, Summary};
use wiener_bayes::experiment::{batch_lengths, ExperimentConfig};
use wiener_bayes::lifted::{InputTrajectory, LinearDynamics, NoiseModel};
use wiener_bayes::linalg::min_eigenvalue;
use wiener_bayes::sim::percentile;
use wiener_bayes::WienerModel;

#[derive(Debug, Clone)]
struct Instance {
    a: [f64; 4],
    b: [f64; 4],
    sx0: f64,
    sw: f64,
    sv: f64,
    prior_var: f64,
    inputs: Vec<f64>,
}

fn instance(max_horizon: usize) -> impl Strategy<Value = Instance> {
    (0..=max_horizon).prop_flat_map(|h| {
        (
            prop::array::uniform4(-0.1..0.1f64),
            prop::array::uniform4(-0.3..0.3f64),
            0.0..0.05f64,
            0.0..0.02f64,
            0.001..0.1f64,
            0.1..5.0f64,
            prop::collection::vec(-6.0..6.0f64, 2 + 2 * h),
        )
            .prop_map(|(a, b, sx0, sw, sv, prior_var, inputs)| Instance { a, b, sx0, sw, sv, prior_var, inputs })
    })
}

impl Instance {
    fn horizon(&self) -> usize {
        (self.inputs.len() - 2) / 2
    }

    fn build(&self) -> (WienerModel, InputTrajectory) {
        let h = self.horizon();
        let a = DMatrix::identity(2, 2) + DMatrix::from_row_slice(2, 2, &self.a);
        let b = DMatrix::from_row_slice(2, 2, &self.b);
        let dynamics = LinearDynamics::time_invariant(a, b, h).unwrap();
        let noise = NoiseModel::isotropic(2, h, self.sx0, self.sw, self.sv).unwrap();
        let basis = FourierBasis::planar_benchmark();
        let prior = ParameterPrior::isotropic(basis.len(), 5.0, self.prior_var).unwrap();
        let model = WienerModel::new(dynamics, noise, basis, prior).unwrap();
        (model, InputTrajectory::unconstrained(DVector::from_vec(self.inputs.clone())))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn error_is_bounded_and_monotone(inst in instance(15)) {
        let (model, u) = inst.build();
        let design = model.design(&u).unwrap();
        let seq = error_sequence(&design, &model.prior, model.noise.sigma_v_sq()).unwrap();
        let prior_trace = model.prior.sigma_theta.trace();
        for w in seq.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        prop_assert!(seq[0] <= prior_trace + 1e-12);
        prop_assert!(*seq.last().unwrap() >= 0.0);
    }

    #[test]
    fn design_and_posterior_are_psd(inst in instance(12)) {
        let (model, u) = inst.build();
        let design = model.design(&u).unwrap();
        let gain = model.gain(&u).unwrap();
        prop_assert_eq!(&design.m, &design.m.transpose());
        let scale = design.m.amax().max(1.0);
        prop_assert!(min_eigenvalue(&design.m) >= -1e-10 * scale);
        let sym = (&gain.sigma_pos - gain.sigma_pos.transpose()).amax();
        prop_assert!(sym <= 1e-10 * gain.sigma_pos.amax().max(1.0));
        prop_assert!(min_eigenvalue(&gain.sigma_pos) >= -1e-9 * model.prior.sigma_theta.amax());
    }

    #[test]
    fn basis_means_stay_within_amplitude(inst in instance(10)) {
        let (model, u) = inst.build();
        let design = model.design(&u).unwrap();
        for t in 0..design.phi_bar.ncols() {
            prop_assert_eq!(design.phi_bar[(0, t)], 1.0);
            for n in 1..design.phi_bar.nrows() {
                prop_assert!(design.phi_bar[(n, t)].abs() <= 2.0 + 1e-15);
            }
        }
    }

    #[test]
    fn bayes_gain_beats_perturbed_affine_estimators(
        inst in instance(8),
        dk in prop::collection::vec(-0.05..0.05f64, 11 * 17),
        dc in prop::collection::vec(-0.5..0.5f64, 11),
    ) {
        let (model, u) = inst.build();
        let design = model.design(&u).unwrap();
        let gain = model.gain(&u).unwrap();
        let t1 = design.phi_bar.ncols();
        let k = &gain.psi + DMatrix::from_fn(11, t1, |i, j| dk[i * 17 + j]);
        let c = &gain.offset + DVector::from_column_slice(&dc);
        let sv = model.noise.sigma_v_sq();
        let j_opt = affine_estimator_mse(&gain.psi, &gain.offset, &design, &model.prior, sv).unwrap();
        let j_other = affine_estimator_mse(&k, &c, &design, &model.prior, sv).unwrap();
        prop_assert!((j_opt - gain.j_star).abs() <= 1e-9 * gain.j_star.max(1.0));
        prop_assert!(j_other >= gain.j_star - 1e-9 * gain.j_star.max(1.0));
    }

    #[test]
    fn projection_is_idempotent_and_feasible(
        v in prop::collection::vec(-500.0..500.0f64, 1..40),
        lo in -300.0..0.0f64,
        width in 0.0..400.0f64,
    ) {
        let u = DVector::from_vec(v);
        let lower = DVector::from_element(u.len(), lo);
        let upper = DVector::from_element(u.len(), lo + width);
        let p = project_box(&u, &lower, &upper);
        prop_assert!(p.iter().all(|x| *x >= lo && *x <= lo + width));
        prop_assert_eq!(project_box(&p, &lower, &upper), p);
    }

    #[test]
    fn percentiles_are_ordered_members(values in prop::collection::vec(-1e6..1e6f64, 1..200)) {
        let p20 = percentile(&values, 0.2);
        let p50 = percentile(&values, 0.5);
        let p80 = percentile(&values, 0.8);
        prop_assert!(p20 <= p50 && p50 <= p80);
        prop_assert!(values.contains(&p20) && values.contains(&p80));
        prop_assert_eq!(percentile(&values, 1.0), values.iter().copied().fold(f64::MIN, f64::max));
    }

    #[test]
    fn batch_lengths_cover_the_samples(total in 1usize..400, tau in 1usize..60) {
        match batch_lengths(total, tau) {
            Ok(lens) => {
                prop_assert_eq!(lens.len(), tau);
                prop_assert_eq!(lens.iter().sum::<usize>(), total);
                prop_assert!(lens.iter().all(|&l| l >= 1));
                prop_assert!(lens[..tau - 1].iter().all(|&l| l == lens[0]));
            }
            Err(_) => prop_assert!(tau > total || total.div_ceil(tau) * (tau - 1) >= total),
        }
    }

    #[test]
    fn lambda_grid_is_log_spaced(n in 2usize..60, lo_exp in -8.0..0.0f64, span in 0.5..10.0f64) {
        let (lo, hi) = (10f64.powf(lo_exp), 10f64.powf(lo_exp + span));
        let g = lambda_grid(n, lo, hi).unwrap();
        prop_assert_eq!(g.len(), n);
        prop_assert!((g[0] - lo).abs() <= 1e-12 * lo && (g[n - 1] - hi).abs() <= 1e-12 * hi);
        let r = g[1] / g[0];
        for w in g.windows(2) {
            prop_assert!((w[1] / w[0] - r).abs() <= 1e-9 * r);
        }
    }

    #[test]
    fn config_and_summary_round_trip(seed in any::<u64>(), reps in 1u64..100_000, horizon in 0usize..200, sv in 1e-6..1.0f64) {
        let mut cfg = ExperimentConfig::default();
        cfg.run.seed = seed;
        cfg.run.n_reps = reps;
        cfg.model.horizon = horizon;
        cfg.model.sigma_v_sq = sv;
        let back = ExperimentConfig::from_json_str(&cfg.canonical_json()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.sha256(), cfg.sha256());
        let summary = Summary {
            library_version: "x".into(),
            benchmark: 1,
            seed,
            n_reps: reps,
            config_sha256: cfg.sha256(),
            config: cfg,
            rows: vec![],
            comparisons: vec![],
            designs: vec![],
            failed_replicates: 0,
        };
        prop_assert_eq!(parse_summary_json(&summary_json(&summary).unwrap()).unwrap(), summary);
    }
}
