use mcml::asymptotics::{estimate_w_no_covariates, estimate_w_with, phi_bar};
use mcml::rng::{derive_stream, root_stream, Role};
use mcml::*;
use proptest::prelude::*;

const FD_STEP: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn models() -> Vec<Box<DynModel64>> {
    vec![
        Box::new(ToyBernoulli),
        Box::new(Autologistic::new(2, 2).unwrap()),
        Box::new(Autologistic::new(2, 3).unwrap()),
        Box::new(
            FiniteFamily64::new(
                "three",
                2,
                vec![vec![0.0], vec![1.0], vec![2.0]],
                vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 4.0]],
            )
            .unwrap(),
        ),
    ]
}

fn covariate_for(model: &DynModel64, x: f64) -> Vec<f64> {
    if model.label().starts_with("autologistic") {
        vec![x]
    } else {
        Vec::new()
    }
}

fn theta_for(model: &DynModel64, raw: &[f64]) -> Vec<f64> {
    raw[..model.param_dim()].to_vec()
}

fn random_dataset(model: &DynModel64, theta: &[f64], xs: &[f64], n: usize, seed: u64) -> Dataset64 {
    let mut rng = derive_stream(seed, 0, Role::Data, 0);
    let rows = (0..n)
        .map(|i| {
            let x = covariate_for(model, xs[i % xs.len()]);
            let y = sample_response(model, &x, theta, &mut rng).unwrap();
            Observation { y, x }
        })
        .collect();
    Dataset::new(rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 48,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn exact_norming_derivatives_match_differences(
        which in 0usize..4,
        raw in prop::collection::vec(-1.5f64..1.5, 2),
        x in 0.2f64..2.0,
    ) {
        let model = &models()[which];
        let theta = theta_for(model.as_ref(), &raw);
        let x = covariate_for(model.as_ref(), x);
        let c = exact_norming(model.as_ref(), &x, &theta).unwrap();
        for j in 0..theta.len() {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[j] += FD_STEP;
            dn[j] -= FD_STEP;
            let cu = exact_norming(model.as_ref(), &x, &up).unwrap();
            let cd = exact_norming(model.as_ref(), &x, &dn).unwrap();
            let fd = (cu.value() - cd.value()) / (2.0 * FD_STEP);
            prop_assert!((fd - c.grad()[j]).abs() <= 1e-6 * c.grad()[j].abs().max(1e-3), "grad {j}: {fd} vs {}", c.grad()[j]);
            for k in 0..theta.len() {
                let fd = (cu.grad()[k] - cd.grad()[k]) / (2.0 * FD_STEP);
                prop_assert!(rel_err(fd, c.hess()[(j, k)]) <= 1e-6);
            }
        }
    }

    #[test]
    fn support_probabilities_sum_to_one(
        which in 0usize..4,
        raw in prop::collection::vec(-3.0f64..3.0, 2),
        x in -1.0f64..2.0,
    ) {
        let model = &models()[which];
        let theta = theta_for(model.as_ref(), &raw);
        let x = covariate_for(model.as_ref(), x);
        let c = exact_norming(model.as_ref(), &x, &theta).unwrap();
        let mut y = Vec::new();
        let mut total = 0.0;
        for idx in 0..model.support_len().unwrap() {
            model.support_state(idx, &mut y);
            total += (log_unnorm_density(model.as_ref(), &y, &x, &theta).unwrap() - c.ln_value()).exp();
        }
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn oracles_are_pure(which in 0usize..4, raw in prop::collection::vec(-2.0f64..2.0, 2), x in 0.0f64..2.0) {
        let model = &models()[which];
        let theta = theta_for(model.as_ref(), &raw);
        let x = covariate_for(model.as_ref(), x);
        let mut y = Vec::new();
        model.support_state(model.support_len().unwrap() - 1, &mut y);
        let a = (suff_stat(model.as_ref(), &y, &x).unwrap(), log_unnorm_density(model.as_ref(), &y, &x, &theta).unwrap());
        let b = (suff_stat(model.as_ref(), &y, &x).unwrap(), log_unnorm_density(model.as_ref(), &y, &x, &theta).unwrap());
        prop_assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(a.1.to_bits(), b.1.to_bits());
        let c1 = exact_norming(model.as_ref(), &x, &theta).unwrap();
        let c2 = exact_norming(model.as_ref(), &x, &theta).unwrap();
        prop_assert_eq!(c1, c2);
    }

    #[test]
    fn toy_norming_is_one_plus_exp(theta in -10.0f64..10.0) {
        let c = exact_norming(&ToyBernoulli, &[], &[theta]).unwrap();
        prop_assert!((c.value() - (1.0 + theta.exp())).abs() <= 1e-12 * (1.0 + theta.exp()));
    }

    #[test]
    fn mc_norming_derivatives_match_differences(
        which in 0usize..4,
        raw in prop::collection::vec(-1.0f64..1.0, 2),
        x in 0.2f64..2.0,
        m in 5usize..400,
        seed in any::<u64>(),
    ) {
        let model = &models()[which];
        let theta = theta_for(model.as_ref(), &raw);
        let x = covariate_for(model.as_ref(), x);
        let s = draw_instrumental(&Instrumental::UniformOnSupport, model.as_ref(), m, &mut root_stream(seed)).unwrap();
        let c = mc_norming(&s, model.as_ref(), &x, &theta).unwrap();
        for j in 0..theta.len() {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[j] += FD_STEP;
            dn[j] -= FD_STEP;
            let cu = mc_norming(&s, model.as_ref(), &x, &up).unwrap();
            let cd = mc_norming(&s, model.as_ref(), &x, &dn).unwrap();
            prop_assert!(rel_err((cu.value() - cd.value()) / (2.0 * FD_STEP), c.grad()[j]) <= 1e-6);
            for k in 0..theta.len() {
                prop_assert!(rel_err((cu.grad()[k] - cd.grad()[k]) / (2.0 * FD_STEP), c.hess()[(j, k)]) <= 1e-6);
            }
        }
    }

    #[test]
    fn self_instrument_is_exact(which in 0usize..4, raw in prop::collection::vec(-1.0f64..1.0, 2), m in 1usize..200, seed in any::<u64>()) {
        let model = &models()[which];
        let psi = theta_for(model.as_ref(), &raw);
        let s = draw_instrumental(&Instrumental::model_at(psi.clone()), model.as_ref(), m, &mut root_stream(seed)).unwrap();
        let mc = mc_norming(&s, model.as_ref(), &[], &psi).unwrap();
        let ex = exact_norming(model.as_ref(), &[], &psi).unwrap();
        prop_assert!(((mc.value() - ex.value()) / ex.value()).abs() <= 1e-12);
    }

    #[test]
    fn mc_loglik_is_concave(
        which in 0usize..4,
        raw in prop::collection::vec(-2.0f64..2.0, 2),
        psi in prop::collection::vec(-1.0f64..1.0, 2),
        n in 1usize..30,
        m in 2usize..300,
        seed in any::<u64>(),
    ) {
        let model = &models()[which];
        let theta = theta_for(model.as_ref(), &raw);
        let psi = theta_for(model.as_ref(), &psi);
        let data = random_dataset(model.as_ref(), &psi, &[0.5, 1.0, 1.5], n, seed);
        let s = draw_instrumental(&Instrumental::model_at(psi), model.as_ref(), m, &mut root_stream(seed ^ 1)).unwrap();
        let e = mc_loglik(&data, &s, model.as_ref(), &theta).unwrap();
        let top = *e.hess.sym_eigen().values.last().unwrap();
        prop_assert!(top <= 1e-10, "largest Hessian eigenvalue {top}");
    }

    #[test]
    fn w_formulas_coincide_for_constant_covariate(
        which in 0usize..4,
        raw in prop::collection::vec(-1.0f64..1.0, 2),
        n in 1usize..20,
        m in 2usize..500,
        seed in any::<u64>(),
    ) {
        let model = &models()[which];
        let theta = theta_for(model.as_ref(), &raw);
        let data = random_dataset(model.as_ref(), &theta, &[1.0], n, seed);
        let data = Dataset::new(data.rows().iter().map(|r| Observation { y: r.y.clone(), x: Vec::new() }).collect()).unwrap();
        let s = draw_instrumental(&Instrumental::UniformOnSupport, model.as_ref(), m, &mut root_stream(seed ^ 7)).unwrap();
        for src in [NormingSource::Exact, NormingSource::MonteCarlo(&s)] {
            let a = estimate_w_with(&data, &s, model.as_ref(), &theta, src).unwrap();
            let b = estimate_w_no_covariates(&s, model.as_ref(), &theta, src).unwrap();
            prop_assert!((&a - &b).max_abs() <= 1e-10 * b.max_abs().max(1.0));
        }
    }

    #[test]
    fn sandwich_is_symmetric_psd(
        raw in prop::collection::vec(-1.0f64..1.0, 2),
        n in 5usize..60,
        m in 5usize..400,
        seed in any::<u64>(),
    ) {
        let model = Autologistic::new(2, 2).unwrap();
        let data = random_dataset(&model, &raw, &[0.5, 1.0], n, seed);
        let s = draw_instrumental(&Instrumental::UniformOnSupport, &model, m, &mut root_stream(seed ^ 3)).unwrap();
        let parts = SandwichParts::estimate(&data, &s, &model, &raw, NormingSource::MonteCarlo(&s)).unwrap();
        if let Ok(cov) = sandwich_cov(&parts) {
            prop_assert!(cov.asymmetry() == 0.0);
            prop_assert!(cov.sym_eigen().values[0] >= -1e-12 * cov.max_abs().max(1e-300));
        }
    }

    #[test]
    fn translation_consistency(
        ones in 1usize..39,
        psi_a in -2.0f64..2.0,
        psi_b in -2.0f64..2.0,
        m in 50usize..500,
        seed in any::<u64>(),
    ) {
        let data = Dataset::from_responses((0..40).map(|i| vec![if i < ones { 1.0 } else { 0.0 }]).collect()).unwrap();
        // Same stream for both: each draw reuses one uniform under a different ψ.
        let sa = draw_instrumental(&Instrumental::model_at(vec![psi_a]), &ToyBernoulli, m, &mut root_stream(seed)).unwrap();
        let sb = draw_instrumental(&Instrumental::model_at(vec![psi_b]), &ToyBernoulli, m, &mut root_stream(seed)).unwrap();
        let (ya, yb) = (sa.mean_response(), sb.mean_response());
        prop_assume!(ya > 0.0 && ya < 1.0 && yb > 0.0 && yb < 1.0);
        let opts = FitOptions::default();
        let ta = fit_mcml(&data, &sa, &ToyBernoulli, &opts).unwrap().theta_hat[0];
        let tb = fit_mcml(&data, &sb, &ToyBernoulli, &opts).unwrap().theta_hat[0];
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let want = (psi_a - logit(ya)) - (psi_b - logit(yb));
        prop_assert!((ta - tb - want).abs() <= 1e-8);
    }

    #[test]
    fn converged_fits_satisfy_reported_tolerance(
        which in 0usize..4,
        raw in prop::collection::vec(-0.8f64..0.8, 2),
        n in 20usize..200,
        seed in any::<u64>(),
    ) {
        let model = &models()[which];
        let theta = theta_for(model.as_ref(), &raw);
        let data = random_dataset(model.as_ref(), &theta, &[0.5, 1.0, 1.5], n, seed);
        let s = draw_instrumental(&Instrumental::UniformOnSupport, model.as_ref(), 500, &mut root_stream(seed ^ 9)).unwrap();
        let opts = FitOptions::default();
        if let Ok(fit) = fit_mcml(&data, &s, model.as_ref(), &opts) {
            let g = mc_loglik(&data, &s, model.as_ref(), &fit.theta_hat).unwrap().scaled(data.n()).score;
            let gn = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            prop_assert_eq!(gn, fit.final_grad_norm);
            prop_assert!(gn <= opts.grad_tol);
            prop_assert!(fit.iterations <= 50);
        }
    }
}

#[test]
fn mc_norming_is_unbiased() {
    // Toy, h uniform, θ = 1, m = 50: C_m is an average of 50 terms 2e^{y}.
    let want = 1.0 + 1f64.exp();
    let reps = 2000;
    let values: Vec<f64> = (0..reps)
        .map(|r| {
            let s = draw_instrumental(
                &Instrumental::UniformOnSupport,
                &ToyBernoulli,
                50,
                &mut derive_stream(5, r, Role::MonteCarlo, 0),
            )
            .unwrap();
            mc_norming(&s, &ToyBernoulli, &[], &[1.0]).unwrap().value()
        })
        .collect();
    let mean = values.iter().sum::<f64>() / reps as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    let se = (var / reps as f64).sqrt();
    assert!(
        (mean - want).abs() <= 3.0 * se,
        "mean {mean}, want {want}, se {se}"
    );
}

#[test]
fn mc_norming_sd_scales_as_inverse_root_m() {
    let sd = |m: usize| {
        let values: Vec<f64> = (0..400)
            .map(|r| {
                let s = draw_instrumental(
                    &Instrumental::UniformOnSupport,
                    &ToyBernoulli,
                    m,
                    &mut derive_stream(6, r, Role::MonteCarlo, m as u16),
                )
                .unwrap();
                mc_norming(&s, &ToyBernoulli, &[], &[0.7]).unwrap().value()
            })
            .collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
    };
    let sds = [sd(100), sd(1000), sd(10_000)];
    for w in sds.windows(2) {
        let ratio = w[0] / w[1];
        let target = 10f64.sqrt();
        assert!(
            ratio / target <= 1.3 && target / ratio <= 1.3,
            "sd ratio {ratio}"
        );
    }
}

#[test]
fn mc_loglik_error_shrinks_at_root_m() {
    let lattice = Autologistic::new(2, 2).unwrap();
    let cases: Vec<(&DynModel64, Vec<f64>)> =
        vec![(&ToyBernoulli, vec![0.8]), (&lattice, vec![0.4, 0.3])];
    for (model, theta) in cases {
        let data = random_dataset(model, &theta, &[1.0], 30, 12);
        let exact = exact_loglik(&data, model, &theta).unwrap().value;
        let median_err = |m: usize| {
            let mut errs: Vec<f64> = (0..200)
                .map(|r| {
                    let s = draw_instrumental(
                        &Instrumental::UniformOnSupport,
                        model,
                        m,
                        &mut derive_stream(13, r, Role::MonteCarlo, m as u16),
                    )
                    .unwrap();
                    (mc_loglik(&data, &s, model, &theta).unwrap().value - exact).abs()
                })
                .collect();
            errs.sort_by(f64::total_cmp);
            0.5 * (errs[99] + errs[100])
        };
        let meds = [median_err(100), median_err(1000), median_err(10_000)];
        for w in meds.windows(2) {
            let ratio = w[0] / w[1];
            assert!(
                ratio / 10f64.sqrt() <= 1.5 && 10f64.sqrt() / ratio <= 1.5,
                "{}: ratio {ratio}",
                model.label()
            );
        }
    }
}

#[test]
fn phi_bar_mean_vanishes_at_root_m() {
    let data = Dataset::from_responses(vec![vec![1.0], vec![0.0], vec![1.0]]).unwrap();
    let theta = [0.4];
    let mean_abs = |m: usize| {
        let mut total = 0.0;
        let reps = 200;
        for r in 0..reps {
            let s = draw_instrumental(
                &Instrumental::UniformOnSupport,
                &ToyBernoulli,
                m,
                &mut derive_stream(21, r, Role::MonteCarlo, m as u16),
            )
            .unwrap();
            let pts = phi_bar(&data, &s, &ToyBernoulli, &theta, NormingSource::Exact).unwrap();
            let mean: f64 = pts.iter().map(|(v, c)| v[0] * *c as f64).sum::<f64>() / m as f64;
            total += mean.abs();
        }
        total / reps as f64
    };
    let (a, b) = (mean_abs(100), mean_abs(10_000));
    let ratio = a / b;
    assert!(ratio > 10.0 / 1.5 && ratio < 10.0 * 1.5, "ratio {ratio}");
}

#[test]
fn w_plug_ins_agree_at_large_m() {
    let lattice = Autologistic::new(2, 2).unwrap();
    let cases: Vec<(&DynModel64, Vec<f64>, Instrumental64)> = vec![
        (&ToyBernoulli, vec![0.0], Instrumental::model_at(vec![0.0])),
        (&lattice, vec![0.3, 0.2], Instrumental::UniformOnSupport),
    ];
    for (model, theta, instr) in cases {
        let data = random_dataset(model, &theta, &[0.5, 1.0], 200, 31);
        let s = draw_instrumental(&instr, model, 100_000, &mut root_stream(32)).unwrap();
        let exact = estimate_w_with(&data, &s, model, &theta, NormingSource::Exact).unwrap();
        let mc = estimate_w(&data, &s, model, &theta).unwrap();
        let rel = (&exact - &mc).frobenius() / exact.frobenius();
        assert!(rel <= 0.05, "{}: relative difference {rel}", model.label());
    }
}

#[test]
fn cappe_log_weight_variance_grows_linearly() {
    let theta = [1.0];
    let per_obs = 0.25;
    for n in [1usize, 2, 4, 8] {
        let data = Dataset::from_responses(vec![vec![1.0]; n]).unwrap();
        let mut total = 0.0;
        let reps = 20;
        for r in 0..reps {
            let joint = JointSample::draw(
                &Instrumental::UniformOnSupport,
                &ToyBernoulli,
                n,
                5000,
                &mut derive_stream(41, r, Role::Joint, n as u16),
            )
            .unwrap();
            let lw = cappe_log_weights(&data, &joint, &ToyBernoulli, &theta).unwrap();
            let mean = lw.iter().sum::<f64>() / lw.len() as f64;
            total += lw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (lw.len() - 1) as f64;
        }
        let v = total / reps as f64;
        let want = n as f64 * per_obs;
        assert!((v - want).abs() <= 0.15 * want, "n = {n}: {v} vs {want}");
    }
}

#[test]
fn fits_work_in_single_precision() {
    let data = Dataset::<f32>::from_responses(
        (0..40)
            .map(|i| vec![if i % 4 == 0 { 0.0 } else { 1.0 }])
            .collect(),
    )
    .unwrap();
    let s = draw_instrumental(
        &Instrumental::<f32>::model_at(vec![0.0]),
        &ToyBernoulli,
        10_000,
        &mut root_stream(3),
    )
    .unwrap();
    let fit = fit_mcml(&data, &s, &ToyBernoulli, &FitOptions::default()).unwrap();
    let want = toy_closed_form(0.75f32, s.mean_response(), 0.0).unwrap();
    assert!((fit.theta_hat[0] - want).abs() < 1e-4);
    let inf = infer(fit, &data, &s, &ToyBernoulli).unwrap();
    assert!(inf.std_errors[0] > 0.0);
}
