//! Cocycle runs and the end-to-end pipeline.

use super::{
    build_symbol, low_freq_from, psi_dump, quadratic_form_report, quenched_from,
    run_annealed_mixing, run_egorov_scaling, run_garding, run_lasota_yorke, run_symbol_checks, run_two_point,
    spectral_neg_delta_report, spectral_pass, EnsembleConfig, ExperimentError, Report,
};
use crate::cocycle_stats::{
    lambda_curve, moment_lyapunov_direct_for, psi_power_iteration, top_lyapunov_for, LambdaCurve, LyapunovEstimate,
    MomentEstimate, PsiDiagnostics, PsiGrid,
};

/// Run `f` on a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
        .install(f)
}

pub fn lyapunov_report(est: &LyapunovEstimate, name: &str) -> Report {
    let mut r = Report::new(name);
    r.num("lambda1", est.value)
        .num("stderr", est.stderr)
        .int("n_steps", est.n_steps)
        .int("n_samples", est.n_samples)
        .flag("positive_99", est.value - 2.576 * est.stderr > 0.0);
    if !est.is_reportable() {
        r.warn("horizon below 100 steps");
    }
    r
}

pub fn run_lyapunov(cfg: &EnsembleConfig) -> Result<LyapunovEstimate, ExperimentError> {
    cfg.validate()?;
    Ok(top_lyapunov_for(&cfg.map_ensemble(), cfg.lyap_steps, cfg.lyap_samples, cfg.seed))
}

pub fn run_moment_lyapunov(cfg: &EnsembleConfig) -> Result<Vec<MomentEstimate>, ExperimentError> {
    cfg.validate()?;
    let ens = cfg.map_ensemble();
    cfg.p_list
        .iter()
        .map(|&p| Ok(moment_lyapunov_direct_for(&ens, p, cfg.moment_steps, cfg.moment_samples, cfg.seed)?))
        .collect()
}

pub fn moment_report(rows: &[MomentEstimate], name: &str) -> Report {
    let mut r = Report::new(name);
    for m in rows {
        r.num(&format!("lambda_p{}", m.p), m.lambda)
            .num(&format!("stderr_p{}", m.p), m.stderr)
            .num(&format!("ess_fraction_p{}", m.p), m.ess_fraction);
        if let Some(w) = &m.warning {
            r.warn(w);
        }
    }
    r
}

pub fn run_psi(cfg: &EnsembleConfig) -> Result<(PsiGrid, PsiDiagnostics), ExperimentError> {
    cfg.validate()?;
    Ok(psi_power_iteration(&cfg.psi_params(cfg.p), &cfg.map_ensemble())?)
}

pub fn psi_report(psi: &PsiGrid, diag: &PsiDiagnostics, name: &str) -> Report {
    let mut r = Report::new(name);
    let last = diag.increments.last().copied().unwrap_or(f64::NAN);
    r.num("p", psi.p)
        .num("lambda_p", psi.lambda_p)
        .num("lambda_stderr", psi.lambda_stderr)
        .num("lambda_from_sup", diag.lambda_from_sup)
        .num("psi_min", psi.min())
        .num("psi_max", psi.max())
        .num("final_increment", last)
        .num("residual", diag.residual)
        .flag("cauchy_below_0.05", last < 0.05)
        .flag("psi_positive", psi.min() > 0.0);
    r.files.push((format!("{name}_grid.csv"), psi_dump(psi)));
    r
}

pub fn lambda_curve_report(curve: &LambdaCurve, lyap: Option<&LyapunovEstimate>, name: &str) -> Report {
    let mut r = Report::new(name);
    for &(p, l, se) in &curve.rows {
        r.num(&format!("lambda_p{p}"), l).num(&format!("stderr_p{p}"), se);
    }
    r.num("secant_slope", curve.secant_slope).num("secant_stderr", curve.secant_stderr);
    for (j, &(d, se)) in curve.second_differences.iter().enumerate() {
        r.num(&format!("second_difference_{j}"), d)
            .num(&format!("second_difference_stderr_{j}"), se);
    }
    r.flag(
        "concave_within_3se",
        curve.second_differences.iter().all(|&(d, se)| d <= 3.0 * se),
    );
    if let Some(l) = lyap {
        let se = (curve.secant_stderr.powi(2) + l.stderr.powi(2)).sqrt();
        r.flag("secant_matches_lambda1", (curve.secant_slope - l.value).abs() <= 3.0 * se);
    }
    for w in &curve.warnings {
        r.warn(w);
    }
    r
}

/// Every sub-run in sequence, followed by the rate comparison
/// `μ̂` vs `min{Λ̂(p)/2, α̂₀}`.
pub fn run_full_pipeline(cfg: &EnsembleConfig) -> Result<Vec<Report>, ExperimentError> {
    cfg.validate()?;
    let ens = cfg.map_ensemble();
    let mut out = Vec::new();

    let lyap = run_lyapunov(cfg)?;
    out.push(lyapunov_report(&lyap, "lyapunov"));
    let curve = lambda_curve(&cfg.p_list, &cfg.psi_params(cfg.p), &ens)?;
    out.push(lambda_curve_report(&curve, Some(&lyap), "lambda_curve"));

    let (psi, diag) = run_psi(cfg)?;
    out.push(psi_report(&psi, &diag, "psi"));
    let ly_model = build_symbol(&psi, cfg, cfg.ly_grid)?;
    out.push(run_symbol_checks(&ly_model, cfg).report("symbol"));
    let g_model = build_symbol(&psi, cfg, cfg.garding_grid)?;
    let garding = run_garding(&g_model, cfg);
    out.push(garding.report("garding"));
    let egorov = run_egorov_scaling(cfg);
    out.push(egorov.report("egorov"));
    let ly = run_lasota_yorke(&ly_model, psi.lambda_p, cfg);
    out.push(ly.report("lasota_yorke"));

    let two = run_two_point(cfg, &cfg.separations)?;
    out.extend(two.reports("two_point"));

    let pass = spectral_pass(cfg, Some(&ly_model))?;
    let low = low_freq_from(&pass, cfg);
    out.push(low.report("low_freq"));
    out.push(spectral_neg_delta_report(&pass, cfg, "mix_spectral"));
    if let Some(q) = quadratic_form_report(&pass, "mix_quadratic_form") {
        out.push(q);
    }

    let mix = run_annealed_mixing(cfg)?;
    out.push(mix.report("mix"));
    let quenched = quenched_from(&mix, mix.mu_hat, cfg.n_steps);
    out.push(quenched.report("quenched"));

    let alpha0 = two.widest().alpha0_hat;
    let bound = (psi.lambda_p / 2.0).min(alpha0);
    let mut summary = Report::new("summary");
    summary
        .num("mu_hat", mix.mu_hat)
        .num("mu_stderr", mix.mu_stderr)
        .num("lambda_p_half", psi.lambda_p / 2.0)
        .num("alpha0_hat", alpha0)
        .num("alpha_hat", low.alpha_hat)
        .num("rate_bound", bound)
        .flag("mu_positive_99", mix.mu_hat - 2.576 * mix.mu_stderr > 0.0)
        .flag("low_freq_not_slower", low.alpha_hat >= mix.mu_hat - 2.0 * low.alpha_stderr)
        .flag("garding", garding.passes * 100 >= 99 * garding.validated)
        .flag("lasota_yorke", ly.passes() == ly.validation.len())
        .flag("egorov_decreasing", egorov.strictly_decreasing())
        .flag("quenched_k_at_least_one", quenched.min_k() >= 1.0 - 1e-12)
        .flag("cross_check", low.cross_checks_pass());
    let warnings: Vec<String> = out
        .iter()
        .flat_map(|r| r.entries.iter().filter(|(k, _)| k == "warning").map(|(_, v)| v.clone()))
        .collect();
    summary.int("warnings", warnings.len());
    out.push(summary);
    Ok(out)
}
