//! Annealed, low-frequency, two-point and quenched mixing drivers.

use rayon::prelude::*;

use super::{fit_exponential_rate, fit_window, put_fit, EnsembleConfig, ExperimentError, RateFit, Report, TraceRow};
use crate::rng::{label, stream};
use crate::spectral_fields::{
    heat_probes, kernel_mc_with, mean_stderr, resolution_deviation, sobolev_norm, synthesize, grid_point, HeatProbe,
    KernelTable, ScalarField, SparseInitialData, DEFAULT_KERNEL_TRUNCATION,
};
use crate::symbol_calculus::{quadratic_form, SymbolModel};
use crate::torus_maps::{MapSequence, TorusDiffeo, TorusPoint};
use rand::Rng;

/// Largest deviation between the N and 2N grid norms accepted on a
/// reported point.
pub const RESOLUTION_TOLERANCE: f64 = 0.05;

/// Steps at which spectral and kernel Monte Carlo `H^{-s_low}` estimates
/// are compared.
pub const CROSS_CHECK_STEPS: [usize; 2] = [0, 5];

fn trace_rows(per_sample: &[Vec<f64>], len: usize) -> Vec<TraceRow> {
    (0..len)
        .map(|n| {
            let col: Vec<f64> = per_sample.iter().map(|s| s[n]).collect();
            let (mean, stderr) = mean_stderr(&col);
            TraceRow {
                n,
                mean,
                stderr,
                count: col.len(),
            }
        })
        .collect()
}

/// Annealed `H^{-δ}` statistics from the grid-free heat-kernel estimator
/// along the true forward composition.
#[derive(Clone, Debug)]
pub struct MixingTrace {
    /// `E‖f_n‖²_{H^{-δ}}`, n = 0..=n_steps.
    pub trace: Vec<TraceRow>,
    /// `[sample][n]` single-sample estimates, reused by the quenched run.
    pub per_sample: Vec<Vec<f64>>,
    pub fit: RateFit,
    /// Half the fitted decay rate of the squared norm.
    pub mu_hat: f64,
    pub mu_stderr: f64,
}

impl MixingTrace {
    pub fn report(&self, name: &str) -> Report {
        let mut r = Report::new(name);
        put_fit(&mut r, "squared_norm", &self.fit);
        r.num("mu_hat", self.mu_hat)
            .num("mu_stderr", self.mu_stderr)
            .flag("mu_positive_99", self.mu_hat - 2.576 * self.mu_stderr > 0.0)
            .flag("r2_above_0.9", self.fit.r2 > 0.9);
        r.trace = Some(self.trace.clone());
        r
    }
}

fn heat_sample(data: &SparseInitialData, seq: &MapSequence, probes: &[HeatProbe]) -> Vec<f64> {
    let n_steps = seq.len();
    let mut acc = vec![0.0; n_steps + 1];
    for probe in probes {
        let pts = probe.points();
        for (n, a) in acc.iter_mut().enumerate() {
            let v = pts.map(|q| {
                let back = seq.steps[..n].iter().rev().fold(q, |z, s| s.apply_inverse(z));
                synthesize(data, back)
            });
            *a += HeatProbe::combine(v);
        }
    }
    acc.iter().map(|a| a / probes.len() as f64).collect()
}

/// `E‖f_n‖²_{H^{-δ}}` over the ensemble with the fitted annealed rate.
pub fn run_annealed_mixing(cfg: &EnsembleConfig) -> Result<MixingTrace, ExperimentError> {
    cfg.validate()?;
    let data = cfg.initial_data();
    let ens = cfg.map_ensemble();
    let per_sample: Vec<Vec<f64>> = (0..cfg.n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let seq = ens.sequence(i, cfg.n_steps);
            let probes = heat_probes(cfg.delta, cfg.probes, &mut stream(cfg.seed, label::HEAT, i, 0));
            heat_sample(&data, &seq, &probes)
        })
        .collect();
    let trace = trace_rows(&per_sample, cfg.n_steps + 1);
    let fit = fit_exponential_rate(&fit_window(&trace, cfg.burn));
    Ok(MixingTrace {
        trace,
        per_sample,
        mu_hat: fit.rate / 2.0,
        mu_stderr: fit.rate_stderr / 2.0,
        fit,
    })
}

/// Grid statistics of the pullback along the reversed-prefix composition,
/// shared by the spectral `H^{-δ}` trace, the low-frequency trace and the
/// quadratic-form trace.
#[derive(Clone, Debug)]
pub struct SpectralPass {
    /// `[sample][n]` squared `H^{-δ}` norms on the N grid.
    pub neg_delta: Vec<Vec<f64>>,
    pub neg_delta_dev: Vec<Vec<f64>>,
    /// `[sample][n]` squared `H^{-s_low}` norms on the N grid.
    pub low: Vec<Vec<f64>>,
    pub low_dev: Vec<Vec<f64>>,
    /// `[sample][check]` kernel Monte Carlo estimates at [`CROSS_CHECK_STEPS`].
    pub kernel: Vec<Vec<f64>>,
    /// `[sample][n]` quadratic forms for the first `qf_samples` samples.
    pub quad: Vec<Vec<f64>>,
    pub n_steps: usize,
}

fn down_to(mut f: ScalarField, n: usize) -> ScalarField {
    while f.n() > n {
        f = f.subsample().expect("even grid");
    }
    f
}

/// One pass over the ensemble on the `2N` grid.
pub fn spectral_pass(cfg: &EnsembleConfig, symbol: Option<&SymbolModel>) -> Result<SpectralPass, ExperimentError> {
    cfg.validate()?;
    let data = cfg.initial_data();
    let ens = cfg.map_ensemble();
    let fine_n = 2 * cfg.grid;
    let kernel = KernelTable::new(cfg.s_low, DEFAULT_KERNEL_TRUNCATION)?;
    let checks: Vec<usize> = CROSS_CHECK_STEPS.iter().copied().filter(|&n| n <= cfg.n_steps).collect();
    type Row = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);
    let rows: Vec<Row> = (0..cfg.n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let seq = ens.sequence(i, cfg.n_steps);
            let mut pos: Vec<TorusPoint> = (0..fine_n * fine_n).map(|pt| grid_point(pt / fine_n, pt % fine_n, fine_n)).collect();
            let mut row: Row = Default::default();
            for n in 0..=cfg.n_steps {
                if n > 0 {
                    let step = seq.steps[n - 1];
                    for p in pos.iter_mut() {
                        *p = step.apply_inverse(*p);
                    }
                }
                let fine = ScalarField::from_values(fine_n, pos.iter().map(|&p| synthesize(&data, p)).collect())
                    .expect("valid grid");
                let coarse = fine.subsample().expect("even grid");
                row.0.push(sobolev_norm(&coarse, -cfg.delta).powi(2));
                row.1.push(resolution_deviation(&fine, -cfg.delta));
                row.2.push(sobolev_norm(&coarse, -cfg.s_low).powi(2));
                row.3.push(resolution_deviation(&fine, -cfg.s_low));
                if checks.contains(&n) {
                    let mut rng = stream(cfg.seed, label::PAIRS, i, n as u64);
                    row.4.push(kernel_mc_with(&kernel, &data, &seq.reversed_prefix(n), cfg.kernel_pairs, &mut rng).0);
                }
                if let Some(model) = symbol.filter(|_| (i as usize) < cfg.qf_samples) {
                    row.5.push(quadratic_form(model, &down_to(coarse, cfg.ly_grid.min(cfg.grid))));
                }
            }
            row
        })
        .collect();
    let mut pass = SpectralPass {
        neg_delta: vec![],
        neg_delta_dev: vec![],
        low: vec![],
        low_dev: vec![],
        kernel: vec![],
        quad: vec![],
        n_steps: cfg.n_steps,
    };
    for r in rows {
        pass.neg_delta.push(r.0);
        pass.neg_delta_dev.push(r.1);
        pass.low.push(r.2);
        pass.low_dev.push(r.3);
        pass.kernel.push(r.4);
        if !r.5.is_empty() {
            pass.quad.push(r.5);
        }
    }
    Ok(pass)
}

/// A gated spectral trace: points up to the first step at which any
/// sample fails the resolution check.
#[derive(Clone, Debug)]
pub struct GatedTrace {
    pub trace: Vec<TraceRow>,
    /// First failing step, or `n_steps + 1`.
    pub horizon: usize,
    /// Per-sample first failing step.
    pub cutoffs: Vec<Option<usize>>,
    pub max_deviation: f64,
}

pub fn gate(values: &[Vec<f64>], devs: &[Vec<f64>], n_steps: usize) -> GatedTrace {
    let cutoffs: Vec<Option<usize>> = devs
        .iter()
        .map(|d| d.iter().position(|&x| !(x <= RESOLUTION_TOLERANCE)))
        .collect();
    let horizon = cutoffs.iter().flatten().copied().min().unwrap_or(n_steps + 1);
    let mut trace = trace_rows(values, n_steps + 1);
    trace.truncate(horizon);
    let max_deviation = devs
        .iter()
        .flat_map(|d| d[..horizon].iter())
        .cloned()
        .fold(0.0, f64::max);
    GatedTrace {
        trace,
        horizon,
        cutoffs,
        max_deviation,
    }
}

impl GatedTrace {
    fn put(&self, r: &mut Report) {
        r.int("horizon", self.horizon)
            .int("samples_cut", self.cutoffs.iter().flatten().count())
            .num("max_resolution_deviation", self.max_deviation)
            .flag("resolution_below_tolerance", self.max_deviation < RESOLUTION_TOLERANCE);
        r.trace = Some(self.trace.clone());
    }
}

/// Spectral `H^{-δ}` trace reported next to the heat-kernel one.
pub fn spectral_neg_delta_report(pass: &SpectralPass, cfg: &EnsembleConfig, name: &str) -> Report {
    let g = gate(&pass.neg_delta, &pass.neg_delta_dev, pass.n_steps);
    let mut r = Report::new(name);
    g.put(&mut r);
    let fit = fit_exponential_rate(&fit_window(&g.trace, cfg.burn));
    put_fit(&mut r, "squared_norm", &fit);
    r
}

/// `⟨Op(a)f_n, f_n⟩` on the first `qf_samples` samples.
pub fn quadratic_form_report(pass: &SpectralPass, name: &str) -> Option<Report> {
    if pass.quad.is_empty() {
        return None;
    }
    let mut r = Report::new(name);
    r.int("samples", pass.quad.len());
    r.trace = Some(trace_rows(&pass.quad, pass.n_steps + 1));
    Some(r)
}

/// Low-frequency `H^{-s_low}` decay with its kernel cross-check.
#[derive(Clone, Debug)]
pub struct LowFreqReport {
    pub gated: GatedTrace,
    pub fit: RateFit,
    /// Fitted decay rate of the squared norm.
    pub alpha_hat: f64,
    pub alpha_stderr: f64,
    /// `(n, spectral mean, spectral se, kernel mean, kernel se, z)`.
    pub cross_checks: Vec<(usize, f64, f64, f64, f64, f64)>,
}

impl LowFreqReport {
    pub fn cross_checks_pass(&self) -> bool {
        self.cross_checks.iter().all(|c| c.5 <= 3.0)
    }

    pub fn report(&self, name: &str) -> Report {
        let mut r = Report::new(name);
        self.gated.put(&mut r);
        put_fit(&mut r, "squared_norm", &self.fit);
        r.num("alpha_hat", self.alpha_hat).num("alpha_stderr", self.alpha_stderr);
        for &(n, sm, ss, km, ks, z) in &self.cross_checks {
            r.num(&format!("spectral_mean_n{n}"), sm)
                .num(&format!("spectral_stderr_n{n}"), ss)
                .num(&format!("kernel_mean_n{n}"), km)
                .num(&format!("kernel_stderr_n{n}"), ks)
                .num(&format!("z_n{n}"), z);
        }
        r.flag("cross_check_within_3se", self.cross_checks_pass());
        r
    }
}

pub fn low_freq_from(pass: &SpectralPass, cfg: &EnsembleConfig) -> LowFreqReport {
    let gated = gate(&pass.low, &pass.low_dev, pass.n_steps);
    let fit = fit_exponential_rate(&fit_window(&gated.trace, cfg.burn));
    let checks: Vec<usize> = CROSS_CHECK_STEPS.iter().copied().filter(|&n| n <= pass.n_steps).collect();
    let cross_checks = checks
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            let spec: Vec<f64> = pass.low.iter().map(|s| s[n]).collect();
            let kern: Vec<f64> = pass.kernel.iter().map(|s| s[c]).collect();
            let (sm, ss) = mean_stderr(&spec);
            let (km, ks) = mean_stderr(&kern);
            let se = (ss * ss + ks * ks).sqrt();
            let z = if se > 0.0 {
                (sm - km).abs() / se
            } else if sm == km {
                0.0
            } else {
                f64::INFINITY
            };
            (n, sm, ss, km, ks, z)
        })
        .collect();
    LowFreqReport {
        alpha_hat: fit.rate,
        alpha_stderr: fit.rate_stderr,
        gated,
        fit,
        cross_checks,
    }
}

pub fn run_low_freq_decay(cfg: &EnsembleConfig) -> Result<LowFreqReport, ExperimentError> {
    Ok(low_freq_from(&spectral_pass(cfg, None)?, cfg))
}

/// Decay of `|E K_×(φⁿx, φⁿy)|` for one initial separation.
#[derive(Clone, Debug)]
pub struct TwoPointRow {
    pub separation: f64,
    pub trace: Vec<TraceRow>,
    pub fit: RateFit,
    /// Fitted decay rate of `|E K_×|`.
    pub alpha0_hat: f64,
    pub alpha0_stderr: f64,
    pub prefactor: f64,
}

#[derive(Clone, Debug)]
pub struct TwoPointReport {
    pub rows: Vec<TwoPointRow>,
}

impl TwoPointReport {
    /// The row with the largest separation.
    pub fn widest(&self) -> &TwoPointRow {
        self.rows
            .iter()
            .max_by(|a, b| a.separation.total_cmp(&b.separation))
            .expect("at least one separation")
    }

    /// Prefactor nonincreasing as the separation grows.
    pub fn prefactor_monotone(&self) -> bool {
        let mut rows: Vec<&TwoPointRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.separation.total_cmp(&b.separation));
        rows.windows(2).all(|w| !(w[1].prefactor > w[0].prefactor))
    }

    pub fn reports(&self, name: &str) -> Vec<Report> {
        let mut summary = Report::new(name);
        for (j, row) in self.rows.iter().enumerate() {
            summary
                .num(&format!("separation_{j}"), row.separation)
                .num(&format!("alpha0_{j}"), row.alpha0_hat)
                .num(&format!("alpha0_stderr_{j}"), row.alpha0_stderr)
                .num(&format!("prefactor_{j}"), row.prefactor)
                .int(&format!("fit_points_{j}"), row.fit.used);
            if let Some(w) = &row.fit.warning {
                summary.warn(&format!("separation {j}: {w}"));
            }
        }
        let w = self.widest();
        summary
            .flag("alpha0_positive_widest", w.alpha0_hat - 2.576 * w.alpha0_stderr > 0.0)
            .flag("prefactor_nonincreasing", self.prefactor_monotone());
        let mut out = vec![summary];
        for (j, row) in self.rows.iter().enumerate() {
            let mut t = Report::new(&format!("{name}_sep{j}"));
            t.num("separation", row.separation);
            t.trace = Some(row.trace.clone());
            out.push(t);
        }
        out
    }
}

/// Fit on `|mean|` from `n = 0` up to the first step where the mean falls
/// inside three standard errors of zero.
fn noise_floor_fit(trace: &[TraceRow]) -> RateFit {
    let end = trace
        .iter()
        .position(|r| !(r.mean.abs() >= 3.0 * r.stderr) || r.mean == 0.0)
        .unwrap_or(trace.len());
    let pts: Vec<(f64, f64, f64)> = trace[..end].iter().map(|r| (r.n as f64, r.mean.abs(), r.stderr)).collect();
    fit_exponential_rate(&pts)
}

pub fn run_two_point(cfg: &EnsembleConfig, separations: &[f64]) -> Result<TwoPointReport, ExperimentError> {
    cfg.validate()?;
    let kernel = KernelTable::new(cfg.s_low, DEFAULT_KERNEL_TRUNCATION)?;
    let ens = cfg.map_ensemble();
    let rows = separations
        .iter()
        .enumerate()
        .map(|(j, &d0)| {
            let per: Vec<Vec<f64>> = (0..cfg.two_point_pairs as u64)
                .into_par_iter()
                .map(|i| {
                    let mut rng = stream(cfg.seed, label::TWO_POINT, i, j as u64);
                    let mut x = TorusPoint::uniform(&mut rng);
                    let a: f64 = rng.gen_range(0.0..crate::torus_maps::TWO_PI);
                    let mut y = TorusPoint::new(x.x + d0 * a.cos(), x.y + d0 * a.sin());
                    let mut out = Vec::with_capacity(cfg.n_steps + 1);
                    for n in 0..=cfg.n_steps {
                        if n > 0 {
                            let s = ens.step(i, n as u64 - 1);
                            x = s.apply(x);
                            y = s.apply(y);
                        }
                        out.push(kernel.eval_mean_removed(x.x - y.x, x.y - y.y));
                    }
                    out
                })
                .collect();
            let trace = trace_rows(&per, cfg.n_steps + 1);
            let fit = noise_floor_fit(&trace);
            TwoPointRow {
                separation: d0,
                alpha0_hat: fit.rate,
                alpha0_stderr: fit.rate_stderr,
                prefactor: fit.intercept.exp(),
                trace,
                fit,
            }
        })
        .collect();
    Ok(TwoPointReport { rows })
}

/// Per-sample random constants of the quenched statement.
#[derive(Clone, Debug)]
pub struct QuenchedReport {
    pub mu_hat: f64,
    /// `(horizon, per-sample K)`.
    pub horizons: Vec<(usize, Vec<f64>)>,
    pub orders: Vec<f64>,
}

impl QuenchedReport {
    /// `(mean, stderr)` of `K^q` at horizon index `h`.
    pub fn moment(&self, h: usize, q: f64) -> (f64, f64) {
        let v: Vec<f64> = self.horizons[h].1.iter().map(|k| k.powf(q)).collect();
        mean_stderr(&v)
    }

    pub fn min_k(&self) -> f64 {
        self.horizons
            .iter()
            .flat_map(|h| h.1.iter())
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    /// `E K` at the full horizon within 20% of its value at the half horizon.
    pub fn stabilized(&self) -> bool {
        let (half, _) = self.moment(0, 1.0);
        let (full, _) = self.moment(self.horizons.len() - 1, 1.0);
        (full - half).abs() <= 0.2 * half
    }

    pub fn report(&self, name: &str) -> Report {
        let mut r = Report::new(name);
        r.num("mu_hat", self.mu_hat);
        for (h, (horizon, _)) in self.horizons.iter().enumerate() {
            for &q in &self.orders {
                let (m, se) = self.moment(h, q);
                r.num(&format!("moment_q{q}_horizon{horizon}"), m)
                    .num(&format!("moment_q{q}_horizon{horizon}_stderr"), se);
            }
        }
        r.num("min_k", self.min_k())
            .flag("k_at_least_one", self.min_k() >= 1.0 - 1e-12)
            .flag("first_moment_stabilized", self.stabilized());
        r
    }
}

/// `K = max_{n ≤ H} e^{μ̂n/2} ‖f_n‖/‖f_0‖` per sample, from single-sample
/// heat-kernel estimates; negative estimates count as zero.
pub fn quenched_from(trace: &MixingTrace, mu_hat: f64, n_steps: usize) -> QuenchedReport {
    let horizons: Vec<usize> = vec![n_steps / 2, n_steps];
    let horizons = horizons
        .into_iter()
        .map(|h| {
            let ks = trace
                .per_sample
                .iter()
                .map(|s| {
                    let base = s[0];
                    if !(base > 0.0) {
                        return f64::NAN;
                    }
                    (0..=h)
                        .map(|n| {
                            let ratio = if n == 0 { 1.0 } else { (s[n].max(0.0) / base).sqrt() };
                            (mu_hat * n as f64 / 2.0).exp() * ratio
                        })
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            (h, ks)
        })
        .collect();
    QuenchedReport {
        mu_hat,
        horizons,
        orders: vec![0.5, 1.0, 1.5],
    }
}

pub fn run_quenched(cfg: &EnsembleConfig, mu_hat: f64) -> Result<QuenchedReport, ExperimentError> {
    let trace = run_annealed_mixing(cfg)?;
    Ok(quenched_from(&trace, mu_hat, cfg.n_steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{EnsembleKind, InitialSpec};

    fn small(kind: EnsembleKind) -> EnsembleConfig {
        EnsembleConfig {
            n_samples: 6,
            n_steps: 8,
            grid: 32,
            burn: 2,
            probes: 256,
            kernel_pairs: 512,
            two_point_pairs: 400,
            ensemble: kind,
            ..Default::default()
        }
    }

    #[test]
    fn identity_ensemble_gives_flat_traces() {
        let cfg = small(EnsembleKind::Identity);
        let m = run_annealed_mixing(&cfg).unwrap();
        assert!(m.trace.iter().all(|r| r.mean == m.trace[0].mean));
        assert_eq!(m.mu_hat, 0.0);
        let low = run_low_freq_decay(&cfg).unwrap();
        assert_eq!(low.gated.horizon, cfg.n_steps + 1);
        assert!(low.gated.trace.iter().all(|r| r.mean == low.gated.trace[0].mean));
        assert_eq!(low.alpha_hat, 0.0);
        let q = quenched_from(&m, 0.0, cfg.n_steps);
        assert!(q.horizons.iter().all(|h| h.1.iter().all(|&k| k == 1.0)));
        let tp = run_two_point(&cfg, &[1.0]).unwrap();
        let first = tp.rows[0].trace[0].mean;
        assert!(tp.rows[0].trace.iter().all(|r| r.mean == first));
    }

    #[test]
    fn zero_initial_data_gives_zero_traces() {
        let cfg = EnsembleConfig {
            f0: InitialSpec::Zero,
            ..small(EnsembleKind::Pierrehumbert)
        };
        let low = run_low_freq_decay(&cfg).unwrap();
        assert!(low.gated.trace.iter().all(|r| r.mean == 0.0 && r.stderr == 0.0));
        let m = run_annealed_mixing(&cfg).unwrap();
        assert!(m.trace.iter().all(|r| r.mean == 0.0));
    }

    #[test]
    fn quenched_constant_is_at_least_one() {
        let cfg = small(EnsembleKind::Pierrehumbert);
        let m = run_annealed_mixing(&cfg).unwrap();
        let q = quenched_from(&m, 0.1, cfg.n_steps);
        assert!(q.min_k() >= 1.0 - 1e-12);
    }

    #[test]
    fn spectral_and_kernel_low_norms_agree_at_start() {
        let cfg = small(EnsembleKind::Pierrehumbert);
        let low = run_low_freq_decay(&cfg).unwrap();
        let c0 = low.cross_checks[0];
        assert_eq!(c0.0, 0);
        // cos x: 2 · ¼ · 2^{-2.5}
        assert!((c0.1 - 0.5 * 2f64.powf(-2.5)).abs() < 1e-12);
        assert!(c0.5 < 4.0, "z = {}", c0.5);
    }

    #[test]
    fn traces_are_independent_of_worker_count() {
        let cfg = small(EnsembleKind::Pierrehumbert);
        let run = |w: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .unwrap()
                .install(|| run_annealed_mixing(&cfg).unwrap().trace)
        };
        assert_eq!(run(1), run(3));
    }
}
