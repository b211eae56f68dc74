//! Ensemble drivers for the decay statements and inequalities, with rate
//! fitting and statistical reporting.

mod inequalities;
mod mixing;
mod pipeline;

pub use inequalities::*;
pub use mixing::*;
pub use pipeline::*;

use std::fmt::Write as _;

use thiserror::Error;

use crate::cocycle_stats::{PsiGrid, PsiParams, StatsError};
use crate::rng::{label, stream};
use crate::spectral_fields::{FieldError, ScalarField, SparseInitialData};
use crate::symbol_calculus::{symbol_eval, SymbolModel};
use crate::torus_maps::{MapEnsemble, TorusPoint, TWO_PI};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Which step distribution drives a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnsembleKind {
    Pierrehumbert,
    Identity,
}

impl EnsembleKind {
    pub fn name(&self) -> &'static str {
        match self {
            EnsembleKind::Pierrehumbert => "pierrehumbert",
            EnsembleKind::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pierrehumbert" => Some(EnsembleKind::Pierrehumbert),
            "identity" => Some(EnsembleKind::Identity),
            _ => None,
        }
    }
}

/// Initial scalar field of a mixing run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitialSpec {
    /// `cos(k·x)`.
    Cosine([i64; 2]),
    /// `count` random modes with `|k|_∞ ≤ band`, drawn from the run seed.
    Random { count: usize, band: i64 },
    /// The zero field.
    Zero,
}

impl InitialSpec {
    /// `cos:K1,K2`, `random:COUNT:BAND` or `zero`.
    pub fn parse(s: &str) -> Option<Self> {
        if s == "zero" {
            return Some(InitialSpec::Zero);
        }
        if let Some(rest) = s.strip_prefix("cos:") {
            let (a, b) = rest.split_once(',')?;
            let k = [a.trim().parse().ok()?, b.trim().parse().ok()?];
            return (k != [0, 0]).then_some(InitialSpec::Cosine(k));
        }
        if let Some(rest) = s.strip_prefix("random:") {
            let (a, b) = rest.split_once(':')?;
            let count: usize = a.parse().ok()?;
            let band: i64 = b.parse().ok()?;
            return (count >= 1 && band >= 1).then_some(InitialSpec::Random { count, band });
        }
        None
    }

    pub fn render(&self) -> String {
        match self {
            InitialSpec::Cosine(k) => format!("cos:{},{}", k[0], k[1]),
            InitialSpec::Random { count, band } => format!("random:{count}:{band}"),
            InitialSpec::Zero => "zero".into(),
        }
    }

    pub fn build(&self, seed: u64) -> SparseInitialData {
        match *self {
            InitialSpec::Cosine(k) => SparseInitialData::cosine(k),
            InitialSpec::Random { count, band } => {
                SparseInitialData::random(&mut stream(seed, label::INITIAL_DATA, 0, 0), count, band)
            }
            InitialSpec::Zero => SparseInitialData::default(),
        }
    }
}

/// Every tunable of every experiment. Keys of the flat config format map
/// one-to-one onto these fields.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleConfig {
    pub n_samples: usize,
    pub n_steps: usize,
    pub grid: usize,
    pub p: f64,
    pub eps: f64,
    pub delta: f64,
    pub s_low: f64,
    pub seed: u64,
    pub ensemble: EnsembleKind,
    pub f0: InitialSpec,
    /// Leading steps excluded from rate fits.
    pub burn: usize,
    /// Heat-kernel probes per sample for the `H^{-δ}` trace.
    pub probes: usize,
    /// Pairs per sample for the kernel Monte Carlo cross-check.
    pub kernel_pairs: usize,
    /// Samples that also record the quadratic-form trace.
    pub qf_samples: usize,
    pub psi_nx: usize,
    pub psi_ntheta: usize,
    pub psi_maps: usize,
    pub psi_iters: usize,
    pub psi_residual_maps: usize,
    pub p_list: Vec<f64>,
    pub lyap_steps: usize,
    pub lyap_samples: usize,
    pub moment_steps: usize,
    pub moment_samples: usize,
    pub garding_grid: usize,
    pub garding_band: i64,
    pub garding_fields: usize,
    pub ly_grid: usize,
    pub ly_band: i64,
    pub ly_maps: usize,
    pub ly_fields: usize,
    pub egorov_grid: usize,
    pub egorov_bands: Vec<i64>,
    pub egorov_steps: usize,
    pub seminorm_samples: usize,
    pub two_point_pairs: usize,
    pub separations: Vec<f64>,
    /// Rayon worker count.
    pub workers: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            n_samples: 200,
            n_steps: 25,
            grid: 256,
            p: 0.1,
            eps: 0.2,
            delta: 0.05,
            s_low: 2.5,
            seed: 1,
            ensemble: EnsembleKind::Pierrehumbert,
            f0: InitialSpec::Cosine([1, 0]),
            burn: 5,
            probes: 4096,
            kernel_pairs: 4096,
            qf_samples: 2,
            psi_nx: 32,
            psi_ntheta: 64,
            psi_maps: 128,
            psi_iters: 32,
            psi_residual_maps: 256,
            p_list: vec![0.0, 0.05, 0.1, 0.2],
            lyap_steps: 1000,
            lyap_samples: 1000,
            moment_steps: 200,
            moment_samples: 10_000,
            garding_grid: 64,
            garding_band: 16,
            garding_fields: 100,
            ly_grid: 128,
            ly_band: 6,
            ly_maps: 16,
            ly_fields: 20,
            egorov_grid: 256,
            egorov_bands: vec![4, 8, 16, 32],
            egorov_steps: 4,
            seminorm_samples: 2000,
            two_point_pairs: 20_000,
            separations: vec![
                std::f64::consts::PI / 64.0,
                std::f64::consts::PI / 16.0,
                std::f64::consts::PI / 4.0,
                std::f64::consts::PI,
            ],
            workers: 1,
        }
    }
}

impl EnsembleConfig {
    pub fn map_ensemble(&self) -> MapEnsemble {
        match self.ensemble {
            EnsembleKind::Pierrehumbert => MapEnsemble::Pierrehumbert { seed: self.seed },
            EnsembleKind::Identity => MapEnsemble::Identity,
        }
    }

    pub fn psi_params(&self, p: f64) -> PsiParams {
        PsiParams {
            p,
            nx: self.psi_nx,
            ntheta: self.psi_ntheta,
            maps_per_iter: self.psi_maps,
            n_iters: self.psi_iters,
            residual_maps: self.psi_residual_maps,
        }
    }

    pub fn initial_data(&self) -> SparseInitialData {
        self.f0.build(self.seed).mean_zero()
    }

    /// Range checks; the message names the offending key.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |key: &str, why: &str| Err(ExperimentError::Config(format!("{key}: {why}")));
        let grid_ok = |n: usize| n >= 8 && n.is_power_of_two();
        for (key, v) in [
            ("samples", self.n_samples),
            ("steps", self.n_steps),
            ("probes", self.probes),
            ("kernel_pairs", self.kernel_pairs),
            ("psi_maps", self.psi_maps),
            ("psi_residual_maps", self.psi_residual_maps),
            ("lyap_steps", self.lyap_steps),
            ("lyap_samples", self.lyap_samples),
            ("moment_steps", self.moment_steps),
            ("moment_samples", self.moment_samples),
            ("garding_fields", self.garding_fields),
            ("ly_maps", self.ly_maps),
            ("ly_fields", self.ly_fields),
            ("egorov_steps", self.egorov_steps),
            ("seminorm_samples", self.seminorm_samples),
            ("two_point_pairs", self.two_point_pairs),
            ("workers", self.workers),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1");
            }
        }
        for (key, n) in [("grid", self.grid), ("garding_grid", self.garding_grid), ("ly_grid", self.ly_grid), ("egorov_grid", self.egorov_grid)] {
            if !grid_ok(n) {
                return bad(key, "must be a power of two ≥ 8");
            }
        }
        if !(0.0..=1.0).contains(&self.p) {
            return bad("p", "must lie in [0,1]");
        }
        if !(self.eps > 0.0 && self.eps < 0.25) {
            return bad("eps", "must lie in (0, 1/4)");
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad("delta", "must be positive");
        }
        if !(self.s_low > 1.0 && self.s_low.is_finite()) {
            return bad("s_low", "must exceed 1");
        }
        if self.psi_nx < 8 || self.psi_ntheta < 8 {
            return bad("psi_nx", "psi grid sizes must be ≥ 8");
        }
        if self.psi_ntheta % 2 != 0 {
            return bad("psi_ntheta", "must be even");
        }
        if self.psi_iters < 2 {
            return bad("psi_iters", "must be at least 2");
        }
        if self.burn >= self.n_steps {
            return bad("burn", "must be smaller than steps");
        }
        if self.p_list.is_empty() || self.p_list.iter().any(|p| !(0.0..=0.5).contains(p)) {
            return bad("p_list", "needs at least one order, each in [0, 0.5]");
        }
        if self.separations.is_empty() || self.separations.iter().any(|d| !(*d > 0.0 && *d <= std::f64::consts::PI)) {
            return bad("separations", "each separation must lie in (0, π]");
        }
        if self.egorov_bands.is_empty() || self.egorov_bands.iter().any(|k| *k < 1 || 2 * *k >= self.egorov_grid as i64) {
            return bad("egorov_bands", "bands must lie in [1, egorov_grid/2)");
        }
        if self.garding_band < 1 || 2 * self.garding_band >= self.garding_grid as i64 {
            return bad("garding_band", "must lie in [1, garding_grid/2)");
        }
        if self.ly_band < 1 || 2 * self.ly_band >= self.ly_grid as i64 {
            return bad("ly_band", "must lie in [1, ly_grid/2)");
        }
        let band = self.f0.build(self.seed).band();
        if 2 * band >= self.grid as i64 {
            return bad("f0", "initial data must be resolved on the grid");
        }
        Ok(())
    }
}

/// Float serialization used in every output file: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// One line of a `<name>_trace.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

/// One output unit: `<name>_report.csv`, an optional `<name>_trace.csv`
/// and any dump files.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub name: String,
    pub trace: Option<Vec<TraceRow>>,
    pub entries: Vec<(String, String)>,
    /// `(file name, contents)`.
    pub files: Vec<(String, String)>,
}

impl Report {
    pub fn new(name: &str) -> Self {
        Report {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn num(&mut self, key: &str, v: f64) -> &mut Self {
        self.entries.push((key.into(), fmt_f64(v)));
        self
    }

    pub fn int(&mut self, key: &str, v: usize) -> &mut Self {
        self.entries.push((key.into(), v.to_string()));
        self
    }

    pub fn flag(&mut self, key: &str, v: bool) -> &mut Self {
        self.entries.push((key.into(), if v { "pass" } else { "fail" }.into()));
        self
    }

    pub fn text(&mut self, key: &str, v: &str) -> &mut Self {
        self.entries.push((key.into(), v.into()));
        self
    }

    pub fn warn(&mut self, msg: &str) -> &mut Self {
        self.text("warning", msg)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn trace_csv(&self) -> Option<String> {
        self.trace.as_ref().map(|rows| {
            let mut s = String::from("n,mean,stderr,count\n");
            for r in rows {
                writeln!(s, "{},{},{},{}", r.n, fmt_f64(r.mean), fmt_f64(r.stderr), r.count).unwrap();
            }
            s
        })
    }

    pub fn report_csv(&self) -> String {
        let mut s = String::from("key,value\n");
        for (k, v) in &self.entries {
            writeln!(s, "{k},{v}").unwrap();
        }
        s
    }
}

/// Weighted least-squares fit of `log value = intercept − rate·n`.
#[derive(Clone, Debug, PartialEq)]
pub struct RateFit {
    pub rate: f64,
    pub rate_stderr: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Points actually used.
    pub used: usize,
    pub warning: Option<String>,
}

impl RateFit {
    /// Lower end of the two-sided 99% interval.
    pub fn ci99_low(&self) -> f64 {
        self.rate - 2.576 * self.rate_stderr
    }

    fn invalid(warning: String) -> Self {
        RateFit {
            rate: f64::NAN,
            rate_stderr: f64::NAN,
            intercept: f64::NAN,
            r2: f64::NAN,
            used: 0,
            warning: Some(warning),
        }
    }
}

/// Fit over the series `(n, value, stderr)`. The window stops at the first
/// non-positive value. Weights are `(value/stderr)²`, the delta-method
/// variance of the log; with any zero stderr the fit is unweighted. The
/// standard error is scaled by `max(1, reduced χ²)`.
pub fn fit_exponential_rate(series: &[(f64, f64, f64)]) -> RateFit {
    let mut warning = None;
    let cut = series.iter().position(|&(_, v, _)| !(v > 0.0)).unwrap_or(series.len());
    if cut < series.len() {
        warning = Some(format!("non-positive value at n={}; fit window truncated", series[cut].0));
    }
    let pts = &series[..cut];
    if pts.len() < 2 {
        return RateFit::invalid(format!("only {} positive point(s) in the fit window", pts.len()));
    }
    let weighted = pts.iter().all(|&(_, _, se)| se > 0.0);
    let w: Vec<f64> = pts
        .iter()
        .map(|&(_, v, se)| if weighted { (v / se).powi(2) } else { 1.0 })
        .collect();
    // logs relative to the first point, so a flat series fits slope 0 exactly
    let y0 = pts[0].1.ln();
    let y: Vec<f64> = pts.iter().map(|p| p.1.ln() - y0).collect();
    let sw: f64 = w.iter().sum();
    let xm = pts.iter().zip(&w).map(|(p, w)| w * p.0).sum::<f64>() / sw;
    let ym = y.iter().zip(&w).map(|(y, w)| w * y).sum::<f64>() / sw;
    let sxx: f64 = pts.iter().zip(&w).map(|(p, w)| w * (p.0 - xm).powi(2)).sum();
    let sxy: f64 = pts.iter().zip(y.iter().zip(&w)).map(|(p, (y, w))| w * (p.0 - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    let intercept = y0 + ym - slope * xm;
    let ss_res: f64 = pts
        .iter()
        .zip(y.iter().zip(&w))
        .map(|(p, (y, w))| w * (y + y0 - intercept - slope * p.0).powi(2))
        .sum();
    let ss_tot: f64 = y.iter().zip(&w).map(|(y, w)| w * (y - ym).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    let dof = pts.len().saturating_sub(2).max(1) as f64;
    let rate_stderr = if weighted {
        (1.0f64).max(ss_res / dof).sqrt() / sxx.sqrt()
    } else {
        (ss_res / dof / sxx).sqrt()
    };
    RateFit {
        rate: -slope + 0.0,
        rate_stderr,
        intercept,
        r2,
        used: pts.len(),
        warning,
    }
}

/// `(n, mean, stderr)` of trace rows in `[from, ..]`.
pub fn fit_window(rows: &[TraceRow], from: usize) -> Vec<(f64, f64, f64)> {
    rows.iter()
        .filter(|r| r.n >= from)
        .map(|r| (r.n as f64, r.mean, r.stderr))
        .collect()
}

fn put_fit(rep: &mut Report, prefix: &str, fit: &RateFit) {
    rep.num(&format!("{prefix}_rate"), fit.rate)
        .num(&format!("{prefix}_rate_stderr"), fit.rate_stderr)
        .num(&format!("{prefix}_intercept"), fit.intercept)
        .num(&format!("{prefix}_r2"), fit.r2)
        .int(&format!("{prefix}_points"), fit.used);
    if let Some(w) = &fit.warning {
        rep.warn(&format!("{prefix}: {w}"));
    }
}

/// Tolerance bounds of a calibration batch: `(lower, upper)` with
/// `upper = max(max r, mean + 3 sd)` and `lower = min(min r, mean − 3 sd)`.
pub fn tolerance_bounds(r: &[f64]) -> (f64, f64) {
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let sd = if r.len() > 1 {
        (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = r.iter().cloned().fold(f64::INFINITY, f64::min);
    (min.min(mean - 3.0 * sd), max.max(mean + 3.0 * sd))
}

/// PsiGrid dump: `ix,iy,itheta,value` with a metadata header.
pub fn psi_dump(psi: &PsiGrid) -> String {
    let mut s = format!(
        "# p={} nx={} ntheta={} lambda_p={}\nix,iy,itheta,value\n",
        fmt_f64(psi.p),
        psi.nx,
        psi.ntheta,
        fmt_f64(psi.lambda_p)
    );
    for ix in 0..psi.nx {
        for iy in 0..psi.nx {
            for it in 0..psi.ntheta {
                writeln!(s, "{ix},{iy},{it},{}", fmt_f64(psi.at(ix, iy, it))).unwrap();
            }
        }
    }
    s
}

/// Field dump: `i,j,x,y,value` with a metadata line.
pub fn field_dump(f: &ScalarField, seed: u64, n_steps: usize) -> String {
    let n = f.n();
    let h = TWO_PI / n as f64;
    let mut s = format!("# N={n} seed={seed} n_steps={n_steps}\ni,j,x,y,value\n");
    for i in 0..n {
        for j in 0..n {
            writeln!(s, "{i},{j},{},{},{}", fmt_f64(i as f64 * h), fmt_f64(j as f64 * h), fmt_f64(f.value(i, j))).unwrap();
        }
    }
    s
}

/// Symbol dump on an `nx × nx` grid of base points and the integer
/// wavevectors with `|k|_∞ ≤ kmax`.
pub fn symbol_dump(model: &SymbolModel, nx: usize, kmax: i64) -> String {
    let h = TWO_PI / nx as f64;
    let mut s = String::from("ix,iy,k1,k2,value\n");
    for ix in 0..nx {
        for iy in 0..nx {
            let x = TorusPoint {
                x: ix as f64 * h,
                y: iy as f64 * h,
            };
            for k1 in -kmax..=kmax {
                for k2 in -kmax..=kmax {
                    let v = symbol_eval(model, x, [k1 as f64, k2 as f64]);
                    writeln!(s, "{ix},{iy},{k1},{k2},{}", fmt_f64(v)).unwrap();
                }
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series(f: impl Fn(f64) -> f64, n: usize) -> Vec<(f64, f64, f64)> {
        (0..=n).map(|i| (i as f64, f(i as f64), 0.0)).collect()
    }

    #[test]
    fn fit_examples() {
        let fit = fit_exponential_rate(&series(|n| (-0.5 * n).exp(), 20));
        assert!((fit.rate - 0.5).abs() < 1e-10);
        assert!((fit.r2 - 1.0).abs() < 1e-10);
        let fit = fit_exponential_rate(&series(|_| 3.0, 20));
        assert_eq!(fit.rate, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noisy: Vec<_> = (0..=20)
            .map(|i| {
                let v = (-0.3 * i as f64).exp() * (1.0 + 0.01 * rng.gen_range(-1.0..1.0));
                (i as f64, v, 0.01 * v)
            })
            .collect();
        let fit = fit_exponential_rate(&noisy);
        assert!((0.28..=0.32).contains(&fit.rate));
    }

    #[test]
    fn fit_truncates_at_non_positive_values() {
        let mut s = series(|n| (-0.2 * n).exp(), 10);
        s[6].1 = -1e-3;
        let fit = fit_exponential_rate(&s);
        assert_eq!(fit.used, 6);
        assert!(fit.warning.is_some());
        assert!((fit.rate - 0.2).abs() < 1e-12);
        assert!(fit_exponential_rate(&s[..1]).rate.is_nan());
    }

    #[test]
    fn tolerance_bounds_cover_the_batch() {
        let r = [1.0, 2.0, 3.0];
        let (lo, hi) = tolerance_bounds(&r);
        assert!((hi - 5.0).abs() < 1e-12);
        assert!((lo + 1.0).abs() < 1e-12);
        assert_eq!(tolerance_bounds(&[0.0, 0.0]), (0.0, 0.0));
    }

    #[test]
    fn initial_spec_round_trip() {
        for s in ["cos:1,0", "cos:-3,12", "random:8:6", "zero"] {
            assert_eq!(InitialSpec::parse(s).unwrap().render(), s);
        }
        assert!(InitialSpec::parse("cos:0,0").is_none());
        assert!(InitialSpec::parse("sin:1,0").is_none());
    }

    #[test]
    fn default_config_is_valid() {
        EnsembleConfig::default().validate().unwrap();
        let c = EnsembleConfig {
            p: 2.0,
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("p:"));
    }

    #[test]
    fn report_csv_layout() {
        let mut r = Report::new("x");
        r.num("a", 0.5).flag("ok", true);
        r.trace = Some(vec![TraceRow {
            n: 0,
            mean: 1.0,
            stderr: 0.0,
            count: 3,
        }]);
        assert_eq!(r.report_csv(), "key,value\na,5.0000000000000000e-1\nok,pass\n");
        assert_eq!(
            r.trace_csv().unwrap(),
            "n,mean,stderr,count\n0,1.0000000000000000e0,0.0000000000000000e0,3\n"
        );
    }
}
