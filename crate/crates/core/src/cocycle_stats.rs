//! Monte Carlo statistics of the cotangent cocycle: top Lyapunov exponent,
//! moment Lyapunov function and the dominant eigenfunction of the
//! `|Ǎv|^{-p}`-twisted projective transfer operator.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::rng::{label, stream};
use crate::spectral_fields::mean_stderr;
use crate::torus_maps::{projective_step, wrap, MapEnsemble, TorusDiffeo, TorusPoint, TWO_PI};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("p = {0} outside [0, 1]")]
    Order(f64),
    #[error("grid sizes must be ≥ 8 (got nx = {nx}, ntheta = {ntheta})")]
    Grid { nx: usize, ntheta: usize },
    #[error("count `{0}` must be ≥ 1")]
    Count(&'static str),
    #[error("non-positive eigenfunction value {value} in iteration {iteration}")]
    NonPositive { iteration: usize, value: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LyapunovEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_steps: usize,
    pub n_samples: usize,
}

impl LyapunovEstimate {
    /// Horizons shorter than 100 steps are dominated by transients.
    pub fn is_reportable(&self) -> bool {
        self.n_steps >= 100
    }
}

/// Random start `(x, θ)` for sample `i`.
fn start(seed: u64, sample: u64) -> (TorusPoint, f64) {
    let mut rng = stream(seed, label::START, sample, 0);
    let x = TorusPoint::uniform(&mut rng);
    let v = rng.gen_range(-PI..PI);
    (x, v)
}

/// Σ log-gain along one projective trajectory.
fn total_log_gain(ensemble: &MapEnsemble, start_seed: u64, sample: u64, n_steps: usize) -> f64 {
    let (mut x, mut v) = start(start_seed, sample);
    let mut total = 0.0;
    for i in 0..n_steps as u64 {
        let s = ensemble.step(sample, i);
        let (x2, v2, g) = projective_step(&s, x, v);
        x = x2;
        v = v2;
        total += g;
    }
    total
}

fn log_gain_sums(ensemble: &MapEnsemble, start_seed: u64, n_steps: usize, n_samples: usize) -> Vec<f64> {
    (0..n_samples as u64)
        .into_par_iter()
        .map(|i| total_log_gain(ensemble, start_seed, i, n_steps))
        .collect()
}

/// Top exponent of the Pierrehumbert cocycle.
pub fn top_lyapunov(n_steps: usize, n_samples: usize, seed: u64) -> LyapunovEstimate {
    top_lyapunov_for(&MapEnsemble::Pierrehumbert { seed }, n_steps, n_samples, seed)
}

pub fn top_lyapunov_for(ensemble: &MapEnsemble, n_steps: usize, n_samples: usize, seed: u64) -> LyapunovEstimate {
    assert!(n_steps >= 1 && n_samples >= 1);
    let per: Vec<f64> = log_gain_sums(ensemble, seed, n_steps, n_samples)
        .into_iter()
        .map(|s| s / n_steps as f64)
        .collect();
    let (value, stderr) = mean_stderr(&per);
    LyapunovEstimate {
        value: value + 0.0,
        stderr,
        n_steps,
        n_samples,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentEstimate {
    pub p: f64,
    pub lambda: f64,
    pub stderr: f64,
    /// Effective sample size of the exponential weights over `n_samples`.
    pub ess_fraction: f64,
    pub warning: Option<String>,
}

/// `Λ(p) ≈ -(1/n) log mean exp(-p Σ log-gain)` with a delta-method error.
pub fn moment_lyapunov_direct(p: f64, n_steps: usize, n_samples: usize, seed: u64) -> Result<MomentEstimate, StatsError> {
    moment_lyapunov_direct_for(&MapEnsemble::Pierrehumbert { seed }, p, n_steps, n_samples, seed)
}

pub fn moment_lyapunov_direct_for(
    ensemble: &MapEnsemble,
    p: f64,
    n_steps: usize,
    n_samples: usize,
    seed: u64,
) -> Result<MomentEstimate, StatsError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(StatsError::Order(p));
    }
    if n_steps == 0 {
        return Err(StatsError::Count("n_steps"));
    }
    if n_samples == 0 {
        return Err(StatsError::Count("n_samples"));
    }
    let sums = log_gain_sums(ensemble, seed, n_steps, n_samples);
    Ok(moment_from_sums(p, n_steps, &sums))
}

/// The direct estimator from precomputed trajectory sums.
pub fn moment_from_sums(p: f64, n_steps: usize, sums: &[f64]) -> MomentEstimate {
    let s = sums.len();
    let a: Vec<f64> = sums.iter().map(|x| -p * x).collect();
    let shift = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = a.iter().map(|x| (x - shift).exp()).collect();
    let (mean_w, se_w) = mean_stderr(&w);
    let second = w.iter().map(|x| x * x).sum::<f64>() / s as f64;
    let ess_fraction = mean_w * mean_w / second;
    let lambda = -(shift + mean_w.ln()) / n_steps as f64 + 0.0;
    let stderr = se_w / mean_w / n_steps as f64;
    let warning = (ess_fraction < 0.01).then(|| {
        format!("moment estimator at p={p}: effective sample fraction {ess_fraction:.4} below 0.01, heavy-tailed weights")
    });
    MomentEstimate {
        p,
        lambda,
        stderr,
        ess_fraction,
        warning,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsiParams {
    pub p: f64,
    pub nx: usize,
    pub ntheta: usize,
    pub maps_per_iter: usize,
    pub n_iters: usize,
    /// Maps used for the final eigen-residual check.
    pub residual_maps: usize,
}

impl PsiParams {
    pub fn new(p: f64) -> Self {
        PsiParams {
            p,
            nx: 32,
            ntheta: 64,
            maps_per_iter: 128,
            n_iters: 32,
            residual_maps: 256,
        }
    }

    fn validate(&self) -> Result<(), StatsError> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(StatsError::Order(self.p));
        }
        if self.nx < 8 || self.ntheta < 8 {
            return Err(StatsError::Grid {
                nx: self.nx,
                ntheta: self.ntheta,
            });
        }
        if self.maps_per_iter == 0 {
            return Err(StatsError::Count("maps_per_iter"));
        }
        if self.n_iters < 2 {
            return Err(StatsError::Count("n_iters"));
        }
        Ok(())
    }
}

/// Positive function on the `(x, θ)` grid, periodic in all axes.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiGrid {
    pub nx: usize,
    pub ntheta: usize,
    /// `values[(ix * nx + iy) * ntheta + itheta]`.
    pub values: Vec<f64>,
    pub p: f64,
    /// Estimated `Λ(p)`; the eigenvalue is `e^{-Λ(p)}`.
    pub lambda_p: f64,
    pub lambda_stderr: f64,
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Cell index and fraction for periodic linear interpolation.
#[inline]
fn cell(t: f64, n: usize) -> (usize, usize, f64) {
    let u = wrap(t) / TWO_PI * n as f64;
    let i = (u.floor() as usize).min(n - 1);
    let f = u - i as f64;
    (i, (i + 1) % n, f)
}

impl PsiGrid {
    pub fn constant(nx: usize, ntheta: usize, value: f64) -> Self {
        PsiGrid {
            nx,
            ntheta,
            values: vec![value; nx * nx * ntheta],
            p: 0.0,
            lambda_p: 0.0,
            lambda_stderr: 0.0,
        }
    }

    pub fn from_fn(nx: usize, ntheta: usize, f: impl Fn(f64, f64, f64) -> f64) -> Self {
        let hx = TWO_PI / nx as f64;
        let ht = TWO_PI / ntheta as f64;
        let mut values = Vec::with_capacity(nx * nx * ntheta);
        for ix in 0..nx {
            for iy in 0..nx {
                for it in 0..ntheta {
                    values.push(f(ix as f64 * hx, iy as f64 * hx, it as f64 * ht));
                }
            }
        }
        PsiGrid {
            nx,
            ntheta,
            values,
            p: 0.0,
            lambda_p: 0.0,
            lambda_stderr: 0.0,
        }
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize, it: usize) -> f64 {
        self.values[(ix * self.nx + iy) * self.ntheta + it]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn eigenvalue(&self) -> f64 {
        (-self.lambda_p).exp()
    }

    /// Periodic trilinear interpolation; constants are reproduced exactly.
    pub fn interp(&self, x: f64, y: f64, theta: f64) -> f64 {
        let cx = cell(x, self.nx);
        let cy = cell(y, self.nx);
        self.interp_cells(cx, cy, theta)
    }

    #[inline]
    fn interp_cells(&self, cx: (usize, usize, f64), cy: (usize, usize, f64), theta: f64) -> f64 {
        let (l0, l1, tt) = cell(theta, self.ntheta);
        let nt = self.ntheta;
        let base = |ix: usize, iy: usize| (ix * self.nx + iy) * nt;
        let b00 = base(cx.0, cy.0);
        let b10 = base(cx.1, cy.0);
        let b01 = base(cx.0, cy.1);
        let b11 = base(cx.1, cy.1);
        let v = &self.values;
        let slab = |l: usize| {
            lerp(
                lerp(v[b00 + l], v[b10 + l], cx.2),
                lerp(v[b01 + l], v[b11 + l], cx.2),
                cy.2,
            )
        };
        lerp(slab(l0), slab(l1), tt)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsiDiagnostics {
    /// Sup distance between consecutive sup-normalized iterates.
    pub increments: Vec<f64>,
    /// `mean(P̂ψ) / mean(ψ)` per iteration.
    pub mean_factors: Vec<f64>,
    /// `max(P̂ψ) / max(ψ)` per iteration.
    pub sup_factors: Vec<f64>,
    /// `-mean log` of the last half of the sup factors.
    pub lambda_from_sup: f64,
    /// `sup |e^{Λ̂} P̂ψ − ψ| / sup ψ` on a fresh batch of maps.
    pub residual: f64,
}

/// Image data of one x-node under one map, shared by all angles.
struct NodeImage {
    cx: (usize, usize, f64),
    cy: (usize, usize, f64),
    m: [[f64; 2]; 2],
}

fn apply_twisted(
    psi: &PsiGrid,
    p: f64,
    maps: &[crate::torus_maps::ShearMapStep],
    trig: &[(f64, f64, f64)],
) -> Vec<f64> {
    let nx = psi.nx;
    let nt = psi.ntheta;
    let hx = TWO_PI / nx as f64;
    let m = maps.len() as f64;
    (0..nx * nx)
        .into_par_iter()
        .flat_map_iter(|node| {
            let (ix, iy) = (node / nx, node % nx);
            let x = TorusPoint {
                x: ix as f64 * hx,
                y: iy as f64 * hx,
            };
            let images: Vec<NodeImage> = maps
                .iter()
                .map(|s| {
                    let q = s.apply(x);
                    NodeImage {
                        cx: cell(q.x, nx),
                        cy: cell(q.y, nx),
                        m: s.inv_transpose_jacobian(x).m,
                    }
                })
                .collect();
            let mut out = vec![0.0; nt];
            for (it, o) in out.iter_mut().enumerate() {
                let (c, s, v2) = trig[it];
                let mut acc = 0.0;
                for im in &images {
                    let w0 = im.m[0][0] * c + im.m[0][1] * s;
                    let w1 = im.m[1][0] * c + im.m[1][1] * s;
                    let weight = ((w0 * w0 + w1 * w1) / v2).powf(-0.5 * p);
                    acc += weight * psi.interp_cells(im.cx, im.cy, w1.atan2(w0));
                }
                *o = acc / m;
            }
            out
        })
        .collect()
}

/// Power iteration for the positive eigenfunction of
/// `P̂ψ(x, v) = E |Ǎv|^{-p} ψ(φ(x), Ǎv/|Ǎv|)`, starting from `ψ ≡ 1`.
pub fn psi_power_iteration(params: &PsiParams, ensemble: &MapEnsemble) -> Result<(PsiGrid, PsiDiagnostics), StatsError> {
    params.validate()?;
    let nt = params.ntheta;
    let ht = TWO_PI / nt as f64;
    let trig: Vec<(f64, f64, f64)> = (0..nt)
        .map(|it| {
            let (s, c) = (it as f64 * ht).sin_cos();
            (c, s, c * c + s * s)
        })
        .collect();
    let mut psi = PsiGrid::constant(params.nx, nt, 1.0);
    psi.p = params.p;
    let mut increments = Vec::with_capacity(params.n_iters);
    let mut mean_factors = Vec::with_capacity(params.n_iters);
    let mut sup_factors = Vec::with_capacity(params.n_iters);
    for it in 0..params.n_iters {
        let maps: Vec<_> = (0..params.maps_per_iter as u64)
            .map(|j| ensemble.step_with_label(label::PSI, it as u64, j))
            .collect();
        let new = apply_twisted(&psi, params.p, &maps, &trig);
        if let Some(&bad) = new.iter().find(|v| !(**v > 0.0)) {
            return Err(StatsError::NonPositive {
                iteration: it,
                value: bad,
            });
        }
        let old_mean = psi.values.iter().sum::<f64>() / psi.values.len() as f64;
        let new_mean = new.iter().sum::<f64>() / new.len() as f64;
        let sup = new.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mean_factors.push(new_mean / old_mean);
        sup_factors.push(sup / psi.max());
        let normalized: Vec<f64> = new.iter().map(|v| v / sup).collect();
        let inc = normalized
            .iter()
            .zip(&psi.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        increments.push(inc);
        psi.values = normalized;
    }
    let tail = params.n_iters / 2;
    let logs: Vec<f64> = mean_factors[params.n_iters - tail..].iter().map(|f| -f.ln()).collect();
    let (lambda, se) = mean_stderr(&logs);
    psi.lambda_p = lambda + 0.0;
    psi.lambda_stderr = se;
    let sup_logs: Vec<f64> = sup_factors[params.n_iters - tail..].iter().map(|f| -f.ln()).collect();
    let lambda_from_sup = mean_stderr(&sup_logs).0 + 0.0;

    let residual = if params.residual_maps > 0 {
        let maps: Vec<_> = (0..params.residual_maps as u64)
            .map(|j| ensemble.step_with_label(label::PSI_RESIDUAL, 0, j))
            .collect();
        let applied = apply_twisted(&psi, params.p, &maps, &trig);
        let scale = psi.lambda_p.exp();
        applied
            .iter()
            .zip(&psi.values)
            .map(|(a, b)| (scale * a - b).abs())
            .fold(0.0f64, f64::max)
            / psi.max()
    } else {
        f64::NAN
    };
    Ok((
        psi,
        PsiDiagnostics {
            increments,
            mean_factors,
            sup_factors,
            lambda_from_sup,
            residual,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaCurve {
    /// `(p, Λ̂(p), stderr)`.
    pub rows: Vec<(f64, f64, f64)>,
    /// `(Λ̂(p₁) − Λ̂(p₀)) / (p₁ − p₀)` over the first two entries.
    pub secant_slope: f64,
    pub secant_stderr: f64,
    /// Second differences with propagated standard errors.
    pub second_differences: Vec<(f64, f64)>,
    pub warnings: Vec<String>,
}

/// Λ̂ on a list of orders via power iteration.
pub fn lambda_curve(p_list: &[f64], base: &PsiParams, ensemble: &MapEnsemble) -> Result<LambdaCurve, StatsError> {
    let mut rows = Vec::with_capacity(p_list.len());
    let mut warnings = Vec::new();
    for &p in p_list {
        if !(0.0..=0.5).contains(&p) {
            return Err(StatsError::Order(p));
        }
        let params = PsiParams { p, ..*base };
        let (psi, diag) = psi_power_iteration(&params, ensemble)?;
        if let Some(&last) = diag.increments.last() {
            if last >= 0.05 {
                warnings.push(format!("power iteration at p={p}: final increment {last:.4} ≥ 0.05"));
            }
        }
        rows.push((p, psi.lambda_p, psi.lambda_stderr));
    }
    let (secant_slope, secant_stderr) = if rows.len() >= 2 {
        let dp = rows[1].0 - rows[0].0;
        (
            (rows[1].1 - rows[0].1) / dp,
            (rows[0].2.powi(2) + rows[1].2.powi(2)).sqrt() / dp,
        )
    } else {
        (f64::NAN, f64::NAN)
    };
    let second_differences = rows
        .windows(3)
        .map(|w| {
            let (h1, h2) = (w[1].0 - w[0].0, w[2].0 - w[1].0);
            // divided second difference scaled to unit spacing
            let c0 = 2.0 / (h1 * (h1 + h2));
            let c1 = -2.0 / (h1 * h2);
            let c2 = 2.0 / (h2 * (h1 + h2));
            let d = c0 * w[0].1 + c1 * w[1].1 + c2 * w[2].1;
            let se = ((c0 * w[0].2).powi(2) + (c1 * w[1].2).powi(2) + (c2 * w[2].2).powi(2)).sqrt();
            (d, se)
        })
        .collect();
    Ok(LambdaCurve {
        rows,
        secant_slope,
        secant_stderr,
        second_differences,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus_maps::{CotangentFrame, ShearMapStep};

    #[test]
    fn identity_ensemble_is_exactly_neutral() {
        let e = MapEnsemble::Identity;
        let l = top_lyapunov_for(&e, 50, 20, 1);
        assert_eq!(l.value, 0.0);
        assert_eq!(l.stderr, 0.0);
        for p in [0.0, 0.1, 0.7] {
            let m = moment_lyapunov_direct_for(&e, p, 30, 20, 1).unwrap();
            assert_eq!(m.lambda, 0.0);
            assert!(m.lambda.is_sign_positive());
        }
        let params = PsiParams {
            nx: 8,
            ntheta: 8,
            maps_per_iter: 4,
            n_iters: 4,
            residual_maps: 4,
            p: 0.3,
        };
        let (psi, diag) = psi_power_iteration(&params, &e).unwrap();
        assert!(psi.values.iter().all(|&v| v == 1.0));
        assert_eq!(psi.lambda_p, 0.0);
        assert_eq!(diag.residual, 0.0);
    }

    #[test]
    fn zero_order_is_exact() {
        let m = moment_lyapunov_direct(0.0, 20, 50, 3).unwrap();
        assert_eq!(m.lambda, 0.0);
        let params = PsiParams {
            nx: 8,
            ntheta: 8,
            maps_per_iter: 8,
            n_iters: 4,
            residual_maps: 0,
            p: 0.0,
        };
        let (psi, _) = psi_power_iteration(&params, &MapEnsemble::Pierrehumbert { seed: 2 }).unwrap();
        assert!(psi.values.iter().all(|&v| v == 1.0));
        assert_eq!(psi.lambda_p, 0.0);
    }

    #[test]
    fn fixed_hyperbolic_step_matches_matrix_product_oracle() {
        let step = ShearMapStep::new(2.0, 2.0, 0.0, 0.0);
        let (n, samples) = (400, 200);
        let est = top_lyapunov_for(&MapEnsemble::Fixed(step), n, samples, 17);
        // independent oracle: renormalized products of Dφ^{-T} along the same
        // orbits, growth of the Frobenius norm
        let mut per = Vec::new();
        for i in 0..samples as u64 {
            let (mut x, _) = start(17, i);
            let mut m = CotangentFrame::IDENTITY;
            let mut log_norm = 0.0;
            for _ in 0..n {
                m = step.inv_transpose_jacobian(x).mul(&m);
                x = step.apply(x);
                let fro = m.m.iter().flat_map(|r| r.iter()).map(|a| a * a).sum::<f64>().sqrt();
                log_norm += fro.ln();
                for r in m.m.iter_mut() {
                    for a in r.iter_mut() {
                        *a /= fro;
                    }
                }
            }
            per.push(log_norm / n as f64);
        }
        let (oracle, oracle_se) = mean_stderr(&per);
        let combined = (est.stderr.powi(2) + oracle_se.powi(2)).sqrt();
        assert!(est.value > 0.0);
        assert!((est.value - oracle).abs() < 3.0 * combined + 2.0 / n as f64, "{est:?} vs {oracle} ± {oracle_se}");
    }

    #[test]
    fn moment_estimator_weights() {
        let sums = vec![1.0, 2.0, 3.0];
        let m = moment_from_sums(0.5, 1, &sums);
        let want = -((-0.5f64).exp() + (-1.0f64).exp() + (-1.5f64).exp()).ln() + 3f64.ln();
        assert!((m.lambda - want).abs() < 1e-14);
        assert!(m.ess_fraction > 0.0 && m.ess_fraction <= 1.0);
        let heavy: Vec<f64> = (0..1000).map(|i| if i == 0 { -1e4 } else { 0.0 }).collect();
        assert!(moment_from_sums(1.0, 1, &heavy).warning.is_some());
    }

    #[test]
    fn interpolation_reproduces_nodes_and_is_periodic() {
        let g = PsiGrid::from_fn(8, 8, |x, y, t| 2.0 + x.sin() * y.cos() + 0.5 * t.sin());
        let h = TWO_PI / 8.0;
        assert!((g.interp(3.0 * h, 5.0 * h, 2.0 * h) - g.at(3, 5, 2)).abs() < 1e-12);
        let a = g.interp(0.3, 1.2, 0.4);
        assert!((g.interp(0.3 + TWO_PI, 1.2 - TWO_PI, 0.4 + TWO_PI) - a).abs() < 1e-12);
        let c = PsiGrid::constant(8, 8, 0.7);
        assert_eq!(c.interp(1.234, 5.678, -2.5), 0.7);
    }

    #[test]
    fn power_iteration_positive_and_contracting() {
        let params = PsiParams {
            nx: 16,
            ntheta: 32,
            maps_per_iter: 32,
            n_iters: 12,
            residual_maps: 64,
            p: 0.1,
        };
        let (psi, diag) = psi_power_iteration(&params, &MapEnsemble::Pierrehumbert { seed: 5 }).unwrap();
        assert!(psi.min() > 0.0);
        assert_eq!(psi.max(), 1.0);
        assert!(diag.increments.last().unwrap() < &diag.increments[0]);
        assert!(psi.lambda_p > 0.0);
    }

    #[test]
    fn parameter_validation() {
        let mut p = PsiParams::new(1.5);
        assert_eq!(psi_power_iteration(&p, &MapEnsemble::Identity).unwrap_err(), StatsError::Order(1.5));
        p.p = 0.1;
        p.nx = 4;
        assert!(matches!(psi_power_iteration(&p, &MapEnsemble::Identity), Err(StatsError::Grid { .. })));
        assert!(moment_lyapunov_direct(-0.1, 10, 10, 1).is_err());
    }
}
