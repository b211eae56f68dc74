//! Dyadic-shell symbols built from a sampled eigenfunction, their
//! Kohn–Nirenberg quantization on the flat torus, quadratic forms, seminorm
//! estimates and the conjugation (Egorov) decomposition.

use rand::Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::cocycle_stats::PsiGrid;
use crate::rng::{label, stream};
use crate::spectral_fields::{fft2, grid_point, index_of, wavenumber, ScalarField, SparseInitialData};
use crate::torus_maps::{periodic_delta, TorusDiffeo, TorusPoint, TWO_PI};

/// Quintic smoothstep on `[0, 1]`.
#[inline]
fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (t * (6.0 * t - 15.0) + 10.0)
}

/// 1 on `[0, 1]`, quintic fall on `[1, 2]`, 0 beyond.
#[inline]
fn ramp(z: f64) -> f64 {
    1.0 - smoothstep(z - 1.0)
}

/// Smooth dyadic partition of unity `χ_1, χ_2, χ_4, …, χ_{N_max}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DyadicPartition {
    pub n_max: u64,
}

pub fn build_partition(n_max: u64) -> DyadicPartition {
    assert!(n_max >= 4 && n_max.is_power_of_two(), "N_max must be a power of two ≥ 4");
    DyadicPartition { n_max }
}

impl DyadicPartition {
    pub fn shells(&self) -> Vec<u64> {
        let mut v = vec![1];
        while *v.last().unwrap() < self.n_max {
            v.push(v.last().unwrap() * 2);
        }
        v
    }

    /// `χ_N(z)`; zero for `N` outside the partition.
    #[inline]
    pub fn chi(&self, n: u64, z: f64) -> f64 {
        if n == 1 {
            ramp(z)
        } else if n.is_power_of_two() && n <= self.n_max {
            let nf = n as f64;
            ramp(z / nf) - ramp(2.0 * z / nf)
        } else {
            0.0
        }
    }
}

/// Normalized 1D weights of the nodes of a periodic grid around `t`.
fn axis_weights(t: f64, n: usize, radius: f64, out: &mut Vec<(usize, f64)>) {
    out.clear();
    let d = TWO_PI / n as f64;
    let u = t / d;
    if radius > d {
        let reach = (radius / d).ceil() as i64;
        let centre = u.round() as i64;
        for off in -reach..=reach {
            let node = centre + off;
            let dist = periodic_delta(t - node as f64 * d).abs();
            if dist < radius {
                let q = 1.0 - (dist / radius).powi(2);
                let w = q * q * q * q;
                out.push((node.rem_euclid(n as i64) as usize, w));
            }
        }
        let total: f64 = out.iter().map(|e| e.1).sum();
        for e in out.iter_mut() {
            e.1 /= total;
        }
    } else {
        // below resolution: hat of one spacing, i.e. linear interpolation
        let lo = u.floor();
        let f = u - lo;
        let i = (lo as i64).rem_euclid(n as i64) as usize;
        if f == 0.0 {
            out.push((i, 1.0));
        } else {
            out.push((i, 1.0 - f));
            out.push(((i + 1) % n, f));
        }
    }
}

/// Continuous smoothing of a `PsiGrid` by a tensor-product polynomial bump of
/// radius `h`, normalized discretely to unit mass on each axis.
#[derive(Clone, Debug)]
pub struct MollifiedPsi {
    psi: PsiGrid,
    h: f64,
    /// True when `h` does not exceed the grid spacing on any axis, so node
    /// values are returned unchanged.
    pub below_resolution: bool,
}

impl MollifiedPsi {
    pub fn new(psi: &PsiGrid, h: f64) -> Self {
        assert!(h > 0.0 && h <= 1.0, "mollification scale must lie in (0, 1]");
        let dx = TWO_PI / psi.nx as f64;
        let dt = TWO_PI / psi.ntheta as f64;
        MollifiedPsi {
            psi: psi.clone(),
            h,
            below_resolution: h <= dx.min(dt),
        }
    }

    pub fn scale(&self) -> f64 {
        self.h
    }

    pub fn eval(&self, x: f64, y: f64, theta: f64) -> f64 {
        let mut wx = Vec::new();
        let mut wy = Vec::new();
        let mut wt = Vec::new();
        axis_weights(x, self.psi.nx, self.h, &mut wx);
        axis_weights(y, self.psi.nx, self.h, &mut wy);
        axis_weights(theta, self.psi.ntheta, self.h, &mut wt);
        let mut acc = 0.0;
        for &(a, wa) in &wx {
            for &(b, wb) in &wy {
                let base = (a * self.psi.nx + b) * self.psi.ntheta;
                let inner: f64 = wt.iter().map(|&(c, wc)| wc * self.psi.values[base + c]).sum();
                acc += wa * wb * inner;
            }
        }
        acc
    }

    /// x-smoothed slices `Φ_c(x_ij)` on an `m × m` grid, laid out as
    /// `[c][i * m + j]`.
    fn slices_on_grid(&self, m: usize) -> Vec<Vec<f64>> {
        let nx = self.psi.nx;
        let nt = self.psi.ntheta;
        let hm = TWO_PI / m as f64;
        let weights: Vec<Vec<(usize, f64)>> = (0..m)
            .map(|i| {
                let mut w = Vec::new();
                axis_weights(i as f64 * hm, nx, self.h, &mut w);
                w
            })
            .collect();
        // contract y first: t[(a * m + j) * nt + c]
        let mut t = vec![0.0; nx * m * nt];
        for a in 0..nx {
            for (j, wj) in weights.iter().enumerate() {
                let dst = &mut t[(a * m + j) * nt..(a * m + j + 1) * nt];
                for &(b, wb) in wj {
                    let src = &self.psi.values[(a * nx + b) * nt..(a * nx + b + 1) * nt];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wb * s;
                    }
                }
            }
        }
        let mut out = vec![vec![0.0; m * m]; nt];
        for (i, wi) in weights.iter().enumerate() {
            for j in 0..m {
                let mut acc = vec![0.0; nt];
                for &(a, wa) in wi {
                    let src = &t[(a * m + j) * nt..(a * m + j + 1) * nt];
                    for (d, s) in acc.iter_mut().zip(src) {
                        *d += wa * s;
                    }
                }
                for (c, v) in acc.into_iter().enumerate() {
                    out[c][i * m + j] = v;
                }
            }
        }
        out
    }
}

/// Node values of the mollified grid; flags `h` below grid resolution.
pub fn mollify(psi: &PsiGrid, h: f64) -> (PsiGrid, bool) {
    let m = MollifiedPsi::new(psi, h);
    if m.below_resolution {
        return (psi.clone(), true);
    }
    let dx = TWO_PI / psi.nx as f64;
    let dt = TWO_PI / psi.ntheta as f64;
    let mut out = psi.clone();
    for ix in 0..psi.nx {
        for iy in 0..psi.nx {
            for it in 0..psi.ntheta {
                out.values[(ix * psi.nx + iy) * psi.ntheta + it] =
                    m.eval(ix as f64 * dx, iy as f64 * dx, it as f64 * dt);
            }
        }
    }
    (out, false)
}

/// A real symbol `a(x, ξ)` on `T² × ℝ²`.
pub trait Symbol: Sync {
    fn eval(&self, x: TorusPoint, xi: [f64; 2]) -> f64;

    /// `Σ_k a(x,k) f̂(k) e^{ik·x}` on the grid of `f`, before discarding the
    /// imaginary part. Default: per-mode synthesis, `O(N⁴)`.
    fn quantize_complex(&self, f: &ScalarField) -> Vec<Complex64> {
        let n = f.n();
        let ks: Vec<([f64; 2], Complex64)> = (0..n * n)
            .filter(|&idx| f.coeffs()[idx] != Complex64::new(0.0, 0.0))
            .flat_map(|idx| {
                let reps = representatives(idx, n);
                let c = f.coeffs()[idx] / reps.len() as f64;
                reps.into_iter().map(move |k| (k, c))
            })
            .collect();
        (0..n * n)
            .into_par_iter()
            .map(|pt| {
                let x = grid_point(pt / n, pt % n, n);
                ks.iter()
                    .map(|&(k, c)| {
                        let ph = Complex64::from_polar(1.0, k[0] * x.x + k[1] * x.y);
                        c * ph * self.eval(x, k)
                    })
                    .sum()
            })
            .collect()
    }
}

/// Wavevectors represented by grid index `idx`. A Nyquist component stands
/// for both `±N/2`; the symbol is averaged over them so that symbols even in
/// ξ give real operators.
fn representatives(idx: usize, n: usize) -> Vec<[f64; 2]> {
    let axis = |i: usize| {
        let k = wavenumber(i, n);
        if 2 * k.unsigned_abs() as usize == n {
            vec![k as f64, -k as f64]
        } else {
            vec![k as f64]
        }
    };
    let (a, b) = (axis(idx / n), axis(idx % n));
    a.iter().flat_map(|&k1| b.iter().map(move |&k2| [k1, k2])).collect()
}

/// `a(x, ξ) = m(ξ)`: a Fourier multiplier.
pub struct Multiplier<F: Fn([f64; 2]) -> f64 + Sync>(pub F);

impl<F: Fn([f64; 2]) -> f64 + Sync> Symbol for Multiplier<F> {
    fn eval(&self, _x: TorusPoint, xi: [f64; 2]) -> f64 {
        (self.0)(xi)
    }

    fn quantize_complex(&self, f: &ScalarField) -> Vec<Complex64> {
        let n = f.n();
        let mut buf: Vec<Complex64> = f
            .coeffs()
            .iter()
            .enumerate()
            .map(|(idx, c)| {
                let reps = representatives(idx, n);
                c * reps.iter().map(|&k| (self.0)(k)).sum::<f64>() / reps.len() as f64
            })
            .collect();
        fft2(&mut buf, n, true);
        buf
    }
}

/// Any `a(x, ξ)` given as a closure.
pub struct FnSymbol<F: Fn(TorusPoint, [f64; 2]) -> f64 + Sync>(pub F);

impl<F: Fn(TorusPoint, [f64; 2]) -> f64 + Sync> Symbol for FnSymbol<F> {
    fn eval(&self, x: TorusPoint, xi: [f64; 2]) -> f64 {
        (self.0)(x, xi)
    }
}

/// `(1 + |ξ|²)^{s/2}`.
pub fn bessel_multiplier(s: f64) -> Multiplier<impl Fn([f64; 2]) -> f64 + Sync> {
    Multiplier(move |k: [f64; 2]| (1.0 + k[0] * k[0] + k[1] * k[1]).powf(0.5 * s))
}

/// `Op(a) f` on the grid of `f` (real part).
pub fn quantize_apply(a: &dyn Symbol, f: &ScalarField) -> ScalarField {
    let v = a.quantize_complex(f);
    ScalarField::from_values(f.n(), v.iter().map(|c| c.re).collect()).expect("grid already validated")
}

/// `⟨Op(a) f, f⟩` with normalized measure, and the discarded imaginary part.
pub fn quadratic_form_parts(a: &dyn Symbol, f: &ScalarField) -> (f64, f64) {
    let v = a.quantize_complex(f);
    let n2 = v.len() as f64;
    let acc: Complex64 = v.iter().zip(f.values()).map(|(c, &fv)| c * fv).sum();
    (acc.re / n2, acc.im / n2)
}

/// `⟨Op(a) f, f⟩`; panics if the imaginary part is not negligible, which
/// would indicate a symbol that is not even in ξ.
pub fn quadratic_form(a: &dyn Symbol, f: &ScalarField) -> f64 {
    let (re, im) = quadratic_form_parts(a, f);
    let scale = f.values().iter().map(|v| v * v).sum::<f64>() / f.values().len() as f64;
    assert!(im.abs() <= 1e-10 * (1.0 + scale), "quadratic form has imaginary part {im}");
    re
}

/// `a(x, ξ) = Σ_{N ≥ 2} χ_N(|ξ|) ψ^{N^{-ε}}(x, ξ/|ξ|) |ξ|^{-p}`.
#[derive(Clone, Debug)]
pub struct SymbolModel {
    pub p: f64,
    pub eps: f64,
    pub partition: DyadicPartition,
    /// `(N, ψ^{h_N})` for `N = 2, 4, …, N_max`.
    pub bank: Vec<(u64, MollifiedPsi)>,
    pub psi_min: f64,
    pub psi_max: f64,
    nx: usize,
}

/// `½(ψ(x,θ) + ψ(x,θ+π))`. The exact eigenfunction is invariant under
/// `v → −v`; averaging removes the Monte Carlo asymmetry so that the symbol is
/// even in ξ and `Op(a)` maps real fields to real fields.
fn even_in_angle(psi: &PsiGrid) -> PsiGrid {
    assert!(psi.ntheta % 2 == 0, "angular grid size must be even");
    let half = psi.ntheta / 2;
    let mut out = psi.clone();
    for (dst, src) in out.values.chunks_mut(psi.ntheta).zip(psi.values.chunks(psi.ntheta)) {
        for (t, d) in dst.iter_mut().enumerate() {
            *d = 0.5 * (src[t] + src[(t + half) % psi.ntheta]);
        }
    }
    out
}

/// Smallest power of two ≥ `2·max|k|` on an `m` grid.
pub fn n_max_for_grid(m: usize) -> u64 {
    let kmax = (m as f64 / 2.0) * std::f64::consts::SQRT_2;
    ((2.0 * kmax).ceil() as u64).next_power_of_two().max(4)
}

impl SymbolModel {
    pub fn build(psi: &PsiGrid, p: f64, eps: f64, n_max: u64) -> Self {
        assert!(p > 0.0, "symbol order must be positive");
        assert!(eps > 0.0 && eps < 0.25, "ε must lie in (0, 1/4)");
        let psi = &even_in_angle(psi);
        let partition = build_partition(n_max);
        let bank = partition
            .shells()
            .into_iter()
            .filter(|&n| n >= 2)
            .map(|n| (n, MollifiedPsi::new(psi, (n as f64).powf(-eps))))
            .collect();
        SymbolModel {
            p,
            eps,
            partition,
            bank,
            psi_min: psi.min(),
            psi_max: psi.max(),
            nx: psi.nx,
        }
    }

    /// Grid spacing of the underlying eigenfunction grid.
    pub fn x_spacing(&self) -> f64 {
        TWO_PI / self.nx as f64
    }

    fn apply_fast(&self, f: &ScalarField) -> Vec<Complex64> {
        let m = f.n();
        let nt = self.bank.first().map(|b| b.1.psi.ntheta).unwrap_or(1);
        let mut out = vec![Complex64::new(0.0, 0.0); m * m];
        let modes: Vec<(usize, f64, f64, Complex64)> = (0..m * m)
            .filter(|&idx| idx != 0 && f.coeffs()[idx] != Complex64::new(0.0, 0.0))
            .flat_map(|idx| {
                let reps = representatives(idx, m);
                let c = f.coeffs()[idx] / reps.len() as f64;
                reps.into_iter().map(move |k| (idx, k[0].hypot(k[1]), k[1].atan2(k[0]), c))
            })
            .collect();
        let mut wt = Vec::new();
        for (n, moll) in &self.bank {
            let mut lists: Vec<Vec<(usize, Complex64)>> = vec![Vec::new(); nt];
            for &(idx, r, theta, c) in &modes {
                let chi = self.partition.chi(*n, r);
                if chi == 0.0 {
                    continue;
                }
                let amp = c * (chi * r.powf(-self.p));
                axis_weights(theta, nt, moll.h, &mut wt);
                for &(cc, w) in &wt {
                    lists[cc].push((idx, amp * w));
                }
            }
            if lists.iter().all(|l| l.is_empty()) {
                continue;
            }
            let slices = moll.slices_on_grid(m);
            let parts: Vec<Vec<Complex64>> = lists
                .par_iter()
                .enumerate()
                .filter(|(_, l)| !l.is_empty())
                .map(|(cc, l)| {
                    let mut buf = vec![Complex64::new(0.0, 0.0); m * m];
                    for &(idx, v) in l {
                        buf[idx] += v;
                    }
                    fft2(&mut buf, m, true);
                    for (b, s) in buf.iter_mut().zip(&slices[cc]) {
                        *b *= *s;
                    }
                    buf
                })
                .collect();
            for part in parts {
                for (o, v) in out.iter_mut().zip(part) {
                    *o += v;
                }
            }
        }
        out
    }
}

impl Symbol for SymbolModel {
    fn eval(&self, x: TorusPoint, xi: [f64; 2]) -> f64 {
        symbol_eval(self, x, xi)
    }

    fn quantize_complex(&self, f: &ScalarField) -> Vec<Complex64> {
        self.apply_fast(f)
    }
}

/// Evaluate the shell-sum symbol at a real covector.
pub fn symbol_eval(s: &SymbolModel, x: TorusPoint, xi: [f64; 2]) -> f64 {
    let r = xi[0].hypot(xi[1]);
    if r == 0.0 {
        return 0.0;
    }
    let theta = xi[1].atan2(xi[0]);
    let mut acc = 0.0;
    for (n, moll) in &s.bank {
        let chi = s.partition.chi(*n, r);
        if chi != 0.0 {
            acc += chi * moll.eval(x.x, x.y, theta);
        }
    }
    acc * r.powf(-s.p)
}

/// Sampling setup for [`seminorm_estimate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeminormSampling {
    pub samples: usize,
    pub seed: u64,
    /// Largest sampled `|ξ|`; `|ξ|` is log-uniform on `[1, xi_max]`.
    pub xi_max: f64,
    pub x_step: f64,
    pub xi_step: f64,
}

impl SeminormSampling {
    pub fn new(samples: usize, seed: u64, x_step: f64) -> Self {
        SeminormSampling {
            samples,
            seed,
            xi_max: 256.0,
            x_step,
            xi_step: 0.5,
        }
    }
}

const STENCILS: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [-0.5, 0.0, 0.5], [1.0, -2.0, 1.0]];

/// Finite-difference estimate of
/// `sup |∂_x^α ∂_ξ^β a| (1+|ξ|²)^{(-m + ρ|β| - (1-ρ)|α|)/2}` over
/// `|α|, |β| ≤ k_order`.
pub fn seminorm_estimate(a: &dyn Symbol, k_order: usize, m: f64, rho: f64, cfg: &SeminormSampling) -> f64 {
    assert!(k_order <= 2, "seminorm order is capped at 2");
    let multi: Vec<[usize; 2]> = (0..=k_order)
        .flat_map(|i| (0..=k_order - i).map(move |j| [i, j]))
        .collect();
    let hx = cfg.x_step;
    let hxi = cfg.xi_step;
    let per_sample: Vec<f64> = (0..cfg.samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(cfg.seed, label::SEMINORM, i, 0);
            let x = TorusPoint::uniform(&mut rng);
            let r = cfg.xi_max.powf(rng.gen::<f64>());
            let ang = rng.gen_range(0.0..TWO_PI);
            let xi = [r * ang.cos(), r * ang.sin()];
            // values on the 3⁴ stencil
            let mut vals = [0.0; 81];
            for (s, v) in vals.iter_mut().enumerate() {
                let o = [(s / 27) as f64 - 1.0, ((s / 9) % 3) as f64 - 1.0, ((s / 3) % 3) as f64 - 1.0, (s % 3) as f64 - 1.0];
                let px = TorusPoint {
                    x: x.x + o[0] * hx,
                    y: x.y + o[1] * hx,
                };
                *v = a.eval(px, [xi[0] + o[2] * hxi, xi[1] + o[3] * hxi]);
            }
            let weight_base = 1.0 + r * r;
            let mut best = 0.0f64;
            for al in &multi {
                for be in &multi {
                    let st = [STENCILS[al[0]], STENCILS[al[1]], STENCILS[be[0]], STENCILS[be[1]]];
                    let mut d = 0.0;
                    for (s, v) in vals.iter().enumerate() {
                        let w = st[0][s / 27] * st[1][(s / 9) % 3] * st[2][(s / 3) % 3] * st[3][s % 3];
                        if w != 0.0 {
                            d += w * v;
                        }
                    }
                    let na = al[0] + al[1];
                    let nb = be[0] + be[1];
                    d /= hx.powi(na as i32) * hxi.powi(nb as i32);
                    let expo = (-m + rho * nb as f64 - (1.0 - rho) * na as f64) / 2.0;
                    best = best.max(d.abs() * weight_base.powf(expo));
                }
            }
            best
        })
        .collect();
    per_sample.into_iter().fold(0.0, f64::max)
}

/// Principal part and remainder of `Op(a)` conjugated by a diffeomorphism.
#[derive(Clone, Debug)]
pub struct EgorovParts {
    pub main: ScalarField,
    pub remainder: ScalarField,
}

/// Lifted symbol `ã(x, k) = a(φ(x), Dφ(x)^{-T} k)`.
fn lifted(a: &dyn Symbol, map: &dyn TorusDiffeo, x: TorusPoint, k: [f64; 2]) -> f64 {
    let kk = map.inv_transpose_jacobian(x).apply(k);
    a.eval(map.apply(x), kk)
}

/// `main = Op(ã) f` and `remainder = [Op(a)(f∘φ⁻¹)]∘φ − main` on an `n` grid.
/// `f∘φ⁻¹` is sampled exactly on an `m` grid and its trigonometric
/// interpolant is evaluated at `φ(x)`.
pub fn egorov_decompose(a: &dyn Symbol, map: &dyn TorusDiffeo, f: &SparseInitialData, n: usize, m: usize) -> EgorovParts {
    let coeffs = f.coefficients();
    let main_vals: Vec<f64> = (0..n * n)
        .into_par_iter()
        .map(|pt| {
            let x = grid_point(pt / n, pt % n, n);
            coeffs
                .iter()
                .map(|&(k, c)| {
                    let kf = [k[0] as f64, k[1] as f64];
                    let ph = Complex64::from_polar(1.0, kf[0] * x.x + kf[1] * x.y);
                    (c * ph * lifted(a, map, x, kf)).re
                })
                .sum()
        })
        .collect();
    let g_vals: Vec<f64> = (0..m * m)
        .into_par_iter()
        .map(|pt| crate::spectral_fields::synthesize(f, map.apply_inverse(grid_point(pt / m, pt % m, m))))
        .collect();
    let g = ScalarField::from_values(m, g_vals).expect("valid grid");
    let gmodes: Vec<([f64; 2], Complex64)> = (0..m * m)
        .filter_map(|idx| {
            let c = g.coeffs()[idx];
            (c.norm() > 0.0).then(|| ([wavenumber(idx / m, m) as f64, wavenumber(idx % m, m) as f64], c))
        })
        .collect();
    let conj_vals: Vec<f64> = (0..n * n)
        .into_par_iter()
        .map(|pt| {
            let y = map.apply(grid_point(pt / n, pt % n, n));
            gmodes
                .iter()
                .map(|&(q, c)| (c * Complex64::from_polar(1.0, q[0] * y.x + q[1] * y.y) * a.eval(y, q)).re)
                .sum()
        })
        .collect();
    let main = ScalarField::from_values(n, main_vals).expect("valid grid");
    let conj = ScalarField::from_values(n, conj_vals).expect("valid grid");
    let remainder = conj.combine(1.0, &main, -1.0);
    EgorovParts { main, remainder }
}

/// `‖remainder‖_{L²} / ‖main‖_{L²}` for a Fourier multiplier, computed in the
/// image frame where both terms are exact on an `m` grid (volume
/// preservation carries the norms over).
pub fn egorov_remainder_ratio(
    mult: &(dyn Fn([f64; 2]) -> f64 + Sync),
    map: &dyn TorusDiffeo,
    f: &SparseInitialData,
    m: usize,
) -> f64 {
    let g_vals: Vec<f64> = (0..m * m)
        .into_par_iter()
        .map(|pt| crate::spectral_fields::synthesize(f, map.apply_inverse(grid_point(pt / m, pt % m, m))))
        .collect();
    let g = ScalarField::from_values(m, g_vals).expect("valid grid");
    let mut buf: Vec<Complex64> = g
        .coeffs()
        .iter()
        .enumerate()
        .map(|(idx, c)| c * mult([wavenumber(idx / m, m) as f64, wavenumber(idx % m, m) as f64]))
        .collect();
    fft2(&mut buf, m, true);
    let coeffs = f.coefficients();
    let terms: Vec<(f64, f64)> = (0..m * m)
        .into_par_iter()
        .map(|pt| {
            let y = grid_point(pt / m, pt % m, m);
            let z = map.apply_inverse(y);
            let dt = map.inv_transpose_jacobian(z);
            let main: f64 = coeffs
                .iter()
                .map(|&(k, c)| {
                    let kf = [k[0] as f64, k[1] as f64];
                    let ph = Complex64::from_polar(1.0, kf[0] * z.x + kf[1] * z.y);
                    (c * ph * mult(dt.apply(kf))).re
                })
                .sum();
            let r = buf[pt].re - main;
            (r * r, main * main)
        })
        .collect();
    // fixed-order sum keeps the result independent of the worker count
    let (num, den) = terms.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    (num / den).sqrt()
}

/// Coefficient of `f` at a signed wavevector, for tests and dumps.
pub fn coeff_at(f: &ScalarField, k: [i64; 2]) -> Complex64 {
    let n = f.n();
    f.coeffs()[index_of(k[0], n) * n + index_of(k[1], n)]
}
