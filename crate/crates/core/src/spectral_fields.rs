//! Real scalar fields on an N×N torus grid with a matching DFT representation,
//! Sobolev norms of arbitrary order, the exact transfer operator and two
//! grid-free Monte Carlo estimators of negative Sobolev norms.

use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::torus_maps::{MapSequence, TorusDiffeo, TorusPoint, TWO_PI};

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("grid size {0} is not a power of two ≥ 2")]
    BadGrid(usize),
    #[error("kernel order s = {0} must exceed 1")]
    KernelOrder(f64),
    #[error("length {got} does not match N² = {want}")]
    Length { got: usize, want: usize },
}

fn planner() -> &'static Mutex<FftPlanner<f64>> {
    static P: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();
    P.get_or_init(|| Mutex::new(FftPlanner::new()))
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut p = planner().lock().expect("fft planner poisoned");
    if inverse {
        p.plan_fft_inverse(n)
    } else {
        p.plan_fft_forward(n)
    }
}

fn transpose(buf: &mut [Complex64], n: usize) {
    for i in 0..n {
        for j in i + 1..n {
            buf.swap(i * n + j, j * n + i);
        }
    }
}

/// Unnormalized 2D DFT in place, row-major `buf[i * n + j]`.
pub fn fft2(buf: &mut [Complex64], n: usize, inverse: bool) {
    let f = plan(n, inverse);
    f.process(buf);
    transpose(buf, n);
    f.process(buf);
    transpose(buf, n);
}

/// Signed wavenumber of DFT index `idx` on an `n` grid, in `[-n/2, n/2)`.
#[inline]
pub fn wavenumber(idx: usize, n: usize) -> i64 {
    if idx < n / 2 {
        idx as i64
    } else {
        idx as i64 - n as i64
    }
}

/// DFT index of a signed wavenumber.
#[inline]
pub fn index_of(k: i64, n: usize) -> usize {
    k.rem_euclid(n as i64) as usize
}

/// Grid point `x_ij = (2πi/N, 2πj/N)`.
#[inline]
pub fn grid_point(i: usize, j: usize, n: usize) -> TorusPoint {
    let h = TWO_PI / n as f64;
    TorusPoint {
        x: i as f64 * h,
        y: j as f64 * h,
    }
}

fn check_grid(n: usize) -> Result<(), FieldError> {
    if n >= 2 && n.is_power_of_two() {
        Ok(())
    } else {
        Err(FieldError::BadGrid(n))
    }
}

/// Real field sampled on an N×N grid together with `f̂ = DFT / N²`.
#[derive(Clone, Debug)]
pub struct ScalarField {
    n: usize,
    values: Vec<f64>,
    coeffs: Vec<Complex64>,
}

impl ScalarField {
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self, FieldError> {
        check_grid(n)?;
        if values.len() != n * n {
            return Err(FieldError::Length {
                got: values.len(),
                want: n * n,
            });
        }
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft2(&mut buf, n, false);
        let norm = 1.0 / (n * n) as f64;
        for c in buf.iter_mut() {
            *c *= norm;
        }
        Ok(ScalarField {
            n,
            values,
            coeffs: buf,
        })
    }

    /// Build from coefficients; the imaginary part of the synthesis is
    /// dropped, so non-Hermitian input is projected to its real part.
    pub fn from_coeffs(n: usize, coeffs: Vec<Complex64>) -> Result<Self, FieldError> {
        check_grid(n)?;
        if coeffs.len() != n * n {
            return Err(FieldError::Length {
                got: coeffs.len(),
                want: n * n,
            });
        }
        let mut buf = coeffs;
        fft2(&mut buf, n, true);
        let values: Vec<f64> = buf.iter().map(|c| c.re).collect();
        ScalarField::from_values(n, values)
    }

    pub fn zeros(n: usize) -> Result<Self, FieldError> {
        ScalarField::from_values(n, vec![0.0; n * n])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// `f̂(k)` for a signed wavevector (aliased onto the grid).
    pub fn coeff(&self, k: [i64; 2]) -> Complex64 {
        self.coeffs[index_of(k[0], self.n) * self.n + index_of(k[1], self.n)]
    }

    /// Root mean square of the grid samples.
    pub fn l2_norm_grid(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() / self.values.len() as f64).sqrt()
    }

    /// Even-index subsample onto the N/2 grid.
    pub fn subsample(&self) -> Result<ScalarField, FieldError> {
        let m = self.n / 2;
        let mut v = Vec::with_capacity(m * m);
        for i in 0..m {
            for j in 0..m {
                v.push(self.values[(2 * i) * self.n + 2 * j]);
            }
        }
        ScalarField::from_values(m, v)
    }

    pub fn scaled(&self, a: f64) -> ScalarField {
        ScalarField {
            n: self.n,
            values: self.values.iter().map(|v| v * a).collect(),
            coeffs: self.coeffs.iter().map(|c| c * a).collect(),
        }
    }

    /// Linear combination `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &ScalarField, b: f64) -> ScalarField {
        assert_eq!(self.n, other.n);
        ScalarField {
            n: self.n,
            values: self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect(),
            coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(x, y)| x * a + y * b).collect(),
        }
    }

    /// Max over modes of `|f̂(k) − conj f̂(−k)|`.
    pub fn hermitian_defect(&self) -> f64 {
        let n = self.n;
        let mut m = 0.0f64;
        for a in 0..n {
            for b in 0..n {
                let c = self.coeffs[a * n + b];
                let d = self.coeffs[((n - a) % n) * n + (n - b) % n];
                m = m.max((c - d.conj()).norm());
            }
        }
        m
    }
}

/// `sqrt(Σ_k (1+|k|²)^s |f̂(k)|²)` over every represented mode.
pub fn sobolev_norm(f: &ScalarField, s: f64) -> f64 {
    let n = f.n;
    let mut acc = 0.0;
    for a in 0..n {
        let k1 = wavenumber(a, n) as f64;
        for b in 0..n {
            let k2 = wavenumber(b, n) as f64;
            let c = f.coeffs[a * n + b];
            let w = if s == 0.0 {
                1.0
            } else {
                (1.0 + k1 * k1 + k2 * k2).powf(s)
            };
            acc += w * c.norm_sqr();
        }
    }
    acc.sqrt()
}

/// Finitely many Fourier modes; each entry `(k, a)` contributes
/// `a e^{ik·x} + conj(a) e^{-ik·x}`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseInitialData {
    pub modes: Vec<([i64; 2], Complex64)>,
}

impl SparseInitialData {
    pub fn new(modes: Vec<([i64; 2], Complex64)>) -> Self {
        SparseInitialData { modes }
    }

    /// `cos(k·x)`.
    pub fn cosine(k: [i64; 2]) -> Self {
        SparseInitialData::new(vec![(k, Complex64::new(0.5, 0.0))])
    }

    /// `sin(k·x)`.
    pub fn sine(k: [i64; 2]) -> Self {
        SparseInitialData::new(vec![(k, Complex64::new(0.0, -0.5))])
    }

    /// Random data with `count` modes drawn from `1 ≤ |k|_∞ ≤ band` and
    /// standard complex Gaussian amplitudes.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, count: usize, band: i64) -> Self {
        let mut modes = Vec::with_capacity(count);
        while modes.len() < count {
            let k = [rng.gen_range(-band..=band), rng.gen_range(0..=band)];
            if k == [0, 0] {
                continue;
            }
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            modes.push((k, Complex64::new(re, im) * 0.5));
        }
        SparseInitialData::new(modes)
    }

    pub fn is_mean_zero(&self) -> bool {
        self.modes.iter().all(|(k, _)| *k != [0, 0])
    }

    pub fn mean_zero(&self) -> Self {
        SparseInitialData::new(self.modes.iter().copied().filter(|(k, _)| *k != [0, 0]).collect())
    }

    pub fn scaled(&self, a: f64) -> Self {
        SparseInitialData::new(self.modes.iter().map(|(k, c)| (*k, c * a)).collect())
    }

    /// Full coefficient list with conjugate partners merged.
    pub fn coefficients(&self) -> Vec<([i64; 2], Complex64)> {
        let mut out: Vec<([i64; 2], Complex64)> = Vec::new();
        let mut add = |k: [i64; 2], c: Complex64| {
            if let Some(e) = out.iter_mut().find(|(kk, _)| *kk == k) {
                e.1 += c;
            } else {
                out.push((k, c));
            }
        };
        for &(k, a) in &self.modes {
            add(k, a);
            add([-k[0], -k[1]], a.conj());
        }
        out
    }

    /// Largest `|k|_∞` present.
    pub fn band(&self) -> i64 {
        self.modes.iter().map(|(k, _)| k[0].abs().max(k[1].abs())).max().unwrap_or(0)
    }

    /// Exact sample grid on an N grid (no transfer).
    pub fn to_field(&self, n: usize) -> Result<ScalarField, FieldError> {
        pullback(self, &MapSequence::from_steps(vec![]), n)
    }

    /// Spectral `‖f‖_{H^s}` of the continuum function.
    pub fn sobolev_norm(&self, s: f64) -> f64 {
        self.coefficients()
            .iter()
            .map(|(k, c)| {
                let k2 = (k[0] * k[0] + k[1] * k[1]) as f64;
                (1.0 + k2).powf(s) * c.norm_sqr()
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Pointwise evaluation `Σ 2 Re(a e^{ik·p})`.
#[inline]
pub fn synthesize(data: &SparseInitialData, p: TorusPoint) -> f64 {
    let mut acc = 0.0;
    for &(k, a) in &data.modes {
        let (s, c) = (k[0] as f64 * p.x + k[1] as f64 * p.y).sin_cos();
        acc += 2.0 * (a.re * c - a.im * s);
    }
    acc
}

/// Samples of `f₀∘(φⁿ)⁻¹` on the N grid, computed exactly at pulled-back
/// points.
pub fn pullback(data: &SparseInitialData, seq: &MapSequence, n: usize) -> Result<ScalarField, FieldError> {
    check_grid(n)?;
    let values: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| synthesize(data, seq.apply_inverse(grid_point(i, j, n))))
        .collect();
    ScalarField::from_values(n, values)
}

/// `|‖P_{2N}‖_s − ‖P_N‖_s| / ‖P_{2N}‖_s` for the pullback `P`, or 0 when the
/// fine norm vanishes.
pub fn resolution_check(data: &SparseInitialData, seq: &MapSequence, s: f64, n: usize) -> Result<f64, FieldError> {
    let fine = pullback(data, seq, 2 * n)?;
    Ok(resolution_deviation(&fine, s))
}

/// Resolution deviation of a field against its own even subsample.
pub fn resolution_deviation(fine: &ScalarField, s: f64) -> f64 {
    let coarse = fine.subsample().expect("fine grid has a valid subsample");
    let a = sobolev_norm(fine, s);
    let b = sobolev_norm(&coarse, s);
    if a == 0.0 {
        0.0
    } else {
        (a - b).abs() / a
    }
}

/// `G_s(z) = Σ_{|k|_∞ ≤ K} (1+|k|²)^{-s} e^{ik·z}` evaluated exactly.
#[derive(Clone, Debug)]
pub struct KernelTable {
    s: f64,
    k_max: usize,
    /// `m(k1) m(k2) (1+|k|²)^{-s}` for `k1, k2 ≥ 0`, with `m(0)=1`, `m(k)=2`.
    folded: Vec<f64>,
}

impl KernelTable {
    pub fn new(s: f64, k_max: usize) -> Result<Self, FieldError> {
        if !(s > 1.0) {
            return Err(FieldError::KernelOrder(s));
        }
        let m = |k: usize| if k == 0 { 1.0 } else { 2.0 };
        let d = k_max + 1;
        let mut folded = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                folded[a * d + b] = m(a) * m(b) * (1.0 + (a * a + b * b) as f64).powf(-s);
            }
        }
        Ok(KernelTable { s, k_max, folded })
    }

    pub fn order(&self) -> f64 {
        self.s
    }

    pub fn truncation(&self) -> usize {
        self.k_max
    }

    /// `G_s(z)`.
    pub fn eval(&self, z1: f64, z2: f64) -> f64 {
        let d = self.k_max + 1;
        let mut c2 = Vec::with_capacity(d);
        cos_ladder(z2, d, &mut c2);
        let mut c1 = Vec::with_capacity(d);
        cos_ladder(z1, d, &mut c1);
        let mut acc = 0.0;
        for a in 0..d {
            let row = &self.folded[a * d..(a + 1) * d];
            let inner: f64 = row.iter().zip(&c2).map(|(w, c)| w * c).sum();
            acc += c1[a] * inner;
        }
        acc
    }

    /// `K_× = G_s − 1`: the mean-zero part.
    pub fn eval_mean_removed(&self, z1: f64, z2: f64) -> f64 {
        self.eval(z1, z2) - 1.0
    }
}

fn cos_ladder(z: f64, d: usize, out: &mut Vec<f64>) {
    out.clear();
    let c = z.cos();
    out.push(1.0);
    if d > 1 {
        out.push(c);
    }
    for k in 2..d {
        let v = 2.0 * c * out[k - 1] - out[k - 2];
        out.push(v);
    }
}

/// Truncation used by [`neg_norm_kernel_mc`].
pub const DEFAULT_KERNEL_TRUNCATION: usize = 16;

/// Mean and standard error of a slice.
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Monte Carlo estimate of `‖f₀∘(φⁿ)⁻¹‖²_{H^{-s}}` as
/// `E K_×(φⁿx − φⁿy) f₀(x) f₀(y)` over independent uniform pairs.
pub fn neg_norm_kernel_mc<R: Rng + ?Sized>(
    data: &SparseInitialData,
    seq: &MapSequence,
    s: f64,
    pairs: usize,
    rng: &mut R,
) -> Result<(f64, f64), FieldError> {
    let kernel = KernelTable::new(s, DEFAULT_KERNEL_TRUNCATION)?;
    Ok(kernel_mc_with(&kernel, data, seq, pairs, rng))
}

pub fn kernel_mc_with<R: Rng + ?Sized>(
    kernel: &KernelTable,
    data: &SparseInitialData,
    seq: &MapSequence,
    pairs: usize,
    rng: &mut R,
) -> (f64, f64) {
    if data.modes.is_empty() {
        return (0.0, 0.0);
    }
    let vals: Vec<f64> = (0..pairs)
        .map(|_| {
            let x = TorusPoint::uniform(rng);
            let y = TorusPoint::uniform(rng);
            let fx = synthesize(data, x);
            let fy = synthesize(data, y);
            let (px, py) = (seq.apply(x), seq.apply(y));
            kernel.eval_mean_removed(px.x - py.x, px.y - py.y) * fx * fy
        })
        .collect();
    mean_stderr(&vals)
}

/// One draw for the subordinated heat-kernel estimator: base point and
/// Gaussian displacement with variance `2t`, `t ~ Gamma(s, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct HeatProbe {
    pub base: TorusPoint,
    pub shift: [f64; 2],
}

impl HeatProbe {
    /// The base point and its two antithetic displaced copies.
    pub fn points(&self) -> [TorusPoint; 3] {
        let b = self.base;
        [
            b,
            TorusPoint::new(b.x + self.shift[0], b.y + self.shift[1]),
            TorusPoint::new(b.x - self.shift[0], b.y - self.shift[1]),
        ]
    }

    /// Single-probe estimate from the three field values.
    #[inline]
    pub fn combine(v: [f64; 3]) -> f64 {
        v[0] * 0.5 * (v[1] + v[2])
    }
}

pub fn heat_probes<R: Rng + ?Sized>(s: f64, count: usize, rng: &mut R) -> Vec<HeatProbe> {
    assert!(s > 0.0, "heat-kernel estimator needs s > 0");
    let gamma = Gamma::new(s, 1.0).expect("valid gamma shape");
    (0..count)
        .map(|_| {
            let base = TorusPoint::uniform(rng);
            let t: f64 = gamma.sample(rng);
            let sd = (2.0 * t).sqrt();
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            HeatProbe {
                base,
                shift: [sd * z1, sd * z2],
            }
        })
        .collect()
}

/// Grid-free unbiased estimate of `‖f₀∘(φⁿ)⁻¹‖²_{H^{-s}}` for any `s > 0`,
/// based on `(1+|k|²)^{-s} = E_{t∼Γ(s,1)} e^{-t|k|²}` and the heat semigroup.
pub fn neg_norm_heat_mc<R: Rng + ?Sized>(
    data: &SparseInitialData,
    seq: &MapSequence,
    s: f64,
    probes: usize,
    rng: &mut R,
) -> (f64, f64) {
    let vals: Vec<f64> = heat_probes(s, probes, rng)
        .iter()
        .map(|p| {
            let pts = p.points();
            HeatProbe::combine(pts.map(|q| synthesize(data, seq.apply_inverse(q))))
        })
        .collect();
    mean_stderr(&vals)
}

/// Pull a point back through a single diffeomorphism and evaluate.
pub fn eval_after_inverse<D: TorusDiffeo + ?Sized>(data: &SparseInitialData, map: &D, p: TorusPoint) -> f64 {
    synthesize(data, map.apply_inverse(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::torus_maps::ShearMapStep;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn synthesize_examples() {
        let cos = SparseInitialData::cosine([1, 0]);
        assert!((synthesize(&cos, TorusPoint::new(0.0, 0.0)) - 1.0).abs() < 1e-15);
        assert_eq!(synthesize(&SparseInitialData::default(), TorusPoint::new(1.0, 2.0)), 0.0);
    }

    #[test]
    fn synthesis_matches_inverse_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = SparseInitialData::random(&mut rng, 12, 7);
        let n = 32;
        let mut coeffs = vec![Complex64::new(0.0, 0.0); n * n];
        for (k, c) in data.coefficients() {
            coeffs[index_of(k[0], n) * n + index_of(k[1], n)] += c;
        }
        let via_dft = ScalarField::from_coeffs(n, coeffs).unwrap();
        let direct = data.to_field(n).unwrap();
        for (a, b) in via_dft.values().iter().zip(direct.values()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn sobolev_norm_of_sine() {
        let f = SparseInitialData::sine([1, 0]).to_field(16).unwrap();
        assert!((sobolev_norm(&f, -1.0) - 0.5).abs() < 1e-10);
        for s in [-2.5, -0.3, 0.0, 0.7, 2.0] {
            assert!((sobolev_norm(&f, s) - 2f64.powf(s - 1.0).sqrt()).abs() < 1e-12);
        }
        assert_eq!(sobolev_norm(&ScalarField::zeros(8).unwrap(), -1.0), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn parseval_and_monotonicity(seed in 0u64..1000, s1 in -3.0f64..0.0, ds in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 16;
            let values: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = ScalarField::from_values(n, values).unwrap();
            let l2 = f.l2_norm_grid();
            prop_assert!((sobolev_norm(&f, 0.0) - l2).abs() <= 1e-10 * l2);
            prop_assert!(sobolev_norm(&f, s1) <= sobolev_norm(&f, s1 + ds));
            prop_assert!(f.hermitian_defect() < 1e-12);
        }
    }

    #[test]
    fn grid_and_coefficients_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let values: Vec<f64> = (0..64 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = ScalarField::from_values(64, values.clone()).unwrap();
        let g = ScalarField::from_coeffs(64, f.coeffs().to_vec()).unwrap();
        for (a, b) in values.iter().zip(g.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pullback_trivial_cases() {
        let data = SparseInitialData::random(&mut ChaCha8Rng::seed_from_u64(2), 5, 4);
        let f0 = data.to_field(32).unwrap();
        let id = MapSequence::from_steps(vec![ShearMapStep::IDENTITY; 10]);
        let f = pullback(&data, &id, 32).unwrap();
        assert_eq!(f0.values(), f.values());
        assert_eq!(resolution_check(&data, &id, -0.25, 16).unwrap(), 0.0);
        assert!(resolution_check(&data, &MapSequence::from_steps(vec![]), -0.25, 16).unwrap() < 1e-14);
    }

    #[test]
    fn pullback_conserves_l2_and_mean() {
        let data = SparseInitialData::cosine([1, 0]);
        let seq = MapSequence::sample(5, 0, 3);
        let n = 256;
        let f = pullback(&data, &seq, n).unwrap();
        let dev = resolution_check(&data, &seq, 0.0, n / 2).unwrap();
        assert!(dev < 0.05);
        assert!((f.l2_norm_grid() - data.sobolev_norm(0.0)).abs() < 0.05 + dev);
        assert!(f.coeff([0, 0]).norm() < 0.02);
    }

    #[test]
    fn pullback_order_is_last_step_first() {
        let seq = MapSequence::sample(1, 2, 2);
        let data = SparseInitialData::cosine([2, 1]);
        let f = pullback(&data, &seq, 8).unwrap();
        let p = grid_point(3, 5, 8);
        let q = seq.steps[0].apply_inverse(seq.steps[1].apply_inverse(p));
        assert!((f.value(3, 5) - synthesize(&data, q)).abs() < 1e-12);
    }

    #[test]
    fn kernel_examples() {
        let g = KernelTable::new(2.5, 1).unwrap();
        let want = 1.0 + 4.0 * 2f64.powf(-2.5) + 4.0 * 3f64.powf(-2.5);
        assert!((g.eval(0.0, 0.0) - want).abs() < 1e-12);
        assert!((g.eval(0.0, 0.0) - 1.9637).abs() < 1e-3);
        assert!(KernelTable::new(1.0, 4).is_err());
        let g = KernelTable::new(2.5, 8).unwrap();
        for (a, b) in [(0.3, 1.1), (2.0, -0.7), (5.9, 3.3)] {
            assert!((g.eval(a, b) - g.eval(-a, -b)).abs() < 1e-12);
        }
        // mean of K_× over a grid finer than the kernel band is its k=0 coefficient
        let m = 32;
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..m {
                let p = grid_point(i, j, m);
                acc += g.eval_mean_removed(p.x, p.y);
            }
        }
        assert!((acc / (m * m) as f64).abs() < 1e-12);
    }

    #[test]
    fn kernel_matches_direct_sum() {
        let g = KernelTable::new(1.7, 3).unwrap();
        let (z1, z2) = (0.8, 2.9);
        let mut want = 0.0;
        for a in -3i64..=3 {
            for b in -3i64..=3 {
                want += (1.0 + (a * a + b * b) as f64).powf(-1.7) * ((a as f64) * z1 + (b as f64) * z2).cos();
            }
        }
        assert!((g.eval(z1, z2) - want).abs() < 1e-12);
    }

    #[test]
    fn kernel_mc_at_time_zero() {
        let data = SparseInitialData::cosine([1, 0]);
        let empty = MapSequence::from_steps(vec![]);
        let (est, se) = neg_norm_kernel_mc(&data, &empty, 2.5, 20_000, &mut stream(1, 5, 0, 0)).unwrap();
        let want = data.sobolev_norm(-2.5).powi(2);
        assert!((est - want).abs() < 3.0 * se, "{est} ± {se} vs {want}");
        let zero = SparseInitialData::default();
        assert_eq!(neg_norm_kernel_mc(&zero, &empty, 2.5, 100, &mut stream(1, 5, 0, 0)).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn kernel_mc_after_five_steps_matches_spectral() {
        let data = SparseInitialData::cosine([1, 0]);
        let seq = MapSequence::sample(21, 3, 5);
        let spectral = sobolev_norm(&pullback(&data, &seq, 256).unwrap(), -2.5).powi(2);
        let (est, se) = neg_norm_kernel_mc(&data, &seq, 2.5, 40_000, &mut stream(2, 5, 0, 0)).unwrap();
        assert!((est - spectral).abs() < 3.0 * se, "{est} ± {se} vs {spectral}");
    }

    #[test]
    fn heat_mc_matches_spectral_norms() {
        let data = SparseInitialData::new(vec![([1, 0], Complex64::new(0.5, 0.0)), ([3, -2], Complex64::new(0.1, 0.3))]);
        for s in [0.05, 2.5] {
            let (est, se) = neg_norm_heat_mc(&data, &MapSequence::from_steps(vec![]), s, 40_000, &mut stream(3, 5, 0, 0));
            let want = data.sobolev_norm(-s).powi(2);
            assert!((est - want).abs() < 3.0 * se, "s={s}: {est} ± {se} vs {want}");
        }
        let seq = MapSequence::sample(4, 0, 4);
        let spectral = sobolev_norm(&pullback(&data, &seq, 512).unwrap(), -0.05).powi(2);
        let (est, se) = neg_norm_heat_mc(&data, &seq, 0.05, 40_000, &mut stream(3, 5, 1, 0));
        assert!((est - spectral).abs() < 3.0 * se + 0.01 * spectral, "{est} ± {se} vs {spectral}");
    }
}
