//! Alternating shear maps of the flat torus (ℝ/2πℤ)², their exact inverses,
//! derivative cocycles and derivative-size functionals.

use std::f64::consts::PI;

use rand::Rng;
use thiserror::Error;

use crate::rng::{label, stream};

pub const TWO_PI: f64 = 2.0 * PI;

/// Reduce an angle to `[0, 2π)`.
#[inline]
pub fn wrap(t: f64) -> f64 {
    let r = t.rem_euclid(TWO_PI);
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if r >= TWO_PI {
        0.0
    } else {
        r
    }
}

/// Signed periodic difference in `[-π, π)`.
#[inline]
pub fn periodic_delta(t: f64) -> f64 {
    wrap(t + PI) - PI
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TorusPoint {
    pub x: f64,
    pub y: f64,
}

impl TorusPoint {
    pub fn new(x: f64, y: f64) -> Self {
        TorusPoint {
            x: wrap(x),
            y: wrap(y),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        TorusPoint::new(rng.gen::<f64>() * TWO_PI, rng.gen::<f64>() * TWO_PI)
    }

    /// Periodic distance in the max-of-components sense used by the tests.
    pub fn dist(&self, other: &TorusPoint) -> f64 {
        periodic_delta(self.x - other.x)
            .abs()
            .max(periodic_delta(self.y - other.y).abs())
    }
}

/// A 2×2 real matrix acting on tangent or cotangent vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CotangentFrame {
    pub m: [[f64; 2]; 2],
}

impl CotangentFrame {
    pub const IDENTITY: CotangentFrame = CotangentFrame {
        m: [[1.0, 0.0], [0.0, 1.0]],
    };

    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        CotangentFrame { m: [[a, b], [c, d]] }
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn transpose(&self) -> Self {
        CotangentFrame::new(self.m[0][0], self.m[1][0], self.m[0][1], self.m[1][1])
    }

    /// `self · rhs`.
    pub fn mul(&self, rhs: &CotangentFrame) -> Self {
        let a = &self.m;
        let b = &rhs.m;
        CotangentFrame::new(
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        )
    }

    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.m[0][0] * v[0] + self.m[0][1] * v[1],
            self.m[1][0] * v[0] + self.m[1][1] * v[1],
        ]
    }

    /// Inverse transpose of a unimodular matrix: `[[d, -c], [-b, a]]`.
    pub fn unimodular_inverse_transpose(&self) -> Self {
        let [[a, b], [c, d]] = self.m;
        CotangentFrame::new(d, -c, -b, a)
    }

    pub fn max_abs(&self) -> f64 {
        self.m
            .iter()
            .flat_map(|r| r.iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

/// A volume-preserving diffeomorphism of the torus with known inverse and
/// derivative.
pub trait TorusDiffeo: Sync {
    fn apply(&self, p: TorusPoint) -> TorusPoint;
    fn apply_inverse(&self, p: TorusPoint) -> TorusPoint;
    fn jacobian(&self, p: TorusPoint) -> CotangentFrame;

    /// `(Dφ(p))^{-T}`, the cotangent cocycle generator.
    fn inv_transpose_jacobian(&self, p: TorusPoint) -> CotangentFrame {
        self.jacobian(p).unimodular_inverse_transpose()
    }
}

/// One Pierrehumbert map: shear in x by a sine of y, then shear in y by a
/// sine of the new x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShearMapStep {
    pub a: f64,
    pub a_prime: f64,
    pub gamma: f64,
    pub gamma_prime: f64,
}

impl ShearMapStep {
    pub const IDENTITY: ShearMapStep = ShearMapStep {
        a: 0.0,
        a_prime: 0.0,
        gamma: 0.0,
        gamma_prime: 0.0,
    };

    pub fn new(a: f64, a_prime: f64, gamma: f64, gamma_prime: f64) -> Self {
        ShearMapStep {
            a,
            a_prime,
            gamma,
            gamma_prime,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite()
            && self.a_prime.is_finite()
            && self.gamma.is_finite()
            && self.gamma_prime.is_finite()
    }
}

/// Draw a step with all four parameters i.i.d. uniform on `(-π, π)`.
pub fn sample_step<R: Rng + ?Sized>(rng: &mut R) -> ShearMapStep {
    sample_step_bounded(rng, PI)
}

/// Draw a step with amplitudes uniform on `(-amp, amp)` and phases uniform on
/// `(-π, π)`.
pub fn sample_step_bounded<R: Rng + ?Sized>(rng: &mut R, amp: f64) -> ShearMapStep {
    let mut draw = |half: f64| {
        loop {
            let v = rng.gen_range(-half..half);
            // gen_range is closed at the lower end; keep the interval open
            if v != -half {
                return v;
            }
        }
    };
    let a = draw(amp);
    let a_prime = draw(amp);
    let gamma = draw(PI);
    let gamma_prime = draw(PI);
    ShearMapStep::new(a, a_prime, gamma, gamma_prime)
}

impl TorusDiffeo for ShearMapStep {
    #[inline]
    fn apply(&self, p: TorusPoint) -> TorusPoint {
        let xs = p.x + self.a * (p.y + self.gamma).sin();
        let ys = p.y + self.a_prime * (xs + self.gamma_prime).sin();
        TorusPoint::new(xs, ys)
    }

    #[inline]
    fn apply_inverse(&self, p: TorusPoint) -> TorusPoint {
        let y = p.y - self.a_prime * (p.x + self.gamma_prime).sin();
        let x = p.x - self.a * (y + self.gamma).sin();
        TorusPoint::new(x, y)
    }

    #[inline]
    fn jacobian(&self, p: TorusPoint) -> CotangentFrame {
        let c1 = (p.y + self.gamma).cos();
        let xs = p.x + self.a * (p.y + self.gamma).sin();
        let c2 = (xs + self.gamma_prime).cos();
        CotangentFrame::new(
            1.0,
            self.a * c1,
            self.a_prime * c2,
            1.0 + self.a * self.a_prime * c1 * c2,
        )
    }
}

/// Rigid translation by a fixed vector. Not part of the random family; used to
/// test conjugation identities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Translation {
    pub dx: f64,
    pub dy: f64,
}

impl TorusDiffeo for Translation {
    fn apply(&self, p: TorusPoint) -> TorusPoint {
        TorusPoint::new(p.x + self.dx, p.y + self.dy)
    }
    fn apply_inverse(&self, p: TorusPoint) -> TorusPoint {
        TorusPoint::new(p.x - self.dx, p.y - self.dy)
    }
    fn jacobian(&self, _p: TorusPoint) -> CotangentFrame {
        CotangentFrame::IDENTITY
    }
}

/// A source of map steps addressed by (sample, step).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MapEnsemble {
    /// All four parameters uniform on (−π, π).
    Pierrehumbert { seed: u64 },
    /// Amplitudes uniform on (−amp, amp), phases uniform.
    Bounded { seed: u64, amp: f64 },
    /// The same step every time.
    Fixed(ShearMapStep),
    /// A = A′ = 0.
    Identity,
}

impl MapEnsemble {
    pub fn step(&self, sample: u64, step: u64) -> ShearMapStep {
        self.step_with_label(label::MAPS, sample, step)
    }

    pub fn step_with_label(&self, lbl: u64, sample: u64, step: u64) -> ShearMapStep {
        match *self {
            MapEnsemble::Pierrehumbert { seed } => sample_step(&mut stream(seed, lbl, sample, step)),
            MapEnsemble::Bounded { seed, amp } => {
                sample_step_bounded(&mut stream(seed, lbl, sample, step), amp)
            }
            MapEnsemble::Fixed(s) => s,
            MapEnsemble::Identity => ShearMapStep::IDENTITY,
        }
    }

    pub fn seed(&self) -> u64 {
        match *self {
            MapEnsemble::Pierrehumbert { seed } | MapEnsemble::Bounded { seed, .. } => seed,
            _ => 0,
        }
    }

    pub fn sequence(&self, sample: u64, n_steps: usize) -> MapSequence {
        MapSequence {
            steps: (0..n_steps as u64).map(|i| self.step(sample, i)).collect(),
            seed: self.seed(),
            index: sample,
        }
    }
}

/// An ordered list of steps; `steps[0]` is applied first.
#[derive(Clone, Debug, PartialEq)]
pub struct MapSequence {
    pub steps: Vec<ShearMapStep>,
    pub seed: u64,
    pub index: u64,
}

impl MapSequence {
    /// The Pierrehumbert sequence for `(seed, index)`.
    pub fn sample(seed: u64, index: u64, n_steps: usize) -> Self {
        MapEnsemble::Pierrehumbert { seed }.sequence(index, n_steps)
    }

    pub fn from_steps(steps: Vec<ShearMapStep>) -> Self {
        MapSequence {
            steps,
            seed: 0,
            index: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// The first `n` steps in reverse order.
    pub fn reversed_prefix(&self, n: usize) -> Self {
        MapSequence {
            steps: self.steps[..n].iter().rev().copied().collect(),
            seed: self.seed,
            index: self.index,
        }
    }

    /// `φⁿ(p)`.
    pub fn apply(&self, p: TorusPoint) -> TorusPoint {
        self.steps.iter().fold(p, |q, s| s.apply(q))
    }

    /// `(φⁿ)⁻¹(p)`: inverses applied last step first.
    pub fn apply_inverse(&self, p: TorusPoint) -> TorusPoint {
        self.steps.iter().rev().fold(p, |q, s| s.apply_inverse(q))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("cocycle entry exceeded 1e300 at step {step}; use projective_step for long horizons")]
    Overflow { step: usize },
}

/// `(φⁿ(p), Ǎⁿ(p))` with `Ǎⁿ = (Dφⁿ)^{-T}` built by chained products.
pub fn cocycle(seq: &MapSequence, p: TorusPoint) -> Result<(TorusPoint, CotangentFrame), MapError> {
    let mut q = p;
    let mut acc = CotangentFrame::IDENTITY;
    for (i, s) in seq.steps.iter().enumerate() {
        acc = s.inv_transpose_jacobian(q).mul(&acc);
        if acc.max_abs() > 1e300 || !acc.max_abs().is_finite() {
            return Err(MapError::Overflow { step: i });
        }
        q = s.apply(q);
    }
    Ok((q, acc))
}

/// One step of the projective cotangent process. Returns the image point, the
/// angle of `Ǎv` and `log|Ǎv|` for the unit covector at angle `v`.
#[inline]
pub fn projective_step<D: TorusDiffeo + ?Sized>(step: &D, x: TorusPoint, v: f64) -> (TorusPoint, f64, f64) {
    let (s, c) = v.sin_cos();
    let w = step.inv_transpose_jacobian(x).apply([c, s]);
    let norm_w = w[0].hypot(w[1]);
    let norm_v = c.hypot(s);
    (step.apply(x), w[1].atan2(w[0]), (norm_w / norm_v).ln())
}

/// Truncated bivariate Taylor polynomial of total degree ≤ 4 in (dx, dy).
#[derive(Clone, Copy, Debug)]
struct Jet {
    c: [[f64; 5]; 5],
}

const JET_ORDER: usize = 4;

impl Jet {
    fn constant(v: f64) -> Self {
        let mut c = [[0.0; 5]; 5];
        c[0][0] = v;
        Jet { c }
    }

    fn var_x(x0: f64) -> Self {
        let mut j = Jet::constant(x0);
        j.c[1][0] = 1.0;
        j
    }

    fn var_y(y0: f64) -> Self {
        let mut j = Jet::constant(y0);
        j.c[0][1] = 1.0;
        j
    }

    fn add(&self, o: &Jet) -> Jet {
        let mut r = *self;
        for i in 0..=JET_ORDER {
            for j in 0..=JET_ORDER - i {
                r.c[i][j] += o.c[i][j];
            }
        }
        r
    }

    fn scale(&self, s: f64) -> Jet {
        let mut r = *self;
        for row in r.c.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        r
    }

    fn mul(&self, o: &Jet) -> Jet {
        let mut r = Jet::constant(0.0);
        for i1 in 0..=JET_ORDER {
            for j1 in 0..=JET_ORDER - i1 {
                let a = self.c[i1][j1];
                if a == 0.0 {
                    continue;
                }
                for i2 in 0..=JET_ORDER - i1 - j1 {
                    for j2 in 0..=JET_ORDER - i1 - j1 - i2 {
                        r.c[i1 + i2][j1 + j2] += a * o.c[i2][j2];
                    }
                }
            }
        }
        r
    }

    fn sin(&self) -> Jet {
        let c0 = self.c[0][0];
        let mut h = *self;
        h.c[0][0] = 0.0;
        // h is nilpotent of order 5
        let h2 = h.mul(&h);
        let h3 = h2.mul(&h);
        let h4 = h3.mul(&h);
        let cos_h = Jet::constant(1.0).add(&h2.scale(-0.5)).add(&h4.scale(1.0 / 24.0));
        let sin_h = h.add(&h3.scale(-1.0 / 6.0));
        cos_h.scale(c0.sin()).add(&sin_h.scale(c0.cos()))
    }

    /// Max |∂^α| over 1 ≤ |α| ≤ k.
    fn max_partial(&self, k: usize) -> f64 {
        let fact = [1.0, 1.0, 2.0, 6.0, 24.0];
        let mut m = 0.0f64;
        for i in 0..=k {
            for j in 0..=k - i {
                if i + j == 0 {
                    continue;
                }
                m = m.max((self.c[i][j] * fact[i] * fact[j]).abs());
            }
        }
        m
    }
}

fn forward_jets(step: &ShearMapStep, x0: f64, y0: f64) -> (Jet, Jet) {
    let x = Jet::var_x(x0);
    let y = Jet::var_y(y0);
    let xs = x.add(&y.add(&Jet::constant(step.gamma)).sin().scale(step.a));
    let ys = y.add(&xs.add(&Jet::constant(step.gamma_prime)).sin().scale(step.a_prime));
    (xs, ys)
}

fn inverse_jets(step: &ShearMapStep, x0: f64, y0: f64) -> (Jet, Jet) {
    let xs = Jet::var_x(x0);
    let ys = Jet::var_y(y0);
    let y = ys.add(&xs.add(&Jet::constant(step.gamma_prime)).sin().scale(-step.a_prime));
    let x = xs.add(&y.add(&Jet::constant(step.gamma)).sin().scale(-step.a));
    (x, y)
}

/// `1 + sup` over a `grid × grid` lattice of the largest partial derivative of
/// order `1..=k` of the map and of its inverse.
pub fn derivative_bound(step: &ShearMapStep, k: usize, grid: usize) -> f64 {
    assert!((1..=4).contains(&k), "derivative order must lie in 1..=4");
    assert!(grid >= 1);
    let h = TWO_PI / grid as f64;
    let mut m = 0.0f64;
    for i in 0..grid {
        for j in 0..grid {
            let (x0, y0) = (i as f64 * h, j as f64 * h);
            let (f1, f2) = forward_jets(step, x0, y0);
            let (g1, g2) = inverse_jets(step, x0, y0);
            m = m
                .max(f1.max_partial(k))
                .max(f2.max_partial(k))
                .max(g1.max_partial(k))
                .max(g2.max_partial(k));
        }
    }
    1.0 + m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn step_strategy() -> impl Strategy<Value = ShearMapStep> {
        (-PI..PI, -PI..PI, -PI..PI, -PI..PI).prop_map(|(a, b, c, d)| ShearMapStep::new(a, b, c, d))
    }

    fn point_strategy() -> impl Strategy<Value = TorusPoint> {
        (0.0..TWO_PI, 0.0..TWO_PI).prop_map(|(x, y)| TorusPoint::new(x, y))
    }

    #[test]
    fn sample_step_is_deterministic() {
        let a = sample_step(&mut stream(0, label::MAPS, 0, 0));
        let b = sample_step(&mut stream(0, label::MAPS, 0, 0));
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_amplitudes_uniform() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sum = 0.0;
        let mut max_abs = 0.0f64;
        for _ in 0..n {
            let s = sample_step(&mut rng);
            sum += s.a;
            max_abs = max_abs.max(s.a.abs());
        }
        let se = PI / (3.0 * n as f64).sqrt();
        assert!((sum / n as f64).abs() < 3.0 * se);
        assert!(max_abs <= PI);
    }

    #[test]
    fn apply_examples() {
        let p = TorusPoint::new(0.3, 1.7);
        assert_eq!(ShearMapStep::IDENTITY.apply(p), p);
        assert_eq!(ShearMapStep::IDENTITY.apply_inverse(p), p);
        let s = ShearMapStep::new(PI / 2.0, 0.0, 0.0, 0.0);
        let q = s.apply(TorusPoint::new(0.0, PI / 2.0));
        assert!((q.x - PI / 2.0).abs() < 1e-15 && (q.y - PI / 2.0).abs() < 1e-15);
        let r = s.apply_inverse(TorusPoint::new(PI / 2.0, PI / 2.0));
        assert!(r.dist(&TorusPoint::new(0.0, PI / 2.0)) < 1e-15);
    }

    #[test]
    fn identity_jacobians() {
        let p = TorusPoint::new(1.0, 2.0);
        assert_eq!(ShearMapStep::IDENTITY.jacobian(p), CotangentFrame::IDENTITY);
        assert_eq!(ShearMapStep::IDENTITY.inv_transpose_jacobian(p), CotangentFrame::IDENTITY);
    }

    #[test]
    fn wrap_stays_in_range() {
        assert_eq!(wrap(-1e-300), 0.0);
        assert!(wrap(-1e-17) < TWO_PI);
        assert!((wrap(-0.5) - (TWO_PI - 0.5)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn round_trip(s in step_strategy(), p in point_strategy()) {
            prop_assert!(s.apply_inverse(s.apply(p)).dist(&p) < 1e-12);
            prop_assert!(s.apply(s.apply_inverse(p)).dist(&p) < 1e-12);
        }

        #[test]
        fn unit_determinant(s in step_strategy(), p in point_strategy()) {
            prop_assert!((s.jacobian(p).det() - 1.0).abs() < 1e-12);
            prop_assert!((s.inv_transpose_jacobian(p).det() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn inverse_transpose_identity(s in step_strategy(), p in point_strategy()) {
            let prod = s.inv_transpose_jacobian(p).mul(&s.jacobian(p).transpose());
            for i in 0..2 {
                for j in 0..2 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((prod.m[i][j] - want).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn jacobian_matches_finite_differences(s in step_strategy(), p in point_strategy()) {
            let h = 1e-6;
            let j = s.jacobian(p);
            let fd = |dx: f64, dy: f64| {
                let a = s.apply(TorusPoint { x: p.x + dx, y: p.y + dy });
                let b = s.apply(TorusPoint { x: p.x - dx, y: p.y - dy });
                [periodic_delta(a.x - b.x) / (2.0 * h), periodic_delta(a.y - b.y) / (2.0 * h)]
            };
            let cx = fd(h, 0.0);
            let cy = fd(0.0, h);
            let scale = 1.0 + j.max_abs();
            prop_assert!((cx[0] - j.m[0][0]).abs() < 1e-5 * scale);
            prop_assert!((cx[1] - j.m[1][0]).abs() < 1e-5 * scale);
            prop_assert!((cy[0] - j.m[0][1]).abs() < 1e-5 * scale);
            prop_assert!((cy[1] - j.m[1][1]).abs() < 1e-5 * scale);
        }

        #[test]
        fn projective_decomposition(s in step_strategy(), p in point_strategy(), v in -PI..PI) {
            let (_, ang, g) = projective_step(&s, p, v);
            let w = s.inv_transpose_jacobian(p).apply([v.cos(), v.sin()]);
            prop_assert!((g.exp() * ang.cos() - w[0]).abs() < 1e-12 * (1.0 + g.exp()));
            prop_assert!((g.exp() * ang.sin() - w[1]).abs() < 1e-12 * (1.0 + g.exp()));
        }
    }

    #[test]
    fn cocycle_zero_steps() {
        let p = TorusPoint::new(0.4, 0.9);
        let (q, m) = cocycle(&MapSequence::from_steps(vec![]), p).unwrap();
        assert_eq!(q, p);
        assert_eq!(m, CotangentFrame::IDENTITY);
    }

    #[test]
    fn cocycle_identity_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..200 {
            let seq = MapSequence::sample(9, trial, 10);
            let p = TorusPoint::uniform(&mut rng);
            for n in 0..=5 {
                for m in 0..=5 {
                    let first = MapSequence::from_steps(seq.steps[..n].to_vec());
                    let second = MapSequence::from_steps(seq.steps[n..n + m].to_vec());
                    let all = MapSequence::from_steps(seq.steps[..n + m].to_vec());
                    let (pn, an) = cocycle(&first, p).unwrap();
                    let (_, am) = cocycle(&second, pn).unwrap();
                    let (_, anm) = cocycle(&all, p).unwrap();
                    let prod = am.mul(&an);
                    let scale = anm.max_abs();
                    for i in 0..2 {
                        for j in 0..2 {
                            assert!((prod.m[i][j] - anm.m[i][j]).abs() <= 1e-9 * scale);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn cocycle_matches_finite_difference_of_composition() {
        let seq = MapSequence::sample(3, 1, 5);
        let p = TorusPoint::new(1.1, 4.2);
        let (_, a) = cocycle(&seq, p).unwrap();
        let h = 1e-7;
        let diff = |dx: f64, dy: f64| {
            let f = seq.apply(TorusPoint { x: p.x + dx, y: p.y + dy });
            let b = seq.apply(TorusPoint { x: p.x - dx, y: p.y - dy });
            [periodic_delta(f.x - b.x) / (2.0 * h), periodic_delta(f.y - b.y) / (2.0 * h)]
        };
        let cx = diff(h, 0.0);
        let cy = diff(0.0, h);
        let d = CotangentFrame::new(cx[0], cy[0], cx[1], cy[1]);
        let want = d.unimodular_inverse_transpose();
        let scale = want.max_abs();
        for i in 0..2 {
            for j in 0..2 {
                assert!((a.m[i][j] - want.m[i][j]).abs() < 1e-4 * scale, "{a:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn cocycle_overflow_is_reported() {
        let steps = vec![ShearMapStep::new(3.0, 3.0, 0.0, 0.0); 2000];
        // an orbit fixed at the origin sees the hyperbolic matrix every step
        let r = cocycle(&MapSequence::from_steps(steps), TorusPoint::new(0.0, 0.0));
        assert!(matches!(r, Err(MapError::Overflow { .. })));
    }

    #[test]
    fn projective_gain_matches_cocycle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..50 {
            let seq = MapSequence::sample(2, trial, 20);
            let p = TorusPoint::uniform(&mut rng);
            let v: f64 = rng.gen_range(-PI..PI);
            let (mut q, mut ang, mut total) = (p, v, 0.0);
            for s in &seq.steps {
                let (q2, a2, g) = projective_step(s, q, ang);
                q = q2;
                ang = a2;
                total += g;
            }
            let (_, m) = cocycle(&seq, p).unwrap();
            let w = m.apply([v.cos(), v.sin()]);
            assert!((total - w[0].hypot(w[1]).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn projective_identity() {
        let p = TorusPoint::new(2.0, 3.0);
        let (q, _, g) = projective_step(&ShearMapStep::IDENTITY, p, 0.7);
        assert_eq!(q, p);
        assert_eq!(g, 0.0);
    }

    #[test]
    fn derivative_bound_examples() {
        assert_eq!(derivative_bound(&ShearMapStep::IDENTITY, 1, 8), 2.0);
        let s = ShearMapStep::new(PI / 2.0, 0.0, 0.0, 0.0);
        assert!((derivative_bound(&s, 1, 16) - (1.0 + PI / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn derivative_bound_matches_hand_derivatives() {
        // second y-derivative of x* is -A sin(y+γ); the A′ = 0 step has no other
        // second-order terms
        let s = ShearMapStep::new(1.3, 0.0, 0.4, 0.0);
        let (f1, _) = forward_jets(&s, 0.2, 0.7);
        assert!((f1.c[0][2] * 2.0 + 1.3 * (0.7f64 + 0.4).sin()).abs() < 1e-13);
        assert!((f1.c[0][3] * 6.0 + 1.3 * (0.7f64 + 0.4).cos()).abs() < 1e-13);
    }

    #[test]
    fn derivative_jets_match_finite_differences() {
        let s = ShearMapStep::new(1.1, -2.3, 0.5, 1.9);
        let (x0, y0) = (0.8, 2.6);
        let (_, f2) = forward_jets(&s, x0, y0);
        let h = 1e-4;
        let ys = |x: f64, y: f64| s.apply(TorusPoint { x, y }).y;
        // mixed second derivative of the y component
        let mixed = (ys(x0 + h, y0 + h) - ys(x0 + h, y0 - h) - ys(x0 - h, y0 + h) + ys(x0 - h, y0 - h))
            / (4.0 * h * h);
        let unwrap_safe = mixed.abs() < 1e3;
        assert!(unwrap_safe);
        assert!((f2.c[1][1] - mixed).abs() < 1e-5 * (1.0 + mixed.abs()));
        let (g1, _) = inverse_jets(&s, x0, y0);
        let xi = |x: f64, y: f64| {
            let q = s.apply_inverse(TorusPoint { x, y });
            q.x
        };
        let d2 = (xi(x0, y0 + h) - 2.0 * xi(x0, y0) + xi(x0, y0 - h)) / (h * h);
        assert!((g1.c[0][2] * 2.0 - d2).abs() < 1e-4 * (1.0 + d2.abs()));
    }

    #[test]
    fn derivative_bound_monotone_and_converges() {
        let s = sample_step(&mut stream(4, label::MAPS, 0, 0));
        for k in 1..4 {
            assert!(derivative_bound(&s, k, 32) <= derivative_bound(&s, k + 1, 32));
        }
        let coarse = derivative_bound(&s, 2, 64);
        let fine = derivative_bound(&s, 2, 256);
        assert!(fine >= coarse);
        assert!((fine - coarse) / fine < 0.01);
    }
}
