//! The group `C ⋊ S¹`: elements `(z, θ)` with product
//! `(z₂, θ₂)·(z₁, θ₁) = (z₂ + e^{iθ₂} z₁, θ₂ + θ₁)`.
//!
//! Rotation parts are composed by angle addition so that long products never
//! drift off the unit circle.

use std::f64::consts::TAU;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroupError {
    #[error("non-finite displacement {0}")]
    NonFinite(Complex64),
    #[error("scaling factor must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("cocycle needs index {index}, sequence covers [{start}, {end})")]
    InsufficientData { index: i64, start: i64, end: i64 },
    #[error("rational angle needs a positive denominator")]
    ZeroDenominator,
    #[error("rational angle {p}/{q} is not in lowest terms")]
    NotReduced { p: i64, q: u64 },
}

/// An angle in radians, always canonical in `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(into = "f64", from = "f64")]
pub struct Angle(f64);

impl Angle {
    pub const ZERO: Angle = Angle(0.0);

    pub fn new(radians: f64) -> Self {
        let mut v = radians.rem_euclid(TAU);
        // rem_euclid can round up to exactly 2π for tiny negative inputs
        if v >= TAU || !v.is_finite() {
            v = 0.0;
        }
        Angle(v)
    }

    pub fn radians(self) -> f64 {
        self.0
    }

    /// `e^{iθ}`.
    pub fn cis(self) -> Complex64 {
        Complex64::from_polar(1.0, self.0)
    }

    /// `k·θ mod 2π` for an integer multiplier.
    pub fn times(self, k: i64) -> Angle {
        Angle::new(self.0 * k as f64)
    }
}

impl From<f64> for Angle {
    fn from(v: f64) -> Self {
        Angle::new(v)
    }
}

impl From<Angle> for f64 {
    fn from(a: Angle) -> f64 {
        a.0
    }
}

impl Add for Angle {
    type Output = Angle;
    fn add(self, rhs: Angle) -> Angle {
        Angle::new(self.0 + rhs.0)
    }
}

impl Sub for Angle {
    type Output = Angle;
    fn sub(self, rhs: Angle) -> Angle {
        Angle::new(self.0 - rhs.0)
    }
}

impl Neg for Angle {
    type Output = Angle;
    fn neg(self) -> Angle {
        Angle::new(-self.0)
    }
}

impl fmt::Display for Angle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An exact rational angle `2π·p/q` with `gcd(p, q) = 1` and `0 ≤ p < q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RationalAngle {
    p: u64,
    q: u64,
}

impl RationalAngle {
    /// Rejects `q = 0` and fractions not in lowest terms. `p` is reduced mod `q`.
    pub fn new(p: i64, q: u64) -> Result<Self, GroupError> {
        if q == 0 {
            return Err(GroupError::ZeroDenominator);
        }
        if gcd(p.unsigned_abs(), q) != 1 && !(p == 0 && q == 1) {
            return Err(GroupError::NotReduced { p, q });
        }
        let p = p.rem_euclid(q as i64) as u64;
        Ok(RationalAngle { p, q })
    }

    pub fn numerator(self) -> u64 {
        self.p
    }

    pub fn denominator(self) -> u64 {
        self.q
    }

    pub fn angle(self) -> Angle {
        Angle::new(TAU * self.p as f64 / self.q as f64)
    }

    /// Residue `(n·p) mod q`, so that `n·β = 2π·residue/q` exactly.
    pub fn residue_after(self, n: u64) -> u64 {
        ((n as u128 * self.p as u128) % self.q as u128) as u64
    }

    /// `n·β mod 2π`, computed through the integer residue.
    pub fn angle_after(self, n: u64) -> Angle {
        Angle::new(TAU * self.residue_after(n) as f64 / self.q as f64)
    }

    /// `e^{i·2π·j/q}` for an integer residue.
    pub fn root_of_unity(self, j: i64) -> Complex64 {
        let r = j.rem_euclid(self.q as i64);
        Complex64::from_polar(1.0, TAU * r as f64 / self.q as f64)
    }
}

impl fmt::Display for RationalAngle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "2pi*{}/{}", self.p, self.q)
    }
}

pub(crate) fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// An element `(z, θ)` of `C ⋊ S¹`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupElement {
    pub z: Complex64,
    pub theta: Angle,
}

impl GroupElement {
    pub fn new(z: Complex64, theta: Angle) -> Result<Self, GroupError> {
        if !(z.re.is_finite() && z.im.is_finite()) {
            return Err(GroupError::NonFinite(z));
        }
        Ok(GroupElement { z, theta })
    }

    pub fn identity() -> Self {
        GroupElement {
            z: Complex64::new(0.0, 0.0),
            theta: Angle::ZERO,
        }
    }

    pub fn inv(self) -> Self {
        let rot = (-self.theta).cis();
        GroupElement {
            z: -(rot * self.z),
            theta: -self.theta,
        }
    }

    /// The scaling automorphism `(z, θ) ↦ (ηz, θ)`.
    pub fn scale(self, eta: f64) -> Result<Self, GroupError> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(GroupError::NonPositiveScale(eta));
        }
        Ok(GroupElement {
            z: self.z * eta,
            theta: self.theta,
        })
    }

    /// Projection onto the displacement part.
    pub fn proj_c(self) -> Complex64 {
        self.z
    }
}

impl Mul for GroupElement {
    type Output = GroupElement;

    fn mul(self, rhs: GroupElement) -> GroupElement {
        GroupElement {
            z: self.z + self.theta.cis() * rhs.z,
            theta: self.theta + rhs.theta,
        }
    }
}

pub fn g_mul(a: GroupElement, b: GroupElement) -> GroupElement {
    a * b
}

pub fn g_inv(a: GroupElement) -> GroupElement {
    a.inv()
}

pub fn scale(eta: f64, a: GroupElement) -> Result<GroupElement, GroupError> {
    a.scale(eta)
}

pub fn proj_c(a: GroupElement) -> Complex64 {
    a.proj_c()
}

/// Largest `η*` such that every `η < η*` maps each element of `set` into the
/// ball `|z| < eps`. Infinite when all displacements are zero.
pub fn contraction_threshold(set: &[GroupElement], eps: f64) -> f64 {
    let radius = set.iter().map(|g| g.z.norm()).fold(0.0, f64::max);
    if radius == 0.0 {
        f64::INFINITY
    } else {
        eps / radius
    }
}

/// A finite window of the generating sequence `f(Tᵏx)`, `k ∈ [start, start + len)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedSequence {
    start: i64,
    elems: Vec<GroupElement>,
}

impl IndexedSequence {
    pub fn new(start: i64, elems: Vec<GroupElement>) -> Self {
        IndexedSequence { start, elems }
    }

    /// Sequence indexed from zero.
    pub fn from_zero(elems: Vec<GroupElement>) -> Self {
        Self::new(0, elems)
    }

    pub fn start(&self) -> i64 {
        self.start
    }

    pub fn end(&self) -> i64 {
        self.start + self.elems.len() as i64
    }

    pub fn get(&self, index: i64) -> Result<GroupElement, GroupError> {
        let offset = index - self.start;
        if offset < 0 || offset >= self.elems.len() as i64 {
            return Err(GroupError::InsufficientData {
                index,
                start: self.start,
                end: self.end(),
            });
        }
        Ok(self.elems[offset as usize])
    }
}

/// The cocycle `f(n, x)` generated by the sequence.
pub fn cocycle(seq: &IndexedSequence, n: i64) -> Result<GroupElement, GroupError> {
    cocycle_at(seq, 0, n)
}

/// `f(n, Tᵐx)`: the cocycle evaluated at the point shifted by `base`.
///
/// For `n > 0` this is `f[base+n-1] ⋯ f[base+1]·f[base]`; for `n < 0` it is the
/// inverse of the forward product over `[base+n, base)`.
pub fn cocycle_at(seq: &IndexedSequence, base: i64, n: i64) -> Result<GroupElement, GroupError> {
    match n.cmp(&0) {
        std::cmp::Ordering::Equal => Ok(GroupElement::identity()),
        std::cmp::Ordering::Greater => forward_product(seq, base, n),
        std::cmp::Ordering::Less => Ok(forward_product(seq, base + n, -n)?.inv()),
    }
}

fn forward_product(seq: &IndexedSequence, from: i64, len: i64) -> Result<GroupElement, GroupError> {
    let mut acc = GroupElement::identity();
    for k in from..from + len {
        acc = seq.get(k)? * acc;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn el(re: f64, im: f64, th: f64) -> GroupElement {
        GroupElement::new(c(re, im), Angle::new(th)).unwrap()
    }

    fn close(a: GroupElement, b: GroupElement, tol: f64) -> bool {
        let dth = (a.theta - b.theta).radians();
        (a.z - b.z).norm() <= tol && dth.min(TAU - dth) <= tol
    }

    #[test]
    fn angle_is_canonical() {
        for v in [-1e-300, -TAU, TAU, 3.0 * TAU + 0.5, -0.5, 1e9] {
            let a = Angle::new(v).radians();
            assert!((0.0..TAU).contains(&a), "{v} -> {a}");
        }
        assert_eq!(Angle::new(TAU).radians(), 0.0);
    }

    #[test]
    fn mul_examples() {
        let beta = 1.234;
        assert_eq!(el(0.0, 0.0, beta) * el(0.0, 0.0, 0.0), el(0.0, 0.0, beta));
        assert!(close(
            el(1.0, 0.0, FRAC_PI_2) * el(1.0, 0.0, 0.0),
            el(1.0, 1.0, FRAC_PI_2),
            1e-15
        ));
        let lhs = el(2.0, 1.0, PI) * el(1.0, -1.0, FRAC_PI_2);
        assert!(close(lhs, el(1.0, 2.0, 3.0 * FRAC_PI_2), 1e-14));
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(GroupElement::identity().inv(), GroupElement::identity());
        assert!(close(el(1.0, 0.0, 0.0).inv(), el(-1.0, 0.0, 0.0), 0.0));
        let g = el(0.0, 1.0, FRAC_PI_2);
        assert!(close(g.inv(), el(-1.0, 0.0, 3.0 * FRAC_PI_2), 1e-15));
        assert!(close(g * g.inv(), GroupElement::identity(), 1e-15));
    }

    #[test]
    fn scale_examples() {
        let g = el(4.0, 2.0, 0.7);
        assert_eq!(g.scale(1.0).unwrap(), g);
        assert!(close(g.scale(0.5).unwrap(), el(2.0, 1.0, 0.7), 0.0));
        let h = el(1.0, -1.0, 1.0);
        let lhs = h.scale(7.0).unwrap().scale(0.3).unwrap();
        assert!(close(lhs, h.scale(2.1).unwrap(), 1e-14));
        assert!(matches!(g.scale(0.0), Err(GroupError::NonPositiveScale(_))));
        assert!(g.scale(-1.0).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(GroupElement::new(c(f64::NAN, 0.0), Angle::ZERO).is_err());
        assert!(GroupElement::new(c(0.0, f64::INFINITY), Angle::ZERO).is_err());
    }

    #[test]
    fn projection() {
        assert_eq!(el(0.0, 0.0, 2.0).proj_c(), c(0.0, 0.0));
        assert_eq!(el(1.0, 1.0, PI).proj_c(), c(1.0, 1.0));
    }

    #[test]
    fn cocycle_zero_is_identity() {
        let seq = IndexedSequence::from_zero(vec![]);
        assert_eq!(cocycle(&seq, 0).unwrap(), GroupElement::identity());
        assert!(matches!(
            cocycle(&seq, 1),
            Err(GroupError::InsufficientData { index: 0, .. })
        ));
    }

    #[test]
    fn cocycle_reproduces_twisted_sum() {
        let beta = 0.9;
        let xs = [c(1.0, 0.5), c(-0.3, 2.0), c(0.7, -1.1), c(2.0, 0.0)];
        let seq = IndexedSequence::from_zero(xs.iter().map(|&x| el(x.re, x.im, beta)).collect());
        let mut s = c(0.0, 0.0);
        for (n, x) in xs.iter().enumerate() {
            s = Angle::new(beta).cis() * s + x;
            let y = cocycle(&seq, n as i64 + 1).unwrap();
            assert_abs_diff_eq!((y.z - s).norm(), 0.0, epsilon = 1e-14);
            assert_abs_diff_eq!(
                y.theta.radians(),
                Angle::new(beta * (n + 1) as f64).radians(),
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn negative_cocycle_matches_definition() {
        let seq = IndexedSequence::new(
            -3,
            vec![el(1.0, 2.0, 0.3), el(-1.0, 0.5, 1.1), el(0.2, 0.2, 4.0)],
        );
        // f(-2, x) = f(2, T^{-2}x)^{-1} = (f[-1]·f[-2])^{-1}
        let expected = (seq.get(-1).unwrap() * seq.get(-2).unwrap()).inv();
        assert!(close(cocycle(&seq, -2).unwrap(), expected, 1e-15));
    }

    #[test]
    fn contraction_threshold_bounds_the_image() {
        let set = [el(3.0, 4.0, 1.0), el(-1.0, 0.0, 2.0), el(0.0, 0.0, 0.0)];
        let eps = 0.01;
        let eta = contraction_threshold(&set, eps);
        assert_abs_diff_eq!(eta, eps / 5.0, epsilon = 1e-18);
        for g in set {
            assert!(g.scale(eta * 0.999).unwrap().proj_c().norm() < eps);
        }
        assert!(contraction_threshold(&[GroupElement::identity()], eps).is_infinite());
    }

    #[test]
    fn haar_scaling_of_rectangles() {
        // corners of an axis-aligned rectangle map to corners of η·R
        let (x0, y0, x1, y1) = (-1.5, 0.25, 2.0, 3.0);
        for eta in [0.1, 0.5, 3.0] {
            let lo = el(x0, y0, 0.0).scale(eta).unwrap().z;
            let hi = el(x1, y1, 0.0).scale(eta).unwrap().z;
            let area = (hi.re - lo.re) * (hi.im - lo.im);
            assert_abs_diff_eq!(area, eta * eta * (x1 - x0) * (y1 - y0), epsilon = 1e-12);
        }
    }

    #[test]
    fn rational_angles() {
        assert!(RationalAngle::new(1, 0).is_err());
        assert!(RationalAngle::new(2, 4).is_err());
        let r = RationalAngle::new(-1, 3).unwrap();
        assert_eq!(r.numerator(), 2);
        assert_eq!(r.residue_after(5), 1);
        assert_eq!(r.angle_after(3), Angle::ZERO);
        assert_eq!(RationalAngle::new(0, 1).unwrap().angle(), Angle::ZERO);
    }

    fn arb_element() -> impl Strategy<Value = GroupElement> {
        (-1e3..1e3f64, -1e3..1e3f64, 0.0..TAU).prop_map(|(a, b, t)| el(a, b, t))
    }

    proptest! {
        #[test]
        fn associativity(a in arb_element(), b in arb_element(), c in arb_element()) {
            let l = (a * b) * c;
            let r = a * (b * c);
            prop_assert!(close(l, r, 1e-12 * 1e3));
        }

        #[test]
        fn scale_is_homomorphism(a in arb_element(), b in arb_element(), eta in 1e-3..1e3f64) {
            let l = (a * b).scale(eta).unwrap();
            let r = a.scale(eta).unwrap() * b.scale(eta).unwrap();
            prop_assert!((l.z - r.z).norm() <= 1e-12 * (1.0 + l.z.norm()));
            prop_assert_eq!(l.theta, r.theta);
        }

        #[test]
        fn inverse_is_two_sided(a in arb_element()) {
            prop_assert!(close(a * a.inv(), GroupElement::identity(), 1e-12));
            prop_assert!(close(a.inv() * a, GroupElement::identity(), 1e-12));
        }

        #[test]
        fn projection_of_product(a in arb_element(), b in arb_element()) {
            let expected = a.z + Complex64::from_polar(1.0, a.theta.radians()) * b.z;
            prop_assert!(((a * b).proj_c() - expected).norm() <= 1e-12);
        }

        #[test]
        fn cocycle_identity(
            elems in proptest::collection::vec(arb_element(), 130),
            n in -32i64..=32,
            m in -32i64..=32,
        ) {
            let seq = IndexedSequence::new(-65, elems);
            let lhs = cocycle(&seq, n + m).unwrap();
            let rhs = cocycle_at(&seq, m, n).unwrap() * cocycle(&seq, m).unwrap();
            let scale = 1.0 + lhs.z.norm();
            prop_assert!((lhs.z - rhs.z).norm() <= 1e-10 * scale);
            let dth = (lhs.theta - rhs.theta).radians();
            prop_assert!(dth.min(TAU - dth) <= 1e-10);
        }
    }
}
