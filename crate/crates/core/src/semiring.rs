//! Pluggable semirings for matrix values.
//!
//! A semiring `(S, plus, times)` here must have a commutative associative
//! `plus` with identity `zero`, an associative `times` with identity
//! `one`, and an annihilating zero: `a * zero = zero`. The two shipped
//! arithmetic semirings are the naturals `(N, +, *)` and the tropical
//! `(N + {inf}, min, +)`; a field adapter lets the inversion pipelines
//! reuse the matrix machinery.

use std::fmt;

use crate::engine::WordSized;
use crate::scalar::FieldScalar;

/// A semiring over element type `Elem`.
pub trait Semiring: Clone + fmt::Debug + Send + Sync + 'static {
    type Elem: Clone + PartialEq + fmt::Debug + fmt::Display + WordSized + Send + Sync + 'static;

    fn zero() -> Self::Elem;
    fn one() -> Self::Elem;
    fn plus(a: &Self::Elem, b: &Self::Elem) -> Self::Elem;
    fn times(a: &Self::Elem, b: &Self::Elem) -> Self::Elem;

    fn is_zero(e: &Self::Elem) -> bool {
        *e == Self::zero()
    }

    /// Whether sums of nonzero products can never cancel to zero. Holds
    /// for the naturals and the tropical semiring; fields cancel.
    fn no_cancellation() -> bool {
        true
    }

    /// Parse an element from its text form (COO file values).
    fn parse(s: &str) -> Option<Self::Elem>;
}

/// The naturals with ordinary addition and multiplication.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Nat;

impl Semiring for Nat {
    type Elem = u64;

    fn zero() -> u64 {
        0
    }
    fn one() -> u64 {
        1
    }
    fn plus(a: &u64, b: &u64) -> u64 {
        a.checked_add(*b).expect("Nat overflow")
    }
    fn times(a: &u64, b: &u64) -> u64 {
        a.checked_mul(*b).expect("Nat overflow")
    }
    fn parse(s: &str) -> Option<u64> {
        s.parse().ok()
    }
}

/// Tropical element: a saturating min-plus value where `None` is the
/// additive identity (infinity).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub struct Trop(pub Option<u64>);

impl Trop {
    pub const INF: Trop = Trop(None);

    pub fn fin(v: u64) -> Trop {
        Trop(Some(v))
    }
}

impl fmt::Display for Trop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v}"),
            None => write!(f, "inf"),
        }
    }
}

impl WordSized for Trop {
    fn words(&self) -> usize {
        1
    }
}

/// The min-plus (tropical) semiring used for shortest-path closures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MinPlus;

impl Semiring for MinPlus {
    type Elem = Trop;

    fn zero() -> Trop {
        Trop::INF
    }
    fn one() -> Trop {
        Trop(Some(0))
    }
    fn plus(a: &Trop, b: &Trop) -> Trop {
        match (a.0, b.0) {
            (None, _) => *b,
            (_, None) => *a,
            (Some(x), Some(y)) => Trop(Some(x.min(y))),
        }
    }
    fn times(a: &Trop, b: &Trop) -> Trop {
        match (a.0, b.0) {
            (Some(x), Some(y)) => Trop(Some(x.checked_add(y).expect("MinPlus overflow"))),
            _ => Trop::INF,
        }
    }
    fn parse(s: &str) -> Option<Trop> {
        if s == "inf" || s == "INF" {
            Some(Trop::INF)
        } else {
            s.parse().ok().map(|v| Trop(Some(v)))
        }
    }
}

/// A field viewed as a semiring, so field matrices can flow through the
/// same multiplication programs. Cancellation is possible here, which
/// only affects nonzero-count bounds, never values.
#[derive(Clone, Debug, Default)]
pub struct FieldSemiring<F: FieldScalar>(std::marker::PhantomData<F>);

impl<F: FieldScalar + WordSized> Semiring for FieldSemiring<F> {
    type Elem = F;

    fn zero() -> F {
        F::zero()
    }
    fn one() -> F {
        F::one()
    }
    fn plus(a: &F, b: &F) -> F {
        a.add(b)
    }
    fn times(a: &F, b: &F) -> F {
        a.mul(b)
    }
    fn no_cancellation() -> bool {
        false
    }
    fn parse(s: &str) -> Option<F> {
        F::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nat_axioms_spot_checks() {
        assert_eq!(Nat::times(&7, &Nat::zero()), Nat::zero());
        assert_eq!(Nat::times(&7, &Nat::one()), 7);
        assert_eq!(Nat::plus(&2, &3), 5);
    }

    #[test]
    fn minplus_axioms_spot_checks() {
        let a = Trop::fin(3);
        assert_eq!(MinPlus::times(&a, &MinPlus::zero()), Trop::INF);
        assert_eq!(MinPlus::times(&a, &MinPlus::one()), a);
        assert_eq!(MinPlus::plus(&a, &Trop::fin(5)), a);
        assert_eq!(MinPlus::plus(&a, &Trop::INF), a);
        assert_eq!(MinPlus::times(&a, &Trop::fin(5)), Trop::fin(8));
    }

    #[test]
    fn minplus_parses_inf() {
        assert_eq!(MinPlus::parse("inf"), Some(Trop::INF));
        assert_eq!(MinPlus::parse("12"), Some(Trop::fin(12)));
    }
}
