//! Field scalar backends: exact big rationals and double-precision floats.
//!
//! Exact scalars back the matching and exact-inversion pipelines; floats
//! back the iterative approximate inverse. Every scalar counts as one
//! memory word: the inversion and matching algorithms assume a word can
//! store any value occurring in the computation.

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};

use crate::engine::WordSized;

/// Field operations needed by the inversion and matching pipelines.
pub trait FieldScalar:
    Clone + PartialEq + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_i64(v: i64) -> Self;
    fn add(&self, rhs: &Self) -> Self;
    fn sub(&self, rhs: &Self) -> Self;
    fn mul(&self, rhs: &Self) -> Self;
    /// Multiplicative inverse; `None` for zero.
    fn recip(&self) -> Option<Self>;
    fn neg(&self) -> Self;
    fn is_zero(&self) -> bool;
    /// Parse from text (file values).
    fn parse(s: &str) -> Option<Self>;

    fn div(&self, rhs: &Self) -> Option<Self> {
        rhs.recip().map(|r| self.mul(&r))
    }
}

/// Arbitrary-precision rational scalar.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub struct ExactScalar(pub BigRational);

impl ExactScalar {
    pub fn from_int(v: i64) -> Self {
        ExactScalar(BigRational::from_integer(BigInt::from(v)))
    }

    pub fn from_bigint(v: BigInt) -> Self {
        ExactScalar(BigRational::from_integer(v))
    }

    pub fn ratio(num: i64, den: i64) -> Self {
        ExactScalar(BigRational::new(BigInt::from(num), BigInt::from(den)))
    }

    /// The numerator, if the value is an integer.
    pub fn to_integer(&self) -> Option<BigInt> {
        if self.0.is_integer() {
            Some(self.0.to_integer())
        } else {
            None
        }
    }

    pub fn abs(&self) -> Self {
        ExactScalar(self.0.abs())
    }
}

impl fmt::Display for ExactScalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_integer() {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl WordSized for ExactScalar {
    fn words(&self) -> usize {
        1
    }
}

impl FieldScalar for ExactScalar {
    fn zero() -> Self {
        ExactScalar(BigRational::zero())
    }
    fn one() -> Self {
        ExactScalar(BigRational::one())
    }
    fn from_i64(v: i64) -> Self {
        Self::from_int(v)
    }
    fn add(&self, rhs: &Self) -> Self {
        ExactScalar(&self.0 + &rhs.0)
    }
    fn sub(&self, rhs: &Self) -> Self {
        ExactScalar(&self.0 - &rhs.0)
    }
    fn mul(&self, rhs: &Self) -> Self {
        ExactScalar(&self.0 * &rhs.0)
    }
    fn recip(&self) -> Option<Self> {
        if self.0.is_zero() {
            None
        } else {
            Some(ExactScalar(self.0.recip()))
        }
    }
    fn neg(&self) -> Self {
        ExactScalar(-self.0.clone())
    }
    fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
    fn parse(s: &str) -> Option<Self> {
        if let Some((num, den)) = s.split_once('/') {
            let n: i64 = num.parse().ok()?;
            let d: i64 = den.parse().ok()?;
            if d == 0 {
                return None;
            }
            Some(ExactScalar::ratio(n, d))
        } else {
            s.parse::<i64>().ok().map(ExactScalar::from_int)
        }
    }
}

/// Double-precision scalar for the iterative inverse.
#[derive(Clone, Copy, PartialEq, PartialOrd, Debug)]
pub struct FloatScalar(pub f64);

impl fmt::Display for FloatScalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl WordSized for FloatScalar {
    fn words(&self) -> usize {
        1
    }
}

impl FieldScalar for FloatScalar {
    fn zero() -> Self {
        FloatScalar(0.0)
    }
    fn one() -> Self {
        FloatScalar(1.0)
    }
    fn from_i64(v: i64) -> Self {
        FloatScalar(v as f64)
    }
    fn add(&self, rhs: &Self) -> Self {
        FloatScalar(self.0 + rhs.0)
    }
    fn sub(&self, rhs: &Self) -> Self {
        FloatScalar(self.0 - rhs.0)
    }
    fn mul(&self, rhs: &Self) -> Self {
        FloatScalar(self.0 * rhs.0)
    }
    fn recip(&self) -> Option<Self> {
        if self.0 == 0.0 {
            None
        } else {
            Some(FloatScalar(1.0 / self.0))
        }
    }
    fn neg(&self) -> Self {
        FloatScalar(-self.0)
    }
    fn is_zero(&self) -> bool {
        self.0 == 0.0
    }
    fn parse(s: &str) -> Option<Self> {
        s.parse::<f64>().ok().map(FloatScalar)
    }
}
