//! Exact rational scalars and rational intervals.
//!
//! Every measure-theoretic quantity in this crate is either an exact
//! [`Rational`] or a [`RatInterval`] that provably encloses it. Interval
//! endpoints are themselves exact, so interval arithmetic here is
//! conservative without any rounding-mode tricks: the hull of an operation on
//! members is computed endpoint-exactly.


use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// An exact rational number in canonical form (positive denominator, reduced).
///
/// Wraps a big-integer ratio; all arithmetic is exact and results stay
/// canonical, so equality and hashing are structural. Values are immutable
/// and freely shareable between threads.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rational(BigRational);

impl Rational {
    pub fn new(numer: impl Into<BigInt>, denom: impl Into<BigInt>) -> Result<Self> {
        let d: BigInt = denom.into();
        if d.is_zero() {
            return Err(Error::Parse("denominator must be nonzero".into()));
        }
        Ok(Rational(BigRational::new(numer.into(), d)))
    }

    pub fn from_int(n: impl Into<BigInt>) -> Self {
        Rational(BigRational::from_integer(n.into()))
    }

    pub fn zero() -> Self {
        Rational(BigRational::zero())
    }

    pub fn one() -> Self {
        Rational(BigRational::one())
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn is_positive(&self) -> bool {
        self.0.is_positive()
    }

    pub fn is_negative(&self) -> bool {
        self.0.is_negative()
    }

    pub fn numer(&self) -> &BigInt {
        self.0.numer()
    }

    pub fn denom(&self) -> &BigInt {
        self.0.denom()
    }

    pub fn abs(&self) -> Self {
        Rational(self.0.abs())
    }

    pub fn recip(&self) -> Result<Self> {
        if self.is_zero() {
            return Err(Error::Parse("division by zero".into()));
        }
        Ok(Rational(self.0.recip()))
    }

    pub fn min(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }

    pub fn max(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }

    /// Exact non-negative integer power; `x^0 = 1`.
    pub fn pow(&self, exp: u64) -> Self {
        // Powers of a canonical fraction stay canonical, so raise the parts
        // directly; going through ratio multiplication would re-reduce
        // (and re-gcd) enormous coprime operands at every step.
        let e = u32::try_from(exp).expect("exponent fits u32");
        Rational(BigRational::new_raw(self.0.numer().pow(e), self.0.denom().pow(e)))
    }

    /// Approximate float value, for display only; never used in computation.
    pub fn to_f64_lossy(&self) -> f64 {
        let numer = self.0.numer();
        let denom = self.0.denom();
        // Scale down huge operands so the conversion stays finite.
        let bits = numer.bits().max(denom.bits());
        if bits > 900 {
            let shift = (bits - 900) as u64;
            let n = numer >> shift;
            let d = denom >> shift;
            return big_to_f64(&n) / big_to_f64(&d);
        }
        big_to_f64(numer) / big_to_f64(denom)
    }
}

fn big_to_f64(n: &BigInt) -> f64 {
    use num_traits::ToPrimitive;
    n.to_f64().unwrap_or(f64::NAN)
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.denom().is_one() {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl fmt::Debug for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl FromStr for Rational {
    type Err = Error;

    /// Parses `"p/q"` or a bare integer `"p"`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = |_| Error::Parse(format!("invalid rational {s:?}"));
        match s.split_once('/') {
            Some((p, q)) => {
                let numer: BigInt = p.trim().parse().map_err(bad)?;
                let denom: BigInt = q.trim().parse().map_err(bad)?;
                if denom.is_zero() {
                    return Err(Error::Parse(format!("zero denominator in {s:?}")));
                }
                Ok(Rational(BigRational::new(numer, denom)))
            }
            None => {
                let numer: BigInt = s.parse().map_err(bad)?;
                Ok(Rational::from_int(numer))
            }
        }
    }
}

impl From<i64> for Rational {
    fn from(n: i64) -> Self {
        Rational::from_int(n)
    }
}

impl From<u64> for Rational {
    fn from(n: u64) -> Self {
        Rational::from_int(BigInt::from(n))
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident) => {
        impl $trait for Rational {
            type Output = Rational;
            fn $method(self, rhs: Rational) -> Rational {
                Rational((self.0).$method(rhs.0))
            }
        }
        impl $trait<&Rational> for &Rational {
            type Output = Rational;
            fn $method(self, rhs: &Rational) -> Rational {
                Rational((&self.0).$method(&rhs.0))
            }
        }
        impl $trait<&Rational> for Rational {
            type Output = Rational;
            fn $method(self, rhs: &Rational) -> Rational {
                Rational((self.0).$method(&rhs.0))
            }
        }
        impl $trait<Rational> for &Rational {
            type Output = Rational;
            fn $method(self, rhs: Rational) -> Rational {
                Rational((&self.0).$method(rhs.0))
            }
        }
    };
}

binop!(Add, add);
binop!(Sub, sub);
binop!(Mul, mul);
binop!(Div, div);

impl Neg for Rational {
    type Output = Rational;
    fn neg(self) -> Rational {
        Rational(-self.0)
    }
}

impl Neg for &Rational {
    type Output = Rational;
    fn neg(self) -> Rational {
        Rational(-&self.0)
    }
}

impl std::iter::Sum for Rational {
    fn sum<I: Iterator<Item = Rational>>(iter: I) -> Rational {
        iter.fold(Rational::zero(), |a, b| a + b)
    }
}

impl Serialize for Rational {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Rational {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Exact non-negative integer power of a rational.
pub fn rat_pow(x: &Rational, exp: u64) -> Rational {
    x.pow(exp)
}

/// Outcome of a certified comparison between two intervals.
///
/// `Undecided` is a first-class answer, not an error: overlapping
/// non-degenerate intervals cannot be ordered, and callers choose whether to
/// refine their enclosures or fall back to a tie rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntervalOrder {
    Less,
    Greater,
    Equal,
    Undecided,
}

impl IntervalOrder {
    pub fn flip(self) -> Self {
        match self {
            IntervalOrder::Less => IntervalOrder::Greater,
            IntervalOrder::Greater => IntervalOrder::Less,
            other => other,
        }
    }
}

/// A closed interval `[lo, hi]` of exact rationals, `lo <= hi`.
///
/// The invariant maintained throughout: whenever an interval is produced for
/// a quantity, the exact value of that quantity is contained in it. Interval
/// arithmetic takes exact hulls, so containment is preserved by every
/// operation here.
///
/// Serializes as the two-element array `["lo", "hi"]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatInterval {
    lo: Rational,
    hi: Rational,
}

impl Serialize for RatInterval {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        (&self.lo, &self.hi).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RatInterval {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let (lo, hi) = <(Rational, Rational)>::deserialize(deserializer)?;
        RatInterval::new(lo, hi).map_err(serde::de::Error::custom)
    }
}

impl RatInterval {
    pub fn new(lo: Rational, hi: Rational) -> Result<Self> {
        if lo > hi {
            return Err(Error::Parse(format!("interval endpoints out of order: [{lo}, {hi}]")));
        }
        Ok(RatInterval { lo, hi })
    }

    /// The degenerate interval `[x, x]`.
    pub fn exact(x: Rational) -> Self {
        RatInterval { lo: x.clone(), hi: x }
    }

    pub fn lo(&self) -> &Rational {
        &self.lo
    }

    pub fn hi(&self) -> &Rational {
        &self.hi
    }

    pub fn width(&self) -> Rational {
        &self.hi - &self.lo
    }

    pub fn is_degenerate(&self) -> bool {
        self.lo == self.hi
    }

    pub fn contains(&self, x: &Rational) -> bool {
        &self.lo <= x && x <= &self.hi
    }

    pub fn scale(&self, k: &Rational) -> Self {
        let a = k * &self.lo;
        let b = k * &self.hi;
        if a <= b {
            RatInterval { lo: a, hi: b }
        } else {
            RatInterval { lo: b, hi: a }
        }
    }
}

impl Add<&RatInterval> for &RatInterval {
    type Output = RatInterval;
    fn add(self, rhs: &RatInterval) -> RatInterval {
        RatInterval { lo: &self.lo + &rhs.lo, hi: &self.hi + &rhs.hi }
    }
}

impl Sub<&RatInterval> for &RatInterval {
    type Output = RatInterval;
    fn sub(self, rhs: &RatInterval) -> RatInterval {
        RatInterval { lo: &self.lo - &rhs.hi, hi: &self.hi - &rhs.lo }
    }
}

impl Mul<&RatInterval> for &RatInterval {
    type Output = RatInterval;
    fn mul(self, rhs: &RatInterval) -> RatInterval {
        let candidates = [
            &self.lo * &rhs.lo,
            &self.lo * &rhs.hi,
            &self.hi * &rhs.lo,
            &self.hi * &rhs.hi,
        ];
        let mut lo = candidates[0].clone();
        let mut hi = candidates[0].clone();
        for c in &candidates[1..] {
            if c < &lo {
                lo = c.clone();
            }
            if c > &hi {
                hi = c.clone();
            }
        }
        RatInterval { lo, hi }
    }
}

/// Certified comparison: strict orderings are reported only when every pair
/// of members is ordered the same way; `Equal` only for identical degenerate
/// intervals.
pub fn interval_compare(a: &RatInterval, b: &RatInterval) -> IntervalOrder {
    if a.hi < b.lo {
        return IntervalOrder::Less;
    }
    if a.lo > b.hi {
        return IntervalOrder::Greater;
    }
    if a.is_degenerate() && b.is_degenerate() && a.lo == b.lo {
        return IntervalOrder::Equal;
    }
    IntervalOrder::Undecided
}

/// Compare an interval against an exact point.
pub fn compare_to_point(a: &RatInterval, x: &Rational) -> IntervalOrder {
    interval_compare(a, &RatInterval::exact(x.clone()))
}

impl fmt::Display for RatInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

/// Convenience: parse a rational literal, panicking on malformed input.
/// Intended for tests and internal constants.
pub fn rat(s: &str) -> Rational {
    s.parse().expect("invalid rational literal")
}

/// An exact fraction kept unreduced: the working representation for masses
/// whose reduced form would cost a gcd of enormous coprime operands.
/// Comparisons cross-multiply and rounding divides; nothing normalizes.
#[derive(Debug, Clone)]
pub(crate) struct RawMass {
    pub num: BigInt,
    pub den: BigInt, // > 0
}

impl RawMass {
    pub(crate) fn zero() -> Self {
        RawMass { num: BigInt::from(0), den: BigInt::from(1) }
    }

    pub(crate) fn from_rational(x: &Rational) -> Self {
        RawMass { num: x.numer().clone(), den: x.denom().clone() }
    }

    pub(crate) fn is_zero(&self) -> bool {
        self.num.is_zero()
    }

    pub(crate) fn cmp_rational(&self, x: &Rational) -> std::cmp::Ordering {
        (&self.num * x.denom()).cmp(&(x.numer() * &self.den))
    }

    pub(crate) fn add(&self, other: &RawMass) -> RawMass {
        RawMass {
            num: &self.num * &other.den + &other.num * &self.den,
            den: &self.den * &other.den,
        }
    }

    pub(crate) fn scale_int(&self, k: &BigInt) -> RawMass {
        RawMass { num: &self.num * k, den: self.den.clone() }
    }

    /// Bits that bring dyadic rounding well under this value's magnitude.
    pub(crate) fn granularity_bits(&self, guard: u32) -> u32 {
        let num_bits = self.num.bits().max(1);
        let den_bits = self.den.bits();
        let magnitude = den_bits.saturating_sub(num_bits) as u32;
        (magnitude + guard).clamp(64, 1 << 14)
    }

    /// Largest dyadic `m / 2^bits <= value`; one division, no gcd.
    pub(crate) fn dyadic_down(&self, bits: u32) -> Rational {
        use num_integer::Integer;
        let m = (&self.num << bits).div_floor(&self.den);
        Rational::new(m, BigInt::from(1) << bits).expect("power of two denominator")
    }

    /// Smallest dyadic `m / 2^bits >= value`.
    pub(crate) fn dyadic_up(&self, bits: u32) -> Rational {
        use num_integer::Integer;
        let m = (&self.num << bits).div_ceil(&self.den);
        Rational::new(m, BigInt::from(1) << bits).expect("power of two denominator")
    }
}

/// Largest dyadic `m / 2^bits` that is `<= x`.
pub(crate) fn dyadic_down(x: &Rational, bits: u32) -> Rational {
    use num_integer::Integer;
    let scaled = x.numer() << bits;
    let m = scaled.div_floor(x.denom());
    Rational::new(m, BigInt::from(1) << bits).expect("power of two denominator")
}

/// Smallest dyadic `m / 2^bits` that is `>= x`.
pub(crate) fn dyadic_up(x: &Rational, bits: u32) -> Rational {
    use num_integer::Integer;
    let scaled = x.numer() << bits;
    let m = scaled.div_ceil(x.denom());
    Rational::new(m, BigInt::from(1) << bits).expect("power of two denominator")
}

/// Replaces an exact bracket by a slightly wider one whose endpoints have
/// power-of-two denominators sized to the bracket's width. Comparisons
/// against the result cost linear big-integer work instead of full
/// cross-multiplications, while the added slack stays around `2^-64`
/// relative to the width.
pub(crate) fn round_bracket_outward(lo: &Rational, hi: &Rational) -> (Rational, Rational) {
    if lo == hi {
        return (lo.clone(), hi.clone());
    }
    let width = hi - lo;
    let num_bits = width.numer().bits().max(1);
    let den_bits = width.denom().bits();
    let magnitude = den_bits.saturating_sub(num_bits) as u32;
    let bits = (magnitude + 64).clamp(64, 1 << 14);
    (dyadic_down(lo, bits), dyadic_up(hi, bits))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_round_trip() {
        assert_eq!(rat("5/6").to_string(), "5/6");
        assert_eq!(rat("10/4").to_string(), "5/2");
        assert_eq!(rat("7").to_string(), "7");
        assert_eq!(rat("-3/9").to_string(), "-1/3");
        assert!("1/0".parse::<Rational>().is_err());
        assert!("x".parse::<Rational>().is_err());
    }

    #[test]
    fn pow_examples() {
        assert_eq!(rat_pow(&rat("5/6"), 3), rat("125/216"));
        assert_eq!(rat_pow(&rat("1/2"), 0), rat("1"));
        assert_eq!(rat_pow(&rat("199/200"), 2), rat("39601/40000"));
    }

    #[test]
    fn interval_compare_examples() {
        let third = RatInterval::exact(rat("1/3"));
        let half = RatInterval::exact(rat("1/2"));
        assert_eq!(interval_compare(&third, &half), IntervalOrder::Less);

        let unit = RatInterval::new(rat("0"), rat("1")).unwrap();
        assert_eq!(interval_compare(&unit, &unit), IntervalOrder::Undecided);

        let p = RatInterval::exact(rat("2/7"));
        assert_eq!(interval_compare(&p, &p), IntervalOrder::Equal);
    }

    #[test]
    fn compare_is_antisymmetric() {
        let a = RatInterval::new(rat("0"), rat("1/4")).unwrap();
        let b = RatInterval::new(rat("1/2"), rat("3/4")).unwrap();
        assert_eq!(interval_compare(&a, &b), IntervalOrder::Less);
        assert_eq!(interval_compare(&b, &a), IntervalOrder::Greater);
        assert_eq!(interval_compare(&a, &b).flip(), interval_compare(&b, &a));
    }

    #[test]
    fn touching_intervals_stay_undecided() {
        // Shared endpoint: members may compare equal, so no strict order.
        let a = RatInterval::new(rat("0"), rat("1/2")).unwrap();
        let b = RatInterval::new(rat("1/2"), rat("1")).unwrap();
        assert_eq!(interval_compare(&a, &b), IntervalOrder::Undecided);
    }
}
