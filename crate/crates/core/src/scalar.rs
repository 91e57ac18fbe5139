//! Numeric tower shared by the lattice and enumeration code.
//!
//! Chains and value surfaces are generic over [`Scalar`], which is
//! implemented for `f64` (production solves) and [`Rational`] (exact
//! theorem checks, where `v == g` must be decided without a tolerance).

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

/// Arbitrary-precision rational number.
pub type Rational = BigRational;

pub trait Scalar:
    Clone
    + PartialOrd
    + fmt::Debug
    + Send
    + Sync
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn to_f64(&self) -> f64;
    fn abs_val(&self) -> Self;
    /// Whether arithmetic in this type is exact.
    fn is_exact() -> bool;
    fn from_usize(n: usize) -> Self;

    fn max_of(self, b: Self) -> Self {
        if b > self {
            b
        } else {
            self
        }
    }

    /// Default slack for "v = g" tests given the value scale: zero when exact.
    fn default_tolerance(scale: &Self) -> Self;
}

impl Scalar for f64 {
    fn to_f64(&self) -> f64 {
        *self
    }
    fn abs_val(&self) -> Self {
        self.abs()
    }
    fn is_exact() -> bool {
        false
    }
    fn from_usize(n: usize) -> Self {
        n as f64
    }
    fn default_tolerance(scale: &Self) -> Self {
        10.0 * f64::EPSILON * scale.abs()
    }
}

impl Scalar for Rational {
    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
    fn abs_val(&self) -> Self {
        self.abs()
    }
    fn is_exact() -> bool {
        true
    }
    fn from_usize(n: usize) -> Self {
        Rational::from_integer(BigInt::from(n))
    }
    fn default_tolerance(_: &Self) -> Self {
        Rational::zero()
    }
}

/// `p/q` shorthand for building rationals in code and tests.
pub fn ratio(p: i64, q: i64) -> Rational {
    Rational::new(BigInt::from(p), BigInt::from(q))
}

pub fn int(p: i64) -> Rational {
    Rational::from_integer(BigInt::from(p))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed rational {0:?}: expected \"p/q\" or an integer")]
pub struct ParseRationalError(pub String);

/// Parses `"p/q"` (or a bare integer) into a reduced rational.
pub fn parse_rational(s: &str) -> Result<Rational, ParseRationalError> {
    let err = || ParseRationalError(s.to_string());
    let s = s.trim();
    let (num, den) = match s.split_once('/') {
        Some((n, d)) => (n.trim(), d.trim()),
        None => (s, "1"),
    };
    let num: BigInt = num.parse().map_err(|_| err())?;
    let den: BigInt = den.parse().map_err(|_| err())?;
    if den.is_zero() {
        return Err(err());
    }
    Ok(Rational::new(num, den))
}

/// Formats a rational as `"p/q"`; integers keep the `/1` so the form is uniform.
pub fn format_rational(r: &Rational) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

/// Formats a float with 17 significant digits (lossless for `f64`).
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Serde adapter storing rationals as `"p/q"` strings.
pub mod serde_rational {
    use super::{format_rational, parse_rational, Rational};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Rational, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_rational(r))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational, D::Error> {
        let s = String::deserialize(d)?;
        parse_rational(&s).map_err(serde::de::Error::custom)
    }

    pub mod vec {
        use super::*;
        use serde::ser::SerializeSeq;

        pub fn serialize<S: Serializer>(v: &[Rational], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for r in v {
                seq.serialize_element(&format_rational(r))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Rational>, D::Error> {
            let raw = Vec::<String>::deserialize(d)?;
            raw.iter()
                .map(|s| parse_rational(s).map_err(serde::de::Error::custom))
                .collect()
        }
    }

    pub mod vec2 {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[Vec<Rational>], s: S) -> Result<S::Ok, S::Error> {
            let raw: Vec<Vec<String>> = v
                .iter()
                .map(|row| row.iter().map(format_rational).collect())
                .collect();
            serde::Serialize::serialize(&raw, s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(
            d: D,
        ) -> Result<Vec<Vec<Rational>>, D::Error> {
            let raw = Vec::<Vec<String>>::deserialize(d)?;
            raw.iter()
                .map(|row| {
                    row.iter()
                        .map(|s| parse_rational(s).map_err(serde::de::Error::custom))
                        .collect()
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rational_text_round_trip() {
        let r = ratio(-6, 8);
        assert_eq!(format_rational(&r), "-3/4");
        assert_eq!(parse_rational("-3/4").unwrap(), r);
        assert_eq!(parse_rational(" 5 ").unwrap(), int(5));
        assert!(parse_rational("1/0").is_err());
        assert!(parse_rational("a/b").is_err());
    }

    #[test]
    fn float_format_is_lossless() {
        for x in [0.1, -1.0 / 3.0, 1e-300, 123456789.123456789, 0.0] {
            let s = format_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
    }
}
