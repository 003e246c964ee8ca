//! Fixed-point formats used at the ledger boundary.
//!
//! All arithmetic that feeds certified comparisons is carried out on the raw
//! integers of these types, so two parties that agree on the binary64 inputs
//! agree bit-for-bit on every derived key.
//!
//! Rendering is always the raw integer in base 10. Parsing additionally
//! accepts a scaled decimal (`"-0.7000"`) for the signed formats and rounds it
//! to nearest, ties to even.

use alloc::string::{String, ToString};
use core::fmt;
use core::ops::{Add, Neg, Sub};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

const TWO_64: f64 = 18_446_744_073_709_551_616.0;
const TWO_32: f64 = 4_294_967_296.0;

/// Conversion into a fixed-point format failed because the value is not
/// finite or does not fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NumClamp;

impl fmt::Display for NumClamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("value does not fit the fixed-point format")
    }
}

impl core::error::Error for NumClamp {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecimalError {
    Malformed(String),
    Overflow(String),
}

impl fmt::Display for DecimalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecimalError::Malformed(s) => write!(f, "malformed decimal string {s:?}"),
            DecimalError::Overflow(s) => write!(f, "decimal string {s:?} overflows its format"),
        }
    }
}

impl core::error::Error for DecimalError {}

/// Round `v * scale` to the nearest integer (ties to even).
fn scaled_rne(v: f64, scale: f64) -> Option<f64> {
    if !v.is_finite() {
        return None;
    }
    // multiplication by a power of two is exact unless it overflows
    let s = v * scale;
    if !s.is_finite() {
        return None;
    }
    Some(libm::rint(s))
}

/// Signed Q64.64: value = raw * 2^-64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Q64_64(pub i128);

impl Q64_64 {
    pub const ZERO: Q64_64 = Q64_64(0);
    pub const ONE: Q64_64 = Q64_64(1 << 64);
    /// Sentinel for an empty incumbent.
    pub const MIN: Q64_64 = Q64_64(i128::MIN);
    pub const MAX: Q64_64 = Q64_64(i128::MAX);

    pub fn from_f64(v: f64) -> Result<Self, NumClamp> {
        let r = scaled_rne(v, TWO_64).ok_or(NumClamp)?;
        // i128 range is [-2^127, 2^127); both bounds are exact in binary64
        if r >= 1.7014118346046923e38 || r < -1.7014118346046923e38 {
            return Err(NumClamp);
        }
        Ok(Q64_64(r as i128))
    }

    /// Saturating conversion; the caller is responsible for raising NumClamp.
    pub fn from_f64_saturating(v: f64) -> (Self, bool) {
        match Self::from_f64(v) {
            Ok(q) => (q, false),
            Err(_) if v.is_nan() => (Q64_64::MIN, true),
            Err(_) if v > 0.0 => (Q64_64::MAX, true),
            Err(_) => (Q64_64::MIN, true),
        }
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / TWO_64
    }

    pub fn raw(self) -> i128 {
        self.0
    }

    pub fn checked_add(self, rhs: Q64_64) -> Option<Q64_64> {
        self.0.checked_add(rhs.0).map(Q64_64)
    }

    pub fn saturating_add(self, rhs: Q64_64) -> Q64_64 {
        Q64_64(self.0.saturating_add(rhs.0))
    }

    pub fn parse(s: &str) -> Result<Self, DecimalError> {
        if s.contains('.') {
            let raw = parse_scaled(s, 64)?;
            return Ok(Q64_64(raw));
        }
        parse_canonical_int::<i128>(s).map(Q64_64)
    }
}

impl Add for Q64_64 {
    type Output = Q64_64;
    fn add(self, rhs: Q64_64) -> Q64_64 {
        Q64_64(self.0 + rhs.0)
    }
}

impl Sub for Q64_64 {
    type Output = Q64_64;
    fn sub(self, rhs: Q64_64) -> Q64_64 {
        Q64_64(self.0 - rhs.0)
    }
}

impl Neg for Q64_64 {
    type Output = Q64_64;
    fn neg(self) -> Q64_64 {
        Q64_64(-self.0)
    }
}

impl fmt::Display for Q64_64 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Signed Q32.32: value = raw * 2^-32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Q32_32(pub i64);

impl Q32_32 {
    pub const ZERO: Q32_32 = Q32_32(0);

    pub fn from_f64(v: f64) -> Result<Self, NumClamp> {
        let r = scaled_rne(v, TWO_32).ok_or(NumClamp)?;
        if r >= 9.223372036854775808e18 || r < -9.223372036854775808e18 {
            return Err(NumClamp);
        }
        Ok(Q32_32(r as i64))
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / TWO_32
    }

    pub fn raw(self) -> i64 {
        self.0
    }

    pub fn parse(s: &str) -> Result<Self, DecimalError> {
        if s.contains('.') {
            let raw = parse_scaled(s, 32)?;
            return i64::try_from(raw)
                .map(Q32_32)
                .map_err(|_| DecimalError::Overflow(s.to_string()));
        }
        parse_canonical_int::<i64>(s).map(Q32_32)
    }
}

impl fmt::Display for Q32_32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Open-interval uniform in Q0.64: value = (raw + 0.5) * 2^-64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Q0_64(pub u64);

impl Q0_64 {
    pub fn parse(s: &str) -> Result<Self, DecimalError> {
        parse_canonical_int::<u64>(s).map(Q0_64)
    }
}

impl fmt::Display for Q0_64 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Integers that can be parsed from a canonical base-10 string.
pub trait CanonicalInt: Sized + Copy + fmt::Display {
    fn from_str_radix10(s: &str) -> Option<Self>;
    const SIGNED: bool;
}

macro_rules! canonical_int {
    ($($t:ty => $signed:expr),*) => {$(
        impl CanonicalInt for $t {
            fn from_str_radix10(s: &str) -> Option<Self> {
                <$t>::from_str_radix(s, 10).ok()
            }
            const SIGNED: bool = $signed;
        }
    )*};
}

canonical_int!(u32 => false, u64 => false, i64 => true, i128 => true);

/// Parse a canonical integer: optional leading `-` for signed types, no `+`,
/// no leading zeros, no `-0`.
pub fn parse_canonical_int<T: CanonicalInt>(s: &str) -> Result<T, DecimalError> {
    let digits = match s.strip_prefix('-') {
        Some(rest) if T::SIGNED => rest,
        Some(_) => return Err(DecimalError::Malformed(s.to_string())),
        None => s,
    };
    let well_formed = !digits.is_empty()
        && digits.bytes().all(|b| b.is_ascii_digit())
        && (digits == "0" || !digits.starts_with('0'))
        && !(s.starts_with('-') && digits == "0");
    if !well_formed {
        return Err(DecimalError::Malformed(s.to_string()));
    }
    T::from_str_radix10(s).ok_or_else(|| DecimalError::Overflow(s.to_string()))
}

/// Parse a scaled decimal like `-11.2000` into raw `round(value * 2^frac_bits)`,
/// ties to even. At most 30 fractional digits.
fn parse_scaled(s: &str, frac_bits: u32) -> Result<i128, DecimalError> {
    let malformed = || DecimalError::Malformed(s.to_string());
    let overflow = || DecimalError::Overflow(s.to_string());
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let (int_part, frac_part) = body.split_once('.').ok_or_else(malformed)?;
    if int_part.is_empty()
        || frac_part.is_empty()
        || !int_part.bytes().all(|b| b.is_ascii_digit())
        || !frac_part.bytes().all(|b| b.is_ascii_digit())
        || frac_part.len() > 30
    {
        return Err(malformed());
    }
    let int_val: u128 = int_part.parse().map_err(|_| overflow())?;
    let frac_val: u128 = frac_part.parse().map_err(|_| overflow())?;
    let denom = 10u128.pow(frac_part.len() as u32);

    // raw = int * 2^b + round(frac * 2^b / denom)
    let int_scaled = int_val.checked_shl(frac_bits).filter(|v| v >> frac_bits == int_val);
    let int_scaled = int_scaled.ok_or_else(overflow)?;
    // frac < denom <= 10^30 < 2^100; split the shift so the product fits u128
    let (mut q, mut r) = (0u128, frac_val);
    let mut remaining = frac_bits;
    while remaining > 0 {
        let step = remaining.min(24);
        r <<= step;
        q = (q << step) + r / denom;
        r %= denom;
        remaining -= step;
    }
    let twice = r * 2;
    if twice > denom || (twice == denom && q & 1 == 1) {
        q += 1;
    }
    let mag = int_scaled.checked_add(q).ok_or_else(overflow)?;
    if neg {
        if mag > (i128::MAX as u128) + 1 {
            return Err(overflow());
        }
        Ok((mag as i128).wrapping_neg())
    } else {
        i128::try_from(mag).map_err(|_| overflow())
    }
}

macro_rules! string_serde {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = <alloc::borrow::Cow<'de, str>>::deserialize(deserializer)?;
                <$t>::parse(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(Q64_64);
string_serde!(Q32_32);
string_serde!(Q0_64);

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_in_q64_64_is_two_to_the_64() {
        let q = Q64_64::from_f64(1.0).unwrap();
        assert_eq!(q.0, 1i128 << 64);
        assert_eq!(q.to_string(), "18446744073709551616");
    }

    #[test]
    fn minus_half_in_q32_32() {
        assert_eq!(Q32_32::from_f64(-0.5).unwrap().0, -2147483648);
    }

    #[test]
    fn conversion_rounds_ties_to_even() {
        // 2.5 * 2^-64 lies exactly between raw 2 and raw 3
        let v = 2.5 / TWO_64;
        assert_eq!(Q64_64::from_f64(v).unwrap().0, 2);
        let v = 3.5 / TWO_64;
        assert_eq!(Q64_64::from_f64(v).unwrap().0, 4);
    }

    #[test]
    fn overflow_and_nan_are_clamps() {
        assert_eq!(Q64_64::from_f64(1e300), Err(NumClamp));
        assert_eq!(Q64_64::from_f64(f64::NAN), Err(NumClamp));
        assert_eq!(Q32_32::from_f64(3e9), Err(NumClamp));
        let (q, clamped) = Q64_64::from_f64_saturating(f64::INFINITY);
        assert!(clamped);
        assert_eq!(q, Q64_64::MAX);
    }

    #[test]
    fn scaled_decimals_parse() {
        assert_eq!(Q32_32::parse("12.0000").unwrap().0, 12i64 << 32);
        assert_eq!(Q32_32::parse("-0.5").unwrap().0, -2147483648);
        // -0.7 * 2^32 = -3006477107.2
        assert_eq!(Q32_32::parse("-0.7000").unwrap().0, -3006477107);
        assert_eq!(Q64_64::parse("1.0").unwrap(), Q64_64::ONE);
    }

    #[test]
    fn non_canonical_integers_are_rejected() {
        for s in ["", "-", "+1", "01", "-0", "1e3", " 1", "0x10"] {
            assert!(Q64_64::parse(s).is_err(), "{s:?}");
        }
        assert!(Q0_64::parse("-1").is_err());
        assert!(matches!(
            Q0_64::parse("18446744073709551616"),
            Err(DecimalError::Overflow(_))
        ));
    }

    proptest! {
        #[test]
        fn raw_rendering_round_trips(raw in any::<i128>(), r32 in any::<i64>(), u in any::<u64>()) {
            let s = Q64_64(raw).to_string();
            prop_assert_eq!(Q64_64::parse(&s).unwrap().to_string(), s);
            let s = Q32_32(r32).to_string();
            prop_assert_eq!(Q32_32::parse(&s).unwrap().to_string(), s);
            let s = Q0_64(u).to_string();
            prop_assert_eq!(Q0_64::parse(&s).unwrap().to_string(), s);
        }

        #[test]
        fn from_f64_is_monotone(a in -1e9f64..1e9, b in -1e9f64..1e9) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(Q64_64::from_f64(lo).unwrap() <= Q64_64::from_f64(hi).unwrap());
        }
    }
}
