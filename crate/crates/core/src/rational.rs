//! Exact rational helpers: text parsing and a compact `"n"` / `"n/d"` serde form.

use num_rational::Rational64;
use num_traits::{Signed, Zero};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid rational {0:?}")]
pub struct ParseRationalError(pub String);

/// Parses `"3"`, `"-2"`, `"3/2"` or a finite decimal such as `"0.25"`.
pub fn parse_rational(raw: &str) -> Result<Rational64, ParseRationalError> {
    let s = raw.trim();
    let err = || ParseRationalError(raw.to_string());
    if let Some((n, d)) = s.split_once('/') {
        let n: i64 = n.trim().parse().map_err(|_| err())?;
        let d: i64 = d.trim().parse().map_err(|_| err())?;
        if d == 0 {
            return Err(err());
        }
        return Ok(Rational64::new(n, d));
    }
    if let Some((int, frac)) = s.split_once('.') {
        let negative = int.starts_with('-');
        let int_digits = int.trim_start_matches(['-', '+']);
        if frac.is_empty() || frac.len() > 15 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err());
        }
        let whole: i64 = if int_digits.is_empty() { 0 } else { int_digits.parse().map_err(|_| err())? };
        let denom = 10i64.checked_pow(frac.len() as u32).ok_or_else(err)?;
        let numer = whole
            .checked_mul(denom)
            .and_then(|w| w.checked_add(frac.parse::<i64>().ok()?))
            .ok_or_else(err)?;
        let value = Rational64::new(numer, denom);
        return Ok(if negative { -value } else { value });
    }
    s.parse::<i64>().map(Rational64::from_integer).map_err(|_| err())
}

pub fn format_rational(value: &Rational64) -> String {
    if value.is_integer() {
        value.numer().to_string()
    } else {
        format!("{}/{}", value.numer(), value.denom())
    }
}

pub fn is_nonnegative(value: &Rational64) -> bool {
    value.is_zero() || value.is_positive()
}

/// `#[serde(with = "crate::rational::serde_str")]` for `Rational64` fields.
pub mod serde_str {
    use num_rational::Rational64;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Rational64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::format_rational(value))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational64, D::Error> {
        let raw = String::deserialize(d)?;
        super::parse_rational(&raw).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_forms() {
        assert_eq!(parse_rational("3").unwrap(), Rational64::from_integer(3));
        assert_eq!(parse_rational("-2").unwrap(), Rational64::from_integer(-2));
        assert_eq!(parse_rational("6/4").unwrap(), Rational64::new(3, 2));
        assert_eq!(parse_rational("0.25").unwrap(), Rational64::new(1, 4));
        assert_eq!(parse_rational("-1.5").unwrap(), Rational64::new(-3, 2));
        assert!(parse_rational("1/0").is_err());
        assert!(parse_rational("abc").is_err());
        assert!(parse_rational("1.").is_err());
    }

    #[test]
    fn formats_compactly() {
        assert_eq!(format_rational(&Rational64::from_integer(5)), "5");
        assert_eq!(format_rational(&Rational64::new(-3, 6)), "-1/2");
    }
}
