//! The three-valued ordinal scale shared by every discrete assessment signal.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Ordinal assessment level, totally ordered `Low < Medium < High`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrdinalLevel {
    Low,
    Medium,
    High,
}

impl OrdinalLevel {
    pub const ALL: [OrdinalLevel; 3] = [OrdinalLevel::Low, OrdinalLevel::Medium, OrdinalLevel::High];

    pub fn as_str(self) -> &'static str {
        match self {
            OrdinalLevel::Low => "low",
            OrdinalLevel::Medium => "medium",
            OrdinalLevel::High => "high",
        }
    }

    /// Case-insensitive parse that ignores surrounding whitespace.
    pub fn parse_lenient(raw: &str) -> Option<Self> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "low" => Some(OrdinalLevel::Low),
            "medium" => Some(OrdinalLevel::Medium),
            "high" => Some(OrdinalLevel::High),
            _ => None,
        }
    }
}

impl fmt::Display for OrdinalLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown ordinal level {0:?} (expected low, medium or high)")]
pub struct UnknownLevel(pub String);

impl FromStr for OrdinalLevel {
    type Err = UnknownLevel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OrdinalLevel::parse_lenient(s).ok_or_else(|| UnknownLevel(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_low_medium_high() {
        assert!(OrdinalLevel::Low < OrdinalLevel::Medium);
        assert!(OrdinalLevel::Medium < OrdinalLevel::High);
    }

    #[test]
    fn lenient_parse() {
        assert_eq!("  HIGH ".parse::<OrdinalLevel>().unwrap(), OrdinalLevel::High);
        assert_eq!(OrdinalLevel::parse_lenient("Medium"), Some(OrdinalLevel::Medium));
        assert!("median".parse::<OrdinalLevel>().is_err());
    }
}
