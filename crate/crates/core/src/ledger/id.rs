use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Experiment identifier, rendered as `E` followed by at least three digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ExperimentId(u32);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed experiment id `{0}` (expected E followed by at least three digits, nonzero)")]
pub struct BadId(pub String);

impl ExperimentId {
    pub fn new(number: u32) -> Option<Self> {
        (number > 0).then_some(ExperimentId(number))
    }

    pub fn number(self) -> u32 {
        self.0
    }

    pub fn next(self) -> Self {
        ExperimentId(self.0 + 1)
    }

    pub fn first() -> Self {
        ExperimentId(1)
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E{:03}", self.0)
    }
}

impl FromStr for ExperimentId {
    type Err = BadId;

    fn from_str(s: &str) -> Result<Self, BadId> {
        let digits = s.strip_prefix('E').ok_or_else(|| BadId(s.to_string()))?;
        if digits.len() < 3 || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(BadId(s.to_string()));
        }
        digits
            .parse::<u32>()
            .ok()
            .and_then(ExperimentId::new)
            .ok_or_else(|| BadId(s.to_string()))
    }
}

impl Serialize for ExperimentId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ExperimentId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn renders_padded() {
        assert_eq!(ExperimentId::new(1).unwrap().to_string(), "E001");
        assert_eq!(ExperimentId::new(1234).unwrap().to_string(), "E1234");
        assert_eq!("E0042".parse::<ExperimentId>().unwrap().number(), 42);
    }

    #[test]
    fn rejects_malformed() {
        for bad in ["E1", "E01", "e001", "E000", "E00a", "001", ""] {
            assert!(bad.parse::<ExperimentId>().is_err(), "{bad}");
        }
    }

    proptest! {
        #[test]
        fn render_parse_roundtrip(n in 1u32..10_000_000) {
            let id = ExperimentId::new(n).unwrap();
            prop_assert_eq!(id.to_string().parse::<ExperimentId>().unwrap(), id);
        }

        #[test]
        fn string_order_matches_numeric_order_within_width(a in 1u32..1000, b in 1u32..1000) {
            let (x, y) = (ExperimentId::new(a).unwrap(), ExperimentId::new(b).unwrap());
            prop_assert_eq!(x.cmp(&y), x.to_string().cmp(&y.to_string()));
        }
    }
}
