//! Rounding-bias diagnostics on score strings as written by the model.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

static DECIMAL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d+(\.\d+)?$").expect("valid regex"));

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BiasError {
    #[error("not a decimal numeral: {0:?}")]
    NotDecimal(String),
    #[error("no valid score strings")]
    NoValidStrings,
}

pub fn is_decimal(s: &str) -> bool {
    DECIMAL.is_match(s)
}

/// Character counts per 1-based position.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PositionHistogram {
    pub positions: BTreeMap<usize, BTreeMap<char, usize>>,
    pub counted: usize,
    pub skipped: usize,
}

impl PositionHistogram {
    pub fn total_at(&self, position: usize) -> usize {
        self.positions
            .get(&position)
            .map(|m| m.values().sum())
            .unwrap_or(0)
    }

    pub fn count(&self, position: usize, ch: char) -> usize {
        self.positions
            .get(&position)
            .and_then(|m| m.get(&ch))
            .copied()
            .unwrap_or(0)
    }
}

/// Counts characters by position; strings that are not decimal numerals are
/// skipped and tallied.
pub fn char_position_counts<S: AsRef<str>>(strings: &[S]) -> PositionHistogram {
    let mut hist = PositionHistogram::default();
    for s in strings {
        let s = s.as_ref().trim();
        if !is_decimal(s) {
            hist.skipped += 1;
            continue;
        }
        hist.counted += 1;
        for (i, ch) in s.chars().enumerate() {
            *hist.positions.entry(i + 1).or_default().entry(ch).or_default() += 1;
        }
    }
    hist
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Roundness {
    EndsZero,
    EndsFive,
    Other,
}

/// Classifies by the final written digit, so "0.9" and "0.90" differ.
pub fn roundness_class(s: &str) -> Result<Roundness, BiasError> {
    let s = s.trim();
    if !is_decimal(s) {
        return Err(BiasError::NotDecimal(s.to_string()));
    }
    Ok(match s.chars().last() {
        Some('0') => Roundness::EndsZero,
        Some('5') => Roundness::EndsFive,
        _ => Roundness::Other,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundnessSummary {
    pub ends_zero: f64,
    pub ends_five: f64,
    pub other: f64,
    pub valid: usize,
    pub skipped: usize,
}

pub fn roundness_summary<S: AsRef<str>>(strings: &[S]) -> Result<RoundnessSummary, BiasError> {
    let (mut zero, mut five, mut other, mut skipped) = (0usize, 0usize, 0usize, 0usize);
    for s in strings {
        match roundness_class(s.as_ref()) {
            Ok(Roundness::EndsZero) => zero += 1,
            Ok(Roundness::EndsFive) => five += 1,
            Ok(Roundness::Other) => other += 1,
            Err(_) => skipped += 1,
        }
    }
    let valid = zero + five + other;
    if valid == 0 {
        return Err(BiasError::NoValidStrings);
    }
    let n = valid as f64;
    Ok(RoundnessSummary {
        ends_zero: zero as f64 / n,
        ends_five: five as f64 / n,
        other: other as f64 / n,
        valid,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn position_counts_example() {
        let h = char_position_counts(&["0.95", "0.9", "0.70"]);
        assert_eq!(h.count(3, '9'), 2);
        assert_eq!(h.count(3, '7'), 1);
        assert_eq!(h.count(4, '5'), 1);
        assert_eq!(h.count(4, '0'), 1);
        assert_eq!(h.total_at(4), 2);
    }

    #[test]
    fn empty_and_uniform_inputs() {
        let h = char_position_counts::<&str>(&[]);
        assert!(h.positions.is_empty());
        let h = char_position_counts(&["0.50"; 8]);
        assert_eq!(h.count(4, '0'), 8);
        assert_eq!(h.total_at(4), 8);
    }

    #[test]
    fn non_numeric_strings_skipped() {
        let h = char_position_counts(&["0.5", "high", "-0.2", ""]);
        assert_eq!((h.counted, h.skipped), (1, 3));
    }

    #[test]
    fn roundness_examples() {
        assert_eq!(roundness_class("0.95").unwrap(), Roundness::EndsFive);
        assert_eq!(roundness_class("0.90").unwrap(), Roundness::EndsZero);
        assert_eq!(roundness_class("0.93").unwrap(), Roundness::Other);
        assert_eq!(roundness_class("0.9").unwrap(), Roundness::Other);
        assert!(roundness_class("abc").is_err());
    }

    #[test]
    fn summary_examples() {
        let s = roundness_summary(&["0.50"; 4]).unwrap();
        assert_eq!(s.ends_zero, 1.0);
        assert_eq!(roundness_summary(&["x"]).unwrap_err(), BiasError::NoValidStrings);
    }

    proptest! {
        #[test]
        fn fractions_sum_to_one(strings in prop::collection::vec("[0-9]{1,2}(\\.[0-9]{1,3})?|[a-z]{1,3}", 1..40)) {
            if let Ok(s) = roundness_summary(&strings) {
                prop_assert!((s.ends_zero + s.ends_five + s.other - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn position_three_totals(strings in prop::collection::vec("[0-9](\\.[0-9]{0,3})?", 0..40)) {
            let h = char_position_counts(&strings);
            let long = strings.iter().filter(|s| s.len() >= 3 && is_decimal(s)).count();
            prop_assert_eq!(h.total_at(3), long);
        }
    }
}
