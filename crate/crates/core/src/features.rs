//! Query featurization and the fixed per-episode state representation.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryFeatures {
    pub char_length: usize,
    pub word_count: usize,
    pub numerical_density: f64,
    pub multi_step_flag: bool,
    pub tool_flag: bool,
}

impl QueryFeatures {
    pub fn as_array(&self) -> [f64; 5] {
        [
            self.char_length as f64,
            self.word_count as f64,
            self.numerical_density,
            f64::from(u8::from(self.multi_step_flag)),
            f64::from(u8::from(self.tool_flag)),
        ]
    }
}

/// Keyword lists behind the two binary features. Matching is a
/// case-insensitive substring test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureKeywords {
    pub multi_step: Vec<String>,
    pub tool: Vec<String>,
}

impl Default for FeatureKeywords {
    fn default() -> Self {
        let owned = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            multi_step: owned(&["step", "then", "after", "first", "remaining", "left"]),
            tool: owned(&["calculate", "sum", "total", "how many", "search", "find"]),
        }
    }
}

pub fn extract_features(text: &str) -> QueryFeatures {
    extract_features_with(text, &FeatureKeywords::default())
}

pub fn extract_features_with(text: &str, keywords: &FeatureKeywords) -> QueryFeatures {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let word_count = tokens.len();
    let numeric = tokens
        .iter()
        .filter(|t| t.chars().any(|c| c.is_ascii_digit()))
        .count();
    let lower = text.to_lowercase();
    let any = |list: &[String]| list.iter().any(|k| lower.contains(&k.to_lowercase()));
    QueryFeatures {
        char_length: text.chars().count(),
        word_count,
        numerical_density: numeric as f64 / word_count.max(1) as f64,
        multi_step_flag: any(&keywords.multi_step),
        tool_flag: any(&keywords.tool),
    }
}

/// `[semantic; features]`, fixed for the whole configuration episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEmbedding {
    pub semantic: Vec<f64>,
    pub features: [f64; 5],
}

impl StateEmbedding {
    pub fn new(semantic: Vec<f64>, features: &QueryFeatures) -> Self {
        Self {
            semantic,
            features: features.as_array(),
        }
    }

    pub fn dim(&self) -> usize {
        self.semantic.len() + self.features.len()
    }

    /// Network input. Count features are log-compressed so that long
    /// queries do not saturate the first tanh layer.
    pub fn input_vector(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim());
        x.extend_from_slice(&self.semantic);
        x.push(self.features[0].ln_1p() / 8.0);
        x.push(self.features[1].ln_1p() / 8.0);
        x.extend_from_slice(&self.features[2..]);
        x
    }

    /// Quantized key used to group records by state (1e-6 resolution).
    pub fn key(&self) -> StateKey {
        StateKey(
            self.semantic
                .iter()
                .chain(self.features.iter())
                .map(|v| (v * 1e6).round() as i64)
                .collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.semantic.iter().chain(&self.features).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateKey(pub Vec<i64>);

impl StateKey {
    pub fn distance_sq(&self, other: &StateKey) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| {
                let d = (a - b) as f64 * 1e-6;
                d * d
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn apples_query() {
        let f = extract_features(
            "John has 5 apples. He gives 2 to Mary. How many does John have left?",
        );
        assert_eq!(f.word_count, 15);
        assert!((f.numerical_density - 2.0 / 15.0).abs() < 1e-15);
        assert!(f.multi_step_flag);
        assert!(f.tool_flag);
    }

    #[test]
    fn empty_query() {
        let f = extract_features("");
        assert_eq!(f.word_count, 0);
        assert_eq!(f.char_length, 0);
        assert_eq!(f.numerical_density, 0.0);
        assert!(!f.multi_step_flag && !f.tool_flag);
    }

    #[test]
    fn short_arithmetic() {
        let f = extract_features("What is 2+2?");
        assert_eq!(f.word_count, 3);
        assert!((f.numerical_density - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn keywords_are_case_insensitive() {
        let f = extract_features("FIRST do this, THEN CALCULATE");
        assert!(f.multi_step_flag && f.tool_flag);
    }

    proptest! {
        #[test]
        fn density_in_unit_interval(s in "\\PC*") {
            let f = extract_features(&s);
            prop_assert!((0.0..=1.0).contains(&f.numerical_density));
            prop_assert_eq!(f, extract_features(&s));
        }

        #[test]
        fn digit_and_space_strings(s in "[0-9 \t\n]{0,40}") {
            let f = extract_features(&s);
            prop_assert!((0.0..=1.0).contains(&f.numerical_density));
            if f.word_count > 0 {
                prop_assert_eq!(f.numerical_density, 1.0);
            }
        }
    }
}
