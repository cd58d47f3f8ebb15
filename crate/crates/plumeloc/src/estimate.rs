//! Common output type for every localization method.

use serde::{Deserialize, Serialize};

/// A single source-position estimate with provenance and timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEstimate {
    /// Method tag, e.g. "map", "kf", "mlp", "pinn", "rl".
    pub method: String,
    /// Estimated source position in meters.
    pub position: (f64, f64),
    /// True source position in meters, when known.
    pub true_source: Option<(f64, f64)>,
    /// Euclidean error in meters versus `true_source`.
    pub error: Option<f64>,
    /// Wall-clock seconds spent producing this estimate (excludes data
    /// generation and any reusable training).
    pub inference_seconds: f64,
    /// Free-form diagnostics ("uninformative data", "boundary-stuck", ...).
    pub notes: Vec<String>,
}

impl SourceEstimate {
    pub fn new(method: &str, position: (f64, f64)) -> Self {
        SourceEstimate {
            method: method.to_string(),
            position,
            true_source: None,
            error: None,
            inference_seconds: 0.0,
            notes: Vec::new(),
        }
    }

    /// Records the truth and computes the Euclidean error. This is the one
    /// place localization error is defined.
    pub fn with_truth(mut self, truth: (f64, f64)) -> Self {
        self.true_source = Some(truth);
        self.error = Some(euclid(self.position, truth));
        self
    }
}

/// Euclidean distance between two positions in meters.
pub fn euclid(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Median of a sample; the mean of the two middle values when the count is
/// even. Panics on an empty slice.
pub fn median_of(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_is_euclidean_distance() {
        let e = SourceEstimate::new("map", (3e-6, 4e-6)).with_truth((0.0, 0.0));
        assert!((e.error.unwrap() - 5e-6).abs() < 1e-18);
    }

    #[test]
    fn median_handles_odd_and_even_counts() {
        assert_eq!(median_of(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median_of(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median_of(&[7.5]), 7.5);
    }
}
