use serde::{Deserialize, Serialize};

use super::{DataError, Result, TrafficRecord, NUM_FEATURES};

/// Per-feature min-max scaling to `[0, 1]`. Constant features map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    min: [f64; NUM_FEATURES],
    max: [f64; NUM_FEATURES],
}

impl Scaler {
    pub fn fit(records: &[TrafficRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(DataError::InvalidArgument("cannot fit a scaler on an empty segment".into()));
        }
        let mut min = [f64::INFINITY; NUM_FEATURES];
        let mut max = [f64::NEG_INFINITY; NUM_FEATURES];
        for r in records {
            for (i, &v) in r.features.iter().enumerate() {
                min[i] = min[i].min(v);
                max[i] = max[i].max(v);
            }
        }
        Ok(Self { min, max })
    }

    pub fn min(&self) -> &[f64; NUM_FEATURES] {
        &self.min
    }

    pub fn max(&self) -> &[f64; NUM_FEATURES] {
        &self.max
    }

    pub fn apply_feature(&self, feature: usize, value: f64) -> f64 {
        let range = self.max[feature] - self.min[feature];
        if range > 0.0 {
            (value - self.min[feature]) / range
        } else {
            0.0
        }
    }

    pub fn invert_feature(&self, feature: usize, scaled: f64) -> f64 {
        scaled * (self.max[feature] - self.min[feature]) + self.min[feature]
    }

    pub fn apply(&self, features: &[f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        std::array::from_fn(|i| self.apply_feature(i, features[i]))
    }

    pub fn invert(&self, scaled: &[f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        std::array::from_fn(|i| self.invert_feature(i, scaled[i]))
    }
}
