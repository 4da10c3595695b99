use std::f64::consts::TAU;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ClientDataset, DataError, Result, TrafficRecord, NUM_FEATURES};

pub const SAMPLE_SPACING_SECS: i64 = 120;

const DAY_SECS: f64 = 86_400.0;
const WEEK_SECS: f64 = 7.0 * DAY_SECS;
const DAILY_AMPLITUDE: f64 = 0.3;
const WEEKLY_AMPLITUDE: f64 = 0.1;
const NOISE_STD: f64 = 0.1;

/// Decimal exponent of each feature's unit in the published statistics.
const UNIT_EXPONENT: [i32; NUM_FEATURES] = [9, 9, 4, 1, 2, 1, 2, -1, -7, -1, -7];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRange {
    pub min: f64,
    pub max: f64,
}

/// Value ranges and start time of one synthetic base station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub name: String,
    pub ranges: [FeatureRange; NUM_FEATURES],
    /// Seconds since the Unix epoch of the first record.
    pub start: i64,
    /// Trace length of the real station this profile mimics.
    pub default_samples: usize,
}

fn scaled_ranges(min: [&str; NUM_FEATURES], max: [&str; NUM_FEATURES]) -> [FeatureRange; NUM_FEATURES] {
    // Parse "m e k" as one literal so bounds are exactly the decimal values.
    let parse = |m: &str, i: usize| format!("{m}e{}", UNIT_EXPONENT[i]).parse::<f64>().expect("numeric table");
    std::array::from_fn(|i| FeatureRange {
        min: parse(min[i], i),
        max: parse(max[i], i),
    })
}

fn timestamp(y: i32, mo: u32, d: u32, h: u32, mi: u32) -> i64 {
    NaiveDate::from_ymd_opt(y, mo, d)
        .and_then(|date| date.and_hms_opt(h, mi, 0))
        .expect("valid date")
        .and_utc()
        .timestamp()
}

impl ClientProfile {
    pub fn el_born() -> Self {
        Self {
            name: "ElBorn".into(),
            ranges: scaled_ranges(
                ["0.005", "0.0", "0.035", "0.193", "0.337", "0.0", "0.0", "0.009", "0.182", "0.0", "0.0"],
                ["1.887", "0.673", "4.373", "1.653", "1.009", "3.100", "2.410", "6.706", "1.581", "2.236", "0.681"],
            ),
            start: timestamp(2018, 3, 28, 15, 56),
            default_samples: 5421,
        }
    }

    pub fn les_corts() -> Self {
        Self {
            name: "LesCorts".into(),
            ranges: scaled_ranges(
                ["0.0"; NUM_FEATURES],
                ["0.297", "1.058", "2.135", "1.616", "0.993", "3.100", "1.477", "1.241", "0.522", "2.314", "0.940"],
            ),
            start: timestamp(2019, 1, 12, 17, 12),
            default_samples: 8615,
        }
    }

    pub fn poble_sec() -> Self {
        Self {
            name: "PobleSec".into(),
            ranges: scaled_ranges(
                ["0.008", "0.0", "0.056", "0.086", "0.152", "0.0", "0.0", "0.015", "0.231", "0.0", "0.0"],
                ["2.286", "0.625", "1.619", "1.619", "0.969", "3.050", "1.823", "7.398", "1.801", "4.458", "1.026"],
            ),
            start: timestamp(2018, 2, 5, 23, 40),
            default_samples: 19909,
        }
    }

    pub fn presets() -> [Self; 3] {
        [Self::el_born(), Self::les_corts(), Self::poble_sec()]
    }

    /// Looks up a preset by name, ignoring case, punctuation and a `-like` suffix.
    pub fn preset(name: &str) -> Result<Self> {
        let key: String = name
            .to_ascii_lowercase()
            .trim_end_matches("-like")
            .chars()
            .filter(char::is_ascii_alphanumeric)
            .collect();
        Self::presets()
            .into_iter()
            .find(|p| p.name.to_ascii_lowercase() == key)
            .ok_or_else(|| {
                DataError::InvalidArgument(format!(
                    "unknown profile `{name}` (expected ElBorn-like, LesCorts-like or PobleSec-like)"
                ))
            })
    }

    pub fn custom(name: impl Into<String>, ranges: [FeatureRange; NUM_FEATURES], start: i64) -> Result<Self> {
        let profile = Self {
            name: name.into(),
            ranges,
            start,
            default_samples: 0,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.ranges.iter().enumerate() {
            if !(r.min.is_finite() && r.max.is_finite() && r.min >= 0.0 && r.min <= r.max) {
                return Err(DataError::InvalidArgument(format!(
                    "profile {}: feature {i} needs 0 <= min <= max, got [{}, {}]",
                    self.name, r.min, r.max
                )));
            }
        }
        Ok(())
    }
}

/// Daily plus weekly sinusoid around the range midpoint with Gaussian noise,
/// clipped to the profile's range, one record every two minutes.
pub fn generate_synthetic(profile: &ClientProfile, n_samples: usize, seed: u64) -> Result<ClientDataset> {
    if n_samples < 1 {
        return Err(DataError::InvalidArgument("n_samples must be at least 1".into()));
    }
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    // Traffic features share a daily rhythm; each gets a small offset.
    let daily_phase: f64 = rng.random_range(0.0..TAU);
    let weekly_phase: f64 = rng.random_range(0.0..TAU);
    let offsets: [(f64, f64); NUM_FEATURES] =
        std::array::from_fn(|_| (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)));

    let records = (0..n_samples)
        .map(|i| {
            let t = i as f64 * SAMPLE_SPACING_SECS as f64;
            let features = std::array::from_fn(|f| {
                let FeatureRange { min, max } = profile.ranges[f];
                let range = max - min;
                let (od, ow) = offsets[f];
                let v = 0.5 * (min + max)
                    + DAILY_AMPLITUDE * range * (TAU * t / DAY_SECS + daily_phase + od).sin()
                    + WEEKLY_AMPLITUDE * range * (TAU * t / WEEK_SECS + weekly_phase + ow).sin()
                    + NOISE_STD * range * unit.sample(&mut rng);
                v.clamp(min, max)
            });
            TrafficRecord {
                timestamp: profile.start + i as i64 * SAMPLE_SPACING_SECS,
                features,
            }
        })
        .collect();
    ClientDataset::new(profile.name.clone(), records)
}
