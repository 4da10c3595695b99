//! Energy estimation for training and inference, communication volume and CO₂ conversion.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{forward_counted, ModelError, ModelSpec, ParameterSet};
use crate::tensor::Tensor;

pub const JOULES_PER_WH: f64 = 3600.0;
/// Placeholder calibration, not a hardware measurement.
pub const DEFAULT_JOULES_PER_FLOP: f64 = 1e-9;
pub const DEFAULT_RAPL_PATH: &str = "/sys/class/powercap/intel-rapl:0/energy_uj";
const INFERENCE_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("platform energy counters unavailable at {0}")]
    CountersUnavailable(String),
    #[error("invalid energy model: {0}")]
    InvalidModel(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = EnergyError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnergyModel {
    FlopBased {
        joules_per_flop: f64,
    },
    TimePower {
        avg_power_watts: f64,
    },
    /// Cumulative microjoule counter; falls back to `fallback_watts` × wall time
    /// when the counter cannot be read.
    PlatformCounter {
        #[serde(default = "default_rapl_path")]
        path: PathBuf,
        fallback_watts: f64,
    },
}

fn default_rapl_path() -> PathBuf {
    PathBuf::from(DEFAULT_RAPL_PATH)
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self::FlopBased {
            joules_per_flop: DEFAULT_JOULES_PER_FLOP,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        let (name, value) = match self {
            Self::FlopBased { joules_per_flop } => ("joules_per_flop", *joules_per_flop),
            Self::TimePower { avg_power_watts } => ("avg_power_watts", *avg_power_watts),
            Self::PlatformCounter { fallback_watts, .. } => ("fallback_watts", *fallback_watts),
        };
        if value.is_finite() && value > 0.0 {
            Ok(())
        } else {
            Err(EnergyError::InvalidModel(format!("{name} must be positive, got {value}")))
        }
    }
}

/// What happened inside a metered region.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Work {
    pub flops: u64,
    pub wall_seconds: f64,
    /// Platform counter reading delta in microjoules, when available.
    pub counter_uj: Option<u64>,
}

/// Converts a region's work to Wh under `model`.
pub fn meter(work: &Work, model: &EnergyModel) -> Result<f64> {
    match model {
        EnergyModel::FlopBased { joules_per_flop } => Ok(work.flops as f64 * joules_per_flop / JOULES_PER_WH),
        EnergyModel::TimePower { avg_power_watts } => Ok(work.wall_seconds * avg_power_watts / JOULES_PER_WH),
        EnergyModel::PlatformCounter { path, .. } => work
            .counter_uj
            .map(|uj| uj as f64 * 1e-6 / JOULES_PER_WH)
            .ok_or_else(|| EnergyError::CountersUnavailable(path.display().to_string())),
    }
}

fn read_counter(path: &Path) -> Option<u64> {
    std::fs::read_to_string(path).ok()?.trim().parse().ok()
}

/// Open metered region: records wall time and, for platform counters, the start reading.
#[derive(Debug)]
pub struct Meter {
    model: EnergyModel,
    started: Instant,
    counter_start: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub wh: f64,
    pub flops: u64,
    pub wall_seconds: f64,
}

impl Meter {
    pub fn start(model: &EnergyModel) -> Self {
        let counter_start = match model {
            EnergyModel::PlatformCounter { path, .. } => read_counter(path),
            _ => None,
        };
        Self {
            model: model.clone(),
            started: Instant::now(),
            counter_start,
        }
    }

    /// Closes the region. Platform-counter models fall back to time × power
    /// when counters are missing or wrapped.
    pub fn finish(self, flops: u64) -> Measurement {
        let wall_seconds = self.started.elapsed().as_secs_f64();
        let counter_uj = match &self.model {
            EnergyModel::PlatformCounter { path, .. } => self
                .counter_start
                .zip(read_counter(path))
                .and_then(|(a, b)| b.checked_sub(a)),
            _ => None,
        };
        let work = Work {
            flops,
            wall_seconds,
            counter_uj,
        };
        let wh = meter(&work, &self.model).unwrap_or_else(|e| {
            let EnergyModel::PlatformCounter { fallback_watts, .. } = self.model else {
                unreachable!("only platform counters can fail")
            };
            log::warn!("{e}; using {fallback_watts} W time-power estimate");
            wall_seconds * fallback_watts / JOULES_PER_WH
        });
        Measurement {
            wh,
            flops,
            wall_seconds,
        }
    }
}

/// Running energy and communication totals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub train_wh: f64,
    pub inference_wh_per_1000: f64,
    pub total_flops: u64,
    pub wall_seconds: f64,
    pub comm_kb: f64,
}

impl EnergyLedger {
    pub fn add_training(&mut self, m: &Measurement) {
        self.train_wh += m.wh;
        self.total_flops += m.flops;
        self.wall_seconds += m.wall_seconds;
    }

    pub fn add_comm_kb(&mut self, kb: f64) {
        self.comm_kb += kb;
    }

    pub fn set_inference(&mut self, m: &InferenceEnergy) {
        self.inference_wh_per_1000 = m.wh_per_1000;
    }

    /// Adds another ledger's accumulating fields.
    pub fn merge(&mut self, other: &EnergyLedger) {
        self.train_wh += other.train_wh;
        self.total_flops += other.total_flops;
        self.wall_seconds += other.wall_seconds;
        self.comm_kb += other.comm_kb;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceEnergy {
    pub wh_per_1000: f64,
    pub samples: usize,
    /// Measured forward FLOPs divided by the sample count.
    pub flops_per_forward: f64,
    pub wall_seconds: f64,
}

/// Energy of forecasting `inputs` (`[N, W, d]`), scaled to 1000 predictions.
pub fn inference_energy_per_1000(
    params: &ParameterSet,
    spec: &ModelSpec,
    inputs: &Tensor<f32>,
    model: &EnergyModel,
) -> Result<InferenceEnergy> {
    let n = inputs.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(EnergyError::InvalidArgument("inference needs at least one sample".into()));
    }
    let step: usize = inputs.shape()[1..].iter().product();
    let mut rest = inputs.shape().to_vec();
    let meter = Meter::start(model);
    let mut flops = 0u64;
    for start in (0..n).step_by(INFERENCE_CHUNK) {
        let end = (start + INFERENCE_CHUNK).min(n);
        rest[0] = end - start;
        let chunk = Tensor::new(rest.clone(), inputs.data()[start * step..end * step].to_vec())
            .map_err(ModelError::from)?;
        flops += forward_counted(params, spec, &chunk)?.1;
    }
    let m = meter.finish(flops);
    let flops_per_forward = flops as f64 / n as f64;
    let wh_per_1000 = match model {
        EnergyModel::FlopBased { joules_per_flop } => 1000.0 * flops_per_forward * joules_per_flop / JOULES_PER_WH,
        _ => m.wh * 1000.0 / n as f64,
    };
    Ok(InferenceEnergy {
        wh_per_1000,
        samples: n,
        flops_per_forward,
        wall_seconds: m.wall_seconds,
    })
}

/// Grams of CO₂ for `wh` at a grid intensity in g/kWh.
pub fn energy_to_co2(wh: f64, grid_intensity_g_per_kwh: f64) -> Result<f64> {
    if grid_intensity_g_per_kwh.is_nan() || grid_intensity_g_per_kwh < 0.0 {
        return Err(EnergyError::InvalidArgument(format!(
            "grid intensity must be non-negative, got {grid_intensity_g_per_kwh}"
        )));
    }
    Ok(wh / 1000.0 * grid_intensity_g_per_kwh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, Architecture};
    use proptest::prelude::*;

    const FLOP: EnergyModel = EnergyModel::FlopBased { joules_per_flop: 1e-9 };

    fn flops(n: u64) -> Work {
        Work {
            flops: n,
            ..Work::default()
        }
    }

    #[test]
    fn flop_based_one_wh() {
        assert_eq!(meter(&flops(3_600_000_000_000), &FLOP).unwrap(), 1.0);
    }

    #[test]
    fn time_power_ten_wh() {
        let w = Work {
            wall_seconds: 1800.0,
            ..Work::default()
        };
        assert_eq!(meter(&w, &EnergyModel::TimePower { avg_power_watts: 20.0 }).unwrap(), 10.0);
    }

    #[test]
    fn empty_region_is_zero() {
        assert_eq!(meter(&Work::default(), &FLOP).unwrap(), 0.0);
        assert_eq!(meter(&Work::default(), &EnergyModel::TimePower { avg_power_watts: 5.0 }).unwrap(), 0.0);
        assert_eq!(Meter::start(&FLOP).finish(0).wh, 0.0);
    }

    #[test]
    fn platform_counter_delta_and_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("energy_uj");
        let model = EnergyModel::PlatformCounter {
            path: path.clone(),
            fallback_watts: 10.0,
        };
        let w = Work {
            counter_uj: Some(3_600_000_000),
            ..Work::default()
        };
        assert_eq!(meter(&w, &model).unwrap(), 1.0);
        assert!(matches!(meter(&Work::default(), &model), Err(EnergyError::CountersUnavailable(_))));

        // Missing file: soft failure through the time-power fallback.
        let m = Meter::start(&model).finish(10);
        assert!(m.wh >= 0.0 && m.wh <= m.wall_seconds * 10.0 / 3600.0 + 1e-12);

        std::fs::write(&path, "1000\n").unwrap();
        let meter = Meter::start(&model);
        std::fs::write(&path, "7200001000\n").unwrap();
        assert_eq!(meter.finish(0).wh, 2.0);
    }

    #[test]
    fn model_validation() {
        assert!(FLOP.validate().is_ok());
        assert!(EnergyModel::TimePower { avg_power_watts: 0.0 }.validate().is_err());
        assert!(EnergyModel::FlopBased { joules_per_flop: f64::NAN }.validate().is_err());
    }

    #[test]
    fn co2() {
        assert_eq!(energy_to_co2(1000.0, 250.0).unwrap(), 250.0);
        assert_eq!(energy_to_co2(12.0, 0.0).unwrap(), 0.0);
        assert!((energy_to_co2(39.5148, 100.0).unwrap() - 3.95148).abs() < 1e-12);
        assert!(energy_to_co2(1.0, -1.0).is_err());
    }

    #[test]
    fn ledger_accumulates() {
        let mut l = EnergyLedger::default();
        l.add_training(&Measurement { wh: 1.5, flops: 10, wall_seconds: 2.0 });
        l.add_comm_kb(4.0);
        let mut total = EnergyLedger::default();
        total.merge(&l);
        total.merge(&l);
        assert_eq!((total.train_wh, total.total_flops, total.comm_kb), (3.0, 20, 8.0));
    }

    fn small_spec() -> ModelSpec {
        ModelSpec {
            input_dim: 3,
            output_dim: 2,
            window: 4,
            hidden: 8,
            ..ModelSpec::new(Architecture::Lstm)
        }
    }

    #[test]
    fn inference_closed_form() {
        let spec = small_spec();
        let params = build(&spec, 0).unwrap();
        let x = Tensor::full(&[300, 4, 3], 0.3f32);
        let e = inference_energy_per_1000(&params, &spec, &x, &FLOP).unwrap();
        let (_, total) = forward_counted(&params, &spec, &Tensor::full(&[256, 4, 3], 0.3f32)).unwrap();
        let (_, tail) = forward_counted(&params, &spec, &Tensor::full(&[44, 4, 3], 0.3f32)).unwrap();
        let per = (total + tail) as f64 / 300.0;
        assert_eq!(e.flops_per_forward, per);
        assert_eq!(e.wh_per_1000, 1000.0 * per * 1e-9 / 3600.0);
        assert!(inference_energy_per_1000(&params, &spec, &Tensor::zeros(&[0, 4, 3]), &FLOP).is_err());
    }

    #[test]
    fn inference_scales_to_thousand() {
        // Forward cost is linear in batch apart from a fixed bias add, so doubling
        // the samples keeps the per-1000 figure within that overhead.
        let spec = small_spec();
        let params = build(&spec, 0).unwrap();
        let a = inference_energy_per_1000(&params, &spec, &Tensor::full(&[128, 4, 3], 0.1f32), &FLOP).unwrap();
        let b = inference_energy_per_1000(&params, &spec, &Tensor::full(&[256, 4, 3], 0.1f32), &FLOP).unwrap();
        assert!((a.wh_per_1000 - b.wh_per_1000).abs() / b.wh_per_1000 < 0.01);
    }

    proptest! {
        #[test]
        fn flop_metering_is_additive_and_monotone(a in 0u64..1u64 << 40, b in 0u64..1u64 << 40) {
            let ea = meter(&flops(a), &FLOP).unwrap();
            let eb = meter(&flops(b), &FLOP).unwrap();
            let eab = meter(&flops(a + b), &FLOP).unwrap();
            prop_assert!((ea + eb - eab).abs() <= 1e-12 * eab.max(1e-300));
            prop_assert_eq!(ea <= eb, a <= b);
        }
    }
}
