//! Per-base-station traffic traces: ingest, synthesis, splitting, windowing and scaling.

mod csv_io;
mod scaler;
mod synthetic;

use thiserror::Error;

use crate::tensor::Tensor;

pub use csv_io::{ingest_csv, write_csv, Ingested, CSV_HEADER};
pub use scaler::Scaler;
pub use synthetic::{generate_synthetic, ClientProfile, FeatureRange, SAMPLE_SPACING_SECS};

pub const NUM_FEATURES: usize = 11;
pub const NUM_TARGETS: usize = 5;

/// Column names in record order.
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "down",
    "up",
    "rnti_count",
    "mcs_down",
    "mcs_down_var",
    "mcs_up",
    "mcs_up_var",
    "rb_down",
    "rb_down_var",
    "rb_up",
    "rb_up_var",
];

/// Forecast targets: down, up, rnti_count, rb_down, rb_up.
pub const TARGET_INDICES: [usize; NUM_TARGETS] = [0, 1, 2, 7, 9];

pub const TRAIN_FRACTION: f64 = 0.6;
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("row {row}: {message}")]
    Csv { row: u64, message: String },
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("row {row}: column `{column}` is not numeric: {value:?}")]
    NonNumeric { row: u64, column: String, value: String },
    #[error("row {row}: column `{column}` is negative ({value})")]
    NegativeFeature { row: u64, column: String, value: f64 },
    #[error("row {row}: duplicate timestamp {timestamp}")]
    DuplicateTimestamp { row: u64, timestamp: i64 },
    #[error("record {index}: timestamps must be strictly increasing")]
    NotIncreasing { index: usize },
    #[error("record {index}: feature `{feature}` must be finite and non-negative, got {value}")]
    InvalidFeature { index: usize, feature: &'static str, value: f64 },
    #[error("client {0}: training segment is empty")]
    EmptyTrainSegment(String),
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficRecord {
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
    pub features: [f64; NUM_FEATURES],
}

impl TrafficRecord {
    pub fn targets(&self) -> [f64; NUM_TARGETS] {
        TARGET_INDICES.map(|i| self.features[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    Train,
    Val,
    Test,
}

/// Chronological split sizes: floor(0.6 L), floor(0.2 L), remainder.
pub fn split_points(len: usize) -> (usize, usize) {
    let train = (len as f64 * TRAIN_FRACTION).floor() as usize;
    let val = (len as f64 * VAL_FRACTION).floor() as usize;
    (train, train + val)
}

/// One base station's validated, time-ordered trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    client_id: String,
    records: Vec<TrafficRecord>,
    split_points: (usize, usize),
}

impl ClientDataset {
    pub fn new(client_id: impl Into<String>, records: Vec<TrafficRecord>) -> Result<Self> {
        for (index, r) in records.iter().enumerate() {
            for (f, &value) in r.features.iter().enumerate() {
                if !value.is_finite() || value < 0.0 {
                    return Err(DataError::InvalidFeature {
                        index,
                        feature: FEATURE_NAMES[f],
                        value,
                    });
                }
            }
            if index > 0 && r.timestamp <= records[index - 1].timestamp {
                return Err(DataError::NotIncreasing { index });
            }
        }
        let split_points = split_points(records.len());
        Ok(Self {
            client_id: client_id.into(),
            records,
            split_points,
        })
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn records(&self) -> &[TrafficRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `(train_end, val_end)` as record indices.
    pub fn split_points(&self) -> (usize, usize) {
        self.split_points
    }

    pub fn segment(&self, segment: Segment) -> &[TrafficRecord] {
        let (a, b) = self.split_points;
        match segment {
            Segment::Train => &self.records[..a],
            Segment::Val => &self.records[a..b],
            Segment::Test => &self.records[b..],
        }
    }
}

/// `W` consecutive raw records and the targets of the record that follows.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `[W, 11]`
    pub x: Tensor<f64>,
    /// `[5]`
    pub y: Tensor<f64>,
}

/// Number of windows a segment of length `len` yields.
pub fn window_count(len: usize, window: usize) -> usize {
    len.saturating_sub(window)
}

/// Sliding windows over one segment only, so no sample crosses a split.
pub fn window(dataset: &ClientDataset, window: usize, segment: Segment) -> Vec<WindowSample> {
    let records = dataset.segment(segment);
    (0..window_count(records.len(), window))
        .map(|start| {
            let x = records[start..start + window]
                .iter()
                .flat_map(|r| r.features)
                .collect();
            WindowSample {
                x: Tensor::new(vec![window, NUM_FEATURES], x).expect("window shape"),
                y: Tensor::new(vec![NUM_TARGETS], records[start + window].targets().to_vec())
                    .expect("target shape"),
            }
        })
        .collect()
}

/// Scaled model inputs and targets for one segment, plus raw targets for metrics.
#[derive(Debug, Clone)]
pub struct WindowSet {
    window: usize,
    len: usize,
    x: Vec<f32>,
    y: Vec<f32>,
    y_raw: Vec<f64>,
    y_last_raw: Vec<f64>,
}

impl WindowSet {
    fn build(records: &[TrafficRecord], window: usize, scaler: &Scaler) -> Self {
        let len = window_count(records.len(), window);
        let scaled: Vec<[f64; NUM_FEATURES]> = records.iter().map(|r| scaler.apply(&r.features)).collect();
        let mut x = Vec::with_capacity(len * window * NUM_FEATURES);
        let mut y = Vec::with_capacity(len * NUM_TARGETS);
        let mut y_raw = Vec::with_capacity(len * NUM_TARGETS);
        let mut y_last_raw = Vec::with_capacity(len * NUM_TARGETS);
        for start in 0..len {
            for row in &scaled[start..start + window] {
                x.extend(row.iter().map(|&v| v as f32));
            }
            let next = start + window;
            y.extend(TARGET_INDICES.iter().map(|&i| scaled[next][i] as f32));
            y_raw.extend(records[next].targets());
            y_last_raw.extend(records[next - 1].targets());
        }
        Self {
            window,
            len,
            x,
            y,
            y_raw,
            y_last_raw,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Scaled inputs `[n, W, 11]` and targets `[n, 5]` for samples `start..end`.
    pub fn batch(&self, start: usize, end: usize) -> (Tensor<f32>, Tensor<f32>) {
        let end = end.min(self.len);
        let n = end.saturating_sub(start);
        let step = self.window * NUM_FEATURES;
        let x = Tensor::new(vec![n, self.window, NUM_FEATURES], self.x[start * step..end * step].to_vec())
            .expect("batch shape");
        let y = Tensor::new(vec![n, NUM_TARGETS], self.y[start * NUM_TARGETS..end * NUM_TARGETS].to_vec())
            .expect("batch shape");
        (x, y)
    }

    /// Raw-unit targets `[n, 5]`.
    pub fn raw_targets(&self) -> Tensor<f64> {
        Tensor::new(vec![self.len, NUM_TARGETS], self.y_raw.clone()).expect("target shape")
    }

    /// Persistence forecast in raw units: each window's last-row targets.
    pub fn persistence(&self) -> Tensor<f64> {
        Tensor::new(vec![self.len, NUM_TARGETS], self.y_last_raw.clone()).expect("target shape")
    }
}

/// A client's dataset after fitting the scaler on its training segment.
#[derive(Debug, Clone)]
pub struct PreparedClient {
    pub client_id: String,
    pub scaler: Scaler,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

impl PreparedClient {
    pub fn new(dataset: &ClientDataset, window: usize) -> Result<Self> {
        let scaler = Scaler::fit(dataset.segment(Segment::Train))
            .map_err(|_| DataError::EmptyTrainSegment(dataset.client_id().to_string()))?;
        let set = |s| WindowSet::build(dataset.segment(s), window, &scaler);
        let (train, val, test) = (set(Segment::Train), set(Segment::Val), set(Segment::Test));
        Ok(Self {
            client_id: dataset.client_id().to_string(),
            scaler,
            train,
            val,
            test,
        })
    }

    pub fn segment(&self, segment: Segment) -> &WindowSet {
        match segment {
            Segment::Train => &self.train,
            Segment::Val => &self.val,
            Segment::Test => &self.test,
        }
    }

    /// Maps scaled target predictions `[n, 5]` back to raw units.
    pub fn invert_targets(&self, scaled: &Tensor<f32>) -> Tensor<f64> {
        let data = scaled
            .data()
            .chunks(NUM_TARGETS)
            .flat_map(|row| {
                row.iter()
                    .zip(TARGET_INDICES)
                    .map(|(&v, f)| self.scaler.invert_feature(f, v as f64))
                    .collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(scaled.shape().to_vec(), data).expect("same shape")
    }
}
