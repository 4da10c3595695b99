use std::path::Path;

use chrono::{DateTime, NaiveDateTime};

use super::{ClientDataset, DataError, Result, TrafficRecord, FEATURE_NAMES, NUM_FEATURES};

pub const CSV_HEADER: &str =
    "timestamp,down,up,rnti_count,mcs_down,mcs_down_var,mcs_up,mcs_up_var,rb_down,rb_down_var,rb_up,rb_up_var";

const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// A parsed trace and the number of rows that arrived out of order.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: ClientDataset,
    pub out_of_order: usize,
}

fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(secs) = s.parse::<i64>() {
        return Some(secs);
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.timestamp());
    }
    [TIME_FORMAT, "%Y-%m-%d %H:%M:%S"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(|t| t.and_utc().timestamp())
}

/// Reads a trace. Row numbers in errors are 1-based file lines (the header is row 1).
/// Columns are matched by name; extra columns are ignored.
pub fn ingest_csv(path: impl AsRef<Path>, client_id: &str) -> Result<Ingested> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let csv_err = |e: csv::Error| DataError::Csv {
        row: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    };

    let header = reader.headers().map_err(csv_err)?.clone();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let ts_col = column("timestamp")?;
    let feature_cols = FEATURE_NAMES
        .iter()
        .map(|n| column(n))
        .collect::<Result<Vec<_>>>()?;

    let mut rows: Vec<(u64, TrafficRecord)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let row = record.position().map_or(0, |p| p.line());
        let cell = |i: usize| record.get(i).unwrap_or("");
        let timestamp = parse_timestamp(cell(ts_col)).ok_or_else(|| DataError::NonNumeric {
            row,
            column: "timestamp".into(),
            value: cell(ts_col).to_string(),
        })?;
        let mut features = [0.0; NUM_FEATURES];
        for (f, &col) in feature_cols.iter().enumerate() {
            let text = cell(col);
            let value = text
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::NonNumeric {
                    row,
                    column: FEATURE_NAMES[f].into(),
                    value: text.to_string(),
                })?;
            if value < 0.0 {
                return Err(DataError::NegativeFeature {
                    row,
                    column: FEATURE_NAMES[f].into(),
                    value,
                });
            }
            features[f] = value;
        }
        rows.push((row, TrafficRecord { timestamp, features }));
    }

    let out_of_order = rows
        .windows(2)
        .filter(|w| w[1].1.timestamp < w[0].1.timestamp)
        .count();
    if out_of_order > 0 {
        log::warn!("{}: {out_of_order} out-of-order row(s), sorted by timestamp", path.display());
    }
    rows.sort_by_key(|(_, r)| r.timestamp);
    if let Some(w) = rows.windows(2).find(|w| w[0].1.timestamp == w[1].1.timestamp) {
        return Err(DataError::DuplicateTimestamp {
            row: w[0].0.max(w[1].0),
            timestamp: w[1].1.timestamp,
        });
    }
    let dataset = ClientDataset::new(client_id, rows.into_iter().map(|(_, r)| r).collect())?;
    Ok(Ingested { dataset, out_of_order })
}

/// Writes a trace in the ingest schema with ISO-8601 (UTC) timestamps.
pub fn write_csv(dataset: &ClientDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(|e| io_err(e.into()))?;
    let header: Vec<&str> = CSV_HEADER.split(',').collect();
    writer.write_record(&header).map_err(|e| io_err(e.into()))?;
    for r in dataset.records() {
        let ts = DateTime::from_timestamp(r.timestamp, 0)
            .map(|t| t.format(TIME_FORMAT).to_string())
            .unwrap_or_else(|| r.timestamp.to_string());
        let mut fields = vec![ts];
        fields.extend(r.features.iter().map(|v| v.to_string()));
        writer.write_record(&fields).map_err(|e| io_err(e.into()))?;
    }
    writer.flush().map_err(io_err)
}
