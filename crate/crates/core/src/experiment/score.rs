use std::path::Path;

use crate::sustainability::{format_ranking, rank, Exponents, RankedEntry, SustainabilityInputs};

use super::{io_error, ExperimentError, Result};

pub const SCORE_HEADER: [&str; 6] = ["name", "e_val", "c_tr", "ds_kb", "e_test", "c_inf"];

/// Reads `name,e_val,c_tr,ds_kb,e_test,c_inf` rows. Errors name the 1-based file line.
pub fn read_score_csv(path: &Path, exponents: Exponents) -> Result<Vec<(String, SustainabilityInputs)>> {
    let file = std::fs::File::open(path).map_err(io_error(path))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| csv_error(&e, 1))?.clone();
    let columns = SCORE_HEADER
        .iter()
        .map(|name| {
            headers.iter().position(|h| h.eq_ignore_ascii_case(name)).ok_or_else(|| ExperimentError::Score {
                line: 1,
                message: format!("missing column `{name}`"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&e, 0))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(columns[i]).unwrap_or("");
        let number = |i: usize| -> Result<f64> {
            let raw = field(i);
            let v: f64 = raw.parse().map_err(|_| ExperimentError::Score {
                line,
                message: format!("`{}` is not a number: {raw:?}", SCORE_HEADER[i]),
            })?;
            if !v.is_finite() || v < 0.0 {
                return Err(ExperimentError::Score {
                    line,
                    message: format!("`{}` must be finite and non-negative, got {v}", SCORE_HEADER[i]),
                });
            }
            Ok(v)
        };
        let name = field(0);
        if name.is_empty() {
            return Err(ExperimentError::Score {
                line,
                message: "empty model name".into(),
            });
        }
        rows.push((
            name.to_string(),
            SustainabilityInputs {
                e_val: number(1)?,
                c_tr: number(2)?,
                ds: number(3)?,
                e_test: number(4)?,
                c_inf: number(5)?,
                exponents,
            },
        ));
    }
    if rows.is_empty() {
        return Err(ExperimentError::Score {
            line: 2,
            message: "no data rows".into(),
        });
    }
    Ok(rows)
}

fn csv_error(e: &csv::Error, fallback: u64) -> ExperimentError {
    ExperimentError::Score {
        line: e.position().map_or(fallback, |p| p.line()),
        message: e.to_string(),
    }
}

/// Scores and ranks a CSV of precomputed inputs.
pub fn cmd_score(path: &Path, exponents: Exponents) -> Result<Vec<RankedEntry>> {
    exponents.validate()?;
    Ok(rank(&read_score_csv(path, exponents)?)?)
}

/// Writes `ranking.txt` and `ranking.csv` into `dir`.
pub fn write_ranking(ranked: &[RankedEntry], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    let txt = dir.join("ranking.txt");
    std::fs::write(&txt, format_ranking(ranked)).map_err(io_error(&txt))?;
    let path = dir.join("ranking.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_write_error(&path, e))?;
    let header = ["rank", "name", "e_val", "c_tr", "ds_kb", "e_test", "c_inf", "s_tr", "s_inf", "s", "ratio_to_best"];
    w.write_record(header).map_err(|e| csv_write_error(&path, e))?;
    for e in ranked {
        let i = &e.inputs;
        let row = [
            e.rank.to_string(),
            e.name.clone(),
            i.e_val.to_string(),
            i.c_tr.to_string(),
            i.ds.to_string(),
            i.e_test.to_string(),
            i.c_inf.to_string(),
            e.score.s_tr.to_string(),
            e.score.s_inf.to_string(),
            e.score.s.to_string(),
            e.ratio_to_best.to_string(),
        ];
        w.write_record(&row).map_err(|e| csv_write_error(&path, e))?;
    }
    w.flush().map_err(io_error(&path))
}

pub(crate) fn csv_write_error(path: &Path, e: csv::Error) -> ExperimentError {
    ExperimentError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}
