use std::fmt::Write as _;
use std::path::Path;

use crate::metrics::ErrorReport;

use super::score::{csv_write_error, SCORE_HEADER};
use super::{io_error, ExperimentReport, Result};

fn area_columns(report: &ErrorReport, names: &[String]) -> String {
    names
        .iter()
        .map(|n| match report.per_client.get(n) {
            Some(c) => format!("{:>10.4}", c.mae / 1e6),
            None => format!("{:>10}", "-"),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Fixed-width summary: per-area MAE (×10⁶), energy, size and scores.
pub fn format_report(report: &ExperimentReport) -> String {
    let names: Vec<String> = report.clients.iter().map(|c| c.name.clone()).collect();
    let area_header = names.iter().map(|n| format!("{:>10.10}", n)).collect::<Vec<_>>().join(" ");
    let mut out = String::new();
    let _ = writeln!(out, "seed {}", report.seed);
    for c in &report.clients {
        let _ = writeln!(
            out,
            "client {:<12} records {:>7}  windows train {:>6} val {:>6} test {:>6}",
            c.name, c.records, c.train_windows, c.val_windows, c.test_windows
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "MAE in units of 1e6; E_Tr in Wh; E_Inf in Wh per 1000 predictions; size in kB");
    let _ = writeln!(
        out,
        "{:<18} | val {} | test {} | {:>10} {:>9} {:>9} | {:>10} {:>10} {:>10}",
        "model", area_header, area_header, "E_Tr", "E_Inf", "size", "S_Tr", "S_Inf", "S"
    );
    let _ = writeln!(
        out,
        "{:<18} | val {} | test {} |",
        "persistence",
        area_columns(&report.persistence_validation, &names),
        area_columns(&report.persistence_test, &names)
    );
    for m in &report.models {
        let _ = writeln!(
            out,
            "{:<18} | val {} | test {} | {:>10.4} {:>9.4} {:>9.1} | {:>10.4e} {:>10.4e} {:>10.4e}",
            m.model,
            area_columns(&m.validation, &names),
            area_columns(&m.test, &names),
            m.energy.train_wh,
            m.inference.wh_per_1000,
            m.size_kb,
            m.score.s_tr,
            m.score.s_inf,
            m.score.s
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "{:>4}  {:<18} {:>12} {:>7}", "rank", "model", "S", "ratio");
    for r in &report.ranking {
        let _ = writeln!(out, "{:>4}  {:<18} {:>12.4e} {:>7.3}", r.rank, r.model, r.s, r.ratio_to_best);
    }
    out
}

/// Writes `report.json`, `report.txt`, `rounds.csv`, `energy_error.csv` and `scores.csv`.
pub fn write_reports(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    let json = dir.join("report.json");
    let text = serde_json::to_string_pretty(report).map_err(|e| super::ExperimentError::Io {
        path: json.clone(),
        source: e.into(),
    })?;
    std::fs::write(&json, text).map_err(io_error(&json))?;
    let txt = dir.join("report.txt");
    std::fs::write(&txt, format_report(report)).map_err(io_error(&txt))?;

    let path = dir.join("rounds.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_write_error(&path, e))?;
    w.write_record(["model", "round", "train_loss", "val_mae"]).map_err(|e| csv_write_error(&path, e))?;
    for m in &report.models {
        for (r, (loss, val)) in m.train_loss_by_round.iter().zip(&m.val_mae_by_round).enumerate() {
            w.write_record([m.model.clone(), (r + 1).to_string(), loss.to_string(), val.to_string()])
                .map_err(|e| csv_write_error(&path, e))?;
        }
    }
    w.flush().map_err(io_error(&path))?;

    let path = dir.join("energy_error.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_write_error(&path, e))?;
    w.write_record([
        "model",
        "e_tr_wh",
        "e_inf_wh_per_1000",
        "size_kb",
        "val_mae",
        "test_mae",
        "val_nrmse",
        "test_nrmse",
        "comm_kb",
        "co2_g",
        "s_tr",
        "s_inf",
        "s",
    ])
    .map_err(|e| csv_write_error(&path, e))?;
    for m in &report.models {
        w.write_record([
            m.model.clone(),
            m.energy.train_wh.to_string(),
            m.inference.wh_per_1000.to_string(),
            m.size_kb.to_string(),
            m.validation.mean_mae.to_string(),
            m.test.mean_mae.to_string(),
            m.validation.mean_nrmse.to_string(),
            m.test.mean_nrmse.to_string(),
            m.energy.comm_kb.to_string(),
            m.co2_g.map(|c| c.to_string()).unwrap_or_default(),
            m.score.s_tr.to_string(),
            m.score.s_inf.to_string(),
            m.score.s.to_string(),
        ])
        .map_err(|e| csv_write_error(&path, e))?;
    }
    w.flush().map_err(io_error(&path))?;

    let path = dir.join("scores.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_write_error(&path, e))?;
    w.write_record(SCORE_HEADER).map_err(|e| csv_write_error(&path, e))?;
    for m in &report.models {
        let i = &m.inputs;
        w.write_record([
            m.model.clone(),
            i.e_val.to_string(),
            i.c_tr.to_string(),
            i.ds.to_string(),
            i.e_test.to_string(),
            i.c_inf.to_string(),
        ])
        .map_err(|e| csv_write_error(&path, e))?;
    }
    w.flush().map_err(io_error(&path))
}
