//! End-to-end experiments: load clients, train every requested model under
//! FedAvg, measure energy and score sustainability, then write reports.

mod config;
mod report;
mod score;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    generate_synthetic, ingest_csv, write_csv, ClientDataset, ClientProfile, DataError, PreparedClient, Segment,
};
use crate::energy::{energy_to_co2, inference_energy_per_1000, EnergyError, EnergyLedger, InferenceEnergy};
use crate::fed::{evaluate_segment, persistence_report, run_federation, FedError};
use crate::metrics::ErrorReport;
use crate::model::{build, serialized_size_kb, Architecture, ModelError};
use crate::sustainability::{rank, s_total, SustainabilityError, SustainabilityInputs, SustainabilityScore};
use crate::tensor::Tensor;

pub use config::{ClientSource, ExperimentConfig, ModelOptions, OUTPUT_DIR_ENV};
pub use report::{format_report, write_reports};
pub use score::{cmd_score, read_score_csv, write_ranking, SCORE_HEADER};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration:\n{}", .0.iter().map(|p| format!("  - {p}")).collect::<Vec<_>>().join("\n"))]
    InvalidConfig(Vec<String>),
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Score { line: u64, message: String },
    #[error("{0}")]
    NoWindows(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sustainability(#[from] SustainabilityError),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

pub(crate) fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub name: String,
    pub records: usize,
    pub train_windows: usize,
    pub val_windows: usize,
    pub test_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub model: String,
    pub architecture: Architecture,
    pub params: usize,
    pub size_kb: f64,
    pub validation: ErrorReport,
    pub test: ErrorReport,
    pub energy: EnergyLedger,
    pub inference: InferenceEnergy,
    pub co2_g: Option<f64>,
    pub inputs: SustainabilityInputs,
    pub score: SustainabilityScore,
    pub val_mae_by_round: Vec<f64>,
    pub train_loss_by_round: Vec<f64>,
    pub telemetry: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rank: usize,
    pub model: String,
    pub s: f64,
    pub ratio_to_best: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub clients: Vec<ClientSummary>,
    /// Repeat-last-value baseline on the same windows.
    pub persistence_validation: ErrorReport,
    pub persistence_test: ErrorReport,
    pub models: Vec<ModelResult>,
    pub ranking: Vec<RankRow>,
}

/// Materialises every configured client, synthetic ones seeded with `seed + index`.
pub fn load_clients(config: &ExperimentConfig) -> Result<Vec<ClientDataset>> {
    config
        .clients
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let name = c.display_name();
            if let Some(path) = &c.csv {
                return Ok(ingest_csv(path, &name)?.dataset);
            }
            let mut profile = c
                .synthetic_profile()
                .expect("validated source")
                .map_err(|e| ExperimentError::InvalidConfig(vec![e]))?;
            profile.name = name;
            let n = c.samples.unwrap_or(profile.default_samples);
            Ok(generate_synthetic(&profile, n, config.seed.wrapping_add(i as u64))?)
        })
        .collect()
}

fn inference_batch(clients: &[PreparedClient], n: usize) -> Result<Tensor<f32>> {
    let mut parts = Vec::new();
    let mut remaining = n;
    for c in clients {
        if remaining == 0 {
            break;
        }
        let take = remaining.min(c.test.len());
        if take > 0 {
            parts.push(c.test.batch(0, take).0);
            remaining -= take;
        }
    }
    if parts.is_empty() {
        return Err(ExperimentError::NoWindows("no test windows for inference measurement".into()));
    }
    Ok(Tensor::concat_rows(&parts).map_err(ModelError::from)?)
}

fn require(report: Option<ErrorReport>, what: &str) -> Result<ErrorReport> {
    report.ok_or_else(|| ExperimentError::NoWindows(format!("no client has {what} windows")))
}

fn run_model(
    config: &ExperimentConfig,
    clients: &[PreparedClient],
    inference_x: &Tensor<f32>,
    arch: Architecture,
) -> Result<ModelResult> {
    let spec = config.spec(arch);
    let fed = config.federation();
    let telemetry = config.output_dir.join("telemetry").join(format!("{}.jsonl", arch.label()));
    let file = File::create(&telemetry).map_err(io_error(&telemetry))?;
    let mut writer = BufWriter::new(file);
    log::info!("training {} ({} rounds)", arch.label(), fed.rounds);
    let init = build(&spec, fed.seed)?;
    let size_kb = serialized_size_kb(&init);
    let outcome = run_federation(clients, &spec, &fed, &config.energy, Some(&mut writer))?;

    let validation = require(evaluate_segment(&outcome.params, &spec, clients, Segment::Val)?, "validation")?;
    let test = require(evaluate_segment(&outcome.params, &spec, clients, Segment::Test)?, "test")?;
    let inference = inference_energy_per_1000(&outcome.params, &spec, inference_x, &config.energy)?;
    let mut energy = outcome.ledger;
    energy.set_inference(&inference);
    let co2_g = config
        .grid_intensity_g_per_kwh
        .map(|g| energy_to_co2(energy.train_wh, g))
        .transpose()?;
    let inputs = SustainabilityInputs {
        e_val: validation.mean_mae,
        c_tr: energy.train_wh,
        ds: size_kb,
        e_test: test.mean_mae,
        c_inf: inference.wh_per_1000,
        exponents: config.exponents,
    };
    let score = s_total(&inputs)?;
    log::info!("{}: val MAE {:.4e}, S {:.4e}", arch.label(), validation.mean_mae, score.s);
    Ok(ModelResult {
        model: arch.label().to_string(),
        architecture: arch,
        params: init.total_params(),
        size_kb,
        validation,
        test,
        energy,
        inference,
        co2_g,
        inputs,
        score,
        val_mae_by_round: outcome
            .rounds
            .iter()
            .map(|r| r.validation.as_ref().map_or(f64::NAN, |v| v.mean_mae))
            .collect(),
        train_loss_by_round: outcome.rounds.iter().map(|r| r.mean_loss).collect(),
        telemetry,
    })
}

/// Trains and scores every model in `config`, writing all reports to its output directory.
pub fn cmd_run(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let archs = config.architectures().map_err(|e| ExperimentError::InvalidConfig(vec![e]))?;
    let datasets = load_clients(config)?;
    let clients = datasets
        .iter()
        .map(|d| PreparedClient::new(d, config.window))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let summaries = datasets
        .iter()
        .zip(&clients)
        .map(|(d, c)| ClientSummary {
            name: c.client_id.clone(),
            records: d.len(),
            train_windows: c.train.len(),
            val_windows: c.val.len(),
            test_windows: c.test.len(),
        })
        .collect();
    let persistence_validation = require(persistence_report(&clients, Segment::Val)?, "validation")?;
    let persistence_test = require(persistence_report(&clients, Segment::Test)?, "test")?;
    let inference_x = inference_batch(&clients, config.inference_samples)?;

    let telemetry_dir = config.output_dir.join("telemetry");
    std::fs::create_dir_all(&telemetry_dir).map_err(io_error(&telemetry_dir))?;
    let run = |&arch: &Architecture| run_model(config, &clients, &inference_x, arch);
    let models = if config.concurrent_models {
        archs.par_iter().map(run).collect::<Result<Vec<_>>>()?
    } else {
        archs.iter().map(run).collect::<Result<Vec<_>>>()?
    };

    let named: Vec<(String, SustainabilityInputs)> = models.iter().map(|m| (m.model.clone(), m.inputs)).collect();
    let ranking = rank(&named)?
        .into_iter()
        .map(|e| RankRow {
            rank: e.rank,
            model: e.name,
            s: e.score.s,
            ratio_to_best: e.ratio_to_best,
        })
        .collect();
    let report = ExperimentReport {
        seed: config.seed,
        clients: summaries,
        persistence_validation,
        persistence_test,
        models,
        ranking,
    };
    write_reports(&report, &config.output_dir)?;
    Ok(report)
}

/// Writes a synthetic trace in the ingest schema. `n` defaults to the profile's real length.
pub fn cmd_synth(profile: &str, n: Option<usize>, seed: u64, out: &Path) -> Result<ClientDataset> {
    let profile = ClientProfile::preset(profile)?;
    let dataset = generate_synthetic(&profile, n.unwrap_or(profile.default_samples), seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    }
    write_csv(&dataset, out)?;
    Ok(dataset)
}
