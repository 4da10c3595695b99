//! FedAvg over simulated base stations.

mod eval;
mod local;

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PreparedClient;
use crate::energy::{EnergyLedger, EnergyModel};
use crate::metrics::{ErrorReport, MetricsError};
use crate::model::{build, serialized_size_kb, ModelError, ModelSpec, ParameterSet};
use crate::tensor::TensorError;

pub use eval::{evaluate_segment, persistence_report, predict_scaled};
pub use local::{batch_loss, local_training, Forecaster, LocalUpdate, OptimizerKind, Samples};

#[derive(Debug, Error)]
pub enum FedError {
    #[error("invalid federation config: {0}")]
    InvalidConfig(String),
    #[error("no clients with training data")]
    NoClients,
    #[error("client has no training samples")]
    EmptyClient,
    #[error("client updates differ in parameter names or shapes")]
    StructureMismatch,
    #[error("aggregate sample count is zero")]
    ZeroSamples,
    #[error("telemetry: {0}")]
    Telemetry(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl From<TensorError> for FedError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

pub type Result<T, E = FedError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub participation_fraction: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Train a round's clients on the rayon pool. Results are identical either way.
    pub parallel_clients: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            local_epochs: 3,
            batch_size: 128,
            learning_rate: 0.01,
            participation_fraction: 1.0,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            parallel_clients: true,
        }
    }
}

impl FederationConfig {
    /// Every violated constraint, or empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.rounds < 1 {
            out.push("rounds must be at least 1".to_string());
        }
        if self.batch_size < 1 {
            out.push("batch_size must be at least 1".to_string());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            out.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            out.push(format!(
                "participation_fraction must be in (0, 1], got {}",
                self.participation_fraction
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems() {
            p if p.is_empty() => Ok(()),
            p => Err(FedError::InvalidConfig(p.join("; "))),
        }
    }
}

/// Independent, replayable stream for one round.
pub fn round_rng(seed: u64, round: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round as u64);
    rng
}

/// `ceil(fraction · n)` distinct client indices, ascending.
pub fn select_participants<R: Rng + ?Sized>(n_clients: usize, fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    if n_clients == 0 {
        return Err(FedError::NoClients);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(FedError::InvalidConfig(format!("participation fraction {fraction}")));
    }
    // Guard against 0.7 * 10 = 7.000000000000001.
    let k = ((fraction * n_clients as f64 - 1e-9).ceil() as usize).clamp(1, n_clients);
    let mut picked = rand::seq::index::sample(rng, n_clients, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Sample-weighted mean `Σ (n_k / n_r) w_k`, accumulated in f64.
pub fn aggregate(updates: &[(ParameterSet, usize)]) -> Result<ParameterSet> {
    let (first, _) = updates.first().ok_or(FedError::ZeroSamples)?;
    if updates.iter().any(|(w, _)| !w.same_structure(first)) {
        return Err(FedError::StructureMismatch);
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(FedError::ZeroSamples);
    }
    let weights: Vec<f64> = updates.iter().map(|(_, n)| *n as f64 / total as f64).collect();
    let mut out = first.zeros_like();
    let sources: Vec<Vec<&[f32]>> = updates
        .iter()
        .map(|(w, _)| w.iter().map(|(_, t)| t.data()).collect())
        .collect();
    for (p, tensor) in out.tensors_mut().enumerate() {
        for (i, value) in tensor.data_mut().iter_mut().enumerate() {
            let acc: f64 = sources
                .iter()
                .zip(&weights)
                .map(|(src, a)| a * src[p][i] as f64)
                .sum();
            *value = acc as f32;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 1-based.
    pub round: usize,
    /// Clients that trained this round.
    pub participants: Vec<String>,
    /// `n_k` per participant, same order.
    pub samples: Vec<usize>,
    /// `n_r = Σ n_k`.
    pub total_samples: usize,
    pub mean_loss: f64,
    pub train_wh: f64,
    /// Download plus upload for every participant.
    pub kb_transmitted: f64,
    /// Global model on every client's validation windows.
    pub validation: Option<ErrorReport>,
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub params: ParameterSet,
    pub rounds: Vec<RoundReport>,
    pub ledger: EnergyLedger,
    pub client_ledgers: BTreeMap<String, EnergyLedger>,
}

#[derive(Serialize)]
struct TelemetryRecord<'a> {
    round: usize,
    client: &'a str,
    loss: f64,
    wh: f64,
    kb: f64,
    samples: usize,
}

/// Runs `R` rounds of broadcast, local training and aggregation from the
/// model initialised with `config.seed`.
pub fn run_federation(
    clients: &[PreparedClient],
    spec: &ModelSpec,
    config: &FederationConfig,
    energy: &EnergyModel,
    telemetry: Option<&mut dyn Write>,
) -> Result<FederationOutcome> {
    let init = build(spec, config.seed)?;
    run_federation_from(clients, spec, init, config, energy, telemetry)
}

/// [`run_federation`] from explicit initial weights.
pub fn run_federation_from(
    clients: &[PreparedClient],
    spec: &ModelSpec,
    init: ParameterSet,
    config: &FederationConfig,
    energy: &EnergyModel,
    mut telemetry: Option<&mut dyn Write>,
) -> Result<FederationOutcome> {
    config.validate()?;
    spec.validate()?;
    energy.validate().map_err(|e| FedError::InvalidConfig(e.to_string()))?;
    if clients.iter().all(|c| c.train.is_empty()) {
        return Err(FedError::NoClients);
    }
    let size_kb = serialized_size_kb(&init);
    let mut w = init;
    let mut ledger = EnergyLedger::default();
    let mut client_ledgers: BTreeMap<String, EnergyLedger> =
        clients.iter().map(|c| (c.client_id.clone(), EnergyLedger::default())).collect();
    let mut rounds = Vec::with_capacity(config.rounds);

    for round in 1..=config.rounds {
        let selected = select_participants(clients.len(), config.participation_fraction, &mut round_rng(config.seed, round))?;
        let train = |&k: &usize| -> Option<Result<(usize, LocalUpdate)>> {
            let client = &clients[k];
            if client.train.is_empty() {
                log::warn!("round {round}: client {} has no training windows, skipped", client.client_id);
                return None;
            }
            Some(local_training(spec, &client.train, &w, config, energy).map(|u| (k, u)))
        };
        let results: Vec<_> = if config.parallel_clients {
            selected.par_iter().filter_map(train).collect()
        } else {
            selected.iter().filter_map(train).collect()
        };
        let updates = results.into_iter().collect::<Result<Vec<_>>>()?;

        let mut report = RoundReport {
            round,
            participants: Vec::with_capacity(updates.len()),
            samples: Vec::with_capacity(updates.len()),
            total_samples: 0,
            mean_loss: 0.0,
            train_wh: 0.0,
            kb_transmitted: 2.0 * updates.len() as f64 * size_kb,
            validation: None,
        };
        for (k, u) in &updates {
            let id = &clients[*k].client_id;
            let client_ledger = client_ledgers.get_mut(id).expect("known client");
            client_ledger.add_training(&u.energy);
            client_ledger.add_comm_kb(2.0 * size_kb);
            report.participants.push(id.clone());
            report.samples.push(u.samples);
            report.total_samples += u.samples;
            report.train_wh += u.energy.wh;
            ledger.add_training(&u.energy);
            if let Some(out) = telemetry.as_deref_mut() {
                let record = TelemetryRecord {
                    round,
                    client: id,
                    loss: u.loss,
                    wh: u.energy.wh,
                    kb: 2.0 * size_kb,
                    samples: u.samples,
                };
                serde_json::to_writer(&mut *out, &record).map_err(std::io::Error::from)?;
                writeln!(out)?;
            }
        }
        ledger.add_comm_kb(report.kb_transmitted);
        if updates.is_empty() {
            log::warn!("round {round}: no participant had training data; global model unchanged");
        } else {
            report.mean_loss = updates.iter().map(|(_, u)| u.loss).sum::<f64>() / updates.len() as f64;
            let weighted: Vec<(ParameterSet, usize)> = updates.into_iter().map(|(_, u)| (u.params, u.samples)).collect();
            w = aggregate(&weighted)?;
        }
        report.validation = evaluate_segment(&w, spec, clients, crate::data::Segment::Val)?;
        if let Some(v) = &report.validation {
            log::info!("round {round}/{}: loss {:.5}, val MAE {:.6e}", config.rounds, report.mean_loss, v.mean_mae);
        }
        rounds.push(report);
    }
    if let Some(out) = telemetry {
        out.flush()?;
    }
    Ok(FederationOutcome {
        params: w,
        rounds,
        ledger,
        client_ledgers,
    })
}

/// Plain training of one client for `R · E` epochs from the seeded initial model.
pub fn train_centralized(
    client: &PreparedClient,
    spec: &ModelSpec,
    config: &FederationConfig,
    energy: &EnergyModel,
) -> Result<LocalUpdate> {
    config.validate()?;
    let init = build(spec, config.seed)?;
    let centralized = FederationConfig {
        local_epochs: config.rounds * config.local_epochs,
        ..config.clone()
    };
    local_training(spec, &client.train, &init, &centralized, energy)
}

#[cfg(test)]
mod tests;
