use proptest::prelude::*;

use super::*;
use crate::data::{generate_synthetic, ClientDataset, ClientProfile, PreparedClient};
use crate::model::{Architecture, BoundParams};
use crate::tensor::{Graph, Tensor, Var};

const FLOP: EnergyModel = EnergyModel::FlopBased { joules_per_flop: 1e-9 };

fn scalar_set(v: f32) -> ParameterSet {
    let mut p = ParameterSet::new();
    p.insert("w", Tensor::new(vec![1, 1], vec![v]).unwrap()).unwrap();
    p
}

/// `y = x · w` with a single 1×1 weight.
struct Linear;

impl Forecaster for Linear {
    fn forward(&self, g: &mut Graph<f32>, p: &BoundParams, x: Var) -> Result<Var, ModelError> {
        Ok(g.matmul(x, p.var("w")?)?)
    }
}

struct Pairs(Vec<(f32, f32)>);

impl Samples for Pairs {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn batch(&self, start: usize, end: usize) -> (Tensor<f32>, Tensor<f32>) {
        let rows = &self.0[start..end.min(self.0.len())];
        let x = rows.iter().map(|r| r.0).collect();
        let y = rows.iter().map(|r| r.1).collect();
        (
            Tensor::new(vec![rows.len(), 1], x).unwrap(),
            Tensor::new(vec![rows.len(), 1], y).unwrap(),
        )
    }
}

fn config(rounds: usize, epochs: usize) -> FederationConfig {
    FederationConfig {
        rounds,
        local_epochs: epochs,
        batch_size: 32,
        learning_rate: 0.05,
        ..FederationConfig::default()
    }
}

fn small_spec(arch: Architecture) -> ModelSpec {
    ModelSpec {
        window: 4,
        hidden: 8,
        conv_channels: 4,
        heads: 2,
        ..ModelSpec::new(arch)
    }
}

fn clients(n: usize, len: usize) -> Vec<PreparedClient> {
    ClientProfile::presets()
        .iter()
        .take(n)
        .enumerate()
        .map(|(i, p)| PreparedClient::new(&generate_synthetic(p, len + 40 * i, 7).unwrap(), 4).unwrap())
        .collect()
}

#[test]
fn select_all_or_ceil() {
    let mut rng = round_rng(1, 1);
    assert_eq!(select_participants(3, 1.0, &mut rng).unwrap(), vec![0, 1, 2]);
    let half = select_participants(3, 0.5, &mut rng).unwrap();
    assert_eq!(half.len(), 2);
    assert_ne!(half[0], half[1]);
    assert_eq!(select_participants(10, 0.7, &mut rng).unwrap().len(), 7);
    assert!(matches!(select_participants(0, 1.0, &mut rng), Err(FedError::NoClients)));
}

#[test]
fn selection_replays() {
    let run = || (1..=20).map(|r| select_participants(5, 0.4, &mut round_rng(9, r)).unwrap()).collect::<Vec<_>>();
    let a = run();
    assert_eq!(a, run());
    assert!(a.iter().any(|s| s != &a[0]), "rounds should differ");
}

#[test]
fn zero_epochs_is_identity() {
    let spec = small_spec(Architecture::Lstm);
    let c = &clients(1, 200)[0];
    let w = build(&spec, 3).unwrap();
    let u = local_training(&spec, &c.train, &w, &config(1, 0), &FLOP).unwrap();
    assert_eq!(u.params.to_bytes(), w.to_bytes());
    assert_eq!(u.steps, 0);
    assert_eq!(u.energy.flops, 0);
}

#[test]
fn one_parameter_hand_step() {
    let cfg = FederationConfig {
        local_epochs: 1,
        batch_size: 1,
        learning_rate: 0.1,
        ..FederationConfig::default()
    };
    let w = scalar_set(1.0);
    let u = local_training(&Linear, &Pairs(vec![(1.0, 0.0)]), &w, &cfg, &FLOP).unwrap();
    assert!((u.params.get("w").unwrap().data()[0] - 0.9).abs() < 1e-7);
    assert_eq!(w.get("w").unwrap().data()[0], 1.0, "input weights untouched");
    assert_eq!(u.samples, 1);
    assert_eq!(u.loss, 1.0);
}

#[test]
fn zero_loss_leaves_weights() {
    let data = Pairs(vec![(1.0, 2.0), (-3.0, -6.0), (0.5, 1.0)]);
    for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let cfg = FederationConfig {
            local_epochs: 4,
            batch_size: 2,
            optimizer,
            ..FederationConfig::default()
        };
        let u = local_training(&Linear, &data, &scalar_set(2.0), &cfg, &FLOP).unwrap();
        assert!((u.params.get("w").unwrap().data()[0] - 2.0).abs() < 1e-7);
        assert_eq!(u.steps, 8);
    }
}

#[test]
fn empty_client_errors() {
    let r = local_training(&Linear, &Pairs(vec![]), &scalar_set(1.0), &config(1, 1), &FLOP);
    assert!(matches!(r, Err(FedError::EmptyClient)));
}

#[test]
fn adam_descends() {
    let data = Pairs((0..40).map(|i| (i as f32 / 10.0, 3.0 * i as f32 / 10.0)).collect());
    let cfg = FederationConfig {
        local_epochs: 100,
        batch_size: 8,
        learning_rate: 0.05,
        optimizer: OptimizerKind::Adam,
        ..FederationConfig::default()
    };
    let u = local_training(&Linear, &data, &scalar_set(0.0), &cfg, &FLOP).unwrap();
    assert!((u.params.get("w").unwrap().data()[0] - 3.0).abs() < 0.05);
}

#[test]
fn aggregate_examples() {
    let w = build(&small_spec(Architecture::CnnLstm), 1).unwrap();
    assert_eq!(aggregate(&[(w.clone(), 17)]).unwrap(), w);

    let mut neg = w.clone();
    neg.tensors_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = -*v));
    let zero = aggregate(&[(w.clone(), 5), (neg, 5)]).unwrap();
    assert!(zero.flatten().iter().all(|&v| v == 0.0));

    let out = aggregate(&[(scalar_set(0.0), 1), (scalar_set(4.0), 3)]).unwrap();
    assert_eq!(out.get("w").unwrap().data()[0], 3.0);
}

#[test]
fn aggregate_errors() {
    let a = scalar_set(1.0);
    let mut b = ParameterSet::new();
    b.insert("v", Tensor::zeros(&[1, 1])).unwrap();
    assert!(matches!(aggregate(&[(a.clone(), 1), (b, 1)]), Err(FedError::StructureMismatch)));
    assert!(matches!(aggregate(&[(a.clone(), 0), (a, 0)]), Err(FedError::ZeroSamples)));
    assert!(matches!(aggregate(&[]), Err(FedError::ZeroSamples)));
}

#[test]
fn config_validation_lists_everything() {
    let bad = FederationConfig {
        rounds: 0,
        batch_size: 0,
        learning_rate: -1.0,
        participation_fraction: 1.5,
        ..FederationConfig::default()
    };
    assert_eq!(bad.problems().len(), 4);
    assert!(FederationConfig::default().validate().is_ok());
}

#[test]
fn single_client_matches_centralized() {
    let spec = small_spec(Architecture::Lstm);
    let cs = clients(1, 300);
    let cfg = config(4, 2);
    let fed = run_federation(&cs, &spec, &cfg, &FLOP, None).unwrap();
    let central = train_centralized(&cs[0], &spec, &cfg, &FLOP).unwrap();
    assert!(fed.params.max_abs_diff(&central.params) < 1e-6);
}

#[test]
fn communication_closed_form_and_reports() {
    let spec = small_spec(Architecture::Lstm);
    let cs = clients(3, 150);
    let cfg = config(5, 1);
    let out = run_federation(&cs, &spec, &cfg, &FLOP, None).unwrap();
    let size = serialized_size_kb(&build(&spec, 0).unwrap());
    let total: f64 = out.rounds.iter().map(|r| r.kb_transmitted).sum();
    assert!((total - 5.0 * 3.0 * 2.0 * size).abs() < 1e-9);
    assert!((out.ledger.comm_kb - total).abs() < 1e-9);
    for r in &out.rounds {
        assert_eq!(r.total_samples, r.samples.iter().sum::<usize>());
        assert_eq!(r.participants.len(), 3);
        assert!(r.validation.is_some());
    }
    let per_client: f64 = out.client_ledgers.values().map(|l| l.train_wh).sum();
    assert!((per_client - out.ledger.train_wh).abs() <= 1e-12 * out.ledger.train_wh);
    assert!((out.ledger.train_wh - out.ledger.total_flops as f64 * 1e-9 / 3600.0).abs() < 1e-12);
}

#[test]
fn replay_and_schedule_independence() {
    let spec = small_spec(Architecture::CnnLstmA);
    let cs = clients(3, 150);
    let trace = |parallel: bool| {
        let cfg = FederationConfig {
            participation_fraction: 0.6,
            parallel_clients: parallel,
            ..config(4, 1)
        };
        let out = run_federation(&cs, &spec, &cfg, &FLOP, None).unwrap();
        let maes: Vec<f64> = out.rounds.iter().map(|r| r.validation.as_ref().unwrap().mean_mae).collect();
        (maes, out.params.to_bytes())
    };
    let a = trace(true);
    assert_eq!(a, trace(true));
    assert_eq!(a, trace(false));
}

#[test]
fn telemetry_lines() {
    let spec = small_spec(Architecture::Lstm);
    let cs = clients(2, 150);
    let mut buf = Vec::new();
    run_federation(&cs, &spec, &config(3, 1), &FLOP, Some(&mut buf)).unwrap();
    let lines: Vec<serde_json::Value> = String::from_utf8(buf)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[0]["round"], 1);
    assert_eq!(lines[5]["client"], "LesCorts");
    assert!(lines[0]["wh"].as_f64().unwrap() > 0.0);
}

#[test]
fn empty_clients_are_skipped() {
    let spec = small_spec(Architecture::Lstm);
    let mut cs = clients(2, 150);
    let tiny = ClientDataset::new("tiny", generate_synthetic(&ClientProfile::el_born(), 5, 1).unwrap().records().to_vec()).unwrap();
    cs.push(PreparedClient::new(&tiny, 4).unwrap());
    let out = run_federation(&cs, &spec, &config(2, 1), &FLOP, None).unwrap();
    assert_eq!(out.rounds[0].participants.len(), 2);
    let empty: Vec<PreparedClient> = cs.into_iter().skip(2).collect();
    assert!(matches!(run_federation(&empty, &spec, &config(2, 1), &FLOP, None), Err(FedError::NoClients)));
}

#[test]
fn persistence_baseline_is_last_row() {
    let cs = clients(1, 200);
    let rep = persistence_report(&cs, crate::data::Segment::Val).unwrap().unwrap();
    let set = &cs[0].val;
    let manual = crate::metrics::mae(&set.persistence(), &set.raw_targets()).unwrap();
    assert_eq!(rep.mean_mae, manual);
    assert!(manual > 0.0);
}

proptest! {
    #[test]
    fn aggregate_is_convex(
        values in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 6), 1..5),
        counts in prop::collection::vec(1usize..100, 5),
    ) {
        let sets: Vec<(ParameterSet, usize)> = values
            .iter()
            .zip(&counts)
            .map(|(v, &n)| {
                let mut p = ParameterSet::new();
                p.insert("a", Tensor::new(vec![2, 3], v.clone()).unwrap()).unwrap();
                (p, n)
            })
            .collect();
        let out = aggregate(&sets).unwrap();
        let flat = out.flatten();
        for i in 0..6 {
            let lo = values.iter().map(|v| v[i]).fold(f32::INFINITY, f32::min);
            let hi = values.iter().map(|v| v[i]).fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(flat[i] >= lo && flat[i] <= hi);
        }
        // Equal counts reduce to the plain mean.
        let equal: Vec<(ParameterSet, usize)> = sets.iter().map(|(p, _)| (p.clone(), 7)).collect();
        let mean = aggregate(&equal).unwrap().flatten();
        for i in 0..6 {
            let m = values.iter().map(|v| v[i] as f64).sum::<f64>() / values.len() as f64;
            prop_assert!((mean[i] as f64 - m).abs() < 1e-5);
        }
    }
}
