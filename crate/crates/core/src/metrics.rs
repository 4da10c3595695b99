//! Forecast error metrics in raw units.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction shape {pred:?} does not match truth shape {truth:?}")]
    ShapeMismatch { pred: Vec<usize>, truth: Vec<usize> },
    #[error("no samples to score")]
    Empty,
    #[error("NRMSE undefined: ground-truth grand mean is zero")]
    ZeroMean,
    #[error("no clients to aggregate")]
    NoClients,
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

fn check(pred: &Tensor<f64>, truth: &Tensor<f64>) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.shape().to_vec(),
            truth: truth.shape().to_vec(),
        });
    }
    if truth.numel() == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Mean absolute error over all `m × d′` components.
pub fn mae(pred: &Tensor<f64>, truth: &Tensor<f64>) -> Result<f64> {
    check(pred, truth)?;
    let sum: f64 = pred.data().iter().zip(truth.data()).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / truth.numel() as f64)
}

/// RMSE over all components divided by the grand mean of the truth.
pub fn nrmse(pred: &Tensor<f64>, truth: &Tensor<f64>) -> Result<f64> {
    check(pred, truth)?;
    let n = truth.numel() as f64;
    let mean = truth.data().iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(MetricsError::ZeroMean);
    }
    let sq: f64 = pred.data().iter().zip(truth.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sq / n).sqrt() / mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientError {
    pub mae: f64,
    pub nrmse: f64,
    /// Samples scored (`m`).
    pub samples: usize,
}

/// Scores one client's predictions.
pub fn evaluate(pred: &Tensor<f64>, truth: &Tensor<f64>) -> Result<ClientError> {
    Ok(ClientError {
        mae: mae(pred, truth)?,
        nrmse: nrmse(pred, truth)?,
        samples: truth.shape().first().copied().unwrap_or(0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub per_client: BTreeMap<String, ClientError>,
    pub mean_mae: f64,
    pub mean_nrmse: f64,
}

/// Unweighted mean across clients.
pub fn aggregate(per_client: impl IntoIterator<Item = (String, ClientError)>) -> Result<ErrorReport> {
    let per_client: BTreeMap<_, _> = per_client.into_iter().collect();
    if per_client.is_empty() {
        return Err(MetricsError::NoClients);
    }
    let n = per_client.len() as f64;
    Ok(ErrorReport {
        mean_mae: per_client.values().map(|c| c.mae).sum::<f64>() / n,
        mean_nrmse: per_client.values().map(|c| c.nrmse).sum::<f64>() / n,
        per_client,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    fn client(mae: f64) -> ClientError {
        ClientError { mae, nrmse: mae / 10.0, samples: 1 }
    }

    #[test]
    fn identical_is_zero() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(nrmse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn hand_examples() {
        let truth = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let pred = t(&[&[2.0, 2.0], &[3.0, 6.0]]);
        assert_eq!(mae(&pred, &truth).unwrap(), (1.0 + 0.0 + 0.0 + 2.0) / 4.0);
        assert_eq!(nrmse(&t(&[&[3.0]]), &t(&[&[2.0]])).unwrap(), 0.5);
    }

    #[test]
    fn errors() {
        let a = t(&[&[1.0, 2.0]]);
        let b = t(&[&[1.0], &[2.0]]);
        assert!(matches!(mae(&a, &b), Err(MetricsError::ShapeMismatch { .. })));
        let empty = Tensor::<f64>::zeros(&[0, 5]);
        assert_eq!(mae(&empty, &empty), Err(MetricsError::Empty));
        let z = t(&[&[1.0, -1.0]]);
        assert_eq!(nrmse(&a, &z), Err(MetricsError::ZeroMean));
        assert_eq!(aggregate(Vec::new()), Err(MetricsError::NoClients));
    }

    #[test]
    fn aggregate_means() {
        let one = aggregate([("a".to_string(), client(2.0))]).unwrap();
        assert_eq!(one.mean_mae, 2.0);
        assert_eq!(one.mean_nrmse, 0.2);
        let two = aggregate([("a".to_string(), client(2.0)), ("b".to_string(), client(4.0))]).unwrap();
        assert_eq!(two.mean_mae, 3.0);
    }

    #[test]
    fn aggregate_lstm_test_mae() {
        let r = aggregate([
            ("ElBorn".to_string(), client(8.9698e6)),
            ("LesCorts".to_string(), client(3.2382e6)),
            ("PobleSec".to_string(), client(9.8139e6)),
        ])
        .unwrap();
        assert!((r.mean_mae - 7.3406e6).abs() < 0.0001e6, "{}", r.mean_mae);
    }

    fn naive(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> (f64, f64) {
        let (mut abs, mut sq, mut total, mut count) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..truth.len() {
            for j in 0..truth[i].len() {
                let e = pred[i][j] - truth[i][j];
                abs += e.abs();
                sq += e * e;
                total += truth[i][j];
                count += 1.0;
            }
        }
        (abs / count, (sq / count).sqrt() / (total / count))
    }

    fn pair() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        (1usize..8, 1usize..6).prop_flat_map(|(m, d)| {
            let rows = prop::collection::vec(prop::collection::vec(0.1f64..100.0, d), m);
            (rows.clone(), rows)
        })
    }

    fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    proptest! {
        #[test]
        fn matches_double_loop((p, tr) in pair()) {
            let (m, n) = naive(&p, &tr);
            let (pt, tt) = (tensor(&p), tensor(&tr));
            prop_assert!((mae(&pt, &tt).unwrap() - m).abs() <= 1e-9 * m.abs().max(1e-12));
            prop_assert!((nrmse(&pt, &tt).unwrap() - n).abs() <= 1e-9 * n.abs().max(1e-12));
        }

        #[test]
        fn scaling_laws((p, tr) in pair(), c in 0.01f64..100.0) {
            let (pt, tt) = (tensor(&p), tensor(&tr));
            let scale = |x: &Tensor<f64>| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect()).unwrap();
            let (ps, ts) = (scale(&pt), scale(&tt));
            let base = mae(&pt, &tt).unwrap();
            prop_assert!((mae(&ps, &ts).unwrap() - c * base).abs() <= 1e-9 * (c * base).max(1e-12));
            let n = nrmse(&pt, &tt).unwrap();
            prop_assert!((nrmse(&ps, &ts).unwrap() - n).abs() <= 1e-9 * n.max(1e-12));
        }

        #[test]
        fn zero_iff_equal((p, tr) in pair()) {
            let (pt, tt) = (tensor(&p), tensor(&tr));
            let equal = p == tr;
            prop_assert_eq!(mae(&pt, &tt).unwrap() == 0.0, equal);
            prop_assert_eq!(nrmse(&pt, &tt).unwrap() == 0.0, equal);
        }
    }
}
