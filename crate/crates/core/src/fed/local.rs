use serde::{Deserialize, Serialize};

use crate::data::WindowSet;
use crate::energy::{EnergyModel, Measurement, Meter};
use crate::model::{forward_graph, BoundParams, ModelError, ModelSpec, ParameterSet};
use crate::tensor::{Graph, Tensor, Var};

use super::{FedError, FederationConfig, Result};

const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;
const SGD_FLOPS_PER_PARAM: u64 = 2;
const ADAM_FLOPS_PER_PARAM: u64 = 14;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Indexed mini-batch source.
pub trait Samples: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inputs and targets for samples `start..end`.
    fn batch(&self, start: usize, end: usize) -> (Tensor<f32>, Tensor<f32>);
}

impl Samples for WindowSet {
    fn len(&self) -> usize {
        WindowSet::len(self)
    }

    fn batch(&self, start: usize, end: usize) -> (Tensor<f32>, Tensor<f32>) {
        WindowSet::batch(self, start, end)
    }
}

/// Anything that maps a bound parameter set and an input batch to predictions.
pub trait Forecaster: Sync {
    fn forward(&self, g: &mut Graph<f32>, params: &BoundParams, x: Var) -> Result<Var, ModelError>;
}

impl Forecaster for ModelSpec {
    fn forward(&self, g: &mut Graph<f32>, params: &BoundParams, x: Var) -> Result<Var, ModelError> {
        forward_graph(g, params, self, x)
    }
}

/// Per-run optimizer state. Adam moments start from zero on every call to
/// [`local_training`].
struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64, params: &ParameterSet) -> Self {
        let zeros = || match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam => params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        };
        Self {
            kind,
            lr: lr as f32,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update and returns its FLOPs.
    fn apply(&mut self, params: &mut ParameterSet, grads: &ParameterSet) -> u64 {
        self.step += 1;
        let n = params.total_params() as u64;
        match self.kind {
            OptimizerKind::Sgd => {
                for (w, (_, g)) in params.tensors_mut().zip(grads.iter()) {
                    for (w, g) in w.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * g;
                    }
                }
                SGD_FLOPS_PER_PARAM * n
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - ADAM_BETA1.powi(self.step);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.step);
                for (((w, (_, g)), m), v) in params.tensors_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
                    for (((w, g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *w -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
                ADAM_FLOPS_PER_PARAM * n
            }
        }
    }
}

/// Result of one client's local training.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub params: ParameterSet,
    /// Training samples `n_k`.
    pub samples: usize,
    /// Mean batch loss over the final epoch (0 when no epochs ran).
    pub loss: f64,
    pub steps: usize,
    pub energy: Measurement,
}

/// MAE on the scaled targets of one batch, built on `g`.
pub fn batch_loss<M: Forecaster>(
    g: &mut Graph<f32>,
    model: &M,
    bound: &BoundParams,
    x: Tensor<f32>,
    y: Tensor<f32>,
) -> Result<Var> {
    let xv = g.constant(x);
    let yv = g.constant(y);
    let pred = model.forward(g, bound, xv)?;
    let diff = g.sub(pred, yv)?;
    let abs = g.abs(diff);
    Ok(g.mean(abs))
}

/// `E` epochs of in-order mini-batch descent on a copy of `w`. The final
/// partial batch is kept.
pub fn local_training<M: Forecaster, S: Samples + ?Sized>(
    model: &M,
    data: &S,
    w: &ParameterSet,
    config: &FederationConfig,
    energy: &EnergyModel,
) -> Result<LocalUpdate> {
    let n = data.len();
    if n == 0 {
        return Err(FedError::EmptyClient);
    }
    let meter = Meter::start(energy);
    let mut params = w.clone();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, &params);
    let mut flops = 0u64;
    let mut steps = 0;
    let mut loss = 0.0;
    for _ in 0..config.local_epochs {
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for start in (0..n).step_by(config.batch_size) {
            let (x, y) = data.batch(start, start + config.batch_size);
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let l = batch_loss(&mut g, model, &bound, x, y)?;
            epoch_loss += g.value(l).data()[0] as f64;
            g.backward(l)?;
            flops += g.flops();
            let grads = params.gradients(&g, &bound);
            flops += optimizer.apply(&mut params, &grads);
            batches += 1;
            steps += 1;
        }
        loss = epoch_loss / batches as f64;
    }
    Ok(LocalUpdate {
        params,
        samples: n,
        loss,
        steps,
        energy: meter.finish(flops),
    })
}
