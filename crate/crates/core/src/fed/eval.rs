use rayon::prelude::*;

use crate::data::{PreparedClient, Segment, WindowSet};
use crate::metrics::{self, ErrorReport};
use crate::model::{forward, ModelSpec, ParameterSet};
use crate::tensor::Tensor;

use super::Result;

const EVAL_CHUNK: usize = 512;

/// Scaled predictions `[n, d′]` for every window in `set`.
pub fn predict_scaled(params: &ParameterSet, spec: &ModelSpec, set: &WindowSet) -> Result<Tensor<f32>> {
    let mut out = Vec::with_capacity(set.len() * spec.output_dim);
    for start in (0..set.len()).step_by(EVAL_CHUNK) {
        let (x, _) = set.batch(start, start + EVAL_CHUNK);
        out.extend_from_slice(forward(params, spec, &x)?.data());
    }
    Ok(Tensor::new(vec![set.len(), spec.output_dim], out)?)
}

/// Raw-unit error of the global model on each client's `segment`. Clients
/// without windows in that segment are left out; `None` if none remain.
pub fn evaluate_segment(
    params: &ParameterSet,
    spec: &ModelSpec,
    clients: &[PreparedClient],
    segment: Segment,
) -> Result<Option<ErrorReport>> {
    let per_client = clients
        .par_iter()
        .filter(|c| !c.segment(segment).is_empty())
        .map(|c| {
            let set = c.segment(segment);
            let pred = c.invert_targets(&predict_scaled(params, spec, set)?);
            Ok((c.client_id.clone(), metrics::evaluate(&pred, &set.raw_targets())?))
        })
        .collect::<Result<Vec<_>>>()?;
    if per_client.is_empty() {
        return Ok(None);
    }
    Ok(Some(metrics::aggregate(per_client)?))
}

/// Error of repeating the last observed targets of each window.
pub fn persistence_report(clients: &[PreparedClient], segment: Segment) -> Result<Option<ErrorReport>> {
    let per_client = clients
        .iter()
        .filter(|c| !c.segment(segment).is_empty())
        .map(|c| {
            let set = c.segment(segment);
            Ok((c.client_id.clone(), metrics::evaluate(&set.persistence(), &set.raw_targets())?))
        })
        .collect::<Result<Vec<_>>>()?;
    if per_client.is_empty() {
        return Ok(None);
    }
    Ok(Some(metrics::aggregate(per_client)?))
}
