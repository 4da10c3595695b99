//! Graph-level building blocks. Sequences are batch-first: `[B, W, features]`.

use crate::tensor::{Graph, Real, Tensor, Var};

use super::params::BoundParams;
use super::ModelError;

type Result<T> = std::result::Result<T, ModelError>;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// `x[.., in] · w[in, out] + b[out]`.
pub(crate) fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let in_dim = *shape.last().ok_or_else(|| ModelError::InvalidSpec("linear on a scalar".into()))?;
    let rows = shape.iter().product::<usize>() / in_dim.max(1);
    let flat = if shape.len() == 2 { x } else { g.reshape(x, &[rows, in_dim])? };
    let mut y = g.matmul(flat, w)?;
    if let Some(b) = b {
        y = g.add(y, b)?;
    }
    if shape.len() == 2 {
        return Ok(y);
    }
    let mut out_shape = shape;
    let out_dim = g.shape(w)[1];
    *out_shape.last_mut().expect("rank >= 1") = out_dim;
    Ok(g.reshape(y, &out_shape)?)
}

pub(crate) fn dense<T: Real>(g: &mut Graph<T>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    linear(g, x, w, Some(b))
}

pub(crate) struct LstmOutput {
    /// `[B, W, H]`
    pub seq: Var,
    /// `[B, H]`
    pub h: Var,
    /// `[B, H]`
    pub c: Var,
}

/// Single-layer LSTM, gate order (input, forget, cell, output), with separate
/// input and recurrent biases.
pub(crate) fn lstm<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    init: Option<(Var, Var)>,
) -> Result<LstmOutput> {
    let w_ih = p.var(&format!("{prefix}.w_ih"))?;
    let w_hh = p.var(&format!("{prefix}.w_hh"))?;
    let b_ih = p.var(&format!("{prefix}.b_ih"))?;
    let b_hh = p.var(&format!("{prefix}.b_hh"))?;
    let shape = g.shape(x).to_vec();
    let (batch, steps) = (shape[0], shape[1]);
    let hidden = g.shape(w_hh)[0];

    let bias = g.add(b_ih, b_hh)?;
    // Input projection for every timestep at once: [B, W, 4H].
    let xw = linear(g, x, w_ih, Some(bias))?;
    let (mut h, mut c) = match init {
        Some(state) => state,
        None => {
            let z = g.constant(Tensor::zeros(&[batch, hidden]));
            (z, z)
        }
    };
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let xt = g.select(xw, 1, t)?;
        let hw = g.matmul(h, w_hh)?;
        let z = g.add(xt, hw)?;
        let i_lin = g.slice(z, 1, 0, hidden)?;
        let f_lin = g.slice(z, 1, hidden, hidden)?;
        let c_lin = g.slice(z, 1, 2 * hidden, hidden)?;
        let o_lin = g.slice(z, 1, 3 * hidden, hidden)?;
        let i = g.sigmoid(i_lin);
        let f = g.sigmoid(f_lin);
        let cand = g.tanh(c_lin);
        let o = g.sigmoid(o_lin);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let tc = g.tanh(c);
        h = g.mul(o, tc)?;
        outputs.push(h);
    }
    let seq = g.stack(&outputs, 1)?;
    Ok(LstmOutput { seq, h, c })
}

/// Pointwise 1-D convolution generalised to any kernel width: each output
/// step sees `kernel` consecutive input steps (valid padding, stride 1),
/// followed by ReLU.
pub(crate) fn conv1d<T: Real>(g: &mut Graph<T>, p: &BoundParams, prefix: &str, x: Var, kernel: usize) -> Result<Var> {
    let steps = g.shape(x)[1];
    let out_steps = steps + 1 - kernel;
    let unfolded = if kernel == 1 {
        x
    } else {
        let taps = (0..kernel)
            .map(|k| g.slice(x, 1, k, out_steps))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        g.concat(&taps, 2)?
    };
    let y = dense(g, p, prefix, unfolded)?;
    Ok(g.relu(y))
}

pub(crate) struct AttentionVars {
    /// `[B, W]`
    pub weights: Var,
    /// `[B, H]`
    pub context: Var,
}

/// Additive temporal attention over an LSTM output sequence:
/// `e = tanh(FC([repeat(h, W) ; out]))`, `weights = softmax_W(e · v)`,
/// `context = Σ_t weights_t · out_t`.
pub(crate) fn temporal_attention<T: Real>(
    g: &mut Graph<T>,
    h: Var,
    out: Var,
    fc_w: Var,
    fc_b: Var,
    v: Var,
) -> Result<AttentionVars> {
    let hs = g.shape(h).to_vec();
    let os = g.shape(out).to_vec();
    if hs.len() != 2 || os.len() != 3 || hs[0] != os[0] || hs[1] != os[2] {
        return Err(ModelError::Shape {
            what: "temporal attention (h vs out)",
            expected: vec![hs.first().copied().unwrap_or(0), os.get(1).copied().unwrap_or(0), hs.get(1).copied().unwrap_or(0)],
            actual: os,
        });
    }
    let (batch, steps, hidden) = (os[0], os[1], os[2]);
    let repeated = g.stack(&vec![h; steps], 1)?;
    let joined = g.concat(&[repeated, out], 2)?;
    let projected = linear(g, joined, fc_w, Some(fc_b))?;
    let e = g.tanh(projected);
    let flat = g.reshape(e, &[batch * steps, hidden])?;
    let v_col = g.reshape(v, &[hidden, 1])?;
    let scores = g.matmul(flat, v_col)?;
    let scores = g.reshape(scores, &[batch, steps])?;
    let weights = g.softmax(scores, 1)?;
    let w3 = g.reshape(weights, &[batch, steps, 1])?;
    let weighted = g.mul(w3, out)?;
    let context = g.sum_axis(weighted, 1)?;
    Ok(AttentionVars { weights, context })
}

pub(crate) struct MhaVars {
    /// `[B, W, H]`
    pub out: Var,
    /// `[B, heads, W, W]`, rows sum to one.
    pub weights: Var,
}

/// Scaled dot-product attention split over `heads`, with input and output projections.
pub(crate) fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    prefix: &str,
    query: Var,
    key: Var,
    value: Var,
    heads: usize,
) -> Result<MhaVars> {
    let shape = g.shape(query).to_vec();
    let (batch, steps, hidden) = (shape[0], shape[1], shape[2]);
    if heads == 0 || hidden % heads != 0 {
        return Err(ModelError::InvalidSpec(format!(
            "hidden size {hidden} is not divisible by {heads} heads"
        )));
    }
    let dk = hidden / heads;
    let split = |g: &mut Graph<T>, x: Var, name: &str| -> Result<Var> {
        let y = dense(g, p, &format!("{prefix}.{name}"), x)?;
        let kv_steps = g.shape(y)[1];
        let y = g.reshape(y, &[batch, kv_steps, heads, dk])?;
        Ok(g.permute(y, &[0, 2, 1, 3])?)
    };
    let q = split(g, query, "q")?;
    let k = split(g, key, "k")?;
    let v = split(g, value, "v")?;
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, T::one() / T::lit(dk as f64).sqrt());
    let weights = g.softmax(scores, 3)?;
    let ctx = g.batch_matmul(weights, v, false)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[batch, steps, hidden])?;
    let out = dense(g, p, &format!("{prefix}.o"), ctx)?;
    Ok(MhaVars { out, weights })
}

fn layer_norm_affine<T: Real>(g: &mut Graph<T>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let n = g.layer_norm(x, LAYER_NORM_EPS)?;
    let gamma = p.var(&format!("{prefix}.gamma"))?;
    let beta = p.var(&format!("{prefix}.beta"))?;
    let scaled = g.mul(n, gamma)?;
    Ok(g.add(scaled, beta)?)
}

/// Post-norm encoder block: `LN(x + MHA(x))` then `LN(y + FFNN(y))`.
pub(crate) fn transformer_block<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    heads: usize,
    ffnn_layers: usize,
) -> Result<Var> {
    let att = multi_head_attention(g, p, &format!("{prefix}.mha"), x, x, x, heads)?;
    let res = g.add(x, att.out)?;
    let y = layer_norm_affine(g, p, &format!("{prefix}.ln1"), res)?;
    let mut f = y;
    for layer in 0..ffnn_layers {
        f = dense(g, p, &format!("{prefix}.ffn{layer}"), f)?;
        if layer + 1 < ffnn_layers {
            f = g.relu(f);
        }
    }
    let res = g.add(y, f)?;
    layer_norm_affine(g, p, &format!("{prefix}.ln2"), res)
}

/// Fixed sinusoidal position table `[W, H]`.
pub(crate) fn positional_encoding<T: Real>(steps: usize, hidden: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(steps * hidden);
    for t in 0..steps {
        for i in 0..hidden {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / hidden as f64);
            data.push(T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![steps, hidden], data).expect("table shape")
}

/// Last timestep of a `[B, W, H]` sequence.
pub(crate) fn last_step<T: Real>(g: &mut Graph<T>, seq: Var) -> Result<Var> {
    let steps = g.shape(seq)[1];
    Ok(g.select(seq, 1, steps - 1)?)
}
