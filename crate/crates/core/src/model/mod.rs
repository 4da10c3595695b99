//! The nine forecasting architectures: three recurrent baselines, their
//! temporal-attention variants, and three transformer variants.
//!
//! Every architecture is described by a [`ModelSpec`], initialized by
//! [`build`] into a flat [`ParameterSet`], and evaluated by [`forward`] on a
//! `[B, W, d]` batch to produce `[B, d′]` predictions.

mod layers;
pub mod params;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

pub use params::{serialized_size_kb, BoundParams, ParameterSet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("{what}: expected shape {expected:?}, got {actual:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("parameter `{0}` is missing")]
    MissingParameter(String),
    #[error("parameter `{0}` is defined twice")]
    DuplicateParameter(String),
    #[error("malformed parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Architecture {
    Lstm,
    LstmA,
    CnnLstm,
    CnnLstmA,
    LstmLstm,
    LstmLstmA,
    BasicTransformer,
    Transformer,
    TransformerLstm,
}

impl Architecture {
    pub const ALL: [Architecture; 9] = [
        Architecture::Lstm,
        Architecture::LstmA,
        Architecture::CnnLstm,
        Architecture::CnnLstmA,
        Architecture::LstmLstm,
        Architecture::LstmLstmA,
        Architecture::BasicTransformer,
        Architecture::Transformer,
        Architecture::TransformerLstm,
    ];

    pub fn has_temporal_attention(self) -> bool {
        matches!(self, Self::LstmA | Self::CnnLstmA | Self::LstmLstmA)
    }

    pub fn is_transformer(self) -> bool {
        matches!(self, Self::BasicTransformer | Self::Transformer | Self::TransformerLstm)
    }

    /// Display name, e.g. `CNN-LSTM-A`.
    pub fn label(self) -> &'static str {
        match self {
            Self::Lstm => "LSTM",
            Self::LstmA => "LSTM-A",
            Self::CnnLstm => "CNN-LSTM",
            Self::CnnLstmA => "CNN-LSTM-A",
            Self::LstmLstm => "LSTM-LSTM",
            Self::LstmLstmA => "LSTM-LSTM-A",
            Self::BasicTransformer => "BasicTransformer",
            Self::Transformer => "Transformer",
            Self::TransformerLstm => "Transformer-LSTM",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Architecture {
    type Err = ModelError;

    /// Accepts `LSTM_A`, `lstm-a`, `BasicTransformer`, `BASIC_TRANSFORMER`, ...
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_uppercase())
            .collect();
        Self::ALL
            .into_iter()
            .find(|a| a.label().replace('-', "").to_ascii_uppercase() == key)
            .ok_or_else(|| ModelError::InvalidSpec(format!("unknown architecture `{s}`")))
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub output_dim: usize,
    pub window: usize,
    pub hidden: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffnn_layers: usize,
    /// Adds a ReLU fully-connected layer of `hidden` units between the
    /// recurrent stack and the output layer of the LSTM-family models.
    pub lstm_fc_head: bool,
    /// Adds the sinusoidal position table after the transformer input projection.
    #[serde(default = "default_true")]
    pub positional_encoding: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::new(Architecture::Lstm)
    }
}

impl ModelSpec {
    pub fn new(architecture: Architecture) -> Self {
        Self {
            architecture,
            input_dim: 11,
            output_dim: 5,
            window: 10,
            hidden: 128,
            conv_channels: 32,
            conv_kernel: 1,
            blocks: 2,
            heads: 8,
            ffnn_layers: 2,
            lstm_fc_head: false,
            positional_encoding: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("window", self.window),
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be >= 1"));
            }
        }
        let arch = self.architecture;
        if matches!(arch, Architecture::CnnLstm | Architecture::CnnLstmA) {
            if self.conv_channels == 0 {
                problems.push("conv_channels must be >= 1".into());
            }
            // two stacked valid convolutions
            if self.conv_kernel == 0 || 2 * (self.conv_kernel - 1) >= self.window {
                problems.push(format!(
                    "conv_kernel {} leaves no timesteps for window {}",
                    self.conv_kernel, self.window
                ));
            }
        }
        if arch.is_transformer() {
            if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
                problems.push(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
            }
            if self.blocks == 0 {
                problems.push("blocks must be >= 1".into());
            }
            if self.ffnn_layers == 0 {
                problems.push("ffnn_layers must be >= 1".into());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::InvalidSpec(problems.join("; ")))
        }
    }
}

struct Init {
    rng: ChaCha8Rng,
    params: ParameterSet<f32>,
}

impl Init {
    /// Uniform in ±1/√fan_in.
    fn weight(&mut self, name: String, fan_in: usize, shape: &[usize]) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..bound) as f32)
            .collect();
        self.params.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    fn fill(&mut self, name: String, shape: &[usize], value: f32) -> Result<()> {
        self.params.insert(name, Tensor::full(shape, value))
    }

    fn dense(&mut self, prefix: &str, inputs: usize, outputs: usize) -> Result<()> {
        self.weight(format!("{prefix}.w"), inputs, &[inputs, outputs])?;
        self.fill(format!("{prefix}.b"), &[outputs], 0.0)
    }

    fn lstm(&mut self, prefix: &str, inputs: usize, hidden: usize) -> Result<()> {
        self.weight(format!("{prefix}.w_ih"), inputs, &[inputs, 4 * hidden])?;
        self.weight(format!("{prefix}.w_hh"), hidden, &[hidden, 4 * hidden])?;
        self.fill(format!("{prefix}.b_ih"), &[4 * hidden], 0.0)?;
        self.fill(format!("{prefix}.b_hh"), &[4 * hidden], 0.0)
    }

    fn attention(&mut self, hidden: usize) -> Result<()> {
        self.dense("attn.fc", 2 * hidden, hidden)?;
        self.weight("attn.v".into(), hidden, &[hidden])
    }

    fn block(&mut self, prefix: &str, spec: &ModelSpec) -> Result<()> {
        let h = spec.hidden;
        for part in ["q", "k", "v", "o"] {
            self.dense(&format!("{prefix}.mha.{part}"), h, h)?;
        }
        self.fill(format!("{prefix}.ln1.gamma"), &[h], 1.0)?;
        self.fill(format!("{prefix}.ln1.beta"), &[h], 0.0)?;
        for layer in 0..spec.ffnn_layers {
            self.dense(&format!("{prefix}.ffn{layer}"), h, h)?;
        }
        self.fill(format!("{prefix}.ln2.gamma"), &[h], 1.0)?;
        self.fill(format!("{prefix}.ln2.beta"), &[h], 0.0)
    }

    fn head(&mut self, spec: &ModelSpec) -> Result<()> {
        if spec.lstm_fc_head && !spec.architecture.is_transformer() {
            self.dense("fc", spec.hidden, spec.hidden)?;
        }
        self.dense("head", spec.hidden, spec.output_dim)
    }
}

/// Initializes every parameter of `spec`: weights uniform in ±1/√fan_in,
/// biases zero, layer-norm gains one. Deterministic in `seed`.
pub fn build(spec: &ModelSpec, seed: u64) -> Result<ParameterSet<f32>> {
    spec.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: ParameterSet::new(),
    };
    let (d, h) = (spec.input_dim, spec.hidden);
    match spec.architecture {
        Architecture::Lstm | Architecture::LstmA => {
            init.lstm("lstm", d, h)?;
        }
        Architecture::CnnLstm | Architecture::CnnLstmA => {
            let (c, k) = (spec.conv_channels, spec.conv_kernel);
            init.dense("conv1", k * d, c)?;
            init.dense("conv2", k * c, c)?;
            init.lstm("lstm", c, h)?;
        }
        Architecture::LstmLstm | Architecture::LstmLstmA => {
            init.lstm("enc", d, h)?;
            init.lstm("dec", h, h)?;
        }
        Architecture::BasicTransformer | Architecture::Transformer | Architecture::TransformerLstm => {
            init.dense("input", d, h)?;
            for b in 0..spec.blocks {
                init.block(&format!("enc{b}"), spec)?;
            }
            if spec.architecture == Architecture::TransformerLstm {
                init.lstm("lstm", h, h)?;
            }
            if spec.architecture != Architecture::BasicTransformer {
                init.dense("dec_fc", h, h)?;
                for b in 0..spec.blocks {
                    init.block(&format!("dec{b}"), spec)?;
                }
            }
        }
    }
    if spec.architecture.has_temporal_attention() {
        init.attention(h)?;
    }
    init.head(spec)?;
    Ok(init.params)
}

/// Records the forward pass of `spec` on `graph`; `x` is `[B, W, d]`, the
/// result `[B, d′]`.
pub fn forward_graph<T: Real>(g: &mut Graph<T>, p: &BoundParams, spec: &ModelSpec, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[1] != spec.window || shape[2] != spec.input_dim || shape[0] == 0 {
        return Err(ModelError::Shape {
            what: "input batch",
            expected: vec![shape.first().copied().unwrap_or(1).max(1), spec.window, spec.input_dim],
            actual: shape,
        });
    }
    let arch = spec.architecture;
    let features = match arch {
        Architecture::Lstm | Architecture::LstmA | Architecture::CnnLstm | Architecture::CnnLstmA => {
            let seq_in = if matches!(arch, Architecture::CnnLstm | Architecture::CnnLstmA) {
                let c1 = layers::conv1d(g, p, "conv1", x, spec.conv_kernel)?;
                layers::conv1d(g, p, "conv2", c1, spec.conv_kernel)?
            } else {
                x
            };
            let out = layers::lstm(g, p, "lstm", seq_in, None)?;
            if arch.has_temporal_attention() {
                attend(g, p, out.h, out.seq)?.context
            } else {
                out.h
            }
        }
        Architecture::LstmLstm | Architecture::LstmLstmA => {
            let enc = layers::lstm(g, p, "enc", x, None)?;
            // With attention, the context vector takes the place of the
            // encoder's final hidden state when seeding the decoder.
            let h0 = if arch.has_temporal_attention() {
                attend(g, p, enc.h, enc.seq)?.context
            } else {
                enc.h
            };
            layers::lstm(g, p, "dec", enc.seq, Some((h0, enc.c)))?.h
        }
        Architecture::BasicTransformer | Architecture::Transformer | Architecture::TransformerLstm => {
            let mut enc = layers::dense(g, p, "input", x)?;
            if spec.positional_encoding {
                let pe = g.constant(layers::positional_encoding(spec.window, spec.hidden));
                enc = g.add(enc, pe)?;
            }
            for b in 0..spec.blocks {
                enc = layers::transformer_block(g, p, &format!("enc{b}"), enc, spec.heads, spec.ffnn_layers)?;
            }
            if arch == Architecture::BasicTransformer {
                layers::last_step(g, enc)?
            } else {
                let summary = if arch == Architecture::TransformerLstm {
                    layers::lstm(g, p, "lstm", enc, None)?.h
                } else {
                    layers::last_step(g, enc)?
                };
                let z = layers::dense(g, p, "dec_fc", summary)?;
                let z = g.relu(z);
                let batch = g.shape(z)[0];
                let z = g.reshape(z, &[batch, 1, spec.hidden])?;
                let mut dec = g.add(enc, z)?;
                for b in 0..spec.blocks {
                    dec = layers::transformer_block(g, p, &format!("dec{b}"), dec, spec.heads, spec.ffnn_layers)?;
                }
                layers::last_step(g, dec)?
            }
        }
    };
    let features = if spec.lstm_fc_head && !arch.is_transformer() {
        let f = layers::dense(g, p, "fc", features)?;
        g.relu(f)
    } else {
        features
    };
    layers::dense(g, p, "head", features)
}

fn attend<T: Real>(g: &mut Graph<T>, p: &BoundParams, h: Var, seq: Var) -> Result<layers::AttentionVars> {
    let fc_w = p.var("attn.fc.w")?;
    let fc_b = p.var("attn.fc.b")?;
    let v = p.var("attn.v")?;
    layers::temporal_attention(g, h, seq, fc_w, fc_b, v)
}

/// Pure evaluation: one prediction row per batch row.
pub fn forward<T: Real>(params: &ParameterSet<T>, spec: &ModelSpec, batch: &Tensor<T>) -> Result<Tensor<T>> {
    forward_counted(params, spec, batch).map(|(y, _)| y)
}

/// [`forward`] plus the FLOPs it recorded.
pub fn forward_counted<T: Real>(
    params: &ParameterSet<T>,
    spec: &ModelSpec,
    batch: &Tensor<T>,
) -> Result<(Tensor<T>, u64)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(batch.clone());
    let y = forward_graph(&mut g, &bound, spec, x)?;
    Ok((g.value(y).clone(), g.flops()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput<T = f32> {
    /// Per-timestep importance, `[W]`, on the simplex.
    pub weights: Tensor<T>,
    /// Weighted sum of the output sequence, `[hidden]`.
    pub context: Tensor<T>,
}

/// Temporal attention for a single sequence: `h` is `[hidden]`, `out` is
/// `[W, hidden]`, `fc_w` is `[2·hidden, hidden]`, `fc_b` and `v` are `[hidden]`.
pub fn temporal_attention<T: Real>(
    h: &Tensor<T>,
    out: &Tensor<T>,
    v: &Tensor<T>,
    fc_w: &Tensor<T>,
    fc_b: &Tensor<T>,
) -> Result<AttentionOutput<T>> {
    if out.rank() != 2 || h.rank() != 1 || out.shape()[1] != h.shape()[0] {
        return Err(ModelError::Shape {
            what: "temporal attention (h vs out)",
            expected: vec![out.shape().first().copied().unwrap_or(0), h.shape().first().copied().unwrap_or(0)],
            actual: out.shape().to_vec(),
        });
    }
    let hidden = h.shape()[0];
    let mut g = Graph::new();
    let hv = g.constant(h.clone().reshape(&[1, hidden])?);
    let steps = out.shape()[0];
    let ov = g.constant(out.clone().reshape(&[1, steps, hidden])?);
    let fw = g.constant(fc_w.clone());
    let fb = g.constant(fc_b.clone());
    let vv = g.constant(v.clone());
    let att = layers::temporal_attention(&mut g, hv, ov, fw, fb, vv)?;
    Ok(AttentionOutput {
        weights: g.value(att.weights).clone().reshape(&[steps])?,
        context: g.value(att.context).clone().reshape(&[hidden])?,
    })
}

/// Projections for one multi-head attention layer, all `[hidden, hidden]` / `[hidden]`.
#[derive(Debug, Clone)]
pub struct MhaWeights<T = f32> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhaOutput<T = f32> {
    /// `[W, hidden]`
    pub output: Tensor<T>,
    /// `[heads, W, W]`
    pub weights: Tensor<T>,
}

/// Multi-head attention for a single sequence; `q`, `k`, `v` are `[W, hidden]`.
pub fn multi_head_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    weights: &MhaWeights<T>,
    heads: usize,
) -> Result<MhaOutput<T>> {
    if q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(ModelError::Shape {
            what: "multi-head attention inputs",
            expected: q.shape().to_vec(),
            actual: if q.shape() != k.shape() { k.shape().to_vec() } else { v.shape().to_vec() },
        });
    }
    let (steps, hidden) = (q.shape()[0], q.shape()[1]);
    let mut set = ParameterSet::new();
    for (name, t) in [
        ("mha.q.w", &weights.wq),
        ("mha.q.b", &weights.bq),
        ("mha.k.w", &weights.wk),
        ("mha.k.b", &weights.bk),
        ("mha.v.w", &weights.wv),
        ("mha.v.b", &weights.bv),
        ("mha.o.w", &weights.wo),
        ("mha.o.b", &weights.bo),
    ] {
        set.insert(name, t.clone())?;
    }
    let mut g = Graph::new();
    let bound = set.bind(&mut g, false);
    let mut input = |t: &Tensor<T>| -> Result<Var> { Ok(g.constant(t.clone().reshape(&[1, steps, hidden])?)) };
    let (qv, kv, vv) = (input(q)?, input(k)?, input(v)?);
    let att = layers::multi_head_attention(&mut g, &bound, "mha", qv, kv, vv, heads)?;
    Ok(MhaOutput {
        output: g.value(att.out).clone().reshape(&[steps, hidden])?,
        weights: g.value(att.weights).clone().reshape(&[heads, steps, steps])?,
    })
}
