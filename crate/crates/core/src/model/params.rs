//! Named parameter store and its binary wire format.
//!
//! Wire format (all integers little-endian):
//!
//! ```text
//! magic    b"FTPS"
//! version  u32 = 1
//! records  u32
//! per record:
//!   name_len u16, name bytes (UTF-8)
//!   rank     u8, dims u32 × rank
//!   values   f32 × product(dims)
//! ```
//!
//! The value payload is exactly `total_params × 4` bytes, i.e.
//! `serialized_size_kb × 1000`; everything else is the preamble plus the
//! per-record name/shape metadata reported by [`ParameterSet::metadata_bytes`].

use std::collections::HashMap;

use crate::tensor::{Graph, Real, Tensor, Var};

use super::ModelError;

pub const MAGIC: &[u8; 4] = b"FTPS";
pub const FORMAT_VERSION: u32 = 1;
/// Magic, version and record count.
pub const PREAMBLE_BYTES: usize = 12;
pub const BYTES_PER_PARAM: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for ParameterSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<(), ModelError> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(ModelError::DuplicateParameter(name));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Same names, order and shapes.
    pub fn same_structure<U: Real>(&self, other: &ParameterSet<U>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// All values concatenated in entry order.
    pub fn flatten(&self) -> Vec<T> {
        self.entries.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    /// Zero-valued copy with the same structure.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &ParameterSet<T>) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|((_, a), (_, b))| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// Registers every tensor on `graph` as a trainable leaf (or a constant).
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> BoundParams {
        let mut vars = Vec::with_capacity(self.entries.len());
        let mut index = HashMap::with_capacity(self.entries.len());
        for (i, (name, t)) in self.entries.iter().enumerate() {
            let v = if trainable {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            };
            vars.push(v);
            index.insert(name.clone(), i);
        }
        BoundParams { vars, index }
    }

    /// Collects the gradients of a bound set after backward, in entry order.
    pub fn gradients(&self, graph: &Graph<T>, bound: &BoundParams) -> ParameterSet<T> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .zip(&bound.vars)
                .map(|((n, t), &v)| (n.clone(), graph.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape()))))
                .collect(),
        }
    }

    /// Name and shape bytes outside the value payload, including the preamble.
    pub fn metadata_bytes(&self) -> usize {
        PREAMBLE_BYTES
            + self
                .entries
                .iter()
                .map(|(n, t)| 2 + n.len() + 1 + 4 * t.rank())
                .sum::<usize>()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.metadata_bytes() + BYTES_PER_PARAM * self.total_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        out
    }
}

impl ParameterSet<f32> {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ModelError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut set = ParameterSet::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| ModelError::Format(format!("parameter name: {e}")))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n * BYTES_PER_PARAM)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            set.insert(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(set)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(ModelError::Format("unexpected end of data".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Graph handles for a bound [`ParameterSet`], looked up by name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| ModelError::MissingParameter(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Transmitted size in kB (1 kB = 1000 bytes) at 4 bytes per parameter.
pub fn serialized_size_kb<T: Real>(params: &ParameterSet<T>) -> f64 {
    (params.total_params() * BYTES_PER_PARAM) as f64 / 1000.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParameterSet<f32> {
        let mut p = ParameterSet::new();
        p.insert("head.w", Tensor::new(vec![128, 5], vec![0.25; 640]).unwrap()).unwrap();
        p.insert("head.b", Tensor::new(vec![5], vec![-1.0; 5]).unwrap()).unwrap();
        p
    }

    #[test]
    fn linear_head_size() {
        let p = sample();
        assert_eq!(p.total_params(), 645);
        assert!((serialized_size_kb(&p) - 2.58).abs() < 1e-12);
    }

    #[test]
    fn byte_length_is_payload_plus_metadata() {
        let p = sample();
        let bytes = p.to_bytes();
        assert_eq!(bytes.len(), (serialized_size_kb(&p) * 1000.0).round() as usize + p.metadata_bytes());
        // preamble + ("head.w": 2+6+1+8) + ("head.b": 2+6+1+4)
        assert_eq!(p.metadata_bytes(), 12 + 17 + 13);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = sample();
        assert!(matches!(
            p.insert("head.b", Tensor::zeros(&[1])),
            Err(ModelError::DuplicateParameter(_))
        ));
    }

    #[test]
    fn corrupt_bytes_rejected() {
        let bytes = sample().to_bytes();
        assert!(ParameterSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParameterSet::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(ParameterSet::from_bytes(&long).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(
            shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..3), 1..5),
            seed in any::<u32>(),
        ) {
            let mut p = ParameterSet::<f32>::new();
            for (i, shape) in shapes.iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|j| ((seed as usize + i * 31 + j) as f32 * 0.37).sin()).collect();
                p.insert(format!("p{i}"), Tensor::new(shape.clone(), data).unwrap()).unwrap();
            }
            let bytes = p.to_bytes();
            prop_assert_eq!(bytes.len(), 4 * p.total_params() + p.metadata_bytes());
            prop_assert_eq!(ParameterSet::from_bytes(&bytes).unwrap(), p);
        }
    }
}
