//! Dense layers with explicit backward passes and named-tensor containers.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Affine layer `y = x·W + b` on row-major batches (`x` is `n × in`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `in × out`.
    pub weight: DMatrix<f64>,
    /// `1 × out`.
    pub bias: DMatrix<f64>,
}

impl Dense {
    /// Uniform initialization in `[-1/√in, 1/√in]` for weights and biases.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut draw = |_, _| rng.random_range(-bound..=bound);
        let weight = DMatrix::from_fn(fan_in, fan_out, &mut draw);
        let bias = DMatrix::from_fn(1, fan_out, &mut draw);
        Self { weight, bias }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: DMatrix::zeros(fan_in, fan_out),
            bias: DMatrix::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * &self.weight;
        for mut r in y.row_iter_mut() {
            r += &self.bias;
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &DMatrix<f64>, dy: &DMatrix<f64>, grad: &mut Dense) -> DMatrix<f64> {
        grad.weight += x.transpose() * dy;
        for r in dy.row_iter() {
            grad.bias += r;
        }
        dy * self.weight.transpose()
    }
}

pub fn relu(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.map(|v| v.max(0.0))
}

/// `relu` with its gate either taken from `pre > 0` or pinned to `mask`
/// (column-major, one flag per entry). Returns the output and the gate used.
pub fn gated_relu(pre: &DMatrix<f64>, mask: Option<&[bool]>) -> (DMatrix<f64>, Vec<bool>) {
    let gate: Vec<bool> = match mask {
        Some(m) => m.to_vec(),
        None => pre.iter().map(|&v| v > 0.0).collect(),
    };
    let mut out = pre.clone();
    for (v, &g) in out.iter_mut().zip(&gate) {
        if !g {
            *v = 0.0;
        }
    }
    (out, gate)
}

/// Gradient through a gate returned by [`gated_relu`].
pub fn gate_backward(gate: &[bool], dy: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = dy.clone();
    for (v, &g) in out.iter_mut().zip(gate) {
        if !g {
            *v = 0.0;
        }
    }
    out
}

/// Gradient through `relu` given its pre-activation.
pub fn relu_backward(pre: &DMatrix<f64>, dy: &DMatrix<f64>) -> DMatrix<f64> {
    dy.zip_map(pre, |g, p| if p > 0.0 { g } else { 0.0 })
}

/// Ordered list of named matrices. Used for parameters, gradients and
/// checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorSet {
    entries: Vec<(String, DMatrix<f64>)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    /// Row-major.
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    tensors: Vec<TensorRecord>,
}

impl TensorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: DMatrix<f64>) {
        self.entries.push((name.into(), value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DMatrix<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// `self + alpha·other`, entry by entry. Names and shapes must agree.
    pub fn add_scaled(&self, alpha: f64, other: &TensorSet) -> Result<TensorSet> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} tensors vs {}",
                self.len(),
                other.len()
            )));
        }
        let mut out = TensorSet::new();
        for ((n, a), (m, b)) in self.entries.iter().zip(&other.entries) {
            if n != m || a.shape() != b.shape() {
                return Err(Error::DimensionMismatch(format!("{n} {:?} vs {m} {:?}", a.shape(), b.shape())));
            }
            out.push(n.clone(), a + b * alpha);
        }
        Ok(out)
    }

    pub fn to_json_string(&self) -> String {
        let file = CheckpointFile {
            tensors: self
                .entries
                .iter()
                .map(|(name, v)| TensorRecord {
                    name: name.clone(),
                    shape: [v.nrows(), v.ncols()],
                    data: v.transpose().as_slice().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("tensors serialize")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: CheckpointFile =
            serde_json::from_str(s).map_err(|e| Error::invalid("checkpoint", e.to_string()))?;
        let mut set = TensorSet::new();
        for t in file.tensors {
            let [r, c] = t.shape;
            if t.data.len() != r * c {
                return Err(Error::invalid(
                    format!("checkpoint.{}", t.name),
                    format!("shape {r}x{c} needs {} values, found {}", r * c, t.data.len()),
                ));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("checkpoint.{}", t.name), "non-finite value"));
            }
            if set.get(&t.name).is_some() {
                return Err(Error::invalid(format!("checkpoint.{}", t.name), "duplicate tensor"));
            }
            set.push(t.name, DMatrix::from_row_slice(r, c, &t.data));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s).map_err(|e| match e {
            Error::InvalidParameter { path: p, reason } => Error::Format {
                path: path.to_path_buf(),
                reason: format!("{p}: {reason}"),
            },
            other => other,
        })
    }
}
