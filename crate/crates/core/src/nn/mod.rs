//! Differentiable numeric core: tensors, a reverse-mode tape, parameters,
//! Adam and finite-difference gradient checking.

mod adam;
mod gradcheck;
pub mod ops;
mod primitives;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, BETA1, BETA2, EPSILON};
pub use gradcheck::{grad_check, grad_check_strided, relative_error, GradCheckReport};
pub use primitives::{check_primitive, primitive_names, primitive_suite};
pub use params::{GradSet, ParamEntry, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("tensor dims must be positive, got ({rows}, {cols})")]
    EmptyTensor { rows: usize, cols: usize },
    #[error("window of {window} rows does not fit a page of {rows} rows")]
    Window { window: usize, rows: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter sets disagree: {0}")]
    Consistency(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFinite(String),
}

/// Optimisation hyperparameters shared by the trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingHyper {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for TrainingHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8192,
            gamma: 0.95,
            tau: 0.9,
            seed: 0,
        }
    }
}

impl TrainingHyper {
    pub fn validate(&self) -> Result<(), NnError> {
        // lr == 0 is allowed: it freezes the parameters.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(NnError::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(NnError::Config(format!("gamma must be in [0, 1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(NnError::Config(format!("tau must be in [0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

/// Fully connected stack: ReLU on hidden layers, identity on the last.
///
/// Parameters live in a [`ParamSet`] under `{prefix}.l{i}.w` / `{prefix}.l{i}.b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    prefix: String,
    dims: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, input: usize, widths: &[usize]) -> Result<Self, NnError> {
        if widths.is_empty() {
            return Err(NnError::Config("MLP needs at least one layer width".into()));
        }
        if input == 0 || widths.contains(&0) {
            return Err(NnError::Config(format!("MLP widths must be positive: {input} -> {widths:?}")));
        }
        let mut dims = vec![input];
        dims.extend_from_slice(widths);
        Ok(Self {
            prefix: prefix.into(),
            dims,
        })
    }

    pub fn input_width(&self) -> usize {
        self.dims[0]
    }

    pub fn output_width(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.b", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) -> Result<(), NnError> {
        for l in 0..self.layers() {
            params.insert_glorot(self.weight_name(l), self.dims[l], self.dims[l + 1], rng)?;
            params.insert_zeros(self.bias_name(l), 1, self.dims[l + 1])?;
        }
        Ok(())
    }

    /// Applies the stack to every row of `x`.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, params: &'a ParamSet, x: Var) -> Result<Var, NnError> {
        let mut h = x;
        for l in 0..self.layers() {
            let w = tape.param(params, &self.weight_name(l))?;
            let b = tape.param(params, &self.bias_name(l))?;
            h = tape.affine(h, w, b)?;
            if l + 1 < self.layers() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}
