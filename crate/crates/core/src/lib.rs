//! Research bench for page-level interest modelling in feed ads allocation.
//!
//! * [`nn`] — tensors, reverse-mode tape, Adam, gradient checking
//! * [`features`] — items, pages, states, actions and the embedding layer
//! * [`model`] — the multi-channel page-interest Q-network
//! * [`sim`] — page-turn feed simulator and offline log generation
//! * [`agent`] — offline DQN: TD loss, target network, greedy selection
//! * [`harness`] — experiment configs, value-iteration oracle, evaluation,
//!   ablations and metrics files

pub mod agent;
pub mod features;
pub mod harness;
pub mod model;
pub mod nn;
pub mod sim;

pub use features::{Action, FeedbackKind, Item, PageLayout, PageRecord, State};
pub use model::{Ablation, DpinConfig, DpinModel};
pub use nn::{ParamSet, Tensor, TrainingHyper};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Nn(#[from] nn::NnError),
    #[error("infeasible action: {0}")]
    Feasibility(#[from] features::FeasibilityError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("state space has {count} states, more than the limit of {limit}")]
    StateSpaceTooLarge { count: usize, limit: usize },
    #[error("checkpoint config hash {found} does not match expected {expected}")]
    CheckpointMismatch { expected: String, found: String },
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
