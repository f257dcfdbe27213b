//! Sample-efficient optimization of discrete sequences.
//!
//! One autoregressive model carries two heads that share a trunk: a generator
//! over token sequences and a predictor of their objective values. At
//! inference time the predictor biases the generator: batches are drawn
//! without replacement via Gumbel-Top-k stochastic beam search, scored, and
//! their mean-centered advantages are folded back into the sampling
//! distribution through an augmented trie that also removes the probability
//! mass of everything already drawn. Oracle calls are metered by a hard
//! budget ledger throughout.

pub mod baselines;
pub mod config;
pub mod error;
pub mod harness;
pub mod jsi;
pub mod logspace;
pub mod models;
pub mod objectives;
pub mod rng;
pub mod sbs;
pub mod seq;
pub mod tilt;
pub mod verify;
pub mod view;

pub use error::{CoreError, Result};
pub use rng::Rng;
pub use seq::{LabeledExample, Sequence, TokenId, Vocabulary};
