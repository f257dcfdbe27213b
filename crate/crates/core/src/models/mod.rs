//! The joint generative/predictive model: one parameter set serving both an
//! autoregressive sequence distribution and a property predictor.

mod checkpoint;
mod neural;
mod tabular;

pub use checkpoint::{load_neural, load_tabular, save_neural, save_tabular};
pub use neural::{
    grad_check, train_joint, GradCheckReport, NeuralConfig, NeuralJointModel, TrainConfig,
    TrainTrace,
};
pub use tabular::TabularJointModel;

use crate::seq::{LabeledExample, Sequence};
use crate::view::{sequence_logprob, SeqDist};

/// A sequence distribution that also predicts the objective components of a
/// completed sequence. Generation and prediction share parameters.
pub trait JointModel: SeqDist {
    /// Predicted objective components for `x`; deterministic given parameters.
    fn predict(&self, x: &Sequence) -> Vec<f64>;

    /// Number of predicted components (M).
    fn num_objectives(&self) -> usize;
}

/// Joint negative log-likelihood of a batch:
/// sum over (x, y) of -log p(x) + lambda * 1/2 * |y - yhat(x)|^2.
///
/// The predictive term is the unit-variance Gaussian likelihood with its
/// additive constant (M/2 * log 2pi per example) dropped uniformly, so a
/// perfect predictor contributes exactly zero.
pub fn joint_loss<M: JointModel + ?Sized>(
    model: &M,
    batch: &[LabeledExample],
    lambda: f64,
) -> f64 {
    assert!(!batch.is_empty(), "joint_loss requires a non-empty batch");
    assert!(lambda >= 0.0, "lambda must be non-negative");
    let mut total = 0.0;
    for ex in batch {
        total -= sequence_logprob(model, &ex.sequence);
        if lambda > 0.0 {
            let yhat = model.predict(&ex.sequence);
            let se: f64 = yhat
                .iter()
                .zip(&ex.scores)
                .map(|(p, y)| (p - y) * (p - y))
                .sum();
            total += lambda * 0.5 * se;
        }
    }
    total
}
