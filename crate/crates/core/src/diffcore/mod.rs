//! Dense f64 tensors with define-by-run reverse-mode differentiation, an
//! LSTM cell, and a central-difference gradient checker.

pub mod checkpoint;
mod gradcheck;
mod graph;
mod lstm;
mod tensor;

pub use gradcheck::{
    analytic_gradient, compare_gradients, grad_check, numeric_gradient, relative_error,
    GradCheckReport,
};
pub use graph::{softmax_into, Gradients, Graph, Var};
pub use lstm::{bilstm_encode, bilstm_mean, lstm_cell, GateParams, LstmParams, LstmState};
pub use tensor::{ParamId, ParamStore, Tensor};

/// Negative-side slope of the LeakyReLU used in type attention.
pub const LEAKY_RELU_SLOPE: f64 = 0.2;
