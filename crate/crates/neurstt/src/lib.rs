//! NeurSTT: unsupervised infrared small-target detection on image
//! sequences via a neural-represented spatial-temporal tensor.
//!
//! A sequence of frames is stacked into a 3-D tensor `D` and separated
//! into a smooth low-rank background `B` and a sparse target tensor `T`.
//! The background is a Tucker-factored implicit representation: a small
//! learnable core tensor contracted with three factor matrices produced
//! by sinusoidal coordinate MLPs (one per axis). Fitting minimizes, with
//! Adam, the sum of a per-frame nuclear-norm loss on `B`, an l1 loss on
//! the soft-thresholded residual `T = ST(D - B)`, and a neural 3-D total
//! variation built from the analytic coordinate derivatives of the
//! representation. Detection masks come from adaptive thresholding of the
//! normalized target map.
//!
//! Modules:
//!
//! * [`tensor3`] — dense 3-D tensors, Tucker algebra, Jacobi SVD.
//! * [`autograd`] — reverse-mode differentiation over the primitive set
//!   the loss needs, plus the Adam update.
//! * [`lrtf`] — the low-rank tensor function: coordinate grids, factor
//!   networks, background evaluation, analytic derivatives, TV terms.
//! * [`solver`] — the optimization loop and mask post-processing.
//! * [`metrics`] — 3-D ROC curves, the AUC family, IoU and F1.
//! * [`synth`] — synthetic sequence generator with oracle masks and
//!   noise models.
//! * [`check`] — seeded self-check suites (gradients, Tucker algebra,
//!   prox oracle) for the `check` CLI command.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! crate-root aliases fix `f64`, the precision the solver defaults
//! assume.

pub mod autograd;
pub mod check;
pub mod error;
pub mod lrtf;
pub mod metrics;
pub mod scalar;
pub mod solver;
pub mod synth;
pub mod tensor3;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Observation / background / target container at solver precision.
pub type SequenceTensor = tensor3::Tensor3<f64>;
/// Dense matrix at solver precision.
pub type DenseMatrix = tensor3::Matrix<f64>;
/// Single-precision tensor, for lightweight experimentation.
pub type SequenceTensorF32 = tensor3::Tensor3<f32>;
/// Single-precision matrix.
pub type DenseMatrixF32 = tensor3::Matrix<f32>;
