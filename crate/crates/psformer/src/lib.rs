//! PSformer: a parameter-shared segment-attention transformer for
//! multivariate time series forecasting, built on a from-scratch
//! reverse-mode autodiff engine and trained with a SAM-wrapped optimizer.
//!
//! The crate is organized along the pipeline:
//!
//! * [`tensor`] — dense tensors with a gradient tape
//! * [`dataset`] — CSV ingestion, chronological splits, sliding windows
//! * [`model`] — the PSformer architecture and parameter-sharing modes
//! * [`optim`] — Adam, the SAM wrapper, early stopping
//! * [`trainer`] — the training/evaluation loop and run reports
//! * [`gradcheck`] — finite-difference verification of the backward pass

pub mod dataset;
pub mod element;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use element::Element;
