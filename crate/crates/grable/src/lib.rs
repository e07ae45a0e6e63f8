//! # grable
//!
//! A library and CLI for studying how table-to-graph constructors shape what
//! message-passing models can express over tabular data.
//!
//! The pieces fit together as follows:
//! - [`table`]: schemas, rows, tables, CSV ingestion and split utilities;
//! - [`datagen`]: seeded synthetic transaction and stress-set generators;
//! - [`tasks`]: the four extension-sensitive labeling functions
//!   (unique / count / double / diamond) and their flip witnesses;
//! - [`constructors`]: trivial, incidence, extended-incidence, CARTE, TARTE,
//!   TabPFN and NFA grables, all preserving the row-node bijection;
//! - [`gml`]: graded modal logic over grable signatures, with a parser,
//!   evaluator and the built-in task formulas;
//! - [`bisim`]: counting bisimulation via color refinement and separation
//!   certificates;
//! - [`mpnn`]: heterogeneous message passing with exact reverse-mode
//!   gradients, training, and a logic-to-network compiler;
//! - [`metrics`]: ROC-AUC, F1 and threshold selection;
//! - [`harness`]: the experiment runner binding everything together.
//!
//! Numeric code is generic over [`scalar::Scalar`]; `f64` is the default
//! used by the CLI and the type aliases below.

pub mod bisim;
pub mod constructors;
pub mod datagen;
pub mod gml;
pub mod harness;
pub mod metrics;
pub mod mpnn;
pub mod scalar;
pub mod table;
pub mod tasks;

pub use scalar::Scalar;

/// Default-precision model used by the CLI and harness.
pub type MpnnModel = mpnn::MpnnModel<f64>;
/// Single-precision model alias.
pub type MpnnModelF32 = mpnn::MpnnModel<f32>;
/// Default-precision gradient report.
pub type GradReport = mpnn::GradReport<f64>;
