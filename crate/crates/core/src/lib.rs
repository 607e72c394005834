//! Reflected BSDEs driven by a marked point process, solved exactly on
//! finite scenario trees.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix `f64`.

// `!(a <= b)` guards are written that way on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod battery;
pub mod checks;
pub mod error;
pub mod export;
pub mod generator;
pub mod mpp;
pub mod numerics;
pub mod oracle;
pub mod pricing;
pub mod scalar;
pub mod solver;

pub use error::Error;
pub use scalar::Scalar;

pub type Model = mpp::MppModel<f64>;
pub type Tree = mpp::ScenarioTree<f64>;
pub type Field = mpp::NodeField<f64>;
pub type Marks = mpp::MarkField<f64>;
pub type Barrier = solver::Obstacle<f64>;
pub type Solution = solver::RbsdeSolution<f64>;
pub type Market = pricing::MarketModel<f64>;
pub type PricedTree = pricing::MarketTree<f64>;
pub type Constraint = pricing::ConstraintSet<f64>;
pub type DynGenerator = std::sync::Arc<dyn generator::Generator<f64>>;
