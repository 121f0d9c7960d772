//! Differentiable integral-equation solvers and neural integral operators.

pub mod attention;
pub mod datagen;
pub mod error;
pub mod nie;
pub mod nn;
pub mod quadrature;
pub mod scalar;
pub mod solver;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type DTensor = tensor::Tensor<f64>;
pub type DParamStore = tensor::ParamStore<f64>;
pub type DRecord<'p> = tensor::Record<'p, f64>;
pub type DTimeGrid = quadrature::TimeGrid<f64>;
pub type DLattice = quadrature::Lattice<f64>;
pub type DGridFunction = quadrature::GridFunction<f64>;
pub type DSolverConfig = solver::SolverConfig<f64>;
pub type DSolution = solver::SolutionTrajectory<f64>;
pub type DNieModel = nie::NieModel<f64>;
pub type DAttentionModel = attention::AttentionModel<f64>;
