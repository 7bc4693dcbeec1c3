//! Discrete fields on masked grids and the finite-difference exterior calculus.

mod domain;
mod field;
pub mod hodge;
pub mod io;
pub mod ops;
pub mod poisson;

pub use domain::{GridDomain, NodeClass, Shape};
pub use field::{form_basis, form_count, form_position, Field, ValueShape};
pub use hodge::{hodge_potential, HodgePotential};
pub use ops::{
    codifferential, exterior_derivative, hodge_star, inner_product, laplacian, partial, wedge,
    wedge_with,
};
pub use poisson::{poisson_solve, Boundary, PoissonOperator, PoissonReport};
