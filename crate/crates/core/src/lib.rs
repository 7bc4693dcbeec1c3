//! Numerical laboratory for moving frames along maps into embedded manifolds.
//!
//! Maps from masked ball grids into a small zoo of homogeneous targets
//! (spheres, special orthogonal groups, Grassmannians) are differentiated with
//! a finite-difference exterior calculus. On top of that sit the connection
//! form built from the second fundamental form, Coulomb gauges and the frames
//! they induce, Morrey and BMO estimators, Wente-type div-curl solves, and a
//! projected harmonic-map heat flow with Noether-current diagnostics.

// `!(x > t)` is deliberate: it also rejects NaN. Index loops mirror the
// stencil formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod connection;
pub mod error;
pub mod experiments;
pub mod gauge;
pub mod grid;
pub mod harmonic;
pub mod linalg;
pub mod maps;
pub mod norms;
pub mod targets;
pub mod wente;

pub use error::{Error, Result};
pub use grid::{Field, GridDomain, NodeClass, Shape, ValueShape};
pub use targets::{MapField, TargetKind, TargetManifold};
