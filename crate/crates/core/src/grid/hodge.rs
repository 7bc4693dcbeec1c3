use serde::Serialize;

use super::field::Field;
use super::ops::{codifferential, exterior_derivative};
use super::poisson::{Boundary, PoissonOperator, PoissonReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct HodgePotential {
    pub xi: Field,
    /// `‖d*ξ − A‖_{L²}`: the size of the part of `A` not captured by `d*ξ`.
    pub reconstruction_residual: f64,
    pub solver: PoissonReport,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct HodgeSummary {
    pub reconstruction_residual: f64,
    pub iterations: usize,
}

/// Two-form potential `ξ` with zero Dirichlet data solving the Hodge
/// Laplacian equation `(dd* + d*d)ξ = dA` componentwise, so that `d*ξ`
/// approximates the co-exact part of `A`.
pub fn hodge_potential(a: &Field) -> Result<HodgePotential> {
    hodge_potential_with(&PoissonOperator::new(a.domain()), a)
}

pub fn hodge_potential_with(op: &PoissonOperator, a: &Field) -> Result<HodgePotential> {
    if a.degree() != 1 {
        return Err(Error::DegreeOutOfRange {
            degree: a.degree(),
            dim: a.domain().dim(),
        });
    }
    let da = exterior_derivative(a)?;
    // componentwise Δ = Σ∂² is minus the Hodge Laplacian
    let rhs = da.scaled(-1.0);
    let (xi, solver) = op.solve_componentwise(&rhs, &Boundary::DirichletZero)?;
    let rec = codifferential(&xi)?;
    let reconstruction_residual = rec.sub(a)?.l2_norm();
    Ok(HodgePotential {
        xi,
        reconstruction_residual,
        solver,
    })
}
