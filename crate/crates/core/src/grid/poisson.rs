//! Matrix-free conjugate-gradient Poisson solver on masked grids.
//!
//! Dirichlet data is imposed on the true sphere(s) bounding the mask with a
//! symmetric ghost-node treatment: a missing neighbour at fractional distance
//! `θh` is replaced by the linear extrapolation through the boundary value,
//! which keeps the operator symmetric and the solution second-order accurate.

use std::sync::Arc;

use serde::Serialize;

use super::domain::{GridDomain, Shape};
use super::field::{Field, ValueShape};
use crate::error::{Error, Result};

pub const RELATIVE_TOLERANCE: f64 = 1e-10;
const MIN_THETA: f64 = 1e-6;

pub enum Boundary<'a> {
    DirichletZero,
    Dirichlet(&'a dyn Fn(&[f64]) -> f64),
    Periodic,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PoissonReport {
    pub iterations: usize,
    pub relative_residual: f64,
    /// Mean subtracted from a periodic right-hand side (zero otherwise).
    pub mean_removed: f64,
}

#[derive(Debug, Clone)]
struct Crossing {
    unknown: usize,
    coef: f64,
    point: [f64; 3],
}

/// Negated Laplacian `-Δ` restricted to the valid nodes of a domain.
#[derive(Debug, Clone)]
pub struct PoissonOperator {
    domain: Arc<GridDomain>,
    nodes: Vec<usize>,
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
    diag: Vec<f64>,
    crossings: Vec<Crossing>,
    inv_h2: f64,
}

impl PoissonOperator {
    pub fn new(domain: &Arc<GridDomain>) -> Self {
        let dom = domain.clone();
        let m = dom.dim();
        let h = dom.spacing();
        let inv_h2 = 1.0 / (h * h);
        let mut slot = vec![u32::MAX; dom.num_nodes()];
        let nodes: Vec<usize> = dom.valid_nodes().collect();
        for (i, &p) in nodes.iter().enumerate() {
            slot[p] = i as u32;
        }
        let mut offsets = Vec::with_capacity(nodes.len() + 1);
        let mut neighbors = Vec::new();
        let mut diag = vec![0.0; nodes.len()];
        let mut crossings = Vec::new();
        offsets.push(0);
        for (i, &p) in nodes.iter().enumerate() {
            let x = dom.coords(p);
            for a in 0..m {
                for s in [-1isize, 1] {
                    match dom.valid_neighbor(p, a, s) {
                        Some(q) => {
                            neighbors.push(slot[q]);
                            diag[i] += inv_h2;
                        }
                        None => {
                            let theta = crossing_fraction(&dom, &x, a, s as f64).max(MIN_THETA);
                            let coef = inv_h2 / theta;
                            diag[i] += coef;
                            let mut point = x;
                            point[a] += s as f64 * theta * h;
                            crossings.push(Crossing {
                                unknown: i,
                                coef,
                                point,
                            });
                        }
                    }
                }
            }
            offsets.push(neighbors.len());
        }
        Self {
            domain: dom,
            nodes,
            offsets,
            neighbors,
            diag,
            crossings,
            inv_h2,
        }
    }

    pub fn domain(&self) -> &Arc<GridDomain> {
        &self.domain
    }

    pub fn unknowns(&self) -> usize {
        self.nodes.len()
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        for i in 0..self.nodes.len() {
            let mut acc = self.diag[i] * u[i];
            for &j in &self.neighbors[self.offsets[i]..self.offsets[i + 1]] {
                acc -= self.inv_h2 * u[j as usize];
            }
            out[i] = acc;
        }
    }

    /// Solve `Δφ = rhs` for a scalar degree-0 field.
    pub fn solve(&self, rhs: &Field, bc: &Boundary<'_>) -> Result<(Field, PoissonReport)> {
        if rhs.degree() != 0 || rhs.shape() != ValueShape::Scalar {
            return Err(Error::ShapeMismatch(
                "poisson_solve expects a scalar 0-form".into(),
            ));
        }
        if !rhs.domain().same_grid(&self.domain) {
            return Err(Error::ShapeMismatch(
                "right-hand side lives on another grid".into(),
            ));
        }
        let values: Vec<f64> = self.nodes.iter().map(|&p| rhs.node(p)[0]).collect();
        let (sol, report) = self.solve_values(&values, bc)?;
        let mut out = Field::zeros(&self.domain, 0, ValueShape::Scalar)?;
        for (i, &p) in self.nodes.iter().enumerate() {
            out.node_mut(p)[0] = sol[i];
        }
        Ok((out, report))
    }

    /// Solve every scalar entry of an arbitrary field with the same boundary
    /// condition (componentwise Laplacian).
    pub fn solve_componentwise(
        &self,
        rhs: &Field,
        bc: &Boundary<'_>,
    ) -> Result<(Field, PoissonReport)> {
        let stride = rhs.stride();
        let mut out = Field::zeros(&self.domain, rhs.degree(), rhs.shape())?;
        let mut worst = PoissonReport {
            iterations: 0,
            relative_residual: 0.0,
            mean_removed: 0.0,
        };
        for s in 0..stride {
            let values: Vec<f64> = self.nodes.iter().map(|&p| rhs.node(p)[s]).collect();
            let (sol, rep) = self.solve_values(&values, bc)?;
            for (i, &p) in self.nodes.iter().enumerate() {
                out.node_mut(p)[s] = sol[i];
            }
            worst.iterations = worst.iterations.max(rep.iterations);
            worst.relative_residual = worst.relative_residual.max(rep.relative_residual);
            if rep.mean_removed.abs() > worst.mean_removed.abs() {
                worst.mean_removed = rep.mean_removed;
            }
        }
        Ok((out, worst))
    }

    fn solve_values(&self, rhs: &[f64], bc: &Boundary<'_>) -> Result<(Vec<f64>, PoissonReport)> {
        let n = self.nodes.len();
        let mut b: Vec<f64> = rhs.iter().map(|v| -v).collect();
        let mut mean_removed = 0.0;
        match bc {
            Boundary::Periodic => {
                if !self.domain.is_periodic() {
                    return Err(Error::InvalidParameter(
                        "periodic boundary on a non-periodic domain".into(),
                    ));
                }
                mean_removed = b.iter().sum::<f64>() / n as f64;
                b.iter_mut().for_each(|v| *v -= mean_removed);
                mean_removed = -mean_removed;
            }
            Boundary::DirichletZero => {}
            Boundary::Dirichlet(g) => {
                let m = self.domain.dim();
                for c in &self.crossings {
                    b[c.unknown] += c.coef * g(&c.point[..m]);
                }
            }
        }
        if self.domain.is_periodic() && !matches!(bc, Boundary::Periodic) {
            return Err(Error::InvalidParameter(
                "periodic domains need the periodic boundary condition".into(),
            ));
        }
        let res = conjugate_gradient(
            |u, out| self.apply(u, out),
            &self.diag,
            &b,
            RELATIVE_TOLERANCE,
            50 * self.domain.resolution().pow(2),
        )?;
        let mut x = res.0;
        if matches!(bc, Boundary::Periodic) {
            let mean = x.iter().sum::<f64>() / n as f64;
            x.iter_mut().for_each(|v| *v -= mean);
        }
        Ok((
            x,
            PoissonReport {
                iterations: res.1,
                relative_residual: res.2,
                mean_removed,
            },
        ))
    }
}

/// Fraction `θ ∈ (0, 1]` of a grid step from `x` along `s·e_axis` until the
/// first bounding sphere is crossed.
fn crossing_fraction(dom: &GridDomain, x: &[f64; 3], axis: usize, s: f64) -> f64 {
    let h = dom.spacing();
    let rest: f64 = (0..dom.dim())
        .filter(|&b| b != axis)
        .map(|b| x[b] * x[b])
        .sum();
    let radii: Vec<f64> = match dom.shape() {
        Shape::Ball => vec![1.0],
        Shape::Annulus { inner } => vec![1.0, inner],
        Shape::CubePeriodic => return 1.0,
    };
    let xa = x[axis];
    let mut best = f64::INFINITY;
    for r in radii {
        let c = r * r - rest;
        if c < 0.0 {
            continue;
        }
        let sq = c.sqrt();
        for root in [sq - xa, -sq - xa] {
            let t = root * s;
            if t >= 0.0 && t <= h * (1.0 + 1e-12) {
                best = best.min(t);
            }
        }
    }
    if best.is_finite() {
        (best / h).min(1.0)
    } else {
        1.0
    }
}

/// Jacobi-preconditioned conjugate gradient for a symmetric positive
/// (semi-)definite operator. Returns the solution, iteration count and final
/// relative residual.
pub fn conjugate_gradient(
    apply: impl Fn(&[f64], &mut [f64]),
    diag: &[f64],
    b: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, usize, f64)> {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok((x, 0, 0.0));
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut rel = 1.0;
    for it in 1..=max_iters {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::NoConvergence {
                solver: "conjugate gradient",
                iterations: it,
                residual: rel,
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = dot(&r, &r).sqrt() / bnorm;
        if rel <= tol {
            return Ok((x, it, rel));
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NoConvergence {
        solver: "conjugate gradient",
        iterations: max_iters,
        residual: rel,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solve `Δφ = rhs` (scalar 0-form) with the given boundary condition.
pub fn poisson_solve(rhs: &Field, bc: &Boundary<'_>) -> Result<(Field, PoissonReport)> {
    PoissonOperator::new(rhs.domain()).solve(rhs, bc)
}
