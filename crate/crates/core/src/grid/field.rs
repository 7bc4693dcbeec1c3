use std::sync::Arc;

use serde::Serialize;

use super::domain::GridDomain;
use crate::error::{Error, Result};

/// Pointwise value carried by each form component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ValueShape {
    Scalar,
    Vector(usize),
    /// Square matrix stored row-major.
    Matrix(usize),
}

impl ValueShape {
    #[allow(clippy::len_without_is_empty)]
    pub fn len(self) -> usize {
        match self {
            ValueShape::Scalar => 1,
            ValueShape::Vector(d) => d,
            ValueShape::Matrix(d) => d * d,
        }
    }

    pub fn code(self) -> (u32, u32) {
        match self {
            ValueShape::Scalar => (0, 1),
            ValueShape::Vector(d) => (1, d as u32),
            ValueShape::Matrix(d) => (2, d as u32),
        }
    }

    pub fn from_code(code: u32, d: u32) -> Result<Self> {
        match code {
            0 => Ok(ValueShape::Scalar),
            1 => Ok(ValueShape::Vector(d as usize)),
            2 => Ok(ValueShape::Matrix(d as usize)),
            _ => Err(Error::Format(format!("unknown value-shape code {code}"))),
        }
    }
}

/// Sorted index sets of the basis `k`-forms in lexicographic order.
pub fn form_basis(dim: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, dim: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for i in start..dim {
            cur.push(i);
            rec(i + 1, dim, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, dim, degree, &mut Vec::new(), &mut out);
    out
}

pub fn form_count(dim: usize, degree: usize) -> usize {
    form_basis(dim, degree).len()
}

/// Position of a sorted index set in [`form_basis`].
pub fn form_position(dim: usize, set: &[usize]) -> usize {
    form_basis(dim, set.len())
        .iter()
        .position(|s| s == set)
        .expect("index set must be sorted and in range")
}

/// Differential form with scalar, vector or matrix values on a grid.
///
/// Storage is row-major in `(node, form component, value entry)`.
#[derive(Debug, Clone)]
pub struct Field {
    domain: Arc<GridDomain>,
    degree: usize,
    shape: ValueShape,
    ncomp: usize,
    data: Vec<f64>,
    exterior_zeroed: bool,
}

impl Field {
    pub fn zeros(domain: &Arc<GridDomain>, degree: usize, shape: ValueShape) -> Result<Self> {
        if degree > domain.dim() {
            return Err(Error::DegreeOutOfRange {
                degree,
                dim: domain.dim(),
            });
        }
        let ncomp = form_count(domain.dim(), degree);
        Ok(Self {
            domain: domain.clone(),
            degree,
            shape,
            ncomp,
            data: vec![0.0; domain.num_nodes() * ncomp * shape.len()],
            exterior_zeroed: true,
        })
    }

    pub fn from_raw(
        domain: &Arc<GridDomain>,
        degree: usize,
        shape: ValueShape,
        data: Vec<f64>,
    ) -> Result<Self> {
        let mut f = Self::zeros(domain, degree, shape)?;
        if data.len() != f.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values, got {}",
                f.data.len(),
                data.len()
            )));
        }
        f.data = data;
        f.exterior_zeroed = f.check_exterior_zero();
        Ok(f)
    }

    /// Fill every valid node by `fill(node, x, out)` where `out` spans all
    /// form components of that node.
    pub fn from_fn<F>(
        domain: &Arc<GridDomain>,
        degree: usize,
        shape: ValueShape,
        mut fill: F,
    ) -> Result<Self>
    where
        F: FnMut(usize, &[f64], &mut [f64]),
    {
        let mut f = Self::zeros(domain, degree, shape)?;
        let m = domain.dim();
        for p in 0..domain.num_nodes() {
            if domain.is_valid(p) {
                let x = domain.coords(p);
                fill(p, &x[..m], f.node_mut(p));
            }
        }
        Ok(f)
    }

    pub fn scalar_fn(domain: &Arc<GridDomain>, f: impl Fn(&[f64]) -> f64) -> Self {
        Self::from_fn(domain, 0, ValueShape::Scalar, |_, x, out| out[0] = f(x))
            .expect("degree 0 is always valid")
    }

    pub fn vector_fn(domain: &Arc<GridDomain>, d: usize, f: impl Fn(&[f64], &mut [f64])) -> Self {
        Self::from_fn(domain, 0, ValueShape::Vector(d), |_, x, out| f(x, out))
            .expect("degree 0 is always valid")
    }

    pub fn matrix_fn(domain: &Arc<GridDomain>, d: usize, f: impl Fn(&[f64], &mut [f64])) -> Self {
        Self::from_fn(domain, 0, ValueShape::Matrix(d), |_, x, out| f(x, out))
            .expect("degree 0 is always valid")
    }

    /// Degree-1 scalar field from its `m` components.
    pub fn one_form_fn(domain: &Arc<GridDomain>, f: impl Fn(&[f64], &mut [f64])) -> Self {
        Self::from_fn(domain, 1, ValueShape::Scalar, |_, x, out| f(x, out))
            .expect("degree 1 is always valid")
    }

    pub fn domain(&self) -> &Arc<GridDomain> {
        &self.domain
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn shape(&self) -> ValueShape {
        self.shape
    }

    pub fn ncomp(&self) -> usize {
        self.ncomp
    }

    pub fn nval(&self) -> usize {
        self.shape.len()
    }

    /// Number of stored values per node.
    pub fn stride(&self) -> usize {
        self.ncomp * self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn exterior_zeroed(&self) -> bool {
        self.exterior_zeroed
    }

    pub fn node(&self, p: usize) -> &[f64] {
        let s = self.stride();
        &self.data[p * s..(p + 1) * s]
    }

    pub fn node_mut(&mut self, p: usize) -> &mut [f64] {
        let s = self.stride();
        &mut self.data[p * s..(p + 1) * s]
    }

    /// Value entries of form component `c` at node `p`.
    pub fn value(&self, p: usize, c: usize) -> &[f64] {
        let nv = self.nval();
        let base = p * self.stride() + c * nv;
        &self.data[base..base + nv]
    }

    pub fn value_mut(&mut self, p: usize, c: usize) -> &mut [f64] {
        let nv = self.nval();
        let base = p * self.stride() + c * nv;
        &mut self.data[base..base + nv]
    }

    pub fn same_layout(&self, other: &Field) -> bool {
        self.domain.same_grid(&other.domain)
            && self.degree == other.degree
            && self.shape == other.shape
    }

    fn require_same_layout(&self, other: &Field) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "degree {} {:?} vs degree {} {:?}",
                self.degree, self.shape, other.degree, other.shape
            )))
        }
    }

    pub fn zero_exterior(&mut self) {
        let s = self.stride();
        for p in 0..self.domain.num_nodes() {
            if !self.domain.is_valid(p) {
                self.data[p * s..(p + 1) * s].fill(0.0);
            }
        }
        self.exterior_zeroed = true;
    }

    fn check_exterior_zero(&self) -> bool {
        (0..self.domain.num_nodes())
            .filter(|&p| !self.domain.is_valid(p))
            .all(|p| self.node(p).iter().all(|&v| v == 0.0))
    }

    pub fn scaled(&self, c: f64) -> Field {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= c);
        out
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.require_same_layout(other)?;
        let mut out = self.clone();
        out.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(out)
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.require_same_layout(other)?;
        let mut out = self.clone();
        out.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a -= b);
        Ok(out)
    }

    /// Squared Euclidean norm over all components at one node.
    pub fn norm_sq_at(&self, p: usize) -> f64 {
        self.node(p).iter().map(|v| v * v).sum()
    }

    pub fn norm_at(&self, p: usize) -> f64 {
        self.norm_sq_at(p).sqrt()
    }

    /// `L^2` norm over valid nodes.
    pub fn l2_norm(&self) -> f64 {
        self.l2_norm_over(|_| true)
    }

    /// `L^2` norm over valid nodes accepted by `keep`.
    pub fn l2_norm_over(&self, keep: impl Fn(usize) -> bool) -> f64 {
        let s: f64 = self
            .domain
            .valid_nodes()
            .filter(|&p| keep(p))
            .map(|p| self.norm_sq_at(p))
            .sum();
        (s * self.domain.cell_volume()).sqrt()
    }

    /// `L^2` norm over interior nodes only.
    pub fn l2_norm_interior(&self) -> f64 {
        let d = self.domain.clone();
        self.l2_norm_over(|p| d.is_interior(p))
    }

    pub fn max_norm(&self) -> f64 {
        self.domain
            .valid_nodes()
            .map(|p| self.norm_at(p))
            .fold(0.0, f64::max)
    }

    pub fn max_norm_interior(&self) -> f64 {
        self.domain
            .interior_nodes()
            .map(|p| self.norm_at(p))
            .fold(0.0, f64::max)
    }

    /// Largest entry of `|M^T + M|` over nodes and form components.
    pub fn skew_residual(&self) -> Result<f64> {
        let d = match self.shape {
            ValueShape::Matrix(d) => d,
            other => {
                return Err(Error::ShapeMismatch(format!(
                    "skew test needs matrices, got {other:?}"
                )))
            }
        };
        let mut worst = 0.0f64;
        for p in self.domain.valid_nodes() {
            for c in 0..self.ncomp {
                let m = self.value(p, c);
                for i in 0..d {
                    for j in i..d {
                        worst = worst.max((m[i * d + j] + m[j * d + i]).abs());
                    }
                }
            }
        }
        Ok(worst)
    }

    /// Scalar field of the same degree holding value entry `v`.
    pub fn entry(&self, v: usize) -> Field {
        let mut out =
            Field::zeros(&self.domain, self.degree, ValueShape::Scalar).expect("same degree");
        let nv = self.nval();
        for p in 0..self.domain.num_nodes() {
            for c in 0..self.ncomp {
                out.data[p * self.ncomp + c] = self.data[(p * self.ncomp + c) * nv + v];
            }
        }
        out
    }

    /// Write scalar field `src` into value entry `v`.
    pub fn set_entry(&mut self, v: usize, src: &Field) -> Result<()> {
        if src.degree != self.degree || src.shape != ValueShape::Scalar {
            return Err(Error::ShapeMismatch(
                "entry source must be scalar of equal degree".into(),
            ));
        }
        let nv = self.nval();
        for p in 0..self.domain.num_nodes() {
            for c in 0..self.ncomp {
                self.data[(p * self.ncomp + c) * nv + v] = src.data[p * self.ncomp + c];
            }
        }
        Ok(())
    }

    /// Apply `f` to the value block of every (valid node, component) pair,
    /// producing a field with the given output shape.
    pub fn map_values(
        &self,
        shape: ValueShape,
        mut f: impl FnMut(usize, &[f64], &mut [f64]),
    ) -> Field {
        let mut out = Field::zeros(&self.domain, self.degree, shape).expect("same degree");
        let (ni, no) = (self.nval(), shape.len());
        for p in self.domain.valid_nodes() {
            for c in 0..self.ncomp {
                let base = p * self.ncomp + c;
                f(
                    p,
                    &self.data[base * ni..(base + 1) * ni],
                    &mut out.data[base * no..(base + 1) * no],
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_counts() {
        assert_eq!(form_count(2, 1), 2);
        assert_eq!(form_count(2, 2), 1);
        assert_eq!(form_count(3, 1), 3);
        assert_eq!(form_count(3, 2), 3);
        assert_eq!(form_basis(3, 2), vec![vec![0, 1], vec![0, 2], vec![1, 2]]);
        assert_eq!(form_position(3, &[0, 2]), 1);
    }

    #[test]
    fn exterior_is_zero_after_construction() {
        let g = GridDomain::ball(2, 16).unwrap();
        let f = Field::scalar_fn(&g, |_| 3.0);
        assert!(f.exterior_zeroed());
        for p in 0..g.num_nodes() {
            if !g.is_valid(p) {
                assert_eq!(f.node(p)[0], 0.0);
            }
        }
    }

    #[test]
    fn skew_predicate() {
        let g = GridDomain::ball(2, 12).unwrap();
        let f = Field::matrix_fn(&g, 2, |x, m| {
            m.copy_from_slice(&[0.0, x[0], -x[0], 0.0]);
        });
        assert_eq!(f.skew_residual().unwrap(), 0.0);
        let s = Field::matrix_fn(&g, 2, |_, m| m.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]));
        assert_eq!(s.skew_residual().unwrap(), 2.0);
    }

    #[test]
    fn entry_round_trip() {
        let g = GridDomain::ball(2, 12).unwrap();
        let f = Field::vector_fn(&g, 3, |x, v| v.copy_from_slice(&[x[0], x[1], 1.0]));
        let mut h = Field::zeros(&g, 0, ValueShape::Vector(3)).unwrap();
        for v in 0..3 {
            h.set_entry(v, &f.entry(v)).unwrap();
        }
        assert_eq!(h.data(), f.data());
    }
}
