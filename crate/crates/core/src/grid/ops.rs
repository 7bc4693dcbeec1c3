//! Finite-difference exterior calculus on masked grids.
//!
//! Interior nodes use centred differences. Boundary-layer nodes fall back to
//! one-sided second-order stencils built from whatever valid neighbours exist.

use std::sync::Arc;

use super::domain::{GridDomain, NodeClass};
use super::field::{form_basis, form_position, Field, ValueShape};
use crate::error::{Error, Result};

/// Up to four (node, weight) pairs.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    nodes: [usize; 4],
    weights: [f64; 4],
    len: usize,
}

impl Stencil {
    fn new(entries: &[(usize, f64)]) -> Self {
        let mut s = Stencil {
            nodes: [0; 4],
            weights: [0.0; 4],
            len: entries.len(),
        };
        for (i, &(n, w)) in entries.iter().enumerate() {
            s.nodes[i] = n;
            s.weights[i] = w;
        }
        s
    }

    pub(crate) fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len).map(move |i| (self.nodes[i], self.weights[i]))
    }
}

/// First-derivative stencil at `p` along `axis`.
pub(crate) fn first_derivative_stencil(dom: &GridDomain, p: usize, axis: usize) -> Stencil {
    let h = dom.spacing();
    let c = dom.class(p);
    if c == NodeClass::Exterior {
        return Stencil::new(&[]);
    }
    let nb = |o: isize| dom.valid_neighbor(p, axis, o);
    if let (Some(m1), Some(p1)) = (nb(-1), nb(1)) {
        return Stencil::new(&[(p1, 0.5 / h), (m1, -0.5 / h)]);
    }
    if let (Some(m1), Some(m2)) = (nb(-1), nb(-2)) {
        return Stencil::new(&[(p, 1.5 / h), (m1, -2.0 / h), (m2, 0.5 / h)]);
    }
    if let (Some(p1), Some(p2)) = (nb(1), nb(2)) {
        return Stencil::new(&[(p, -1.5 / h), (p1, 2.0 / h), (p2, -0.5 / h)]);
    }
    if let Some(m1) = nb(-1) {
        return Stencil::new(&[(p, 1.0 / h), (m1, -1.0 / h)]);
    }
    if let Some(p1) = nb(1) {
        return Stencil::new(&[(p1, 1.0 / h), (p, -1.0 / h)]);
    }
    Stencil::new(&[])
}

/// Second-derivative stencil at `p` along `axis`.
pub(crate) fn second_derivative_stencil(dom: &GridDomain, p: usize, axis: usize) -> Stencil {
    let h2 = dom.spacing() * dom.spacing();
    if !dom.is_valid(p) {
        return Stencil::new(&[]);
    }
    let nb = |o: isize| dom.valid_neighbor(p, axis, o);
    if let (Some(m1), Some(p1)) = (nb(-1), nb(1)) {
        return Stencil::new(&[(m1, 1.0 / h2), (p, -2.0 / h2), (p1, 1.0 / h2)]);
    }
    for s in [1isize, -1] {
        if let (Some(a), Some(b), Some(c)) = (nb(s), nb(2 * s), nb(3 * s)) {
            return Stencil::new(&[(p, 2.0 / h2), (a, -5.0 / h2), (b, 4.0 / h2), (c, -1.0 / h2)]);
        }
    }
    for s in [1isize, -1] {
        if let (Some(a), Some(b)) = (nb(s), nb(2 * s)) {
            return Stencil::new(&[(p, 1.0 / h2), (a, -2.0 / h2), (b, 1.0 / h2)]);
        }
    }
    Stencil::new(&[])
}

/// Accumulate `weight * f[q, comp, :]` over the stencil into `out`.
#[inline]
fn apply(f: &Field, st: &Stencil, comp: usize, scale: f64, out: &mut [f64]) {
    for (q, w) in st.iter() {
        let v = f.value(q, comp);
        for (o, x) in out.iter_mut().zip(v) {
            *o += scale * w * x;
        }
    }
}

/// Partial derivative of every component along `axis`.
pub fn partial(f: &Field, axis: usize) -> Field {
    let dom = f.domain().clone();
    let mut out = Field::zeros(&dom, f.degree(), f.shape()).expect("same degree");
    let nv = f.nval();
    for p in dom.valid_nodes() {
        let st = first_derivative_stencil(&dom, p, axis);
        for c in 0..f.ncomp() {
            let mut buf = vec![0.0; nv];
            apply(f, &st, c, 1.0, &mut buf);
            out.value_mut(p, c).copy_from_slice(&buf);
        }
    }
    out
}

/// Sign of the permutation that merges two disjoint sorted index lists.
fn merge_sign(a: &[usize], b: &[usize]) -> f64 {
    let inversions: usize = a
        .iter()
        .map(|&i| b.iter().filter(|&&j| j < i).count())
        .sum();
    if inversions.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// Exterior derivative `d` of a degree-k field.
pub fn exterior_derivative(f: &Field) -> Result<Field> {
    let dom = f.domain().clone();
    let m = dom.dim();
    let k = f.degree();
    if k >= m {
        return Err(Error::DegreeOutOfRange {
            degree: k + 1,
            dim: m,
        });
    }
    let out_basis = form_basis(m, k + 1);
    // (dω)_J = Σ_t (-1)^t ∂_{j_t} ω_{J \ j_t}
    let terms: Vec<Vec<(usize, usize, f64)>> = out_basis
        .iter()
        .map(|set| {
            (0..set.len())
                .map(|t| {
                    let mut rest = set.clone();
                    let axis = rest.remove(t);
                    let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
                    (axis, form_position(m, &rest), sign)
                })
                .collect()
        })
        .collect();
    let mut out = Field::zeros(&dom, k + 1, f.shape())?;
    let nv = f.nval();
    let mut buf = vec![0.0; nv];
    for p in dom.valid_nodes() {
        let stencils: Vec<Stencil> = (0..m)
            .map(|a| first_derivative_stencil(&dom, p, a))
            .collect();
        for (j, list) in terms.iter().enumerate() {
            buf.fill(0.0);
            for &(axis, comp, sign) in list {
                apply(f, &stencils[axis], comp, sign, &mut buf);
            }
            out.value_mut(p, j).copy_from_slice(&buf);
        }
    }
    Ok(out)
}

/// Codifferential `d*` with the negative-divergence convention,
/// `d*X = -Σ ∂_i X_i` on one-forms.
pub fn codifferential(f: &Field) -> Result<Field> {
    let dom = f.domain().clone();
    let m = dom.dim();
    let k = f.degree();
    if k == 0 {
        return Err(Error::DegreeOutOfRange { degree: 0, dim: m });
    }
    let out_basis = form_basis(m, k - 1);
    // (d*ω)_I = -Σ_{a ∉ I} (-1)^{pos(a, I ∪ a)} ∂_a ω_{I ∪ a}
    let terms: Vec<Vec<(usize, usize, f64)>> = out_basis
        .iter()
        .map(|set| {
            (0..m)
                .filter(|a| !set.contains(a))
                .map(|a| {
                    let mut full = set.clone();
                    full.push(a);
                    full.sort_unstable();
                    let pos = full.iter().position(|&x| x == a).unwrap();
                    let sign = if pos % 2 == 0 { -1.0 } else { 1.0 };
                    (a, form_position(m, &full), sign)
                })
                .collect()
        })
        .collect();
    let mut out = Field::zeros(&dom, k - 1, f.shape())?;
    let nv = f.nval();
    let mut buf = vec![0.0; nv];
    for p in dom.valid_nodes() {
        let stencils: Vec<Stencil> = (0..m)
            .map(|a| first_derivative_stencil(&dom, p, a))
            .collect();
        for (i, list) in terms.iter().enumerate() {
            buf.fill(0.0);
            for &(axis, comp, sign) in list {
                apply(f, &stencils[axis], comp, sign, &mut buf);
            }
            out.value_mut(p, i).copy_from_slice(&buf);
        }
    }
    Ok(out)
}

/// Componentwise compact Laplacian `Σ ∂²_a` (the 2m+1-point stencil on
/// interior nodes).
pub fn laplacian(f: &Field) -> Field {
    let dom = f.domain().clone();
    let m = dom.dim();
    let mut out = Field::zeros(&dom, f.degree(), f.shape()).expect("same degree");
    let nv = f.nval();
    let mut buf = vec![0.0; nv];
    for p in dom.valid_nodes() {
        let stencils: Vec<Stencil> = (0..m)
            .map(|a| second_derivative_stencil(&dom, p, a))
            .collect();
        for c in 0..f.ncomp() {
            buf.fill(0.0);
            for st in &stencils {
                apply(f, st, c, 1.0, &mut buf);
            }
            out.value_mut(p, c).copy_from_slice(&buf);
        }
    }
    out
}

/// Pointwise wedge product with a caller-supplied value product.
///
/// `product(a, b, sign, out)` must add `sign * (a · b)` into `out`.
pub fn wedge_with(
    a: &Field,
    b: &Field,
    shape: ValueShape,
    mut product: impl FnMut(&[f64], &[f64], f64, &mut [f64]),
) -> Result<Field> {
    let dom: Arc<GridDomain> = a.domain().clone();
    if !dom.same_grid(b.domain()) {
        return Err(Error::ShapeMismatch(
            "wedge operands live on different grids".into(),
        ));
    }
    let m = dom.dim();
    let (j, k) = (a.degree(), b.degree());
    if j + k > m {
        return Err(Error::DegreeOutOfRange {
            degree: j + k,
            dim: m,
        });
    }
    let ba = form_basis(m, j);
    let bb = form_basis(m, k);
    let mut terms: Vec<(usize, usize, usize, f64)> = Vec::new();
    for (ia, sa) in ba.iter().enumerate() {
        for (ib, sb) in bb.iter().enumerate() {
            if sa.iter().any(|x| sb.contains(x)) {
                continue;
            }
            let mut u = sa.clone();
            u.extend_from_slice(sb);
            u.sort_unstable();
            terms.push((ia, ib, form_position(m, &u), merge_sign(sa, sb)));
        }
    }
    let mut out = Field::zeros(&dom, j + k, shape)?;
    for p in dom.valid_nodes() {
        for &(ia, ib, io, sign) in &terms {
            let (va, vb) = (a.value(p, ia), b.value(p, ib));
            product(va, vb, sign, out.value_mut(p, io));
        }
    }
    Ok(out)
}

/// Wedge product where at least one factor is scalar-valued.
pub fn wedge(a: &Field, b: &Field) -> Result<Field> {
    match (a.shape(), b.shape()) {
        (ValueShape::Scalar, s) => wedge_with(a, b, s, |x, y, sg, o| {
            for (oi, yi) in o.iter_mut().zip(y) {
                *oi += sg * x[0] * yi;
            }
        }),
        (s, ValueShape::Scalar) => wedge_with(a, b, s, |x, y, sg, o| {
            for (oi, xi) in o.iter_mut().zip(x) {
                *oi += sg * xi * y[0];
            }
        }),
        (sa, sb) => Err(Error::ShapeMismatch(format!(
            "wedge needs a scalar factor, got {sa:?} and {sb:?}; pair matrix entries with wedge_with"
        ))),
    }
}

/// Euclidean Hodge star `⋆dx_I = ε(I, I^c) dx_{I^c}`.
pub fn hodge_star(f: &Field) -> Field {
    let dom = f.domain().clone();
    let m = dom.dim();
    let k = f.degree();
    let mut out = Field::zeros(&dom, m - k, f.shape()).expect("degree in range");
    let map: Vec<(usize, f64)> = form_basis(m, k)
        .iter()
        .map(|set| {
            let comp: Vec<usize> = (0..m).filter(|a| !set.contains(a)).collect();
            (form_position(m, &comp), merge_sign(set, &comp))
        })
        .collect();
    for p in dom.valid_nodes() {
        for (c, &(oc, sign)) in map.iter().enumerate() {
            let v: Vec<f64> = f.value(p, c).iter().map(|x| sign * x).collect();
            out.value_mut(p, oc).copy_from_slice(&v);
        }
    }
    out
}

/// Sum over valid nodes of the pointwise Euclidean inner product, times `h^m`.
pub fn inner_product(a: &Field, b: &Field) -> Result<f64> {
    if !a.same_layout(b) {
        return Err(Error::ShapeMismatch(
            "inner product of differently shaped fields".into(),
        ));
    }
    let dom = a.domain();
    let s: f64 = dom
        .valid_nodes()
        .map(|p| {
            a.node(p)
                .iter()
                .zip(b.node(p))
                .map(|(x, y)| x * y)
                .sum::<f64>()
        })
        .sum();
    Ok(s * dom.cell_volume())
}
